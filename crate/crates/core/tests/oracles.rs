mod common;

use groundkie::geometry::{polygon_iou, PixelPolygon};
use groundkie::metrics::{anls, ted_accuracy, tree_edit_distance};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn ted_matches_search_on_three_node_trees() {
    let trees = common::all_trees(3, 2);
    for a in &trees {
        let dist = common::bfs_distances(a, 2, 3);
        for b in &trees {
            let got = tree_edit_distance(
                Some(&common::to_answer_tree(a)),
                Some(&common::to_answer_tree(b)),
            );
            assert_eq!(Some(&got), dist.get(&vec![b.clone()]), "{a:?} vs {b:?}");
        }
    }
}

#[test]
fn tree_enumeration_counts() {
    // ordered trees with n nodes: Catalan(n-1), times 2^n labelings
    let per_size = [2, 4, 16, 80];
    for (n, want) in per_size.iter().enumerate() {
        let got = common::forests(n + 1, 2).iter().filter(|f| f.len() == 1).count();
        assert_eq!(got, *want);
    }
}

#[test]
fn ted_accuracy_normalizes_by_gold_size() {
    let trees = common::all_trees(4, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    use rand::Rng;
    for _ in 0..50 {
        let a = common::to_answer_tree(&trees[rng.gen_range(0..trees.len())]);
        let b = common::to_answer_tree(&trees[rng.gen_range(0..trees.len())]);
        let d = tree_edit_distance(Some(&a), Some(&b)) as f64;
        let want = (1.0 - d / b.size() as f64).max(0.0);
        assert_eq!(ted_accuracy(Some(&a), &b), want);
    }
}

proptest! {
    #[test]
    fn anls_agrees_with_dp(p in "[abAB c]{0,10}", g in "[abAB c]{0,10}") {
        let got = anls(&p, &[&g]).unwrap();
        prop_assert!((got - common::anls_oracle(&p, &g)).abs() < 1e-12);
    }

    #[test]
    fn iou_agrees_with_raster(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = PixelPolygon::canonicalize(common::random_convex(&mut rng, 50.0)).unwrap();
        let b = PixelPolygon::canonicalize(common::random_convex(&mut rng, 50.0)).unwrap();
        let exact = polygon_iou(&a, &b).unwrap();
        prop_assert!((exact - common::raster_iou(&a, &b, 1000)).abs() < 3e-3);
    }
}
