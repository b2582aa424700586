//! Field F1, tree-edit-distance accuracy, ANLS and polygon IoU accuracy on
//! hand-made inputs.
//!
//!     cargo run --example metrics_tour

use groundkie::geometry::{PixelPolygon, Point};
use groundkie::metrics::{anls, field_f1, iou_accuracy, ted_accuracy, tree_edit_distance, AnswerTree, FieldSet};

fn main() -> groundkie::Result<()> {
    let mut gold = FieldSet::new();
    gold.push("total", "12.50");
    gold.push("date", "3 May");
    gold.push("store", "Corner Shop");
    let mut pred = FieldSet::new();
    pred.push("total", "12.50");
    pred.push("date", "3 May");
    pred.push("store", "Corner Shoppe");
    let f = field_f1(&pred, &gold);
    println!("field F1 {:.3} (precision {:.3}, recall {:.3})", f.f1, f.precision, f.recall);

    let gt = AnswerTree::from_fields("receipt", &gold);
    let pt = AnswerTree::from_fields("receipt", &pred);
    println!("gold tree {gt}");
    println!(
        "TED {} -> accuracy {:.3}; empty prediction -> {:.3}",
        tree_edit_distance(Some(&pt), Some(&gt)),
        ted_accuracy(Some(&pt), &gt),
        ted_accuracy(None, &gt)
    );
    let parsed = AnswerTree::parse("receipt(total(12.50),date(3 May)");
    println!("unparseable output becomes a leaf: {parsed}");

    for (p, g) in [("Corner Shoppe", "corner shop"), ("abc", "abd"), ("a", "xyz")] {
        println!("ANLS({p:?}, {g:?}) = {:.4}", anls(p, &[g])?);
    }

    let gold_boxes = vec![
        PixelPolygon::rect(10.0, 10.0, 50.0, 30.0)?,
        PixelPolygon::rect(60.0, 10.0, 90.0, 30.0)?,
    ];
    let preds = vec![
        Some([Point::new(12.0, 11.0), Point::new(52.0, 11.0), Point::new(52.0, 31.0), Point::new(12.0, 31.0)]),
        None,
    ];
    for t in [1e-3, 1e-2, 1e-1, 0.5] {
        println!("IoU accuracy @{t:e}: {:.2}", iou_accuracy(&preds, &gold_boxes, t)?);
    }
    Ok(())
}
