//! The see-then-tell head on its own: eight queries from one hidden state,
//! a softmax over the 1000 location embeddings for each, and the expected
//! bin as the coordinate.
//!
//!     cargo run --example grounding_head

use groundkie::geometry::QuantPolygon;
use groundkie::grounding::{coord_distribution, expected_coord, see_loss, CoordDistribution, GroundingHead};
use groundkie::model::{Model, ModelConfig};
use groundkie::vocab::{printable_ascii, Vocabulary};
use ndarray::Array1;

fn main() -> groundkie::Result<()> {
    let uniform = CoordDistribution::new(vec![1.0 / 1000.0; 1000])?;
    println!("uniform distribution -> {:.3}", expected_coord(&uniform));
    let mut one_hot = vec![0.0; 1000];
    one_hot[417] = 1.0;
    println!("one-hot at 417 -> {:.3}", expected_coord(&CoordDistribution::new(one_hot)?));

    let vocab = Vocabulary::build(&printable_ascii())?;
    let model = Model::new(ModelConfig::desk(vocab.size()), 0)?;
    let head: GroundingHead = model.grounding_head();
    let h = Array1::from_shape_fn(head.dim(), |i| (i as f64 * 0.37).sin());
    let queries = head.project_queries(h.view());
    let first = coord_distribution(&queries[0], head.loc);
    let peak = first.probs().iter().copied().fold(0.0, f64::max);
    println!("first coordinate: max probability {peak:.4}");

    let expected = head.expected_coords(h.view());
    let decoded = head.decode_polygon(h.view());
    println!("expected coordinates {:?}", expected.map(|e| (e * 10.0).round() / 10.0));
    println!("decoded bins         {:?}", decoded.values());
    let target = QuantPolygon::from_values([100, 200, 300, 200, 300, 260, 100, 260])?;
    println!("see loss against {:?}: {:.1}", target.values(), see_loss(&expected, &target));
    Ok(())
}
