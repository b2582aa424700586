//! The physical decoder.
//!
//! A `<see>` hidden state `h` is projected by one affine map into eight
//! coordinate queries. Each query scores the 1000 location embeddings,
//! the scores are softmax-normalized into a distribution over bins, and the
//! coordinate is read out as the distribution's expectation rather than its
//! argmax. Training regresses the expectations onto the ground-truth bins
//! with a mean squared error; inference rounds them to the nearest bin.

use ndarray::{ArrayView1, ArrayView2};

use crate::autograd::softmax_in_place;
use crate::error::{Error, Result};
use crate::geometry::QuantPolygon;
use crate::vocab::{QuantBin, NUM_BINS};

/// Borrowed grounding parameters: the location table (`1000 × D`) and the
/// query projection (`D × 8D` weight, `1 × 8D` bias).
#[derive(Debug, Clone, Copy)]
pub struct GroundingHead<'a> {
    pub loc: ArrayView2<'a, f64>,
    pub weight: ArrayView2<'a, f64>,
    pub bias: ArrayView2<'a, f64>,
}

impl<'a> GroundingHead<'a> {
    pub fn new(
        loc: ArrayView2<'a, f64>,
        weight: ArrayView2<'a, f64>,
        bias: ArrayView2<'a, f64>,
    ) -> Result<Self> {
        let d = loc.ncols();
        if loc.nrows() != NUM_BINS
            || weight.dim() != (d, 8 * d)
            || bias.dim() != (1, 8 * d)
        {
            return Err(Error::Shape(format!(
                "grounding head: loc {:?}, weight {:?}, bias {:?} for D={d}",
                loc.dim(),
                weight.dim(),
                bias.dim()
            )));
        }
        Ok(GroundingHead { loc, weight, bias })
    }

    pub fn dim(&self) -> usize {
        self.loc.ncols()
    }

    pub fn project_queries(&self, h: ArrayView1<f64>) -> [Vec<f64>; 8] {
        project_queries(h, self.weight, self.bias)
    }

    pub fn decode_polygon(&self, h: ArrayView1<f64>) -> QuantPolygon {
        let queries = self.project_queries(h);
        let bins = queries.map(|q| {
            let b = coord_distribution(&q, self.loc);
            round_bin(expected_coord(&b))
        });
        QuantPolygon::new(bins)
    }

    /// The eight expected coordinates, unrounded.
    pub fn expected_coords(&self, h: ArrayView1<f64>) -> [f64; 8] {
        self.project_queries(h)
            .map(|q| expected_coord(&coord_distribution(&q, self.loc)))
    }
}

/// One affine map `h · W + b` split into eight `D`-wide queries.
pub fn project_queries(
    h: ArrayView1<f64>,
    weight: ArrayView2<f64>,
    bias: ArrayView2<f64>,
) -> [Vec<f64>; 8] {
    let d = h.len();
    let out = h.dot(&weight) + bias.row(0);
    std::array::from_fn(|j| out.slice(ndarray::s![j * d..(j + 1) * d]).to_vec())
}

/// A probability distribution over the 1000 coordinate bins.
#[derive(Debug, Clone, PartialEq)]
pub struct CoordDistribution(Vec<f64>);

impl CoordDistribution {
    /// Wraps probabilities, checking non-negativity and unit mass.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.len() != NUM_BINS {
            return Err(Error::Shape(format!(
                "distribution has {} entries, expected {NUM_BINS}",
                probs.len()
            )));
        }
        let sum: f64 = probs.iter().sum();
        if probs.iter().any(|p| !(*p >= 0.0)) || (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Invalid(format!(
                "not a distribution (sum {sum})"
            )));
        }
        Ok(CoordDistribution(probs))
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }
}

/// `softmax(query · Locᵀ)`.
pub fn coord_distribution(query: &[f64], loc: ArrayView2<f64>) -> CoordDistribution {
    let q = ArrayView1::from(query);
    let mut scores = loc.dot(&q).to_vec();
    softmax_in_place(&mut scores);
    CoordDistribution(scores)
}

/// `Σ i · b_i`.
pub fn expected_coord(b: &CoordDistribution) -> f64 {
    expected_coord_slice(&b.0)
}

pub(crate) fn expected_coord_slice(b: &[f64]) -> f64 {
    b.iter().enumerate().map(|(i, p)| i as f64 * p).sum()
}

/// Round-half-up into the bin range.
pub fn round_bin(e: f64) -> QuantBin {
    QuantBin::saturating((e + 0.5).floor() as i64)
}

/// Mean squared error over the eight coordinates of one polygon.
pub fn see_loss(expected: &[f64; 8], gt: &QuantPolygon) -> f64 {
    let t = gt.values().map(|v| v as f64);
    see_loss_values(expected, &t)
}

pub(crate) fn see_loss_values(expected: &[f64], targets: &[f64]) -> f64 {
    debug_assert_eq!(expected.len(), 8);
    expected
        .iter()
        .zip(targets)
        .map(|(e, t)| (e - t) * (e - t))
        .sum::<f64>()
        / 8.0
}

/// See loss over a batch of `<see>` positions. Unsupervised positions
/// (`None` target) are skipped; the result is the mean over supervised
/// positions, or zero when there are none.
pub fn masked_see_loss(expected: &[[f64; 8]], targets: &[Option<QuantPolygon>]) -> f64 {
    let supervised: Vec<f64> = expected
        .iter()
        .zip(targets)
        .filter_map(|(e, t)| t.as_ref().map(|t| see_loss(e, t)))
        .collect();
    if supervised.is_empty() {
        0.0
    } else {
        supervised.iter().sum::<f64>() / supervised.len() as f64
    }
}

/// Gradient of `scale · (E − t)²/8` with respect to the pre-softmax logits
/// of one coordinate: `scale · 2/8 · (E − t) · b_i · (i − E)`, written into
/// `out`.
pub fn see_loss_grad_logits_row(b: &[f64], expected: f64, target: f64, scale: f64, out: &mut [f64]) {
    let coef = scale * 2.0 / 8.0 * (expected - target);
    for (i, (o, p)) in out.iter_mut().zip(b).enumerate() {
        *o = coef * p * (i as f64 - expected);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array1, Array2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn uniform() -> CoordDistribution {
        CoordDistribution::new(vec![1.0 / NUM_BINS as f64; NUM_BINS]).unwrap()
    }

    fn one_hot(k: usize) -> CoordDistribution {
        let mut v = vec![0.0; NUM_BINS];
        v[k] = 1.0;
        CoordDistribution::new(v).unwrap()
    }

    #[test]
    fn expectation_examples() {
        assert!((expected_coord(&uniform()) - 499.5).abs() < 1e-9);
        assert_eq!(expected_coord(&one_hot(137)), 137.0);
        let mut v = vec![0.0; NUM_BINS];
        v[100] = 0.5;
        v[300] = 0.5;
        assert_eq!(expected_coord(&CoordDistribution::new(v).unwrap()), 200.0);
    }

    #[test]
    fn distribution_validation() {
        assert!(CoordDistribution::new(vec![0.5; 2]).is_err());
        assert!(CoordDistribution::new(vec![0.002; NUM_BINS]).is_err());
        let mut v = vec![0.0; NUM_BINS];
        v[0] = 1.5;
        v[1] = -0.5;
        assert!(CoordDistribution::new(v).is_err());
    }

    #[test]
    fn projection_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = 6;
        let w = Array2::from_shape_fn((d, 8 * d), |_| rng.gen_range(-1.0..1.0));
        let b = Array2::from_shape_fn((1, 8 * d), |_| rng.gen_range(-1.0..1.0));
        let zero = Array1::zeros(d);
        let q0 = project_queries(zero.view(), w.view(), b.view());
        for (j, q) in q0.iter().enumerate() {
            assert_eq!(q.as_slice(), b.slice(ndarray::s![0, j * d..(j + 1) * d]).as_slice().unwrap());
        }
        let h = Array1::from_shape_fn(d, |_| rng.gen_range(-1.0..1.0));
        let alpha = 2.5;
        let qa = project_queries((&h * alpha).view(), w.view(), b.view());
        let qh = project_queries(h.view(), w.view(), b.view());
        for j in 0..8 {
            for k in 0..d {
                let lhs = qa[j][k] - b[[0, j * d + k]];
                let rhs = alpha * (qh[j][k] - b[[0, j * d + k]]);
                assert!((lhs - rhs).abs() < 1e-12);
            }
        }
        // explicit triple loop oracle
        for j in 0..8 {
            for k in 0..d {
                let mut acc = b[[0, j * d + k]];
                for i in 0..d {
                    acc += h[i] * w[[i, j * d + k]];
                }
                assert!((qh[j][k] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn distribution_examples() {
        let d = 4;
        // every Loc row orthogonal to the query
        let loc = Array2::from_shape_fn((NUM_BINS, d), |(i, j)| if j == 0 { 0.0 } else { (i as f64).sin() });
        let b = coord_distribution(&[1.0, 0.0, 0.0, 0.0], loc.view());
        assert!(b.probs().iter().all(|p| (p - 0.001).abs() < 1e-12));

        // near-orthonormal Loc in high dimension, query = c * Loc_k
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let d = 256;
        let mut loc = Array2::from_shape_fn((NUM_BINS, d), |_| rng.gen_range(-1.0..1.0f64));
        for mut row in loc.rows_mut() {
            let n = row.dot(&row).sqrt();
            row.mapv_inplace(|v| v / n);
        }
        let k = 421;
        let q: Vec<f64> = loc.row(k).iter().map(|v| v * 40.0).collect();
        let b = coord_distribution(&q, loc.view());
        assert!(b.probs()[k] > 0.99);

        for _ in 0..1000 {
            let q: Vec<f64> = (0..d).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let b = coord_distribution(&q, loc.view());
            assert!((b.probs().iter().sum::<f64>() - 1.0).abs() < 1e-9);
            let e = expected_coord(&b);
            assert!((0.0..=999.0).contains(&e));
        }
    }

    #[test]
    fn see_loss_examples() {
        let gt = QuantPolygon::from_values([10, 20, 30, 40, 50, 60, 70, 80]).unwrap();
        let exact = gt.values().map(|v| v as f64);
        assert_eq!(see_loss(&exact, &gt), 0.0);
        let off = exact.map(|v| v + 2.0);
        assert!((see_loss(&off, &gt) - 4.0).abs() < 1e-12);
        assert_eq!(masked_see_loss(&[off, off], &[None, None]), 0.0);
        let mixed = masked_see_loss(&[off, exact.map(|v| v - 1.0)], &[Some(gt), None]);
        assert!((mixed - 4.0).abs() < 1e-12);
    }

    #[test]
    fn logit_shift_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let d = 8;
        let loc = Array2::from_shape_fn((NUM_BINS, d), |_| rng.gen_range(-1.0..1.0));
        let q: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut scores = loc.dot(&ArrayView1::from(&q[..])).to_vec();
        let mut shifted: Vec<f64> = scores.iter().map(|s| s + 17.0).collect();
        softmax_in_place(&mut scores);
        softmax_in_place(&mut shifted);
        for (a, b) in scores.iter().zip(&shifted) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((expected_coord_slice(&scores) - expected_coord_slice(&shifted)).abs() < 1e-9);
    }

    #[test]
    fn decode_with_contrived_head() {
        let d = 4;
        // loc row k scores -k against the all-ones query, so bin 0 dominates
        let loc = Array2::from_shape_fn((NUM_BINS, d), |(k, _)| -(k as f64));
        let w = Array2::zeros((d, 8 * d));
        let b = Array2::from_elem((1, 8 * d), 10.0);
        let head = GroundingHead::new(loc.view(), w.view(), b.view()).unwrap();
        let h = Array1::from_elem(d, 0.3);
        assert_eq!(head.decode_polygon(h.view()).values(), [0; 8]);

        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let loc = Array2::from_shape_fn((NUM_BINS, d), |_| rng.gen_range(-1.0..1.0));
        let w = Array2::from_shape_fn((d, 8 * d), |_| rng.gen_range(-1.0..1.0));
        let b = Array2::from_shape_fn((1, 8 * d), |_| rng.gen_range(-1.0..1.0));
        let head = GroundingHead::new(loc.view(), w.view(), b.view()).unwrap();
        let h = Array1::from_shape_fn(d, |_| rng.gen_range(-1.0..1.0));
        let stepwise = project_queries(h.view(), w.view(), b.view())
            .map(|q| round_bin(expected_coord(&coord_distribution(&q, loc.view()))));
        assert_eq!(head.decode_polygon(h.view()), QuantPolygon::new(stepwise));
        assert!(GroundingHead::new(loc.view(), w.view(), w.view()).is_err());
    }

    #[test]
    fn rounding_is_half_up() {
        assert_eq!(round_bin(2.5).value(), 3);
        assert_eq!(round_bin(2.4999).value(), 2);
        assert_eq!(round_bin(-3.0).value(), 0);
        assert_eq!(round_bin(999.4).value(), 999);
        assert_eq!(round_bin(1200.0).value(), 999);
    }
}
