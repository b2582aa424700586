use super::*;
use crate::vocab::printable_ascii;
use rand::{Rng, SeedableRng};

fn tiny(vocab: &Vocabulary) -> ModelConfig {
    ModelConfig {
        image_height: 32,
        image_width: 48,
        patch: 8,
        dim: 16,
        encoder_layers: 2,
        decoder_layers: 2,
        heads: 2,
        vocab_size: vocab.size(),
        max_len: 64,
    }
}

fn random_image(rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Mat {
    Mat::from_shape_fn((cfg.image_height, cfg.image_width), |_| rng.gen_range(0.0..1.0))
}

#[test]
fn config_validation() {
    let v = Vocabulary::build("ab").unwrap();
    let mut c = tiny(&v);
    assert!(c.validate().is_ok());
    c.image_width = 50;
    assert!(matches!(Model::new(c.clone(), 0), Err(Error::Config(_))));
    let mut c = tiny(&v);
    c.heads = 3;
    assert!(c.validate().is_err());
    let desk = ModelConfig::desk(v.size());
    assert_eq!(desk.num_patches(), 64);
    assert!(desk.validate().is_ok());
}

#[test]
fn encoder_shape_errors() {
    let v = Vocabulary::build("ab").unwrap();
    let m = Model::new(tiny(&v), 1).unwrap();
    assert!(matches!(
        m.encode_image(&Mat::ones((8, 8))),
        Err(Error::Shape(_))
    ));
    let mut img = blank_image(m.config());
    img[[0, 0]] = 1.5;
    assert!(m.encode_image(&img).is_err());
}

#[test]
fn constant_image_rows_differ_only_by_position() {
    let v = Vocabulary::build("ab").unwrap();
    let mut m = Model::new(tiny(&v), 2).unwrap();
    let img = Mat::zeros((32, 48));
    let z = m.encode_image(&img).unwrap().z;
    assert!(z.iter().all(|x| x.is_finite()));
    assert!((&z.row(0) - &z.row(1)).iter().any(|d| d.abs() > 1e-6));
    // with the position code removed every row is the same
    m.enc_pos.fill(0.0);
    let z = m.encode_image(&img).unwrap().z;
    for r in 1..z.nrows() {
        for (a, b) in z.row(0).iter().zip(z.row(r).iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}

#[test]
fn encoder_is_deterministic_and_sensitive() {
    let v = Vocabulary::build("ab").unwrap();
    let m = Model::new(tiny(&v), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let img = random_image(&mut rng, m.config());
    let a = m.encode_image(&img).unwrap();
    let b = m.encode_image(&img).unwrap();
    assert_eq!(a, b);
    // perturb patch (1, 2) of the 4×6 grid
    let mut img2 = img.clone();
    img2.slice_mut(s![8..16, 16..24]).mapv_inplace(|x| 1.0 - x);
    let c = m.encode_image(&img2).unwrap();
    let idx = 6 + 2;
    let delta: f64 = (&a.z.row(idx) - &c.z.row(idx)).iter().map(|d| d.abs()).sum();
    assert!(delta > 1e-6);
    // same weights from the same seed
    assert_eq!(Model::new(tiny(&v), 3).unwrap().params(), m.params());
}

#[test]
fn decoder_is_causal() {
    let v = Vocabulary::build("abc").unwrap();
    let m = Model::new(tiny(&v), 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let enc = m.encode_image(&random_image(&mut rng, m.config())).unwrap();
    let toks: Vec<usize> = (0..10).map(|_| rng.gen_range(0..v.size())).collect();
    let short = m.decode_tokens(&enc, &toks[..6]).unwrap();
    let long = m.decode_tokens(&enc, &toks).unwrap();
    assert_eq!(long.logits.nrows(), 10);
    assert_eq!(long.hidden.dim(), (10, 16));
    for i in 0..6 {
        for (a, b) in short.logits.row(i).iter().zip(long.logits.row(i).iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
    // editing a suffix token leaves the prefix alone
    let mut edited = toks.clone();
    edited[8] = (edited[8] + 1) % v.size();
    let e = m.decode_tokens(&enc, &edited).unwrap();
    for i in 0..8 {
        for (a, b) in e.logits.row(i).iter().zip(long.logits.row(i).iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
    let probs = softmax_rows(&long.logits);
    for row in probs.rows() {
        assert!((row.sum() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn decoder_rejects_bad_input() {
    let v = Vocabulary::build("ab").unwrap();
    let m = Model::new(tiny(&v), 5).unwrap();
    let enc = m.encode_image(&blank_image(m.config())).unwrap();
    assert!(matches!(
        m.decode_tokens(&enc, &[v.size()]),
        Err(Error::TokenOutOfRange { .. })
    ));
    assert!(m.decode_tokens(&enc, &vec![0; 65]).is_err());
    assert!(m.decode_tokens(&enc, &[]).is_err());
    let wrong = EncoderOutput { z: Mat::zeros((3, 16)) };
    assert!(matches!(m.decode_tokens(&wrong, &[0]), Err(Error::Shape(_))));
}

#[test]
fn positions_enter_only_through_the_code() {
    let v = Vocabulary::build("abc").unwrap();
    let m = Model::new(tiny(&v), 6).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let img = random_image(&mut rng, m.config());
    let enc = m.encode_image(&img).unwrap();
    let toks = [v.vqa_id(), v.id("a").unwrap(), v.id("b").unwrap()];
    let base = m.decode_tokens(&enc, &toks).unwrap();

    // cross-attention is a set operation over encoder rows
    let n = enc.z.nrows();
    let perm: Vec<usize> = (0..n).rev().collect();
    let mut permuted = enc.z.clone();
    for (dst, &src) in perm.iter().enumerate() {
        permuted.row_mut(dst).assign(&enc.z.row(src));
    }
    let same = m.decode_tokens(&EncoderOutput { z: permuted }, &toks).unwrap();
    for (a, b) in base.logits.iter().zip(same.logits.iter()) {
        assert!((a - b).abs() < 1e-9);
    }

    // moving patch contents without their positions changes the output
    let (rows, cols) = m.config().grid();
    let f = m.config().patch;
    let mut shuffled = img.clone();
    for r in 0..rows {
        for c in 0..cols {
            let (sr, sc) = (rows - 1 - r, cols - 1 - c);
            shuffled
                .slice_mut(s![r * f..(r + 1) * f, c * f..(c + 1) * f])
                .assign(&img.slice(s![sr * f..(sr + 1) * f, sc * f..(sc + 1) * f]));
        }
    }
    let moved = m.decode_tokens(&m.encode_image(&shuffled).unwrap(), &toks).unwrap();
    let diff: f64 = (&base.logits - &moved.logits).iter().map(|d| d.abs()).sum();
    assert!(diff > 1e-6);
}

#[test]
fn untrained_logits_are_near_uniform() {
    let v = Vocabulary::build(&printable_ascii()).unwrap();
    let cfg = ModelConfig {
        dim: 32,
        heads: 4,
        ..tiny(&v)
    };
    let ln_v = (v.size() as f64).ln();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut total = 0.0;
    let mut count = 0;
    for seed in 0..100 {
        let m = Model::new(cfg.clone(), seed).unwrap();
        let enc = m.encode_image(&random_image(&mut rng, &cfg)).unwrap();
        let toks: Vec<usize> = (0..8).map(|_| rng.gen_range(0..v.size())).collect();
        let probs = softmax_rows(&m.decode_tokens(&enc, &toks).unwrap().logits);
        for row in probs.rows() {
            total -= row.iter().filter(|p| **p > 0.0).map(|p| p * p.ln()).sum::<f64>();
            count += 1;
        }
    }
    let mean = total / count as f64;
    assert!((mean - ln_v).abs() < 0.1 * ln_v, "entropy {mean} vs {ln_v}");
}

#[test]
fn lm_loss_examples() {
    let v = 7;
    let mut logits = Mat::zeros((3, v));
    let targets = [1, 4, 6];
    assert!((lm_loss(&logits, &targets, &[true; 3]).unwrap() - (v as f64).ln()).abs() < 1e-12);
    for (r, &t) in targets.iter().enumerate() {
        logits[[r, t]] = 60.0;
    }
    assert!(lm_loss(&logits, &targets, &[true; 3]).unwrap() < 1e-20);
    assert!(lm_loss(&logits, &targets, &[false; 3]).is_err());
    assert!(lm_loss(&logits, &targets[..2], &[true; 3]).is_err());
}

#[test]
fn lm_loss_matches_direct_summation() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (t, v) = (12, 40);
    let logits = Mat::from_shape_fn((t, v), |_| rng.gen_range(-4.0..4.0));
    let targets: Vec<usize> = (0..t).map(|_| rng.gen_range(0..v)).collect();
    let mask: Vec<bool> = (0..t).map(|i| i % 3 != 0).collect();
    // oracle: no max shift, compensated summation
    let mut terms = Vec::new();
    for r in 0..t {
        if !mask[r] {
            continue;
        }
        let (mut sum, mut comp) = (0.0f64, 0.0f64);
        for c in 0..v {
            let y = logits[[r, c]].exp() - comp;
            let s2 = sum + y;
            comp = (s2 - sum) - y;
            sum = s2;
        }
        terms.push(sum.ln() - logits[[r, targets[r]]]);
    }
    let oracle = terms.iter().sum::<f64>() / terms.len() as f64;
    let got = lm_loss(&logits, &targets, &mask).unwrap();
    assert!((got - oracle).abs() < 1e-10);
}

#[test]
fn greedy_terminates_and_repeats() {
    let v = Vocabulary::build("abc").unwrap();
    let m = Model::new(tiny(&v), 9).unwrap();
    let enc = m.encode_image(&blank_image(m.config())).unwrap();
    let a = m.greedy_generate(&enc, &[v.vqa_id()], 5, &v).unwrap();
    let b = m.greedy_generate(&enc, &[v.vqa_id()], 5, &v).unwrap();
    assert_eq!(a, b);
    assert!(a.tokens.len() <= 5);
    assert!(a.truncated || a.tokens.last() == Some(&v.eos_id()));
    assert_eq!(a.see_hiddens.len(), a.see_positions.len());
}

#[test]
fn argmax_ties_go_low() {
    assert_eq!(argmax_lowest(&[1.0, 3.0, 3.0, 2.0]), 1);
    assert_eq!(argmax_lowest(&[0.0; 4]), 0);
}

#[test]
fn grounding_head_views_location_rows() {
    let v = Vocabulary::build("ab").unwrap();
    let m = Model::new(tiny(&v), 10).unwrap();
    let head = m.grounding_head();
    let embed = m.params().get(m.params().find("dec.embed").unwrap());
    assert_eq!(head.loc.row(0), embed.row(v.loc_start()));
    assert_eq!(head.loc.row(999), embed.row(v.loc_start() + 999));
    assert_eq!(head.dim(), 16);
}

#[test]
fn checkpoint_round_trip_and_validation() {
    let v = Vocabulary::build("ab").unwrap();
    let m = Model::new(tiny(&v), 11).unwrap();
    let ck = Checkpoint::from_model(&m, &v.charset(), serde_json::json!({"step": 3}));
    let bytes = ck.to_bytes();
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back, ck);
    let m2 = back.to_model().unwrap();
    assert_eq!(m2.params(), m.params());

    let mut wrong = ck.clone();
    wrong.config.dim = 32;
    wrong.config.heads = 2;
    let err = wrong.to_model().unwrap_err().to_string();
    assert!(err.contains("enc.patch.w"), "{err}");

    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 8]).is_err());
    assert!(Checkpoint::from_bytes(b"not a checkpoint at all").is_err());
    let mut bumped = bytes.clone();
    bumped[8] = 9;
    assert!(Checkpoint::from_bytes(&bumped).is_err());
}
