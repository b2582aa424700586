use std::fs;
use std::path::Path;

use groundkie::cli::{read_predictions, run, write_predictions, PREDICTIONS_FILE, STATS_FILE};
use groundkie::datagen::{read_dataset, write_dataset, CorpusStats};
use groundkie::eval::{oracle_predictions, GOLD_COLOR, PALETTE};
use groundkie::geometry::Point;
use groundkie::train::{read_metrics, METRICS_FILE};

fn cli(args: &[&str]) -> (i32, String, String) {
    let args: Vec<String> = std::iter::once("groundkie")
        .chain(args.iter().copied())
        .map(String::from)
        .collect();
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = run(&args, &mut out, &mut err);
    (
        code,
        String::from_utf8(out).unwrap(),
        String::from_utf8(err).unwrap(),
    )
}

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

fn generate(dir: &Path, count: usize, seed: u64) {
    let (code, _, err) = cli(&[
        "generate", "--count", &count.to_string(), "--seed", &seed.to_string(), "--out", &s(dir),
    ]);
    assert_eq!(code, 0, "{err}");
}

fn train(corpus: &Path, out: &Path, extra: &[&str]) {
    let (c, o) = (s(corpus), s(out));
    let mut args = vec!["train", "--preset", "overfit", "--corpus", &c, "--out", &o];
    args.extend_from_slice(extra);
    let (code, _, err) = cli(&args);
    assert_eq!(code, 0, "{err}");
}

#[test]
fn generate_is_reproducible_and_counts_add_up() {
    let t = tempfile::tempdir().unwrap();
    generate(&t.path().join("a"), 5, 7);
    generate(&t.path().join("b"), 5, 7);
    generate(&t.path().join("c"), 5, 8);
    let rec = |d: &str| fs::read(t.path().join(d).join("records.jsonl")).unwrap();
    assert_eq!(rec("a"), rec("b"));
    assert_ne!(rec("a"), rec("c"));
    let stats: CorpusStats =
        serde_json::from_slice(&fs::read(t.path().join("a").join(STATS_FILE)).unwrap()).unwrap();
    assert_eq!(stats.per_type.values().sum::<usize>(), stats.questions);
    let docs = read_dataset(&t.path().join("a")).unwrap();
    assert_eq!(docs.iter().map(|d| d.qas.len()).sum::<usize>(), stats.questions);
    assert!(t.path().join("a").join("manifest.json").exists());
}

#[test]
fn usage_and_data_errors_have_distinct_exit_codes() {
    assert_eq!(cli(&["bogus"]).0, 1);
    assert_eq!(cli(&["generate"]).0, 1);
    assert_eq!(cli(&["--help"]).0, 0);
    let t = tempfile::tempdir().unwrap();
    let missing = t.path().join("nope");
    let (code, _, err) = cli(&["train", "--corpus", &s(&missing), "--out", &s(t.path())]);
    assert_eq!(code, 2, "{err}");
    let (code, _, _) = cli(&["eval", "--checkpoint", &s(&missing), "--corpus", &s(&missing)]);
    assert_eq!(code, 2);
    let (code, _, _) = cli(&[
        "eval", "--checkpoint", &s(&missing), "--corpus", &s(&missing), "--thresholds", "0.1,abc",
    ]);
    assert_eq!(code, 1);
}

#[test]
fn train_eval_infer_round_trip() {
    let t = tempfile::tempdir().unwrap();
    let corpus = t.path().join("corpus");
    generate(&corpus, 2, 1);
    let run_dir = t.path().join("run");
    train(&corpus, &run_dir, &["--steps", "6"]);
    let ck = run_dir.join("checkpoint.bin");

    let (code, out, err) = cli(&[
        "eval", "--checkpoint", &s(&ck), "--corpus", &s(&corpus), "--thresholds", "1e-3,1e-2,1e-1",
        "--json", "--out", &s(&t.path().join("ev")),
    ]);
    assert_eq!(code, 0, "{err}");
    let report: serde_json::Value = serde_json::from_str(&out).unwrap();
    let keys: Vec<&String> = report["iou_acc"].as_object().unwrap().keys().collect();
    assert_eq!(keys.len(), 3);
    for k in ["f1", "precision", "recall", "ted_acc", "anls", "samples"] {
        assert!(report.get(k).is_some(), "missing {k}");
    }
    assert!(t.path().join("ev").join(PREDICTIONS_FILE).exists());

    let image = corpus.join("images").join("doc00000.png");
    let docs = read_dataset(&corpus).unwrap();
    let q = &docs[0].qas[0].question;
    let infer = || cli(&["infer", "--checkpoint", &s(&ck), "--image", &s(&image), "--question", q, "--json"]);
    let (code, a, err) = infer();
    assert_eq!(code, 0, "{err}");
    assert_eq!(infer().1, a);
    let v: serde_json::Value = serde_json::from_str(&a).unwrap();
    assert!(v.get("answer").is_some());

    let (code, _, _) = cli(&[
        "infer", "--checkpoint", &s(&ck), "--image", &s(&t.path().join("missing.png")), "--question", "x",
    ]);
    assert_eq!(code, 1);
}

#[test]
fn ungrounded_checkpoint_gives_no_polygon() {
    let t = tempfile::tempdir().unwrap();
    let corpus = t.path().join("corpus");
    generate(&corpus, 1, 2);
    let run_dir = t.path().join("run");
    train(&corpus, &run_dir, &["--steps", "3", "--grounding-mode", "none"]);
    let image = corpus.join("images").join("doc00000.png");
    let (code, out, err) = cli(&[
        "infer", "--checkpoint", &s(&run_dir.join("checkpoint.bin")), "--image", &s(&image),
        "--question", "What is the total?", "--json",
    ]);
    assert_eq!(code, 0, "{err}");
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert!(v.get("polygon").is_none());
}

#[test]
fn zero_lambda_logs_constant_see_loss() {
    let t = tempfile::tempdir().unwrap();
    let corpus = t.path().join("corpus");
    generate(&corpus, 2, 3);
    let run_dir = t.path().join("run");
    train(&corpus, &run_dir, &["--steps", "5", "--lambda", "0"]);
    let log = read_metrics(&run_dir.join(METRICS_FILE)).unwrap();
    assert_eq!(log.len(), 5);
    assert!(log.iter().all(|r| r.see_loss == 0.0));
    assert!(log.iter().all(|r| r.lm_loss > 0.0));
}

#[test]
fn mismatched_config_names_the_field() {
    let t = tempfile::tempdir().unwrap();
    let corpus = t.path().join("corpus");
    generate(&corpus, 1, 4);
    let run_dir = t.path().join("run");
    train(&corpus, &run_dir, &["--steps", "2"]);
    let cfg = t.path().join("c.toml");
    fs::write(&cfg, "preset = \"overfit\"\n[model]\ndim = 32\n").unwrap();
    let (code, _, err) = cli(&[
        "eval", "--config", &s(&cfg), "--checkpoint", &s(&run_dir.join("checkpoint.bin")),
        "--corpus", &s(&corpus),
    ]);
    assert_eq!(code, 2);
    assert!(err.contains("model.dim"), "{err}");
}

#[test]
fn visualize_draws_gold_and_predictions() {
    let t = tempfile::tempdir().unwrap();
    let corpus = t.path().join("corpus");
    generate(&corpus, 4, 5);
    // keep one page with two grounded questions
    let mut docs = read_dataset(&corpus).unwrap();
    let doc = docs
        .iter_mut()
        .find(|d| d.qas.iter().filter(|q| q.grounded).count() >= 2)
        .cloned()
        .or_else(|| {
            let mut d = docs[0].clone();
            let cells = d.sample.cells.clone();
            for (q, c) in d.qas.iter_mut().zip(&cells) {
                q.logical_loc = Some((c.row, c.col));
                q.polygon = Some(c.polygon);
                q.grounded = true;
            }
            Some(d)
        })
        .unwrap();
    let mut doc = doc;
    doc.qas.retain(|q| q.grounded);
    doc.qas.truncate(2);
    assert_eq!(doc.qas.len(), 2);
    let one = t.path().join("one");
    write_dataset(&[doc.clone()], &one).unwrap();

    // predictions: gold polygons shifted off the gold lines
    let mut preds = oracle_predictions(&[doc.clone()]);
    for p in &mut preds {
        p.polygon = p.polygon.map(|pts| pts.map(|q| Point::new(q.x + 2.6, q.y + 3.4)));
    }
    let pred_file = t.path().join("preds.jsonl");
    write_predictions(&pred_file, &preds).unwrap();
    assert_eq!(read_predictions(&pred_file).unwrap(), preds);

    let out = t.path().join("vis");
    let (code, _, err) = cli(&[
        "visualize", "--corpus", &s(&one), "--predictions", &s(&pred_file), "--out", &s(&out),
    ]);
    assert_eq!(code, 0, "{err}");
    let pngs: Vec<_> = fs::read_dir(&out)
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.path().extension().is_some_and(|x| x == "png"))
        .collect();
    assert_eq!(pngs.len(), 1);
    let img = image::open(pngs[0].path()).unwrap().into_rgb8();
    let count = |c: image::Rgb<u8>| img.pixels().filter(|p| **p == c).count();
    assert!(count(GOLD_COLOR) > 0);
    assert!(count(PALETTE[0]) > 0 && count(PALETTE[1]) > 0);
    // every predicted corner is painted within one pixel of its coordinate
    for (k, p) in preds.iter().enumerate() {
        for q in p.polygon.unwrap() {
            let near = (-1i64..=1).any(|dx| {
                (-1i64..=1).any(|dy| {
                    let (x, y) = (q.x.round() as i64 + dx, q.y.round() as i64 + dy);
                    *img.get_pixel(x as u32, y as u32) == PALETTE[k]
                })
            });
            assert!(near, "corner {q:?} of prediction {k} not drawn");
        }
    }

    // no predictions: gold only
    let out2 = t.path().join("vis2");
    assert_eq!(cli(&["visualize", "--corpus", &s(&one), "--out", &s(&out2)]).0, 0);
    let img = image::open(out2.join(format!("{}.png", doc.id))).unwrap().into_rgb8();
    assert!(img.pixels().any(|p| *p == GOLD_COLOR));
    assert!(!img.pixels().any(|p| PALETTE.contains(p)));
}

#[test]
fn ablate_reports_four_systems() {
    let t = tempfile::tempdir().unwrap();
    let (down, aux) = (t.path().join("down"), t.path().join("aux"));
    generate(&down, 1, 6);
    generate(&aux, 1, 7);
    let (code, out, err) = cli(&[
        "ablate", "--preset", "overfit", "--corpus", &s(&down), "--auxiliary", &s(&aux), "--steps",
        "2", "--thresholds", "0.1", "--json",
    ]);
    assert_eq!(code, 0, "{err}");
    let rows: serde_json::Value = serde_json::from_str(&out).unwrap();
    let rows = rows.as_array().unwrap();
    let names: Vec<&str> = rows.iter().map(|r| r["system"].as_str().unwrap()).collect();
    assert_eq!(names, ["T1", "T2", "T3", "T4"]);
    assert_eq!(rows[2]["see_supervision"], "auxiliary_only");
    assert_eq!(rows[3]["see_supervision"], "auxiliary_and_downstream");
}
