//! Greedy prediction over a corpus, scoring, and polygon overlays.

use std::collections::BTreeMap;

use image::{GrayImage, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::datagen::{normalize_answer, CorpusDocument, QaType};
use crate::error::{Error, Result};
use crate::geometry::{iou_or_zero, PixelPolygon, Point, QuantPolygon};
use crate::metrics::{anls, ted_accuracy, AnswerTree, F1Score, FieldSet, MetricsReport};
use crate::model::{EncoderOutput, Model};
use crate::tasks::{vqa_prompt, Placement, PreparedDoc};
use crate::vocab::Vocabulary;

/// Model output for one question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Answer {
    pub text: String,
    /// First decoded `<see>` polygon as bins over the canvas.
    pub bins: Option<[usize; 8]>,
    /// The same polygon in page pixels.
    pub polygon: Option<[Point; 4]>,
    pub truncated: bool,
}

/// One scored question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub doc_id: String,
    pub question: String,
    pub qtype: QaType,
    pub answer: String,
    pub gold_answer: String,
    pub polygon: Option<[Point; 4]>,
    /// Gold polygon when the record is grounded.
    pub gold_polygon: Option<PixelPolygon>,
}

pub fn answer_question(
    model: &Model,
    vocab: &Vocabulary,
    doc: &PreparedDoc,
    enc: &EncoderOutput,
    question: &str,
    max_new: usize,
) -> Result<Answer> {
    let prompt = vqa_prompt(question, vocab)?;
    let gen = model.greedy_generate(enc, &prompt, max_new, vocab)?;
    let body: Vec<usize> = gen
        .tokens
        .iter()
        .copied()
        .take_while(|&t| t != vocab.eos_id())
        .collect();
    let text = vocab.decode_text(&body);
    let (bins, polygon) = match gen.see_hiddens.first() {
        Some(h) => {
            let q: QuantPolygon = model.grounding_head().decode_polygon(h.view());
            let (w, h) = doc.canvas();
            let pts = q.to_points(w, h).map(|p| doc.letterbox.to_page(p));
            (Some(q.values()), Some(pts))
        }
        None => (None, None),
    };
    Ok(Answer {
        text,
        bins,
        polygon,
        truncated: gen.truncated,
    })
}

/// Answers every question of every document.
pub fn predict_corpus(
    model: &Model,
    vocab: &Vocabulary,
    docs: &[CorpusDocument],
    max_new: usize,
) -> Result<Vec<Prediction>> {
    let mut out = Vec::new();
    for d in docs {
        let prep = PreparedDoc::new(d.id.clone(), &d.sample, model.config(), Placement::Centered)?;
        let enc = model.encode_image(&prep.pixels)?;
        for qa in &d.qas {
            let a = answer_question(model, vocab, &prep, &enc, &qa.question, max_new)?;
            out.push(Prediction {
                doc_id: d.id.clone(),
                question: qa.question.clone(),
                qtype: qa.qtype,
                answer: a.text,
                gold_answer: qa.answer.clone(),
                polygon: a.polygon,
                gold_polygon: qa.polygon.filter(|_| qa.grounded),
            });
        }
    }
    Ok(out)
}

/// Predictions equal to the gold records.
pub fn oracle_predictions(docs: &[CorpusDocument]) -> Vec<Prediction> {
    docs.iter()
        .flat_map(|d| {
            d.qas.iter().map(|qa| {
                let gold_polygon = qa.polygon.filter(|_| qa.grounded);
                Prediction {
                    doc_id: d.id.clone(),
                    question: qa.question.clone(),
                    qtype: qa.qtype,
                    answer: qa.answer.clone(),
                    gold_answer: qa.answer.clone(),
                    polygon: gold_polygon.map(|p| *p.points()),
                    gold_polygon,
                }
            })
        })
        .collect()
}

/// Threshold label used as the report key.
pub fn threshold_key(t: f64) -> String {
    format!("{t:e}")
}

/// Aggregates predictions. Fields are `(question type, answer)` pairs per
/// document; empty answers contribute no field, so a silent model scores
/// an empty tree.
pub fn score(preds: &[Prediction], thresholds: &[f64]) -> Result<MetricsReport> {
    let mut by_doc: BTreeMap<&str, (FieldSet, FieldSet)> = BTreeMap::new();
    let mut anls_sum = 0.0;
    let mut exact = 0usize;
    for p in preds {
        let entry = by_doc.entry(&p.doc_id).or_default();
        let answer = normalize_answer(&p.answer);
        if !answer.is_empty() {
            entry.0.push(p.qtype.as_str(), answer.clone());
        }
        entry.1.push(p.qtype.as_str(), normalize_answer(&p.gold_answer));
        anls_sum += anls(&answer, &[&normalize_answer(&p.gold_answer)])?;
        if answer == normalize_answer(&p.gold_answer) {
            exact += 1;
        }
    }
    let (mut hits, mut n_pred, mut n_gold) = (0, 0, 0);
    let mut ted_sum = 0.0;
    for (pred, gold) in by_doc.values() {
        hits += pred.matches(gold);
        n_pred += pred.len();
        n_gold += gold.len();
        let gold_tree = AnswerTree::from_fields("doc", gold);
        let pred_tree = (!pred.is_empty()).then(|| AnswerTree::from_fields("doc", pred));
        ted_sum += ted_accuracy(pred_tree.as_ref(), &gold_tree);
    }
    let f1: F1Score = F1Score::from_counts(hits, n_pred, n_gold);

    let grounded: Vec<&Prediction> = preds.iter().filter(|p| p.gold_polygon.is_some()).collect();
    let pred_polys: Vec<Option<[Point; 4]>> = grounded.iter().map(|p| p.polygon).collect();
    let gold_polys: Vec<PixelPolygon> = grounded.iter().map(|p| p.gold_polygon.unwrap()).collect();
    let mut iou_acc = BTreeMap::new();
    for &t in thresholds {
        iou_acc.insert(
            threshold_key(t),
            crate::metrics::iou_accuracy(&pred_polys, &gold_polys, t)?,
        );
    }
    let mean_iou = if grounded.is_empty() {
        0.0
    } else {
        pred_polys
            .iter()
            .zip(&gold_polys)
            .map(|(p, g)| p.map_or(0.0, |p| iou_or_zero(p, g)))
            .sum::<f64>()
            / grounded.len() as f64
    };
    let n = preds.len().max(1) as f64;
    Ok(MetricsReport {
        f1: f1.f1,
        precision: f1.precision,
        recall: f1.recall,
        ted_acc: if by_doc.is_empty() { 0.0 } else { ted_sum / by_doc.len() as f64 },
        anls: anls_sum / n,
        exact_match: exact as f64 / n,
        iou_acc,
        mean_iou,
        samples: preds.len(),
        grounded_samples: grounded.len(),
    })
}

/// Parses a comma-separated threshold list such as `1e-3,1e-2,1e-1`.
pub fn parse_thresholds(csv: &str) -> Result<Vec<f64>> {
    csv.split(',')
        .map(|s| {
            let t: f64 = s
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad threshold {s:?}")))?;
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::Config(format!("threshold {t} outside [0, 1]")));
            }
            Ok(t)
        })
        .collect()
}

pub const GOLD_COLOR: Rgb<u8> = Rgb([0, 200, 0]);

/// Prediction colors; none of them is green.
pub const PALETTE: [Rgb<u8>; 8] = [
    Rgb([230, 25, 75]),
    Rgb([0, 130, 200]),
    Rgb([245, 130, 48]),
    Rgb([145, 30, 180]),
    Rgb([240, 50, 230]),
    Rgb([128, 0, 0]),
    Rgb([0, 0, 128]),
    Rgb([170, 110, 40]),
];

/// Integer pixel for a polygon corner.
pub fn pixel_of(p: Point) -> (i64, i64) {
    (p.x.round() as i64, p.y.round() as i64)
}

fn draw_line(img: &mut RgbImage, a: (i64, i64), b: (i64, i64), color: Rgb<u8>) {
    let (mut x, mut y) = a;
    let dx = (b.0 - x).abs();
    let dy = -(b.1 - y).abs();
    let sx = if x < b.0 { 1 } else { -1 };
    let sy = if y < b.1 { 1 } else { -1 };
    let mut err = dx + dy;
    loop {
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, color);
        }
        if (x, y) == b {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

pub fn draw_polygon(img: &mut RgbImage, pts: &[Point; 4], color: Rgb<u8>) {
    for k in 0..4 {
        draw_line(img, pixel_of(pts[k]), pixel_of(pts[(k + 1) % 4]), color);
    }
}

/// Page image with gold polygons in green, then each prediction polygon in
/// its own palette color.
pub fn overlay(page: &GrayImage, gold: &[PixelPolygon], preds: &[[Point; 4]]) -> RgbImage {
    let mut img = RgbImage::from_fn(page.width(), page.height(), |x, y| {
        let v = page.get_pixel(x, y).0[0];
        Rgb([v, v, v])
    });
    for g in gold {
        draw_polygon(&mut img, g.points(), GOLD_COLOR);
    }
    for (i, p) in preds.iter().enumerate() {
        draw_polygon(&mut img, p, PALETTE[i % PALETTE.len()]);
    }
    img
}
