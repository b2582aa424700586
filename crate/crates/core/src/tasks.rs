//! Token-level training examples for the OCR, read and VQA tasks.
//!
//! Prompt and target grammars:
//!
//! * OCR: `<ocr> l1..l8` → `text <eos>`
//! * read: `<read>` → `(<see> text <sep>)* <eos>`, cells in reading order
//! * VQA: `<vqa> question` → `<see> answer <eos>` (see first), `answer <eos>`
//!   (no grounding) or `answer <see> <eos>` (see last)

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use image::imageops::{self, FilterType};
use image::{GrayImage, Luma};
use serde::{Deserialize, Serialize};

use crate::autograd::Mat;
use crate::datagen::{CellRecord, DocumentSample, QaRecord};
use crate::error::{Error, Result};
use crate::geometry::{PixelPolygon, Point, QuantPolygon};
use crate::model::ModelConfig;
use crate::vocab::Vocabulary;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Ocr,
    Read,
    Vqa,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroundingMode {
    None,
    #[default]
    SeeFirst,
    SeeLast,
}

impl GroundingMode {
    pub fn as_str(self) -> &'static str {
        match self {
            GroundingMode::None => "none",
            GroundingMode::SeeFirst => "see_first",
            GroundingMode::SeeLast => "see_last",
        }
    }
}

impl fmt::Display for GroundingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GroundingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(GroundingMode::None),
            "see_first" => Ok(GroundingMode::SeeFirst),
            "see_last" => Ok(GroundingMode::SeeLast),
            _ => Err(Error::Invalid(format!(
                "unknown grounding mode {s:?} (expected none, see_first or see_last)"
            ))),
        }
    }
}

/// How a page is placed on the model canvas after scaling.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Placement {
    Centered,
    /// Fractions in `[0, 1]` of the free space left of and above the page.
    Offset(f64, f64),
}

/// Maps page pixels to model-canvas pixels: `p * scale + shift`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Letterbox {
    pub scale_x: f64,
    pub scale_y: f64,
    pub dx: f64,
    pub dy: f64,
}

impl Letterbox {
    pub fn to_canvas(&self, p: Point) -> Point {
        Point::new(p.x * self.scale_x + self.dx, p.y * self.scale_y + self.dy)
    }

    pub fn to_page(&self, p: Point) -> Point {
        Point::new((p.x - self.dx) / self.scale_x, (p.y - self.dy) / self.scale_y)
    }

    pub fn polygon_to_canvas(&self, poly: &PixelPolygon) -> Result<PixelPolygon> {
        poly.map_points(|p| self.to_canvas(p))
    }
}

/// Scales `image` to fit the model canvas, keeping its aspect ratio, and
/// pads with white. Returns pixels in `[0, 1]` and the page→canvas map.
pub fn letterbox(
    image: &GrayImage,
    config: &ModelConfig,
    placement: Placement,
) -> Result<(Mat, Letterbox)> {
    let (w, h) = (image.width() as usize, image.height() as usize);
    if w == 0 || h == 0 {
        return Err(Error::Invalid("empty image".into()));
    }
    let (cw, ch) = (config.image_width, config.image_height);
    let s = (cw as f64 / w as f64).min(ch as f64 / h as f64);
    let nw = ((w as f64 * s).round() as usize).clamp(1, cw);
    let nh = ((h as f64 * s).round() as usize).clamp(1, ch);
    let scaled = if (nw, nh) == (w, h) {
        image.clone()
    } else {
        imageops::resize(image, nw as u32, nh as u32, FilterType::Triangle)
    };
    let (fx, fy) = match placement {
        Placement::Centered => (0.5, 0.5),
        Placement::Offset(a, b) => (a.clamp(0.0, 1.0), b.clamp(0.0, 1.0)),
    };
    let ox = ((cw - nw) as f64 * fx).round() as usize;
    let oy = ((ch - nh) as f64 * fy).round() as usize;
    let mut canvas = GrayImage::from_pixel(cw as u32, ch as u32, Luma([255]));
    imageops::replace(&mut canvas, &scaled, ox as i64, oy as i64);
    let pixels = Mat::from_shape_fn((ch, cw), |(y, x)| {
        canvas.get_pixel(x as u32, y as u32).0[0] as f64 / 255.0
    });
    let lb = Letterbox {
        scale_x: nw as f64 / w as f64,
        scale_y: nh as f64 / h as f64,
        dx: ox as f64,
        dy: oy as f64,
    };
    Ok((pixels, lb))
}

/// A document ready for the model: canvas pixels plus cells in canvas
/// coordinates.
#[derive(Debug, Clone)]
pub struct PreparedDoc {
    pub id: String,
    pub pixels: Arc<Mat>,
    pub letterbox: Letterbox,
    pub cells: Vec<CellRecord>,
    pub warped: bool,
    width: usize,
    height: usize,
}

impl PreparedDoc {
    pub fn new(
        id: impl Into<String>,
        sample: &DocumentSample,
        config: &ModelConfig,
        placement: Placement,
    ) -> Result<Self> {
        let (pixels, lb) = letterbox(&sample.image, config, placement)?;
        let cells = sample
            .cells
            .iter()
            .map(|c| {
                Ok(CellRecord {
                    polygon: lb.polygon_to_canvas(&c.polygon)?,
                    ..c.clone()
                })
            })
            .collect::<Result<_>>()?;
        Ok(PreparedDoc {
            id: id.into(),
            pixels: Arc::new(pixels),
            letterbox: lb,
            cells,
            warped: sample.warped,
            width: config.image_width,
            height: config.image_height,
        })
    }

    pub fn quantize(&self, canvas_poly: &PixelPolygon) -> Result<QuantPolygon> {
        QuantPolygon::from_pixel(canvas_poly, self.width, self.height)
    }

    /// Canvas size as `(width, height)`.
    pub fn canvas(&self) -> (usize, usize) {
        (self.width, self.height)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub task: Task,
    pub prompt_ids: Vec<usize>,
    pub target_ids: Vec<usize>,
    /// `(index into target_ids of a <see>, polygon)`.
    pub see_targets: Vec<(usize, QuantPolygon)>,
    pub source_id: String,
    pub pixels: Arc<Mat>,
}

impl TrainingExample {
    /// Checks the structural invariants against a vocabulary and length
    /// limit on the decoder input (`prompt + target - 1`).
    pub fn check(&self, vocab: &Vocabulary, max_len: usize) -> Result<()> {
        if self.prompt_ids.is_empty() || self.target_ids.last() != Some(&vocab.eos_id()) {
            return Err(Error::Invalid("example needs a prompt and an <eos>-terminated target".into()));
        }
        if self.prompt_ids.len() + self.target_ids.len() - 1 > max_len {
            return Err(Error::Invalid(format!(
                "example {} is {} tokens, limit is {max_len}",
                self.source_id,
                self.prompt_ids.len() + self.target_ids.len() - 1
            )));
        }
        for (pos, _) in &self.see_targets {
            if self.target_ids.get(*pos) != Some(&vocab.see_id()) {
                return Err(Error::Invalid(format!("see target at {pos} is not a <see>")));
            }
        }
        Ok(())
    }

    /// Decoder input under teacher forcing: prompt then target without its
    /// final token.
    pub fn decoder_input(&self) -> Vec<usize> {
        let mut v = self.prompt_ids.clone();
        v.extend_from_slice(&self.target_ids[..self.target_ids.len() - 1]);
        v
    }
}

pub fn make_ocr_example(doc: &PreparedDoc, cell: &CellRecord, vocab: &Vocabulary) -> Result<TrainingExample> {
    let q = doc.quantize(&cell.polygon)?;
    let mut prompt = vec![vocab.ocr_id()];
    prompt.extend(vocab.encode_polygon_tokens(&q));
    let mut target = vocab.tokenize(&cell.text)?;
    target.push(vocab.eos_id());
    Ok(TrainingExample {
        task: Task::Ocr,
        prompt_ids: prompt,
        target_ids: target,
        see_targets: Vec::new(),
        source_id: doc.id.clone(),
        pixels: doc.pixels.clone(),
    })
}

pub fn make_read_example(doc: &PreparedDoc, vocab: &Vocabulary) -> Result<TrainingExample> {
    if doc.cells.is_empty() {
        return Err(Error::Invalid(format!("document {} has no cells", doc.id)));
    }
    let mut target = Vec::new();
    let mut see = Vec::new();
    for cell in reading_order(&doc.cells, doc.warped) {
        see.push((target.len(), doc.quantize(&cell.polygon)?));
        target.push(vocab.see_id());
        target.extend(vocab.tokenize(&cell.text)?);
        target.push(vocab.sep_id());
    }
    target.push(vocab.eos_id());
    Ok(TrainingExample {
        task: Task::Read,
        prompt_ids: vec![vocab.read_id()],
        target_ids: target,
        see_targets: see,
        source_id: doc.id.clone(),
        pixels: doc.pixels.clone(),
    })
}

pub fn vqa_prompt(question: &str, vocab: &Vocabulary) -> Result<Vec<usize>> {
    let mut prompt = vec![vocab.vqa_id()];
    prompt.extend(vocab.tokenize(question)?);
    Ok(prompt)
}

/// The QA polygon is in page coordinates and is mapped onto the canvas.
pub fn make_vqa_example(
    doc: &PreparedDoc,
    qa: &QaRecord,
    mode: GroundingMode,
    vocab: &Vocabulary,
) -> Result<TrainingExample> {
    qa.check()?;
    let answer = vocab.tokenize(&qa.answer)?;
    let target_poly = match (&qa.polygon, qa.grounded) {
        (Some(p), true) => Some(doc.quantize(&doc.letterbox.polygon_to_canvas(p)?)?),
        _ => None,
    };
    let mut target = Vec::with_capacity(answer.len() + 2);
    let mut see = Vec::new();
    match mode {
        GroundingMode::SeeFirst => {
            target.push(vocab.see_id());
            see.extend(target_poly.map(|q| (0, q)));
            target.extend(answer);
        }
        GroundingMode::None => target.extend(answer),
        GroundingMode::SeeLast => {
            target.extend(answer);
            see.extend(target_poly.map(|q| (target.len(), q)));
            target.push(vocab.see_id());
        }
    }
    target.push(vocab.eos_id());
    Ok(TrainingExample {
        task: Task::Vqa,
        prompt_ids: vqa_prompt(&qa.question, vocab)?,
        target_ids: target,
        see_targets: see,
        source_id: doc.id.clone(),
        pixels: doc.pixels.clone(),
    })
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Row-major order for flat pages. Warped pages are grouped into bands of
/// the median cell height by centroid y, then read left to right.
pub fn reading_order(cells: &[CellRecord], warped: bool) -> Vec<CellRecord> {
    let mut out = cells.to_vec();
    if !warped {
        out.sort_by_key(|c| (c.row, c.col));
        return out;
    }
    let band = median(
        cells
            .iter()
            .map(|c| {
                let (_, y0, _, y1) = c.polygon.bounds();
                y1 - y0
            })
            .collect(),
    );
    out.sort_by(|a, b| a.polygon.centroid().y.total_cmp(&b.polygon.centroid().y));
    let mut bands: Vec<Vec<CellRecord>> = Vec::new();
    let mut top = f64::NEG_INFINITY;
    for c in out {
        let y = c.polygon.centroid().y;
        if y - top > 0.5 * band {
            top = y;
            bands.push(Vec::new());
        }
        bands.last_mut().expect("band").push(c);
    }
    bands
        .into_iter()
        .flat_map(|mut b| {
            b.sort_by(|a, c| a.polygon.centroid().x.total_cmp(&c.polygon.centroid().x));
            b
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{
        gen_qa_deterministic, random_table_spec, render_document, QaGenConfig, QaType,
        RenderConfig, TableGenConfig, TableSpec,
    };
    use crate::vocab::printable_ascii;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(cells: &[&[&str]]) -> (Vocabulary, ModelConfig, TableSpec, DocumentSample) {
        let vocab = Vocabulary::build(&printable_ascii()).unwrap();
        let config = ModelConfig::desk(vocab.size());
        let spec = TableSpec::new(
            cells
                .iter()
                .map(|r| r.iter().map(|s| s.to_string()).collect())
                .collect(),
            "items",
        )
        .unwrap();
        let doc = render_document(&spec, 11, RenderConfig::default()).unwrap();
        (vocab, config, spec, doc)
    }

    #[test]
    fn ocr_target_spells_cell() {
        let (vocab, config, _, doc) = setup(&[&["TOTAL", "x"], &["9", "TOTAL"]]);
        let prep = PreparedDoc::new("d", &doc, &config, Placement::Centered).unwrap();
        let a = make_ocr_example(&prep, &prep.cells[0], &vocab).unwrap();
        let b = make_ocr_example(&prep, &prep.cells[3], &vocab).unwrap();
        assert_eq!(vocab.decode_text(&a.target_ids), "TOTAL");
        assert_eq!(a.target_ids, b.target_ids);
        assert_ne!(a.prompt_ids, b.prompt_ids);
        assert_eq!(a.prompt_ids.len(), 9);
        assert!(a.see_targets.is_empty());
        a.check(&vocab, config.max_len).unwrap();

        // quantized prompt is within one bin of the true box
        let q = vocab.decode_polygon_tokens(&a.prompt_ids[1..]).unwrap();
        let pts = q.to_points(256, 256);
        let bin = 256.0 / 1000.0;
        for (p, t) in pts.iter().zip(prep.cells[0].polygon.points()) {
            assert!((p.x - t.x).abs() <= bin && (p.y - t.y).abs() <= bin);
        }
    }

    #[test]
    fn read_example_structure() {
        let (vocab, config, _, doc) = setup(&[&["a", "b"], &["c", "d"]]);
        let prep = PreparedDoc::new("d", &doc, &config, Placement::Centered).unwrap();
        let ex = make_read_example(&prep, &vocab).unwrap();
        let sees = ex.target_ids.iter().filter(|&&t| t == vocab.see_id()).count();
        assert_eq!(sees, 4);
        assert_eq!(ex.see_targets.len(), 4);
        ex.check(&vocab, config.max_len).unwrap();
        let order: Vec<_> = reading_order(&prep.cells, false).iter().map(|c| (c.row, c.col)).collect();
        assert_eq!(order, [(1, 1), (1, 2), (2, 1), (2, 2)]);
        for ((_, q), cell) in ex.see_targets.iter().zip(reading_order(&prep.cells, false)) {
            assert_eq!(*q, QuantPolygon::from_pixel(&cell.polygon, 256, 256).unwrap());
        }
        assert_eq!(vocab.decode_text(&ex.target_ids), "abcd");

        let (vocab, config, _, doc) = setup(&[&["a", "b"]]);
        let prep = PreparedDoc::new("d", &doc, &config, Placement::Centered).unwrap();
        assert_eq!(make_read_example(&prep, &vocab).unwrap().see_targets.len(), 2);
    }

    fn qa(qtype: QaType, grounded: Option<PixelPolygon>) -> QaRecord {
        QaRecord {
            question: "What is it?".into(),
            answer: "$5.00".into(),
            qtype,
            logical_loc: grounded.map(|_| (2, 2)),
            polygon: grounded,
            grounded: grounded.is_some(),
        }
    }

    #[test]
    fn vqa_modes() {
        let (vocab, config, _, doc) = setup(&[&["Item", "Price"], &["Tea", "$5.00"]]);
        let prep = PreparedDoc::new("d", &doc, &config, Placement::Centered).unwrap();
        let cell = doc.cell_at(2, 2).unwrap().polygon;
        let grounded = qa(QaType::SpecificExtraction, Some(cell));

        let ex = make_vqa_example(&prep, &grounded, GroundingMode::SeeFirst, &vocab).unwrap();
        assert_eq!(ex.target_ids[0], vocab.see_id());
        assert_eq!(ex.see_targets, vec![(0, QuantPolygon::from_pixel(&cell, 256, 256).unwrap())]);
        assert_eq!(vocab.decode_text(&ex.target_ids), "$5.00");
        ex.check(&vocab, config.max_len).unwrap();

        let summary = qa(QaType::ContentSummary, None);
        let ex = make_vqa_example(&prep, &summary, GroundingMode::SeeFirst, &vocab).unwrap();
        assert_eq!(ex.target_ids[0], vocab.see_id());
        assert!(ex.see_targets.is_empty());

        let ex = make_vqa_example(&prep, &grounded, GroundingMode::None, &vocab).unwrap();
        assert!(!ex.target_ids.contains(&vocab.see_id()));
        assert!(ex.see_targets.is_empty());

        let ex = make_vqa_example(&prep, &grounded, GroundingMode::SeeLast, &vocab).unwrap();
        let n = ex.target_ids.len();
        assert_eq!(&ex.target_ids[n - 2..], &[vocab.see_id(), vocab.eos_id()]);
        assert_eq!(ex.see_targets[0].0, n - 2);
        ex.check(&vocab, config.max_len).unwrap();
        assert_eq!(ex.decoder_input().len(), ex.prompt_ids.len() + n - 1);

        assert!("see_middle".parse::<GroundingMode>().is_err());
        assert_eq!("see_last".parse::<GroundingMode>().unwrap(), GroundingMode::SeeLast);
    }

    #[test]
    fn letterbox_maps_polygons() {
        let (_, mut config, _, doc) = setup(&[&["Item", "Price"], &["Tea", "$5.00"]]);
        config.image_width = 512;
        config.image_height = 384;
        let (pix, lb) = letterbox(&doc.image, &config, Placement::Centered).unwrap();
        assert_eq!(pix.dim(), (384, 512));
        assert_eq!((lb.scale_x, lb.scale_y, lb.dx, lb.dy), (1.5, 1.5, 64.0, 0.0));
        let p = Point::new(10.0, 20.0);
        assert_eq!(lb.to_page(lb.to_canvas(p)), p);
        // padding is white
        assert_eq!(pix[[10, 5]], 1.0);
        let (_, lb) = letterbox(&doc.image, &config, Placement::Offset(0.0, 0.0)).unwrap();
        assert_eq!((lb.dx, lb.dy), (0.0, 0.0));
    }

    #[test]
    fn single_cell_order() {
        let (_, config, _, doc) = setup(&[&["x"]]);
        let prep = PreparedDoc::new("d", &doc, &config, Placement::Centered).unwrap();
        assert_eq!(reading_order(&prep.cells, false), prep.cells);
        assert_eq!(reading_order(&prep.cells, true), prep.cells);
    }

    #[test]
    fn warped_tables_read_row_major() {
        let cfg = TableGenConfig {
            warp_prob: 1.0,
            warp: 0.05,
            ..TableGenConfig::default()
        };
        for seed in 0..50 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let spec = random_table_spec(&mut rng, &cfg).unwrap();
            let doc = render_document(&spec, seed, RenderConfig::default()).unwrap();
            assert!(doc.warped);
            let mut cells = doc.cells.clone();
            cells.shuffle(&mut rng);
            let got: Vec<_> = reading_order(&cells, true).iter().map(|c| (c.row, c.col)).collect();
            let want: Vec<_> = reading_order(&cells, false).iter().map(|c| (c.row, c.col)).collect();
            assert_eq!(got, want, "seed {seed}");
        }
    }

    #[test]
    fn generated_examples_satisfy_invariants() {
        let vocab = Vocabulary::build(&printable_ascii()).unwrap();
        let config = ModelConfig::desk(vocab.size());
        let table_cfg = TableGenConfig {
            warp_prob: 0.5,
            ..TableGenConfig::default()
        };
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let spec = random_table_spec(&mut rng, &table_cfg).unwrap();
            let doc = render_document(&spec, seed, RenderConfig::default()).unwrap();
            let prep = PreparedDoc::new("d", &doc, &config, Placement::Centered).unwrap();
            for q in gen_qa_deterministic(&spec, &doc, seed, &QaGenConfig::default()).unwrap() {
                let ex = make_vqa_example(&prep, &q, GroundingMode::SeeFirst, &vocab).unwrap();
                ex.check(&vocab, config.max_len).unwrap();
                let see_at = ex.target_ids.iter().position(|&t| t == vocab.see_id()).unwrap();
                let first_text = ex.target_ids.iter().position(|&t| vocab.is_text(t)).unwrap();
                assert!(see_at < first_text);
                assert_eq!(vocab.decode_text(&ex.target_ids), q.answer);
                assert_eq!(ex.see_targets.len(), usize::from(q.grounded));
            }
            let ex = make_read_example(&prep, &vocab).unwrap();
            ex.check(&vocab, config.max_len).unwrap();
        }
    }

    proptest! {
        #[test]
        fn shuffled_grids_restore_row_major(rows in 1usize..6, cols in 1usize..6, seed in any::<u64>()) {
            let cells: Vec<CellRecord> = (1..=rows)
                .flat_map(|r| (1..=cols).map(move |c| (r, c)))
                .map(|(r, c)| CellRecord {
                    text: format!("{r}{c}"),
                    polygon: PixelPolygon::rect(c as f64 * 20.0, r as f64 * 10.0, c as f64 * 20.0 + 20.0, r as f64 * 10.0 + 10.0).unwrap(),
                    row: r,
                    col: c,
                })
                .collect();
            let mut shuffled = cells.clone();
            shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(&reading_order(&shuffled, false), &cells);
            prop_assert_eq!(&reading_order(&shuffled, true), &cells);
        }
    }
}
