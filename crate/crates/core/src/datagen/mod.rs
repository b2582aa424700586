//! Synthetic table documents with exact ground truth, and the grounded
//! table-QA pipeline: deterministic five-type question generation, an
//! optional LLM candidate source, and value-against-cell verification.

mod corpus;
mod html;
pub mod llm;
mod pipeline;
mod qa;
mod render;
mod verify;

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use image::GrayImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::PixelPolygon;

pub use corpus::{read_dataset, write_dataset, CorpusDocument, CORPUS_HEADER, RECORDS_FILE};
pub use html::{escape_html, parse_html_table, table_to_html};
pub use qa::{
    format_hundredths, gen_qa_deterministic, parse_decimal, random_table_spec, QaGenConfig,
    TableGenConfig, DEFAULT_TYPE_WEIGHTS,
};
pub use pipeline::{document_seed, generate_corpus, CorpusConfig, CorpusStats, QaSource};
pub use render::{render_document, Homography, RenderConfig};
pub use verify::{normalize_answer, verify_and_ground, VerifyStats};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableStyle {
    /// Integer magnification of the 8×8 bitmap font.
    pub glyph_scale: usize,
    /// Pixels between a cell border and its text.
    pub padding: usize,
    /// Maximum corner displacement of the perspective warp, as a fraction
    /// of the image side. Zero disables warping.
    pub warp: f64,
}

impl Default for TableStyle {
    fn default() -> Self {
        TableStyle {
            glyph_scale: 1,
            padding: 3,
            warp: 0.0,
        }
    }
}

/// A table to render. Row 1 holds the column headers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableSpec {
    pub rows: usize,
    pub cols: usize,
    pub cells: Vec<Vec<String>>,
    /// 1-based indices of columns whose data cells parse as decimals.
    pub numeric_cols: BTreeSet<usize>,
    /// Plural noun for what each data row describes, used in summaries.
    pub topic: String,
    pub style: TableStyle,
}

impl TableSpec {
    pub fn new(cells: Vec<Vec<String>>, topic: impl Into<String>) -> Result<Self> {
        let rows = cells.len();
        let cols = cells.first().map_or(0, Vec::len);
        let numeric_cols = (1..=cols)
            .filter(|&c| rows > 1 && cells[1..].iter().all(|r| r.get(c - 1).and_then(|t| parse_decimal(t)).is_some()))
            .collect();
        let spec = TableSpec {
            rows,
            cols,
            cells,
            numeric_cols,
            topic: topic.into(),
            style: TableStyle::default(),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::Invalid("table must have at least one cell".into()));
        }
        if self.cells.len() != self.rows || self.cells.iter().any(|r| r.len() != self.cols) {
            return Err(Error::Invalid(format!(
                "cell grid does not match {}x{}",
                self.rows, self.cols
            )));
        }
        if let Some((r, c)) = self.positions().find(|&(r, c)| self.cell(r, c).trim().is_empty()) {
            return Err(Error::Invalid(format!("cell ({r}, {c}) is empty")));
        }
        for &c in &self.numeric_cols {
            if c == 0 || c > self.cols {
                return Err(Error::Invalid(format!("numeric column {c} out of range")));
            }
            for r in 2..=self.rows {
                if parse_decimal(self.cell(r, c)).is_none() {
                    return Err(Error::Invalid(format!(
                        "cell ({r}, {c}) = {:?} is not a decimal",
                        self.cell(r, c)
                    )));
                }
            }
        }
        Ok(())
    }

    /// Text of the 1-based cell `(row, col)`.
    pub fn cell(&self, row: usize, col: usize) -> &str {
        &self.cells[row - 1][col - 1]
    }

    /// All 1-based positions in row-major order.
    pub fn positions(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (1..=self.rows).flat_map(move |r| (1..=self.cols).map(move |c| (r, c)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub text: String,
    pub polygon: PixelPolygon,
    pub row: usize,
    pub col: usize,
}

/// A rendered page with its per-cell ground truth.
#[derive(Debug, Clone)]
pub struct DocumentSample {
    pub image: GrayImage,
    pub cells: Vec<CellRecord>,
    pub html: String,
    pub warped: bool,
}

// Pixels and geometry only; decoder-attached color metadata is ignored.
impl PartialEq for DocumentSample {
    fn eq(&self, o: &Self) -> bool {
        self.image.dimensions() == o.image.dimensions()
            && self.image.as_raw() == o.image.as_raw()
            && self.cells == o.cells
            && self.html == o.html
            && self.warped == o.warped
    }
}

impl DocumentSample {
    pub fn width(&self) -> usize {
        self.image.width() as usize
    }

    pub fn height(&self) -> usize {
        self.image.height() as usize
    }

    pub fn cell_at(&self, row: usize, col: usize) -> Option<&CellRecord> {
        self.cells.iter().find(|c| c.row == row && c.col == col)
    }

    pub fn grid_size(&self) -> (usize, usize) {
        self.cells
            .iter()
            .fold((0, 0), |(r, c), cell| (r.max(cell.row), c.max(cell.col)))
    }

    /// Pixel values scaled to `[0, 1]`, row-major.
    pub fn pixels(&self) -> ndarray::Array2<f64> {
        let (w, h) = (self.width(), self.height());
        ndarray::Array2::from_shape_fn((h, w), |(y, x)| {
            self.image.get_pixel(x as u32, y as u32).0[0] as f64 / 255.0
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QaType {
    SpecificExtraction,
    SimpleReasoning,
    ComplexReasoning,
    Numerical,
    ContentSummary,
}

impl QaType {
    pub const ALL: [QaType; 5] = [
        QaType::SpecificExtraction,
        QaType::SimpleReasoning,
        QaType::ComplexReasoning,
        QaType::Numerical,
        QaType::ContentSummary,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            QaType::SpecificExtraction => "specific_extraction",
            QaType::SimpleReasoning => "simple_reasoning",
            QaType::ComplexReasoning => "complex_reasoning",
            QaType::Numerical => "numerical",
            QaType::ContentSummary => "content_summary",
        }
    }
}

impl fmt::Display for QaType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for QaType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace([' ', '-'], "_");
        QaType::ALL
            .into_iter()
            .find(|t| t.as_str() == key || (key == "numerical_question" && *t == QaType::Numerical))
            .ok_or_else(|| Error::Invalid(format!("unknown question type {s:?}")))
    }
}

/// A question-answer pair over one document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaRecord {
    pub question: String,
    pub answer: String,
    pub qtype: QaType,
    /// 1-based `(row, col)` of the cell the answer comes from.
    pub logical_loc: Option<(usize, usize)>,
    pub polygon: Option<PixelPolygon>,
    pub grounded: bool,
}

impl QaRecord {
    pub fn check(&self) -> Result<()> {
        if self.qtype == QaType::SpecificExtraction && self.logical_loc.is_none() {
            return Err(Error::Invalid(
                "specific extraction record without a logical location".into(),
            ));
        }
        if self.grounded && self.polygon.is_none() {
            return Err(Error::Invalid("grounded record without a polygon".into()));
        }
        Ok(())
    }
}

/// An unverified question from a generator, carrying the claimed value and
/// cell location.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaCandidate {
    pub question: String,
    pub answer: String,
    pub qtype: QaType,
    pub logical_loc: Option<(usize, usize)>,
}

impl From<&QaRecord> for QaCandidate {
    fn from(r: &QaRecord) -> Self {
        QaCandidate {
            question: r.question.clone(),
            answer: r.answer.clone(),
            qtype: r.qtype,
            logical_loc: r.logical_loc,
        }
    }
}
