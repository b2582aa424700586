use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, WeightedIndex};
use serde::{Deserialize, Serialize};

use super::{DocumentSample, QaRecord, QaType, TableSpec, TableStyle};
use crate::error::{Error, Result};

/// Question mix in thousands per type, in `QaType::ALL` order.
pub const DEFAULT_TYPE_WEIGHTS: [f64; 5] = [244.0, 293.0, 191.0, 166.0, 64.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QaGenConfig {
    pub per_table: usize,
    pub type_weights: [f64; 5],
}

impl Default for QaGenConfig {
    fn default() -> Self {
        QaGenConfig {
            per_table: 5,
            type_weights: DEFAULT_TYPE_WEIGHTS,
        }
    }
}

/// Shape and look of randomly drawn tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TableGenConfig {
    pub min_data_rows: usize,
    pub max_data_rows: usize,
    pub min_cols: usize,
    pub max_cols: usize,
    pub glyph_scale: usize,
    pub padding: usize,
    /// Probability that a table is rendered with a perspective warp.
    pub warp_prob: f64,
    pub warp: f64,
}

impl Default for TableGenConfig {
    fn default() -> Self {
        TableGenConfig {
            min_data_rows: 3,
            max_data_rows: 5,
            min_cols: 2,
            max_cols: 4,
            glyph_scale: 1,
            padding: 3,
            warp_prob: 0.0,
            warp: 0.06,
        }
    }
}

/// Parses a plain decimal such as `12`, `-3.5` or `$5.00` into hundredths.
/// More than two fractional digits is not a table value and gives `None`.
pub fn parse_decimal(s: &str) -> Option<i64> {
    let s = s.trim();
    let (neg, s) = match s.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, s),
    };
    let s = s.strip_prefix('$').unwrap_or(s);
    let (int, frac) = match s.split_once('.') {
        Some((i, f)) => (i, f),
        None => (s, ""),
    };
    if int.is_empty()
        || int.len() > 12
        || frac.len() > 2
        || (s.contains('.') && frac.is_empty())
        || !int.bytes().chain(frac.bytes()).all(|b| b.is_ascii_digit())
    {
        return None;
    }
    let mut v: i64 = int.parse().ok()?;
    v *= 100;
    if !frac.is_empty() {
        let f: i64 = frac.parse().ok()?;
        v += if frac.len() == 1 { f * 10 } else { f };
    }
    Some(if neg { -v } else { v })
}

/// Renders hundredths. `fixed` forces two decimals; otherwise whole values
/// print without a fraction.
pub fn format_hundredths(v: i64, fixed: bool) -> String {
    if !fixed && v % 100 == 0 {
        return (v / 100).to_string();
    }
    let sign = if v < 0 { "-" } else { "" };
    let a = v.unsigned_abs();
    format!("{sign}{}.{:02}", a / 100, a % 100)
}

/// `sum / n` in hundredths, rounded half up.
fn mean_hundredths(sum: i64, n: usize) -> i64 {
    let (s, n) = (sum as i128, n as i128);
    (2 * s + n).div_euclid(2 * n) as i64
}

struct Theme {
    topic: &'static str,
    key: &'static str,
    names: &'static [&'static str],
    columns: &'static [(&'static str, Col)],
}

#[derive(Clone, Copy)]
enum Col {
    Int(i64, i64),
    /// Hundredths range, with a currency sign.
    Money(i64, i64),
    /// Tenths range.
    Tenths(i64, i64),
    Text(&'static [&'static str]),
}

const THEMES: &[Theme] = &[
    Theme {
        topic: "items",
        key: "Item",
        names: &["Tea", "Coffee", "Bread", "Milk", "Rice", "Soup", "Cake", "Juice", "Eggs", "Salad", "Pasta", "Apple"],
        columns: &[
            ("Price", Col::Money(50, 2500)),
            ("Qty", Col::Int(1, 20)),
            ("Stock", Col::Int(0, 200)),
            ("Aisle", Col::Text(&["A1", "A2", "B1", "B4", "C2", "D3"])),
        ],
    },
    Theme {
        topic: "employees",
        key: "Name",
        names: &["Alice", "Bob", "Chen", "Dana", "Eve", "Farid", "Gita", "Hugo", "Iris", "Jon", "Kemal", "Lena"],
        columns: &[
            ("Age", Col::Int(21, 64)),
            ("Salary", Col::Int(30, 99)),
            ("Rating", Col::Tenths(10, 50)),
            ("Dept", Col::Text(&["Ops", "IT", "HR", "Sales", "Legal"])),
        ],
    },
    Theme {
        topic: "cities",
        key: "City",
        names: &["Oslo", "Lima", "Cairo", "Perth", "Quito", "Delhi", "Tokyo", "Paris", "Rome", "Seoul", "Dakar", "Kyiv"],
        columns: &[
            ("Temp", Col::Int(-5, 35)),
            ("Pop", Col::Tenths(5, 300)),
            ("Rain", Col::Int(0, 300)),
            ("Zone", Col::Text(&["North", "South", "East", "West"])),
        ],
    },
    Theme {
        topic: "teams",
        key: "Team",
        names: &["Hawks", "Bears", "Lions", "Owls", "Foxes", "Wolves", "Sharks", "Bulls", "Eagles", "Tigers"],
        columns: &[
            ("Wins", Col::Int(0, 30)),
            ("Losses", Col::Int(0, 30)),
            ("Points", Col::Int(0, 90)),
            ("Coach", Col::Text(&["Kim", "Ali", "Ruiz", "Moss", "Ito"])),
        ],
    },
];

fn draw_value(col: Col, rng: &mut impl Rng) -> String {
    match col {
        Col::Int(a, b) => rng.gen_range(a..=b).to_string(),
        Col::Money(a, b) => format!("${}", format_hundredths(rng.gen_range(a..=b), true)),
        Col::Tenths(a, b) => {
            let v = rng.gen_range(a..=b);
            format!("{}.{}", v / 10, v % 10)
        }
        Col::Text(opts) => opts.choose(rng).expect("non-empty options").to_string(),
    }
}

/// Draws a themed table: row 1 holds headers, column 1 holds distinct row
/// keys, and column 2 is always numeric.
pub fn random_table_spec(rng: &mut impl Rng, cfg: &TableGenConfig) -> Result<TableSpec> {
    if cfg.min_data_rows == 0
        || cfg.min_data_rows > cfg.max_data_rows
        || cfg.min_cols < 2
        || cfg.min_cols > cfg.max_cols
        || cfg.max_cols > 5
        || cfg.glyph_scale == 0
    {
        return Err(Error::Config(format!("invalid table shape {cfg:?}")));
    }
    let theme = THEMES.choose(rng).expect("themes");
    let data_rows = rng.gen_range(cfg.min_data_rows..=cfg.max_data_rows);
    if data_rows > theme.names.len() {
        return Err(Error::Config(format!("at most {} data rows", theme.names.len())));
    }
    let cols = rng.gen_range(cfg.min_cols..=cfg.max_cols);
    let numeric: Vec<_> = theme
        .columns
        .iter()
        .filter(|(_, c)| !matches!(c, Col::Text(_)))
        .collect();
    let first = *numeric.choose(rng).expect("numeric column");
    let mut rest: Vec<_> = theme
        .columns
        .iter()
        .filter(|(h, _)| *h != first.0)
        .collect();
    rest.shuffle(rng);
    let chosen: Vec<_> = std::iter::once(first)
        .chain(rest.into_iter().take(cols - 2))
        .collect();
    let keys: Vec<_> = theme.names.choose_multiple(rng, data_rows).collect();

    let mut cells = vec![std::iter::once(theme.key)
        .chain(chosen.iter().map(|(h, _)| *h))
        .map(str::to_string)
        .collect::<Vec<_>>()];
    for key in keys {
        let mut row = vec![key.to_string()];
        row.extend(chosen.iter().map(|(_, c)| draw_value(*c, rng)));
        cells.push(row);
    }
    let mut spec = TableSpec::new(cells, theme.topic)?;
    spec.style = TableStyle {
        glyph_scale: cfg.glyph_scale,
        padding: cfg.padding,
        warp: if rng.gen_bool(cfg.warp_prob.clamp(0.0, 1.0)) { cfg.warp } else { 0.0 },
    };
    Ok(spec)
}

struct Ctx<'a> {
    spec: &'a TableSpec,
    sample: &'a DocumentSample,
}

/// A drafted question before polygons are attached.
struct Draft {
    question: String,
    answer: String,
    loc: Option<(usize, usize)>,
}

impl Draft {
    fn new(question: String, answer: impl Into<String>, loc: Option<(usize, usize)>) -> Self {
        Draft {
            question,
            answer: answer.into(),
            loc,
        }
    }
}

impl Ctx<'_> {
    fn header(&self, c: usize) -> &str {
        self.spec.cell(1, c)
    }

    fn data_rows(&self) -> std::ops::RangeInclusive<usize> {
        2..=self.spec.rows
    }

    fn numeric_col(&self, rng: &mut impl Rng) -> Option<usize> {
        let cols: Vec<_> = self.spec.numeric_cols.iter().copied().collect();
        cols.choose(rng).copied()
    }

    fn value(&self, r: usize, c: usize) -> i64 {
        parse_decimal(self.spec.cell(r, c)).expect("numeric column")
    }

    fn key_unique(&self, r: usize) -> bool {
        let k = self.spec.cell(r, 1);
        self.data_rows().filter(|&i| self.spec.cell(i, 1) == k).count() == 1
    }

    fn has_grid(&self) -> bool {
        self.spec.rows >= 2 && self.spec.cols >= 2
    }

    fn extraction(&self, rng: &mut impl Rng) -> Option<Draft> {
        let r = if self.spec.rows >= 2 {
            rng.gen_range(self.data_rows())
        } else {
            1
        };
        let c = rng.gen_range(1..=self.spec.cols);
        let question = if r >= 2 && rng.gen_bool(0.5) {
            format!("What is the value in row {r} under {}?", self.header(c))
        } else {
            format!("What is the value at row {r}, column {c}?")
        };
        Some(Draft::new(question, self.spec.cell(r, c), Some((r, c))))
    }

    fn simple(&self, rng: &mut impl Rng) -> Option<Draft> {
        if !self.has_grid() {
            return None;
        }
        match rng.gen_range(0..3) {
            0 => {
                let r = rng.gen_range(self.data_rows());
                let c = rng.gen_range(2..=self.spec.cols);
                self.key_unique(r).then(|| {
                    Draft::new(
                        format!("What is the {} of {}?", self.header(c), self.spec.cell(r, 1)),
                        self.spec.cell(r, c),
                        Some((r, c)),
                    )
                })
            }
            1 => {
                let r = rng.gen_range(self.data_rows());
                let c = rng.gen_range(1..=self.spec.cols);
                let v = self.spec.cell(r, c);
                let hits = self
                    .spec
                    .positions()
                    .filter(|&(i, j)| i >= 2 && self.spec.cell(i, j) == v)
                    .count();
                (hits == 1).then(|| {
                    Draft::new(
                        format!("Which column contains {v}?"),
                        self.header(c),
                        Some((1, c)),
                    )
                })
            }
            _ => {
                let c = self.numeric_col(rng)?;
                let rows: Vec<_> = self.data_rows().collect();
                let pick: Vec<_> = rows.choose_multiple(rng, 2).copied().collect();
                let [a, b] = pick[..] else { return None };
                let (va, vb) = (self.value(a, c), self.value(b, c));
                (va != vb && self.key_unique(a) && self.key_unique(b)).then(|| {
                    Draft::new(
                        format!(
                            "Is the {} of {} higher than that of {}?",
                            self.header(c),
                            self.spec.cell(a, 1),
                            self.spec.cell(b, 1)
                        ),
                        if va > vb { "yes" } else { "no" },
                        None,
                    )
                })
            }
        }
    }

    fn complex(&self, rng: &mut impl Rng) -> Option<Draft> {
        if !self.has_grid() {
            return None;
        }
        let c = self.numeric_col(rng)?;
        let rows: Vec<_> = self.data_rows().collect();
        let h = self.header(c);
        let topic = &self.spec.topic;
        match rng.gen_range(0..3) {
            0 => {
                if rows.len() < 2 {
                    return None;
                }
                let highest = rng.gen_bool(0.5);
                let best = if highest {
                    rows.iter().map(|&r| self.value(r, c)).max()
                } else {
                    rows.iter().map(|&r| self.value(r, c)).min()
                }?;
                let hits: Vec<_> = rows.iter().filter(|&&r| self.value(r, c) == best).collect();
                let [&r] = hits[..] else { return None };
                Some(Draft::new(
                    format!(
                        "Which {} has the {} {h}?",
                        self.header(1),
                        if highest { "highest" } else { "lowest" }
                    ),
                    self.spec.cell(r, 1),
                    Some((r, 1)),
                ))
            }
            1 => {
                let t = *rows.choose(rng)?;
                let tv = self.value(t, c);
                let n = rows.iter().filter(|&&r| self.value(r, c) > tv).count();
                Some(Draft::new(
                    format!("How many {topic} have {h} above {}?", self.spec.cell(t, c)),
                    n.to_string(),
                    None,
                ))
            }
            _ => {
                let t = *rows.choose(rng)?;
                let tv = self.value(t, c);
                let names: Vec<_> = rows
                    .iter()
                    .filter(|&&r| self.value(r, c) < tv)
                    .map(|&r| self.spec.cell(r, 1))
                    .collect();
                let answer = if names.is_empty() {
                    "none".to_string()
                } else {
                    names.join(", ")
                };
                Some(Draft::new(
                    format!("Which {topic} have {h} below {}?", self.spec.cell(t, c)),
                    answer,
                    None,
                ))
            }
        }
    }

    fn numerical(&self, rng: &mut impl Rng) -> Option<Draft> {
        if self.spec.rows < 2 {
            return None;
        }
        let c = self.numeric_col(rng)?;
        let rows: Vec<_> = self.data_rows().collect();
        let h = self.header(c);
        let texts: Vec<_> = rows.iter().map(|&r| self.spec.cell(r, c).trim()).collect();
        let sum: i64 = rows.iter().map(|&r| self.value(r, c)).sum();
        let fixed = texts.iter().any(|t| t.contains('.'));
        match rng.gen_range(0..4) {
            0 => Some(Draft::new(
                format!("What is the total {h}?"),
                format!("{} = {}", texts.join(" + "), format_hundredths(sum, fixed)),
                None,
            )),
            1 => Some(Draft::new(
                format!("What is the average {h}?"),
                format!(
                    "({}) / {} = {}",
                    texts.join(" + "),
                    rows.len(),
                    format_hundredths(mean_hundredths(sum, rows.len()), true)
                ),
                None,
            )),
            k => {
                let highest = k == 2;
                let vals = rows.iter().map(|&r| self.value(r, c));
                let best = if highest { vals.max() } else { vals.min() }?;
                let hits: Vec<_> = rows.iter().filter(|&&r| self.value(r, c) == best).collect();
                let loc = match hits[..] {
                    [&r] => Some((r, c)),
                    _ => None,
                };
                Some(Draft::new(
                    format!("What is the {} {h}?", if highest { "maximum" } else { "minimum" }),
                    self.spec.cell(*hits[0], c),
                    loc,
                ))
            }
        }
    }

    fn summary(&self, rng: &mut impl Rng) -> Option<Draft> {
        let questions = [
            "Summarize the table.",
            "What does the table describe?",
            "Give a short description of the table.",
        ];
        let headers: Vec<_> = (1..=self.spec.cols).map(|c| self.header(c)).collect();
        let cols = match headers.split_last() {
            Some((last, init)) if !init.is_empty() => format!("{} and {last}", init.join(", ")),
            _ => headers.join(""),
        };
        Some(Draft::new(
            questions.choose(rng)?.to_string(),
            format!(
                "The table lists {} {} with columns {cols}.",
                self.spec.rows.saturating_sub(1).max(1),
                self.spec.topic
            ),
            None,
        ))
    }

    fn draft(&self, t: QaType, rng: &mut impl Rng) -> Option<Draft> {
        match t {
            QaType::SpecificExtraction => self.extraction(rng),
            QaType::SimpleReasoning => self.simple(rng),
            QaType::ComplexReasoning => self.complex(rng),
            QaType::Numerical => self.numerical(rng),
            QaType::ContentSummary => self.summary(rng),
        }
    }

    fn applicable(&self, t: QaType) -> bool {
        match t {
            QaType::SpecificExtraction | QaType::ContentSummary => true,
            QaType::SimpleReasoning | QaType::ComplexReasoning => self.has_grid(),
            QaType::Numerical => self.spec.rows >= 2 && !self.spec.numeric_cols.is_empty(),
        }
    }
}

/// Templated questions over one rendered table. Each of `per_table` slots
/// draws a type by weight among the applicable ones; a record is grounded
/// exactly when its answer is the text of one identifiable cell.
pub fn gen_qa_deterministic(
    spec: &TableSpec,
    sample: &DocumentSample,
    seed: u64,
    cfg: &QaGenConfig,
) -> Result<Vec<QaRecord>> {
    spec.validate()?;
    if sample.grid_size() != (spec.rows, spec.cols) {
        return Err(Error::Invalid("sample does not match table spec".into()));
    }
    let ctx = Ctx { spec, sample };
    if spec.numeric_cols.is_empty() {
        log::info!("table has no numeric columns; skipping numerical questions");
    }
    let weights: Vec<f64> = QaType::ALL
        .iter()
        .zip(cfg.type_weights)
        .map(|(t, w)| if ctx.applicable(*t) { w.max(0.0) } else { 0.0 })
        .collect();
    let dist = WeightedIndex::new(&weights)
        .map_err(|e| Error::Config(format!("question type weights: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(cfg.per_table);
    for _ in 0..cfg.per_table {
        let t = QaType::ALL[dist.sample(&mut rng)];
        for _ in 0..24 {
            let Some(d) = ctx.draft(t, &mut rng) else { continue };
            if !seen.insert(d.question.clone()) {
                continue;
            }
            let polygon = d
                .loc
                .map(|(r, c)| ctx.sample.cell_at(r, c).expect("cell in grid").polygon);
            out.push(QaRecord {
                question: d.question,
                answer: d.answer,
                qtype: t,
                logical_loc: d.loc,
                grounded: polygon.is_some(),
                polygon,
            });
            break;
        }
    }
    Ok(out)
}
