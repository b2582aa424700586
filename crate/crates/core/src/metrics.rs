//! Field F1, tree-edit-distance accuracy, ANLS and polygon IoU accuracy.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou_or_zero, PixelPolygon, Point};

/// Multiset of `(field, value)` pairs.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldSet(pub Vec<(String, String)>);

impl FieldSet {
    pub fn new() -> Self {
        FieldSet(Vec::new())
    }

    pub fn push(&mut self, field: impl Into<String>, value: impl Into<String>) {
        self.0.push((field.into(), value.into()));
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Size of the multiset intersection.
    pub fn matches(&self, other: &FieldSet) -> usize {
        let mut counts: HashMap<&(String, String), usize> = HashMap::new();
        for p in &other.0 {
            *counts.entry(p).or_default() += 1;
        }
        self.0
            .iter()
            .filter(|p| match counts.get_mut(p) {
                Some(c) if *c > 0 => {
                    *c -= 1;
                    true
                }
                _ => false,
            })
            .count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct F1Score {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl F1Score {
    pub fn from_counts(hits: usize, n_pred: usize, n_gold: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(hits, n_pred);
        let recall = ratio(hits, n_gold);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        F1Score {
            precision,
            recall,
            f1,
        }
    }
}

pub fn field_f1(pred: &FieldSet, gold: &FieldSet) -> F1Score {
    F1Score::from_counts(pred.matches(gold), pred.len(), gold.len())
}

/// Ordered labeled tree.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AnswerTree {
    pub label: String,
    pub children: Vec<AnswerTree>,
}

impl AnswerTree {
    pub fn leaf(label: impl Into<String>) -> Self {
        AnswerTree {
            label: label.into(),
            children: Vec::new(),
        }
    }

    pub fn node(label: impl Into<String>, children: Vec<AnswerTree>) -> Self {
        AnswerTree {
            label: label.into(),
            children,
        }
    }

    pub fn size(&self) -> usize {
        1 + self.children.iter().map(AnswerTree::size).sum::<usize>()
    }

    /// `root → field → value` with fields in the given order.
    pub fn from_fields(root: &str, fields: &FieldSet) -> Self {
        AnswerTree::node(
            root,
            fields
                .0
                .iter()
                .map(|(f, v)| AnswerTree::node(f.clone(), vec![AnswerTree::leaf(v.clone())]))
                .collect(),
        )
    }

    /// Parses `label(child, child)` notation, where a label is any run of
    /// characters other than `(`, `)` and `,` (backslash escapes them).
    /// Text that does not parse becomes a single leaf holding the trimmed
    /// input.
    pub fn parse(s: &str) -> Self {
        let chars: Vec<char> = s.chars().collect();
        let mut pos = 0;
        match parse_tree(&chars, &mut pos) {
            Some(t) if chars[pos..].iter().all(|c| c.is_whitespace()) => t,
            _ => AnswerTree::leaf(s.trim()),
        }
    }
}

fn parse_label(chars: &[char], pos: &mut usize) -> Option<String> {
    let mut out = String::new();
    while let Some(&c) = chars.get(*pos) {
        match c {
            '(' | ')' | ',' => break,
            '\\' => {
                out.push(*chars.get(*pos + 1)?);
                *pos += 2;
            }
            _ => {
                out.push(c);
                *pos += 1;
            }
        }
    }
    let t = out.trim();
    (!t.is_empty()).then(|| t.to_string())
}

fn parse_tree(chars: &[char], pos: &mut usize) -> Option<AnswerTree> {
    let label = parse_label(chars, pos)?;
    let mut children = Vec::new();
    if chars.get(*pos) == Some(&'(') {
        *pos += 1;
        loop {
            children.push(parse_tree(chars, pos)?);
            match chars.get(*pos)? {
                ',' => *pos += 1,
                ')' => {
                    *pos += 1;
                    break;
                }
                _ => return None,
            }
        }
    }
    Some(AnswerTree { label, children })
}

impl fmt::Display for AnswerTree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in self.label.chars() {
            if matches!(c, '(' | ')' | ',' | '\\') {
                write!(f, "\\")?;
            }
            write!(f, "{c}")?;
        }
        if !self.children.is_empty() {
            write!(f, "(")?;
            for (i, c) in self.children.iter().enumerate() {
                if i > 0 {
                    write!(f, ",")?;
                }
                write!(f, "{c}")?;
            }
            write!(f, ")")?;
        }
        Ok(())
    }
}

/// Post-order labels, leftmost-leaf indices and keyroots.
struct Indexed<'a> {
    labels: Vec<&'a str>,
    lml: Vec<usize>,
    keyroots: Vec<usize>,
}

impl<'a> Indexed<'a> {
    fn new(t: Option<&'a AnswerTree>) -> Self {
        let mut ix = Indexed {
            labels: Vec::new(),
            lml: Vec::new(),
            keyroots: Vec::new(),
        };
        if let Some(t) = t {
            ix.visit(t);
        }
        let n = ix.labels.len();
        let mut seen = std::collections::HashSet::new();
        for i in (0..n).rev() {
            if seen.insert(ix.lml[i]) {
                ix.keyroots.push(i);
            }
        }
        ix.keyroots.sort_unstable();
        ix
    }

    fn visit(&mut self, t: &'a AnswerTree) -> usize {
        let mut first = None;
        for c in &t.children {
            let l = self.visit(c);
            first.get_or_insert(l);
        }
        let idx = self.labels.len();
        self.labels.push(&t.label);
        self.lml.push(first.unwrap_or(idx));
        self.lml[idx]
    }
}

fn zhang_shasha(a: &Indexed, b: &Indexed) -> usize {
    let (n, m) = (a.labels.len(), b.labels.len());
    if n == 0 || m == 0 {
        return n + m;
    }
    let mut td = vec![vec![0usize; m]; n];
    let mut fd = vec![vec![0usize; m + 1]; n + 1];
    for &i in &a.keyroots {
        for &j in &b.keyroots {
            let (li, lj) = (a.lml[i], b.lml[j]);
            // fd[x][y]: forest a[li..li+x) vs b[lj..lj+y)
            let (ni, nj) = (i - li + 1, j - lj + 1);
            fd[0][0] = 0;
            for x in 1..=ni {
                fd[x][0] = fd[x - 1][0] + 1;
            }
            for y in 1..=nj {
                fd[0][y] = fd[0][y - 1] + 1;
            }
            for x in 1..=ni {
                for y in 1..=nj {
                    let (ai, bj) = (li + x - 1, lj + y - 1);
                    let del = fd[x - 1][y] + 1;
                    let ins = fd[x][y - 1] + 1;
                    if a.lml[ai] == li && b.lml[bj] == lj {
                        let rel = fd[x - 1][y - 1] + usize::from(a.labels[ai] != b.labels[bj]);
                        fd[x][y] = del.min(ins).min(rel);
                        td[ai][bj] = fd[x][y];
                    } else {
                        let px = a.lml[ai] - li;
                        let py = b.lml[bj] - lj;
                        fd[x][y] = del.min(ins).min(fd[px][py] + td[ai][bj]);
                    }
                }
            }
        }
    }
    td[n - 1][m - 1]
}

/// Unit-cost ordered tree edit distance; `None` is the empty tree.
pub fn tree_edit_distance(a: Option<&AnswerTree>, b: Option<&AnswerTree>) -> usize {
    zhang_shasha(&Indexed::new(a), &Indexed::new(b))
}

/// `max(0, 1 - TED(pred, gold) / TED(empty, gold))`.
pub fn ted_accuracy(pred: Option<&AnswerTree>, gold: &AnswerTree) -> f64 {
    let d = tree_edit_distance(pred, Some(gold)) as f64;
    (1.0 - d / gold.size() as f64).max(0.0)
}

pub fn levenshtein(a: &[char], b: &[char]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            cur[j + 1] = (prev[j] + usize::from(ca != cb))
                .min(prev[j + 1] + 1)
                .min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Normalized Levenshtein similarity against the best of `golds`, case
/// folded, with similarities from distances of 0.5 or more zeroed.
pub fn anls(pred: &str, golds: &[&str]) -> Result<f64> {
    if golds.is_empty() {
        return Err(Error::Invalid("anls needs at least one gold answer".into()));
    }
    let p: Vec<char> = pred.to_lowercase().chars().collect();
    Ok(golds
        .iter()
        .map(|g| {
            let g: Vec<char> = g.to_lowercase().chars().collect();
            let longest = p.len().max(g.len());
            if longest == 0 {
                return 1.0;
            }
            let nl = levenshtein(&p, &g) as f64 / longest as f64;
            if nl < 0.5 {
                1.0 - nl
            } else {
                0.0
            }
        })
        .fold(0.0, f64::max))
}

/// Fraction of aligned pairs whose IoU exceeds `threshold`. Missing
/// predictions count as wrong.
pub fn iou_accuracy(
    preds: &[Option<[Point; 4]>],
    golds: &[PixelPolygon],
    threshold: f64,
) -> Result<f64> {
    if preds.len() != golds.len() {
        return Err(Error::Invalid(format!(
            "{} predictions for {} gold polygons",
            preds.len(),
            golds.len()
        )));
    }
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::Invalid(format!("threshold {threshold} outside [0, 1]")));
    }
    if golds.is_empty() {
        return Ok(0.0);
    }
    let hits = preds
        .iter()
        .zip(golds)
        .filter(|(p, g)| p.is_some_and(|p| iou_or_zero(p, g) > threshold))
        .count();
    Ok(hits as f64 / golds.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub ted_acc: f64,
    pub anls: f64,
    pub exact_match: f64,
    /// IoU accuracy keyed by the threshold as written on the command line.
    pub iou_acc: BTreeMap<String, f64>,
    pub mean_iou: f64,
    pub samples: usize,
    pub grounded_samples: usize,
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "samples        {} ({} grounded)", self.samples, self.grounded_samples)?;
        writeln!(
            f,
            "field F1       {:.4}  (precision {:.4}, recall {:.4})",
            self.f1, self.precision, self.recall
        )?;
        writeln!(f, "TED accuracy   {:.4}", self.ted_acc)?;
        writeln!(f, "ANLS           {:.4}", self.anls)?;
        writeln!(f, "exact match    {:.4}", self.exact_match)?;
        writeln!(f, "mean IoU       {:.4}", self.mean_iou)?;
        for (t, v) in &self.iou_acc {
            writeln!(f, "IoU acc @{t:<6} {v:.4}")?;
        }
        Ok(())
    }
}
