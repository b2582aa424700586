use serde::{Deserialize, Serialize};

use super::{DocumentSample, QaCandidate, QaRecord, QaType};

/// Trims and maps every unicode whitespace run to a single ASCII space.
pub fn normalize_answer(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerifyStats {
    pub retained: usize,
    pub mismatched: usize,
    pub out_of_range: usize,
    /// Extraction candidates arriving without a cell reference.
    pub unlocated: usize,
    /// Candidates with no cell reference kept as ungrounded records.
    pub passed_ungrounded: usize,
}

impl VerifyStats {
    pub fn dropped(&self) -> usize {
        self.mismatched + self.out_of_range + self.unlocated
    }

    pub fn merge(&mut self, o: &VerifyStats) {
        self.retained += o.retained;
        self.mismatched += o.mismatched;
        self.out_of_range += o.out_of_range;
        self.unlocated += o.unlocated;
        self.passed_ungrounded += o.passed_ungrounded;
    }
}

/// Checks each candidate's claimed value against the cell it references.
/// A located candidate survives only when the normalized answer equals the
/// normalized cell text, and then carries that cell's polygon. Candidates
/// that reference no cell are kept ungrounded, except extraction questions,
/// which must always name their cell.
pub fn verify_and_ground(
    candidates: &[QaCandidate],
    sample: &DocumentSample,
) -> (Vec<QaRecord>, VerifyStats) {
    let mut stats = VerifyStats::default();
    let mut out = Vec::new();
    for cand in candidates {
        let Some((r, c)) = cand.logical_loc else {
            if cand.qtype == QaType::SpecificExtraction {
                stats.unlocated += 1;
                log::debug!("dropping unlocated extraction candidate {:?}", cand.question);
            } else {
                stats.passed_ungrounded += 1;
                out.push(QaRecord {
                    question: cand.question.clone(),
                    answer: cand.answer.clone(),
                    qtype: cand.qtype,
                    logical_loc: None,
                    polygon: None,
                    grounded: false,
                });
            }
            continue;
        };
        let Some(cell) = sample.cell_at(r, c) else {
            stats.out_of_range += 1;
            log::debug!("dropping candidate at ({r}, {c}): outside the grid");
            continue;
        };
        if normalize_answer(&cand.answer) != normalize_answer(&cell.text) {
            stats.mismatched += 1;
            log::debug!(
                "dropping candidate at ({r}, {c}): {:?} does not match {:?}",
                cand.answer,
                cell.text
            );
            continue;
        }
        stats.retained += 1;
        out.push(QaRecord {
            question: cand.question.clone(),
            answer: cand.answer.clone(),
            qtype: cand.qtype,
            logical_loc: Some((r, c)),
            polygon: Some(cell.polygon),
            grounded: true,
        });
    }
    (out, stats)
}
