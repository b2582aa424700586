//! Desk-scale training presets and the four-system ablation.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::datagen::{CorpusConfig, CorpusDocument, QaGenConfig};
use crate::error::Result;
use crate::eval::{predict_corpus, score};
use crate::metrics::MetricsReport;
use crate::model::{Model, ModelConfig};
use crate::tasks::{make_vqa_example, GroundingMode, Placement, PreparedDoc, TrainingExample};
use crate::train::{
    mix_datasets, train_loop, ExampleStream, SeeSupervision, TrainConfig, TrainOptions,
    TrainReport,
};
use crate::vocab::Vocabulary;

/// Everything needed to train and score one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Setup {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub model_seed: u64,
    /// Decoding budget at evaluation time.
    pub max_new: usize,
}

/// A model small enough to memorize a few dozen pages in a couple of
/// minutes on one core: 128 px canvas, width 64, one layer each side.
pub fn overfit_setup(vocab: &Vocabulary) -> Setup {
    Setup {
        model: ModelConfig {
            image_height: 128,
            image_width: 128,
            patch: 16,
            dim: 64,
            encoder_layers: 1,
            decoder_layers: 1,
            heads: 4,
            vocab_size: vocab.size(),
            max_len: 128,
        },
        train: TrainConfig {
            total_steps: 2000,
            batch_size: 8,
            peak_lr: 3e-3,
            ..TrainConfig::default()
        },
        model_seed: 0,
        max_new: 100,
    }
}

/// The 32-page corpus used for memorization runs.
pub fn overfit_corpus(seed: u64) -> CorpusConfig {
    CorpusConfig {
        count: 32,
        seed,
        qa: QaGenConfig {
            per_table: 2,
            ..QaGenConfig::default()
        },
        ..CorpusConfig::default()
    }
}

pub fn vqa_examples(
    docs: &[CorpusDocument],
    model: &ModelConfig,
    mode: GroundingMode,
    vocab: &Vocabulary,
) -> Result<Vec<TrainingExample>> {
    let mut out = Vec::new();
    for d in docs {
        let prep = PreparedDoc::new(d.id.clone(), &d.sample, model, Placement::Centered)?;
        for qa in &d.qas {
            let ex = make_vqa_example(&prep, qa, mode, vocab)?;
            ex.check(vocab, model.max_len)?;
            out.push(ex);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub report: MetricsReport,
    pub final_lm_loss: f64,
    pub final_see_loss: f64,
    pub steps: usize,
    pub train_secs: f64,
}

fn finish(
    setup: &Setup,
    model: &Model,
    vocab: &Vocabulary,
    eval_docs: &[CorpusDocument],
    thresholds: &[f64],
    tr: &TrainReport,
    secs: f64,
) -> Result<RunResult> {
    let preds = predict_corpus(model, vocab, eval_docs, setup.max_new)?;
    let last = tr.records.last();
    Ok(RunResult {
        report: score(&preds, thresholds)?,
        final_lm_loss: last.map_or(f64::NAN, |r| r.lm_loss),
        final_see_loss: last.map_or(f64::NAN, |r| r.see_loss),
        steps: tr.steps_done,
        train_secs: secs,
    })
}

/// Trains on the VQA records of `docs` alone and scores on the same pages.
pub fn run_single(
    setup: &Setup,
    docs: &[CorpusDocument],
    vocab: &Vocabulary,
    thresholds: &[f64],
) -> Result<(Model, RunResult)> {
    let examples = vqa_examples(docs, &setup.model, setup.train.grounding_mode, vocab)?;
    let stream = ExampleStream::single(examples, setup.train.seed)?;
    let mut model = Model::new(setup.model.clone(), setup.model_seed)?;
    let t = std::time::Instant::now();
    let tr = train_loop(&setup.train, &mut model, &stream, &TrainOptions::default())?;
    let secs = t.elapsed().as_secs_f64();
    let r = finish(setup, &model, vocab, docs, thresholds, &tr, secs)?;
    Ok((model, r))
}

/// Trains on a mix of `downstream` and `auxiliary` pages under
/// `setup.train.mix_ratio` and `see_supervision`, scoring on `downstream`.
pub fn run_mixed(
    setup: &Setup,
    downstream: &[CorpusDocument],
    auxiliary: &[CorpusDocument],
    vocab: &Vocabulary,
    thresholds: &[f64],
) -> Result<(Model, RunResult)> {
    let mode = setup.train.grounding_mode;
    let stream = mix_datasets(
        vqa_examples(downstream, &setup.model, mode, vocab)?,
        vqa_examples(auxiliary, &setup.model, mode, vocab)?,
        setup.train.seed,
        setup.train.mix_ratio,
        setup.train.see_supervision,
    )?;
    let mut model = Model::new(setup.model.clone(), setup.model_seed)?;
    let t = std::time::Instant::now();
    let tr = train_loop(&setup.train, &mut model, &stream, &TrainOptions::default())?;
    let secs = t.elapsed().as_secs_f64();
    let r = finish(setup, &model, vocab, downstream, thresholds, &tr, secs)?;
    Ok((model, r))
}

/// The four ablation systems.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum System {
    T1,
    T2,
    T3,
    T4,
}

impl System {
    pub const ALL: [System; 4] = [System::T1, System::T2, System::T3, System::T4];

    pub fn uses_auxiliary(self) -> bool {
        self != System::T1
    }

    pub fn grounding_mode(self) -> GroundingMode {
        match self {
            System::T1 | System::T2 => GroundingMode::None,
            System::T3 | System::T4 => GroundingMode::SeeFirst,
        }
    }

    pub fn see_supervision(self) -> SeeSupervision {
        match self {
            System::T4 => SeeSupervision::AuxiliaryAndDownstream,
            _ => SeeSupervision::AuxiliaryOnly,
        }
    }

    /// `setup` with this system's mode and supervision.
    pub fn configure(self, setup: &Setup) -> Setup {
        let mut s = setup.clone();
        s.train.grounding_mode = self.grounding_mode();
        s.train.see_supervision = self.see_supervision();
        s
    }
}

impl fmt::Display for System {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub system: System,
    pub auxiliary: bool,
    pub grounding_mode: GroundingMode,
    pub see_supervision: SeeSupervision,
    pub result: RunResult,
}

pub fn run_ablation(
    setup: &Setup,
    downstream: &[CorpusDocument],
    auxiliary: &[CorpusDocument],
    vocab: &Vocabulary,
    thresholds: &[f64],
) -> Result<Vec<AblationRow>> {
    System::ALL
        .iter()
        .map(|&sys| {
            let s = sys.configure(setup);
            log::info!("ablation {sys}: mode {}, {}", s.train.grounding_mode, s.train.see_supervision);
            let (_, result) = if sys.uses_auxiliary() {
                run_mixed(&s, downstream, auxiliary, vocab, thresholds)?
            } else {
                run_single(&s, downstream, vocab, thresholds)?
            };
            Ok(AblationRow {
                system: sys,
                auxiliary: sys.uses_auxiliary(),
                grounding_mode: s.train.grounding_mode,
                see_supervision: s.train.see_supervision,
                result,
            })
        })
        .collect()
}

/// Side-by-side text table of ablation rows.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut keys: Vec<&String> = rows
        .first()
        .map(|r| r.result.report.iou_acc.keys().collect())
        .unwrap_or_default();
    keys.sort();
    let mut s = format!(
        "{:<4} {:<4} {:<10} {:<25} {:>7} {:>7} {:>7} {:>7} {:>8}",
        "sys", "aux", "mode", "see_supervision", "F1", "TED", "ANLS", "EM", "meanIoU"
    );
    for k in &keys {
        s.push_str(&format!(" {:>9}", format!("iou@{k}")));
    }
    s.push('\n');
    for r in rows {
        let m = &r.result.report;
        s.push_str(&format!(
            "{:<4} {:<4} {:<10} {:<25} {:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>8.4}",
            r.system.to_string(),
            if r.auxiliary { "yes" } else { "no" },
            r.grounding_mode.as_str(),
            r.see_supervision.as_str(),
            m.f1,
            m.ted_acc,
            m.anls,
            m.exact_match,
            m.mean_iou
        ));
        for k in &keys {
            s.push_str(&format!(" {:>9.4}", m.iou_acc.get(*k).copied().unwrap_or(0.0)));
        }
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_corpus, QaSource};
    use crate::vocab::printable_ascii;

    #[test]
    fn systems_are_configured() {
        assert!(!System::T1.uses_auxiliary());
        assert_eq!(System::T2.grounding_mode(), GroundingMode::None);
        assert_eq!(System::T3.see_supervision(), SeeSupervision::AuxiliaryOnly);
        assert_eq!(System::T4.see_supervision(), SeeSupervision::AuxiliaryAndDownstream);
    }

    #[test]
    fn tiny_ablation_has_four_rows() {
        let vocab = Vocabulary::build(&printable_ascii()).unwrap();
        let mut setup = overfit_setup(&vocab);
        setup.train.total_steps = 3;
        setup.model.dim = 16;
        setup.max_new = 4;
        let corpus = |seed, prefix: &str| {
            let cfg = CorpusConfig {
                count: 2,
                seed,
                id_prefix: prefix.into(),
                qa: QaGenConfig {
                    per_table: 1,
                    ..QaGenConfig::default()
                },
                ..CorpusConfig::default()
            };
            generate_corpus(&cfg, QaSource::Deterministic).unwrap().0
        };
        let rows = run_ablation(&setup, &corpus(1, "d"), &corpus(2, "a"), &vocab, &[0.1]).unwrap();
        let names: Vec<String> = rows.iter().map(|r| r.system.to_string()).collect();
        assert_eq!(names, ["T1", "T2", "T3", "T4"]);
        assert_eq!(rows[2].see_supervision, SeeSupervision::AuxiliaryOnly);
        let table = ablation_table(&rows);
        assert_eq!(table.lines().count(), 5);
        assert!(table.lines().nth(3).unwrap().contains("auxiliary_only"));
    }
}
