//! End-to-end corpus generation: random tables, rendering, questions from
//! the deterministic generator or an LLM, verification.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::llm::{llm_generate_batch, CompletionClient, LlmConfig};
use super::{
    gen_qa_deterministic, random_table_spec, render_document, verify_and_ground, CorpusDocument,
    QaGenConfig, QaType, RenderConfig, TableGenConfig, VerifyStats,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub count: usize,
    pub seed: u64,
    /// Document ids are `<prefix><index>`.
    pub id_prefix: String,
    pub page: RenderConfig,
    pub table: TableGenConfig,
    pub qa: QaGenConfig,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            count: 100,
            seed: 0,
            id_prefix: "doc".into(),
            page: RenderConfig::default(),
            table: TableGenConfig::default(),
            qa: QaGenConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub documents: usize,
    pub questions: usize,
    pub grounded: usize,
    /// Question counts keyed by type name; every type is present.
    pub per_type: BTreeMap<String, usize>,
    /// Tables whose LLM request failed and that were left without questions.
    pub skipped_tables: usize,
    pub verify: VerifyStats,
}

impl CorpusStats {
    pub fn from_documents(docs: &[CorpusDocument]) -> Self {
        let mut per_type: BTreeMap<String, usize> =
            QaType::ALL.iter().map(|t| (t.as_str().to_string(), 0)).collect();
        let mut s = CorpusStats {
            documents: docs.len(),
            ..Default::default()
        };
        for q in docs.iter().flat_map(|d| &d.qas) {
            s.questions += 1;
            s.grounded += usize::from(q.grounded);
            *per_type.get_mut(q.qtype.as_str()).expect("all types listed") += 1;
        }
        s.per_type = per_type;
        s
    }
}

/// Seed for document `index`, so each document is reproducible on its own.
pub fn document_seed(seed: u64, index: usize) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ (index as u64).wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Source of question candidates for the pipeline.
pub enum QaSource<'a> {
    Deterministic,
    Llm {
        client: &'a dyn CompletionClient,
        config: &'a LlmConfig,
    },
}

pub fn generate_corpus(
    cfg: &CorpusConfig,
    source: QaSource<'_>,
) -> Result<(Vec<CorpusDocument>, CorpusStats)> {
    let mut specs = Vec::with_capacity(cfg.count);
    let mut docs = Vec::with_capacity(cfg.count);
    for i in 0..cfg.count {
        let seed = document_seed(cfg.seed, i);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = random_table_spec(&mut rng, &cfg.table)?;
        let sample = render_document(&spec, seed, cfg.page)
            .map_err(|e| Error::Layout(format!("document {i}: {e}")))?;
        docs.push(CorpusDocument {
            id: format!("{}{i:05}", cfg.id_prefix),
            sample,
            qas: Vec::new(),
        });
        specs.push((spec, seed));
    }
    let mut verify = VerifyStats::default();
    let mut skipped = 0;
    match source {
        QaSource::Deterministic => {
            for (doc, (spec, seed)) in docs.iter_mut().zip(&specs) {
                doc.qas = gen_qa_deterministic(spec, &doc.sample, *seed, &cfg.qa)?;
            }
        }
        QaSource::Llm { client, config } => {
            let htmls: Vec<String> = docs.iter().map(|d| d.sample.html.clone()).collect();
            for (doc, cands) in docs.iter_mut().zip(llm_generate_batch(&htmls, client, config)) {
                match cands {
                    Some(c) => {
                        let (qas, stats) = verify_and_ground(&c, &doc.sample);
                        verify.merge(&stats);
                        doc.qas = qas;
                    }
                    None => skipped += 1,
                }
            }
        }
    }
    let mut stats = CorpusStats::from_documents(&docs);
    stats.skipped_tables = skipped;
    stats.verify = verify;
    Ok((docs, stats))
}
