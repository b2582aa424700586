//! The four-system ablation (no auxiliary data / auxiliary without `<see>` /
//! auxiliary-only grounding / grounding everywhere) on small corpora.
//!
//!     cargo run --release --example ablation [steps]

use groundkie::datagen::{generate_corpus, CorpusConfig, QaSource};
use groundkie::harness::{ablation_table, overfit_corpus, overfit_setup, run_ablation};
use groundkie::vocab::{printable_ascii, Vocabulary};

fn main() -> groundkie::Result<()> {
    env_logger::init();
    let vocab = Vocabulary::build(&printable_ascii())?;
    let mut setup = overfit_setup(&vocab);
    setup.train.total_steps = std::env::args().nth(1).map_or(300, |s| s.parse().expect("steps"));
    let small = |seed, prefix: &str| CorpusConfig {
        count: 8,
        id_prefix: prefix.into(),
        ..overfit_corpus(seed)
    };
    let (down, _) = generate_corpus(&small(0, "doc"), QaSource::Deterministic)?;
    let (aux, _) = generate_corpus(&small(1, "aux"), QaSource::Deterministic)?;
    let rows = run_ablation(&setup, &down, &aux, &vocab, &[1e-3, 1e-2, 1e-1])?;
    print!("{}", ablation_table(&rows));
    Ok(())
}
