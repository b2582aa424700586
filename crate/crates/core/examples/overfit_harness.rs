//! Memorize 32 synthetic pages with `<see>` grounding and report how well
//! answers and polygons come back.
//!
//!     cargo run --release --example overfit_harness [steps]

use groundkie::datagen::{generate_corpus, QaSource};
use groundkie::harness::{overfit_corpus, overfit_setup, run_single};
use groundkie::vocab::{printable_ascii, Vocabulary};

fn main() -> groundkie::Result<()> {
    env_logger::init();
    let vocab = Vocabulary::build(&printable_ascii())?;
    let mut setup = overfit_setup(&vocab);
    if let Some(steps) = std::env::args().nth(1) {
        setup.train.total_steps = steps.parse().expect("steps must be an integer");
    }
    let (docs, stats) = generate_corpus(&overfit_corpus(0), QaSource::Deterministic)?;
    println!(
        "{} pages, {} questions ({} grounded), {} steps",
        stats.documents, stats.questions, stats.grounded, setup.train.total_steps
    );
    let (_, run) = run_single(&setup, &docs, &vocab, &[1e-3, 1e-2, 1e-1])?;
    println!(
        "trained in {:.1}s, final lm loss {:.5}, see loss {:.2}",
        run.train_secs, run.final_lm_loss, run.final_see_loss
    );
    print!("{}", run.report);
    Ok(())
}
