//! Compare a fully supervised run with one where downstream pages carry no
//! polygon targets and only the auxiliary half of the mix is grounded.
//!
//!     cargo run --release --example masked_supervision

use groundkie::datagen::{generate_corpus, CorpusConfig, QaSource};
use groundkie::harness::{overfit_corpus, overfit_setup, run_mixed, run_single};
use groundkie::train::SeeSupervision;
use groundkie::vocab::{printable_ascii, Vocabulary};

fn main() -> groundkie::Result<()> {
    env_logger::init();
    let vocab = Vocabulary::build(&printable_ascii())?;
    let setup = overfit_setup(&vocab);
    let (downstream, _) = generate_corpus(&overfit_corpus(0), QaSource::Deterministic)?;
    let aux_cfg = CorpusConfig {
        id_prefix: "aux".into(),
        ..overfit_corpus(1)
    };
    let (auxiliary, _) = generate_corpus(&aux_cfg, QaSource::Deterministic)?;

    let (_, full) = run_single(&setup, &downstream, &vocab, &[0.1])?;
    let mut masked = setup.clone();
    masked.train.see_supervision = SeeSupervision::AuxiliaryOnly;
    // half the batches come from the auxiliary pages
    masked.train.total_steps *= 2;
    let (_, t3) = run_mixed(&masked, &downstream, &auxiliary, &vocab, &[0.1])?;

    println!("fully supervised: EM {:.4}  mean IoU {:.4}", full.report.exact_match, full.report.mean_iou);
    println!("auxiliary only:   EM {:.4}  mean IoU {:.4}", t3.report.exact_match, t3.report.mean_iou);
    println!(
        "exact-match gap {:.2} points",
        100.0 * (full.report.exact_match - t3.report.exact_match).abs()
    );
    Ok(())
}
