//! Train briefly, save a checkpoint, load it back and answer a question
//! about a page, printing the answer and its polygon in page pixels.
//!
//!     cargo run --release --example checkpoint_infer

use groundkie::datagen::{generate_corpus, QaSource};
use groundkie::eval::answer_question;
use groundkie::harness::{overfit_corpus, overfit_setup, vqa_examples};
use groundkie::model::Checkpoint;
use groundkie::tasks::{Placement, PreparedDoc};
use groundkie::train::{train_loop, ExampleStream, TrainOptions, CHECKPOINT_FILE};
use groundkie::vocab::{printable_ascii, Vocabulary};

fn main() -> groundkie::Result<()> {
    let charset = printable_ascii();
    let vocab = Vocabulary::build(&charset)?;
    let mut setup = overfit_setup(&vocab);
    setup.train.total_steps = 200;
    let mut cfg = overfit_corpus(0);
    cfg.count = 2;
    let (docs, _) = generate_corpus(&cfg, QaSource::Deterministic)?;
    let examples = vqa_examples(&docs, &setup.model, setup.train.grounding_mode, &vocab)?;
    let stream = ExampleStream::single(examples, 0)?;
    let dir = std::env::temp_dir().join("groundkie-checkpoint-example");
    let mut model = groundkie::model::Model::new(setup.model.clone(), 0)?;
    let opts = TrainOptions {
        out_dir: Some(dir.clone()),
        charset: charset.clone(),
        ..TrainOptions::default()
    };
    let report = train_loop(&setup.train, &mut model, &stream, &opts)?;
    println!("final lm loss {:.4}", report.final_lm_loss().unwrap_or(f64::NAN));

    let loaded = Checkpoint::load(&dir.join(CHECKPOINT_FILE))?;
    println!("checkpoint at step {}", loaded.meta["step"]);
    let model = loaded.to_model()?;
    let doc = &docs[0];
    let qa = &doc.qas[0];
    let prep = PreparedDoc::new(doc.id.clone(), &doc.sample, model.config(), Placement::Centered)?;
    let enc = model.encode_image(&prep.pixels)?;
    let ans = answer_question(&model, &vocab, &prep, &enc, &qa.question, setup.max_new)?;
    println!("Q: {}\nA: {:?} (gold {:?})", qa.question, ans.text, qa.answer);
    if let Some(p) = ans.polygon {
        println!("polygon {:?}", p.map(|q| (q.x.round(), q.y.round())));
    }
    Ok(())
}
