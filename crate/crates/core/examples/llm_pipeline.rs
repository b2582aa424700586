//! The LLM-backed question path with a canned client standing in for the
//! endpoint. One reply value is wrong and one cell reference is off the
//! grid; verification drops both and grounds the rest.
//!
//!     cargo run --example llm_pipeline

use groundkie::datagen::llm::{CompletionClient, LlmConfig};
use groundkie::datagen::{generate_corpus, CorpusConfig, QaSource};

struct Canned;

impl CompletionClient for Canned {
    fn complete(&self, prompt: &str) -> groundkie::Result<String> {
        // read the first data cell straight out of the HTML in the prompt
        let cells: Vec<&str> = prompt
            .split("<td>")
            .skip(1)
            .filter_map(|s| s.split("</td>").next())
            .collect();
        let first = cells.get(0).copied().unwrap_or("");
        Ok(format!(
            r#"Sure. [
              {{"type": "specific_extraction", "question": "What is in the top-left cell?", "answer": "{first}", "row": 1, "col": 1}},
              {{"type": "specific_extraction", "question": "A wrong claim", "answer": "{first}!", "row": 1, "col": 1}},
              {{"type": "simple_reasoning", "question": "Off the grid", "answer": "x", "row": 40, "col": 2}},
              {{"type": "content_summary", "question": "Describe the table.", "answer": "A small table.", "row": null, "col": null}}
            ]"#
        ))
    }
}

fn main() -> groundkie::Result<()> {
    let cfg = CorpusConfig {
        count: 3,
        seed: 5,
        ..CorpusConfig::default()
    };
    let llm = LlmConfig::default();
    let (docs, stats) = generate_corpus(&cfg, QaSource::Llm { client: &Canned, config: &llm })?;
    println!("verifier: {:?}", stats.verify);
    for d in &docs {
        println!("{}:", d.id);
        for q in &d.qas {
            let poly = q.polygon.map(|p| format!("{:?}", p.bounds())).unwrap_or_else(|| "-".into());
            println!("  {:?} -> {:?} grounded={} bounds={poly}", q.question, q.answer, q.grounded);
        }
    }
    Ok(())
}
