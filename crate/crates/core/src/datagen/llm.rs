//! Optional LLM-backed question candidates.
//!
//! Any completion endpoint works: the client posts `{"prompt": ...}` and
//! accepts a JSON reply with a `text`, `content` or `completion` string, or
//! a raw text body. Nothing returned here is trusted; every candidate goes
//! through [`verify_and_ground`](super::verify_and_ground).

use std::path::PathBuf;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{QaCandidate, QaType};
use crate::error::{Error, Result};

pub const DEFAULT_TEMPLATE: &str = "\
You write question-answer pairs about a table. Use [Language] for every question and answer.

The table is given as HTML. Rows and columns are numbered from 1; row 1 is the first <tr>.

[Table]

Write questions of these five kinds: specific_extraction (asks for one cell), \
simple_reasoning (needs fewer than three cells), complex_reasoning (needs three or more cells), \
numerical (sum, maximum, average or minimum of a column, showing the calculation), \
content_summary (a description that matches the table).

For specific_extraction the answer must be the exact cell text, and you must give the row \
and column of that cell. For other kinds give row and column only when the answer is the \
exact text of one cell.

Reply with only a JSON array of objects with keys \"type\", \"question\", \"answer\", \
\"row\" and \"col\" (use null when there is no single cell).
";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LlmConfig {
    pub endpoint: String,
    /// Name of the environment variable holding the bearer token.
    pub token_env: String,
    pub template_path: Option<PathBuf>,
    pub language: String,
    pub timeout_secs: u64,
    pub max_retries: usize,
    pub backoff_ms: u64,
    pub max_in_flight: usize,
}

impl Default for LlmConfig {
    fn default() -> Self {
        LlmConfig {
            endpoint: String::new(),
            token_env: "GROUNDKIE_LLM_TOKEN".into(),
            template_path: None,
            language: "English".into(),
            timeout_secs: 60,
            max_retries: 3,
            backoff_ms: 500,
            max_in_flight: 4,
        }
    }
}

impl LlmConfig {
    pub fn template(&self) -> Result<String> {
        match &self.template_path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e)),
            None => Ok(DEFAULT_TEMPLATE.to_string()),
        }
    }
}

pub fn fill_template(template: &str, language: &str, html: &str) -> String {
    template.replace("[Language]", language).replace("[Table]", html)
}

pub trait CompletionClient: Sync {
    fn complete(&self, prompt: &str) -> Result<String>;
}

/// Blocking HTTP client for a JSON completion endpoint.
pub struct HttpClient {
    agent: ureq::Agent,
    endpoint: String,
    token: Option<String>,
}

impl HttpClient {
    pub fn new(cfg: &LlmConfig) -> Result<Self> {
        if cfg.endpoint.is_empty() {
            return Err(Error::Config("llm endpoint is not set".into()));
        }
        let agent = ureq::AgentBuilder::new()
            .timeout(Duration::from_secs(cfg.timeout_secs.max(1)))
            .build();
        Ok(HttpClient {
            agent,
            endpoint: cfg.endpoint.clone(),
            token: std::env::var(&cfg.token_env).ok(),
        })
    }
}

impl CompletionClient for HttpClient {
    fn complete(&self, prompt: &str) -> Result<String> {
        let mut req = self.agent.post(&self.endpoint);
        if let Some(t) = &self.token {
            req = req.set("Authorization", &format!("Bearer {t}"));
        }
        let resp = req
            .set("Content-Type", "application/json")
            .send_string(&serde_json::json!({ "prompt": prompt }).to_string())
            .map_err(|e| Error::Llm(e.to_string()))?;
        let body = resp.into_string().map_err(|e| Error::Llm(e.to_string()))?;
        Ok(match serde_json::from_str::<Value>(&body) {
            Ok(v) => ["text", "content", "completion"]
                .iter()
                .find_map(|k| v.get(k).and_then(Value::as_str).map(str::to_string))
                .unwrap_or(body),
            Err(_) => body,
        })
    }
}

fn positive(v: Option<&Value>) -> Option<Option<usize>> {
    match v {
        None | Some(Value::Null) => Some(None),
        Some(Value::Number(n)) => n.as_u64().filter(|&n| n > 0).map(|n| Some(n as usize)),
        Some(Value::String(s)) => s.trim().parse::<usize>().ok().filter(|&n| n > 0).map(Some),
        _ => None,
    }
}

fn candidate(item: &Value) -> Option<QaCandidate> {
    let qtype: QaType = item.get("type")?.as_str()?.parse().ok()?;
    let question = item.get("question")?.as_str()?.trim().to_string();
    let answer = match item.get("answer")? {
        Value::String(s) => s.clone(),
        Value::Number(n) => n.to_string(),
        _ => return None,
    };
    if question.is_empty() || answer.trim().is_empty() {
        return None;
    }
    let logical_loc = match (positive(item.get("row"))?, positive(item.get("col"))?) {
        (Some(r), Some(c)) => Some((r, c)),
        (None, None) => None,
        _ => return None,
    };
    Some(QaCandidate {
        question,
        answer,
        qtype,
        logical_loc,
    })
}

/// Pulls the JSON array out of a reply. Returns the well-formed candidates
/// and the number of items dropped; a reply without a parseable array is
/// an error.
pub fn parse_candidates(reply: &str) -> Result<(Vec<QaCandidate>, usize)> {
    let start = reply.find('[');
    let end = reply.rfind(']');
    let (Some(s), Some(e)) = (start, end) else {
        return Err(Error::Llm("reply has no JSON array".into()));
    };
    if e < s {
        return Err(Error::Llm("reply has no JSON array".into()));
    }
    let items: Vec<Value> = serde_json::from_str(&reply[s..=e])
        .map_err(|err| Error::Llm(format!("unparseable reply: {err}")))?;
    let total = items.len();
    let out: Vec<_> = items.iter().filter_map(candidate).collect();
    Ok((out.clone(), total - out.len()))
}

/// Asks the client for candidates on one table, retrying failed requests
/// with exponential backoff.
pub fn llm_generate_qa(
    html: &str,
    client: &dyn CompletionClient,
    cfg: &LlmConfig,
) -> Result<Vec<QaCandidate>> {
    let prompt = fill_template(&cfg.template()?, &cfg.language, html);
    let mut last = None;
    for attempt in 0..=cfg.max_retries {
        if attempt > 0 {
            thread::sleep(Duration::from_millis(cfg.backoff_ms << (attempt - 1).min(16)));
        }
        match client.complete(&prompt) {
            Ok(reply) => {
                let (cands, dropped) = parse_candidates(&reply)?;
                if dropped > 0 {
                    log::warn!("dropped {dropped} malformed candidates");
                }
                return Ok(cands);
            }
            Err(e) => {
                log::warn!("completion attempt {} failed: {e}", attempt + 1);
                last = Some(e);
            }
        }
    }
    Err(last.unwrap_or_else(|| Error::Llm("no attempts made".into())))
}

/// Runs [`llm_generate_qa`] over many tables with at most `max_in_flight`
/// concurrent requests. Failed tables are logged and come back as `None`.
pub fn llm_generate_batch(
    htmls: &[String],
    client: &dyn CompletionClient,
    cfg: &LlmConfig,
) -> Vec<Option<Vec<QaCandidate>>> {
    let mut out = Vec::with_capacity(htmls.len());
    for chunk in htmls.chunks(cfg.max_in_flight.max(1)) {
        let results: Vec<_> = thread::scope(|s| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|h| s.spawn(move || llm_generate_qa(h, client, cfg)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err(Error::Llm("worker panicked".into()))))
                .collect()
        });
        for r in results {
            out.push(match r {
                Ok(c) => Some(c),
                Err(e) => {
                    log::warn!("skipping table: {e}");
                    None
                }
            });
        }
    }
    out
}
