//! Command-line front end: generate, train, eval, infer, visualize, ablate.
//!
//! Settings resolve in three layers: a named preset, then an optional TOML
//! file (any subset of keys), then command-line flags.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::datagen::llm::{HttpClient, LlmConfig};
use crate::datagen::{
    generate_corpus, read_dataset, write_dataset, CorpusConfig, CorpusStats, DocumentSample,
    QaSource,
};
use crate::error::{Error, Result};
use crate::eval::{answer_question, overlay, parse_thresholds, predict_corpus, score, Prediction};
use crate::harness::{ablation_table, overfit_setup, run_ablation, vqa_examples, Setup};
use crate::model::{Checkpoint, Model, ModelConfig};
use crate::tasks::{GroundingMode, Placement, PreparedDoc};
use crate::train::{
    mix_datasets, train_loop, ExampleStream, TrainConfig, TrainOptions,
    CHECKPOINT_FILE, METRICS_FILE,
};
use crate::vocab::{printable_ascii, Vocabulary};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const STATS_FILE: &str = "stats.json";
pub const PREDICTIONS_FILE: &str = "predictions.jsonl";
pub const REPORT_FILE: &str = "report.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// 256 px canvas, width 128, two layers per side.
    #[default]
    Desk,
    /// Small model tuned to memorize 32 pages quickly.
    Overfit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSettings {
    pub thresholds: Vec<f64>,
    pub max_new: usize,
}

/// Fully resolved settings, as recorded in every manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    pub charset: String,
    pub corpus: CorpusConfig,
    /// Corpus drawn for the auxiliary half of ablation mixes.
    pub auxiliary: CorpusConfig,
    /// `vocab_size` is always recomputed from the charset.
    pub model: ModelConfig,
    pub model_seed: u64,
    pub train: TrainConfig,
    pub eval: EvalSettings,
    pub llm: LlmConfig,
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        let charset = printable_ascii();
        let vocab = Vocabulary::build(&charset).expect("printable ASCII is a valid charset");
        let eval = EvalSettings {
            thresholds: vec![1e-3, 1e-2, 1e-1],
            max_new: 100,
        };
        let (model, train, max_new, corpus) = match preset {
            Preset::Desk => (
                ModelConfig::desk(vocab.size()),
                TrainConfig::default(),
                eval.max_new,
                CorpusConfig::default(),
            ),
            Preset::Overfit => {
                let s = overfit_setup(&vocab);
                (s.model, s.train, s.max_new, crate::harness::overfit_corpus(0))
            }
        };
        RunConfig {
            preset,
            charset,
            auxiliary: CorpusConfig {
                seed: corpus.seed + 1,
                id_prefix: "aux".into(),
                ..corpus.clone()
            },
            corpus,
            model,
            model_seed: 0,
            train,
            eval: EvalSettings { max_new, ..eval },
            llm: LlmConfig::default(),
        }
    }

    /// Preset named by `preset_override`, else by the file's `preset` key,
    /// else desk; file keys then replace preset values one by one.
    pub fn load(path: Option<&Path>, preset_override: Option<Preset>) -> Result<Self> {
        let file: toml::Table = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        let preset = match preset_override {
            Some(p) => p,
            None => match file.get("preset") {
                Some(v) => v
                    .clone()
                    .try_into()
                    .map_err(|e| Error::Config(format!("preset: {e}")))?,
                None => Preset::default(),
            },
        };
        let base = toml::Table::try_from(RunConfig::preset(preset))
            .map_err(|e| Error::Config(e.to_string()))?;
        let mut merged = toml::Value::Table(base);
        merge(&mut merged, toml::Value::Table(file));
        if let toml::Value::Table(t) = &mut merged {
            t.insert("preset".into(), toml::Value::try_from(preset).expect("enum serializes"));
        }
        let mut cfg: RunConfig = merged
            .try_into()
            .map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.model.vocab_size = cfg.vocabulary()?.size();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn vocabulary(&self) -> Result<Vocabulary> {
        Vocabulary::build(&self.charset)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.eval.thresholds.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(Error::Config("eval thresholds must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn setup(&self) -> Setup {
        Setup {
            model: self.model.clone(),
            train: self.train.clone(),
            model_seed: self.model_seed,
            max_new: self.eval.max_new,
        }
    }
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Record of one command invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub config: RunConfig,
    pub seed: u64,
    pub code_version: String,
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
    pub outputs: Vec<PathBuf>,
}

fn now_ms() -> u128 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

#[derive(Debug, Parser)]
#[command(name = "groundkie", version, about = "Grounded document question answering")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct Common {
    /// TOML settings file; any subset of keys overrides the preset.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    pub preset: Option<Preset>,
    /// Seed for every random choice of the command.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Machine-readable output on stdout.
    #[arg(long, global = true)]
    pub json: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render tables, generate and verify questions, write a corpus.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        /// Ask the configured LLM endpoint for questions instead of the
        /// built-in generator.
        #[arg(long)]
        llm: bool,
    },
    /// Train a model on a corpus, optionally mixed with an auxiliary one.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        /// Pages with polygons to mix in.
        #[arg(long)]
        auxiliary: Option<PathBuf>,
        /// Run directory: checkpoint, metrics log, manifest.
        #[arg(long)]
        out: PathBuf,
        /// Weight of the grounding loss; 0 turns it off.
        #[arg(long)]
        lambda: Option<f64>,
        /// none, see_first or see_last.
        #[arg(long)]
        grounding_mode: Option<String>,
        /// auxiliary_only or auxiliary_and_downstream.
        #[arg(long)]
        see_supervision: Option<String>,
        #[arg(long)]
        steps: Option<usize>,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint on a corpus.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Comma-separated IoU thresholds, e.g. `1e-3,1e-2,1e-1`.
        #[arg(long)]
        thresholds: Option<String>,
        /// Directory for predictions, report and manifest.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Answer one question about one image.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        question: String,
    },
    /// Draw gold (green) and predicted polygons over corpus pages.
    Visualize {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        /// Predictions file written by `eval --out`.
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and score the four ablation systems side by side.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        auxiliary: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        thresholds: Option<String>,
        #[arg(long)]
        steps: Option<usize>,
    },
}

/// Runs a parsed command, writing human output to `out`.
pub fn execute(cmd: &Command, args: &[String], out: &mut dyn Write) -> Result<()> {
    let started = now_ms();
    match cmd {
        Command::Generate {
            common,
            count,
            out: dir,
            llm,
        } => {
            let mut cfg = RunConfig::load(common.config.as_deref(), common.preset)?;
            if let Some(s) = common.seed {
                cfg.corpus.seed = s;
            }
            if let Some(c) = count {
                cfg.corpus.count = *c;
            }
            let (docs, stats) = if *llm {
                let client = HttpClient::new(&cfg.llm)?;
                generate_corpus(
                    &cfg.corpus,
                    QaSource::Llm {
                        client: &client,
                        config: &cfg.llm,
                    },
                )?
            } else {
                generate_corpus(&cfg.corpus, QaSource::Deterministic)?
            };
            write_dataset(&docs, dir)?;
            write_json(&dir.join(STATS_FILE), &stats)?;
            emit(out, common.json, &stats, || format_stats(&stats))?;
            finish_manifest(dir, "generate", args, &cfg, cfg.corpus.seed, started, &[
                dir.join(crate::datagen::RECORDS_FILE),
                dir.join("images"),
                dir.join(STATS_FILE),
            ])
        }
        Command::Train {
            common,
            corpus,
            auxiliary,
            out: dir,
            lambda,
            grounding_mode,
            see_supervision,
            steps,
            resume,
        } => {
            let mut cfg = RunConfig::load(common.config.as_deref(), common.preset)?;
            if let Some(s) = common.seed {
                cfg.train.seed = s;
                cfg.model_seed = s;
            }
            if let Some(l) = lambda {
                cfg.train.lambda = *l;
            }
            if let Some(m) = grounding_mode {
                cfg.train.grounding_mode = m.parse()?;
            }
            if let Some(s) = see_supervision {
                cfg.train.see_supervision = s.parse()?;
            }
            if let Some(n) = steps {
                cfg.train.total_steps = *n;
            }
            cfg.validate()?;
            let vocab = cfg.vocabulary()?;
            let docs = read_dataset(corpus)?;
            let mode = cfg.train.grounding_mode;
            let down = vqa_examples(&docs, &cfg.model, mode, &vocab)?;
            let stream = match auxiliary {
                Some(a) => mix_datasets(
                    down,
                    vqa_examples(&read_dataset(a)?, &cfg.model, mode, &vocab)?,
                    cfg.train.seed,
                    cfg.train.mix_ratio,
                    cfg.train.see_supervision,
                )?,
                None => ExampleStream::single(down, cfg.train.seed)?,
            };
            let resume = resume.as_deref().map(Checkpoint::load).transpose()?;
            if let Some(ck) = &resume {
                check_model_config(&ck.config, &cfg.model)?;
            }
            let mut model = Model::new(cfg.model.clone(), cfg.model_seed)?;
            let opts = TrainOptions {
                out_dir: Some(dir.clone()),
                stop_at_step: None,
                resume,
                charset: cfg.charset.clone(),
                meta: serde_json::json!({ "max_new": cfg.eval.max_new }),
            };
            let report = train_loop(&cfg.train, &mut model, &stream, &opts)?;
            let summary = serde_json::json!({
                "steps": report.steps_done,
                "final_lm_loss": report.final_lm_loss(),
                "final_see_loss": report.records.last().map(|r| r.see_loss),
                "checkpoint": report.checkpoint,
            });
            emit(out, common.json, &summary, || {
                format!(
                    "trained {} steps; final lm loss {:.5}, see loss {:.3}\ncheckpoint {}\n",
                    report.steps_done,
                    report.final_lm_loss().unwrap_or(f64::NAN),
                    report.records.last().map_or(f64::NAN, |r| r.see_loss),
                    dir.join(CHECKPOINT_FILE).display()
                )
            })?;
            finish_manifest(dir, "train", args, &cfg, cfg.train.seed, started, &[
                dir.join(CHECKPOINT_FILE),
                dir.join(METRICS_FILE),
            ])
        }
        Command::Eval {
            common,
            checkpoint,
            corpus,
            thresholds,
            out: dir,
        } => {
            let mut cfg = RunConfig::load(common.config.as_deref(), common.preset)?;
            if let Some(t) = thresholds {
                cfg.eval.thresholds = parse_thresholds(t)?;
            }
            let (model, vocab, ck) = load_model(checkpoint)?;
            if common.config.is_some() {
                check_model_config(&ck.config, &cfg.model)?;
            }
            let docs = read_dataset(corpus)?;
            let preds = predict_corpus(&model, &vocab, &docs, cfg.eval.max_new)?;
            let report = score(&preds, &cfg.eval.thresholds)?;
            emit(out, common.json, &report, || report.to_string())?;
            if let Some(dir) = dir {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                write_predictions(&dir.join(PREDICTIONS_FILE), &preds)?;
                write_json(&dir.join(REPORT_FILE), &report)?;
                finish_manifest(dir, "eval", args, &cfg, 0, started, &[
                    dir.join(PREDICTIONS_FILE),
                    dir.join(REPORT_FILE),
                ])?;
            }
            Ok(())
        }
        Command::Infer {
            common,
            checkpoint,
            image,
            question,
        } => {
            let (model, vocab, ck) = load_model(checkpoint)?;
            let page = image::open(image)
                .map_err(|e| Error::Invalid(format!("cannot read image {}: {e}", image.display())))?
                .into_luma8();
            let sample = DocumentSample {
                image: page,
                cells: Vec::new(),
                html: String::new(),
                warped: false,
            };
            let prep = PreparedDoc::new("input", &sample, model.config(), Placement::Centered)?;
            let enc = model.encode_image(&prep.pixels)?;
            let max_new = ck.meta["extra"]["max_new"].as_u64().unwrap_or(100) as usize;
            let mut ans = answer_question(&model, &vocab, &prep, &enc, question, max_new)?;
            let mode: GroundingMode = ck.meta["train"]["grounding_mode"]
                .as_str()
                .unwrap_or("see_first")
                .parse()?;
            if mode == GroundingMode::None {
                ans.polygon = None;
                ans.bins = None;
            }
            let mut value = serde_json::json!({ "answer": ans.text });
            if let Some(p) = ans.polygon {
                value["polygon"] = serde_json::to_value(p)?;
                value["bins"] = serde_json::to_value(ans.bins)?;
            }
            emit(out, common.json, &value, || {
                let mut s = format!("answer: {}\n", ans.text);
                if let Some(p) = ans.polygon {
                    let pts: Vec<String> = p.iter().map(|q| format!("({:.1}, {:.1})", q.x, q.y)).collect();
                    s.push_str(&format!("polygon: {}\n", pts.join(" ")));
                }
                s
            })
        }
        Command::Visualize {
            common,
            corpus,
            predictions,
            out: dir,
        } => {
            let docs = read_dataset(corpus)?;
            let preds = match predictions {
                Some(p) => read_predictions(p)?,
                None => Vec::new(),
            };
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let mut written = Vec::new();
            for d in &docs {
                let gold: Vec<_> = d.qas.iter().filter(|q| q.grounded).filter_map(|q| q.polygon).collect();
                let mine: Vec<_> = preds
                    .iter()
                    .filter(|p| p.doc_id == d.id)
                    .filter_map(|p| p.polygon)
                    .collect();
                let img = overlay(&d.sample.image, &gold, &mine);
                let path = dir.join(format!("{}.png", d.id));
                img.save(&path)?;
                written.push(path);
            }
            let summary = serde_json::json!({ "images": written.len() });
            emit(out, common.json, &summary, || format!("wrote {} overlays to {}\n", written.len(), dir.display()))?;
            let cfg = RunConfig::load(common.config.as_deref(), common.preset)?;
            finish_manifest(dir, "visualize", args, &cfg, 0, started, &written)
        }
        Command::Ablate {
            common,
            corpus,
            auxiliary,
            out: dir,
            thresholds,
            steps,
        } => {
            let mut cfg = RunConfig::load(common.config.as_deref(), common.preset)?;
            if let Some(s) = common.seed {
                cfg.train.seed = s;
                cfg.model_seed = s;
            }
            if let Some(t) = thresholds {
                cfg.eval.thresholds = parse_thresholds(t)?;
            }
            if let Some(n) = steps {
                cfg.train.total_steps = *n;
            }
            cfg.validate()?;
            let vocab = cfg.vocabulary()?;
            let rows = run_ablation(
                &cfg.setup(),
                &read_dataset(corpus)?,
                &read_dataset(auxiliary)?,
                &vocab,
                &cfg.eval.thresholds,
            )?;
            emit(out, common.json, &rows, || ablation_table(&rows))?;
            if let Some(dir) = dir {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                write_json(&dir.join(REPORT_FILE), &rows)?;
                finish_manifest(dir, "ablate", args, &cfg, cfg.train.seed, started, &[dir.join(REPORT_FILE)])?;
            }
            Ok(())
        }
    }
}

fn emit<T: Serialize>(
    out: &mut dyn Write,
    json: bool,
    value: &T,
    human: impl FnOnce() -> String,
) -> Result<()> {
    let text = if json {
        serde_json::to_string(value)? + "\n"
    } else {
        human()
    };
    out.write_all(text.as_bytes())
        .map_err(|e| Error::io(Path::new("<stdout>"), e))
}

fn format_stats(s: &CorpusStats) -> String {
    let mut t = format!(
        "{} documents, {} questions ({} grounded)\n",
        s.documents, s.questions, s.grounded
    );
    for (k, v) in &s.per_type {
        t.push_str(&format!("  {k:<20} {v}\n"));
    }
    if s.skipped_tables > 0 {
        t.push_str(&format!("  skipped tables       {}\n", s.skipped_tables));
    }
    t
}

fn finish_manifest(
    dir: &Path,
    command: &str,
    args: &[String],
    cfg: &RunConfig,
    seed: u64,
    started: u128,
    outputs: &[PathBuf],
) -> Result<()> {
    let m = RunManifest {
        command: command.into(),
        args: args.to_vec(),
        config: cfg.clone(),
        seed,
        code_version: env!("CARGO_PKG_VERSION").into(),
        started_unix_ms: started,
        finished_unix_ms: now_ms(),
        outputs: outputs.to_vec(),
    };
    write_json(&dir.join(MANIFEST_FILE), &m)
}

fn load_model(path: &Path) -> Result<(Model, Vocabulary, Checkpoint)> {
    let ck = Checkpoint::load(path)?;
    let vocab = Vocabulary::build(&ck.charset)?;
    let model = ck.to_model()?;
    model.check_vocab(&vocab)?;
    Ok((model, vocab, ck))
}

/// Names the first field where a checkpoint's model disagrees with the
/// configured one.
pub fn check_model_config(found: &ModelConfig, want: &ModelConfig) -> Result<()> {
    let a = serde_json::to_value(found)?;
    let b = serde_json::to_value(want)?;
    if let (Some(a), Some(b)) = (a.as_object(), b.as_object()) {
        for (k, va) in a {
            if b.get(k) != Some(va) {
                return Err(Error::Checkpoint(format!(
                    "model.{k}: checkpoint has {va}, config has {}",
                    b.get(k).map_or("nothing".into(), |v| v.to_string())
                )));
            }
        }
    }
    Ok(())
}

pub fn write_predictions(path: &Path, preds: &[Prediction]) -> Result<()> {
    let mut text = String::new();
    for p in preds {
        text.push_str(&serde_json::to_string(p)?);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_predictions(path: &Path) -> Result<Vec<Prediction>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Record {
                path: path.to_path_buf(),
                line: i + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code: 0 success, 1 usage, 2 data, 3 numerical.
pub fn run(args: &[String], out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = if code == 0 {
                write!(out, "{e}")
            } else {
                write!(err, "{e}")
            };
            return code;
        }
    };
    match execute(&cli.command, &args[1..], out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}
