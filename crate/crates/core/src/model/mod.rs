//! Patch-embedding vision encoder and causal text decoder.
//!
//! The encoder flattens `f × f` patches of a grayscale page, projects them to
//! `D` dimensions, adds a fixed 2-D sinusoidal position code and runs a
//! pre-norm self-attention stack. The decoder is a pre-norm transformer with
//! causal self-attention, cross-attention over the encoder output and a
//! linear vocabulary head. Its token embedding table doubles as the location
//! vocabulary: rows `<0>`..`<999>` are the `Loc` matrix used by the
//! grounding head.

mod checkpoint;

pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};

use ndarray::{s, Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{softmax_in_place, Graph, Mat, NodeId, ParamId, Params};
use crate::error::{Error, Result};
use crate::grounding::GroundingHead;
use crate::vocab::{Vocabulary, NUM_BINS, SPECIALS};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_height: usize,
    pub image_width: usize,
    /// Patch side and downsample factor.
    pub patch: usize,
    pub dim: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub vocab_size: usize,
    /// Longest decoder input (prompt plus target).
    pub max_len: usize,
}

impl ModelConfig {
    /// Desk-scale defaults: 256×256 input, 32-pixel patches, D = 128,
    /// two encoder and two decoder layers, four heads.
    pub fn desk(vocab_size: usize) -> Self {
        ModelConfig {
            image_height: 256,
            image_width: 256,
            patch: 32,
            dim: 128,
            encoder_layers: 2,
            decoder_layers: 2,
            heads: 4,
            vocab_size,
            max_len: 256,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch == 0 || self.image_height % self.patch != 0 || self.image_width % self.patch != 0 {
            return bad(format!(
                "image {}x{} not divisible by patch {}",
                self.image_height, self.image_width, self.patch
            ));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return bad(format!("dim {} not divisible by {} heads", self.dim, self.heads));
        }
        if self.dim % 4 != 0 {
            return bad(format!("dim {} must be a multiple of 4", self.dim));
        }
        if self.vocab_size <= SPECIALS.len() + NUM_BINS {
            return bad(format!("vocab size {} leaves no text tokens", self.vocab_size));
        }
        if self.max_len == 0 {
            return bad("max_len must be positive".into());
        }
        Ok(())
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.image_height / self.patch, self.image_width / self.patch)
    }

    pub fn num_patches(&self) -> usize {
        let (r, c) = self.grid();
        r * c
    }

    pub fn patch_features(&self) -> usize {
        self.patch * self.patch
    }
}

#[derive(Debug, Clone)]
struct AttnIds {
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
}

#[derive(Debug, Clone)]
struct NormIds {
    gain: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone)]
struct MlpIds {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    ln1: NormIds,
    attn: AttnIds,
    ln2: NormIds,
    mlp: MlpIds,
}

#[derive(Debug, Clone)]
struct DecoderLayer {
    ln1: NormIds,
    self_attn: AttnIds,
    ln2: NormIds,
    cross_attn: AttnIds,
    ln3: NormIds,
    mlp: MlpIds,
}

#[derive(Debug, Clone)]
struct Layout {
    patch_w: ParamId,
    patch_b: ParamId,
    encoder: Vec<EncoderLayer>,
    encoder_norm: NormIds,
    embed: ParamId,
    decoder: Vec<DecoderLayer>,
    decoder_norm: NormIds,
    out_w: ParamId,
    out_b: ParamId,
    ground_w: ParamId,
    ground_b: ParamId,
}

/// Encoder output: `N × D` patch embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    pub z: Mat,
}

/// Per-position logits (`T × v`) and final-layer hidden states (`T × D`).
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderOutput {
    pub logits: Mat,
    pub hidden: Mat,
}

/// Result of greedy decoding.
#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    /// Generated ids, excluding the prompt and including `<eos>` when emitted.
    pub tokens: Vec<usize>,
    /// Final-layer hidden state at every generated `<see>` token, in order.
    pub see_hiddens: Vec<Array1<f64>>,
    /// Index into `tokens` of each `<see>`.
    pub see_positions: Vec<usize>,
    /// Decoding stopped at the length limit before `<eos>`.
    pub truncated: bool,
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    params: Params,
    layout: Layout,
    enc_pos: Mat,
    dec_pos: Mat,
}

fn sinusoid(position: f64, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|i| {
            let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / dim as f64);
            if i % 2 == 0 {
                (position * freq).sin()
            } else {
                (position * freq).cos()
            }
        })
        .collect()
}

/// Fixed 2-D code: first half encodes the patch row, second half the column.
pub fn encoder_positions(config: &ModelConfig) -> Mat {
    let (rows, cols) = config.grid();
    let half = config.dim / 2;
    let mut pe = Mat::zeros((rows * cols, config.dim));
    for r in 0..rows {
        for c in 0..cols {
            let mut row = pe.row_mut(r * cols + c);
            for (k, v) in sinusoid(r as f64, half).into_iter().enumerate() {
                row[k] = v;
            }
            for (k, v) in sinusoid(c as f64, half).into_iter().enumerate() {
                row[half + k] = v;
            }
        }
    }
    pe
}

fn decoder_positions(config: &ModelConfig) -> Mat {
    let mut pe = Mat::zeros((config.max_len, config.dim));
    for t in 0..config.max_len {
        for (k, v) in sinusoid(t as f64, config.dim).into_iter().enumerate() {
            pe[[t, k]] = v;
        }
    }
    pe
}

/// Flattens a grayscale page (values in `[0, 1]`, 1 = white) into
/// `N × f²` ink features (`1 − value`), patches in row-major grid order.
pub fn patchify(config: &ModelConfig, image: &Mat) -> Result<Mat> {
    if image.dim() != (config.image_height, config.image_width) {
        return Err(Error::Shape(format!(
            "image is {:?}, model expects {}x{}",
            image.dim(),
            config.image_height,
            config.image_width
        )));
    }
    if image.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Invalid("image values must lie in [0, 1]".into()));
    }
    let (rows, cols) = config.grid();
    let f = config.patch;
    let mut out = Mat::zeros((rows * cols, f * f));
    for r in 0..rows {
        for c in 0..cols {
            let block = image.slice(s![r * f..(r + 1) * f, c * f..(c + 1) * f]);
            let mut dst = out.row_mut(r * cols + c);
            for (d, v) in dst.iter_mut().zip(block.iter()) {
                *d = 1.0 - v;
            }
        }
    }
    Ok(out)
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn normal(&mut self, rows: usize, cols: usize, std: f64) -> Mat {
        let dist = Normal::new(0.0, std).expect("valid std");
        Mat::from_shape_fn((rows, cols), |_| dist.sample(&mut self.rng))
    }
}

impl Model {
    /// Randomly initialized model; identical seeds give identical parameters.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let d = config.dim;
        let mut p = Params::new();
        let fan = |n: usize| 1.0 / (n as f64).sqrt();

        let norm = |p: &mut Params, name: &str| NormIds {
            gain: p.add(format!("{name}.gain"), Mat::ones((1, d))),
            bias: p.add(format!("{name}.bias"), Mat::zeros((1, d))),
        };
        let attn = |p: &mut Params, init: &mut Init, name: &str| {
            let mut lin = |suffix: &str| {
                (
                    p.add(format!("{name}.w{suffix}"), init.normal(d, d, fan(d))),
                    p.add(format!("{name}.b{suffix}"), Mat::zeros((1, d))),
                )
            };
            let (wq, bq) = lin("q");
            let (wk, bk) = lin("k");
            let (wv, bv) = lin("v");
            let (wo, bo) = lin("o");
            AttnIds {
                wq,
                bq,
                wk,
                bk,
                wv,
                bv,
                wo,
                bo,
            }
        };
        let mlp = |p: &mut Params, init: &mut Init, name: &str| MlpIds {
            w1: p.add(format!("{name}.w1"), init.normal(d, 4 * d, fan(d))),
            b1: p.add(format!("{name}.b1"), Mat::zeros((1, 4 * d))),
            w2: p.add(format!("{name}.w2"), init.normal(4 * d, d, fan(4 * d))),
            b2: p.add(format!("{name}.b2"), Mat::zeros((1, d))),
        };

        let pf = config.patch_features();
        let patch_w = p.add("enc.patch.w", init.normal(pf, d, fan(pf)));
        let patch_b = p.add("enc.patch.b", Mat::zeros((1, d)));
        let mut encoder = Vec::new();
        for l in 0..config.encoder_layers {
            let ln1 = norm(&mut p, &format!("enc.{l}.ln1"));
            let a = attn(&mut p, &mut init, &format!("enc.{l}.attn"));
            let ln2 = norm(&mut p, &format!("enc.{l}.ln2"));
            let m = mlp(&mut p, &mut init, &format!("enc.{l}.mlp"));
            encoder.push(EncoderLayer {
                ln1,
                attn: a,
                ln2,
                mlp: m,
            });
        }
        let encoder_norm = norm(&mut p, "enc.norm");

        let mut embed = init.normal(config.vocab_size, d, 0.5);
        let loc0 = SPECIALS.len();
        embed
            .slice_mut(s![loc0..loc0 + NUM_BINS, ..])
            .assign(&location_init(d));
        let embed = p.add("dec.embed", embed);
        let mut decoder = Vec::new();
        for l in 0..config.decoder_layers {
            let ln1 = norm(&mut p, &format!("dec.{l}.ln1"));
            let sa = attn(&mut p, &mut init, &format!("dec.{l}.self"));
            let ln2 = norm(&mut p, &format!("dec.{l}.ln2"));
            let ca = attn(&mut p, &mut init, &format!("dec.{l}.cross"));
            let ln3 = norm(&mut p, &format!("dec.{l}.ln3"));
            let m = mlp(&mut p, &mut init, &format!("dec.{l}.mlp"));
            decoder.push(DecoderLayer {
                ln1,
                self_attn: sa,
                ln2,
                cross_attn: ca,
                ln3,
                mlp: m,
            });
        }
        let decoder_norm = norm(&mut p, "dec.norm");
        let out_w = p.add("dec.out.w", init.normal(d, config.vocab_size, 0.02));
        let out_b = p.add("dec.out.b", Mat::zeros((1, config.vocab_size)));
        let ground_w = p.add("ground.w", init.normal(d, 8 * d, 0.02));
        let ground_b = p.add("ground.b", Mat::zeros((1, 8 * d)));

        let layout = Layout {
            patch_w,
            patch_b,
            encoder,
            encoder_norm,
            embed,
            decoder,
            decoder_norm,
            out_w,
            out_b,
            ground_w,
            ground_b,
        };
        Ok(Model {
            enc_pos: encoder_positions(&config),
            dec_pos: decoder_positions(&config),
            config,
            params: p,
            layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    /// Checks that the vocabulary matches the model's output size.
    pub fn check_vocab(&self, vocab: &Vocabulary) -> Result<()> {
        if vocab.size() != self.config.vocab_size {
            return Err(Error::Config(format!(
                "vocabulary has {} tokens, model expects {}",
                vocab.size(),
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    pub fn grounding_head(&self) -> GroundingHead<'_> {
        let loc0 = SPECIALS.len();
        let embed = self.params.get(self.layout.embed);
        GroundingHead::new(
            embed.slice(s![loc0..loc0 + NUM_BINS, ..]),
            self.params.get(self.layout.ground_w).view(),
            self.params.get(self.layout.ground_b).view(),
        )
        .expect("grounding shapes follow the config")
    }

    fn attention(
        &self,
        g: &mut Graph,
        ids: &AttnIds,
        query_in: NodeId,
        kv_in: NodeId,
        causal: bool,
    ) -> NodeId {
        let p = &self.params;
        let proj = |g: &mut Graph, x: NodeId, w: ParamId, b: ParamId| {
            let w = g.param(p, w);
            let b = g.param(p, b);
            g.affine(x, w, b)
        };
        let q = proj(g, query_in, ids.wq, ids.bq);
        let k = proj(g, kv_in, ids.wk, ids.bk);
        let v = proj(g, kv_in, ids.wv, ids.bv);
        let dh = self.config.dim / self.config.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.config.heads);
        for h in 0..self.config.heads {
            let qh = g.slice_cols(q, h * dh, dh);
            let kh = g.slice_cols(k, h * dh, dh);
            let vh = g.slice_cols(v, h * dh, dh);
            let scores = g.matmul_bt(qh, kh);
            let scores = g.scale(scores, scale);
            let weights = g.softmax(scores, causal);
            heads.push(g.matmul(weights, vh));
        }
        let cat = g.concat_cols(&heads);
        proj(g, cat, ids.wo, ids.bo)
    }

    fn norm(&self, g: &mut Graph, ids: &NormIds, x: NodeId) -> NodeId {
        let gain = g.param(&self.params, ids.gain);
        let bias = g.param(&self.params, ids.bias);
        g.layer_norm(x, gain, bias)
    }

    fn mlp(&self, g: &mut Graph, ids: &MlpIds, x: NodeId) -> NodeId {
        let p = &self.params;
        let (w1, b1) = (g.param(p, ids.w1), g.param(p, ids.b1));
        let hdn = g.affine(x, w1, b1);
        let hdn = g.gelu(hdn);
        let (w2, b2) = (g.param(p, ids.w2), g.param(p, ids.b2));
        g.affine(hdn, w2, b2)
    }

    /// Records the encoder on `g` and returns the `N × D` output node.
    pub fn encode(&self, g: &mut Graph, image: &Mat) -> Result<NodeId> {
        let patches = patchify(&self.config, image)?;
        let x = g.constant(patches);
        let w = g.param(&self.params, self.layout.patch_w);
        let b = g.param(&self.params, self.layout.patch_b);
        let emb = g.affine(x, w, b);
        let pos = g.constant(self.enc_pos.clone());
        let mut h = g.add(emb, pos);
        for layer in &self.layout.encoder {
            let n = self.norm(g, &layer.ln1, h);
            let a = self.attention(g, &layer.attn, n, n, false);
            h = g.add(h, a);
            let n = self.norm(g, &layer.ln2, h);
            let m = self.mlp(g, &layer.mlp, n);
            h = g.add(h, m);
        }
        Ok(self.norm(g, &self.layout.encoder_norm, h))
    }

    /// Records the decoder over `tokens` attending to `z`; returns the
    /// final-layer hidden-state node (`T × D`).
    pub fn decode(&self, g: &mut Graph, z: NodeId, tokens: &[usize]) -> Result<NodeId> {
        if tokens.is_empty() {
            return Err(Error::Invalid("decoder input is empty".into()));
        }
        if tokens.len() > self.config.max_len {
            return Err(Error::Invalid(format!(
                "decoder input of {} tokens exceeds max_len {}",
                tokens.len(),
                self.config.max_len
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::TokenOutOfRange {
                id: bad,
                size: self.config.vocab_size,
            });
        }
        let table = g.param(&self.params, self.layout.embed);
        let emb = g.gather(table, tokens);
        let pos = g.constant(self.dec_pos.slice(s![..tokens.len(), ..]).to_owned());
        let mut h = g.add(emb, pos);
        for layer in &self.layout.decoder {
            let n = self.norm(g, &layer.ln1, h);
            let a = self.attention(g, &layer.self_attn, n, n, true);
            h = g.add(h, a);
            let n = self.norm(g, &layer.ln2, h);
            let c = self.attention(g, &layer.cross_attn, n, z, false);
            h = g.add(h, c);
            let n = self.norm(g, &layer.ln3, h);
            let m = self.mlp(g, &layer.mlp, n);
            h = g.add(h, m);
        }
        Ok(self.norm(g, &self.layout.decoder_norm, h))
    }

    /// Vocabulary logits for the given hidden rows.
    pub fn logits(&self, g: &mut Graph, hidden: NodeId) -> NodeId {
        let w = g.param(&self.params, self.layout.out_w);
        let b = g.param(&self.params, self.layout.out_b);
        g.affine(hidden, w, b)
    }

    /// Grounding logits (`8K × 1000`) for `K` hidden rows.
    pub fn grounding_logits(&self, g: &mut Graph, hidden_rows: NodeId) -> NodeId {
        let k = g.value(hidden_rows).nrows();
        let d = self.config.dim;
        let w = g.param(&self.params, self.layout.ground_w);
        let b = g.param(&self.params, self.layout.ground_b);
        let q = g.affine(hidden_rows, w, b);
        let q = g.reshape(q, 8 * k, d);
        let table = g.param(&self.params, self.layout.embed);
        let loc = g.slice_rows(table, SPECIALS.len(), NUM_BINS);
        g.matmul_bt(q, loc)
    }

    pub fn encode_image(&self, image: &Mat) -> Result<EncoderOutput> {
        let mut g = Graph::new();
        let z = self.encode(&mut g, image)?;
        Ok(EncoderOutput {
            z: g.value(z).clone(),
        })
    }

    pub fn decode_tokens(&self, enc: &EncoderOutput, tokens: &[usize]) -> Result<DecoderOutput> {
        self.check_encoder_output(enc)?;
        let mut g = Graph::new();
        let z = g.constant(enc.z.clone());
        let hidden = self.decode(&mut g, z, tokens)?;
        let logits = self.logits(&mut g, hidden);
        Ok(DecoderOutput {
            logits: g.value(logits).clone(),
            hidden: g.value(hidden).clone(),
        })
    }

    fn check_encoder_output(&self, enc: &EncoderOutput) -> Result<()> {
        let want = (self.config.num_patches(), self.config.dim);
        if enc.z.dim() != want {
            return Err(Error::Shape(format!(
                "encoder output {:?}, expected {want:?}",
                enc.z.dim()
            )));
        }
        Ok(())
    }

    /// Greedy decoding from `prompt` until `<eos>` or until `max_new`
    /// tokens (or the model's length limit) are produced. Ties go to the
    /// lowest token id.
    pub fn greedy_generate(
        &self,
        enc: &EncoderOutput,
        prompt: &[usize],
        max_new: usize,
        vocab: &Vocabulary,
    ) -> Result<Generation> {
        self.check_encoder_output(enc)?;
        let see = vocab.see_id();
        let eos = vocab.eos_id();
        let mut seq = prompt.to_vec();
        let mut out = Generation {
            tokens: Vec::new(),
            see_hiddens: Vec::new(),
            see_positions: Vec::new(),
            truncated: false,
        };
        loop {
            if out.tokens.len() >= max_new || seq.len() >= self.config.max_len {
                out.truncated = true;
                // a trailing <see> still needs its hidden state
                if out.tokens.last() == Some(&see) && out.see_hiddens.len() < out.see_positions.len() {
                    let dec = self.decode_tokens(enc, &seq)?;
                    out.see_hiddens.push(dec.hidden.row(seq.len() - 1).to_owned());
                }
                break;
            }
            let dec = self.decode_tokens(enc, &seq)?;
            let last = seq.len() - 1;
            if out.tokens.last() == Some(&see) {
                out.see_hiddens.push(dec.hidden.row(last).to_owned());
            }
            let row = dec.logits.row(last);
            let next = argmax_lowest(row.as_slice().expect("contiguous"));
            out.tokens.push(next);
            seq.push(next);
            if next == see {
                out.see_positions.push(out.tokens.len() - 1);
            }
            if next == eos {
                break;
            }
        }
        Ok(out)
    }

    pub(crate) fn from_parts(config: ModelConfig, params: Params) -> Result<Self> {
        let fresh = Model::new(config, 0)?;
        if fresh.params.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} arrays, found {}",
                fresh.params.len(),
                params.len()
            )));
        }
        for ((name, want), (got_name, got)) in fresh.params.iter().zip(params.iter()) {
            if name != got_name {
                return Err(Error::Checkpoint(format!(
                    "array {got_name:?} found where {name:?} was expected"
                )));
            }
            if want.dim() != got.dim() {
                return Err(Error::Checkpoint(format!(
                    "array {name:?} has shape {:?}, config requires {:?}",
                    got.dim(),
                    want.dim()
                )));
            }
        }
        Ok(Model { params, ..fresh })
    }
}

/// Location-table initialization: multi-frequency sinusoids of the bin
/// index, lowest frequency a half period over the full range so that the
/// first feature pair is monotone in the bin.
fn location_init(dim: usize) -> Mat {
    let pairs = dim / 2;
    let mut m = Mat::zeros((NUM_BINS, dim));
    for k in 0..NUM_BINS {
        for j in 0..pairs {
            let freq = std::f64::consts::PI / NUM_BINS as f64 * 2f64.powf(j as f64 * 8.0 / pairs as f64);
            m[[k, 2 * j]] = 0.5 * (k as f64 * freq).cos();
            m[[k, 2 * j + 1]] = 0.5 * (k as f64 * freq).sin();
        }
    }
    m
}

fn argmax_lowest(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Row-wise softmax of a logit matrix.
pub fn softmax_rows(logits: &Mat) -> Mat {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        softmax_in_place(row.as_slice_mut().expect("contiguous row"));
    }
    out
}

/// Mean over `positions` of `−log softmax(logits[p])[target[p]]`.
pub fn lm_loss(logits: &Mat, targets: &[usize], mask: &[bool]) -> Result<f64> {
    if targets.len() != logits.nrows() || mask.len() != logits.nrows() {
        return Err(Error::Shape(format!(
            "logits have {} rows, targets {}, mask {}",
            logits.nrows(),
            targets.len(),
            mask.len()
        )));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for ((row, &t), &m) in logits.rows().into_iter().zip(targets).zip(mask) {
        if !m {
            continue;
        }
        let slice = row.as_slice().expect("contiguous");
        total += crate::autograd::log_sum_exp(slice) - slice[t];
        count += 1;
    }
    if count == 0 {
        return Err(Error::Invalid("loss mask selects no positions".into()));
    }
    Ok(total / count as f64)
}

/// Image of the model's input size filled with white.
pub fn blank_image(config: &ModelConfig) -> Mat {
    Array2::ones((config.image_height, config.image_width))
}

#[cfg(test)]
mod tests;
