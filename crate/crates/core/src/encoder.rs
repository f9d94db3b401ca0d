//! Pre-norm transformer encoder shared by the text and label streams.
//!
//! The encoder reports the `[CLS]` hidden state after every layer; the
//! feature extractor concatenates the deepest few of them.
//!
//! Attention only ever covers the prefix of the input that precedes the first
//! PAD token. Everything from the first PAD onward is ignored, so the output
//! does not depend on what follows it.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::corpus::{TokenId, PAD};
use crate::error::{config_err, data_err, GudnError, Result};
use crate::params::{glorot, uniform, ParamId, ParamStore};
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    /// Overwritten with the dataset vocabulary size at training time.
    pub vocab_size: usize,
    pub max_input_len: usize,
    /// Deepest `[CLS]` layers concatenated for the text stream.
    pub n_text_layers: usize,
    /// Extra layers the label stream concatenates on top of `n_text_layers`.
    pub n_label_extra: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            num_layers: 4,
            hidden_dim: 32,
            num_heads: 4,
            ffn_dim: 64,
            vocab_size: 0,
            max_input_len: 512,
            n_text_layers: 8,
            n_label_extra: 2,
        }
    }
}

impl EncoderConfig {
    /// Caps the layer counts to what `num_layers` can provide: the label
    /// extra keeps at least one layer for the text stream, then the text
    /// count is cut so both streams fit.
    pub fn resolved(&self) -> Self {
        let mut out = self.clone();
        let layers = self.num_layers.max(1);
        out.n_label_extra = self.n_label_extra.min(layers - 1);
        out.n_text_layers = self.n_text_layers.clamp(1, layers - out.n_label_extra);
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 {
            return Err(config_err("encoder.num_layers must be >= 1"));
        }
        if self.hidden_dim == 0 || self.num_heads == 0 || self.hidden_dim % self.num_heads != 0 {
            return Err(config_err(format!(
                "encoder.hidden_dim ({}) must be a positive multiple of num_heads ({})",
                self.hidden_dim, self.num_heads
            )));
        }
        if self.ffn_dim == 0 {
            return Err(config_err("encoder.ffn_dim must be >= 1"));
        }
        if self.max_input_len < 2 {
            return Err(config_err("encoder.max_input_len must be >= 2"));
        }
        if self.vocab_size < 3 {
            return Err(config_err("encoder.vocab_size must cover the reserved tokens"));
        }
        if self.n_text_layers == 0 || self.n_text_layers > self.num_layers {
            return Err(config_err(format!(
                "n_text_layers ({}) must lie in 1..={}",
                self.n_text_layers, self.num_layers
            )));
        }
        if self.n_text_layers + self.n_label_extra > self.num_layers {
            return Err(config_err(format!(
                "n_text_layers + n_label_extra ({} + {}) exceeds num_layers ({})",
                self.n_text_layers, self.n_label_extra, self.num_layers
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    pub fn label_layers(&self) -> usize {
        self.n_text_layers + self.n_label_extra
    }
}

/// `[CLS]` hidden state after each encoder layer: shape `(num_layers, H)`,
/// row 0 is the shallowest layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerwiseCls(pub Matrix);

impl LayerwiseCls {
    pub fn num_layers(&self) -> usize {
        self.0.rows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.0.cols()
    }

    /// The deepest `n_layers` rows concatenated, deepest last.
    pub fn concat_cls(&self, n_layers: usize) -> Result<Vec<f64>> {
        if n_layers > self.num_layers() {
            return Err(GudnError::Shape(format!(
                "cannot concatenate {n_layers} layers out of {}",
                self.num_layers()
            )));
        }
        let start = self.num_layers() - n_layers;
        Ok((start..self.num_layers())
            .flat_map(|r| self.0.row(r).iter().copied())
            .collect())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Affine {
    pub w: ParamId,
    pub b: ParamId,
}

impl Affine {
    pub fn init(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        Self {
            w: store.insert(format!("{name}.weight"), glorot(rng, fan_in, fan_out)),
            b: store.insert(format!("{name}.bias"), Matrix::zeros(1, fan_out)),
        }
    }

    pub fn resolve(store: &ParamStore, name: &str, missing: &mut Vec<String>) -> Option<Self> {
        let w = lookup(store, &format!("{name}.weight"), missing);
        let b = lookup(store, &format!("{name}.bias"), missing);
        Some(Self { w: w?, b: b? })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        let xw = tape.matmul(x, w);
        tape.add_row(xw, b)
    }

    pub fn in_dim(&self, store: &ParamStore) -> usize {
        store.get(self.w).rows()
    }

    pub fn out_dim(&self, store: &ParamStore) -> usize {
        store.get(self.w).cols()
    }
}

pub(crate) fn lookup(store: &ParamStore, name: &str, missing: &mut Vec<String>) -> Option<ParamId> {
    let id = store.id(name);
    if id.is_none() {
        missing.push(name.to_string());
    }
    id
}

#[derive(Clone, Copy, Debug)]
struct LayerNormParams {
    gamma: ParamId,
    beta: ParamId,
}

impl LayerNormParams {
    fn init(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.insert(format!("{name}.gamma"), Matrix::filled(1, dim, 1.0)),
            beta: store.insert(format!("{name}.beta"), Matrix::zeros(1, dim)),
        }
    }

    fn resolve(store: &ParamStore, name: &str, missing: &mut Vec<String>) -> Option<Self> {
        let gamma = lookup(store, &format!("{name}.gamma"), missing);
        let beta = lookup(store, &format!("{name}.beta"), missing);
        Some(Self {
            gamma: gamma?,
            beta: beta?,
        })
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.layer_norm(x, g, b)
    }
}

#[derive(Clone, Debug)]
struct Block {
    ln_attn: LayerNormParams,
    query: Affine,
    key: Affine,
    value: Affine,
    out: Affine,
    ln_ffn: LayerNormParams,
    ffn_in: Affine,
    ffn_out: Affine,
}

/// Parameter handles of one encoder inside a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Encoder {
    cfg: EncoderConfig,
    tok_emb: ParamId,
    pos_emb: ParamId,
    blocks: Vec<Block>,
}

/// Per-sequence forward result.
pub struct EncoderTrace {
    /// `(1, H)` `[CLS]` state after each layer.
    pub cls: Vec<Var>,
    /// Attention probabilities per layer per head over the unpadded prefix.
    pub attention: Vec<Vec<Var>>,
    pub valid_len: usize,
}

impl Encoder {
    pub const PREFIX: &'static str = "encoder";

    pub fn init(cfg: &EncoderConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let h = cfg.hidden_dim;
        let tok_emb = store.insert("encoder.tok_emb", uniform(rng, cfg.vocab_size, h, 1.0));
        let pos_emb = store.insert("encoder.pos_emb", uniform(rng, cfg.max_input_len, h, 0.5));
        let blocks = (0..cfg.num_layers)
            .map(|i| {
                let p = format!("encoder.layer{i}");
                Block {
                    ln_attn: LayerNormParams::init(store, &format!("{p}.ln_attn"), h),
                    query: Affine::init(store, &format!("{p}.attn.query"), h, h, rng),
                    key: Affine::init(store, &format!("{p}.attn.key"), h, h, rng),
                    value: Affine::init(store, &format!("{p}.attn.value"), h, h, rng),
                    out: Affine::init(store, &format!("{p}.attn.out"), h, h, rng),
                    ln_ffn: LayerNormParams::init(store, &format!("{p}.ln_ffn"), h),
                    ffn_in: Affine::init(store, &format!("{p}.ffn.in"), h, cfg.ffn_dim, rng),
                    ffn_out: Affine::init(store, &format!("{p}.ffn.out"), cfg.ffn_dim, h, rng),
                }
            })
            .collect();
        Ok(Self {
            cfg: cfg.clone(),
            tok_emb,
            pos_emb,
            blocks,
        })
    }

    /// Looks up existing parameters; names of absent ones go to `missing`.
    pub fn resolve(cfg: &EncoderConfig, store: &ParamStore, missing: &mut Vec<String>) -> Option<Self> {
        let tok_emb = lookup(store, "encoder.tok_emb", missing);
        let pos_emb = lookup(store, "encoder.pos_emb", missing);
        let mut blocks = Vec::with_capacity(cfg.num_layers);
        let mut complete = true;
        for i in 0..cfg.num_layers {
            let p = format!("encoder.layer{i}");
            let block = (|| {
                Some(Block {
                    ln_attn: LayerNormParams::resolve(store, &format!("{p}.ln_attn"), missing)?,
                    query: Affine::resolve(store, &format!("{p}.attn.query"), missing)?,
                    key: Affine::resolve(store, &format!("{p}.attn.key"), missing)?,
                    value: Affine::resolve(store, &format!("{p}.attn.value"), missing)?,
                    out: Affine::resolve(store, &format!("{p}.attn.out"), missing)?,
                    ln_ffn: LayerNormParams::resolve(store, &format!("{p}.ln_ffn"), missing)?,
                    ffn_in: Affine::resolve(store, &format!("{p}.ffn.in"), missing)?,
                    ffn_out: Affine::resolve(store, &format!("{p}.ffn.out"), missing)?,
                })
            })();
            match block {
                Some(b) => blocks.push(b),
                None => complete = false,
            }
        }
        if !complete {
            return None;
        }
        Some(Self {
            cfg: cfg.clone(),
            tok_emb: tok_emb?,
            pos_emb: pos_emb?,
            blocks,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    fn check_tokens(&self, tokens: &[TokenId]) -> Result<usize> {
        if tokens.is_empty() || tokens.len() > self.cfg.max_input_len {
            return Err(data_err(format!(
                "input length {} outside 1..={}",
                tokens.len(),
                self.cfg.max_input_len
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= self.cfg.vocab_size) {
            return Err(data_err(format!(
                "token id {bad} >= vocab_size {}",
                self.cfg.vocab_size
            )));
        }
        Ok(tokens.iter().position(|&t| t == PAD).unwrap_or(tokens.len()).max(1))
    }

    /// Records the forward pass of one sequence on `tape`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, tokens: &[TokenId]) -> Result<EncoderTrace> {
        let valid_len = self.check_tokens(tokens)?;
        let ids: Vec<usize> = tokens[..valid_len].iter().map(|&t| t as usize).collect();
        let tok = tape.param(store, self.tok_emb);
        let pos = tape.param(store, self.pos_emb);
        let te = tape.gather_rows(tok, ids);
        let pe = tape.gather_rows(pos, (0..valid_len).collect());
        let mut x = tape.add(te, pe);

        let heads = self.cfg.num_heads;
        let dh = self.cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut cls = Vec::with_capacity(self.blocks.len());
        let mut attention = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let h = block.ln_attn.forward(tape, store, x);
            let q = block.query.forward(tape, store, h);
            let k = block.key.forward(tape, store, h);
            let v = block.value.forward(tape, store, h);
            let mut head_out = Vec::with_capacity(heads);
            let mut probs = Vec::with_capacity(heads);
            for hd in 0..heads {
                let qh = tape.slice_cols(q, hd * dh, dh);
                let kh = tape.slice_cols(k, hd * dh, dh);
                let vh = tape.slice_cols(v, hd * dh, dh);
                let scores = tape.matmul_bt(qh, kh);
                let scores = tape.scale(scores, scale);
                let p = tape.softmax(scores);
                probs.push(p);
                head_out.push(tape.matmul(p, vh));
            }
            let att = if heads == 1 {
                head_out[0]
            } else {
                tape.concat_cols(head_out)
            };
            let att = block.out.forward(tape, store, att);
            x = tape.add(x, att);

            let h = block.ln_ffn.forward(tape, store, x);
            let f = block.ffn_in.forward(tape, store, h);
            let f = tape.relu(f);
            let f = block.ffn_out.forward(tape, store, f);
            x = tape.add(x, f);

            cls.push(tape.gather_rows(x, vec![0]));
            attention.push(probs);
        }
        Ok(EncoderTrace {
            cls,
            attention,
            valid_len,
        })
    }

    /// Evaluation-mode `[CLS]` states of one sequence.
    pub fn encode(&self, store: &ParamStore, tokens: &[TokenId]) -> Result<LayerwiseCls> {
        let mut tape = Tape::new();
        let trace = self.forward(&mut tape, store, tokens)?;
        let rows: Vec<Vec<f64>> = trace
            .cls
            .iter()
            .map(|&v| tape.value(v).data().to_vec())
            .collect();
        Ok(LayerwiseCls(Matrix::from_rows(&rows)))
    }

    /// Attention probabilities `[layer][head]`, each `(valid_len, valid_len)`.
    pub fn attention_maps(&self, store: &ParamStore, tokens: &[TokenId]) -> Result<Vec<Vec<Matrix>>> {
        let mut tape = Tape::new();
        let trace = self.forward(&mut tape, store, tokens)?;
        Ok(trace
            .attention
            .iter()
            .map(|layer| layer.iter().map(|&p| tape.value(p).clone()).collect())
            .collect())
    }
}

/// Concatenates the deepest `n_layers` entries of `cls` (each `(1, H)`) on the tape.
pub fn concat_cls_var(tape: &mut Tape, cls: &[Var], n_layers: usize) -> Result<Var> {
    if n_layers == 0 || n_layers > cls.len() {
        return Err(GudnError::Shape(format!(
            "cannot concatenate {n_layers} layers out of {}",
            cls.len()
        )));
    }
    let parts = cls[cls.len() - n_layers..].to_vec();
    Ok(if parts.len() == 1 {
        parts[0]
    } else {
        tape.concat_cols(parts)
    })
}
