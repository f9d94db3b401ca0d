//! The GUDN model: feature extractor, guide network, ranking classifier and
//! the combined training objective.
//!
//! ```text
//! text tokens  ─┐                       ┌─ fc_text ─ shape ─ G_t ─┐
//!               ├─ shared encoder ─ E_t ┤                         ├─ feature loss (MSE)
//! label tokens ─┘           └──── E_l ──┴─ fc_label ─ G_l ────────┤
//!                                                  └─ link_head ─ link loss (BCE)
//! E_t ─ mlp2 ─ softmax ─ label_head ─ class loss (BCE)
//! ```
//!
//! Only the encoder, the text MLP and the classifier are used at inference.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{softmax_in_place, Tape, Var};
use crate::corpus::{LabelId, TokenId};
use crate::encoder::{concat_cls_var, Affine, Encoder, EncoderConfig, LayerwiseCls};
use crate::error::{config_err, GudnError, Result};
use crate::params::{ParamStore, ParamId};
use crate::sampling::{select_candidates, two_stage_predict, ClusterIndex};
use crate::tensor::Matrix;

pub type ModelRng = ChaCha8Rng;

/// Probability clamp used by both BCE terms.
pub const BCE_EPS: f64 = 1e-7;

/// Which loss terms are trained.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AblationMode {
    /// Feature, link and class losses.
    #[default]
    Full,
    /// Class loss only; the label stream is never encoded.
    BertOnly,
    /// Feature and class losses.
    GudF,
    /// Link and class losses.
    GudL,
}

impl AblationMode {
    pub const ALL: [AblationMode; 4] = [Self::Full, Self::BertOnly, Self::GudF, Self::GudL];

    pub fn uses_feature(self) -> bool {
        matches!(self, Self::Full | Self::GudF)
    }

    pub fn uses_link(self) -> bool {
        matches!(self, Self::Full | Self::GudL)
    }

    pub fn needs_label_stream(self) -> bool {
        self != Self::BertOnly
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Full => "FULL",
            Self::BertOnly => "BERT_ONLY",
            Self::GudF => "GUD_F",
            Self::GudL => "GUD_L",
        }
    }
}

impl std::str::FromStr for AblationMode {
    type Err = GudnError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().replace('-', "_").as_str() {
            "FULL" => Ok(Self::Full),
            "BERT_ONLY" | "BERT" => Ok(Self::BertOnly),
            "GUD_F" => Ok(Self::GudF),
            "GUD_L" => Ok(Self::GudL),
            other => Err(config_err(format!(
                "unknown mode {other:?} (expected FULL, BERT_ONLY, GUD_F or GUD_L)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossReduction {
    #[default]
    Sum,
    /// BCE terms divided by the batch size.
    Mean,
}

/// Loss terms of one batch. Construct through [`LossBreakdown::new`] so that
/// `l_guide = l_feature + l_link` and `l_overall = l_guide + l_class` hold.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_feature: f64,
    pub l_link: f64,
    pub l_class: f64,
    pub l_guide: f64,
    pub l_overall: f64,
}

impl LossBreakdown {
    pub fn new(l_feature: f64, l_link: f64, l_class: f64) -> Self {
        let l_guide = l_feature + l_link;
        Self {
            l_feature,
            l_link,
            l_class,
            l_guide,
            l_overall: l_guide + l_class,
        }
    }

    /// Bit-exact check of both identities.
    pub fn identities_hold(&self) -> bool {
        self.l_guide == self.l_feature + self.l_link && self.l_overall == self.l_guide + self.l_class
    }

    pub fn is_finite(&self) -> bool {
        [self.l_feature, self.l_link, self.l_class, self.l_guide, self.l_overall]
            .iter()
            .all(|v| v.is_finite())
    }

    /// Component-wise mean of `items`, identities re-established.
    pub fn mean(items: &[LossBreakdown]) -> Self {
        if items.is_empty() {
            return Self::default();
        }
        let n = items.len() as f64;
        let f = items.iter().map(|b| b.l_feature).sum::<f64>() / n;
        let l = items.iter().map(|b| b.l_link).sum::<f64>() / n;
        let c = items.iter().map(|b| b.l_class).sum::<f64>() / n;
        Self::new(f, l, c)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub num_labels: usize,
    pub d_feat: usize,
    pub d_hidden: usize,
    pub dropout_rate: f64,
    pub softmax_in_classifier: bool,
    pub loss_reduction: LossReduction,
    /// Cluster count of the negative-sampling head, absent when disabled.
    pub num_clusters: Option<usize>,
    pub k_clusters: Option<usize>,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.num_labels == 0 {
            return Err(config_err("num_labels must be >= 1"));
        }
        if self.d_feat == 0 || self.d_hidden == 0 {
            return Err(config_err("d_feat and d_hidden must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(config_err(format!(
                "dropout_rate must lie in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        if let Some(c) = self.num_clusters {
            let k = self.k_clusters.unwrap_or(0);
            if k == 0 || k > c {
                return Err(config_err(format!("k_clusters must lie in 1..={c}")));
            }
        }
        Ok(())
    }

    pub fn text_width(&self) -> usize {
        self.encoder.n_text_layers * self.encoder.hidden_dim
    }

    pub fn label_width(&self) -> usize {
        self.encoder.label_layers() * self.encoder.hidden_dim
    }
}

/// The guide network's maps, absent from inference-only checkpoints.
#[derive(Clone, Debug)]
pub struct GuideParams {
    pub fc_text: Affine,
    pub fc_label: Affine,
    pub shape: Affine,
    pub link_head: Affine,
}

#[derive(Clone, Debug)]
pub struct ClassifierParams {
    pub mlp2: Affine,
    pub label_head: Affine,
    pub cluster_head: Option<Affine>,
}

/// Borrowed classifier matrices, `(weight, bias)` per map.
#[derive(Clone, Copy)]
pub struct ClassifierWeights<'a> {
    pub mlp2: (&'a Matrix, &'a Matrix),
    pub label_head: (&'a Matrix, &'a Matrix),
    pub cluster_head: Option<(&'a Matrix, &'a Matrix)>,
    pub softmax: bool,
}

impl ClassifierWeights<'_> {
    /// `softmax(E_t W_1 + b_1)` row-wise (ReLU when softmax is disabled).
    pub fn hidden(&self, e_t: &Matrix) -> Matrix {
        let mut z = e_t.matmul(self.mlp2.0);
        let bias = self.mlp2.1.data();
        for r in 0..z.rows() {
            let row = z.row_mut(r);
            for (o, b) in row.iter_mut().zip(bias) {
                *o += b;
            }
            if self.softmax {
                softmax_in_place(row);
            } else {
                row.iter_mut().for_each(|v| *v = v.max(0.0));
            }
        }
        z
    }

    pub fn label_logits(&self, hidden: &Matrix) -> Matrix {
        let mut out = hidden.matmul(self.label_head.0);
        let bias = self.label_head.1.data();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(bias) {
                *o += b;
            }
        }
        out
    }

    /// `row · W + b` for the selected output columns (all when `None`),
    /// accumulated in the same order as [`Matrix::matmul`].
    pub fn affine_row(row: &[f64], (w, b): (&Matrix, &Matrix), columns: Option<&[usize]>) -> Vec<f64> {
        let eval = |j: usize| {
            let mut s = 0.0;
            for (k, &a) in row.iter().enumerate() {
                if a != 0.0 {
                    s += a * w.get(k, j);
                }
            }
            s + b.data()[j]
        };
        match columns {
            Some(cols) => cols.iter().map(|&j| eval(j)).collect(),
            None => (0..w.cols()).map(eval).collect(),
        }
    }
}

/// Labels ranked for one sample, best first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ranking {
    pub labels: Vec<LabelId>,
    pub scores: Vec<f64>,
}

/// Sorts `labels` by descending score, ties to the lower label id, and keeps
/// the first `top_k`.
pub fn rank_scores(labels: &[LabelId], scores: &[f64], top_k: usize) -> Ranking {
    let mut idx: Vec<usize> = (0..labels.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(labels[a].cmp(&labels[b])));
    idx.truncate(top_k);
    Ranking {
        labels: idx.iter().map(|&i| labels[i]).collect(),
        scores: idx.iter().map(|&i| scores[i]).collect(),
    }
}

/// `(1/2n) Σ_i ‖a_i − b_i‖²`; zero for an empty batch.
pub fn feature_loss(a: &Matrix, b: &Matrix) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(GudnError::Shape(format!(
            "feature_loss on {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    if a.rows() == 0 {
        return Ok(0.0);
    }
    let mut tape = Tape::new();
    let av = tape.constant(a.clone());
    let bv = tape.constant(b.clone());
    let v = feature_loss_var(&mut tape, av, bv, a.rows());
    Ok(tape.value(v).item())
}

fn feature_loss_var(tape: &mut Tape, a: Var, b: Var, n: usize) -> Var {
    let d = tape.sub(a, b);
    let ss = tape.sum_squares(d);
    tape.scale(ss, 1.0 / (2.0 * n as f64))
}

/// Summed clamped sigmoid BCE between `logits` and multi-hot `y`.
pub fn class_loss(logits: &Matrix, y: &Matrix) -> Result<f64> {
    if logits.shape() != y.shape() {
        return Err(GudnError::Shape(format!(
            "class_loss on {:?} vs targets {:?}",
            logits.shape(),
            y.shape()
        )));
    }
    let mut tape = Tape::new();
    let z = tape.constant(logits.clone());
    let l = tape.bce_with_logits(z, y, None, BCE_EPS);
    Ok(tape.value(l).item())
}

/// Multi-hot `(n, num_labels)` target matrix.
pub fn multi_hot(positives: &[Vec<LabelId>], num_labels: usize) -> Matrix {
    let mut y = Matrix::zeros(positives.len(), num_labels);
    for (i, pos) in positives.iter().enumerate() {
        for &l in pos {
            y.set(i, l, 1.0);
        }
    }
    y
}

/// One training batch. Label sequences are the reinforced label-stream inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub text_tokens: Vec<Vec<TokenId>>,
    pub label_tokens: Option<Vec<Vec<TokenId>>>,
    pub positives: Vec<Vec<LabelId>>,
}

impl Batch {
    pub fn new(
        text_tokens: Vec<Vec<TokenId>>,
        label_tokens: Option<Vec<Vec<TokenId>>>,
        positives: Vec<Vec<LabelId>>,
        mode: AblationMode,
    ) -> Result<Self> {
        if text_tokens.len() != positives.len() {
            return Err(GudnError::Shape("texts and positives differ in length".into()));
        }
        match &label_tokens {
            None if mode.needs_label_stream() => {
                return Err(config_err(format!(
                    "mode {} needs label token inputs",
                    mode.as_str()
                )))
            }
            Some(l) if l.len() != text_tokens.len() => {
                return Err(GudnError::Shape("texts and label inputs differ in length".into()))
            }
            _ => {}
        }
        Ok(Self {
            text_tokens,
            label_tokens,
            positives,
        })
    }

    pub fn len(&self) -> usize {
        self.text_tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.text_tokens.is_empty()
    }
}

/// Loss graph of one batch.
pub struct ForwardLoss {
    pub root: Var,
    pub breakdown: LossBreakdown,
    pub encoder_passes: usize,
}

#[derive(Clone, Debug)]
pub struct GudnModel {
    cfg: ModelConfig,
    store: ParamStore,
    encoder: Encoder,
    text_mlp: Affine,
    label_mlp: Option<Affine>,
    guide: Option<GuideParams>,
    classifier: ClassifierParams,
    clusters: Option<ClusterIndex>,
}

/// Parameter-name prefixes read at inference.
pub const INFERENCE_PREFIXES: [&str; 3] = ["encoder.", "extractor.text_mlp.", "classifier."];

pub fn is_inference_param(name: &str) -> bool {
    INFERENCE_PREFIXES.iter().any(|p| name.starts_with(p))
}

fn dropout_mask(rng: &mut ModelRng, len: usize, rate: f64) -> Vec<f64> {
    let keep = 1.0 - rate;
    (0..len)
        .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
        .collect()
}

impl GudnModel {
    /// Freshly initialized model. `clusters` must be given iff
    /// `cfg.num_clusters` is set.
    pub fn new(cfg: ModelConfig, clusters: Option<ClusterIndex>, seed: u64) -> Result<Self> {
        let mut cfg = cfg;
        cfg.encoder = cfg.encoder.resolved();
        cfg.validate()?;
        Self::check_clusters(&cfg, clusters.as_ref())?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = Encoder::init(&cfg.encoder, &mut store, &mut rng)?;
        let d = cfg.d_feat;
        let text_mlp = Affine::init(&mut store, "extractor.text_mlp", cfg.text_width(), d, &mut rng);
        let label_mlp = Affine::init(&mut store, "extractor.label_mlp", cfg.label_width(), d, &mut rng);
        let guide = GuideParams {
            fc_text: Affine::init(&mut store, "guide.fc_text", d, d, &mut rng),
            fc_label: Affine::init(&mut store, "guide.fc_label", d, d, &mut rng),
            shape: Affine::init(&mut store, "guide.shape", d, d, &mut rng),
            link_head: Affine::init(&mut store, "guide.link_head", d, cfg.num_labels, &mut rng),
        };
        let classifier = ClassifierParams {
            mlp2: Affine::init(&mut store, "classifier.mlp2", d, cfg.d_hidden, &mut rng),
            label_head: Affine::init(&mut store, "classifier.label_head", cfg.d_hidden, cfg.num_labels, &mut rng),
            cluster_head: cfg
                .num_clusters
                .map(|c| Affine::init(&mut store, "classifier.cluster_head", cfg.d_hidden, c, &mut rng)),
        };
        Ok(Self {
            cfg,
            store,
            encoder,
            text_mlp,
            label_mlp: Some(label_mlp),
            guide: Some(guide),
            classifier,
            clusters,
        })
    }

    fn check_clusters(cfg: &ModelConfig, clusters: Option<&ClusterIndex>) -> Result<()> {
        match (cfg.num_clusters, clusters) {
            (None, None) => Ok(()),
            (Some(c), Some(idx)) if idx.num_clusters() == c && idx.num_labels() == cfg.num_labels => Ok(()),
            (Some(_), Some(_)) => Err(config_err("cluster index does not match num_clusters/num_labels")),
            (Some(_), None) => Err(config_err("cluster head enabled without a cluster index")),
            (None, Some(_)) => Err(config_err("cluster index given but num_clusters is unset")),
        }
    }

    /// Binds an existing parameter store. Inference parameters are required;
    /// the label MLP and guide network are optional.
    pub fn from_store(cfg: ModelConfig, store: ParamStore, clusters: Option<ClusterIndex>) -> Result<Self> {
        cfg.validate()?;
        Self::check_clusters(&cfg, clusters.as_ref())?;
        let mut missing = Vec::new();
        let encoder = Encoder::resolve(&cfg.encoder, &store, &mut missing);
        let text_mlp = Affine::resolve(&store, "extractor.text_mlp", &mut missing);
        let mlp2 = Affine::resolve(&store, "classifier.mlp2", &mut missing);
        let label_head = Affine::resolve(&store, "classifier.label_head", &mut missing);
        let cluster_head = match cfg.num_clusters {
            Some(_) => Some(Affine::resolve(&store, "classifier.cluster_head", &mut missing)),
            None => None,
        };
        if !missing.is_empty() {
            return Err(GudnError::MissingParams(missing));
        }
        let mut optional = Vec::new();
        let label_mlp = Affine::resolve(&store, "extractor.label_mlp", &mut optional);
        let guide = (|| {
            Some(GuideParams {
                fc_text: Affine::resolve(&store, "guide.fc_text", &mut optional)?,
                fc_label: Affine::resolve(&store, "guide.fc_label", &mut optional)?,
                shape: Affine::resolve(&store, "guide.shape", &mut optional)?,
                link_head: Affine::resolve(&store, "guide.link_head", &mut optional)?,
            })
        })();
        let model = Self {
            encoder: encoder.expect("resolved"),
            text_mlp: text_mlp.expect("resolved"),
            label_mlp,
            guide,
            classifier: ClassifierParams {
                mlp2: mlp2.expect("resolved"),
                label_head: label_head.expect("resolved"),
                cluster_head: cluster_head.map(|c| c.expect("resolved")),
            },
            cfg,
            store,
            clusters,
        };
        model.check_shapes()?;
        Ok(model)
    }

    fn check_shapes(&self) -> Result<()> {
        let s = &self.store;
        let e = &self.cfg.encoder;
        let mut bad = Vec::new();
        let mut expect = |name: &str, id: ParamId, shape: (usize, usize)| {
            if s.get(id).shape() != shape {
                bad.push(format!("{name}: {:?} != {:?}", s.get(id).shape(), shape));
            }
        };
        expect("encoder.tok_emb", s.id("encoder.tok_emb").expect("resolved"), (e.vocab_size, e.hidden_dim));
        expect("encoder.pos_emb", s.id("encoder.pos_emb").expect("resolved"), (e.max_input_len, e.hidden_dim));
        expect("extractor.text_mlp.weight", self.text_mlp.w, (self.cfg.text_width(), self.cfg.d_feat));
        expect("classifier.mlp2.weight", self.classifier.mlp2.w, (self.cfg.d_feat, self.cfg.d_hidden));
        expect("classifier.label_head.weight", self.classifier.label_head.w, (self.cfg.d_hidden, self.cfg.num_labels));
        if let Some(g) = &self.guide {
            expect("guide.link_head.weight", g.link_head.w, (self.cfg.d_feat, self.cfg.num_labels));
        }
        if let Some(lm) = &self.label_mlp {
            expect("extractor.label_mlp.weight", lm.w, (self.cfg.label_width(), self.cfg.d_feat));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(GudnError::Shape(bad.join("; ")))
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn guide(&self) -> Option<&GuideParams> {
        self.guide.as_ref()
    }

    pub fn clusters(&self) -> Option<&ClusterIndex> {
        self.clusters.as_ref()
    }

    pub fn num_labels(&self) -> usize {
        self.cfg.num_labels
    }

    /// Replaces a named parameter's value; shapes must match.
    pub fn set_param(&mut self, name: &str, value: Matrix) -> Result<()> {
        let id = self
            .store
            .id(name)
            .ok_or_else(|| config_err(format!("no parameter named {name}")))?;
        if self.store.get(id).shape() != value.shape() {
            return Err(GudnError::Shape(format!(
                "{name}: {:?} != {:?}",
                value.shape(),
                self.store.get(id).shape()
            )));
        }
        *self.store.get_mut(id) = value;
        Ok(())
    }

    pub fn classifier_weights(&self) -> ClassifierWeights<'_> {
        let pair = |a: &Affine| (self.store.get(a.w), self.store.get(a.b));
        ClassifierWeights {
            mlp2: pair(&self.classifier.mlp2),
            label_head: pair(&self.classifier.label_head),
            cluster_head: self.classifier.cluster_head.as_ref().map(pair),
            softmax: self.cfg.softmax_in_classifier,
        }
    }

    /// Dropout, ReLU, then the stream MLP, on concatenated `[CLS]` rows.
    fn refine(&self, tape: &mut Tape, f: Var, mlp: &Affine, rng: Option<&mut ModelRng>) -> Var {
        let f = match rng {
            Some(rng) if self.cfg.dropout_rate > 0.0 => {
                let len = tape.value(f).data().len();
                let mask = dropout_mask(rng, len, self.cfg.dropout_rate);
                tape.dropout_with_mask(f, mask)
            }
            _ => f,
        };
        let f = tape.relu(f);
        mlp.forward(tape, &self.store, f)
    }

    fn stream_features(
        &self,
        tape: &mut Tape,
        seqs: &[Vec<TokenId>],
        n_layers: usize,
        mlp: &Affine,
        rng: Option<&mut ModelRng>,
    ) -> Result<Var> {
        let mut rows = Vec::with_capacity(seqs.len());
        for s in seqs {
            let trace = self.encoder.forward(tape, &self.store, s)?;
            rows.push(concat_cls_var(tape, &trace.cls, n_layers)?);
        }
        let f = tape.concat_rows(rows, n_layers * self.cfg.encoder.hidden_dim);
        Ok(self.refine(tape, f, mlp, rng))
    }

    fn features_from_cls(
        &self,
        cls: &[LayerwiseCls],
        n_layers: usize,
        mlp: &Affine,
        rng: Option<&mut ModelRng>,
    ) -> Result<Matrix> {
        let e = &self.cfg.encoder;
        let width = n_layers * e.hidden_dim;
        let mut data = Vec::with_capacity(cls.len() * width);
        for c in cls {
            if c.num_layers() != e.num_layers || c.hidden_dim() != e.hidden_dim {
                return Err(GudnError::Shape(format!(
                    "LayerwiseCLS shape ({}, {}) does not match encoder ({}, {})",
                    c.num_layers(),
                    c.hidden_dim(),
                    e.num_layers,
                    e.hidden_dim
                )));
            }
            data.extend(c.concat_cls(n_layers)?);
        }
        let mut tape = Tape::new();
        let f = tape.constant(Matrix::from_vec(cls.len(), width, data));
        let out = self.refine(&mut tape, f, mlp, rng);
        Ok(tape.value(out).clone())
    }

    /// `E_t`: text MLP over ReLU(Dropout(concatenated text layers)).
    /// Dropout applies only when `rng` is given.
    pub fn extract_text_features(&self, cls: &[LayerwiseCls], rng: Option<&mut ModelRng>) -> Result<Matrix> {
        self.features_from_cls(cls, self.cfg.encoder.n_text_layers, &self.text_mlp, rng)
    }

    /// `E_l`: label MLP over the text layers plus the extra label layers.
    pub fn extract_label_features(&self, cls: &[LayerwiseCls], rng: Option<&mut ModelRng>) -> Result<Matrix> {
        let mlp = self
            .label_mlp
            .as_ref()
            .ok_or_else(|| config_err("label MLP parameters absent"))?;
        self.features_from_cls(cls, self.cfg.encoder.label_layers(), mlp, rng)
    }

    fn guide_params(&self) -> Result<&GuideParams> {
        self.guide
            .as_ref()
            .ok_or_else(|| config_err("guide network parameters absent (inference-only model)"))
    }

    /// `(G_t, G_l) = (shape(fc_text(E_t)), fc_label(E_l))`.
    pub fn guide_forward(&self, e_t: &Matrix, e_l: &Matrix) -> Result<(Matrix, Matrix)> {
        if e_t.rows() != e_l.rows() {
            return Err(GudnError::Shape(format!(
                "guide_forward: {} text rows vs {} label rows",
                e_t.rows(),
                e_l.rows()
            )));
        }
        let g = self.guide_params()?;
        let mut tape = Tape::new();
        let t = tape.constant(e_t.clone());
        let l = tape.constant(e_l.clone());
        let t = g.fc_text.forward(&mut tape, &self.store, t);
        let gt = g.shape.forward(&mut tape, &self.store, t);
        let gl = g.fc_label.forward(&mut tape, &self.store, l);
        Ok((tape.value(gt).clone(), tape.value(gl).clone()))
    }

    /// BCE between `sigmoid(link_head(G_l))` and `y`.
    pub fn link_loss(&self, g_l: &Matrix, y: &Matrix) -> Result<f64> {
        let g = self.guide_params()?;
        let mut tape = Tape::new();
        let gl = tape.constant(g_l.clone());
        let z = g.link_head.forward(&mut tape, &self.store, gl);
        if tape.value(z).shape() != y.shape() {
            return Err(GudnError::Shape("link_loss target shape".into()));
        }
        let l = tape.bce_with_logits(z, y, None, BCE_EPS);
        Ok(tape.value(l).item())
    }

    /// Label logits `W_c · softmax(W_1 E_t + b_1) + b_c`.
    pub fn rank_classify(&self, e_t: &Matrix) -> Matrix {
        let w = self.classifier_weights();
        w.label_logits(&w.hidden(e_t))
    }

    /// Records the combined objective of `batch` on `tape`. Dropout is on
    /// when `rng` is given.
    pub fn loss_on_tape(
        &self,
        tape: &mut Tape,
        batch: &Batch,
        mode: AblationMode,
        mut rng: Option<&mut ModelRng>,
    ) -> Result<ForwardLoss> {
        let n = batch.len();
        let l = self.cfg.num_labels;
        for pos in &batch.positives {
            if let Some(&bad) = pos.iter().find(|&&p| p >= l) {
                return Err(crate::error::data_err(format!("label {bad} out of range")));
            }
        }
        let y = multi_hot(&batch.positives, l);
        let reduce = |tape: &mut Tape, v: Var| match self.cfg.loss_reduction {
            LossReduction::Mean if n > 0 => tape.scale(v, 1.0 / n as f64),
            _ => v,
        };
        let enc = &self.cfg.encoder;
        let e_t = self.stream_features(tape, &batch.text_tokens, enc.n_text_layers, &self.text_mlp, rng.as_deref_mut())?;
        let mut passes = n;

        let mut feature = None;
        let mut link = None;
        if mode.needs_label_stream() {
            let guide = self.guide_params()?;
            let label_mlp = self
                .label_mlp
                .as_ref()
                .ok_or_else(|| config_err("label MLP parameters absent"))?;
            let seqs = batch.label_tokens.as_ref().ok_or_else(|| {
                config_err(format!("mode {} needs label token inputs", mode.as_str()))
            })?;
            let e_l = self.stream_features(tape, seqs, enc.label_layers(), label_mlp, rng.as_deref_mut())?;
            passes += n;
            let g_l = guide.fc_label.forward(tape, &self.store, e_l);
            if mode.uses_feature() {
                let t = guide.fc_text.forward(tape, &self.store, e_t);
                let g_t = guide.shape.forward(tape, &self.store, t);
                feature = Some(if n == 0 {
                    tape.constant(Matrix::scalar(0.0))
                } else {
                    feature_loss_var(tape, g_t, g_l, n)
                });
            }
            if mode.uses_link() {
                let z = guide.link_head.forward(tape, &self.store, g_l);
                let b = tape.bce_with_logits(z, &y, None, BCE_EPS);
                link = Some(reduce(tape, b));
            }
        }

        let c = &self.classifier;
        let z = c.mlp2.forward(tape, &self.store, e_t);
        let h = if self.cfg.softmax_in_classifier {
            tape.softmax(z)
        } else {
            tape.relu(z)
        };
        let logits = c.label_head.forward(tape, &self.store, h);
        let class = match (&c.cluster_head, &self.clusters) {
            (Some(head), Some(index)) => {
                let cz = head.forward(tape, &self.store, h);
                let k = self.cfg.k_clusters.unwrap_or(index.num_clusters());
                let mut mask = Matrix::zeros(n, l);
                let mut cluster_y = Matrix::zeros(n, index.num_clusters());
                for i in 0..n {
                    let cand = select_candidates(tape.value(cz).row(i), &batch.positives[i], index, k)?;
                    for &lab in &cand.candidates {
                        mask.set(i, lab, 1.0);
                    }
                    cluster_y.row_mut(i).copy_from_slice(&cand.cluster_target);
                }
                let lc = tape.bce_with_logits(cz, &cluster_y, None, BCE_EPS);
                let ll = tape.bce_with_logits(logits, &y, Some(&mask), BCE_EPS);
                tape.add(lc, ll)
            }
            _ => tape.bce_with_logits(logits, &y, None, BCE_EPS),
        };
        let class = reduce(tape, class);

        let value = |v: Option<Var>| v.map_or(0.0, |v| tape.value(v).item());
        let breakdown = LossBreakdown::new(value(feature), value(link), tape.value(class).item());
        let root = match (feature, link) {
            (Some(f), Some(k)) => {
                let g = tape.add(f, k);
                tape.add(g, class)
            }
            (Some(g), None) | (None, Some(g)) => tape.add(g, class),
            (None, None) => class,
        };
        Ok(ForwardLoss {
            root,
            breakdown,
            encoder_passes: passes,
        })
    }

    pub fn overall_loss(&self, batch: &Batch, mode: AblationMode, rng: Option<&mut ModelRng>) -> Result<LossBreakdown> {
        let mut tape = Tape::new();
        Ok(self.loss_on_tape(&mut tape, batch, mode, rng)?.breakdown)
    }

    /// Loss terms, parameter gradients (indexed like [`Self::params`]) and the
    /// number of encoder passes.
    pub fn loss_and_grads(
        &self,
        batch: &Batch,
        mode: AblationMode,
        rng: Option<&mut ModelRng>,
    ) -> Result<(LossBreakdown, Vec<Matrix>, usize)> {
        let mut tape = Tape::new();
        let fwd = self.loss_on_tape(&mut tape, batch, mode, rng)?;
        let grads = tape.backward(fwd.root, &self.store);
        Ok((fwd.breakdown, grads, fwd.encoder_passes))
    }

    /// Evaluation-mode `E_t` for a batch of token sequences.
    pub fn text_features(&self, texts: &[Vec<TokenId>]) -> Result<Matrix> {
        let cls: Vec<LayerwiseCls> = texts
            .par_iter()
            .map(|t| self.encoder.encode(&self.store, t))
            .collect::<Result<_>>()?;
        self.extract_text_features(&cls, None)
    }

    /// Ranked labels per text, best first. Uses only the encoder, the text
    /// MLP and the classifier.
    pub fn predict(&self, texts: &[Vec<TokenId>], top_k: usize) -> Result<Vec<Ranking>> {
        let l = self.cfg.num_labels;
        let top_k = if top_k > l {
            log::warn!("top_k {top_k} exceeds {l} labels; truncating");
            l
        } else {
            top_k
        };
        let e_t = self.text_features(texts)?;
        let weights = self.classifier_weights();
        match (&self.clusters, weights.cluster_head) {
            (Some(index), Some(_)) => {
                let k = self.cfg.k_clusters.unwrap_or(index.num_clusters());
                (0..e_t.rows())
                    .map(|i| two_stage_predict(e_t.row(i), &weights, index, k, top_k))
                    .collect()
            }
            _ => {
                let logits = weights.label_logits(&weights.hidden(&e_t));
                let labels: Vec<LabelId> = (0..l).collect();
                Ok((0..logits.rows())
                    .map(|i| rank_scores(&labels, logits.row(i), top_k))
                    .collect())
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{CLS, PAD};

    pub(crate) fn tiny_config(num_labels: usize) -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                num_layers: 2,
                hidden_dim: 8,
                num_heads: 2,
                ffn_dim: 16,
                vocab_size: 32,
                max_input_len: 8,
                ..EncoderConfig::default()
            },
            num_labels,
            d_feat: 6,
            d_hidden: 5,
            dropout_rate: 0.5,
            softmax_in_classifier: true,
            loss_reduction: LossReduction::Sum,
            num_clusters: None,
            k_clusters: None,
        }
    }

    fn batch(mode: AblationMode) -> Batch {
        Batch::new(
            vec![vec![CLS, 4, 5, 6, PAD], vec![CLS, 7, 8, PAD, PAD]],
            Some(vec![vec![CLS, 9, 10, 9, 10], vec![CLS, 11, 11, 11, 11]]),
            vec![vec![0, 2], vec![1]],
            mode,
        )
        .unwrap()
    }

    #[test]
    fn feature_loss_examples() {
        let a = Matrix::from_rows(&[vec![3.0, 4.0]]);
        let z = Matrix::zeros(1, 2);
        assert_eq!(feature_loss(&a, &z).unwrap(), 12.5);
        assert_eq!(feature_loss(&a, &a).unwrap(), 0.0);
        assert_eq!(feature_loss(&Matrix::zeros(0, 2), &Matrix::zeros(0, 2)).unwrap(), 0.0);
        assert!(feature_loss(&a, &Matrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn class_loss_examples() {
        let y = Matrix::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 1.0]]);
        let l = class_loss(&Matrix::zeros(2, 3), &y).unwrap();
        assert!((l - 6.0 * std::f64::consts::LN_2).abs() < 1e-12);
        let one = class_loss(&Matrix::scalar(20.0), &Matrix::scalar(1.0)).unwrap();
        assert!(one < 1e-7 * 1.01);
    }

    #[test]
    fn rank_ties_prefer_lower_label() {
        let r = rank_scores(&[0, 1, 2, 3], &[0.5, 0.9, 0.5, 0.1], 4);
        assert_eq!(r.labels, vec![1, 0, 2, 3]);
    }

    #[test]
    fn identities_in_every_mode() {
        let model = GudnModel::new(tiny_config(3), None, 1).unwrap();
        for mode in AblationMode::ALL {
            let mut rng = ModelRng::seed_from_u64(4);
            let b = model.overall_loss(&batch(mode), mode, Some(&mut rng)).unwrap();
            assert!(b.identities_hold());
            match mode {
                AblationMode::BertOnly => assert_eq!(b.l_overall, b.l_class),
                AblationMode::GudF => assert_eq!(b.l_link, 0.0),
                AblationMode::GudL => assert_eq!(b.l_feature, 0.0),
                AblationMode::Full => assert!(b.l_feature > 0.0 && b.l_link > 0.0),
            }
        }
    }

    #[test]
    fn bert_only_skips_label_stream() {
        let model = GudnModel::new(tiny_config(3), None, 1).unwrap();
        let (_, _, passes_b) = model.loss_and_grads(&batch(AblationMode::BertOnly), AblationMode::BertOnly, None).unwrap();
        let (_, _, passes_f) = model.loss_and_grads(&batch(AblationMode::Full), AblationMode::Full, None).unwrap();
        assert_eq!(passes_b, 2);
        assert_eq!(passes_f, 4);
        let no_labels = Batch::new(vec![vec![CLS]], None, vec![vec![0]], AblationMode::BertOnly).unwrap();
        assert!(model.overall_loss(&no_labels, AblationMode::BertOnly, None).is_ok());
        assert!(Batch::new(vec![vec![CLS]], None, vec![vec![0]], AblationMode::Full).is_err());
    }

    #[test]
    fn eval_features_deterministic_and_shaped() {
        let model = GudnModel::new(tiny_config(3), None, 2).unwrap();
        let texts = vec![vec![CLS, 3, 4], vec![CLS, 5], vec![CLS, 6, 7, 8]];
        let a = model.text_features(&texts).unwrap();
        let b = model.text_features(&texts).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), (3, 6));
    }

    #[test]
    fn zero_concat_gives_bias() {
        let mut model = GudnModel::new(tiny_config(3), None, 2).unwrap();
        model.set_param("extractor.text_mlp.bias", Matrix::zeros(1, 6)).unwrap();
        let cls = LayerwiseCls(Matrix::zeros(2, 8));
        let e = model.extract_text_features(&[cls.clone()], None).unwrap();
        assert!(e.data().iter().all(|&v| v == 0.0));
        let el = model.extract_label_features(&[cls], None).unwrap();
        assert_eq!(el.shape(), (1, 6));
        let wrong = LayerwiseCls(Matrix::zeros(3, 8));
        assert!(model.extract_text_features(&[wrong], None).is_err());
    }

    #[test]
    fn label_width_adds_extra_layers() {
        let mut cfg = tiny_config(3);
        cfg.encoder.num_layers = 12;
        cfg.encoder.hidden_dim = 4;
        cfg.encoder = cfg.encoder.resolved();
        assert_eq!(cfg.text_width(), 8 * 4);
        assert_eq!(cfg.label_width(), 10 * 4);
        cfg.encoder.n_label_extra = 0;
        assert_eq!(cfg.label_width(), cfg.text_width());
    }

    #[test]
    fn guide_identity_maps() {
        let mut model = GudnModel::new(tiny_config(3), None, 3).unwrap();
        for name in ["guide.fc_text", "guide.fc_label", "guide.shape"] {
            model.set_param(&format!("{name}.weight"), Matrix::identity(6)).unwrap();
        }
        let et = Matrix::from_rows(&[vec![1.0, -2.0, 0.5, 0.0, 3.0, 1.0]]);
        let el = Matrix::from_rows(&[vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]]);
        let (gt, gl) = model.guide_forward(&et, &el).unwrap();
        assert_eq!(gt, et);
        assert_eq!(gl, el);
        let (gt, gl) = model.guide_forward(&Matrix::zeros(0, 6), &Matrix::zeros(0, 6)).unwrap();
        assert_eq!((gt.rows(), gl.rows()), (0, 0));
        assert!(model.guide_forward(&et, &Matrix::zeros(2, 6)).is_err());
    }

    #[test]
    fn link_loss_zero_logits() {
        let mut model = GudnModel::new(tiny_config(3), None, 3).unwrap();
        model.set_param("guide.link_head.weight", Matrix::zeros(6, 3)).unwrap();
        let y = multi_hot(&[vec![0], vec![1, 2]], 3);
        let l = model.link_loss(&Matrix::filled(2, 6, 0.7), &y).unwrap();
        assert!((l - 6.0 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn classifier_softmax_shift_invariance() {
        let model = GudnModel::new(tiny_config(4), None, 5).unwrap();
        let e = Matrix::from_rows(&[vec![0.3, -0.1, 0.8, 0.0, 1.2, -0.5]]);
        let w = model.classifier_weights();
        let h = w.hidden(&e);
        assert!((h.row(0).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let shifted_bias = w.mlp2.1.map(|b| b + 3.25);
        let shifted = ClassifierWeights {
            mlp2: (w.mlp2.0, &shifted_bias),
            ..w
        };
        let a = w.label_logits(&w.hidden(&e));
        let b = shifted.label_logits(&shifted.hidden(&e));
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn classifier_hand_evaluation() {
        // n=1, d_feat=1, d_hidden=2, L=2
        let w1 = Matrix::from_rows(&[vec![1.0, -1.0]]);
        let b1 = Matrix::from_rows(&[vec![0.0, 0.5]]);
        let wc = Matrix::from_rows(&[vec![2.0, 0.0], vec![-1.0, 3.0]]);
        let bc = Matrix::from_rows(&[vec![0.1, -0.2]]);
        let weights = ClassifierWeights {
            mlp2: (&w1, &b1),
            label_head: (&wc, &bc),
            cluster_head: None,
            softmax: true,
        };
        let e = Matrix::scalar(0.5);
        // pre-softmax (0.5, 0.0)
        let s0 = 0.5f64.exp() / (0.5f64.exp() + 1.0);
        let s1 = 1.0 - s0;
        let expect = [2.0 * s0 - s1 + 0.1, 3.0 * s1 - 0.2];
        let got = weights.label_logits(&weights.hidden(&e));
        assert!((got.get(0, 0) - expect[0]).abs() < 1e-12);
        assert!((got.get(0, 1) - expect[1]).abs() < 1e-12);
    }

    #[test]
    fn predict_complete_and_truncates() {
        let model = GudnModel::new(tiny_config(5), None, 6).unwrap();
        let r = model.predict(&[vec![CLS, 3, 4]], 5).unwrap();
        let mut labels = r[0].labels.clone();
        labels.sort();
        assert_eq!(labels, vec![0, 1, 2, 3, 4]);
        let r = model.predict(&[vec![CLS, 3, 4]], 9).unwrap();
        assert_eq!(r[0].labels.len(), 5);
        assert!(r[0].scores.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn mode_names_round_trip() {
        for m in AblationMode::ALL {
            assert_eq!(m.as_str().parse::<AblationMode>().unwrap(), m);
            assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{}\"", m.as_str()));
        }
    }
}
