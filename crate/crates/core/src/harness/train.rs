use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::corpus::{DatasetBundle, LabelId, Sample, TokenId};
use crate::error::{GudnError, Result};
use crate::harness::checkpoint::Checkpoint;
use crate::harness::config::TrainConfig;
use crate::metrics::{evaluate_samples, precision_at_k, MetricsReport};
use crate::model::{Batch, GudnModel, LossBreakdown, ModelConfig, ModelRng};
use crate::params::{Adam, AdamConfig};
use crate::reinforce::reinforce;
use crate::sampling::{build_clusters, default_k_clusters, default_num_clusters, label_bow, AUTO_SAMPLING_THRESHOLD};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean over the epoch's batches.
    pub loss: LossBreakdown,
    pub heldout_p1: Option<f64>,
    pub seconds: f64,
}

/// Settings the reference method leaves open, recorded with every run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImplementationChoices {
    pub optimizer: AdamConfig,
    pub heldout_fraction: f64,
    pub heldout_size: usize,
    pub negative_sampling: bool,
    pub num_clusters: Option<usize>,
    pub k_clusters: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: TrainConfig,
    pub choices: ImplementationChoices,
    pub epochs: Vec<EpochLog>,
    /// Loss terms of every optimizer step, in order.
    pub steps: Vec<LossBreakdown>,
    pub encoder_passes: usize,
    pub best_epoch: Option<usize>,
    pub final_metrics: Option<MetricsReport>,
    pub checkpoint_path: Option<PathBuf>,
}

impl RunRecord {
    pub fn loss_series(&self) -> Vec<LossBreakdown> {
        self.epochs.iter().map(|e| e.loss).collect()
    }
}

pub struct TrainOutcome {
    pub record: RunRecord,
    /// Parameters of the best held-out epoch (the last epoch without a held-out split).
    pub model: GudnModel,
    /// Vocabulary the model's token ids refer to.
    pub tokens: crate::corpus::TokenVocabulary,
}

impl TrainOutcome {
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_model(&self.model, &self.tokens)
    }
}

pub fn model_config(config: &TrainConfig, dataset: &DatasetBundle, num_clusters: Option<usize>, k_clusters: Option<usize>) -> ModelConfig {
    let mut encoder = config.encoder.clone();
    encoder.vocab_size = dataset.tokens.len();
    let encoder = encoder.resolved();
    let h = encoder.hidden_dim;
    ModelConfig {
        encoder,
        num_labels: dataset.num_labels(),
        d_feat: config.d_feat.unwrap_or(h),
        d_hidden: config.d_hidden.unwrap_or(h),
        dropout_rate: config.dropout_rate,
        softmax_in_classifier: config.softmax_in_classifier,
        loss_reduction: config.loss_reduction,
        num_clusters,
        k_clusters,
    }
}

/// Rankings for `texts`, computed `test_batch` samples at a time.
pub fn predict_batched(model: &GudnModel, texts: &[Vec<TokenId>], top_k: usize, test_batch: usize) -> Result<Vec<Vec<LabelId>>> {
    let mut out = Vec::with_capacity(texts.len());
    for chunk in texts.chunks(test_batch.max(1)) {
        out.extend(model.predict(chunk, top_k)?.into_iter().map(|r| r.labels));
    }
    Ok(out)
}

fn heldout_p1(model: &GudnModel, samples: &[&Sample], test_batch: usize) -> Result<f64> {
    let texts: Vec<Vec<TokenId>> = samples.iter().map(|s| s.text_tokens.clone()).collect();
    let ranked = predict_batched(model, &texts, 1, test_batch)?;
    let mut total = 0.0;
    for (r, s) in ranked.iter().zip(samples) {
        total += precision_at_k(r, &s.positive_labels, 1)?;
    }
    Ok(total / samples.len() as f64)
}

/// Metrics of `model` on the test split of `dataset`.
pub fn evaluate_model(model: &GudnModel, dataset: &DatasetBundle, config: &TrainConfig) -> Result<MetricsReport> {
    let texts: Vec<Vec<TokenId>> = dataset.test.iter().map(|s| s.text_tokens.clone()).collect();
    let ranked = predict_batched(model, &texts, 5, config.test_batch)?;
    evaluate_samples(&ranked, &dataset.test, dataset, &config.eval_options())
}

/// Sets the label-output biases to the log-odds of each label's training
/// frequency, so the first steps do not push every logit down at once.
pub fn init_prior_biases(model: &mut GudnModel, dataset: &DatasetBundle) -> Result<()> {
    let l = dataset.num_labels();
    let mut counts = vec![0usize; l];
    for s in &dataset.train {
        for &p in &s.positive_labels {
            counts[p] += 1;
        }
    }
    let n = dataset.train.len() as f64;
    let bias: Vec<f64> = counts
        .iter()
        .map(|&c| {
            let q = ((c as f64 + 0.5) / (n + 1.0)).clamp(1e-4, 1.0 - 1e-4);
            (q / (1.0 - q)).ln()
        })
        .collect();
    let bias = crate::tensor::Matrix::from_vec(1, l, bias);
    model.set_param("classifier.label_head.bias", bias.clone())?;
    if model.params().by_name("guide.link_head.bias").is_some() {
        model.set_param("guide.link_head.bias", bias)?;
    }
    Ok(())
}

/// Runs one training job: seeded shuffling, reinforced label inputs, both
/// encoder passes per batch, one Adam step per batch, best-by-held-out-P@1
/// parameter selection, and a final test evaluation.
pub fn train(config: &TrainConfig, dataset: &DatasetBundle) -> Result<TrainOutcome> {
    config.validate()?;
    let retokenized;
    let dataset = if dataset.max_input_len == config.encoder.max_input_len {
        dataset
    } else {
        retokenized = dataset.retokenize(config.encoder.max_input_len)?;
        &retokenized
    };
    if dataset.train.is_empty() {
        return Err(crate::error::data_err("training split is empty"));
    }
    let l = dataset.num_labels();
    let sampling = config.negative_sampling.unwrap_or(l > AUTO_SAMPLING_THRESHOLD);
    let (clusters, num_clusters, k_clusters) = if sampling {
        let c = config.c_target.unwrap_or_else(|| default_num_clusters(l));
        let k = config.k_clusters.unwrap_or_else(|| default_k_clusters(c));
        let index = build_clusters(&label_bow(dataset), c, config.seed)?;
        (Some(index), Some(c), Some(k))
    } else {
        (None, None, None)
    };
    let mut model = GudnModel::new(model_config(config, dataset, num_clusters, k_clusters), clusters, config.seed)?;
    let max_len = model.config().encoder.max_input_len;
    if config.prior_bias_init {
        init_prior_biases(&mut model, dataset)?;
    }

    let mut rng = ModelRng::seed_from_u64(config.seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
    let mut order: Vec<usize> = (0..dataset.train.len()).collect();
    order.shuffle(&mut rng);
    let n_heldout = (config.heldout_fraction * order.len() as f64).floor() as usize;
    let heldout: Vec<&Sample> = order[..n_heldout].iter().map(|&i| &dataset.train[i]).collect();
    let mut train_idx: Vec<usize> = order[n_heldout..].to_vec();
    train_idx.sort_unstable();

    let adam_cfg = AdamConfig {
        lr: config.lr,
        ..AdamConfig::default()
    };
    let mut adam = Adam::new(adam_cfg, model.params());
    let mut record = RunRecord {
        config: config.clone(),
        choices: ImplementationChoices {
            optimizer: adam_cfg,
            heldout_fraction: config.heldout_fraction,
            heldout_size: n_heldout,
            negative_sampling: sampling,
            num_clusters,
            k_clusters,
        },
        epochs: Vec::new(),
        steps: Vec::new(),
        encoder_passes: 0,
        best_epoch: None,
        final_metrics: None,
        checkpoint_path: None,
    };
    let mut best: Option<(f64, crate::params::ParamStore)> = None;

    for epoch in 0..config.epochs {
        let start = Instant::now();
        train_idx.shuffle(&mut rng);
        let mut epoch_steps = Vec::new();
        for (b, chunk) in train_idx.chunks(config.train_batch).enumerate() {
            let samples: Vec<&Sample> = chunk.iter().map(|&i| &dataset.train[i]).collect();
            let label_tokens = if config.mode.needs_label_stream() {
                let mut seqs = Vec::with_capacity(samples.len());
                for s in &samples {
                    let groups = dataset.label_groups_of(s);
                    seqs.push(reinforce(config.reinforce_mode, &groups, max_len, &mut rng)?.ids);
                }
                Some(seqs)
            } else {
                None
            };
            let batch = Batch::new(
                samples.iter().map(|s| s.text_tokens.clone()).collect(),
                label_tokens,
                samples.iter().map(|s| s.positive_labels.clone()).collect(),
                config.mode,
            )?;
            let (loss, grads, passes) = model.loss_and_grads(&batch, config.mode, Some(&mut rng))?;
            if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(GudnError::Divergence {
                    epoch,
                    batch: b,
                    detail: format!("non-finite loss or gradient ({loss:?})"),
                });
            }
            adam.step(model.params_mut(), &grads);
            record.encoder_passes += passes;
            record.steps.push(loss);
            epoch_steps.push(loss);
        }
        let heldout_p1 = if heldout.is_empty() {
            None
        } else {
            let p1 = heldout_p1(&model, &heldout, config.test_batch)?;
            if best.as_ref().is_none_or(|(b, _)| p1 >= *b) {
                best = Some((p1, model.params().clone()));
                record.best_epoch = Some(epoch);
            }
            Some(p1)
        };
        let loss = LossBreakdown::mean(&epoch_steps);
        log::info!(
            "epoch {epoch}: feature {:.4} link {:.4} class {:.4} overall {:.4} heldout P@1 {:?}",
            loss.l_feature,
            loss.l_link,
            loss.l_class,
            loss.l_overall,
            heldout_p1
        );
        record.epochs.push(EpochLog {
            epoch,
            loss,
            heldout_p1,
            seconds: start.elapsed().as_secs_f64(),
        });
    }
    if let Some((_, params)) = best {
        *model.params_mut() = params;
    }
    if !dataset.test.is_empty() {
        record.final_metrics = Some(evaluate_model(&model, dataset, config)?);
    }
    Ok(TrainOutcome {
        record,
        model,
        tokens: dataset.tokens.clone(),
    })
}

/// Trains and writes `checkpoint.json` and `run.json` into `out_dir`.
pub fn train_to_dir(config: &TrainConfig, dataset: &DatasetBundle, out_dir: &std::path::Path) -> Result<TrainOutcome> {
    let mut outcome = train(config, dataset)?;
    std::fs::create_dir_all(out_dir)?;
    let ckpt_path = out_dir.join("checkpoint.json");
    outcome.checkpoint().save(&ckpt_path)?;
    outcome.record.checkpoint_path = Some(ckpt_path);
    std::fs::write(out_dir.join("run.json"), serde_json::to_vec_pretty(&outcome.record)?)?;
    Ok(outcome)
}

/// Test-split metrics of a saved model. Test texts are re-encoded with the
/// checkpoint's own vocabulary and input length.
pub fn evaluate_checkpoint(ckpt: &Checkpoint, dataset: &DatasetBundle, config: &TrainConfig) -> Result<MetricsReport> {
    if ckpt.model.num_labels != dataset.num_labels() {
        return Err(crate::error::data_err(format!(
            "checkpoint has {} labels, dataset has {}",
            ckpt.model.num_labels,
            dataset.num_labels()
        )));
    }
    let max_len = ckpt.model.encoder.max_input_len;
    let tokens = ckpt.tokens.clone();
    let model = ckpt.clone().into_model()?;
    let mut texts = Vec::with_capacity(dataset.test.len());
    for s in &dataset.test {
        texts.push(crate::corpus::tokenize(&s.text, &tokens, max_len)?.ids);
    }
    let ranked = predict_batched(&model, &texts, 5, config.test_batch)?;
    evaluate_samples(&ranked, &dataset.test, dataset, &config.eval_options())
}
