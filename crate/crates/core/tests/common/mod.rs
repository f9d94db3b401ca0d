#![allow(dead_code)]

use gudn_core::model::LossReduction;
use gudn_core::{AblationMode, EncoderConfig, ModelConfig, ReinforceMode, SynthConfig, TrainConfig};

/// 2 layers, H = 8, vocabulary 32, input length 8.
pub fn tiny_model_config(num_labels: usize) -> ModelConfig {
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
        d_feat: 8,
        d_hidden: 8,
        dropout_rate: 0.5,
        softmax_in_classifier: true,
        loss_reduction: LossReduction::Sum,
        num_clusters: None,
        k_clusters: None,
    }
}

/// Small encoder trained for a handful of epochs; enough for pipeline tests.
pub fn quick_train_config(seed: u64) -> TrainConfig {
    let mut c = TrainConfig::default();
    c.encoder.num_layers = 2;
    c.encoder.hidden_dim = 8;
    c.encoder.num_heads = 2;
    c.encoder.ffn_dim = 16;
    c.encoder.max_input_len = 16;
    c.epochs = 3;
    c.lr = 0.01;
    c.seed = seed;
    c
}

pub fn quick_synth(seed: u64) -> SynthConfig {
    SynthConfig {
        n_train: 60,
        n_test: 20,
        num_labels: 8,
        seed,
        max_input_len: 16,
        ..SynthConfig::default()
    }
}

/// The configuration frozen by the behavioural pilot.
pub fn behavioural_config(mode: AblationMode, reinforce_mode: ReinforceMode, seed: u64) -> TrainConfig {
    let mut c = TrainConfig::default();
    c.encoder.num_layers = 2;
    c.encoder.hidden_dim = 32;
    c.encoder.num_heads = 2;
    c.encoder.ffn_dim = 64;
    c.encoder.max_input_len = 32;
    c.epochs = 50;
    c.lr = 3e-3;
    c.dropout_rate = 0.1;
    c.softmax_in_classifier = false;
    c.mode = mode;
    c.reinforce_mode = reinforce_mode;
    c.seed = seed;
    c
}

/// L = 16, 200 train / 50 test, fully semantic label text.
pub fn behavioural_synth(seed: u64, signature_words: usize) -> SynthConfig {
    SynthConfig {
        num_labels: 16,
        n_train: 200,
        n_test: 50,
        semantic_strength: 1.0,
        noise_tokens: 10,
        signature_words,
        max_input_len: 32,
        seed,
        ..SynthConfig::default()
    }
}
