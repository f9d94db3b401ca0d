//! GUDN: extreme multi-label text classification with a guide network.
//!
//! A shared transformer encoder reads the text of a sample and, during
//! training only, a token sequence built from its labels. The guide network
//! pulls the two feature vectors together and maps label features onto the
//! true label vector. A ranking classifier on the text features produces the
//! predictions.
//!
//! ```no_run
//! use gudn_core::{gen_synthetic, harness, SynthConfig, TrainConfig};
//!
//! let data = gen_synthetic(&SynthConfig::default()).unwrap();
//! let mut cfg = TrainConfig::default();
//! cfg.set("max_input_len=32").unwrap();
//! let outcome = harness::train(&cfg, &data).unwrap();
//! println!("P@1 = {}", outcome.record.final_metrics.unwrap().p1());
//! ```

pub mod autograd;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod params;
pub mod reinforce;
pub mod sampling;
pub mod tensor;

pub use corpus::{
    gen_synthetic, load_jsonl, tokenize, DatasetBundle, DatasetStats, LabelId, LabelVocabulary, RawSample, Sample, SynthConfig,
    TokenId, TokenVocabulary, CLS, PAD, UNK,
};
pub use encoder::{Encoder, EncoderConfig, LayerwiseCls};
pub use error::{GudnError, Result};
pub use harness::{Checkpoint, RunRecord, TrainConfig};
pub use metrics::{evaluate, EvalOptions, MetricsReport, PropensityVector};
pub use model::{AblationMode, Batch, GudnModel, LossBreakdown, LossReduction, ModelConfig, Ranking};
pub use params::ParamStore;
pub use reinforce::{reinforce, ReinforceMode};
pub use sampling::{build_clusters, label_bow, select_candidates, two_stage_predict, CandidateSet, ClusterIndex};
pub use tensor::Matrix;
