//! Pre-training data detection for causal language models.
//!
//! The crate bundles everything needed to run a membership-inference study on a
//! micro causal transformer trained from scratch:
//!
//! * [`corpus`]: JSONL datasets, prompt templates, member/non-member splits and
//!   synthesis prompts for building probe training sets.
//! * [`lm`]: a byte-level decoder-only transformer with hand-written backward
//!   pass, Adam training, member injection and activation extraction.
//! * [`probe`]: an L2-regularised logistic-regression probe over activations.
//! * [`attacks`]: the probe attack and six baselines behind one [`attacks::Attack`]
//!   trait, looked up by name in an [`attacks::AttackRegistry`].
//! * [`eval`]: AUC, ROC curves, TPR at fixed FPR, permutation tests and reports.
//! * [`experiment`]: the configuration file and the end-to-end pipeline used by
//!   the `memprobe` binary.

pub mod attacks;
pub mod corpus;
pub mod eval;
pub mod experiment;
pub mod lm;
pub mod probe;

mod util;

pub use attacks::{AttackKind, AttackRegistry, AttackScore};
pub use corpus::{Label, LabeledDataset, PromptTemplate, Sample};
pub use eval::RocResult;
pub use lm::{ModelConfig, ModelState, TrainHyper};
pub use probe::{ProbeHyper, ProbeWeights};
pub use util::derive_seed;

/// Crate version recorded in every output sidecar.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
