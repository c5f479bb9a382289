//! Few-shot self-training of self-rationalizing sequence-to-sequence models.

pub mod backend;
pub mod corpus;
pub mod dualteacher;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod losses;
pub mod selftrain;
pub mod synthetic;
pub mod text;

pub use backend::{Generation, ModelFactory, Seq2Seq, StepDistribution, TrainRecord};
pub use corpus::{DatasetSplit, Example, PromptFormat, Role};
pub use dualteacher::{run_dual_teacher, DualTeacherConfig, DualTeacherResult};
pub use error::{Error, Result};
pub use eval::MetricReport;
pub use experiment::{ExperimentConfig, ExperimentReport, Mode};
pub use losses::LossConfig;
pub use selftrain::{PseudoLabeledExample, SelfTrainConfig};
pub use synthetic::{SyntheticTask, SyntheticTaskSpec};
