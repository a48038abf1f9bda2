//! Agentic tool-use rollouts through a supervised Python sandbox, step-level
//! tool rewards judged on tool outputs, group-baseline clipped policy
//! optimization on a toy policy, and action-level faithfulness evaluation.

pub mod answer;
pub mod config;
pub mod curation;
pub mod faithfulness;
pub mod http;
pub mod judge;
pub mod reward;
pub mod rollout;
pub mod sandbox;
pub mod tapo;
pub mod toy;
pub mod trajectory;

pub use config::{ConfigError, RunConfig};
pub use curation::{CurationOutput, DatasetRecord, StageReport};
pub use faithfulness::{AnswerMap, FaithfulnessRecord, FaithfulnessReport};
pub use judge::{Judge, JudgeError, MockJudge, PromptId};
pub use reward::{RewardBreakdown, RewardWeights, TaskKind};
pub use rollout::{PolicyKind, RolloutConfig, RolloutOutcome, RolloutTask};
pub use sandbox::{ExecutionLimits, Outcome, Sandbox, SandboxConfig, SandboxResult};
pub use tapo::{TabularPolicy, TapoConfig, TapoError};
pub use toy::{ToyTask, ToyTrainConfig};
pub use trajectory::{Action, ActionKind, Observation, Terminal, Trajectory};
