//! Group-relative advantage estimation and calibration for multi-turn
//! search-agent rollouts, with collapse diagnostics and a small synthetic
//! training environment.

pub mod analysis;
pub mod annotated;
pub mod calibration;
pub mod cli;
pub mod error;
pub mod grpo;
pub mod rewards;
pub mod simulator;
pub mod trace;

pub use calibration::{calibrate_group, CalibratedGroup, CalibrationConfig, SilverDocSet};
pub use error::{Error, Result, ValidationError};
pub use grpo::AdvantageAssignment;
pub use rewards::RewardBreakdown;
pub use trace::{DocumentId, RolloutGroup, RolloutTrace, Step, StepKind};
