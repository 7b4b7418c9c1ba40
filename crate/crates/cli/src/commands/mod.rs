pub mod bench;
pub mod diagnose;
pub mod passkey;
pub mod theory;
pub mod train;

pub use bench::{cmd_bench, BenchRow, BenchSummary};
pub use diagnose::{cmd_diagnose, heldout_windows, weight_stack, DiagnoseSummary};
pub use passkey::{cmd_passkey, PasskeySummary};
pub use theory::{cmd_verify_theory, TheorySummary};
pub use train::{cmd_train, TrainSummary};
