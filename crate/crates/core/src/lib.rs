//! Parameter extraction for softmax attention regressors from black-box
//! value queries.

pub mod error;
pub mod exact;
pub mod ffn;
pub mod lowrank;
pub mod model;
pub mod multihead;
pub mod oracle;
pub mod report;
pub mod robust;
pub mod sensing;
pub mod transformer;

pub use error::{Error, Result};
pub use model::{
    attention_forward, attention_scores, multihead_forward, softmax, transformer_forward,
    AttentionParams, Model, ModelKind, MultiHeadParams, SequenceInput, TransformerParams,
};
pub use oracle::{NoisePolicy, OracleMode, OracleSession, ValueOracle};
pub use report::RecoveryReport;

pub use exact::{recover, ExactConfig, ProbeConfig, ProbeScheme};
pub use ffn::{FfnConfig, ReferenceFfnLearner};
pub use lowrank::{recover_lowrank, LowRankConfig};
pub use multihead::{build_equivalent_pair, functional_equality_test, parameter_distance, EqualityReport};
pub use robust::{recover_robust, tolerance_schedule, RobustConfig, ToleranceSchedule};
pub use sensing::{solve_nuclear_min, Preconditioner, RopSystem, SolverConfig, SolverDiagnostics};
pub use transformer::{
    antisym_oracle, recover_transformer, FfnLearner, FfnLearnerResult, OneRowOracle,
    ScalarFunctionOracle, TransformerRecovery,
};
