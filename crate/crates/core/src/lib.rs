//! Measurement-driven steering of small qudit registers toward prescribed
//! pure targets by repeated weak system-detector interactions, with passive,
//! greedy and state-machine-planned feedback policies.

pub mod couplings;
pub mod harness;
pub mod hilbert;
pub mod policies;
pub mod qsm;
pub mod rng;
pub mod steering;

pub use num_complex::Complex64 as C64;

pub use couplings::{CouplingError, CouplingFamily, GaussianKind, MpsTensor, ParentHamiltonian, ParentSampling};
pub use hilbert::{
    infidelity, reduced_density_matrix, uhlmann_fidelity, CMatrix, CVector, HilbertError, LocalOperator, MixedState,
    PureState, QuantumState, QuditRegister,
};
pub use policies::{CostFunction, Policy, PolicyDecision, PolicyError};
pub use qsm::{Advance, Basis, CoarseQSM, QsmError, RoutePlan, SteeringMultigraph};
pub use rng::{rng_from_seed, trajectory_seed, TrajRng};
pub use steering::{
    run_protocol, Backend, Coupling, Readout, RecordMode, ProtocolOptions, SteeringError, TrajectoryRecord,
};
pub use harness::{
    emit_outputs, run_experiment, run_paired, speedup, ExperimentConfig, ExperimentResult, HarnessError, PolicySpec,
    TargetSpec,
};
