//! Fixtures shared by the criterion benches in `benches/`.

use std::sync::Arc;

use steer_core::couplings::{aklt_tensor, mps_family, w_state_family};
use steer_core::{CouplingFamily, ParentSampling, PureState, QuantumState};

/// AKLT family on `n` sites with the default sampling.
pub fn aklt(n: usize) -> Arc<CouplingFamily> {
    Arc::new(mps_family(&aklt_tensor(), n, ParentSampling::default()).expect("AKLT family builds"))
}

pub fn w() -> Arc<CouplingFamily> { Arc::new(w_state_family().expect("W family builds")) }

/// Uniform level-0 product state on the family's register.
pub fn level_zero(f: &CouplingFamily) -> QuantumState {
    PureState::uniform_level(f.register.clone(), 0).expect("level 0 exists").into()
}
