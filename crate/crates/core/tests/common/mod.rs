#![allow(dead_code)]

use std::collections::BTreeSet;
use std::sync::Arc;

use steer_core::couplings::CouplingFamily;
use steer_core::qsm::{EdgeReadout, SteeringMultigraph};
use steer_core::steering::{Coupling, CouplingParams, FamilyTag};
use steer_core::{CMatrix, CVector, LocalOperator, PureState, QuditRegister, C64};

pub fn c(re: f64) -> C64 { C64::new(re, 0.0) }

pub fn ket(n: usize, i: usize) -> CVector {
    let mut v = CVector::zeros(n);
    v[i] = c(1.0);
    v
}

pub fn outer(a: &CVector, b: &CVector) -> CMatrix { a * b.adjoint() }

/// `|to><from|` in dimension `n`.
pub fn tr(n: usize, to: usize, from: usize) -> CMatrix { outer(&ket(n, to), &ket(n, from)) }

pub fn cl_set(g: &SteeringMultigraph, k: usize) -> BTreeSet<(usize, usize)> {
    g.edges_of(k, EdgeReadout::Cl).map(|e| (e.from, e.to)).collect()
}

pub fn ncl_offdiag(g: &SteeringMultigraph, k: usize) -> BTreeSet<(usize, usize)> {
    g.edges_of(k, EdgeReadout::Ncl).filter(|e| e.from != e.to).map(|e| (e.from, e.to)).collect()
}

/// Fixed family on a single qudit of dimension `n` from named full matrices.
pub fn qudit_family(ops: &[(&str, CMatrix)], target: usize) -> CouplingFamily {
    let n = ops[0].1.nrows();
    let reg = QuditRegister::new(vec![n]).unwrap();
    let members = ops
        .iter()
        .map(|(id, m)| {
            let op = LocalOperator::new(vec![0], m.clone()).unwrap();
            Coupling::new(*id, op, FamilyTag::Custom, CouplingParams::None, &reg).unwrap()
        })
        .collect();
    let t = PureState::basis(reg.clone(), target).unwrap();
    CouplingFamily::fixed(reg, t, FamilyTag::Custom, members)
}

pub fn arc(f: CouplingFamily) -> Arc<CouplingFamily> { Arc::new(f) }

pub fn mean(xs: &[f64]) -> f64 { xs.iter().sum::<f64>() / xs.len() as f64 }
