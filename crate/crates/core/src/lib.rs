//! Hypersampled MPC: prediction discretization decoupled from the sampling
//! rate, with the solvers and closed-loop harness needed to verify it.

pub mod dynamics;
pub mod models;
pub mod ocp;
pub mod qp;
pub mod sets;
pub mod simulator;
pub mod terminal;
