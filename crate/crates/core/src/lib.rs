//! Branch-and-bound for pure integer programs with an embedded
//! conflict-learning CP search ("Rapid Learning") that runs at the root and at
//! selected tree nodes.

pub mod bench;
pub mod cli;
pub mod conflict;
pub mod cpsearch;
pub mod lp;
pub mod mipsearch;
pub mod model;
pub mod mps;
pub mod propagation;
pub mod rapid;
