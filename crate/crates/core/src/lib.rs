pub mod attack;
pub mod cli;
pub mod eval;
pub mod feasibility;
pub mod io;
pub mod metrics;
pub mod network;
pub mod tensor;
