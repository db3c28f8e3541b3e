pub mod paillier;
pub mod wire;
pub mod filters;
pub mod psi;
pub mod data;
pub mod nn;
pub mod secure;
pub mod transport;
pub mod ps;
pub mod config;
pub mod orchestrator;
