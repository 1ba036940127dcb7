pub mod agent;
pub mod harness;
pub mod netenv;
pub mod nn;
pub mod replay;
pub mod rng;
pub mod stats;
pub mod tensor;
