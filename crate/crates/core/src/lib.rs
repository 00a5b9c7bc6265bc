pub mod domain;
pub mod election;
pub mod harness;
pub mod mapreduce;
pub mod runtime;
pub mod simgen;
pub mod store;
pub mod transport;
