//! Distributed orchestration-resource assignment: problem model, exact
//! oracle, the voting protocol, private embeddings, a network simulator and
//! an experiment harness.

pub mod embedding;
pub mod harness;
pub mod model;
pub mod oracle;
pub mod protocol;
pub mod simnet;
