//! Boundary-scoped consent for agent tool calls.

pub mod lattice;
pub mod policy;
pub mod taint;
pub mod abstraction;
pub mod refinement;
pub mod dsl;
pub mod authorizer;
pub mod replay;
pub mod wire;
