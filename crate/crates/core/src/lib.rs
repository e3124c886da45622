//! Compliance-error compensation for parallel manipulators built from
//! elastic serial chains.

pub mod assembly;
pub mod chain;
pub mod compensator;
pub mod config;
pub mod load;
pub mod report;
pub mod se3;
pub mod trajectory;
