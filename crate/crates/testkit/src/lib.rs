//! Test support shared by the workspace's test suites: naive reference
//! implementations and a finite-difference gradient checker.

pub mod gradcheck;
pub mod oracles;
