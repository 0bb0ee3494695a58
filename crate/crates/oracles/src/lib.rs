//! Randomized fixtures and independent reference computations shared by the
//! gradient, property and acceptance suites.

pub mod graphs;
pub mod oracles;
