pub mod config;
pub mod data;
pub mod eval;
pub mod fed;
pub mod nn;
pub mod params;
pub mod rng;
pub mod runner;
pub mod ssl;
