pub mod btd;
pub mod cli;
pub mod env;
pub mod error;
pub mod evolve;
pub mod experiments;
pub mod oracles;
pub mod pool;
pub mod ranking;
pub mod simenv;
pub mod types;
pub mod workflow;
