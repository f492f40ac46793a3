pub mod adaptor_sig;
pub mod amm;
pub mod chain_sim;
pub mod compliance;
pub mod group;
pub mod market_ops;
pub mod metrics;
pub mod optim;
pub mod scenario;
pub mod swap_engine;
pub mod vault;
