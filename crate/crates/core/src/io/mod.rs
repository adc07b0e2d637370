pub mod dataset;
pub mod pfm;
pub mod state;
