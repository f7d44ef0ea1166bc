pub mod ablation;
pub mod augment;
pub mod config;
pub mod ctc;
pub mod metrics;
pub mod model;
pub mod pose;
pub mod rng;
pub mod tensor;
pub mod training;
