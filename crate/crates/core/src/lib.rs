pub mod aggregation;
pub mod analysis;
pub mod cli;
pub mod config;
pub mod data;
pub mod encoder;
pub mod gradcheck;
pub mod modality;
pub mod model;
pub mod nn;
pub mod rng;
pub mod tensor;
pub mod tokenization;
pub mod training;
