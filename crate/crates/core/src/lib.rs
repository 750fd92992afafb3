pub mod adaptation;
pub mod checkpoint;
pub mod config;
pub mod dataset_io;
pub mod desk;
pub mod detector;
pub mod discriminator;
pub mod embedding;
pub mod error;
pub mod evaluation;
pub mod generator;
pub mod label_synthesis;
pub mod ops;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod rng;
pub mod shapes;
