pub mod backbone;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod imageio;
pub mod inference;
pub mod model;
pub mod nn;
pub mod optim;
pub mod text;
pub mod train;
