pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod conformity;
pub mod dataio;
pub mod error;
pub mod evaluation;
pub mod graph_encoder;
pub mod graphs;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod params;
pub mod reportgen;
pub mod seq_encoder;
pub mod sparse;
pub mod tape;
pub mod theory;
pub mod trainer;

pub use error::{Error, Result};
