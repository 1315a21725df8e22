pub mod diffgraph;
pub mod encoder;
pub mod eval;
pub mod field;
pub mod geometry;
pub mod image;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod renderer;
pub mod scenes;
pub mod trainer;
pub mod verify;
