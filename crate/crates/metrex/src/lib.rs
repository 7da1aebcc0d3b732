//! IO, file formats and orchestration for the metro expansion planner:
//! the run-configuration format, city files, plans with GeoJSON/SVG
//! export, parameter checkpoints and the training loop. The algorithms
//! themselves live in `metrex-core`.

pub mod checkpoint;
pub mod cityfile;
pub mod config;
pub mod error;
pub mod plan;
pub mod train;
