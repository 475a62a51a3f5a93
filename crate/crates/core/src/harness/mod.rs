//! Model and calibration generation, file I/O, the end-to-end pipeline and
//! report emission.

pub mod generate;
pub mod io;
pub mod memory;
pub mod pipeline;
pub mod report;
