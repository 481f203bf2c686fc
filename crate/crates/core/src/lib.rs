pub mod autodiff;
pub mod dental;
pub mod geometry;
pub mod heatmap;
pub mod network;
pub mod synthetic;
pub mod evaluation;
pub mod training;
pub mod io;
pub mod pipeline;
