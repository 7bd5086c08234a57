pub mod calibration;
pub mod geometry;
pub mod localizers;
pub mod metrics;
pub mod raster;
pub mod sampler;
pub mod synth;
