pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod params;
pub mod stem;
pub mod tensor;
pub mod tiling;
pub mod train;
