pub mod data;
pub mod experiments;
pub mod model;
pub mod train;
