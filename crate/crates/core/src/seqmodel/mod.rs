pub mod dataset;
pub mod losses;
pub mod model;
pub mod negatives;
pub mod train;
pub mod transformer;
