pub mod config;
pub mod eval;
pub mod imitation;
pub mod model;
pub mod sim;
pub mod tensor;
pub mod train;
