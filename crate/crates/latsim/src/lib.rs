pub mod analysis;
pub mod atomsim;
pub mod fit;
pub mod geometry;
pub mod mat2;
pub mod sequencer;
pub mod stabilization;
