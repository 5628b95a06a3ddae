pub mod atlas;
pub mod cli;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod nnet;
pub mod phantom;
pub mod trainer;
pub mod transform;
pub mod volume;
