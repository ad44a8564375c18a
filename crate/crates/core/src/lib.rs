pub mod cohort;
pub mod experiment;
pub mod gin;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod rng;
pub mod tensor;
pub mod training;
