pub mod copula;
pub mod ecdf;
pub mod facies;
pub mod reduced;
pub mod rng;
pub mod sampling;
pub mod upscaling;
