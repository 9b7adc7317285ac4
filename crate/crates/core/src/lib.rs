pub mod corpus;
pub mod geometry;
pub mod model;
pub mod rng;
pub mod taxonomy;
pub mod tensor;
pub mod eval;
pub mod trainer;
pub mod detect;
pub mod cli;
