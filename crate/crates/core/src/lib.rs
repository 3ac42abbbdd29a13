pub mod cli;
pub mod corpus;
pub mod encoder;
pub mod eval;
pub mod gradsuite;
pub mod model;
pub mod numerics;
pub mod relhead;
pub mod synthetic;
pub mod training;
