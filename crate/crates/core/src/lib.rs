pub mod embedding;
pub mod eval;
pub mod extraction;
pub mod forgetting;
pub mod gateway;
pub mod kt;
pub mod model;
pub mod retrieval;
pub mod tutoring;
