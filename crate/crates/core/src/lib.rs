pub mod bodymodel;
pub mod frames;
pub mod geometry;
pub mod metrics;
pub mod pipeline;
pub mod rigidfit;
pub mod stabilize;
pub mod synthgen;
