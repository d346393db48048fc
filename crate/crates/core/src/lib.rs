//! Trajectory anomaly detection toolkit: a seeded lane-world simulator,
//! rule-based anomaly labels, LiDAR noise models, ranked reward learning,
//! prefix-expanded worst-case-terminus datasets and a small attention
//! classifier.

pub mod classifier;
pub mod dataset;
pub mod evaluation;
pub mod geometry;
pub mod labeler;
pub mod nn;
pub mod noise;
pub mod reward;
pub mod seed;
pub mod simulator;
pub mod trajectory;
