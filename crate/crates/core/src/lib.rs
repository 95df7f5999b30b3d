//! Real-time document corner localization.

pub mod geometry;
pub mod loss;
pub mod model;
pub mod data;
pub mod numerics;
pub mod train;
pub mod eval;
