//! Numeric building blocks: parameter stores, layers, loss, optimizer.

pub mod layers;
pub mod loss;
pub mod params;
pub mod sgd;
