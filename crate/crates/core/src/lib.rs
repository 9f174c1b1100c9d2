//! Failure prediction for MRI Head/Neck coils from sequences of image-derived
//! telemetry features.

pub mod augment;
pub mod cli;
pub mod dataio;
pub mod harness;
pub mod layers;
pub mod models;
pub mod numerics;
pub mod seed;
