//! Oracles shared by several test targets; each target uses a subset.
#![allow(dead_code)]

pub mod naive_metrics;
pub mod reference_decoder;
