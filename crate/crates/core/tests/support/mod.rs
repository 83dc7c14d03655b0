//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

pub mod geometry;
pub mod gradients;
pub mod linker;
pub mod metrics;
