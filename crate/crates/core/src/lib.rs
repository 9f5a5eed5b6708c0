#![no_std]
extern crate alloc;

pub mod encoder;
pub mod episode;
pub mod eval;
pub mod math;
pub mod nn;
pub mod iql;
pub mod primitive;
pub mod rng;
pub mod terrain;
