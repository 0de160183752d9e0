#![allow(dead_code)]

pub mod fixture_batch;
pub mod run;
