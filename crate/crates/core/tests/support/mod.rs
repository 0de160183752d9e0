#![allow(dead_code)]

pub mod dual_rubric;
pub mod figures;
pub mod message;
pub mod oracles;
