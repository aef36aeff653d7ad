//! Checks shared by the focused test files and the acceptance suite.

#![allow(dead_code)]

pub mod affine;
pub mod gradcheck;
pub mod oracles;
