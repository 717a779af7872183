#![allow(dead_code)]

pub mod chains;
pub mod gradcheck;
