#![allow(dead_code)]

pub mod dag;
pub mod docgen;
pub mod plan_oracle;
