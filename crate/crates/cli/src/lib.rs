//! Command line and HTTP service around the `namedis` library.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod artifacts;
pub mod commands;
pub mod config;
pub mod error;
pub mod service;
