#![allow(clippy::neg_cmp_op_on_partial_ord)]
//! Simulator and algorithm library for a segment-level pooled prefix cache
//! serving LLM requests across a cluster of instances.

pub mod attention;
pub mod cli;
pub mod config;
pub mod cost;
pub mod dispatch;
pub mod metrics;
pub mod pool;
pub mod scheduler;
pub mod sim;
pub mod workload;
