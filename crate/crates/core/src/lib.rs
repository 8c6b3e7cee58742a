//! Discrete-event simulation of ETL process chains.
//!
//! A chain is a DAG of data pools connected by ETL pipelines. Records move
//! through the extract, transform and load phases of each pipeline; the
//! time a record spends in a phase is random around a mean fixed by the
//! phase's thread allocation through the flow-balance relation
//! `threads = throughput(threads) * mean_time(threads)`, where throughput
//! follows a bounded, non-decreasing curve.
//!
//! * [`topology`]: pools, edges, and the expanded phase graph.
//! * [`throughput`]: mean-throughput curves and flow balance.
//! * [`stochastic`]: processing-time models and seeded random streams.
//! * [`engine`]: the tick-by-tick simulation and window metrics.
//! * [`calibration`]: fitting curves and distributions to observed data.
//! * [`scenario`]: scenario, metrics and calibration file formats.
//! * [`control`]: the line-delimited control protocol and server.
//! * [`cli`]: the `etlsim` command line.

pub mod calibration;
pub mod cli;
pub mod control;
pub mod engine;
pub mod scenario;
pub mod stochastic;
pub mod throughput;
pub mod topology;
