//! Cycle-level model of a twelve-core RISC-V cluster with a hybrid modular
//! redundancy unit: lockstep checking and voting, split-lock
//! reconfiguration, fault recovery, fault injection and throughput models.

pub mod analytics;
pub mod asm;
pub mod cluster;
pub mod config;
pub mod cpu;
pub mod faults;
pub mod hmr;
pub mod interconnect;
pub mod recovery;
pub mod report;
pub mod scenario;
pub mod splitlock;
pub mod workload;
