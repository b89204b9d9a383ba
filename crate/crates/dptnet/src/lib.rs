//! Deterministic discrete-event SDN simulation with per-packet data-plane
//! timestamps.
//!
//! Every packet entering the simulated domain gets a 64-bit NTP-format
//! timestamp header at the ingress switch, carries it through ternary
//! match-action tables that can match masked timestamp bits, and loses it at
//! the egress switch. On top of that sit a time-range-to-ternary-entry
//! compiler and three controller applications: block-based loss/delay
//! telemetry, consistent configuration updates (tag-based and
//! timestamp-threshold), and time-division load balancing.

pub mod config;
pub mod controller;
pub mod experiment;
pub mod pipeline;
pub mod report;
pub mod simnet;
pub mod timebase;
pub mod trange;
