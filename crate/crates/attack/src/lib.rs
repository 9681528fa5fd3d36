//! Page-table tampering attack against the simulated GPU memory subsystem,
//! and the host escalation it enables.
//!
//! The attack runs as an ordinary guest session: it allocates, touches,
//! reads, writes and hammers its own memory, and observes only latencies,
//! data and the public device description.

pub mod engine;
pub mod privesc;
pub mod runner;

pub use engine::{
    escalate_to_host, tag_of, untag, ArbitraryRW, Attack, AttackConfig, AttackError, AttackState, HostDma, Phase,
    ScanOutcome, Target, Transcript,
};
pub use privesc::{escalate, PrivescConfig, PrivescOutcome, PrivescReport};
