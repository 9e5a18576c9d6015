//! Simulator for staged, dependency-partitioned halo exchange on a multi-PE
//! PGAS machine.
//!
//! The crate has four layers:
//!
//! * [`dd`] — periodic spatial decomposition: grid construction, atom
//!   assignment, and per-pulse halo index maps with periodic shifts.
//! * [`pgas`] — a simulated partitioned-global-address-space runtime:
//!   symmetric buffers, one-sided put / put-with-signal, acquire/release
//!   signal waits, a seeded interleaving scheduler, and a weak-memory
//!   adversary for validating ordering discipline.
//! * [`exchange`] — the halo-exchange engines (serialized baseline and the
//!   fused coordinate/force exchanges) plus brute-force oracles.
//! * [`simtime`] — a discrete-event timing model computing
//!   computation/communication overlap metrics for both schedule variants.

pub mod dd;
pub mod exchange;
pub mod pgas;
pub mod simtime;
