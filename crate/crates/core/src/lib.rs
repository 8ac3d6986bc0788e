//! Attribute-based access control over a hash-chained, tamper-evident
//! ledger.
//!
//! The crate is organized around the transaction lifecycle: client requests
//! are simulated against versioned world state ([`state`]), endorsed by
//! multiple organizations ([`crypto`]), totally ordered into blocks
//! ([`ordering`]), then validated and committed to an append-only block
//! chain ([`ledger`]). Access decisions themselves are pure functions in
//! [`policy`]; [`service`] wires the pieces into a node with an off-chain
//! gateway, and [`bench`] drives a node under open-loop load.
//!
//! Serialization is split between [`canonical`] (deterministic JSON for
//! anything that gets hashed or endorsed) and [`codec`] (the binary block
//! format).

pub mod bench;
pub mod canonical;
pub mod codec;
pub mod crypto;
pub mod ledger;
pub mod ordering;
pub mod policy;
pub mod service;
pub mod state;
