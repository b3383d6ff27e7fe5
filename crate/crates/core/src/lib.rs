//! An executable workbench for symbolic (Dolev-Yao) protocol analysis:
//! a term algebra with sealing and Diffie-Hellman exponentiation, an intruder
//! deduction engine, a deterministic cooperative simulator with an
//! attacker-mediated network, executable authentication protocols (NS, NSL,
//! ISO), a layered secure stack (connections, RPC, key-value store), and the
//! security games that exercise them.

pub mod deduct;
pub mod game;
pub mod proto;
pub mod runtime;
pub mod stack;
pub mod term;
