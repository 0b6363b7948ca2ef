//! Watermarking of weighted relational structures with bounded query
//! distortion, together with the automata, decomposition and logic machinery
//! the constructions rely on and brute-force oracles that check them.

pub mod automata;
pub mod decomp;
pub mod error;
pub mod harness;
pub mod logic;
pub mod pairs;
pub mod scheme_fo;
pub mod scheme_mso;
pub mod structures;

pub use error::{Error, Result};
