//! Communication analysis for direct (7-loop) CNN convolution layers.
//!
//! The crate models a convolution layer as the classic seven-nested-loop
//! update stream and provides, on top of that model:
//!
//! * exact mixed-precision communication lower bounds for serial and
//!   distributed machines ([`bounds`]),
//! * optimal Hölder–Brascamp–Lieb exponents for arbitrary integer
//!   array-access maps, computed over the kernel subspace lattice with an
//!   exact rational LP ([`hbl`]),
//! * communication-minimizing tilings from log-space linear programs,
//!   including a two-buffer (scratchpad/accumulator) variant ([`tiler`]),
//! * analytical traffic models for naive, blocked, and im2col schedules
//!   plus CSV sweeps ([`volume`]),
//! * a word-accurate LRU cache simulator and a parallel footprint
//!   accountant that act as brute-force oracles ([`sim`]).
//!
//! All bound constants are kept as exact rationals; irrational terms
//! (square/cube roots, binary logs) are approximated to 2^-64 relative
//! error and rounded toward the safe side, so a reported lower bound is
//! never an overstatement.

pub mod bounds;
pub mod hbl;
pub mod layer;
pub mod machine;
pub mod ratmath;
pub mod sim;
pub mod simplex;
pub mod tiler;
pub mod volume;

pub use layer::{ArrayId, ConvLayer, DerivedSizes, LayerViolation, PrecisionTriple};
pub use machine::{ParallelMachine, SerialMachine, TwoBufferMachine};
