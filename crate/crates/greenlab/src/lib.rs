//! Numerical laboratory for Green functions, first-return kernels and local
//! limit exponents of symmetric finite-support random walks on free products
//! of lattice and finite factors.
//!
//! The pipeline, bottom up:
//!
//! * [`series`] — truncated power-series arithmetic, radius and exponent
//!   extrapolation, singularity-model fitting;
//! * [`group`] — normal forms, step measures and brute-force convolution
//!   oracles on the free product itself;
//! * [`lattice`] — exact factor return sequences, tilted moment generating
//!   functions and Green-function evaluation with local-CLT tail completion;
//! * [`excursion`] — the free-product excursion fixed-point system: Green
//!   series, spectral radius location, Green derivatives, first-return
//!   kernels;
//! * [`strip`] — Z^d x {1..N}-invariant kernels, tilted matrices,
//!   Perron–Frobenius eigen-data and strip local-limit checks;
//! * [`classifier`] — Green-moment functionals I/J, the
//!   convergent/divergent dichotomy, and exponent verification;
//! * [`lab`] — scenario files, caching, orchestration and reports.

pub mod classifier;
pub mod excursion;
pub mod group;
pub mod lab;
pub mod lattice;
pub mod series;
pub mod special;
pub mod strip;
