//! Assume-guarantee contract verification for networks of polynomial
//! dynamical systems.
//!
//! The crate is layered bottom-up:
//!
//! * [`poly`] — sparse multivariate polynomials and parsing.
//! * [`sdp`] — a dense interior-point semidefinite programming solver.
//! * [`sos`] — sum-of-squares programs compiled to SDPs.
//! * [`contracts`] — subsystems, networks and assume-guarantee contracts.
//! * [`synthesis`] — barrier-certificate synthesis and contract refinement.
//! * [`negotiation`] — network-level negotiation algorithms and verdicts.
//! * [`model`] — the TOML model, certificate and trace file formats.
//! * [`simulate`] — closed-loop simulation used for empirical checks.
//! * [`sweep`] — parameter sweeps probing the monotone input/region trade-off.

pub mod contracts;
pub mod model;
pub mod negotiation;
pub mod poly;
pub mod sdp;
pub mod simulate;
pub mod sos;
pub mod sweep;
pub mod synthesis;
