//! Haar-coordinate operators on dyadic SL-infinity spaces.
//!
//! Modules, bottom up:
//! - [`dyadic`]: intervals, leaf sets, nested families, Carleson constants
//! - [`haar`]: coefficient vectors, square functions, norms, pairing
//! - [`operators`]: dense operators, adjoints, norm bounds, generators
//! - [`jones`]: block-basis families, compatibility checks, the maps B, Q, P
//! - [`comb`]: level covers, dense roots, density pruning
//! - [`quasidiag`]: block bases that almost diagonalize an operator
//! - [`factor`]: factorizations of the identity and their certificates
//! - [`directsum`]: finite direct sums of SL-infinity spaces

pub mod comb;
pub mod directsum;
pub mod dyadic;
pub mod exact;
pub mod factor;
pub mod haar;
pub mod jones;
pub mod operators;
pub mod quasidiag;

pub use dyadic::{DyadicInterval, IntervalCollection, LeafSet, NestedFamily};
pub use haar::{Arith, HaarVector};
pub use operators::HaarOperator;
