//! Image copy detection with dual global/local retrieval.
//!
//! Queries are routed through an overlay detector, recalled through a global
//! embedding branch and two SIFT descriptor branches, scored by ratio-test
//! match counts (with a horizontal-flip retry), fused, and evaluated by
//! micro-average precision.

pub mod imaging;
pub mod preprocess;
pub mod sift;
pub mod vecindex;
pub mod globalsim;
pub mod matcher;
pub mod evalkit;
pub mod pipeline;

mod binio;
