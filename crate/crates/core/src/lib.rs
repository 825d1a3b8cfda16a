// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod binio;
pub mod downstream;
pub mod dpixel;
pub mod embstore;
pub mod encoder;
pub mod error;
pub mod geo;
pub mod graph;
pub mod objective;
pub mod shuffle;
pub mod synthdata;
pub mod tilestore;
pub mod trainer;

pub use error::{Error, Result};
