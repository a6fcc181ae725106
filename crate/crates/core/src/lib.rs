// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod eros;
pub mod event;
pub mod kernel;
pub mod tracker;
pub mod sim;
pub mod pipeline;
pub mod cluster;
pub mod eval;
