// NaN-rejecting `!(x > 0.0)` guards and index loops over the math are intentional.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod config;
pub mod descriptor;
pub mod evaluation;
pub mod features;
pub mod keypoints;
pub mod pipeline;
pub mod radar;
pub mod registration;
pub mod scancontext;
