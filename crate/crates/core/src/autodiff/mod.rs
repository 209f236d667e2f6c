//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] is an immutable list of primitive operations in topological
//! order. A [`Pass`] binds it to a [`ParamStore`], records every activation on
//! a private tape during `forward`, and replays the tape in reverse during
//! `backward`. Gradients are accumulated in `f64` in reverse node order, so
//! identical inputs always give bit-identical results.

mod gradcheck;
mod graph;
pub mod kernels;
mod params;
mod pass;

pub use gradcheck::{grad_check, GradCheckReport, ParamCheck};
pub use graph::{Graph, GraphBuilder, Node, NodeId, Op, Padding};
pub use params::ParamStore;
pub use pass::{pass_counts, GradientSet, Pass};
