//! Minimal reverse-mode differentiation for small dense networks.
//!
//! A [`Graph`] records every forward operation on a tape. Calling
//! [`Graph::backward`] on a scalar node walks the tape in reverse and
//! accumulates gradients into the [`ParamStore`] slots of every parameter
//! that was loaded into the graph. The graph is rebuilt for each step.
//!
//! ```
//! use gradcore::{AdamState, Graph, ParamStore, Tensor};
//!
//! let mut store = ParamStore::<f64>::new();
//! store.insert("w", Tensor::new(vec![2], vec![1.0, -2.0]).unwrap()).unwrap();
//!
//! let mut g = Graph::new();
//! let w = g.param(&store, "w").unwrap();
//! let sq = g.mul(w, w).unwrap();
//! let loss = g.sum(sq).unwrap();
//! g.backward(loss, &mut store).unwrap();
//! assert_eq!(store.grad("w").unwrap().data(), &[2.0, -4.0]);
//!
//! let mut adam = AdamState::new(0.1);
//! adam.step(&mut store).unwrap();
//! ```

pub mod adam;
pub mod container;
mod error;
pub mod gradcheck;
mod graph;
mod kernels;
pub mod params;
mod real;
mod tensor;

pub use adam::AdamState;
pub use error::{GradError, Result};
pub use graph::{Graph, Var};
pub use params::ParamStore;
pub use real::{Precision, Real};
pub use tensor::Tensor;
