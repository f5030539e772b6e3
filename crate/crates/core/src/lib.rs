//! Deterministic simulator for federated training of networks pruned at
//! initialization.
//!
//! The crate is organised bottom-up: [`scalar`], [`tensor`] and [`nn`] give a
//! small CPU network library with exact gradients and Hessian-vector
//! products; [`pruning`] and [`structured`] build unstructured and channel
//! masks; [`data`] generates and partitions datasets; [`federation`] runs the
//! rounds; [`metrics`] accounts for bytes and FLOPs; [`config`], [`grid`] and
//! [`curves`] drive experiment sweeps.
//!
//! Averaging masked models over participants spreads the support to the
//! union of the client masks, while the sparsity-aware aggregator keeps
//! exactly `⌈κn⌉` coordinates:
//!
//! ```
//! use fedpai::federation::{aggregate_fedavg, aggregate_sparsity_aware};
//! use fedpai::mask::{kept_count, Mask};
//! use fedpai::nn::{Layer, ModelSpec, ModelState};
//!
//! let n = 10;
//! let kappa = 0.3;
//! let spec = ModelSpec {
//!     layers: vec![Layer::Dense { in_dim: 1, out_dim: n, bias: false }],
//!     input_shape: vec![1],
//!     num_classes: n,
//! };
//! let k = kept_count(kappa, n);
//! let a = Mask::from_bits((0..n).map(|i| i < k).collect());
//! let b = Mask::from_bits((0..n).map(|i| i >= n - k).collect());
//! let model = |m: &Mask| {
//!     let params = (0..n).map(|i| if m.bits()[i] { 1.0 + i as f64 } else { 0.0 }).collect();
//!     ModelState::new(params, spec.layout()).unwrap()
//! };
//! let updates = vec![(model(&a), a.clone()), (model(&b), b.clone())];
//!
//! let avg = aggregate_fedavg(&updates).unwrap();
//! let avg_support = avg.params.iter().filter(|v| **v != 0.0).count();
//! assert_eq!(avg_support, 2 * k);
//!
//! let (sparse, mask) = aggregate_sparsity_aware(&updates, kappa).unwrap();
//! assert_eq!(mask.count_ones(), k);
//! assert_eq!(sparse.params.iter().filter(|v| **v != 0.0).count(), k);
//! ```

pub mod config;
pub mod curves;
pub mod data;
pub mod error;
pub mod federation;
pub mod grid;
pub mod mask;
pub mod metrics;
pub mod nn;
pub mod pruning;
pub mod scalar;
pub mod seed;
pub mod structured;
pub mod tensor;

pub use error::{Error, Result};
pub use federation::{RunConfig, Simulation, Strategy, StrategyConfig};
pub use mask::Mask;
pub use nn::{ModelSpec, ModelState};
