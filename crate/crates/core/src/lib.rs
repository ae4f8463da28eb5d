//! Aggregation of observable risk factors into a small set of latent
//! factors, diagnostics of factor relevance, and stress testing of asset
//! portfolios through linear factor models.
//!
//! The pipeline runs from [`panel`] (return panels, standardisation,
//! rolling windows) through [`pca`] and [`cluster`] (diagnostics and Ward
//! clustering) to [`factors`] (clustered PCA factors, OLS factor models),
//! [`nnet`] (dense autoencoders trained with ADAM) and [`stress`].
//!
//! Numerical code is generic over [`Scalar`], implemented for `f64` and
//! `f32`; aliases for both are provided below.

// `!(a > b)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cluster;
pub mod factors;
pub mod linalg;
pub mod nnet;
pub mod panel;
pub mod pca;
pub mod scalar;
pub mod seed;
pub mod stress;
pub mod synthetic;

pub use scalar::Scalar;

pub type ReturnPanelF64 = panel::ReturnPanel<f64>;
pub type StandardizedPanelF64 = panel::StandardizedPanel<f64>;
pub type PcaModelF64 = pca::PcaModel<f64>;
pub type AggregatedFactorsF64 = factors::AggregatedFactors<f64>;
pub type FactorModelF64 = factors::FactorModel<f64>;
pub type MlpF64 = nnet::Mlp<f64>;
pub type AeNetworkF64 = nnet::AeNetwork<f64>;
pub type ClusteredAeF64 = nnet::ClusteredAe<f64>;

pub type ReturnPanelF32 = panel::ReturnPanel<f32>;
pub type StandardizedPanelF32 = panel::StandardizedPanel<f32>;
pub type PcaModelF32 = pca::PcaModel<f32>;
pub type AggregatedFactorsF32 = factors::AggregatedFactors<f32>;
pub type FactorModelF32 = factors::FactorModel<f32>;
pub type MlpF32 = nnet::Mlp<f32>;
pub type AeNetworkF32 = nnet::AeNetwork<f32>;
pub type ClusteredAeF32 = nnet::ClusteredAe<f32>;
