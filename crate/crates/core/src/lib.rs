//! Dual-redundancy elimination for LiDAR single-object tracking.
//!
//! The pipeline turns a cropped point cloud into a bird's-eye-view grid,
//! suppresses background cells with a learned foreground heatmap, and
//! compresses the surviving foreground tokens into `K` proxy tokens, where
//! `K` is the effective rank of the token matrix measured online by a thin
//! SVD. A small regression head reads the proxies and moves the previous box.
//!
//! Module map:
//!
//! * [`tensor`], [`autodiff`], [`params`]: dense matrices, the reverse-mode tape,
//!   checkpoints and the optimizer.
//! * [`linalg`]: Jacobi SVD, effective rank, truncation residual.
//! * [`scene`]: synthetic sequences, cropping, augmentation, file formats.
//! * [`bev`]: pillarization and occupancy entropy.
//! * [`sfp`]: the foreground predictor and its Gaussian targets.
//! * [`ibdtc`]: token extraction, rank-guided queries, cross-attention, masking, baselines.
//! * [`tracker`]: head, losses, inference loop, training.
//! * [`metrics`]: oriented-box IoU, Success and Precision.
//! * [`config`], [`experiment`]: configuration and the benchmark / ablation harness.

pub mod autodiff;
pub mod bev;
pub mod config;
pub mod error;
pub mod experiment;
pub mod ibdtc;
pub mod linalg;
pub mod metrics;
pub mod params;
pub mod scene;
pub mod sfp;
pub mod tensor;
pub mod tracker;

pub use autodiff::{grad_check, GradCheckOptions, GradCheckReport, Tape, Var};
pub use bev::{BevGrid, GridGeometry};
pub use config::Config;
pub use error::{Error, Result};
pub use ibdtc::{CompressionResult, FusionMode, TokenSequence};
pub use linalg::{effective_rank, svd_thin, truncation_residual, SingularSpectrum};
pub use params::{AdamW, ParamSet};
pub use scene::{Box3D, ObjectClass, PointCloud, Sequence};
pub use sfp::Heatmap;
pub use tensor::DenseMatrix;
pub use metrics::OpeReport;
pub use tracker::Model;
