//! Semi-supervised lesion segmentation with a self-supervised inpainting
//! branch.
//!
//! A shared encoder feeds a segmentation decoder and an inpainting decoder.
//! Training runs in two stages per batch: the coarse segmentation of the
//! original image picks the region to blank out, then the fine stage encodes
//! the masked image, merges it with the original features through a fusion
//! module (gated by default) and predicts both a refined segmentation and a
//! reconstruction of the blanked pixels. Unlabeled images contribute only the
//! reconstruction loss.
//!
//! Everything runs on the CPU through a small tape-based autodiff engine
//! ([`autodiff`]) over dense NCHW tensors ([`tensor`]).
//!
//! ```no_run
//! use semiseg::data::{split, synthesize, SplitSpec, SyntheticSpec};
//! use semiseg::trainer::{evaluate, train, TrainConfig};
//! use semiseg::{ArchConfig, FusionMode};
//!
//! let spec = SyntheticSpec::new(64);
//! let samples: Vec<_> = (0..100).map(|i| synthesize(&spec, 0, i)).collect();
//! let data = split(&samples, &SplitSpec::default())?;
//! let run = train(&ArchConfig::toy(), FusionMode::Gff, &TrainConfig::default(), &data, None, |_| {})?;
//! let mut params = run.best.params;
//! println!("{:?}", evaluate(&mut params, &data.test, &Default::default())?.mean);
//! # Ok::<(), semiseg::Error>(())
//! ```

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gff;
pub mod gradcheck;
pub mod kernels;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod tensor;
pub mod trainer;

pub use autodiff::{Graph, Var};
pub use error::{Error, Result};
pub use gff::FusionMode;
pub use network::{ArchConfig, NetworkParams};
pub use tensor::{Element, Tensor};
