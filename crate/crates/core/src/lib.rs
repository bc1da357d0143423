//! Single-pass grid/anchor object detection on the CPU.
//!
//! The crate covers the whole workflow: a small tensor kernel with paired
//! backward passes, a convolutional detector ending in a region head,
//! transfer-learning surgery of pretrained weights, a data pipeline with
//! augmentation and a synthetic scene generator, a training loop with loss
//! monitoring and divergence recovery, and PR/AP evaluation.
//!
//! ```no_run
//! use boxdet::network::{build_network, NetworkConfig, RegionHeadSpec};
//!
//! let head = RegionHeadSpec::new(3, vec![(1.0, 1.0), (2.0, 2.0)]);
//! let config = NetworkConfig::compact(128, [8, 16, 32, 32, 64, 64], head);
//! let net = build_network(&config, 7).unwrap();
//! println!("{} parameters", net.parameter_count());
//! ```

pub mod cfgfile;
pub mod data;
mod error;
pub mod eval;
pub mod exec;
pub mod geometry;
pub mod network;
pub mod tensor;
pub mod train;
pub mod transfer;

pub use error::{Error, Result};
pub use exec::{exec_for_threads, mix_seed, Exec};
pub use geometry::{iou, Detection, Rect};
