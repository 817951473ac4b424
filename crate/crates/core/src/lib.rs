//! Pair-specific text proxies for text-video retrieval over precomputed embeddings.
//!
//! For each (text, video) pair a generator attends from the text query onto the
//! video's proxy tokens, derives a displacement direction and magnitude, and
//! emits a proxy `t_p = t_q + dash ⊙ d/|d|`. Training uses three symmetric
//! InfoNCE objectives; retrieval adds `γ s(t_p, p1)` to the plain text-video
//! score.
//!
//! ```
//! use tvproxy::generator::{generate_proxy, GeneratorConfig, GeneratorParams};
//! use tvproxy::numkernel::Matrix;
//!
//! let params = GeneratorParams::identity(&GeneratorConfig::default(), 2, 2);
//! let video = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
//! let proxy = generate_proxy(&[0.6, 0.8], &video, &params).unwrap();
//! assert_eq!(proxy.len(), 2);
//! ```

pub mod cli;
pub mod error;
pub mod generator;
pub mod numkernel;
pub mod objectives;
pub mod parallel;
pub mod retrieval;
pub mod store;
pub mod trainer;

pub use error::{Error, Result};
