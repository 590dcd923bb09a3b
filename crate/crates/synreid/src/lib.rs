//! Synthetic-to-real domain-adaptive video person re-identification.
//!
//! Trains a video feature extractor on labeled synthetic tracklets plus
//! unlabeled real tracklets, using multi-granularity adversarial domain
//! discrimination (frame, video, stitched-sequence) and a clustering-guided
//! mean-teacher consistency scheme, then evaluates retrieval with CMC and mAP.

pub mod autodiff;
pub mod backbone;
pub mod checkpoint;
pub mod clustering;
pub mod config;
pub mod datamodel;
pub mod domain;
pub mod error;
pub mod eval;
pub mod losses;
pub mod optim;
pub mod params;
pub mod plot;
pub mod report;
pub mod teacher;
pub mod toygen;
pub mod train;

pub use error::{Error, Result};
