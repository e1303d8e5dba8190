//! Visual push attacks on visually-aware recommender systems.
//!
//! The crate is organised around the attacker/recommender boundary:
//!
//! * [`catalog`], [`imaging`], [`extractor`] and [`recommender`] model the
//!   attacked system: items with images, a fixed public feature extractor
//!   and the trained BPR / VBPR / DeepStyle scorers.
//! * [`oracle`] is the only surface the black-box attacks touch: image
//!   upload, score or rank feedback, user injection and query accounting.
//! * [`gradest`] estimates the score gradient w.r.t. image features from
//!   perturbation responses by solving a small linear system.
//! * [`attacks`] orchestrates white-box, black-box, partial-ranking,
//!   segmented and general-population attacks plus two image baselines.
//! * [`report`] and [`experiment`] evaluate hit ratios and export results.

mod binio;

pub mod attacks;
pub mod catalog;
pub mod config;
pub mod error;
pub mod experiment;
pub mod extractor;
pub mod gradest;
pub mod imaging;
pub mod oracle;
pub mod recommender;
pub mod report;

pub use error::{Error, Result};
