//! Detection of test-time evasion attacks on deep classifiers.
//!
//! Class-conditional null densities are fitted to deep-layer activations of a
//! trained network; Kullback-Leibler statistics comparing the null-model class
//! posterior with the network's posterior flag inputs that are simultaneously
//! too atypical for the decided class and too typical for some other class.
//! The crate also crafts the attacks (FGSM, JSMA, CW-L2, white-box) needed to
//! evaluate the detectors end to end.

pub mod attacks;
pub mod datasets;
pub mod detectors;
pub mod dnn;
pub mod evaluation;
pub mod null_models;
pub mod numerics;
pub mod provenance;
pub mod rng;
