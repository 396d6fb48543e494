//! Simulation framework for dialogue agents that carry self-emotion: an
//! emotional state caused by events outside the current conversation.
//!
//! The crate covers agent and world creation ([`genesis`]), self-emotion
//! generation ([`emotion`]), fixed-context strategy selection
//! ([`dialogue`]), step-wise group discussions ([`groupsim`]), evaluation
//! ([`metrics`]) and seq2seq training-data export ([`dataset`]). All model
//! traffic goes through [`gateway`], whose mock and cassette backends make
//! every pipeline reproducible offline.

pub mod dataset;
pub mod dialogue;
pub mod domain;
pub mod emotion;
pub mod engine;
pub mod gateway;
pub mod groupsim;
pub mod genesis;
pub mod metrics;
pub mod persist;
pub mod seeds;
pub mod templates;

pub use engine::{Engine, GenerationSettings};
