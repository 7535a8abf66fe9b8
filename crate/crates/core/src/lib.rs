//! Action-free offline pre-training of state policies and guided online
//! learning.
//!
//! Offline, a decomposed critic learns values over discretised state
//! differences from `(s, r, s')` tuples. Online, its greedy state-difference
//! recommendations are translated into actions by a concurrently trained
//! inverse dynamics model and mixed into a TD3 or DecQN agent's behaviour.

pub mod cli;
mod codec;
pub mod config;
pub mod critic;
pub mod discretise;
pub mod env;
pub mod eval;
pub mod offline;
pub mod online;
pub mod error;
pub mod nn;
pub mod rng;
pub mod theory;

pub use error::{Error, Result};
