//! Rotational unit of memory (RUM): recurrent cells whose hidden-state
//! update is a norm-preserving rotation instead of a learned gate matrix,
//! plus everything needed to train and probe them — a tape-based reverse-
//! mode autodiff engine over `f64` tensors, LSTM/GRU baselines, the
//! copying-memory and associative-recall synthetic tasks, RMSProp/Adam
//! optimizers, a deterministic trainer with binary checkpoints, and
//! CSV/PGM kernel export.
//!
//! Everything is seeded and summation orders are fixed, so the same
//! configuration reproduces the same bytes, run after run.

pub mod autodiff;
pub mod cells;
pub mod checkpoint;
pub mod export;
pub mod optim;
pub mod rng;
pub mod rotation;
pub mod tasks;
pub mod tensor;
pub mod trainer;
