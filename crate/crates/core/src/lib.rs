//! Key-value pair extraction from form-like documents, posed as question
//! answering over entities.
//!
//! An encoder with a spatially biased attention classifies entities and
//! picks the questions; a parallel decoder refines them, and a coarse
//! sigmoid scorer followed by a fine softmax over the top candidates picks
//! each question's answer. Everything runs on a small reverse-mode autodiff
//! engine in [`numerics`], so the whole pipeline trains end to end and can
//! be checked against finite differences.
//!
//! Entity text is embedded by hashing tokens into a trainable table rather
//! than through a pretrained layout language model.

pub mod cli;
pub mod data;
pub mod eval;
pub mod geometry;
pub mod model;
pub mod numerics;
pub mod training;
