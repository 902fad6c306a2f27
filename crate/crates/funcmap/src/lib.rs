//! Functional-embedding toolkit for multi-region neural time series.
//!
//! The crate covers the full desk-scale pipeline on synthetic data:
//!
//! * [`simgen`] — seeded multi-subject/multi-session LFP simulator with
//!   region-specific oscillatory signatures and synthetic 3-D coordinates.
//! * [`dsp`] — zero-phase filtering, resampling, windowing and artifact
//!   rejection for the encoder and transformer preprocessing branches.
//! * [`nnkit`] — a small reverse-mode autodiff kernel library (conv/pool/
//!   norm/attention layers, AdamW, plateau scheduler, checkpoints).
//! * [`encoder`] — contrastive channel encoders (pairwise margin loss and
//!   multi-positive InfoNCE) producing unit-norm 32-D embeddings.
//! * [`recon`] — the masked-region reconstruction transformer driven by
//!   per-channel identity vectors (functional or coordinate).
//! * [`baselines`] — CopyBest, causal FIR, TCN, GRU and Zero reference
//!   models trained on the same windows.
//! * [`eval`] — k-NN classification, Fisher-averaged correlations, paired
//!   tests with multiplicity corrections, PCA, saliency and sweep probes.
//! * [`cli`] — the `funcmap` command-line front end and artifact store.

pub mod dsp;
pub mod rngs;
pub mod simgen;
pub mod spectrum;

pub use rngs::SeedStream;
