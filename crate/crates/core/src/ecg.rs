//! Multi-lead signal modeling: patch decomposition, masking, and the masked
//! autoencoder.

pub mod mae;
pub mod tokenizer;

pub use mae::EcgModel;
pub use tokenizer::{patchify, select_mask, MaskSet, PatchGrid};
