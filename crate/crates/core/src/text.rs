//! Report-text modeling: toy vocabulary, sentinel masking, and the masked
//! text autoencoder.

pub mod mae;
pub mod vocab;

pub use mae::{mask_text, MaskedText, TextModel};
pub use vocab::Vocab;
