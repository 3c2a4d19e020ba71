//! Word embeddings trained by ranking genuine text windows above corrupted
//! ones, and a window-based part-of-speech tagger that uses them as its only
//! features.

pub mod codec;
pub mod corpus;
pub mod model;
pub mod tensor;
pub mod trainer;
pub mod embeddings;
pub mod tagger;
pub mod cli;
