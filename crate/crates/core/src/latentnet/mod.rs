//! Detail and condition encoders and the scale-aware fusion decoder.

mod decoder;
mod encoder;

pub use decoder::{DecoderConfig, FusionDecoder, MAX_DECODE_SCALE};
pub use encoder::{kl_divergence, reparameterize, ConditionEncoder, ConvEncoder, DetailEncoder, LatentMode, Posterior};

#[cfg(test)]
mod tests;
