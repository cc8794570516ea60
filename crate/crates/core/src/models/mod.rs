//! Frozen stand-in embedders and the toy autoencoder.

mod autoencoder;
mod image;
mod text;
pub mod weights;

pub use autoencoder::{
    pretrain_autoencoder, psnr, psnr_from_mse, Decoder, DecoderVars, Encoder, EncoderVars, PretrainConfig,
    PretrainReport, ToyAutoencoder, LATENT_CHANNELS,
};
pub use image::{check_image, ImageEmbedder, ImageEmbedderVars, ImageFeatures};
pub use text::{TextEmbedder, SOURCE_PROMPT};

/// Embedding width shared by the text and image embedders.
pub const EMBED_DIM: usize = 64;

/// Seed all frozen embedder weights derive from unless overridden.
pub const DEFAULT_MODEL_SEED: u64 = 20_240_507;

/// The frozen pair of embedders sharing one joint space.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedders {
    pub seed: u64,
    pub text: TextEmbedder,
    pub image: ImageEmbedder,
}

impl Embedders {
    pub fn new(seed: u64) -> Self {
        Embedders {
            seed,
            text: TextEmbedder::new(seed, EMBED_DIM),
            image: ImageEmbedder::new(seed, EMBED_DIM),
        }
    }
}

impl Default for Embedders {
    fn default() -> Self {
        Self::new(DEFAULT_MODEL_SEED)
    }
}
