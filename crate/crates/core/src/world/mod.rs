//! The synthetic stimulus universe: scenes, rendered images, grammar
//! captions, and the frozen codecs and condition embedders.

pub mod caption;
pub mod codec;
pub mod embed;
pub mod render;
pub mod scene;

pub use caption::{caption_of, corpus, TokenSeq, VOCAB};
pub use codec::{ImageLatentCodec, TextLatentCodec, IMAGE_LATENT_DIM, TEXT_LATENT_DIM};
pub use embed::{ConditionSet, Embedders, COND_DIM, IMAGE_COND_TOKENS, TEXT_COND_TOKENS};
pub use render::{render, semantic_readout, Image};
pub use scene::{sample_scene, Category, Scene, SceneObject, Size};
