//! Frozen condition embedders, the stand-ins for the CLIP image and text
//! encoders.
//!
//! All projection tables are drawn once from a fixed seed, so every process
//! reproduces them bit for bit.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::caption::{TokenSeq, MAX_TOKENS, VOCAB};
use super::render::{Image, PATCHES};
use super::scene::SEMANTIC_DIM;
use crate::tensor::Tensor;

pub const COND_DIM: usize = 16;
/// 16 patch tokens + 1 global token.
pub const IMAGE_COND_TOKENS: usize = PATCHES + 1;
/// 8 word slots + 1 global token.
pub const TEXT_COND_TOKENS: usize = MAX_TOKENS + 1;
/// Value of every entry of the padding token used for empty word slots.
pub const NULL_PAD_VALUE: f64 = 0.1;

const EMBEDDER_SEED: u64 = 0x00C1_1F00_5EED;

#[derive(Debug, Clone, PartialEq)]
pub struct Embedders {
    /// `PATCHES x COND_DIM`; patch token `p` is `mean_p * patch_dirs[p]`.
    pub patch_dirs: Tensor,
    /// `SEMANTIC_DIM x COND_DIM`.
    pub image_global: Tensor,
    /// `VOCAB x COND_DIM`, shared with the text latent codec.
    pub token_table: Tensor,
    /// `COND_DIM x COND_DIM`.
    pub text_global: Tensor,
}

impl Default for Embedders {
    fn default() -> Self {
        Self::frozen()
    }
}

impl Embedders {
    pub fn frozen() -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(EMBEDDER_SEED);
        let s = 1.0 / (COND_DIM as f64).sqrt();
        Self {
            patch_dirs: Tensor::randn(PATCHES, COND_DIM, 1.0, &mut rng),
            image_global: Tensor::randn(SEMANTIC_DIM, COND_DIM, 1.0, &mut rng),
            token_table: Tensor::randn(VOCAB.len(), COND_DIM, 1.0, &mut rng),
            text_global: Tensor::randn(COND_DIM, COND_DIM, s, &mut rng),
        }
    }

    /// Global semantic token for a (possibly soft) multi-hot.
    pub fn semantic_token(&self, semantics: &[f64]) -> Vec<f64> {
        assert_eq!(semantics.len(), SEMANTIC_DIM);
        let mut out = vec![0.0; COND_DIM];
        for (k, &w) in semantics.iter().enumerate() {
            for (o, &g) in out.iter_mut().zip(self.image_global.row(k)) {
                *o += w * g;
            }
        }
        out
    }

    /// Condition tokens for an image from its patch means and scene semantics.
    pub fn embed_image_cond(&self, image: &Image, semantics: &[f64]) -> Tensor {
        self.embed_image_cond_from_patches(&image.patch_means(), semantics)
    }

    pub fn embed_image_cond_from_patches(&self, patch_means: &[f64], semantics: &[f64]) -> Tensor {
        let mut data = Vec::with_capacity(IMAGE_COND_TOKENS * COND_DIM);
        for (p, &m) in patch_means.iter().enumerate() {
            data.extend(self.patch_dirs.row(p).iter().map(|d| m * d));
        }
        data.extend(self.semantic_token(semantics));
        Tensor::from_vec(IMAGE_COND_TOKENS, COND_DIM, data)
    }

    pub fn mean_word_embedding(&self, tokens: &TokenSeq) -> Vec<f64> {
        let mut mean = vec![0.0; COND_DIM];
        for &t in tokens.ids() {
            for (m, &e) in mean.iter_mut().zip(self.token_table.row(t)) {
                *m += e;
            }
        }
        let n = tokens.len() as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        mean
    }

    /// Global text token: the projected mean word embedding.
    pub fn text_token(&self, tokens: &TokenSeq) -> Vec<f64> {
        let mean = self.mean_word_embedding(tokens);
        let mut out = vec![0.0; COND_DIM];
        for (k, &m) in mean.iter().enumerate() {
            for (o, &g) in out.iter_mut().zip(self.text_global.row(k)) {
                *o += m * g;
            }
        }
        out
    }

    /// Word-slot tokens (null padded to 8) followed by the global token.
    pub fn embed_text_cond(&self, tokens: &TokenSeq) -> Tensor {
        let mut data = Vec::with_capacity(TEXT_COND_TOKENS * COND_DIM);
        for slot in 0..MAX_TOKENS {
            match tokens.ids().get(slot) {
                Some(&t) => data.extend_from_slice(self.token_table.row(t)),
                None => data.extend(std::iter::repeat_n(NULL_PAD_VALUE, COND_DIM)),
            }
        }
        data.extend(self.text_token(tokens));
        Tensor::from_vec(TEXT_COND_TOKENS, COND_DIM, data)
    }
}

/// Dual guidance for one item: image tokens, text tokens and the mixing rate.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionSet {
    pub image: Option<Tensor>,
    pub text: Option<Tensor>,
    pub mix: f64,
}

impl ConditionSet {
    pub fn new(image: Option<Tensor>, text: Option<Tensor>, mix: f64) -> Self {
        assert!((0.0..=1.0).contains(&mix), "mix must lie in [0, 1]");
        if let Some(t) = &image {
            assert_eq!(t.shape(), [IMAGE_COND_TOKENS, COND_DIM]);
        }
        if let Some(t) = &text {
            assert_eq!(t.shape(), [TEXT_COND_TOKENS, COND_DIM]);
        }
        Self { image, text, mix }
    }

    pub fn unconditional() -> Self {
        Self {
            image: None,
            text: None,
            mix: 0.5,
        }
    }
}
