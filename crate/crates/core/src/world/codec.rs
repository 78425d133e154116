//! Frozen latent codecs: PCA for images, position-weighted embeddings with
//! nearest-neighbour decoding for captions.

use std::collections::HashSet;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::caption::{corpus, CaptionError, TokenSeq, MAX_TOKENS, VOCAB};
use super::embed::{Embedders, COND_DIM};
use super::render::{Image, PIXELS};

pub const IMAGE_LATENT_DIM: usize = 32;
pub const TEXT_LATENT_DIM: usize = COND_DIM;

#[derive(Debug, Error, PartialEq)]
pub enum CodecError {
    #[error("need at least {needed} images to fit {needed} components, got {got}")]
    TooFewImages { needed: usize, got: usize },
    #[error("latent has length {got}, expected {expected}")]
    LatentShape { got: usize, expected: usize },
    #[error(transparent)]
    Caption(#[from] CaptionError),
    #[error("text encodings of `{0}` and `{1}` are not distinguishable")]
    NotInjective(String, String),
}

/// Top-k PCA of centered pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageLatentCodec {
    pub mean: Vec<f64>,
    /// `k` rows of `PIXELS` entries each, orthonormal.
    pub components: Vec<Vec<f64>>,
    pub explained_variance: Vec<f64>,
    pub total_variance: f64,
}

impl ImageLatentCodec {
    pub fn fit(images: &[Image]) -> Result<Self, CodecError> {
        Self::fit_k(images, IMAGE_LATENT_DIM)
    }

    pub fn fit_k(images: &[Image], k: usize) -> Result<Self, CodecError> {
        let n = images.len();
        if n < k || n < 2 {
            return Err(CodecError::TooFewImages { needed: k, got: n });
        }
        let mut mean = vec![0.0; PIXELS];
        for img in images {
            for (m, &p) in mean.iter_mut().zip(img.pixels()) {
                *m += p;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let centered = DMatrix::from_fn(n, PIXELS, |i, j| images[i].pixels()[j] - mean[j]);
        let cov = centered.transpose() * &centered / (n as f64 - 1.0);
        let total_variance = cov.trace();
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..PIXELS).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let mut components = Vec::with_capacity(k);
        let mut explained_variance = Vec::with_capacity(k);
        for &idx in order.iter().take(k) {
            let mut v: Vec<f64> = eig.eigenvectors.column(idx).iter().copied().collect();
            // sign convention: largest-magnitude entry positive
            let pivot = v
                .iter()
                .copied()
                .fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
            if pivot < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
            components.push(v);
            explained_variance.push(eig.eigenvalues[idx].max(0.0));
        }
        Ok(Self {
            mean,
            components,
            explained_variance,
            total_variance,
        })
    }

    pub fn dim(&self) -> usize {
        self.components.len()
    }

    pub fn explained_variance_ratio(&self) -> f64 {
        self.explained_variance.iter().sum::<f64>() / self.total_variance
    }

    /// Copy restricted to the leading `k` components.
    pub fn truncated(&self, k: usize) -> Self {
        Self {
            mean: self.mean.clone(),
            components: self.components[..k].to_vec(),
            explained_variance: self.explained_variance[..k].to_vec(),
            total_variance: self.total_variance,
        }
    }

    pub fn encode(&self, image: &Image) -> Vec<f64> {
        self.components
            .iter()
            .map(|c| {
                c.iter()
                    .zip(image.pixels())
                    .zip(&self.mean)
                    .map(|((w, p), m)| w * (p - m))
                    .sum()
            })
            .collect()
    }

    /// Projection back to pixel space, without clamping.
    pub fn decode_raw(&self, z: &[f64]) -> Result<Image, CodecError> {
        if z.len() != self.dim() {
            return Err(CodecError::LatentShape {
                got: z.len(),
                expected: self.dim(),
            });
        }
        let mut px = self.mean.clone();
        for (c, &w) in self.components.iter().zip(z) {
            for (p, &v) in px.iter_mut().zip(c) {
                *p += w * v;
            }
        }
        Ok(Image::new(px))
    }

    pub fn decode(&self, z: &[f64]) -> Result<Image, CodecError> {
        Ok(self.decode_raw(z)?.clamped())
    }
}

/// Position weights applied to word slots when pooling a caption.
pub fn position_weights() -> [f64; MAX_TOKENS] {
    let mut w = [0.0; MAX_TOKENS];
    for (i, v) in w.iter_mut().enumerate() {
        *v = 1.0 / (1.0 + 0.37 * i as f64);
    }
    w
}

#[derive(Debug, Clone)]
pub struct TextLatentCodec {
    token_table: Vec<Vec<f64>>,
    weights: [f64; MAX_TOKENS],
    candidates: Vec<TokenSeq>,
    /// Unit-normalized encodings of `candidates`.
    unit_encodings: Vec<[f64; TEXT_LATENT_DIM]>,
}

impl TextLatentCodec {
    /// Builds the codec over the full grammar corpus and checks that no two
    /// captions share a direction in latent space.
    pub fn build(embedders: &Embedders) -> Result<Self, CodecError> {
        let candidates: Vec<TokenSeq> = corpus().into_iter().map(|(_, c)| c).collect();
        Self::with_candidates(embedders, candidates)
    }

    pub fn with_candidates(
        embedders: &Embedders,
        candidates: Vec<TokenSeq>,
    ) -> Result<Self, CodecError> {
        let token_table = (0..VOCAB.len())
            .map(|i| embedders.token_table.row(i).to_vec())
            .collect();
        let mut codec = Self {
            token_table,
            weights: position_weights(),
            candidates: Vec::new(),
            unit_encodings: Vec::new(),
        };
        let mut seen: HashSet<[i64; TEXT_LATENT_DIM]> = HashSet::new();
        let mut owner = std::collections::HashMap::new();
        for c in &candidates {
            let u = unit(&codec.encode(c)?);
            let key = u.map(|x| (x * 1e9).round() as i64);
            if !seen.insert(key) {
                let other: &TokenSeq = owner[&key];
                return Err(CodecError::NotInjective(other.text(), c.text()));
            }
            owner.insert(key, c);
            codec.unit_encodings.push(u);
        }
        codec.candidates = candidates;
        Ok(codec)
    }

    pub fn candidates(&self) -> &[TokenSeq] {
        &self.candidates
    }

    pub fn encode(&self, tokens: &TokenSeq) -> Result<Vec<f64>, CodecError> {
        let mut z = vec![0.0; TEXT_LATENT_DIM];
        for (i, &t) in tokens.ids().iter().enumerate() {
            let row = self
                .token_table
                .get(t)
                .ok_or(CodecError::Caption(CaptionError::OutOfVocab(t)))?;
            for (o, &e) in z.iter_mut().zip(row) {
                *o += self.weights[i] * e;
            }
        }
        Ok(z)
    }

    /// Nearest candidate by cosine similarity; ties go to the lowest index.
    pub fn decode(&self, z: &[f64]) -> Result<TokenSeq, CodecError> {
        Ok(self.candidates[self.nearest(z)?].clone())
    }

    pub fn nearest(&self, z: &[f64]) -> Result<usize, CodecError> {
        if z.len() != TEXT_LATENT_DIM {
            return Err(CodecError::LatentShape {
                got: z.len(),
                expected: TEXT_LATENT_DIM,
            });
        }
        let mut best = 0;
        let mut best_sim = f64::NEG_INFINITY;
        for (i, u) in self.unit_encodings.iter().enumerate() {
            let s: f64 = u.iter().zip(z).map(|(a, b)| a * b).sum();
            if s > best_sim {
                best_sim = s;
                best = i;
            }
        }
        Ok(best)
    }
}

fn unit(z: &[f64]) -> [f64; TEXT_LATENT_DIM] {
    let n = z.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut out = [0.0; TEXT_LATENT_DIM];
    for (o, &x) in out.iter_mut().zip(z) {
        *o = x / n;
    }
    out
}
