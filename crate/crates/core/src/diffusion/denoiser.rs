use rand::Rng;
use serde::{Deserialize, Serialize};

use super::DiffusionError;
use crate::tensor::{time_embedding, Graph, NodeId, ParamStore, Tensor};
use crate::world::embed::{ConditionSet, COND_DIM};

/// How the two cross-attention branches are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MixMode {
    /// `mix * A_img + (1 - mix) * A_txt` on attention outputs.
    #[default]
    Output,
    /// One softmax over both key sets with `ln(mix)` / `ln(1 - mix)` offsets.
    Score,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub latent_tokens: usize,
    pub token_dim: usize,
    pub width: usize,
    pub blocks: usize,
    pub ff_hidden: usize,
    pub cond_dim: usize,
    #[serde(default)]
    pub mix_mode: MixMode,
}

impl DenoiserConfig {
    pub fn with_tokens(latent_tokens: usize, token_dim: usize) -> Self {
        Self {
            latent_tokens,
            token_dim,
            width: 32,
            blocks: 2,
            ff_hidden: 64,
            cond_dim: COND_DIM,
            mix_mode: MixMode::Output,
        }
    }

    /// 32-dim image latent as 4 tokens of 8.
    pub fn image() -> Self {
        Self::with_tokens(4, 8)
    }

    /// 16-dim text latent as 2 tokens of 8.
    pub fn text() -> Self {
        Self::with_tokens(2, 8)
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_tokens * self.token_dim
    }
}

/// Cross-attention values of one block for one item, before the output
/// projection.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossTrace {
    pub image: Tensor,
    pub text: Tensor,
    pub mixed: Tensor,
}

/// One denoiser input.
#[derive(Debug, Clone, Copy)]
pub struct Sample<'a> {
    pub z: &'a [f64],
    pub t: usize,
    pub cond: &'a ConditionSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Denoiser {
    pub config: DenoiserConfig,
    pub params: ParamStore,
}

fn dense<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    Tensor::randn(rows, cols, 1.0 / (rows as f64).sqrt(), rng)
}

/// Branch weights after the missing-context rule.
fn branch_weights(cond: &ConditionSet) -> (f64, f64) {
    match (&cond.image, &cond.text) {
        (Some(_), None) => (1.0, 0.0),
        (None, Some(_)) => (0.0, 1.0),
        _ => (cond.mix, 1.0 - cond.mix),
    }
}

impl Denoiser {
    /// Fresh parameters. The output projection starts at zero so the initial
    /// noise prediction is exactly zero.
    pub fn new<R: Rng + ?Sized>(config: DenoiserConfig, rng: &mut R) -> Self {
        let (w, d, c, h) = (config.width, config.token_dim, config.cond_dim, config.ff_hidden);
        let mut p = ParamStore::new();
        p.insert("in.w", dense(d, w, rng));
        p.insert("in.b", Tensor::zeros(1, w));
        p.insert("pos", Tensor::randn(config.latent_tokens, w, 0.1, rng));
        p.insert("time.w", dense(w, w, rng));
        p.insert("time.b", Tensor::zeros(1, w));
        p.insert("null", Tensor::randn(1, c, 0.1, rng));
        for b in 0..config.blocks {
            let n = |s: &str| format!("b{b}.{s}");
            for s in ["sa.q", "sa.k", "sa.v", "sa.o", "ca.q", "ca.o"] {
                p.insert(n(s), dense(w, w, rng));
            }
            for s in ["ca.img.k", "ca.img.v", "ca.txt.k", "ca.txt.v"] {
                p.insert(n(s), dense(c, w, rng));
            }
            for ln in ["ln1", "ln2", "ln3"] {
                p.insert(n(&format!("{ln}.g")), Tensor::full(1, w, 1.0));
                p.insert(n(&format!("{ln}.b")), Tensor::zeros(1, w));
            }
            p.insert(n("ff.w1"), dense(w, h, rng));
            p.insert(n("ff.b1"), Tensor::zeros(1, h));
            p.insert(n("ff.w2"), dense(h, w, rng));
            p.insert(n("ff.b2"), Tensor::zeros(1, w));
        }
        p.insert("out.w", Tensor::zeros(w, d));
        p.insert("out.b", Tensor::zeros(1, d));
        Self { config, params: p }
    }

    /// Records the forward pass of a batch on `g`. Blocks are pre-norm:
    /// each sublayer reads a layer-normed copy and adds into the residual
    /// stream, which feeds the output projection directly. Returns the stacked
    /// `(batch * tokens) x token_dim` noise prediction.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        batch: &[Sample<'_>],
        mut trace: Option<&mut Vec<Vec<CrossTrace>>>,
    ) -> Result<NodeId, DiffusionError> {
        let cfg = &self.config;
        let (l, d, w) = (cfg.latent_tokens, cfg.token_dim, cfg.width);
        let mut ids = std::collections::HashMap::new();
        let mut p = |g: &mut Graph, name: &str| -> Result<NodeId, DiffusionError> {
            if let Some(&id) = ids.get(name) {
                return Ok(id);
            }
            let id = g.param_from(&self.params, name)?;
            ids.insert(name.to_string(), id);
            Ok(id)
        };

        let mut x = Vec::with_capacity(batch.len() * l * d);
        let mut temb = Vec::with_capacity(batch.len() * l * w);
        for s in batch {
            if s.z.len() != cfg.latent_dim() {
                return Err(DiffusionError::LatentShape {
                    got: s.z.len(),
                    expected: cfg.latent_dim(),
                });
            }
            x.extend_from_slice(s.z);
            let e = time_embedding(s.t as f64, w);
            for _ in 0..l {
                temb.extend_from_slice(e.data());
            }
        }
        let rows = batch.len() * l;
        let x = g.input(Tensor::from_vec(rows, d, x))?;
        let te = g.input(Tensor::from_vec(rows, w, temb))?;

        let (iw, ib) = (p(g, "in.w")?, p(g, "in.b")?);
        let mut h = g.linear(x, iw, ib)?;
        let pos = p(g, "pos")?;
        let tiled = g.concat_rows(&vec![pos; batch.len()])?;
        h = g.add(h, tiled)?;
        let (tw, tb) = (p(g, "time.w")?, p(g, "time.b")?);
        let t = g.linear(te, tw, tb)?;
        h = g.add(h, t)?;

        let null = p(g, "null")?;
        let mut contexts = Vec::with_capacity(batch.len());
        for s in batch {
            let img = match &s.cond.image {
                Some(c) => g.input(c.clone())?,
                None => null,
            };
            let txt = match &s.cond.text {
                Some(c) => g.input(c.clone())?,
                None => null,
            };
            contexts.push((img, txt, branch_weights(s.cond)));
        }
        if let Some(tr) = trace.as_deref_mut() {
            tr.clear();
            tr.resize(batch.len(), Vec::new());
        }

        for b in 0..cfg.blocks {
            let n = |s: &str| format!("b{b}.{s}");

            // self-attention
            let q = p(g, &n("sa.q"))?;
            let k = p(g, &n("sa.k"))?;
            let v = p(g, &n("sa.v"))?;
            let (lg, lb) = (p(g, &n("ln1.g"))?, p(g, &n("ln1.b"))?);
            let x = g.layer_norm(h, lg, lb)?;
            let (qa, ka, va) = (g.matmul(x, q)?, g.matmul(x, k)?, g.matmul(x, v)?);
            let mut parts = Vec::with_capacity(batch.len());
            for i in 0..batch.len() {
                let qi = g.slice_rows(qa, i * l, l)?;
                let ki = g.slice_rows(ka, i * l, l)?;
                let vi = g.slice_rows(va, i * l, l)?;
                parts.push(g.attention(qi, ki, vi)?);
            }
            let sa = g.concat_rows(&parts)?;
            let o = p(g, &n("sa.o"))?;
            let sa = g.matmul(sa, o)?;
            h = g.add(h, sa)?;

            // dual cross-attention
            let q = p(g, &n("ca.q"))?;
            let (lg, lb) = (p(g, &n("ln2.g"))?, p(g, &n("ln2.b"))?);
            let x = g.layer_norm(h, lg, lb)?;
            let qa = g.matmul(x, q)?;
            let (ik, iv) = (p(g, &n("ca.img.k"))?, p(g, &n("ca.img.v"))?);
            let (tk, tv) = (p(g, &n("ca.txt.k"))?, p(g, &n("ca.txt.v"))?);
            let mut parts = Vec::with_capacity(batch.len());
            for (i, &(img, txt, (wi, wt))) in contexts.iter().enumerate() {
                let qi = g.slice_rows(qa, i * l, l)?;
                let tracing = trace.is_some();
                let need_img = wi != 0.0 || tracing;
                let need_txt = wt != 0.0 || tracing;
                let (ki, vi) = (g.matmul(img, ik)?, g.matmul(img, iv)?);
                let (kt, vt) = (g.matmul(txt, tk)?, g.matmul(txt, tv)?);
                let a_img = if need_img { Some(g.attention(qi, ki, vi)?) } else { None };
                let a_txt = if need_txt { Some(g.attention(qi, kt, vt)?) } else { None };
                let mixed = if wt == 0.0 {
                    a_img.expect("image branch computed")
                } else if wi == 0.0 {
                    a_txt.expect("text branch computed")
                } else {
                    match cfg.mix_mode {
                        MixMode::Output => {
                            let a = g.scale(a_img.expect("image branch"), wi)?;
                            let c = g.scale(a_txt.expect("text branch"), wt)?;
                            g.add(a, c)?
                        }
                        MixMode::Score => {
                            let keys = g.concat_rows(&[ki, kt])?;
                            let vals = g.concat_rows(&[vi, vt])?;
                            let (ni, nt) = (g.value(ki).rows(), g.value(kt).rows());
                            let mut off = vec![wi.ln(); ni];
                            off.extend(std::iter::repeat_n(wt.ln(), nt));
                            let off = g.input(Tensor::row_vector(off))?;
                            let kt_ = g.transpose(keys)?;
                            let s = g.matmul(qi, kt_)?;
                            let s = g.scale(s, 1.0 / (w as f64).sqrt())?;
                            let s = g.add_row(s, off)?;
                            let a = g.softmax_rows(s)?;
                            g.matmul(a, vals)?
                        }
                    }
                };
                if let Some(tr) = trace.as_deref_mut() {
                    tr[i].push(CrossTrace {
                        image: g.value(a_img.expect("traced")).clone(),
                        text: g.value(a_txt.expect("traced")).clone(),
                        mixed: g.value(mixed).clone(),
                    });
                }
                parts.push(mixed);
            }
            let ca = g.concat_rows(&parts)?;
            let o = p(g, &n("ca.o"))?;
            let ca = g.matmul(ca, o)?;
            h = g.add(h, ca)?;

            // feed-forward
            let (lg, lb) = (p(g, &n("ln3.g"))?, p(g, &n("ln3.b"))?);
            let x = g.layer_norm(h, lg, lb)?;
            let (w1, b1) = (p(g, &n("ff.w1"))?, p(g, &n("ff.b1"))?);
            let (w2, b2) = (p(g, &n("ff.w2"))?, p(g, &n("ff.b2"))?);
            let f = g.linear(x, w1, b1)?;
            let f = g.gelu(f)?;
            let f = g.linear(f, w2, b2)?;
            h = g.add(h, f)?;
        }
        let (ow, ob) = (p(g, "out.w")?, p(g, "out.b")?);
        Ok(g.linear(h, ow, ob)?)
    }

    /// Predicted noise for one latent.
    pub fn predict(&self, z: &[f64], t: usize, cond: &ConditionSet) -> Result<Vec<f64>, DiffusionError> {
        let mut g = Graph::new();
        let out = self.forward_graph(&mut g, &[Sample { z, t, cond }], None)?;
        Ok(g.value(out).data().to_vec())
    }

    /// Like [`Denoiser::predict`], also returning per-block cross-attention values.
    pub fn predict_traced(
        &self,
        z: &[f64],
        t: usize,
        cond: &ConditionSet,
    ) -> Result<(Vec<f64>, Vec<CrossTrace>), DiffusionError> {
        let mut g = Graph::new();
        let mut tr = Vec::new();
        let out = self.forward_graph(&mut g, &[Sample { z, t, cond }], Some(&mut tr))?;
        Ok((g.value(out).data().to_vec(), tr.remove(0)))
    }
}
