//! Image and caption evaluation metrics, n-way identification and the
//! repeated-sentence filter.

use std::collections::HashMap;
use std::hash::Hash;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("size mismatch: {0} vs {1}")]
    SizeMismatch(usize, usize),
    #[error("need at least {needed} items for {needed}-way identification, got {got}")]
    TooFewItems { needed: usize, got: usize },
    #[error("embeddings need at least 2 dimensions, got {0}")]
    TooFewDims(usize),
    #[error("n_way must be at least 2")]
    BadWay,
}

/// Neumaier-compensated sum.
pub fn stable_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Mean of the defined values; `None` if there are none.
pub fn mean_defined(values: &[Option<f64>]) -> Option<f64> {
    let defined: Vec<f64> = values.iter().flatten().copied().collect();
    if defined.is_empty() {
        None
    } else {
        Some(stable_sum(defined.iter().copied()) / defined.len() as f64)
    }
}

/// Pearson correlation; `None` when either side has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    assert_eq!(a.len(), b.len(), "pearson needs equal lengths");
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    let constant = |v: &[f64]| v.iter().all(|x| *x == v[0]);
    if saa <= 0.0 || sbb <= 0.0 || constant(a) || constant(b) {
        return None;
    }
    Some((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some((a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)).clamp(-1.0, 1.0))
}

/// Bilinear resize of a row-major `w x h` grid (pixel-center aligned).
pub fn resize_bilinear(px: &[f64], w: usize, h: usize, nw: usize, nh: usize) -> Vec<f64> {
    assert_eq!(px.len(), w * h);
    let mut out = Vec::with_capacity(nw * nh);
    let coord = |i: usize, n: usize, m: usize| -> (usize, usize, f64) {
        let x = ((i as f64 + 0.5) * m as f64 / n as f64 - 0.5).clamp(0.0, (m - 1) as f64);
        let x0 = x.floor() as usize;
        let x1 = (x0 + 1).min(m - 1);
        (x0, x1, x - x0 as f64)
    };
    for r in 0..nh {
        let (r0, r1, fr) = coord(r, nh, h);
        for c in 0..nw {
            let (c0, c1, fc) = coord(c, nw, w);
            let top = px[r0 * w + c0] * (1.0 - fc) + px[r0 * w + c1] * fc;
            let bot = px[r1 * w + c0] * (1.0 - fc) + px[r1 * w + c1] * fc;
            out.push(top * (1.0 - fr) + bot * fr);
        }
    }
    out
}

/// Pearson correlation of flattened pixels. A generated grid of a different
/// size is first resized to the ground-truth size.
pub fn pixcorr_sized(
    generated: (&[f64], usize, usize),
    truth: (&[f64], usize, usize),
) -> Option<f64> {
    let (g, gw, gh) = generated;
    let (t, tw, th) = truth;
    if (gw, gh) == (tw, th) {
        pearson(g, t)
    } else {
        pearson(&resize_bilinear(g, gw, gh, tw, th), t)
    }
}

pub fn pixcorr(a: &[f64], b: &[f64]) -> Option<f64> {
    pearson(a, b)
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

fn gaussian_1d() -> [f64; SSIM_WINDOW] {
    let mut g = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in g.iter_mut().enumerate() {
        *v = (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = g.iter().sum();
    g.iter_mut().for_each(|v| *v /= s);
    g
}

/// Separable Gaussian filter over all fully contained window positions.
fn filter_valid(x: &[f64], w: usize, h: usize) -> Vec<f64> {
    let g = gaussian_1d();
    let (ow, oh) = (w + 1 - SSIM_WINDOW, h + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; h * ow];
    for r in 0..h {
        for c in 0..ow {
            rows[r * ow + c] = (0..SSIM_WINDOW).map(|k| g[k] * x[r * w + c + k]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = (0..SSIM_WINDOW).map(|k| g[k] * rows[(r + k) * ow + c]).sum();
        }
    }
    out
}

/// Mean local SSIM of two `w x h` grids with values in `[0, 1]`.
pub fn ssim_sized(a: &[f64], b: &[f64], w: usize, h: usize) -> Result<f64, MetricError> {
    if a.len() != b.len() {
        return Err(MetricError::SizeMismatch(a.len(), b.len()));
    }
    assert!(w >= SSIM_WINDOW && h >= SSIM_WINDOW, "grid smaller than the SSIM window");
    let sq = |x: &[f64], y: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(p, q)| p * q).collect() };
    let mu_a = filter_valid(a, w, h);
    let mu_b = filter_valid(b, w, h);
    let e_aa = filter_valid(&sq(a, a), w, h);
    let e_bb = filter_valid(&sq(b, b), w, h);
    let e_ab = filter_valid(&sq(a, b), w, h);
    let vals = (0..mu_a.len()).map(|i| {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = e_aa[i] - ma * ma;
        let vb = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
            / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2))
    });
    Ok(stable_sum(vals) / mu_a.len() as f64)
}

pub fn ssim(a: &[f64], b: &[f64]) -> Result<f64, MetricError> {
    let side = (a.len() as f64).sqrt().round() as usize;
    ssim_sized(a, b, side, side)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Similarity {
    #[default]
    Pearson,
    Cosine,
}

/// Per-item n-way identification rates.
///
/// Item `i` is correct in a trial when `sim(pred_i, true_i)` beats
/// `sim(pred_i, true_j)` for each of `n_way - 1` distractors `j`, drawn
/// without replacement. Rates average `trials` draws per item.
pub fn nway_identification(
    truth: &[Vec<f64>],
    pred: &[Vec<f64>],
    n_way: usize,
    trials: usize,
    seed: u64,
    sim: Similarity,
) -> Result<Vec<f64>, MetricError> {
    let n = truth.len();
    if pred.len() != n {
        return Err(MetricError::SizeMismatch(n, pred.len()));
    }
    if n_way < 2 {
        return Err(MetricError::BadWay);
    }
    if n < n_way {
        return Err(MetricError::TooFewItems { needed: n_way, got: n });
    }
    let d = truth[0].len();
    if d < 2 {
        return Err(MetricError::TooFewDims(d));
    }
    let f = |a: &[f64], b: &[f64]| -> f64 {
        match sim {
            Similarity::Pearson => pearson(a, b),
            Similarity::Cosine => cosine(a, b),
        }
        .unwrap_or(f64::NEG_INFINITY)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rates = Vec::with_capacity(n);
    for i in 0..n {
        let own = f(&pred[i], &truth[i]);
        let sims: Vec<f64> = (0..n).map(|j| if j == i { own } else { f(&pred[i], &truth[j]) }).collect();
        let mut correct = 0usize;
        for _ in 0..trials {
            let picks = sample(&mut rng, n - 1, n_way - 1);
            let ok = picks.iter().all(|k| {
                let j = if k >= i { k + 1 } else { k };
                own > sims[j]
            });
            correct += ok as usize;
        }
        rates.push(correct as f64 / trials as f64);
    }
    Ok(rates)
}

/// `1 - pearson` per item; `None` where undefined.
pub fn embedding_distance(truth: &[Vec<f64>], pred: &[Vec<f64>]) -> Vec<Option<f64>> {
    truth
        .iter()
        .zip(pred)
        .map(|(t, p)| pearson(t, p).map(|r| 1.0 - r))
        .collect()
}

/// Minimum chunk count over all maximum-cardinality exact alignments, and
/// the number of matches.
fn align<T: PartialEq>(reference: &[T], hyp: &[T]) -> (usize, usize) {
    assert!(reference.len() <= 64, "alignment supports up to 64 reference tokens");
    // state: hypothesis position, used reference positions, reference
    // position matched by the previous hypothesis token
    type Key = (usize, u64, Option<usize>);
    fn go<T: PartialEq>(
        r: &[T],
        h: &[T],
        i: usize,
        used: u64,
        prev: Option<usize>,
        memo: &mut HashMap<Key, (usize, usize)>,
    ) -> (usize, usize) {
        if i == h.len() {
            return (0, 0);
        }
        if let Some(&v) = memo.get(&(i, used, prev)) {
            return v;
        }
        // leave h[i] unmatched
        let mut best = go(r, h, i + 1, used, None, memo);
        for j in 0..r.len() {
            if used & (1 << j) == 0 && r[j] == h[i] {
                let (m, c) = go(r, h, i + 1, used | (1 << j), Some(j), memo);
                let new_chunk = usize::from(!(prev.is_some() && prev == j.checked_sub(1)));
                let cand = (m + 1, c + new_chunk);
                if cand.0 > best.0 || (cand.0 == best.0 && cand.1 < best.1) {
                    best = cand;
                }
            }
        }
        memo.insert((i, used, prev), best);
        best
    }
    go(reference, hyp, 0, 0, None, &mut HashMap::new())
}

/// METEOR with exact unigram matching.
pub fn meteor<T: PartialEq>(reference: &[T], hyp: &[T]) -> f64 {
    if reference.is_empty() || hyp.is_empty() {
        return 0.0;
    }
    let (m, chunks) = align(reference, hyp);
    if m == 0 {
        return 0.0;
    }
    let p = m as f64 / hyp.len() as f64;
    let r = m as f64 / reference.len() as f64;
    let fmean = 10.0 * p * r / (r + 9.0 * p);
    let penalty = 0.5 * (chunks as f64 / m as f64).powi(3);
    fmean * (1.0 - penalty)
}

fn f1(overlap: usize, ref_len: usize, hyp_len: usize) -> (f64, f64) {
    if overlap == 0 {
        return (0.0, 0.0);
    }
    let p = overlap as f64 / hyp_len as f64;
    let r = overlap as f64 / ref_len as f64;
    (2.0 * p * r / (p + r), r)
}

/// ROUGE-1 `(F1, recall)` from clipped unigram counts.
pub fn rouge1_with_recall<T: Eq + Hash>(reference: &[T], hyp: &[T]) -> (f64, f64) {
    let mut counts: HashMap<&T, usize> = HashMap::new();
    for t in reference {
        *counts.entry(t).or_default() += 1;
    }
    let mut overlap = 0;
    for t in hyp {
        if let Some(c) = counts.get_mut(t) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    f1(overlap, reference.len(), hyp.len())
}

pub fn rouge1<T: Eq + Hash>(reference: &[T], hyp: &[T]) -> f64 {
    rouge1_with_recall(reference, hyp).0
}

pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    for x in a {
        let mut cur = vec![0usize; b.len() + 1];
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        prev = cur;
    }
    prev[b.len()]
}

/// ROUGE-L `(F1, recall)` from the longest common subsequence.
pub fn rouge_l_with_recall<T: PartialEq>(reference: &[T], hyp: &[T]) -> (f64, f64) {
    f1(lcs_len(reference, hyp), reference.len(), hyp.len())
}

pub fn rouge_l<T: PartialEq>(reference: &[T], hyp: &[T]) -> f64 {
    rouge_l_with_recall(reference, hyp).0
}

/// Drops repeated sentences (split on '.', compared case- and
/// whitespace-insensitively), keeping the first occurrence.
pub fn dedup_sentences(text: &str) -> String {
    let mut seen = std::collections::HashSet::new();
    let mut kept = Vec::new();
    for s in text.split('.') {
        let s = s.trim();
        if s.is_empty() {
            continue;
        }
        let key = s
            .split_whitespace()
            .map(str::to_lowercase)
            .collect::<Vec<_>>()
            .join(" ");
        if seen.insert(key) {
            kept.push(s);
        }
    }
    let mut out = kept.join(". ");
    if text.trim_end().ends_with('.') && !out.is_empty() {
        out.push('.');
    }
    out
}

pub const IMAGE_COLUMNS: [&str; 5] = ["PixCorr", "SSIM", "Ident-Low", "Ident-High", "Dist-High"];
pub const TEXT_COLUMNS: [&str; 4] = ["Meteor", "Rouge-1", "Rouge-L", "Ident-Text"];

/// Per-item rows plus their column means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Option<f64>>>,
    pub n_way: usize,
    pub trials: usize,
    pub seed: u64,
}

impl MetricReport {
    pub fn new(columns: &[&str], n_way: usize, trials: usize, seed: u64) -> Self {
        Self {
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
            n_way,
            trials,
            seed,
        }
    }

    pub fn push(&mut self, row: Vec<Option<f64>>) {
        assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn summary(&self) -> Vec<Option<f64>> {
        (0..self.columns.len())
            .map(|c| mean_defined(&self.rows.iter().map(|r| r[c]).collect::<Vec<_>>()))
            .collect()
    }

    pub fn mean(&self, column: &str) -> Option<f64> {
        let c = self.columns.iter().position(|n| n == column)?;
        self.summary()[c]
    }

    /// `item` column then metrics; a final `mean` row; missing values empty.
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> csv::Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header = vec!["item".to_string()];
        header.extend(self.columns.iter().cloned());
        wr.write_record(&header)?;
        let fmt = |v: &Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        for (i, row) in self.rows.iter().enumerate() {
            let mut rec = vec![i.to_string()];
            rec.extend(row.iter().map(fmt));
            wr.write_record(&rec)?;
        }
        let mut rec = vec!["mean".to_string()];
        rec.extend(self.summary().iter().map(fmt));
        wr.write_record(&rec)?;
        wr.flush()?;
        Ok(())
    }
}
