use neurodecode::metrics::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Every alignment, scored by brute force: hyp token i either stays
/// unmatched or takes any unused equal reference token.
fn meteor_oracle(r: &[u8], h: &[u8]) -> f64 {
    fn walk(r: &[u8], h: &[u8], i: usize, used: &mut Vec<bool>, pairs: &mut Vec<(usize, usize)>, out: &mut Vec<Vec<(usize, usize)>>) {
        if i == h.len() {
            out.push(pairs.clone());
            return;
        }
        walk(r, h, i + 1, used, pairs, out);
        for j in 0..r.len() {
            if !used[j] && r[j] == h[i] {
                used[j] = true;
                pairs.push((i, j));
                walk(r, h, i + 1, used, pairs, out);
                pairs.pop();
                used[j] = false;
            }
        }
    }
    let mut all = Vec::new();
    walk(r, h, 0, &mut vec![false; r.len()], &mut Vec::new(), &mut all);
    let m = all.iter().map(Vec::len).max().unwrap();
    if m == 0 {
        return 0.0;
    }
    let chunks = all
        .iter()
        .filter(|a| a.len() == m)
        .map(|a| {
            // pairs are already in hypothesis order
            1 + a.windows(2).filter(|w| !(w[1].0 == w[0].0 + 1 && w[1].1 == w[0].1 + 1)).count()
        })
        .min()
        .unwrap();
    let p = m as f64 / h.len() as f64;
    let rc = m as f64 / r.len() as f64;
    let f = 10.0 * p * rc / (rc + 9.0 * p);
    f * (1.0 - 0.5 * (chunks as f64 / m as f64).powi(3))
}

#[test]
fn meteor_matches_exhaustive_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..200 {
        let lr = rng.random_range(1..=7);
        let lh = rng.random_range(1..=7);
        let r: Vec<u8> = (0..lr).map(|_| rng.random_range(0..4)).collect();
        let h: Vec<u8> = (0..lh).map(|_| rng.random_range(0..4)).collect();
        let (got, want) = (meteor(&r, &h), meteor_oracle(&r, &h));
        assert!((got - want).abs() < 1e-12, "{r:?} {h:?}: {got} vs {want}");
    }
    let abcd = [0u8, 1, 2, 3];
    assert!((meteor(&abcd, &[0, 2, 1, 3]) - meteor_oracle(&abcd, &[0, 2, 1, 3])).abs() < 1e-15);
}

#[test]
fn embedding_distance_of_random_pairs_is_near_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let n = 2000;
    let d = 16;
    let mk = |rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
        (0..n).map(|_| (0..d).map(|_| rng.random::<f64>()).collect()).collect()
    };
    let (a, b) = (mk(&mut rng), mk(&mut rng));
    let dist = embedding_distance(&a, &b);
    let mean = mean_defined(&dist).unwrap();
    // Var(r) = 1/(d-1) for independent Gaussian-like samples
    let sd = (1.0 / (d as f64 - 1.0) / n as f64).sqrt();
    assert!((mean - 1.0).abs() < 3.0 * sd + 0.01, "mean {mean}");
}

#[test]
fn identification_degrades_with_noise() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let n = 128;
    let truth: Vec<Vec<f64>> = (0..n).map(|_| (0..16).map(|_| rng.random::<f64>()).collect()).collect();
    let normal = Normal::new(0.0, 1.0).unwrap();
    let noise: Vec<Vec<f64>> = (0..n).map(|_| (0..16).map(|_| normal.sample(&mut rng)).collect()).collect();
    let rates: Vec<f64> = [0.0, 0.1, 0.2, 0.4, 0.8, 1.6, 3.2]
        .iter()
        .map(|&s| {
            let pred: Vec<Vec<f64>> = truth
                .iter()
                .zip(&noise)
                .map(|(t, e)| t.iter().zip(e).map(|(a, b)| a + s * b).collect())
                .collect();
            let r = nway_identification(&truth, &pred, 2, 100, 7, Similarity::Pearson).unwrap();
            r.iter().sum::<f64>() / n as f64
        })
        .collect();
    let inversions = rates.windows(2).filter(|w| w[1] > w[0]).count();
    assert!(inversions <= 1, "{rates:?}");
    assert_eq!(rates[0], 1.0);
}

#[test]
fn identification_is_seed_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let t: Vec<Vec<f64>> = (0..20).map(|_| (0..4).map(|_| rng.random::<f64>()).collect()).collect();
    let p: Vec<Vec<f64>> = (0..20).map(|_| (0..4).map(|_| rng.random::<f64>()).collect()).collect();
    let a = nway_identification(&t, &p, 3, 50, 9, Similarity::Cosine).unwrap();
    let b = nway_identification(&t, &p, 3, 50, 9, Similarity::Cosine).unwrap();
    assert_eq!(a, b);
}

#[test]
fn summary_row_matches_offline_means() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let mut rep = MetricReport::new(&IMAGE_COLUMNS, 2, 100, 0);
    for _ in 0..37 {
        rep.push((0..5).map(|_| Some(rng.random::<f64>())).collect());
    }
    let mut buf = Vec::new();
    rep.write_csv(&mut buf).unwrap();
    let mut rdr = csv::Reader::from_reader(buf.as_slice());
    let rows: Vec<Vec<String>> = rdr.records().map(|r| r.unwrap().iter().map(String::from).collect()).collect();
    let (items, summary) = rows.split_at(rows.len() - 1);
    assert_eq!(summary[0][0], "mean");
    for c in 1..=5 {
        let mean: f64 = items.iter().map(|r| r[c].parse::<f64>().unwrap()).sum::<f64>() / items.len() as f64;
        let got: f64 = summary[0][c].parse().unwrap();
        // CSV values carry 6 decimals
        assert!((got - mean).abs() < 1e-6);
        assert!((rep.summary()[c - 1].unwrap() - rep.rows.iter().map(|r| r[c - 1].unwrap()).sum::<f64>() / 37.0).abs() < 1e-9);
    }
}

fn grid() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..1.0, 256)
}

fn sentence() -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(0u8..6, 1..10)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn image_metrics_symmetric_and_in_range(a in grid(), b in grid()) {
        let s1 = ssim(&a, &b).unwrap();
        let s2 = ssim(&b, &a).unwrap();
        prop_assert!((s1 - s2).abs() < 1e-12);
        prop_assert!((-1.0..=1.0).contains(&s1));
        if let Some(r) = pixcorr(&a, &b) {
            prop_assert!((r - pixcorr(&b, &a).unwrap()).abs() < 1e-12);
            prop_assert!((-1.0..=1.0).contains(&r));
        }
    }

    #[test]
    fn text_metrics_in_range(r in sentence(), h in sentence()) {
        for v in [meteor(&r, &h), rouge1(&r, &h), rouge_l(&r, &h)] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn rouge_agree_on_contiguous_substrings(r in sentence(), a in 0usize..10, b in 0usize..10) {
        let (lo, hi) = (a.min(b) % r.len(), (a.max(b) % r.len()) + 1);
        prop_assume!(lo < hi);
        let h = &r[lo..hi];
        prop_assert!((rouge1(&r, h) - rouge_l(&r, h)).abs() < 1e-12);
    }
}
