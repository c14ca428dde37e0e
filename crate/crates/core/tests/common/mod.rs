#![allow(dead_code)]

pub mod reference;

use minidisc::data::{Dataset, Example};
use minidisc::model::ModelConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn small_config(layers: usize, heads: usize, d_model: usize, d_ffn: usize) -> ModelConfig {
    ModelConfig {
        layers,
        heads,
        d_model,
        d_ffn,
        vocab: 16,
        max_len: 8,
        n_classes: 2,
        with_cross_attention: false,
    }
}

/// Random tokens from 2..16 of length 5 to 8; label 1 sequences carry
/// token 1 somewhere. Separable from bag-of-token counts.
pub fn marker_data(n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let examples = (0..n)
        .map(|i| {
            let label = i % 2;
            let len = rng.gen_range(5..=8);
            let mut ids: Vec<usize> = (0..len).map(|_| rng.gen_range(2..16)).collect();
            if label == 1 {
                ids[rng.gen_range(0..len)] = 1;
            }
            Example { ids, label }
        })
        .collect();
    Dataset::new(examples, 8).unwrap()
}

/// Label 1 iff the first token occurs again later in the sequence.
pub fn repeat_data(n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let examples = (0..n)
        .map(|i| {
            let label = i % 2;
            loop {
                let ids: Vec<usize> = (0..8).map(|_| rng.gen_range(1..16)).collect();
                if usize::from(ids[1..].contains(&ids[0])) == label {
                    return Example { ids, label };
                }
            }
        })
        .collect();
    Dataset::new(examples, 8).unwrap()
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let j = i + idx[i..].iter().take_while(|&&k| v[k] == v[idx[i]]).count();
        let avg = (i + j - 1) as f64 / 2.0;
        for &k in &idx[i..j] {
            r[k] = avg;
        }
        i = j;
    }
    r
}

pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}
