use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{forward, Batch, ForwardOptions, ModelConfig, ParamStore, StructureMask};
use crate::error::Result;
use crate::tensor::{check_gradients, GradReport, Graph, Tensor, Var};

/// Random padded batch for `config`, with every sequence non-empty.
pub fn random_batch<R: Rng>(config: &ModelConfig, size: usize, seq_len: usize, rng: &mut R) -> Batch {
    let lengths: Vec<usize> = (0..size).map(|_| rng.gen_range(1..=seq_len)).collect();
    let mut ids = vec![0; size * seq_len];
    for (b, &n) in lengths.iter().enumerate() {
        for t in 0..n {
            ids[b * seq_len + t] = rng.gen_range(0..config.vocab);
        }
    }
    let labels = (0..size).map(|_| rng.gen_range(0..config.n_classes)).collect();
    Batch {
        ids,
        lengths,
        seq_len,
        labels,
    }
}

/// Finite-difference check of the whole model (logits, hidden states and
/// relations) with respect to every weight tensor. Weights are redrawn with
/// a larger spread than the training init so that gradients are not
/// vanishingly small, and one head and a quarter of the neurons of layer 0
/// are pruned so that the gathered path is exercised too.
///
/// Attention key biases shift every score of a query row by the same amount,
/// so their true gradient is exactly zero and central differences only see
/// rounding noise. They are held out of the finite-difference probe and
/// instead required to have an analytic gradient below 1e-10.
pub fn check_model_gradients(config: &ModelConfig, seed: u64, max_per_tensor: usize) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = ParamStore::<f64>::init(config, seed)?;
    let params: Vec<Tensor<f64>> = base
        .tensors()
        .iter()
        .map(|t| {
            let noise = Tensor::<f64>::randn(t.shape(), 0.3, &mut rng);
            let data = t.data().iter().zip(noise.data()).map(|(a, b)| a + b).collect();
            Tensor::new(t.shape().to_vec(), data).expect("shape")
        })
        .collect();
    let seq_len = config.max_len.min(4);
    let batch = random_batch(config, 2, seq_len, &mut rng);
    let mut mask = StructureMask::full(config);
    mask.layers[0].self_heads[rng.gen_range(0..config.heads)] = false;
    for (j, bit) in mask.layers[0].ffn_neurons.iter_mut().enumerate() {
        *bit = j % 4 != 0;
    }
    let rh = (1..=config.d_model).rev().find(|r| config.d_model.is_multiple_of(*r) && *r <= 2).unwrap_or(1);
    let opts = ForwardOptions {
        relation_heads: Some(rh),
        gates: true,
    };
    let hidden_target = Tensor::<f64>::randn(&[2, seq_len, config.d_model], 1.0, &mut rng);
    let rel_w = Tensor::<f64>::randn(&[rh, 2, seq_len, seq_len], 1.0, &mut rng);

    let layout = base.layout();
    let held_out: Vec<usize> = layout
        .layers
        .iter()
        .flat_map(|l| std::iter::once(l.attn.k_b).chain(l.cross.map(|c| c.k_b)))
        .collect();
    let probed: Vec<usize> = (0..params.len()).filter(|i| !held_out.contains(i)).collect();

    let loss = |g: &mut Graph<f64>, p: &[Var]| -> Result<Var> {
            let out = forward(g, &base, p, &mask, &batch, opts)?;
            let ce = g.cross_entropy(out.logits, &batch.labels)?;
            let ht = g.constant(hidden_target.clone());
            let mse = g.mse(out.hidden, ht)?;
            let rel = out.relations.expect("relations requested");
            let mut total = g.add(ce, mse)?;
            for r in [rel.q, rel.k, rel.v] {
                let w = g.constant(rel_w.clone());
                let prod = g.mul(r, w)?;
                let s = g.sum(prod);
                total = g.add(total, s)?;
            }
            Ok(total)
    };

    let mut report = check_gradients(
        |g, p| {
            let mut all = Vec::with_capacity(params.len());
            let mut next = p.iter();
            for (i, t) in params.iter().enumerate() {
                all.push(if held_out.contains(&i) { g.constant(t.clone()) } else { *next.next().unwrap() });
            }
            loss(g, &all)
        },
        &probed.iter().map(|&i| params[i].clone()).collect::<Vec<_>>(),
        Some(max_per_tensor),
    );

    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|t| g.param(t.clone())).collect();
    let total = loss(&mut g, &vars)?;
    g.backward(total)?;
    for &i in &held_out {
        let worst = g.grad(vars[i]).map_or(0.0, |t| t.data().iter().fold(0.0f64, |m, v| m.max(v.abs())));
        if worst > 1e-10 {
            report.failure.get_or_insert(format!("{} should have zero gradient, got {worst:e}", layout.names[i]));
        }
    }
    Ok(report)
}
