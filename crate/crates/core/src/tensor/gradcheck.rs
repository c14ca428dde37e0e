use super::{Graph, Tensor, Var};
use crate::error::Result;

const STEP: f64 = 1e-4;
const FLOOR: f64 = 1e-8;

/// Outcome of comparing autodiff gradients against central differences.
#[derive(Clone, Debug)]
pub struct GradReport {
    /// Largest `|a − f| / max(|a|, |f|, 1e-8)` over all checked entries.
    pub max_rel_err: f64,
    /// `(parameter index, element index)` of the worst entry.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    /// Set when the builder failed or produced a non-finite value.
    pub failure: Option<String>,
}

impl GradReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.failure.is_none() && self.max_rel_err <= tol
    }
}

fn eval<F>(build: &F, params: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.constant(p.clone())).collect();
    let loss = build(&mut g, &vars)?;
    Ok(g.value(loss).item())
}

/// Compares reverse-mode gradients of `build` with central finite
/// differences (step 1e-4) in 64-bit. `build` receives one leaf per entry of
/// `params` and must return a scalar. `max_per_param` bounds how many
/// elements of each parameter are probed (evenly strided); `None` probes all.
pub fn check_gradients<F>(build: F, params: &[Tensor<f64>], max_per_param: Option<usize>) -> GradReport
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut report = GradReport {
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
        failure: None,
    };
    let analytic: Vec<Option<Tensor<f64>>> = {
        let mut g = Graph::new();
        let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
        let loss = match build(&mut g, &vars) {
            Ok(l) => l,
            Err(e) => {
                report.failure = Some(e.to_string());
                report.max_rel_err = f64::INFINITY;
                return report;
            }
        };
        if !g.value(loss).item().is_finite() {
            report.failure = Some("non-finite loss".into());
            report.max_rel_err = f64::INFINITY;
            return report;
        }
        if let Err(e) = g.backward(loss) {
            report.failure = Some(e.to_string());
            report.max_rel_err = f64::INFINITY;
            return report;
        }
        vars.iter().map(|v| g.grad(*v)).collect()
    };

    let mut work: Vec<Tensor<f64>> = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        let n = p.numel();
        let stride = match max_per_param {
            Some(m) if m > 0 && n > m => n.div_ceil(m),
            _ => 1,
        };
        for ei in (0..n).step_by(stride) {
            let orig = p.data()[ei];
            work[pi].data_mut()[ei] = orig + STEP;
            let plus = eval(&build, &work);
            work[pi].data_mut()[ei] = orig - STEP;
            let minus = eval(&build, &work);
            work[pi].data_mut()[ei] = orig;
            let (plus, minus) = match (plus, minus) {
                (Ok(a), Ok(b)) => (a, b),
                (Err(e), _) | (_, Err(e)) => {
                    report.failure = Some(e.to_string());
                    report.max_rel_err = f64::INFINITY;
                    return report;
                }
            };
            let fd = (plus - minus) / (2.0 * STEP);
            let a = analytic[pi].as_ref().map_or(0.0, |g| g.data()[ei]);
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(FLOOR);
            if !rel.is_finite() {
                report.failure = Some(format!("non-finite gradient at param {pi} elem {ei}"));
                report.max_rel_err = f64::INFINITY;
                return report;
            }
            report.checked += 1;
            if rel > report.max_rel_err || report.worst.is_none() {
                if rel >= report.max_rel_err {
                    report.worst = Some((pi, ei));
                }
                report.max_rel_err = report.max_rel_err.max(rel);
            }
        }
    }
    report
}

type Builder = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

/// Reduces `y` to a scalar through a fixed random projection, so that every
/// output element contributes a distinct weight to the checked gradient.
fn project(g: &mut Graph<f64>, y: Var, w: &Tensor<f64>) -> Result<Var> {
    let w = g.constant(w.clone());
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

fn distribution<R: rand::Rng>(rows: usize, cols: usize, rng: &mut R) -> Tensor<f64> {
    let mut data: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(0.05..1.0)).collect();
    for row in data.chunks_mut(cols) {
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    Tensor::new(vec![rows, cols], data).expect("shape")
}

/// Gradient checks for every differentiable graph op on shapes drawn from
/// `seed`. Returns one report per op.
pub fn op_suite(seed: u64) -> Vec<(&'static str, GradReport)> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut dim = |lo: usize, hi: usize| rng.gen_range(lo..=hi);
    let (b, m, k, n) = (dim(1, 3), dim(2, 4), dim(2, 5), dim(2, 4));
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let mut randn = |shape: &[usize]| Tensor::<f64>::randn(shape, 1.0, &mut rng);

    let mut cases: Vec<(&'static str, Vec<Tensor<f64>>, Builder)> = Vec::new();

    let w = randn(&[m, n]);
    cases.push((
        "matmul",
        vec![randn(&[m, k]), randn(&[k, n])],
        Box::new(move |g, p| {
            let y = g.matmul(p[0], p[1])?;
            project(g, y, &w)
        }),
    ));
    let w = randn(&[b, m, n]);
    cases.push((
        "matmul_batched",
        vec![randn(&[b, m, k]), randn(&[b, k, n])],
        Box::new(move |g, p| {
            let y = g.matmul(p[0], p[1])?;
            project(g, y, &w)
        }),
    ));
    let w = randn(&[b, m, n]);
    cases.push((
        "matmul_bt",
        vec![randn(&[b, m, k]), randn(&[b, n, k])],
        Box::new(move |g, p| {
            let y = g.matmul_bt(p[0], p[1])?;
            project(g, y, &w)
        }),
    ));
    let w = randn(&[m, k]);
    cases.push((
        "add",
        vec![randn(&[m, k]), randn(&[m, k])],
        Box::new(move |g, p| {
            let y = g.add(p[0], p[1])?;
            project(g, y, &w)
        }),
    ));
    let w = randn(&[b, m, k]);
    cases.push((
        "add_bias",
        vec![randn(&[b, m, k]), randn(&[k])],
        Box::new(move |g, p| {
            let y = g.add_bias(p[0], p[1])?;
            project(g, y, &w)
        }),
    ));
    let w = randn(&[m, k]);
    cases.push((
        "scale",
        vec![randn(&[m, k])],
        Box::new(move |g, p| {
            let y = g.scale(p[0], -1.7);
            project(g, y, &w)
        }),
    ));
    let w = randn(&[m, k]);
    cases.push((
        "mul",
        vec![randn(&[m, k]), randn(&[m, k])],
        Box::new(move |g, p| {
            let y = g.mul(p[0], p[1])?;
            project(g, y, &w)
        }),
    ));
    let w = randn(&[b, m, k]);
    cases.push((
        "mul_along",
        vec![randn(&[b, m, k]), randn(&[m])],
        Box::new(move |g, p| {
            let y = g.mul_along(p[0], p[1], 1)?;
            project(g, y, &w)
        }),
    ));
    let w = randn(&[m, k]);
    cases.push((
        "gelu",
        vec![randn(&[m, k]).scaled(2.0)],
        Box::new(move |g, p| {
            let y = g.gelu(p[0]);
            project(g, y, &w)
        }),
    ));
    let w = randn(&[k, b, m]);
    cases.push((
        "reshape_permute",
        vec![randn(&[b * m, k])],
        Box::new(move |g, p| {
            let y = g.reshape(p[0], &[b, m, k])?;
            let y = g.permute(y, &[2, 0, 1])?;
            project(g, y, &w)
        }),
    ));
    let w = randn(&[m, k + n]);
    cases.push((
        "concat",
        vec![randn(&[m, k]), randn(&[m, n])],
        Box::new(move |g, p| {
            let y = g.concat(&[p[0], p[1]], 1)?;
            project(g, y, &w)
        }),
    ));
    let w = randn(&[b, m, 2]);
    cases.push((
        "narrow",
        vec![randn(&[b, m, k + 2])],
        Box::new(move |g, p| {
            let y = g.narrow(p[0], 2, 1, 2)?;
            project(g, y, &w)
        }),
    ));
    let idx: Vec<usize> = (0..k).rev().step_by(2).collect();
    let w = randn(&[m, idx.len()]);
    cases.push((
        "gather",
        vec![randn(&[m, k])],
        Box::new(move |g, p| {
            let y = g.gather(p[0], 1, &idx)?;
            project(g, y, &w)
        }),
    ));
    let ids: Vec<usize> = (0..b * m).map(|i| (i * 7 + 1) % k).collect();
    let w = randn(&[b * m, n]);
    cases.push((
        "embedding",
        vec![randn(&[k, n])],
        Box::new(move |g, p| {
            let y = g.embedding(p[0], &ids)?;
            project(g, y, &w)
        }),
    ));
    let w = randn(&[b, m, k]);
    cases.push((
        "softmax",
        vec![randn(&[b, m, k]).scaled(2.0)],
        Box::new(move |g, p| {
            let y = g.softmax(p[0])?;
            project(g, y, &w)
        }),
    ));
    let w = randn(&[m, k + 1]);
    cases.push((
        "layer_norm",
        vec![randn(&[m, k + 1]), randn(&[k + 1]), randn(&[k + 1])],
        Box::new(move |g, p| {
            let y = g.layer_norm(p[0], p[1], p[2], 1e-5)?;
            project(g, y, &w)
        }),
    ));
    cases.push(("sum", vec![randn(&[m, k])], Box::new(|g, p| Ok(g.sum(p[0])))));
    cases.push(("mean", vec![randn(&[b, m, k])], Box::new(|g, p| Ok(g.mean(p[0])))));
    let labels: Vec<usize> = (0..m).map(|i| (i * 5 + 3) % n).collect();
    cases.push((
        "cross_entropy",
        vec![randn(&[m, n]).scaled(3.0)],
        Box::new(move |g, p| g.cross_entropy(p[0], &labels)),
    ));
    let target = distribution(m, n, &mut rand_chacha::ChaCha8Rng::seed_from_u64(seed + 1));
    cases.push((
        "soft_cross_entropy",
        vec![randn(&[m, n]).scaled(3.0)],
        Box::new(move |g, p| g.soft_cross_entropy(p[0], &target)),
    ));
    cases.push((
        "mse",
        vec![randn(&[m, k]), randn(&[m, k])],
        Box::new(|g, p| g.mse(p[0], p[1])),
    ));
    let target = distribution(m, n, &mut rand_chacha::ChaCha8Rng::seed_from_u64(seed + 2));
    cases.push((
        "kl_div",
        vec![randn(&[m, n])],
        Box::new(move |g, p| {
            let q = g.softmax(p[0])?;
            g.kl_div(&target, q, None, 1e-9)
        }),
    ));

    cases
        .into_iter()
        .map(|(name, params, build)| (name, check_gradients(build, &params, None)))
        .collect()
}
