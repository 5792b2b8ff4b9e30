use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{with_corrupted_backward, AttentionShape, Graph, ParamStore, Reduction, Tensor, Var, IGNORE_INDEX};

/// Gradients below this magnitude are compared absolutely rather than
/// relatively, so round-off on near-zero entries does not dominate.
const REL_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `(input index, element index)` of the worst entry.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Compares backward gradients of the scalar `f(inputs)` against central
/// differences with step `h`, over every element of every input.
pub fn grad_check<F>(f: F, inputs: &[Tensor], h: f64) -> GradCheckReport
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let eval = |ins: &[Tensor]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &vars);
        (g, vars, out)
    };
    let (mut g, vars, out) = eval(inputs);
    g.backward(out);
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| g.grad(v).map_or_else(|| vec![0.0; g.value(v).len()], |s| s.to_vec()))
        .collect();

    let mut report = GradCheckReport { max_rel_err: 0.0, worst: (0, 0), analytic: 0.0, numeric: 0.0, checked: 0 };
    let mut work = inputs.to_vec();
    for (ti, t) in inputs.iter().enumerate() {
        for e in 0..t.len() {
            let x0 = t.data[e];
            work[ti].data[e] = x0 + h;
            let (gp, _, op) = eval(&work);
            work[ti].data[e] = x0 - h;
            let (gm, _, om) = eval(&work);
            work[ti].data[e] = x0;
            let num = (gp.value(op).item() - gm.value(om).item()) / (2.0 * h);
            let an = analytic[ti][e];
            let err = (an - num).abs() / an.abs().max(num.abs()).max(REL_FLOOR);
            report.checked += 1;
            if err > report.max_rel_err || report.checked == 1 {
                report = GradCheckReport { max_rel_err: err, worst: (ti, e), analytic: an, numeric: num, checked: report.checked };
            }
        }
    }
    report
}

/// Central-difference check of `f` against the gradients of named
/// parameters in `store`, probing up to `per_tensor` evenly spaced entries
/// of each.
pub fn param_grad_check<F>(store: &ParamStore, names: &[&str], per_tensor: usize, h: f64, f: F) -> GradCheckReport
where
    F: Fn(&mut Graph, &ParamStore) -> Var,
{
    let mut g = Graph::new();
    let out = f(&mut g, store);
    g.backward(out);
    let grads = g.param_grads();
    let mut report = GradCheckReport { max_rel_err: 0.0, worst: (0, 0), analytic: 0.0, numeric: 0.0, checked: 0 };
    let mut work = store.clone();
    for (ti, name) in names.iter().enumerate() {
        let len = store.get(name).unwrap_or_else(|| panic!("unknown parameter {name}")).len();
        let an = grads.iter().find(|(n, _)| n == name).map_or_else(|| vec![0.0; len], |(_, g)| g.clone());
        for e in (0..len).step_by((len / per_tensor.max(1)).max(1)) {
            let x0 = store.get(name).unwrap().data[e];
            let mut eval = |x: f64| {
                work.get_mut(name).unwrap().data[e] = x;
                let mut g = Graph::new();
                let o = f(&mut g, &work);
                g.value(o).item()
            };
            let num = (eval(x0 + h) - eval(x0 - h)) / (2.0 * h);
            work.get_mut(name).unwrap().data[e] = x0;
            let err = (an[e] - num).abs() / an[e].abs().max(num.abs()).max(REL_FLOOR);
            report.checked += 1;
            if err > report.max_rel_err || report.checked == 1 {
                report = GradCheckReport { max_rel_err: err, worst: (ti, e), analytic: an[e], numeric: num, checked: report.checked };
            }
        }
    }
    report
}

fn rand_t(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| StandardNormal.sample(&mut rng)).collect())
}

/// Reduces any tensor to a scalar through a fixed random weighting so
/// every output element contributes a distinct gradient.
fn probe(g: &mut Graph, y: Var) -> Var {
    if g.value(y).len() == 1 {
        return y;
    }
    let t = g.value(y).clone();
    let w = g.constant(rand_t(t.rows(), t.cols(), 999));
    let p = g.mul(y, w);
    g.mean_all(p)
}

fn probed(inputs: &[Tensor], f: impl Fn(&mut Graph, &[Var]) -> Var) -> GradCheckReport {
    grad_check(|g, v| { let y = f(g, v); probe(g, y) }, inputs, 1e-5)
}

/// Gradient check of every differentiable operator on random inputs.
pub fn operator_checks() -> Vec<(&'static str, GradCheckReport)> {
    let pair = [rand_t(3, 4, 1), rand_t(3, 4, 2)];
    let x = rand_t(4, 6, 3);
    let y = rand_t(4, 6, 7);
    let logits = rand_t(5, 7, 9);
    let targets = [1, IGNORE_INDEX, 6, 0, 3];
    let cross = AttentionShape { batch: 2, q_len: 3, k_len: 4, heads: 2 };
    let own = AttentionShape { batch: 2, q_len: 4, k_len: 4, heads: 2 };
    let qkv = [rand_t(6, 4, 1), rand_t(8, 4, 2), rand_t(8, 4, 3)];
    let mask = [true, true, false, true, false, true, true, true];
    vec![
        ("matmul", probed(&[rand_t(3, 4, 1), rand_t(4, 5, 2)], |g, v| g.matmul(v[0], v[1]))),
        ("add", probed(&pair, |g, v| g.add(v[0], v[1]))),
        ("sub", probed(&pair, |g, v| g.sub(v[0], v[1]))),
        ("mul", probed(&pair, |g, v| g.mul(v[0], v[1]))),
        ("scale", probed(&pair[..1], |g, v| g.scale(v[0], 3.0))),
        ("exp", probed(&pair[..1], |g, v| g.exp(v[0]))),
        ("gelu", probed(&pair[..1], |g, v| g.gelu(v[0]))),
        ("softplus", probed(&pair[..1], |g, v| g.softplus(v[0]))),
        ("scale_rows", probed(&pair[..1], |g, v| g.scale_rows(v[0], &[0.5, -2.0, 3.0]))),
        ("linear", probed(&[rand_t(3, 4, 1), rand_t(4, 2, 2), rand_t(1, 2, 5)], |g, v| g.linear(v[0], v[1], v[2]))),
        ("add_bias", probed(&[rand_t(3, 4, 1), rand_t(1, 4, 5)], |g, v| g.add_bias(v[0], v[1]))),
        ("softmax_rows", probed(&[x.clone()], |g, v| g.softmax_rows(v[0]))),
        ("layer_norm", probed(&[x.clone(), rand_t(1, 6, 4), rand_t(1, 6, 5)], |g, v| g.layer_norm(v[0], v[1], v[2]))),
        ("rope", probed(&[x.clone()], |g, v| g.rope(v[0], &[0.0, 1.0, 2.0, 7.0]))),
        ("gather_rows", probed(&[x.clone()], |g, v| g.gather_rows(v[0], &[3, 0, 3, 1]))),
        ("concat_rows", probed(&[x.clone(), rand_t(2, 6, 6)], |g, v| g.concat_rows(&[v[0], v[1]]))),
        ("mean_pool_groups", probed(&[x.clone()], |g, v| g.mean_pool_groups(v[0], 2))),
        ("sum_sq_rows", probed(&[x.clone()], |g, v| g.sum_sq_rows(v[0]))),
        ("mean_all", probed(&[x.clone()], |g, v| g.mean_all(v[0]))),
        ("mse_rows", probed(&[x.clone(), y.clone()], |g, v| g.mse_rows(v[0], v[1]))),
        ("cosine_rows", probed(&[x.clone(), y.clone()], |g, v| g.cosine_rows(v[0], v[1]))),
        ("gaussian_kl", probed(&[x.clone(), rand_t(4, 6, 8)], |g, v| g.gaussian_kl(v[0], v[1], 0.25))),
        ("cross_entropy_mean", probed(&[logits.clone()], |g, v| g.cross_entropy(v[0], &targets, Reduction::Mean))),
        ("cross_entropy_sum", probed(&[logits], |g, v| g.cross_entropy(v[0], &targets, Reduction::Sum))),
        ("attention", probed(&qkv, |g, v| g.attention(v[0], v[1], v[2], cross, None))),
        ("attention_masked", probed(&qkv, |g, v| g.attention(v[0], v[1], v[2], cross, Some(&mask)))),
        ("self_attention", probed(&[rand_t(8, 4, 4)], |g, v| g.attention(v[0], v[0], v[0], own, None))),
    ]
}

/// The matmul check rerun with a deliberately wrong backward rule; a
/// working checker reports a large error here.
pub fn negative_control() -> GradCheckReport {
    with_corrupted_backward(|| probed(&[rand_t(3, 4, 1), rand_t(4, 5, 2)], |g, v| g.matmul(v[0], v[1])))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_is_exact() {
        let r = grad_check(|g, v| { let s = g.scale(v[0], 3.0); g.mean_all(s) }, &[rand_t(3, 4, 1)], 1e-5);
        assert!(r.max_rel_err < 1e-9, "{r:?}");
    }

    #[test]
    fn every_operator_passes() {
        for (name, r) in operator_checks() {
            assert!(r.max_rel_err < 1e-4, "{name}: {r:?}");
            assert!(r.checked > 0);
        }
    }

    #[test]
    fn corrupted_backward_is_caught() {
        assert!(negative_control().max_rel_err > 1e-2);
        assert!(operator_checks()[0].1.max_rel_err < 1e-6);
    }
}
