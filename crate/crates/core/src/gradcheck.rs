//! Central finite-difference gradient checking.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dsp::PatchGrid;
use crate::encoder::{init_encoder, EncoderConfig, EncoderWeights};
use crate::error::Result;
use crate::pretrain::mlm_loss;
use crate::tensor::{Graph, NodeId, Tensor};

/// Norm-relative error between two gradient sets,
/// `‖a − n‖ / max(‖a‖, ‖n‖, floor)`.
pub fn relative_error(analytic: &[Tensor], numeric: &[Tensor], floor: f64) -> f64 {
    let mut diff = 0.0;
    let mut na = 0.0;
    let mut nn = 0.0;
    for (a, n) in analytic.iter().zip(numeric) {
        for (x, y) in a.data().iter().zip(n.data()) {
            diff += (x - y) * (x - y);
            na += x * x;
            nn += y * y;
        }
    }
    diff.sqrt() / na.sqrt().max(nn.sqrt()).max(floor)
}

/// Central differences of `loss` with respect to every element of `params`.
pub fn numeric_gradients<F>(params: &[Tensor], step: f64, mut loss: F) -> Vec<Tensor>
where
    F: FnMut(&[Tensor]) -> f64,
{
    let mut work = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let mut g = Tensor::zeros(params[i].shape());
        for j in 0..params[i].len() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + step;
            let up = loss(&work);
            work[i].data_mut()[j] = orig - step;
            let down = loss(&work);
            work[i].data_mut()[j] = orig;
            g.data_mut()[j] = (up - down) / (2.0 * step);
        }
        out.push(g);
    }
    out
}

/// One finite-difference comparison.
#[derive(Clone, Debug)]
pub struct OpCheck {
    pub name: &'static str,
    pub relative_error: f64,
}

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
const FLOOR: f64 = 1e-8;

type Build = dyn Fn(&mut Graph, &[NodeId]) -> Result<NodeId>;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("non-empty shape")
}

/// Analytic vs. numeric gradients of `sum(build(params) ⊙ R)` for a fixed random `R`.
fn check_op(name: &'static str, params: Vec<Tensor>, build: &Build, rng: &mut ChaCha8Rng) -> Result<OpCheck> {
    let forward = |ps: &[Tensor], proj: Option<&Tensor>| -> Result<(Graph, NodeId, Vec<NodeId>)> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = ps.iter().map(|t| g.leaf(t.clone().with_grad())).collect();
        let out = build(&mut g, &ids)?;
        let loss = match proj {
            Some(r) if g.value(out).len() > 1 => {
                let r = g.constant(r.clone());
                let m = g.mul(out, r)?;
                g.sum(m)
            }
            _ => out,
        };
        Ok((g, loss, ids))
    };
    let (g0, out0, _) = forward(&params, None)?;
    let proj = uniform(rng, g0.value(out0).shape(), -1.0, 1.0);
    let (g, loss, ids) = forward(&params, Some(&proj))?;
    let mut grads = g.backward(loss)?;
    let analytic: Vec<Tensor> = ids.iter().zip(&params).map(|(&id, t)| grads.take_or_zeros(id, t)).collect();
    let numeric = numeric_gradients(&params, STEP, |ps| {
        let (g, loss, _) = forward(ps, Some(&proj)).expect("shapes fixed");
        g.value(loss).data()[0]
    });
    Ok(OpCheck { name, relative_error: relative_error(&analytic, &numeric, FLOOR) })
}

/// Finite-difference checks of every differentiable graph op on random inputs.
pub fn check_ops(seed: u64) -> Result<Vec<OpCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let (m, k, n) = (r.gen_range(1..5), r.gen_range(1..5), r.gen_range(1..5));
    let mut out = Vec::new();
    let mut run = |name: &'static str, ps: Vec<Tensor>, b: &Build, r: &mut ChaCha8Rng| -> Result<()> {
        out.push(check_op(name, ps, b, r)?);
        Ok(())
    };
    let mat = |r: &mut ChaCha8Rng, a: usize, b: usize| uniform(r, &[a, b], -2.0, 2.0);

    let ps = vec![mat(r, m, k), mat(r, k, n)];
    run("matmul", ps, &|g, p| g.matmul(p[0], p[1]), r)?;
    let ps = vec![mat(r, m, k)];
    run("transpose", ps, &|g, p| Ok(g.transpose(p[0])), r)?;
    let ps = vec![mat(r, m, k), mat(r, m, k)];
    run("add", ps, &|g, p| g.add(p[0], p[1]), r)?;
    let ps = vec![mat(r, m, k), uniform(r, &[k], -1.0, 1.0)];
    run("add_row", ps, &|g, p| g.add_row(p[0], p[1]), r)?;
    let ps = vec![mat(r, m, k), mat(r, m, k)];
    run("mul", ps, &|g, p| g.mul(p[0], p[1]), r)?;
    let c = r.gen_range(-3.0..3.0);
    let ps = vec![mat(r, m, k)];
    run("scale", ps, &move |g, p| Ok(g.scale(p[0], c)), r)?;
    let ps = vec![mat(r, m, k + 1)];
    run("softmax_rows", ps, &|g, p| Ok(g.softmax_rows(p[0])), r)?;
    let ps = vec![mat(r, m, k + 1), uniform(r, &[k + 1], 0.5, 1.5), uniform(r, &[k + 1], -1.0, 1.0)];
    run("layer_norm", ps, &|g, p| g.layer_norm(p[0], p[1], p[2], 1e-5), r)?;
    let ps = vec![uniform(r, &[m, k], -4.0, 4.0)];
    run("gelu", ps, &|g, p| Ok(g.gelu(p[0])), r)?;
    let (start, len) = (r.gen_range(0..k), 1);
    let ps = vec![mat(r, m, k + 1)];
    run("slice_cols", ps, &move |g, p| g.slice_cols(p[0], start, len + 1), r)?;
    let ps = vec![mat(r, m + 1, k)];
    run("slice_rows", ps, &move |g, p| g.slice_rows(p[0], 1, m), r)?;
    let ps = vec![mat(r, m, k), mat(r, m, n)];
    run("concat_cols", ps, &|g, p| g.concat_cols(&[p[0], p[1]]), r)?;
    let rows: Vec<usize> = (0..m + 2).map(|_| r.gen_range(0..m)).collect();
    let ps = vec![mat(r, m, k)];
    run("gather_rows", ps, &move |g, p| g.gather_rows(p[0], &rows), r)?;
    let flags: Vec<bool> = (0..m).map(|_| r.gen()).collect();
    let ps = vec![mat(r, m, k), uniform(r, &[k], -1.0, 1.0)];
    run("mask_rows", ps, &move |g, p| g.mask_rows(p[0], p[1], &flags), r)?;
    let ps = vec![mat(r, m * 2, k)];
    run("group_mean_rows", ps, &|g, p| g.group_mean_rows(p[0], 2), r)?;
    let targets: Vec<usize> = (0..m).map(|_| r.gen_range(0..k + 1)).collect();
    let ps = vec![mat(r, m, k + 1)];
    run("cross_entropy", ps, &move |g, p| g.cross_entropy(p[0], &targets), r)?;
    let bits: Vec<f64> = (0..m * k).map(|_| r.gen_range(0..2) as f64).collect();
    let ps = vec![mat(r, m, k)];
    run("bce_with_logits", ps, &move |g, p| g.bce_with_logits(p[0], &bits), r)?;
    let ps = vec![mat(r, m, k)];
    run("sum", ps, &|g, p| Ok(g.sum(p[0])), r)?;
    let ps = vec![mat(r, m, k)];
    run("mean", ps, &|g, p| Ok(g.mean(p[0])), r)?;
    Ok(out)
}

/// One-layer encoder used for the end-to-end loss check.
pub fn one_layer_config() -> EncoderConfig {
    EncoderConfig {
        preset: "one-layer".into(),
        layers: 1,
        dim: 8,
        heads: 2,
        ff_dim: 12,
        patch_size: 2,
        codebook_size: 5,
        max_positions: 8,
        input_mean: 0.0,
        input_std: 1.0,
        ln_eps: 1e-5,
    }
}

/// Finite-difference check of the masked-prediction loss over every encoder tensor.
pub fn check_encoder_mlm(seed: u64) -> Result<OpCheck> {
    let cfg = one_layer_config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights = init_encoder(&cfg, seed)?;
    let (rows_time, rows_freq) = (3, 2);
    let p = rows_time * rows_freq;
    let grid = PatchGrid {
        patches: uniform(&mut rng, &[p, 4], -2.0, 2.0),
        rows_time,
        rows_freq,
        patch_size: 2,
        frame_rate: 100.0,
    };
    let targets: Vec<usize> = (0..p).map(|_| rng.gen_range(0..cfg.codebook_size)).collect();
    let mut mask: Vec<usize> = (0..p).filter(|_| rng.gen_bool(0.6)).collect();
    if mask.is_empty() {
        mask.push(rng.gen_range(0..p));
    }
    let (_, analytic) = mlm_loss(&weights, &grid, &mask, &targets)?;
    let numeric = numeric_gradients(&weights.tensors, STEP, |ps| {
        let w = EncoderWeights { config: cfg.clone(), tensors: ps.to_vec() };
        mlm_loss(&w, &grid, &mask, &targets).expect("shapes fixed").0
    });
    Ok(OpCheck { name: "encoder_mlm", relative_error: relative_error(&analytic, &numeric, FLOOR) })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ops_pass_for_a_few_seeds() {
        for seed in 0..3 {
            for c in check_ops(seed).unwrap() {
                assert!(c.relative_error <= TOLERANCE, "{} seed {seed}: {}", c.name, c.relative_error);
            }
            let e = check_encoder_mlm(seed).unwrap();
            assert!(e.relative_error <= TOLERANCE, "seed {seed}: {}", e.relative_error);
        }
    }

    #[test]
    fn detects_a_wrong_gradient() {
        let a = vec![Tensor::vector(vec![1.0, 2.0]).unwrap()];
        let n = vec![Tensor::vector(vec![1.0, 2.1]).unwrap()];
        assert!(relative_error(&a, &n, FLOOR) > TOLERANCE);
    }
}
