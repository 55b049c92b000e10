//! ViT-style patch encoder.
//!
//! A pre-norm transformer over log-mel patches with learned absolute
//! positions, a learned mask-token vector and a linear token-prediction head.
//! The clip-level output keeps one vector per time column of the patch grid,
//! averaging over its frequency rows.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::PatchGrid;
use crate::error::{Error, Result};
use crate::tensor::{Graph, NodeId, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub preset: String,
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub patch_size: usize,
    /// Width of the token-prediction head.
    pub codebook_size: usize,
    pub max_positions: usize,
    /// Patches are standardized with these constants before projection.
    #[serde(default = "default_input_mean")]
    pub input_mean: f64,
    #[serde(default = "default_input_std")]
    pub input_std: f64,
    #[serde(default = "default_ln_eps")]
    pub ln_eps: f64,
}

fn default_input_mean() -> f64 {
    -12.0
}

fn default_input_std() -> f64 {
    8.0
}

fn default_ln_eps() -> f64 {
    1e-5
}

pub const PRESETS: [&str; 2] = ["base-toy", "large-toy"];

impl EncoderConfig {
    pub fn base_toy() -> Self {
        EncoderConfig {
            preset: "base-toy".into(),
            layers: 4,
            dim: 96,
            heads: 4,
            ff_dim: 384,
            patch_size: 16,
            codebook_size: 64,
            max_positions: 256,
            input_mean: default_input_mean(),
            input_std: default_input_std(),
            ln_eps: default_ln_eps(),
        }
    }

    pub fn large_toy() -> Self {
        EncoderConfig {
            preset: "large-toy".into(),
            layers: 8,
            dim: 128,
            heads: 8,
            ff_dim: 512,
            ..Self::base_toy()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "base-toy" => Ok(Self::base_toy()),
            "large-toy" => Ok(Self::large_toy()),
            other => Err(Error::Config(format!(
                "unknown encoder preset {other:?}; expected one of {PRESETS:?}"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("dim", self.dim),
            ("heads", self.heads),
            ("ff_dim", self.ff_dim),
            ("patch_size", self.patch_size),
            ("codebook_size", self.codebook_size),
            ("max_positions", self.max_positions),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("encoder {name} must be positive")));
        }
        if !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "model dim {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if !(self.input_std > 0.0) || !(self.ln_eps > 0.0) {
            return Err(Error::Config("input_std and ln_eps must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

/// Closed-form parameter count of an encoder with this configuration.
pub fn param_count(cfg: &EncoderConfig) -> usize {
    let (d, f, p2, k) = (cfg.dim, cfg.ff_dim, cfg.patch_size * cfg.patch_size, cfg.codebook_size);
    let stem = p2 * d + d + cfg.max_positions * d + d;
    // two norms, four d×d projections with bias, two MLP matrices with bias
    let block = 4 * d + 4 * (d * d + d) + (d * f + f) + (f * d + d);
    let tail = 2 * d + d * k + k;
    stem + cfg.layers * block + tail
}

const STEM: usize = 4;
const PER_BLOCK: usize = 16;

/// Name and shape of every tensor, in storage order.
pub fn tensor_layout(cfg: &EncoderConfig) -> Vec<(String, Vec<usize>)> {
    let (d, f, p2, k) = (cfg.dim, cfg.ff_dim, cfg.patch_size * cfg.patch_size, cfg.codebook_size);
    let mut out = vec![
        ("patch.weight".to_string(), vec![p2, d]),
        ("patch.bias".to_string(), vec![d]),
        ("pos".to_string(), vec![cfg.max_positions, d]),
        ("mask_token".to_string(), vec![d]),
    ];
    for l in 0..cfg.layers {
        let blk = [
            ("ln1.gamma", vec![d]),
            ("ln1.beta", vec![d]),
            ("attn.q.weight", vec![d, d]),
            ("attn.q.bias", vec![d]),
            ("attn.k.weight", vec![d, d]),
            ("attn.k.bias", vec![d]),
            ("attn.v.weight", vec![d, d]),
            ("attn.v.bias", vec![d]),
            ("attn.out.weight", vec![d, d]),
            ("attn.out.bias", vec![d]),
            ("ln2.gamma", vec![d]),
            ("ln2.beta", vec![d]),
            ("mlp.fc1.weight", vec![d, f]),
            ("mlp.fc1.bias", vec![f]),
            ("mlp.fc2.weight", vec![f, d]),
            ("mlp.fc2.bias", vec![d]),
        ];
        out.extend(blk.into_iter().map(|(n, s)| (format!("blocks.{l}.{n}"), s)));
    }
    out.push(("norm.gamma".into(), vec![d]));
    out.push(("norm.beta".into(), vec![d]));
    out.push(("head.weight".into(), vec![d, k]));
    out.push(("head.bias".into(), vec![k]));
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderWeights {
    pub config: EncoderConfig,
    /// Tensors in [`tensor_layout`] order.
    pub tensors: Vec<Tensor>,
}

fn xavier(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize, n: usize) -> Vec<f64> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..n).map(|_| rng.gen_range(-a..a)).collect()
}

pub fn init_encoder(config: &EncoderConfig, seed: u64) -> Result<EncoderWeights> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tensors = Vec::new();
    for (name, shape) in tensor_layout(config) {
        let n: usize = shape.iter().product();
        let data = if name.ends_with("gamma") {
            vec![1.0; n]
        } else if name.ends_with("bias") || name.ends_with("beta") {
            vec![0.0; n]
        } else if name == "pos" || name == "mask_token" || name == "head.weight" {
            (0..n).map(|_| rng.gen_range(-0.02..0.02)).collect()
        } else {
            xavier(&mut rng, shape[0], shape[1], n)
        };
        tensors.push(Tensor::new(shape, data)?);
    }
    Ok(EncoderWeights { config: config.clone(), tensors })
}

impl EncoderWeights {
    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Rebuilds weights from named tensors, checking names and shapes.
    pub fn from_named(config: EncoderConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let layout = tensor_layout(&config);
        if layout.len() != named.len() {
            return Err(Error::Dimension(format!(
                "encoder expects {} tensors, got {}",
                layout.len(),
                named.len()
            )));
        }
        let mut tensors = Vec::with_capacity(named.len());
        for ((want_name, want_shape), (name, t)) in layout.into_iter().zip(named) {
            if want_name != name || want_shape != t.shape() {
                return Err(Error::Dimension(format!(
                    "expected {want_name} {want_shape:?}, found {name} {:?}",
                    t.shape()
                )));
            }
            tensors.push(t);
        }
        Ok(EncoderWeights { config, tensors })
    }

    pub fn named(&self) -> impl Iterator<Item = (String, &Tensor)> {
        tensor_layout(&self.config).into_iter().map(|(n, _)| n).zip(self.tensors.iter())
    }

    pub fn mask_token_mut(&mut self) -> &mut Tensor {
        &mut self.tensors[3]
    }

    pub fn positions_mut(&mut self) -> &mut Tensor {
        &mut self.tensors[2]
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    /// Places every tensor on `graph`; `trainable` marks them as gradient leaves.
    pub fn bind(&self, graph: &mut Graph, trainable: bool) -> Vec<NodeId> {
        self.tensors
            .iter()
            .map(|t| {
                let mut t = t.clone();
                t.set_requires_grad(trainable);
                graph.leaf(t)
            })
            .collect()
    }
}

/// `{oₙ ∈ ℝʰ}` for n in 1..=N, with the rate at which it was produced.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSequence {
    /// `N × h`.
    pub vectors: Tensor,
    pub frame_rate: f64,
    pub source_id: String,
}

impl EmbeddingSequence {
    pub fn new(vectors: Tensor, frame_rate: f64, source_id: impl Into<String>) -> Result<Self> {
        if vectors.shape().len() != 2 {
            return Err(Error::Dimension(format!(
                "embedding sequence must be N×h, got {:?}",
                vectors.shape()
            )));
        }
        if !vectors.is_finite() {
            return Err(Error::Data("embedding sequence has non-finite entries".into()));
        }
        if !(frame_rate > 0.0 && frame_rate.is_finite()) {
            return Err(Error::Data(format!("frame rate {frame_rate} must be positive")));
        }
        Ok(EmbeddingSequence { vectors, frame_rate, source_id: source_id.into() })
    }

    pub fn len(&self) -> usize {
        self.vectors.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }
}

/// Node handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardNodes {
    /// `P × d` final-norm per-patch features.
    pub features: NodeId,
    /// `rows_time × d`, features averaged over frequency rows.
    pub pooled: NodeId,
    /// `|mask| × K` head logits at the masked positions, in mask order.
    pub logits: Option<NodeId>,
}

fn standardized_patches(cfg: &EncoderConfig, grid: &PatchGrid) -> Result<Tensor> {
    if grid.patch_size != cfg.patch_size {
        return Err(Error::Dimension(format!(
            "grid patch size {} against encoder patch size {}",
            grid.patch_size, cfg.patch_size
        )));
    }
    let mut x = grid.patches.clone();
    x.set_requires_grad(false);
    let (m, s) = (cfg.input_mean, cfg.input_std);
    x.data_mut().iter_mut().for_each(|v| *v = (*v - m) / s);
    Ok(x)
}

fn mask_flags(p: usize, mask: &[usize]) -> Result<Vec<bool>> {
    let mut flags = vec![false; p];
    for &i in mask {
        if i >= p {
            return Err(Error::Index(format!("mask index {i} outside {p} patches")));
        }
        flags[i] = true;
    }
    Ok(flags)
}

/// Builds the encoder forward pass on `graph` using bound parameter nodes.
pub fn forward(
    graph: &mut Graph,
    params: &[NodeId],
    cfg: &EncoderConfig,
    grid: &PatchGrid,
    mask: &[usize],
) -> Result<ForwardNodes> {
    let p = grid.num_patches();
    if p > cfg.max_positions {
        return Err(Error::Capacity(format!(
            "{p} patches exceed the encoder's {} positions",
            cfg.max_positions
        )));
    }
    let flags = mask_flags(p, mask)?;
    let (d, heads, dh) = (cfg.dim, cfg.heads, cfg.head_dim());
    let eps = cfg.ln_eps;

    let x = graph.constant(standardized_patches(cfg, grid)?);
    let h = graph.matmul(x, params[0])?;
    let h = graph.add_row(h, params[1])?;
    let h = graph.mask_rows(h, params[3], &flags)?;
    let pos = graph.slice_rows(params[2], 0, p)?;
    let mut h = graph.add(h, pos)?;

    let scale = 1.0 / (dh as f64).sqrt();
    for l in 0..cfg.layers {
        let w = &params[STEM + l * PER_BLOCK..STEM + (l + 1) * PER_BLOCK];
        let n1 = graph.layer_norm(h, w[0], w[1], eps)?;
        let proj = |g: &mut Graph, wi: usize| -> Result<NodeId> {
            let t = g.matmul(n1, w[wi])?;
            g.add_row(t, w[wi + 1])
        };
        let q = proj(graph, 2)?;
        let k = proj(graph, 4)?;
        let v = proj(graph, 6)?;
        let mut outs = Vec::with_capacity(heads);
        for head in 0..heads {
            let qh = graph.slice_cols(q, head * dh, dh)?;
            let kh = graph.slice_cols(k, head * dh, dh)?;
            let vh = graph.slice_cols(v, head * dh, dh)?;
            let kt = graph.transpose(kh);
            let s = graph.matmul(qh, kt)?;
            let s = graph.scale(s, scale);
            let a = graph.softmax_rows(s);
            outs.push(graph.matmul(a, vh)?);
        }
        let cat = if heads == 1 { outs[0] } else { graph.concat_cols(&outs)? };
        let o = graph.matmul(cat, w[8])?;
        let o = graph.add_row(o, w[9])?;
        h = graph.add(h, o)?;

        let n2 = graph.layer_norm(h, w[10], w[11], eps)?;
        let f = graph.matmul(n2, w[12])?;
        let f = graph.add_row(f, w[13])?;
        let f = graph.gelu(f);
        let f = graph.matmul(f, w[14])?;
        let f = graph.add_row(f, w[15])?;
        h = graph.add(h, f)?;
    }
    let tail = STEM + cfg.layers * PER_BLOCK;
    let features = graph.layer_norm(h, params[tail], params[tail + 1], eps)?;
    let pooled = graph.group_mean_rows(features, grid.rows_freq)?;
    let logits = if mask.is_empty() {
        None
    } else {
        let sel = graph.gather_rows(features, mask)?;
        let z = graph.matmul(sel, params[tail + 2])?;
        Some(graph.add_row(z, params[tail + 3])?)
    };
    debug_assert_eq!(graph.value(features).cols(), d);
    Ok(ForwardNodes { features, pooled, logits })
}

/// Runs the frozen encoder: the pooled embedding sequence and, for a
/// non-empty mask, the head logits at the masked positions.
pub fn encode(
    weights: &EncoderWeights,
    grid: &PatchGrid,
    mask: &[usize],
) -> Result<(EmbeddingSequence, Option<Tensor>)> {
    let mut graph = Graph::new();
    let params = weights.bind(&mut graph, false);
    let out = forward(&mut graph, &params, &weights.config, grid, mask)?;
    let seq = EmbeddingSequence::new(
        graph.value(out.pooled).clone(),
        grid.time_rate(),
        weights.config.preset.clone(),
    )?;
    Ok((seq, out.logits.map(|l| graph.value(l).clone())))
}

/// Final-layer per-patch features of an unmasked grid, `P × d`.
pub fn patch_features(weights: &EncoderWeights, grid: &PatchGrid) -> Result<Tensor> {
    let mut graph = Graph::new();
    let params = weights.bind(&mut graph, false);
    let out = forward(&mut graph, &params, &weights.config, grid, &[])?;
    Ok(graph.value(out.features).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn tiny() -> EncoderConfig {
        EncoderConfig {
            preset: "tiny".into(),
            layers: 1,
            dim: 8,
            heads: 2,
            ff_dim: 16,
            patch_size: 4,
            codebook_size: 8,
            max_positions: 16,
            input_mean: 0.0,
            input_std: 1.0,
            ln_eps: 1e-5,
        }
    }

    fn grid(rows_time: usize, rows_freq: usize, p: usize, seed: u64) -> PatchGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rows_time * rows_freq;
        let data = (0..n * p * p).map(|_| rng.gen_range(-1.0..1.0)).collect();
        PatchGrid {
            patches: Tensor::matrix(n, p * p, data).unwrap(),
            rows_time,
            rows_freq,
            patch_size: p,
            frame_rate: 100.0,
        }
    }

    #[test]
    fn param_count_matches_enumeration() {
        let cfg = tiny();
        // d=8, F=16, p²=16, K=8, 16 positions, enumerated tensor by tensor
        let shapes: Vec<usize> = vec![
            16 * 8, 8, 16 * 8, 8, // patch w/b, positions, mask token
            8, 8, 64, 8, 64, 8, 64, 8, 64, 8, 8, 8, 8 * 16, 16, 16 * 8, 8, // one block
            8, 8, 8 * 8, 8, // final norm, head
        ];
        let oracle: usize = shapes.iter().sum();
        assert_eq!(param_count(&cfg), oracle);
        assert_eq!(init_encoder(&cfg, 0).unwrap().param_count(), oracle);
        let zero = EncoderConfig { layers: 0, ..cfg };
        assert_eq!(param_count(&zero), 16 * 8 + 8 + 16 * 8 + 8 + 8 + 8 + 8 * 8 + 8);
    }

    #[test]
    fn preset_ratio_tracks_large_over_base() {
        let ratio = param_count(&EncoderConfig::large_toy()) as f64
            / param_count(&EncoderConfig::base_toy()) as f64;
        let target = 300.0 / 90.0;
        assert!((ratio / target - 1.0).abs() <= 0.15, "ratio {ratio}");
    }

    #[test]
    fn init_is_deterministic_and_seeded() {
        let cfg = tiny();
        let a = init_encoder(&cfg, 1).unwrap();
        assert_eq!(a, init_encoder(&cfg, 1).unwrap());
        assert_ne!(a, init_encoder(&cfg, 2).unwrap());
        assert!(matches!(
            init_encoder(&EncoderConfig { heads: 3, ..cfg }, 1),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn output_has_one_vector_per_time_column() {
        let w = init_encoder(&tiny(), 3).unwrap();
        let (seq, logits) = encode(&w, &grid(2, 4, 4, 0), &[]).unwrap();
        assert_eq!((seq.len(), seq.dim()), (2, 8));
        assert!(logits.is_none());
        assert_eq!(seq.frame_rate, 25.0);
        let (again, _) = encode(&w, &grid(2, 4, 4, 0), &[]).unwrap();
        assert_eq!(seq, again);
        let (_, logits) = encode(&w, &grid(2, 4, 4, 0), &[1, 5]).unwrap();
        assert_eq!(logits.unwrap().shape(), &[2, 8]);
    }

    #[test]
    fn capacity_and_mask_errors() {
        let w = init_encoder(&tiny(), 3).unwrap();
        assert!(matches!(encode(&w, &grid(5, 4, 4, 0), &[]), Err(Error::Capacity(_))));
        assert!(matches!(encode(&w, &grid(2, 4, 4, 0), &[8]), Err(Error::Index(_))));
    }

    #[test]
    fn unmasked_output_ignores_mask_token() {
        let mut w = init_encoder(&tiny(), 3).unwrap();
        let g = grid(3, 2, 4, 9);
        let (a, _) = encode(&w, &g, &[]).unwrap();
        w.mask_token_mut().data_mut().iter_mut().for_each(|v| *v += 0.7);
        let (b, _) = encode(&w, &g, &[]).unwrap();
        assert_eq!(a.vectors.data(), b.vectors.data());
    }

    #[test]
    fn frequency_permutation_symmetry_without_positions() {
        let mut w = init_encoder(&tiny(), 5).unwrap();
        w.positions_mut().data_mut().iter_mut().for_each(|v| *v = 0.0);
        let g = grid(2, 4, 4, 11);
        let perm = [2, 0, 3, 1];
        let mut permuted = g.clone();
        for t in 0..2 {
            for (f, &src) in perm.iter().enumerate() {
                let row = g.patches.row(t * 4 + src).to_vec();
                let c = permuted.patches.cols();
                permuted.patches.data_mut()[(t * 4 + f) * c..(t * 4 + f + 1) * c]
                    .copy_from_slice(&row);
            }
        }
        let (a, _) = encode(&w, &g, &[]).unwrap();
        let (b, _) = encode(&w, &permuted, &[]).unwrap();
        for (x, y) in a.vectors.data().iter().zip(b.vectors.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
