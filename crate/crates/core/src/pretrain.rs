//! Masked-token pretraining loop and checkpoint files.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container;
use crate::dsp::{load_patch_grid, FrontendConfig, PatchGrid};
use crate::encoder::{forward, init_encoder, tensor_layout, EncoderConfig, EncoderWeights};
use crate::error::{Error, Result};
use crate::mixture::{DatasetManifest, MixtureSpec, Sampler, WithinDomain};
use crate::par;
use crate::tensor::{adam_step, AdamConfig, AdamState, Graph, Tensor};
use crate::tokenizer::{quantize, refine_iteration, tokenizer_features, Codebook, FeatureSource, TokenizerConfig};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"OBTS";
pub const CHECKPOINT_VERSION: u32 = 1;

const TOKENIZER_SALT: u64 = 0x746f_6b65_6e69_7a65;
const MASK_SALT: u64 = 0x6d61_736b_696e_6721;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskSpec {
    pub mask_ratio: f64,
    pub min_masked: usize,
}

impl Default for MaskSpec {
    fn default() -> Self {
        MaskSpec { mask_ratio: 0.75, min_masked: 1 }
    }
}

impl MaskSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(Error::Config(format!("mask_ratio {} must lie in (0, 1)", self.mask_ratio)));
        }
        if self.min_masked == 0 {
            return Err(Error::Config("min_masked must be at least 1".into()));
        }
        Ok(())
    }

    /// `max(min_masked, round(ratio · patch_count))`.
    pub fn count(&self, patch_count: usize) -> usize {
        self.min_masked.max((self.mask_ratio * patch_count as f64).round() as usize)
    }
}

/// Uniform sample without replacement, returned ascending.
pub fn mask_patches<R: Rng + ?Sized>(patch_count: usize, spec: &MaskSpec, rng: &mut R) -> Result<Vec<usize>> {
    spec.validate()?;
    if patch_count == 0 {
        return Err(Error::EmptyInput("cannot mask a clip with no patches".into()));
    }
    let n = spec.count(patch_count);
    if n > patch_count {
        return Err(Error::ClipTooShort { required: n, available: patch_count });
    }
    let mut idx = rand::seq::index::sample(rng, patch_count, n).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Encoder preset name.
    pub encoder: String,
    pub codebook_size: usize,
    pub tokenizer_iters: usize,
    /// Clips drawn to fit each codebook.
    pub tokenizer_clips: usize,
    pub mixture: String,
    pub within_domain: WithinDomain,
    pub steps: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub mask: MaskSpec,
    pub optimizer: AdamConfig,
    /// Linear learning-rate warmup length; 0 keeps it constant.
    pub warmup_steps: u64,
    /// 0 writes only the final checkpoint.
    pub checkpoint_every: u64,
    /// 0 never refits.
    pub refit_tokenizer_every: u64,
    pub frontend: FrontendConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            encoder: "base-toy".into(),
            codebook_size: 64,
            tokenizer_iters: 50,
            tokenizer_clips: 64,
            mixture: "speech-heavy".into(),
            within_domain: WithinDomain::Hours,
            steps: 100,
            batch_size: 8,
            seed: 0,
            mask: MaskSpec::default(),
            optimizer: AdamConfig::default(),
            warmup_steps: 0,
            checkpoint_every: 0,
            refit_tokenizer_every: 0,
            frontend: FrontendConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("steps must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.codebook_size < 2 {
            return Err(Error::Config(format!("codebook_size {} must be at least 2", self.codebook_size)));
        }
        if self.tokenizer_clips == 0 {
            return Err(Error::Config("tokenizer_clips must be at least 1".into()));
        }
        self.mask.validate()?;
        self.frontend.validate()?;
        self.encoder_config()?;
        MixtureSpec::named(&self.mixture)?;
        Ok(())
    }

    /// The preset with this run's codebook size and patch size applied.
    pub fn encoder_config(&self) -> Result<EncoderConfig> {
        let mut cfg = EncoderConfig::preset(&self.encoder)?;
        cfg.codebook_size = self.codebook_size;
        cfg.patch_size = self.frontend.patch_size;
        cfg.validate()?;
        Ok(cfg)
    }

    fn tokenizer(&self) -> TokenizerConfig {
        TokenizerConfig { codebook_size: self.codebook_size, max_iters: self.tokenizer_iters }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub config: TrainConfig,
    pub weights: EncoderWeights,
    pub codebook: Codebook,
    /// Frozen encoder producing targets once the codebook is fit on encoder outputs.
    pub teacher: Option<EncoderWeights>,
    pub optimizer: AdamState,
    pub step: u64,
    pub loss_history: Vec<f64>,
}

/// Per-patch target tokens of an unmasked grid.
pub fn clip_targets(codebook: &Codebook, teacher: Option<&EncoderWeights>, grid: &PatchGrid) -> Result<Vec<usize>> {
    let feats = tokenizer_features(codebook.feature_source, teacher, grid)?;
    if feats.cols() != codebook.dim() {
        return Err(Error::Dimension(format!(
            "codebook dim {} against {} tokenizer features",
            codebook.dim(),
            feats.cols()
        )));
    }
    Ok(quantize(codebook, &feats)?.tokens)
}

/// Mean cross-entropy over the masked positions of one clip, with
/// gradients for every encoder tensor. `targets` covers all patches.
pub fn mlm_loss(weights: &EncoderWeights, grid: &PatchGrid, mask: &[usize], targets: &[usize]) -> Result<(f64, Vec<Tensor>)> {
    if targets.len() != grid.num_patches() {
        return Err(Error::Dimension(format!(
            "{} targets for {} patches",
            targets.len(),
            grid.num_patches()
        )));
    }
    if mask.is_empty() {
        return Err(Error::EmptyInput("mask selects no patches".into()));
    }
    let mut g = Graph::new();
    let params = weights.bind(&mut g, true);
    let out = forward(&mut g, &params, &weights.config, grid, mask)?;
    let picked: Vec<usize> = mask.iter().map(|&i| targets[i]).collect();
    let loss = g.cross_entropy(out.logits.expect("mask is non-empty"), &picked)?;
    let value = g.value(loss).data()[0];
    let mut grads = g.backward(loss)?;
    let grads = params
        .iter()
        .zip(&weights.tensors)
        .map(|(&id, t)| grads.take_or_zeros(id, t))
        .collect();
    Ok((value, grads))
}

#[derive(Clone, Debug)]
pub struct StepOutput {
    pub loss: f64,
    pub grads: Vec<Tensor>,
}

/// Batch-averaged loss and gradients; clips run in parallel, sums in clip order.
pub fn batch_gradients(
    weights: &EncoderWeights,
    grids: &[&PatchGrid],
    masks: &[Vec<usize>],
    targets: &[&[usize]],
) -> Result<StepOutput> {
    if grids.is_empty() {
        return Err(Error::EmptyInput("empty batch".into()));
    }
    let per_clip = par::map_range(grids.len(), |i| mlm_loss(weights, grids[i], &masks[i], targets[i]));
    let mut loss = 0.0;
    let mut grads: Vec<Tensor> = weights.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect();
    for r in per_clip {
        let (l, g) = r?;
        loss += l;
        for (acc, gi) in grads.iter_mut().zip(&g) {
            acc.data_mut().iter_mut().zip(gi.data()).for_each(|(a, b)| *a += b);
        }
    }
    let inv = 1.0 / grids.len() as f64;
    for g in &mut grads {
        g.data_mut().iter_mut().for_each(|v| *v *= inv);
    }
    Ok(StepOutput { loss: loss * inv, grads })
}

/// Targets from the unmasked grids, a fresh mask per clip drawn from `rng`,
/// then [`batch_gradients`].
pub fn mlm_step<R: Rng + ?Sized>(
    weights: &EncoderWeights,
    codebook: &Codebook,
    teacher: Option<&EncoderWeights>,
    grids: &[PatchGrid],
    spec: &MaskSpec,
    rng: &mut R,
) -> Result<StepOutput> {
    if codebook.size() != weights.config.codebook_size {
        return Err(Error::Dimension(format!(
            "codebook has {} entries, encoder head predicts {}",
            codebook.size(),
            weights.config.codebook_size
        )));
    }
    let targets: Vec<Vec<usize>> = par::map(grids, |g| clip_targets(codebook, teacher, g))
        .into_iter()
        .collect::<Result<_>>()?;
    let masks: Vec<Vec<usize>> = grids
        .iter()
        .map(|g| mask_patches(g.num_patches(), spec, rng))
        .collect::<Result<_>>()?;
    let refs: Vec<&PatchGrid> = grids.iter().collect();
    let trefs: Vec<&[usize]> = targets.iter().map(Vec::as_slice).collect();
    batch_gradients(weights, &refs, &masks, &trefs)
}

/// Keeps the first time rows so the grid fits `max_positions`.
pub fn crop_to_positions(grid: PatchGrid, max_positions: usize) -> Result<PatchGrid> {
    if grid.num_patches() <= max_positions {
        return Ok(grid);
    }
    let rows_time = max_positions / grid.rows_freq;
    if rows_time == 0 {
        return Err(Error::Capacity(format!(
            "one time row of {} patches exceeds {max_positions} positions",
            grid.rows_freq
        )));
    }
    let keep = rows_time * grid.rows_freq;
    let cols = grid.patches.cols();
    let data = grid.patches.data()[..keep * cols].to_vec();
    Ok(PatchGrid { patches: Tensor::matrix(keep, cols, data)?, rows_time, ..grid })
}

fn snap(t: &mut Tensor) {
    t.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
}

pub struct Trainer {
    config: TrainConfig,
    sampler: Sampler,
    tokenizer_sampler: Sampler,
    weights: EncoderWeights,
    optimizer: AdamState,
    codebook: Codebook,
    teacher: Option<EncoderWeights>,
    step: u64,
    loss_history: Vec<f64>,
    grids: HashMap<PathBuf, Arc<PatchGrid>>,
    targets: HashMap<PathBuf, Arc<Vec<usize>>>,
}

impl Trainer {
    /// Fresh weights plus an iteration-0 codebook fit on raw patches.
    pub fn new(config: TrainConfig, manifest: &DatasetManifest) -> Result<Self> {
        config.validate()?;
        let enc = config.encoder_config()?;
        let weights = init_encoder(&enc, config.seed)?;
        let optimizer = AdamState::new(&weights.tensors, config.optimizer);
        let placeholder = Codebook {
            centroids: Tensor::zeros(&[1, 1]),
            iteration: 0,
            feature_source: FeatureSource::Patch,
        };
        let mut t = Self::assemble(config, manifest, weights, optimizer, placeholder, None, 0, Vec::new())?;
        t.codebook = t.fit_codebook(None, None)?;
        Ok(t)
    }

    pub fn resume(ckpt: Checkpoint, manifest: &DatasetManifest) -> Result<Self> {
        ckpt.config.validate()?;
        Self::assemble(
            ckpt.config,
            manifest,
            ckpt.weights,
            ckpt.optimizer,
            ckpt.codebook,
            ckpt.teacher,
            ckpt.step,
            ckpt.loss_history,
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        config: TrainConfig,
        manifest: &DatasetManifest,
        weights: EncoderWeights,
        optimizer: AdamState,
        codebook: Codebook,
        teacher: Option<EncoderWeights>,
        step: u64,
        loss_history: Vec<f64>,
    ) -> Result<Self> {
        let spec = MixtureSpec::named(&config.mixture)?;
        let sampler = Sampler::new(manifest, &spec, config.within_domain, config.seed)?;
        let tokenizer_sampler = Sampler::new(manifest, &spec, config.within_domain, config.seed ^ TOKENIZER_SALT)?;
        Ok(Trainer {
            config,
            sampler,
            tokenizer_sampler,
            weights,
            optimizer,
            codebook,
            teacher,
            step,
            loss_history,
            grids: HashMap::new(),
            targets: HashMap::new(),
        })
    }

    pub fn step_index(&self) -> u64 {
        self.step
    }

    pub fn loss_history(&self) -> &[f64] {
        &self.loss_history
    }

    pub fn weights(&self) -> &EncoderWeights {
        &self.weights
    }

    pub fn codebook(&self) -> &Codebook {
        &self.codebook
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Moves the stopping point, e.g. to continue a finished run.
    pub fn set_steps(&mut self, steps: u64) {
        self.config.steps = steps;
    }

    fn load_grids(&mut self, paths: &[PathBuf]) -> Result<Vec<Arc<PatchGrid>>> {
        let mut missing: Vec<PathBuf> = paths.iter().filter(|p| !self.grids.contains_key(*p)).cloned().collect();
        missing.sort();
        missing.dedup();
        let fe = &self.config.frontend;
        let maxp = self.weights.config.max_positions;
        let loaded = par::map(&missing, |p| {
            load_patch_grid(p, fe).and_then(|g| crop_to_positions(g, maxp)).map_err(|e| match e {
                Error::Io { .. } => e,
                other => Error::Data(format!("{}: {other}", p.display())),
            })
        });
        for (p, g) in missing.into_iter().zip(loaded) {
            self.grids.insert(p, Arc::new(g?));
        }
        Ok(paths.iter().map(|p| self.grids[p].clone()).collect())
    }

    fn fit_codebook(&mut self, teacher: Option<&EncoderWeights>, previous: Option<&Codebook>) -> Result<Codebook> {
        let round = previous.map_or(0, |c| c.iteration as u64 + 1);
        let n = self.config.tokenizer_clips;
        let mut paths: Vec<PathBuf> = self
            .tokenizer_sampler
            .draw_range(round * n as u64, n)
            .into_iter()
            .map(|c| c.path)
            .collect();
        paths.sort();
        paths.dedup();
        let grids: Vec<PatchGrid> = self.load_grids(&paths)?.iter().map(|g| (**g).clone()).collect();
        let mut cb = refine_iteration(teacher, previous, &grids, &self.config.tokenizer(), self.config.seed.wrapping_add(round))?;
        snap(&mut cb.centroids);
        Ok(cb)
    }

    /// Promotes the current weights to teacher and refits the codebook on its outputs.
    pub fn refit_tokenizer(&mut self) -> Result<()> {
        let mut teacher = self.weights.clone();
        teacher.tensors.iter_mut().for_each(snap);
        let previous = self.codebook.clone();
        self.codebook = self.fit_codebook(Some(&teacher), Some(&previous))?;
        self.teacher = Some(teacher);
        self.targets.clear();
        Ok(())
    }

    fn targets_for(&mut self, paths: &[PathBuf], grids: &[Arc<PatchGrid>]) -> Result<Vec<Arc<Vec<usize>>>> {
        let mut todo: Vec<(PathBuf, Arc<PatchGrid>)> = Vec::new();
        for (p, g) in paths.iter().zip(grids) {
            if !self.targets.contains_key(p) && !todo.iter().any(|(q, _)| q == p) {
                todo.push((p.clone(), g.clone()));
            }
        }
        let (cb, teacher) = (&self.codebook, self.teacher.as_ref());
        let computed = par::map(&todo, |(_, g)| clip_targets(cb, teacher, g));
        for ((p, _), t) in todo.into_iter().zip(computed) {
            self.targets.insert(p, Arc::new(t?));
        }
        Ok(paths.iter().map(|p| self.targets[p].clone()).collect())
    }

    fn learning_rate(&self) -> f64 {
        let base = self.config.optimizer.learning_rate;
        match self.config.warmup_steps {
            0 => base,
            w => base * ((self.step + 1) as f64 / w as f64).min(1.0),
        }
    }

    /// One optimizer step; returns its batch loss.
    pub fn step(&mut self) -> Result<f64> {
        let index = self.step + 1;
        self.try_step().map_err(|e| Error::Step { step: index, source: Box::new(e) })
    }

    fn try_step(&mut self) -> Result<f64> {
        let s = self.step;
        let every = self.config.refit_tokenizer_every;
        if every > 0 && s > 0 && s.is_multiple_of(every) {
            self.refit_tokenizer()?;
        }
        let b = self.config.batch_size;
        let paths: Vec<PathBuf> = self.sampler.draw_range(s * b as u64, b).into_iter().map(|c| c.path).collect();
        let grids = self.load_grids(&paths)?;
        let targets = self.targets_for(&paths, &grids)?;

        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ MASK_SALT);
        rng.set_stream(s);
        let masks: Vec<Vec<usize>> = grids
            .iter()
            .map(|g| mask_patches(g.num_patches(), &self.config.mask, &mut rng))
            .collect::<Result<_>>()?;
        let grefs: Vec<&PatchGrid> = grids.iter().map(|g| g.as_ref()).collect();
        let trefs: Vec<&[usize]> = targets.iter().map(|t| t.as_slice()).collect();
        let out = batch_gradients(&self.weights, &grefs, &masks, &trefs)?;
        if !out.loss.is_finite() {
            return Err(Error::Contract(format!("non-finite loss {}", out.loss)));
        }

        self.optimizer.hyper.learning_rate = self.learning_rate();
        let r = adam_step(&mut self.weights.tensors, &out.grads, &mut self.optimizer);
        self.optimizer.hyper.learning_rate = self.config.optimizer.learning_rate;
        r?;
        self.step += 1;
        self.loss_history.push(out.loss);
        Ok(out.loss)
    }

    /// Rounds all training state to what a checkpoint file holds, so a
    /// resumed run continues on exactly the same values, and returns it.
    pub fn checkpoint(&mut self) -> Checkpoint {
        self.weights.tensors.iter_mut().for_each(snap);
        self.optimizer.m.iter_mut().for_each(snap);
        self.optimizer.v.iter_mut().for_each(snap);
        let before = self.codebook.centroids.clone();
        snap(&mut self.codebook.centroids);
        if let Some(t) = &mut self.teacher {
            t.tensors.iter_mut().for_each(snap);
            self.targets.clear();
        }
        if before != self.codebook.centroids {
            self.targets.clear();
        }
        Checkpoint {
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            weights: self.weights.clone(),
            codebook: self.codebook.clone(),
            teacher: self.teacher.clone(),
            optimizer: self.optimizer.clone(),
            step: self.step,
            loss_history: self.loss_history.clone(),
        }
    }

    /// Trains until the configured step count, handing every periodic and
    /// the final checkpoint to `on_checkpoint`.
    pub fn run<F: FnMut(&Checkpoint) -> Result<()>>(&mut self, mut on_checkpoint: F) -> Result<Checkpoint> {
        let every = self.config.checkpoint_every;
        while self.step < self.config.steps {
            self.step()?;
            if every > 0 && self.step.is_multiple_of(every) && self.step < self.config.steps {
                let c = self.checkpoint();
                on_checkpoint(&c)?;
            }
        }
        let c = self.checkpoint();
        on_checkpoint(&c)?;
        Ok(c)
    }
}

pub fn train(config: TrainConfig, manifest: &DatasetManifest) -> Result<Checkpoint> {
    Trainer::new(config, manifest)?.run(|_| Ok(()))
}

/// `step-000010.obts`.
pub fn checkpoint_file_name(step: u64) -> String {
    format!("step-{step:06}.obts")
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the payload.
    offset: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CodebookMeta {
    iteration: u32,
    feature_source: FeatureSource,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AdamMeta {
    step: u64,
    hyper: AdamConfig,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    train_config: TrainConfig,
    encoder_config: EncoderConfig,
    step: u64,
    loss_history: Vec<f64>,
    codebook: CodebookMeta,
    adam: AdamMeta,
    has_teacher: bool,
    tensors: Vec<TensorEntry>,
}

fn checkpoint_tensors(c: &Checkpoint) -> Vec<(String, &Tensor)> {
    let mut out: Vec<(String, &Tensor)> = Vec::new();
    out.extend(c.weights.named().map(|(n, t)| (format!("encoder/{n}"), t)));
    let names: Vec<String> = tensor_layout(&c.weights.config).into_iter().map(|(n, _)| n).collect();
    out.extend(names.iter().zip(&c.optimizer.m).map(|(n, t)| (format!("adam.m/{n}"), t)));
    out.extend(names.iter().zip(&c.optimizer.v).map(|(n, t)| (format!("adam.v/{n}"), t)));
    out.push(("codebook".into(), &c.codebook.centroids));
    if let Some(t) = &c.teacher {
        out.extend(t.named().map(|(n, t)| (format!("teacher/{n}"), t)));
    }
    out
}

pub fn encode_checkpoint(c: &Checkpoint) -> Result<Vec<u8>> {
    let tensors = checkpoint_tensors(c);
    let mut dir = Vec::with_capacity(tensors.len());
    let mut payload: Vec<f32> = Vec::new();
    for (name, t) in &tensors {
        dir.push(TensorEntry { name: name.clone(), shape: t.shape().to_vec(), offset: payload.len() as u64 * 4 });
        payload.extend(t.data().iter().map(|&v| v as f32));
    }
    let header = CheckpointHeader {
        train_config: c.config.clone(),
        encoder_config: c.weights.config.clone(),
        step: c.step,
        loss_history: c.loss_history.clone(),
        codebook: CodebookMeta { iteration: c.codebook.iteration, feature_source: c.codebook.feature_source },
        adam: AdamMeta { step: c.optimizer.step, hyper: c.optimizer.hyper },
        has_teacher: c.teacher.is_some(),
        tensors: dir,
    };
    let json = serde_json::to_vec(&header)?;
    Ok(container::encode(CHECKPOINT_MAGIC, c.version, &json, &payload))
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let (hbytes, payload) = container::decode(bytes, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, "checkpoint")?;
    let header: CheckpointHeader =
        serde_json::from_slice(hbytes).map_err(|e| Error::Corrupt(format!("checkpoint header: {e}")))?;
    let mut by_name: HashMap<String, Tensor> = HashMap::new();
    for e in &header.tensors {
        let n: usize = e.shape.iter().product();
        let start = (e.offset / 4) as usize;
        if e.offset % 4 != 0 || start + n > payload.len() {
            return Err(Error::Corrupt(format!("checkpoint tensor {} outside payload", e.name)));
        }
        let data = payload[start..start + n].iter().map(|&v| v as f64).collect();
        let t = Tensor::new(e.shape.clone(), data).map_err(|err| Error::Corrupt(format!("tensor {}: {err}", e.name)))?;
        by_name.insert(e.name.clone(), t);
    }
    let cfg = header.encoder_config;
    let layout = tensor_layout(&cfg);
    let mut take = |name: String| {
        by_name.remove(&name).ok_or_else(|| Error::Corrupt(format!("checkpoint lacks tensor {name}")))
    };
    let group = |prefix: &str, take: &mut dyn FnMut(String) -> Result<Tensor>| -> Result<Vec<(String, Tensor)>> {
        layout.iter().map(|(n, _)| Ok((n.clone(), take(format!("{prefix}/{n}"))?))).collect()
    };
    let weights = EncoderWeights::from_named(cfg.clone(), group("encoder", &mut take)?)?;
    let m = group("adam.m", &mut take)?.into_iter().map(|(_, t)| t).collect();
    let v = group("adam.v", &mut take)?.into_iter().map(|(_, t)| t).collect();
    let centroids = take("codebook".into())?;
    let teacher = if header.has_teacher {
        Some(EncoderWeights::from_named(cfg, group("teacher", &mut take)?)?)
    } else {
        None
    };
    if let Some(extra) = by_name.keys().next() {
        return Err(Error::Corrupt(format!("checkpoint has unexpected tensor {extra}")));
    }
    Ok(Checkpoint {
        version: CHECKPOINT_VERSION,
        config: header.train_config,
        weights,
        codebook: Codebook {
            centroids,
            iteration: header.codebook.iteration,
            feature_source: header.codebook.feature_source,
        },
        teacher,
        optimizer: AdamState { step: header.adam.step, m, v, hyper: header.adam.hyper },
        step: header.step,
        loss_history: header.loss_history,
    })
}

pub fn save_checkpoint(c: &Checkpoint, path: &Path) -> Result<()> {
    container::write_file(path, &encode_checkpoint(c)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&container::read_file(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::{log_mel, patchify, write_wav, Waveform};
    use crate::tensor::cross_entropy_logits;

    #[test]
    fn mask_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let spec = MaskSpec { mask_ratio: 0.5, min_masked: 1 };
        let m = mask_patches(10, &spec, &mut rng).unwrap();
        assert_eq!(m.len(), 5);
        assert!(m.windows(2).all(|w| w[0] < w[1]) && m.iter().all(|&i| i < 10));

        let tight = MaskSpec { mask_ratio: 0.5, min_masked: 2 };
        assert!(matches!(
            mask_patches(1, &tight, &mut rng),
            Err(Error::ClipTooShort { required: 2, available: 1 })
        ));
    }

    #[test]
    fn mask_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let spec = MaskSpec::default();
        let mut hits = [0usize; 8];
        for _ in 0..10_000 {
            for i in mask_patches(8, &spec, &mut rng).unwrap() {
                hits[i] += 1;
            }
        }
        for h in hits {
            assert!((h as f64 / 1e4 - 0.75).abs() <= 0.02, "{h}");
        }
    }

    fn tiny_cfg(k: usize) -> EncoderConfig {
        EncoderConfig {
            preset: "tiny".into(),
            layers: 1,
            dim: 8,
            heads: 2,
            ff_dim: 16,
            patch_size: 4,
            codebook_size: k,
            max_positions: 32,
            input_mean: 0.0,
            input_std: 1.0,
            ln_eps: 1e-5,
        }
    }

    fn random_grid(seed: u64, rows_time: usize, rows_freq: usize) -> PatchGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = rows_time * rows_freq;
        let data = (0..p * 16).map(|_| rng.gen_range(-1.0..1.0)).collect();
        PatchGrid {
            patches: Tensor::matrix(p, 16, data).unwrap(),
            rows_time,
            rows_freq,
            patch_size: 4,
            frame_rate: 100.0,
        }
    }

    #[test]
    fn untrained_loss_near_chance() {
        let cfg = EncoderConfig { codebook_size: 16, ..EncoderConfig::base_toy() };
        let w = init_encoder(&cfg, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let data = (0..24 * 256).map(|_| rng.gen_range(-20.0..0.0)).collect();
        let grid = PatchGrid {
            patches: Tensor::matrix(24, 256, data).unwrap(),
            rows_time: 6,
            rows_freq: 4,
            patch_size: 16,
            frame_rate: 100.0,
        };
        let targets: Vec<usize> = (0..24).map(|i| i % 16).collect();
        let mask: Vec<usize> = (0..18).collect();
        let (loss, _) = mlm_loss(&w, &grid, &mask, &targets).unwrap();
        assert!((loss - 16f64.ln()).abs() < 0.5, "{loss}");
        assert_eq!(loss.to_bits(), mlm_loss(&w, &grid, &mask, &targets).unwrap().0.to_bits());
    }

    #[test]
    fn masked_content_does_not_leak() {
        let w = init_encoder(&tiny_cfg(4), 2).unwrap();
        let grid = random_grid(5, 3, 2);
        let cb = crate::tokenizer::fit_codebook(&grid.patches, 4, 20, 0).unwrap();
        let targets = clip_targets(&cb, None, &grid).unwrap();
        let mask = vec![1, 2, 4];
        let (base, _) = mlm_loss(&w, &grid, &mask, &targets).unwrap();
        let mut corrupted = grid.clone();
        for &i in &mask {
            for c in 0..16 {
                corrupted.patches.data_mut()[i * 16 + c] = 1e3 * (c as f64 - 7.5);
            }
        }
        let (after, _) = mlm_loss(&w, &corrupted, &mask, &targets).unwrap();
        assert_eq!(base.to_bits(), after.to_bits());

        // finite differences through masked inputs vanish exactly
        let mut bumped = grid.clone();
        bumped.patches.data_mut()[2 * 16 + 3] += 1e-5;
        let (moved, _) = mlm_loss(&w, &bumped, &mask, &targets).unwrap();
        assert_eq!(moved, base);
        // unmasked inputs do matter
        let mut bumped = grid.clone();
        bumped.patches.data_mut()[3] += 1e-2;
        assert_ne!(mlm_loss(&w, &bumped, &mask, &targets).unwrap().0, base);
    }

    #[test]
    fn batch_is_mean_of_clips() {
        let w = init_encoder(&tiny_cfg(3), 9).unwrap();
        let grids = [random_grid(1, 2, 2), random_grid(2, 2, 2)];
        let masks = [vec![0, 3], vec![1]];
        let targets = [vec![0, 1, 2, 0], vec![2, 2, 1, 0]];
        let refs: Vec<&PatchGrid> = grids.iter().collect();
        let trefs: Vec<&[usize]> = targets.iter().map(Vec::as_slice).collect();
        let out = batch_gradients(&w, &refs, &masks, &trefs).unwrap();
        let a = mlm_loss(&w, &grids[0], &masks[0], &targets[0]).unwrap();
        let b = mlm_loss(&w, &grids[1], &masks[1], &targets[1]).unwrap();
        assert!((out.loss - (a.0 + b.0) / 2.0).abs() < 1e-15);
        for i in 0..w.tensors.len() {
            for j in 0..w.tensors[i].len() {
                let want = (a.1[i].data()[j] + b.1[i].data()[j]) / 2.0;
                assert!((out.grads[i].data()[j] - want).abs() < 1e-15);
            }
        }
        let seq = par::sequential(|| batch_gradients(&w, &refs, &masks, &trefs).unwrap());
        assert_eq!(seq.loss.to_bits(), out.loss.to_bits());
    }

    #[test]
    fn mlm_step_uses_codebook_targets() {
        let w = init_encoder(&tiny_cfg(2), 4).unwrap();
        let grids = vec![random_grid(3, 2, 2)];
        let cb = crate::tokenizer::fit_codebook(&grids[0].patches, 2, 10, 1).unwrap();
        let spec = MaskSpec { mask_ratio: 0.5, min_masked: 1 };
        let out = mlm_step(&w, &cb, None, &grids, &spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mask = mask_patches(4, &spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let t = clip_targets(&cb, None, &grids[0]).unwrap();
        let (_, logits) = crate::encoder::encode(&w, &grids[0], &mask).unwrap();
        let picked: Vec<usize> = mask.iter().map(|&i| t[i]).collect();
        let want = cross_entropy_logits(&logits.unwrap(), &picked).unwrap();
        assert!((out.loss - want).abs() < 1e-12);

        let wrong = Codebook { centroids: Tensor::zeros(&[3, 16]), ..cb };
        assert!(mlm_step(&w, &wrong, None, &grids, &spec, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn crop_keeps_leading_rows() {
        let g = random_grid(0, 5, 2);
        let c = crop_to_positions(g.clone(), 7).unwrap();
        assert_eq!((c.rows_time, c.num_patches()), (3, 6));
        assert_eq!(c.patches.data(), &g.patches.data()[..6 * 16]);
        assert!(crop_to_positions(g, 1).is_err());
    }

    fn tone(freq: f64, amp: f64) -> Waveform {
        let sr = 16_000;
        Waveform::new(
            (0..sr).map(|i| amp * (2.0 * std::f64::consts::PI * freq * i as f64 / sr as f64).sin()).collect(),
            sr as u32,
        )
        .unwrap()
    }

    fn small_corpus() -> (tempfile::TempDir, DatasetManifest) {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir(dir.path().join("a")).unwrap();
        for i in 0..6 {
            let w = tone(200.0 + 500.0 * i as f64, 0.3);
            write_wav(&dir.path().join(format!("a/{i}.wav")), &w).unwrap();
        }
        let m = DatasetManifest::parse(
            r#"{"version":1,"entries":[
               {"id":"a","domain":"speech","hours":1,"path_glob":"a/*.wav","enabled":true},
               {"id":"b","domain":"music","hours":1,"path_glob":"a/*.wav","enabled":true},
               {"id":"c","domain":"sound","hours":1,"path_glob":"a/*.wav","enabled":true}]}"#,
            dir.path(),
        )
        .unwrap();
        (dir, m)
    }

    fn small_config() -> TrainConfig {
        TrainConfig {
            codebook_size: 4,
            tokenizer_clips: 6,
            steps: 4,
            batch_size: 2,
            seed: 11,
            frontend: FrontendConfig { patch_size: 16, ..FrontendConfig::default() },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn one_step_then_round_trip() {
        let (_d, m) = small_corpus();
        let cfg = TrainConfig { steps: 1, ..small_config() };
        let c = train(cfg.clone(), &m).unwrap();
        assert_eq!(c.step, 1);
        assert_eq!(c.loss_history.len(), 1);
        assert!(c.loss_history[0].is_finite());

        let bytes = encode_checkpoint(&c).unwrap();
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(encode_checkpoint(&back).unwrap(), bytes);

        let again = train(cfg, &m).unwrap();
        assert_eq!(again, c);
    }

    #[test]
    fn refit_and_resume_match_bitwise() {
        let (_d, m) = small_corpus();
        let cfg = TrainConfig { steps: 6, checkpoint_every: 3, refit_tokenizer_every: 2, ..small_config() };
        let mut saved = Vec::new();
        let full = Trainer::new(cfg, &m)
            .unwrap()
            .run(|c| {
                saved.push(encode_checkpoint(c).unwrap());
                Ok(())
            })
            .unwrap();
        assert_eq!(saved.len(), 2);
        assert!(full.teacher.is_some());
        assert_eq!(full.codebook.feature_source, FeatureSource::EncoderLayerOutput);
        assert_eq!(full.codebook.iteration, 2);

        let mid = decode_checkpoint(&saved[0]).unwrap();
        assert_eq!(mid.step, 3);
        let resumed = Trainer::resume(mid, &m).unwrap().run(|_| Ok(())).unwrap();
        assert_eq!(encode_checkpoint(&resumed).unwrap(), saved[1]);
    }

    #[test]
    fn version_and_damage() {
        let (_d, m) = small_corpus();
        let c = train(TrainConfig { steps: 1, ..small_config() }, &m).unwrap();
        let v2 = encode_checkpoint(&Checkpoint { version: 2, ..c.clone() }).unwrap();
        assert!(matches!(decode_checkpoint(&v2), Err(Error::Incompatible(_))));
        let mut bytes = encode_checkpoint(&c).unwrap();
        let n = bytes.len();
        bytes[n - 100] ^= 0x20;
        assert!(matches!(decode_checkpoint(&bytes), Err(Error::Corrupt(_))));
        assert!(matches!(decode_checkpoint(&bytes[..n / 2]), Err(Error::Corrupt(_))));
    }

    #[test]
    fn failing_step_reports_index() {
        let (d, m) = small_corpus();
        let cfg = TrainConfig { tokenizer_clips: 1, steps: 50, ..small_config() };
        let mut t = Trainer::new(cfg, &m).unwrap();
        for i in 0..6 {
            std::fs::remove_file(d.path().join(format!("a/{i}.wav"))).unwrap();
        }
        let err = t.run(|_| Ok(())).unwrap_err();
        assert!(matches!(err, Error::Step { step, .. } if step >= 1), "{err}");
    }

    #[test]
    fn config_rejects_unknown_fields() {
        assert!(serde_json::from_str::<TrainConfig>(r#"{"stepz": 3}"#).is_err());
        let c: TrainConfig = serde_json::from_str(r#"{"steps": 3, "mask": {"mask_ratio": 0.5}}"#).unwrap();
        assert_eq!((c.steps, c.mask.min_masked), (3, 1));
        assert!(TrainConfig { steps: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { codebook_size: 1, ..TrainConfig::default() }.validate().is_err());
    }

    #[test]
    fn grids_from_real_audio_fit() {
        let s = log_mel(&tone(440.0, 0.5), &FrontendConfig::default()).unwrap();
        let g = patchify(&s, 16).unwrap();
        assert_eq!(g.num_patches(), 24);
    }
}
