//! Frozen-embedding probes: pooling, MLP/linear classifiers, accuracy and mAP,
//! and the per-source vs. ensemble comparison.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::encoder::EmbeddingSequence;
use crate::ensemble::{ensemble, CombinerMode, EnsembleOptions};
use crate::error::{Error, Result};
use crate::tensor::{adam_step, gelu, matmul, AdamConfig, AdamState, Graph, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Multiclass,
    Multilabel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskItem {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clip_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oemb_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<usize>>,
}

impl TaskItem {
    pub fn path(&self) -> &Path {
        self.clip_path.as_deref().or(self.oemb_path.as_deref()).expect("validated item has a path")
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Splits {
    pub train: Vec<TaskItem>,
    #[serde(default)]
    pub valid: Vec<TaskItem>,
    pub test: Vec<TaskItem>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub name: String,
    pub kind: TaskKind,
    pub num_classes: usize,
    /// Sound, music or speech; groups rows in reports.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain: Option<String>,
    pub splits: Splits,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        let min = match self.kind {
            TaskKind::Multiclass => 2,
            TaskKind::Multilabel => 1,
        };
        if self.num_classes < min {
            return Err(Error::Validation(format!("task {}: num_classes {} < {min}", self.name, self.num_classes)));
        }
        if self.splits.train.is_empty() {
            return Err(Error::Validation(format!("task {}: empty train split", self.name)));
        }
        let mut seen: HashSet<&Path> = HashSet::new();
        for (split, items) in [("train", &self.splits.train), ("valid", &self.splits.valid), ("test", &self.splits.test)] {
            let mut here: HashSet<&Path> = HashSet::new();
            for (i, it) in items.iter().enumerate() {
                let at = || format!("task {}: {split}[{i}]", self.name);
                match (&it.clip_path, &it.oemb_path) {
                    (Some(_), None) | (None, Some(_)) => {}
                    _ => return Err(Error::Validation(format!("{}: give exactly one of clip_path, oemb_path", at()))),
                }
                let labels: Vec<usize> = match (self.kind, it.label, &it.labels) {
                    (TaskKind::Multiclass, Some(l), None) => vec![l],
                    (TaskKind::Multilabel, None, Some(ls)) => ls.clone(),
                    (TaskKind::Multiclass, ..) => {
                        return Err(Error::Validation(format!("{}: multiclass items need a single `label`", at())))
                    }
                    (TaskKind::Multilabel, ..) => {
                        return Err(Error::Validation(format!("{}: multilabel items need `labels`", at())))
                    }
                };
                if let Some(l) = labels.iter().find(|&&l| l >= self.num_classes) {
                    return Err(Error::Validation(format!("{}: label {l} outside [0, {})", at(), self.num_classes)));
                }
                here.insert(it.path());
            }
            if let Some(p) = here.iter().find(|p| seen.contains(*p)) {
                return Err(Error::Validation(format!(
                    "task {}: {} appears in more than one split",
                    self.name,
                    p.display()
                )));
            }
            seen.extend(here);
        }
        Ok(())
    }

    /// Reads a task file; relative item paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut t: TaskSpec =
            serde_json::from_str(&text).map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for items in [&mut t.splits.train, &mut t.splits.valid, &mut t.splits.test] {
            for it in items.iter_mut() {
                for p in [&mut it.clip_path, &mut it.oemb_path].into_iter().flatten() {
                    if p.is_relative() {
                        *p = base.join(&*p);
                    }
                }
            }
        }
        t.validate()?;
        Ok(t)
    }

    fn targets(&self, items: &[TaskItem]) -> Targets {
        match self.kind {
            TaskKind::Multiclass => Targets::Classes(items.iter().map(|i| i.label.expect("validated")).collect()),
            TaskKind::Multilabel => {
                let c = self.num_classes;
                let mut m = vec![0.0; items.len() * c];
                for (r, it) in items.iter().enumerate() {
                    for &l in it.labels.as_deref().expect("validated") {
                        m[r * c + l] = 1.0;
                    }
                }
                Targets::Binary { classes: c, matrix: m }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    /// 0 trains a linear probe.
    pub hidden_dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig { hidden_dim: 256, epochs: 40, batch_size: 32, learning_rate: 1e-3, seed: 0, patience: 5 }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Validation("probe epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Validation("probe batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Validation(format!("probe learning rate {} must be positive", self.learning_rate)));
        }
        Ok(())
    }
}

/// Mean over the N positions.
pub fn pool_clip(seq: &EmbeddingSequence) -> Vec<f64> {
    let (n, h) = (seq.len(), seq.dim());
    let x = seq.vectors.data();
    let mut out = vec![0.0; h];
    for r in 0..n {
        out.iter_mut().zip(&x[r * h..(r + 1) * h]).for_each(|(a, b)| *a += b);
    }
    out.iter_mut().for_each(|v| *v /= n as f64);
    out
}

#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    Classes(Vec<usize>),
    /// Row-major `n × classes` 0/1 matrix.
    Binary { classes: usize, matrix: Vec<f64> },
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Classes(c) => c.len(),
            Targets::Binary { classes, matrix } => matrix.len() / classes,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn select(&self, rows: &[usize]) -> Targets {
        match self {
            Targets::Classes(c) => Targets::Classes(rows.iter().map(|&r| c[r]).collect()),
            Targets::Binary { classes, matrix } => Targets::Binary {
                classes: *classes,
                matrix: rows.iter().flat_map(|&r| matrix[r * classes..(r + 1) * classes].iter().copied()).collect(),
            },
        }
    }
}

/// Pooled clip vectors with their targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub x: Tensor,
    pub y: Targets,
}

impl Dataset {
    pub fn new(rows: Vec<Vec<f64>>, y: Targets) -> Result<Self> {
        if rows.len() != y.len() {
            return Err(Error::Dimension(format!("{} vectors for {} targets", rows.len(), y.len())));
        }
        if rows.is_empty() {
            return Err(Error::EmptyInput("dataset has no clips".into()));
        }
        let h = rows[0].len();
        if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != h) {
            return Err(Error::Dimension(format!("clip {i} has dim {}, clip 0 has dim {h}", r.len())));
        }
        Ok(Dataset { x: Tensor::from_rows(&rows)?, y })
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    fn select(&self, rows: &[usize]) -> Result<Dataset> {
        let h = self.dim();
        let data = rows.iter().flat_map(|&r| self.x.row(r).iter().copied()).collect();
        Ok(Dataset { x: Tensor::matrix(rows.len(), h, data)?, y: self.y.select(rows) })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeWeights {
    pub kind: TaskKind,
    /// `[w1, b1, w2, b2]` for an MLP, `[w, b]` for a linear probe.
    pub tensors: Vec<Tensor>,
}

impl ProbeWeights {
    pub fn input_dim(&self) -> usize {
        self.tensors[0].rows()
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        if x.cols() != self.input_dim() {
            return Err(Error::Dimension(format!(
                "probe expects dim {}, embeddings have {}",
                self.input_dim(),
                x.cols()
            )));
        }
        let affine = |x: &Tensor, w: &Tensor, b: &Tensor| -> Result<Tensor> {
            let mut z = matmul(x, w)?;
            let c = z.cols();
            z.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v += b.data()[i % c]);
            Ok(z)
        };
        let t = &self.tensors;
        if t.len() == 4 {
            let h = gelu(&affine(x, &t[0], &t[1])?);
            affine(&h, &t[2], &t[3])
        } else {
            affine(x, &t[0], &t[1])
        }
    }
}

fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Result<Tensor> {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-a..a)).collect())
}

fn init_probe(dim: usize, classes: usize, kind: TaskKind, cfg: &ProbeConfig) -> Result<ProbeWeights> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let tensors = if cfg.hidden_dim == 0 {
        vec![xavier(&mut rng, dim, classes)?, Tensor::zeros(&[classes])]
    } else {
        let hd = cfg.hidden_dim;
        vec![
            xavier(&mut rng, dim, hd)?,
            Tensor::zeros(&[hd]),
            xavier(&mut rng, hd, classes)?,
            Tensor::zeros(&[classes]),
        ]
    };
    Ok(ProbeWeights { kind, tensors })
}

fn batch_loss(w: &ProbeWeights, batch: &Dataset) -> Result<(f64, Vec<Tensor>)> {
    let mut g = Graph::new();
    let params: Vec<_> = w
        .tensors
        .iter()
        .map(|t| {
            let mut t = t.clone();
            t.set_requires_grad(true);
            g.leaf(t)
        })
        .collect();
    let x = g.constant(batch.x.clone());
    let mut z = g.matmul(x, params[0])?;
    z = g.add_row(z, params[1])?;
    if params.len() == 4 {
        z = g.gelu(z);
        z = g.matmul(z, params[2])?;
        z = g.add_row(z, params[3])?;
    }
    let loss = match &batch.y {
        Targets::Classes(c) => g.cross_entropy(z, c)?,
        Targets::Binary { matrix, .. } => g.bce_with_logits(z, matrix)?,
    };
    let value = g.value(loss).data()[0];
    let mut grads = g.backward(loss)?;
    let grads = params.iter().zip(&w.tensors).map(|(&id, t)| grads.take_or_zeros(id, t)).collect();
    Ok((value, grads))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// "accuracy" or "mAP".
    pub metric: String,
    pub value: f64,
    /// Per-class accuracy (recall) or AP; `None` for classes without examples.
    pub per_class: Vec<Option<f64>>,
    pub count: usize,
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Average precision of one class; `None` without positives.
/// Ranked by score descending, ties by original index.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut hits, mut sum) = (0usize, 0.0);
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Some(sum / positives as f64)
}

/// Per-class AP for an `n × C` score matrix and 0/1 labels.
pub fn per_class_ap(scores: &Tensor, labels: &[f64]) -> Result<Vec<Option<f64>>> {
    let (n, c) = (scores.rows(), scores.cols());
    if labels.len() != n * c {
        return Err(Error::Dimension(format!("{} labels for {n}×{c} scores", labels.len())));
    }
    Ok((0..c)
        .map(|k| {
            let s: Vec<f64> = (0..n).map(|r| scores.at(r, k)).collect();
            let l: Vec<bool> = (0..n).map(|r| labels[r * c + k] > 0.5).collect();
            average_precision(&s, &l)
        })
        .collect())
}

/// Macro mean AP over classes that have at least one positive.
pub fn map_score(scores: &Tensor, labels: &[f64]) -> Result<f64> {
    let aps: Vec<f64> = per_class_ap(scores, labels)?.into_iter().flatten().collect();
    if aps.is_empty() {
        return Err(Error::EmptyInput("no class has a positive label".into()));
    }
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}

/// Metrics of raw logits against targets.
pub fn score_logits(logits: &Tensor, y: &Targets) -> Result<Metrics> {
    if logits.rows() != y.len() {
        return Err(Error::Dimension(format!("{} logit rows for {} targets", logits.rows(), y.len())));
    }
    match y {
        Targets::Classes(t) => {
            let c = logits.cols();
            let (mut hit, mut per_hit, mut per_n) = (0usize, vec![0usize; c], vec![0usize; c]);
            for (r, &label) in t.iter().enumerate() {
                let ok = argmax(logits.row(r)) == label;
                hit += ok as usize;
                if label < c {
                    per_n[label] += 1;
                    per_hit[label] += ok as usize;
                }
            }
            let per_class = per_n
                .iter()
                .zip(&per_hit)
                .map(|(&n, &h)| (n > 0).then(|| h as f64 / n as f64))
                .collect();
            Ok(Metrics {
                metric: "accuracy".into(),
                value: hit as f64 / t.len().max(1) as f64,
                per_class,
                count: t.len(),
            })
        }
        Targets::Binary { matrix, .. } => {
            let per_class = per_class_ap(logits, matrix)?;
            let value = map_score(logits, matrix)?;
            Ok(Metrics { metric: "mAP".into(), value, per_class, count: y.len() })
        }
    }
}

pub fn evaluate(probe: &ProbeWeights, data: &Dataset) -> Result<Metrics> {
    score_logits(&probe.logits(&data.x)?, &data.y)
}

fn full_loss(w: &ProbeWeights, data: &Dataset) -> Result<f64> {
    let z = w.logits(&data.x)?;
    match &data.y {
        Targets::Classes(c) => crate::tensor::cross_entropy_logits(&z, c),
        Targets::Binary { matrix, .. } => crate::tensor::bce_with_logits(&z, matrix),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainedProbe {
    pub weights: ProbeWeights,
    pub best_epoch: usize,
    pub epochs_run: usize,
    /// Validation metric after every epoch (training metric without a validation split).
    pub history: Vec<f64>,
}

/// Adam minibatch training; keeps the weights of the best validation epoch.
/// Ties on the metric go to lower validation loss.
pub fn train_probe(train: &Dataset, valid: Option<&Dataset>, kind: TaskKind, num_classes: usize, cfg: &ProbeConfig) -> Result<TrainedProbe> {
    cfg.validate()?;
    let check = |d: &Dataset, what: &str| -> Result<()> {
        if d.dim() != train.dim() {
            return Err(Error::Dimension(format!("{what} dim {} differs from train dim {}", d.dim(), train.dim())));
        }
        match (&d.y, kind) {
            (Targets::Classes(c), TaskKind::Multiclass) => match c.iter().find(|&&l| l >= num_classes) {
                Some(l) => Err(Error::Index(format!("{what} label {l} outside [0, {num_classes})"))),
                None => Ok(()),
            },
            (Targets::Binary { classes, .. }, TaskKind::Multilabel) if *classes == num_classes => Ok(()),
            _ => Err(Error::Validation(format!("{what} targets do not match the task kind"))),
        }
    };
    check(train, "train")?;
    if let Some(v) = valid {
        check(v, "valid")?;
    }
    let monitor = valid.unwrap_or(train);

    let mut w = init_probe(train.dim(), num_classes, kind, cfg)?;
    let mut adam = AdamState::new(&w.tensors, AdamConfig { learning_rate: cfg.learning_rate, ..AdamConfig::default() });
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x70_726f_6265);
    let mut order: Vec<usize> = (0..train.len()).collect();

    let mut best = (f64::NEG_INFINITY, f64::INFINITY);
    let mut best_w = w.clone();
    let (mut best_epoch, mut since, mut history) = (0, 0, Vec::new());
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let (_, grads) = batch_loss(&w, &train.select(chunk)?)?;
            adam_step(&mut w.tensors, &grads, &mut adam)?;
        }
        let m = evaluate(&w, monitor)?.value;
        let l = full_loss(&w, monitor)?;
        history.push(m);
        if m > best.0 || (m == best.0 && l < best.1) {
            best = (m, l);
            best_w = w.clone();
            best_epoch = epoch;
            since = 0;
        } else {
            since += 1;
            if since >= cfg.patience.max(1) {
                break;
            }
        }
    }
    let epochs_run = history.len();
    Ok(TrainedProbe { weights: best_w, best_epoch, epochs_run, history })
}

/// Pooled per-split datasets for one embedding source.
#[derive(Clone, Debug)]
pub struct SplitData {
    pub train: Dataset,
    pub valid: Option<Dataset>,
    pub test: Dataset,
}

/// Per-clip embedding sequences for each split, in task order.
#[derive(Clone, Debug)]
pub struct SourceEmbeddings {
    pub name: String,
    pub train: Vec<EmbeddingSequence>,
    pub valid: Vec<EmbeddingSequence>,
    pub test: Vec<EmbeddingSequence>,
}

fn pooled(seqs: &[EmbeddingSequence], y: Targets) -> Result<Dataset> {
    Dataset::new(seqs.iter().map(pool_clip).collect(), y)
}

pub fn split_data(src: &SourceEmbeddings, task: &TaskSpec) -> Result<SplitData> {
    let s = &task.splits;
    for (what, seqs, items) in [("train", &src.train, &s.train), ("valid", &src.valid, &s.valid), ("test", &src.test, &s.test)] {
        if seqs.len() != items.len() {
            return Err(Error::Dimension(format!(
                "source {}: {} {what} embeddings for {} task items",
                src.name,
                seqs.len(),
                items.len()
            )));
        }
    }
    Ok(SplitData {
        train: pooled(&src.train, task.targets(&s.train))?,
        valid: if s.valid.is_empty() { None } else { Some(pooled(&src.valid, task.targets(&s.valid))?) },
        test: pooled(&src.test, task.targets(&s.test))?,
    })
}

/// Trains on train, selects on valid, reports test metrics.
pub fn run_probe(data: &SplitData, task: &TaskSpec, cfg: &ProbeConfig) -> Result<(TrainedProbe, Metrics)> {
    let trained = train_probe(&data.train, data.valid.as_ref(), task.kind, task.num_classes, cfg)?;
    let m = evaluate(&trained.weights, &data.test)?;
    Ok((trained, m))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub task: String,
    pub sources: Vec<(String, Metrics)>,
    pub concat: Metrics,
    /// Present when all sources share one width.
    pub average: Option<Metrics>,
    /// Concatenation minus each source, in source order.
    pub deltas: Vec<(String, f64)>,
}

fn combined_source(sources: &[SourceEmbeddings], mode: CombinerMode, opts: &EnsembleOptions) -> Result<SourceEmbeddings> {
    let join = |pick: fn(&SourceEmbeddings) -> &Vec<EmbeddingSequence>| -> Result<Vec<EmbeddingSequence>> {
        let n = pick(&sources[0]).len();
        (0..n)
            .map(|i| {
                let clip: Vec<EmbeddingSequence> = sources.iter().map(|s| pick(s)[i].clone()).collect();
                ensemble(&clip, mode, opts)
            })
            .collect()
    };
    let name = match mode {
        CombinerMode::Concatenate => "concat",
        CombinerMode::Average => "average",
    };
    Ok(SourceEmbeddings {
        name: name.into(),
        train: join(|s| &s.train)?,
        valid: join(|s| &s.valid)?,
        test: join(|s| &s.test)?,
    })
}

/// Probes each source alone and their ensembles on the same task.
pub fn run_ensemble_study(sources: &[SourceEmbeddings], task: &TaskSpec, cfg: &ProbeConfig, opts: &EnsembleOptions) -> Result<StudyReport> {
    if sources.len() < 2 {
        return Err(Error::Validation(format!("ensemble study needs at least 2 sources, got {}", sources.len())));
    }
    for s in &sources[1..] {
        if (s.train.len(), s.valid.len(), s.test.len()) != (sources[0].train.len(), sources[0].valid.len(), sources[0].test.len()) {
            return Err(Error::Dimension(format!("source {} covers different clips than {}", s.name, sources[0].name)));
        }
    }
    let mut per = Vec::new();
    for s in sources {
        per.push((s.name.clone(), run_probe(&split_data(s, task)?, task, cfg)?.1));
    }
    let concat = run_probe(&split_data(&combined_source(sources, CombinerMode::Concatenate, opts)?, task)?, task, cfg)?.1;
    let widths: HashSet<usize> = sources.iter().map(|s| s.train[0].dim()).collect();
    let average = if widths.len() == 1 {
        Some(run_probe(&split_data(&combined_source(sources, CombinerMode::Average, opts)?, task)?, task, cfg)?.1)
    } else {
        None
    };
    let deltas = per.iter().map(|(n, m)| (n.clone(), concat.value - m.value)).collect();
    Ok(StudyReport { task: task.name.clone(), sources: per, concat, average, deltas })
}

/// Two views of one 4-class label `2a + b`: view A sees bit `a` in its
/// first dimension, view B sees bit `b`; everything else is noise. View A
/// has 4 positions per clip and view B 2, both of width `h`.
pub fn two_view_task(per_split: [usize; 3], h: usize, noise: f64, seed: u64) -> Result<(SourceEmbeddings, SourceEmbeddings, TaskSpec)> {
    if h == 0 {
        return Err(Error::Config("two-view width must be at least 1".into()));
    }
    let normal = Normal::new(0.0, noise).map_err(|e| Error::Config(format!("noise {noise}: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let view = |rng: &mut ChaCha8Rng, bit: usize, n: usize, id: &str| -> Result<EmbeddingSequence> {
        let mut d = Vec::with_capacity(n * h);
        for _ in 0..n {
            d.push(2.0 * bit as f64 - 1.0 + normal.sample(rng));
            d.extend((1..h).map(|_| normal.sample(rng)));
        }
        EmbeddingSequence::new(Tensor::matrix(n, h, d)?, n as f64, id)
    };
    let mut a = SourceEmbeddings { name: "A".into(), train: vec![], valid: vec![], test: vec![] };
    let mut b = SourceEmbeddings { name: "B".into(), train: vec![], valid: vec![], test: vec![] };
    let mut splits = Splits::default();
    let mut clip = 0;
    for (si, &count) in per_split.iter().enumerate() {
        for _ in 0..count {
            let label = rng.gen_range(0..4usize);
            let (bit_a, bit_b) = (label / 2, label % 2);
            let sa = view(&mut rng, bit_a, 4, "A")?;
            let sb = view(&mut rng, bit_b, 2, "B")?;
            let item = TaskItem {
                clip_path: Some(PathBuf::from(format!("clip{clip:05}"))),
                oemb_path: None,
                label: Some(label),
                labels: None,
            };
            clip += 1;
            let (va, vb, items) = match si {
                0 => (&mut a.train, &mut b.train, &mut splits.train),
                1 => (&mut a.valid, &mut b.valid, &mut splits.valid),
                _ => (&mut a.test, &mut b.test, &mut splits.test),
            };
            va.push(sa);
            vb.push(sb);
            items.push(item);
        }
    }
    let task = TaskSpec { name: "two-view".into(), kind: TaskKind::Multiclass, num_classes: 4, domain: None, splits };
    task.validate()?;
    Ok((a, b, task))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(rows: &[&[f64]]) -> EmbeddingSequence {
        EmbeddingSequence::new(Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap(), 1.0, "s").unwrap()
    }

    #[test]
    fn pooling() {
        assert_eq!(pool_clip(&seq(&[&[1.0, 2.0]])), vec![1.0, 2.0]);
        assert_eq!(pool_clip(&seq(&[&[3.0], &[3.0], &[3.0]])), vec![3.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let rows: Vec<Vec<f64>> = (0..5).map(|_| (0..3).map(|_| rng.gen()).collect()).collect();
        let s = EmbeddingSequence::new(Tensor::from_rows(&rows).unwrap(), 1.0, "r").unwrap();
        let p = pool_clip(&s);
        for c in 0..3 {
            let want = rows.iter().map(|r| r[c]).sum::<f64>() / 5.0;
            assert!((p[c] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn map_examples() {
        assert!((average_precision(&[0.9, 0.8, 0.7], &[true, false, true]).unwrap() - 5.0 / 6.0).abs() < 1e-15);
        assert_eq!(average_precision(&[0.1, 0.9, 0.5], &[false, true, true]), Some(1.0));
        assert_eq!(average_precision(&[0.1, 0.2], &[false, false]), None);
        // tie: earlier index ranks first
        assert_eq!(average_precision(&[0.5, 0.5], &[false, true]), Some(0.5));
        let scores = Tensor::from_rows(&[vec![0.9, 0.1], vec![0.2, 0.3]]).unwrap();
        // class 1 has no positives and is excluded
        assert_eq!(map_score(&scores, &[1.0, 0.0, 0.0, 0.0]).unwrap(), 1.0);
    }

    #[test]
    fn accuracy_rules() {
        let y = Targets::Classes(vec![0, 1, 2, 3]);
        let perfect = Tensor::identity(4);
        assert_eq!(score_logits(&perfect, &y).unwrap().value, 1.0);
        let flat = Tensor::zeros(&[4, 4]);
        let m = score_logits(&flat, &y).unwrap();
        assert_eq!(m.value, 0.25);
        assert_eq!(m.per_class, vec![Some(1.0), Some(0.0), Some(0.0), Some(0.0)]);
    }

    fn separable() -> (Dataset, Dataset) {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut make = |n: usize| {
            let mut rows = Vec::new();
            let mut ys = Vec::new();
            for i in 0..n {
                let c = i % 2;
                let s = if c == 0 { -1.0 } else { 1.0 };
                rows.push(vec![s * rng.gen_range(0.5..2.0), rng.gen_range(-1.0..1.0)]);
                ys.push(c);
            }
            Dataset::new(rows, Targets::Classes(ys)).unwrap()
        };
        (make(60), make(40))
    }

    #[test]
    fn separable_two_class() {
        let (train, test) = separable();
        let cfg = ProbeConfig { epochs: 50, batch_size: 8, learning_rate: 1e-2, hidden_dim: 16, ..Default::default() };
        let p = train_probe(&train, None, TaskKind::Multiclass, 2, &cfg).unwrap();
        assert_eq!(evaluate(&p.weights, &test).unwrap().value, 1.0);
        let again = train_probe(&train, None, TaskKind::Multiclass, 2, &cfg).unwrap();
        assert_eq!(again, p);
        let lin = ProbeConfig { hidden_dim: 0, ..cfg.clone() };
        let p = train_probe(&train, None, TaskKind::Multiclass, 2, &lin).unwrap();
        assert_eq!(p.weights.tensors.len(), 2);
        assert_eq!(evaluate(&p.weights, &test).unwrap().value, 1.0);
    }

    #[test]
    fn probe_errors() {
        let (train, _) = separable();
        let zero = ProbeConfig { epochs: 0, ..Default::default() };
        assert!(matches!(train_probe(&train, None, TaskKind::Multiclass, 2, &zero), Err(Error::Validation(_))));
        let other = Dataset::new(vec![vec![0.0; 3]], Targets::Classes(vec![0])).unwrap();
        let r = train_probe(&train, Some(&other), TaskKind::Multiclass, 2, &ProbeConfig::default());
        assert!(matches!(r, Err(Error::Dimension(_))));
        assert!(matches!(
            Dataset::new(vec![vec![0.0; 3], vec![0.0; 2]], Targets::Classes(vec![0, 1])),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn multilabel_probe() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut rows = Vec::new();
        let mut m = Vec::new();
        for _ in 0..80 {
            let a: bool = rng.gen();
            let b: bool = rng.gen();
            rows.push(vec![a as u8 as f64 + rng.gen_range(-0.2..0.2), b as u8 as f64 + rng.gen_range(-0.2..0.2)]);
            m.extend([a as u8 as f64, b as u8 as f64]);
        }
        let d = Dataset::new(rows, Targets::Binary { classes: 2, matrix: m }).unwrap();
        let cfg = ProbeConfig { hidden_dim: 0, epochs: 60, batch_size: 8, learning_rate: 3e-2, ..Default::default() };
        let p = train_probe(&d, None, TaskKind::Multilabel, 2, &cfg).unwrap();
        let r = evaluate(&p.weights, &d).unwrap();
        assert_eq!(r.metric, "mAP");
        assert!(r.value > 0.99, "{}", r.value);
    }

    #[test]
    fn task_validation() {
        let item = |p: &str, l: usize| TaskItem { clip_path: Some(p.into()), oemb_path: None, label: Some(l), labels: None };
        let mut t = TaskSpec {
            name: "t".into(),
            kind: TaskKind::Multiclass,
            num_classes: 2,
            domain: None,
            splits: Splits { train: vec![item("a", 0)], valid: vec![], test: vec![item("b", 1)] },
        };
        t.validate().unwrap();
        t.splits.test.push(item("a", 1));
        assert!(t.validate().is_err());
        t.splits.test.pop();
        t.splits.train.push(item("c", 2));
        assert!(t.validate().is_err());
        assert!(serde_json::from_str::<TaskSpec>(r#"{"name":"x","kind":"multiclass","num_classes":2,"splits":{"train":[],"test":[]},"extra":1}"#).is_err());
    }

    #[test]
    fn small_study() {
        let (a, b, task) = two_view_task([200, 60, 200], 4, 0.3, 3).unwrap();
        let cfg = ProbeConfig { hidden_dim: 32, epochs: 30, learning_rate: 1e-2, ..Default::default() };
        let r = run_ensemble_study(&[a, b], &task, &cfg, &EnsembleOptions::default()).unwrap();
        assert!(r.sources.iter().all(|(_, m)| m.value <= 0.75), "{r:?}");
        assert!(r.concat.value >= 0.95, "{r:?}");
        assert!(r.average.as_ref().unwrap().value < r.concat.value);
    }
}
