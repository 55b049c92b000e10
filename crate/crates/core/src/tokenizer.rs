//! Centroid codebooks that turn continuous features into discrete targets.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::PatchGrid;
use crate::encoder::{patch_features, EncoderWeights};
use crate::error::{Error, Result};
use crate::par;
use crate::tensor::Tensor;

/// Two centroids closer than this in every coordinate count as identical.
pub const DUPLICATE_TOLERANCE: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureSource {
    /// Raw flattened patches (iteration 0).
    Patch,
    /// Final-layer per-patch outputs of a teacher encoder.
    EncoderLayerOutput,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    /// `K × d`.
    pub centroids: Tensor,
    pub iteration: u32,
    pub feature_source: FeatureSource,
}

impl Codebook {
    pub fn size(&self) -> usize {
        self.centroids.rows()
    }

    pub fn dim(&self) -> usize {
        self.centroids.cols()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub tokens: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct FitReport {
    /// Inertia after every assignment pass, in order.
    pub inertia_history: Vec<f64>,
    pub iterations: usize,
}

impl FitReport {
    pub fn final_inertia(&self) -> f64 {
        *self.inertia_history.last().unwrap_or(&0.0)
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid by squared distance, lowest index on ties.
fn nearest(centroids: &Tensor, x: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for k in 0..centroids.rows() {
        let d = sq_dist(centroids.row(k), x);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

fn assign(centroids: &Tensor, features: &Tensor) -> Vec<(usize, f64)> {
    par::map_range(features.rows(), |i| nearest(centroids, features.row(i)))
}

/// Sum of squared distances from each feature row to its nearest centroid.
pub fn inertia(centroids: &Tensor, features: &Tensor) -> f64 {
    assign(centroids, features).iter().map(|(_, d)| d).sum()
}

fn kmeans_pp(features: &Tensor, k: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<f64>>> {
    let n = features.rows();
    let mut centers = vec![features.row(rng.gen_range(0..n)).to_vec()];
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(features.row(i), &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        if total <= 0.0 {
            return Err(Error::InsufficientData(format!(
                "only {} distinct feature vectors for a codebook of {k}",
                centers.len()
            )));
        }
        let mut target = rng.gen_range(0.0..total);
        let mut pick = n - 1;
        for (i, &w) in d2.iter().enumerate() {
            if w > 0.0 && target < w {
                pick = i;
                break;
            }
            target -= w;
        }
        while d2[pick] == 0.0 {
            pick -= 1;
        }
        let c = features.row(pick).to_vec();
        for (i, v) in d2.iter_mut().enumerate() {
            *v = v.min(sq_dist(features.row(i), &c));
        }
        centers.push(c);
    }
    Ok(centers)
}

fn means(features: &Tensor, labels: &[usize], k: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
    let d = features.cols();
    let mut sums = vec![vec![0.0; d]; k];
    let mut counts = vec![0usize; k];
    for (i, &l) in labels.iter().enumerate() {
        counts[l] += 1;
        sums[l].iter_mut().zip(features.row(i)).for_each(|(s, x)| *s += x);
    }
    for (s, &c) in sums.iter_mut().zip(&counts) {
        if c > 0 {
            s.iter_mut().for_each(|v| *v /= c as f64);
        }
    }
    (sums, counts)
}

/// One sweep of single-point moves that strictly lower the partition's inertia.
/// Returns whether any point moved.
fn single_moves(features: &Tensor, labels: &mut [usize], centers: &mut [Vec<f64>], counts: &mut [usize]) -> bool {
    let k = centers.len();
    let mut moved = false;
    for i in 0..features.rows() {
        let x = features.row(i);
        let a = labels[i];
        if counts[a] <= 1 {
            continue;
        }
        let na = counts[a] as f64;
        let removal = na / (na - 1.0) * sq_dist(x, &centers[a]);
        let mut best = (a, removal);
        for b in 0..k {
            if b == a {
                continue;
            }
            let nb = counts[b] as f64;
            let add = nb / (nb + 1.0) * sq_dist(x, &centers[b]);
            if add < best.1 * (1.0 - 1e-12) {
                best = (b, add);
            }
        }
        let b = best.0;
        if b != a {
            let (na, nb) = (counts[a] as f64, counts[b] as f64);
            for (j, &xv) in x.iter().enumerate() {
                centers[a][j] = (centers[a][j] * na - xv) / (na - 1.0);
                centers[b][j] = (centers[b][j] * nb + xv) / (nb + 1.0);
            }
            counts[a] -= 1;
            counts[b] += 1;
            labels[i] = b;
            moved = true;
        }
    }
    moved
}

fn to_tensor(centers: &[Vec<f64>]) -> Result<Tensor> {
    Tensor::from_rows(centers)
}

/// Lloyd iterations from k-means++ seeds, then single-point-move refinement.
pub fn fit_codebook_with_report(
    features: &Tensor,
    k: usize,
    max_iters: usize,
    seed: u64,
) -> Result<(Codebook, FitReport)> {
    let n = features.rows();
    if k == 0 {
        return Err(Error::Config("codebook size must be positive".into()));
    }
    if n < k {
        return Err(Error::InsufficientData(format!("{n} feature vectors for a codebook of {k}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = kmeans_pp(features, k, &mut rng)?;
    let mut history = Vec::new();
    let mut labels: Vec<usize> = vec![usize::MAX; n];
    let mut iterations = 0;

    while iterations < max_iters.max(1) {
        iterations += 1;
        let c = to_tensor(&centers)?;
        let assigned = assign(&c, features);
        history.push(assigned.iter().map(|(_, d)| d).sum());
        let new_labels: Vec<usize> = assigned.iter().map(|(l, _)| *l).collect();
        let stable = new_labels == labels;
        labels = new_labels;
        let (mut next, counts) = means(features, &labels, k);
        // empty clusters take the point farthest from its centroid
        let mut taken: Vec<usize> = Vec::new();
        for e in (0..k).filter(|&j| counts[j] == 0) {
            let far = (0..n)
                .filter(|i| !taken.contains(i))
                .max_by(|&i, &j| assigned[i].1.total_cmp(&assigned[j].1).then(j.cmp(&i)))
                .expect("n >= k");
            taken.push(far);
            next[e] = features.row(far).to_vec();
        }
        let changed = !taken.is_empty();
        centers = next;
        if stable && !changed {
            let (_, mut counts) = means(features, &labels, k);
            if !single_moves(features, &mut labels, &mut centers, &mut counts) {
                break;
            }
            centers = means(features, &labels, k).0;
        }
    }
    let c = to_tensor(&centers)?;
    history.push(inertia(&c, features));

    for a in 0..k {
        for b in a + 1..k {
            let same = c.row(a).iter().zip(c.row(b)).all(|(x, y)| (x - y).abs() <= DUPLICATE_TOLERANCE);
            if same {
                return Err(Error::InsufficientData(format!(
                    "centroids {a} and {b} coincide; the features have fewer than {k} distinct values"
                )));
            }
        }
    }
    let codebook = Codebook { centroids: c, iteration: 0, feature_source: FeatureSource::Patch };
    Ok((codebook, FitReport { inertia_history: history, iterations }))
}

pub fn fit_codebook(features: &Tensor, k: usize, max_iters: usize, seed: u64) -> Result<Codebook> {
    fit_codebook_with_report(features, k, max_iters, seed).map(|(c, _)| c)
}

pub fn quantize(codebook: &Codebook, features: &Tensor) -> Result<TokenSequence> {
    if features.cols() != codebook.dim() {
        return Err(Error::Dimension(format!(
            "features of width {} against a codebook of width {}",
            features.cols(),
            codebook.dim()
        )));
    }
    let tokens = assign(&codebook.centroids, features).into_iter().map(|(t, _)| t).collect();
    Ok(TokenSequence { tokens })
}

/// Features a codebook of the given source consumes for one grid.
pub fn tokenizer_features(
    source: FeatureSource,
    teacher: Option<&EncoderWeights>,
    grid: &PatchGrid,
) -> Result<Tensor> {
    match (source, teacher) {
        (FeatureSource::Patch, _) => Ok(grid.patches.clone()),
        (FeatureSource::EncoderLayerOutput, Some(w)) => patch_features(w, grid),
        (FeatureSource::EncoderLayerOutput, None) => Err(Error::Config(
            "encoder-output codebook needs teacher weights".into(),
        )),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TokenizerConfig {
    pub codebook_size: usize,
    pub max_iters: usize,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        TokenizerConfig { codebook_size: 64, max_iters: 50 }
    }
}

/// Refits the codebook for the next teacher/tokenizer round.
///
/// With no teacher the features are the raw patches and the result is
/// iteration 0; otherwise they are the teacher's final-layer patch outputs
/// and the iteration is one past `previous`.
pub fn refine_iteration(
    teacher: Option<&EncoderWeights>,
    previous: Option<&Codebook>,
    corpus: &[PatchGrid],
    cfg: &TokenizerConfig,
    seed: u64,
) -> Result<Codebook> {
    if corpus.is_empty() {
        return Err(Error::Data("tokenizer refit on an empty corpus sample".into()));
    }
    let (source, iteration) = match teacher {
        None => (FeatureSource::Patch, 0),
        Some(_) => (FeatureSource::EncoderLayerOutput, previous.map_or(1, |c| c.iteration + 1)),
    };
    let feats: Vec<Tensor> = par::map(corpus, |g| tokenizer_features(source, teacher, g))
        .into_iter()
        .collect::<Result<_>>()?;
    let d = feats[0].cols();
    let rows: usize = feats.iter().map(Tensor::rows).sum();
    let data: Vec<f64> = feats.iter().flat_map(|t| t.data().iter().copied()).collect();
    let all = Tensor::matrix(rows, d, data)?;
    let mut cb = fit_codebook(&all, cfg.codebook_size, cfg.max_iters, seed)?;
    cb.iteration = iteration;
    cb.feature_source = source;
    Ok(cb)
}
