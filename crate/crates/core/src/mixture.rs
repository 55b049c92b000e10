//! Dataset manifests, domain-hour accounting and ratio-targeted sampling.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Speech,
    Music,
    Sound,
}

impl Domain {
    pub const ALL: [Domain; 3] = [Domain::Speech, Domain::Music, Domain::Sound];

    pub fn parse(s: &str) -> Option<Domain> {
        match s {
            "speech" => Some(Domain::Speech),
            "music" => Some(Domain::Music),
            "sound" => Some(Domain::Sound),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Speech => "speech",
            Domain::Music => "music",
            Domain::Sound => "sound",
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub id: String,
    pub domain: Domain,
    pub hours: f64,
    pub path_glob: String,
    pub enabled: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub entries: Vec<DatasetEntry>,
    /// Relative globs resolve against this directory.
    pub base_dir: PathBuf,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawManifest {
    version: u32,
    entries: Vec<RawEntry>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEntry {
    id: String,
    domain: String,
    hours: f64,
    path_glob: String,
    #[serde(default = "yes")]
    enabled: bool,
}

fn yes() -> bool {
    true
}

#[derive(Serialize)]
struct ManifestOut<'a> {
    version: u32,
    entries: &'a [DatasetEntry],
}

pub const MANIFEST_VERSION: u32 = 1;

impl DatasetManifest {
    pub fn parse(json: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let raw: RawManifest = serde_json::from_str(json)
            .map_err(|e| Error::Validation(format!("manifest: {e}")))?;
        if raw.version != MANIFEST_VERSION {
            return Err(Error::Validation(format!(
                "manifest version {} (expected {MANIFEST_VERSION})",
                raw.version
            )));
        }
        let mut seen = HashSet::new();
        let mut entries = Vec::with_capacity(raw.entries.len());
        for e in raw.entries {
            if !seen.insert(e.id.clone()) {
                return Err(Error::Validation(format!("entry {:?}: duplicate id", e.id)));
            }
            let domain = Domain::parse(&e.domain).ok_or_else(|| {
                Error::Validation(format!(
                    "entry {:?}: unknown domain {:?} (expected speech, music or sound)",
                    e.id, e.domain
                ))
            })?;
            if !(e.hours >= 0.0 && e.hours.is_finite()) {
                return Err(Error::Validation(format!("entry {:?}: hours {} must be >= 0", e.id, e.hours)));
            }
            entries.push(DatasetEntry {
                id: e.id,
                domain,
                hours: e.hours,
                path_glob: e.path_glob,
                enabled: e.enabled,
            });
        }
        Ok(DatasetManifest { entries, base_dir: base_dir.into() })
    }

    pub fn to_json(&self) -> String {
        let out = ManifestOut { version: MANIFEST_VERSION, entries: &self.entries };
        serde_json::to_string_pretty(&out).expect("manifest serializes")
    }

    pub fn set_enabled(&mut self, id: &str, enabled: bool) -> Result<()> {
        let e = self
            .entries
            .iter_mut()
            .find(|e| e.id == id)
            .ok_or_else(|| Error::Validation(format!("no manifest entry with id {id:?}")))?;
        e.enabled = enabled;
        Ok(())
    }

    pub fn enabled(&self) -> impl Iterator<Item = &DatasetEntry> {
        self.entries.iter().filter(|e| e.enabled)
    }
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    DatasetManifest::parse(&text, base)
}

/// Hours per domain over enabled entries; every domain is present.
pub fn domain_totals(m: &DatasetManifest) -> BTreeMap<Domain, f64> {
    let mut out: BTreeMap<Domain, f64> = Domain::ALL.iter().map(|d| (*d, 0.0)).collect();
    for e in m.enabled() {
        *out.get_mut(&e.domain).expect("all domains seeded") += e.hours;
    }
    out
}

pub fn mixture_ratios(m: &DatasetManifest) -> Result<BTreeMap<Domain, f64>> {
    let totals = domain_totals(m);
    let sum: f64 = totals.values().sum();
    if sum <= 0.0 {
        return Err(Error::EmptyPool);
    }
    Ok(totals.into_iter().map(|(d, h)| (d, h / sum)).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub name: String,
    pub target_ratios: BTreeMap<Domain, f64>,
}

impl MixtureSpec {
    pub fn new(name: impl Into<String>, ratios: &[(Domain, f64)]) -> Result<Self> {
        let mut target_ratios: BTreeMap<Domain, f64> = Domain::ALL.iter().map(|d| (*d, 0.0)).collect();
        for &(d, r) in ratios {
            if !(r >= 0.0 && r.is_finite()) {
                return Err(Error::Config(format!("ratio for {d} must be >= 0, got {r}")));
            }
            target_ratios.insert(d, r);
        }
        let sum: f64 = target_ratios.values().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("mixture ratios sum to {sum}, not 1")));
        }
        Ok(MixtureSpec { name: name.into(), target_ratios })
    }

    /// 70:15:15 speech:music:sound.
    pub fn speech_heavy() -> Self {
        Self::new("speech-heavy", &[(Domain::Speech, 0.70), (Domain::Music, 0.15), (Domain::Sound, 0.15)])
            .expect("valid preset")
    }

    /// 40:30:30 speech:music:sound.
    pub fn balanced() -> Self {
        Self::new("balanced", &[(Domain::Speech, 0.40), (Domain::Music, 0.30), (Domain::Sound, 0.30)])
            .expect("valid preset")
    }

    pub fn named(name: &str) -> Result<Self> {
        match name {
            "speech-heavy" => Ok(Self::speech_heavy()),
            "balanced" => Ok(Self::balanced()),
            other => Err(Error::Config(format!(
                "unknown mixture {other:?}; expected speech-heavy or balanced"
            ))),
        }
    }

    pub fn ratio(&self, d: Domain) -> f64 {
        self.target_ratios.get(&d).copied().unwrap_or(0.0)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WithinDomain {
    /// Datasets drawn proportionally to their hours.
    #[default]
    Hours,
    /// Every enabled dataset in a domain equally likely.
    Uniform,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ClipRef {
    pub dataset_id: String,
    pub domain: Domain,
    pub path: PathBuf,
}

#[derive(Clone, Debug)]
struct ResolvedDataset {
    id: String,
    weight: f64,
    files: Vec<PathBuf>,
}

/// Counter-based sampler: draw `i` depends only on `(seed, i)`.
#[derive(Clone, Debug)]
pub struct Sampler {
    seed: u64,
    domains: Vec<(Domain, f64, Vec<ResolvedDataset>)>,
}

fn resolve_glob(base: &Path, pattern: &str) -> Result<Vec<PathBuf>> {
    let full = if Path::new(pattern).is_absolute() {
        pattern.to_string()
    } else {
        base.join(pattern).to_string_lossy().into_owned()
    };
    let paths = glob::glob(&full).map_err(|e| Error::Config(format!("bad glob {pattern:?}: {e}")))?;
    let mut files: Vec<PathBuf> = paths.filter_map(|p| p.ok()).filter(|p| p.is_file()).collect();
    files.sort();
    Ok(files)
}

impl Sampler {
    pub fn new(m: &DatasetManifest, spec: &MixtureSpec, within: WithinDomain, seed: u64) -> Result<Self> {
        let mut domains = Vec::new();
        for d in Domain::ALL {
            let ratio = spec.ratio(d);
            if ratio <= 0.0 {
                continue;
            }
            let mut sets = Vec::new();
            for e in m.enabled().filter(|e| e.domain == d) {
                let weight = match within {
                    WithinDomain::Hours => e.hours,
                    WithinDomain::Uniform => 1.0,
                };
                if weight <= 0.0 {
                    continue;
                }
                let files = resolve_glob(&m.base_dir, &e.path_glob)?;
                if files.is_empty() {
                    return Err(Error::Data(format!(
                        "dataset {:?}: glob {:?} matched no files under {}",
                        e.id,
                        e.path_glob,
                        m.base_dir.display()
                    )));
                }
                sets.push(ResolvedDataset { id: e.id.clone(), weight, files });
            }
            if sets.is_empty() {
                return Err(Error::Config(format!(
                    "mixture {:?} targets {d} at {ratio} but no enabled dataset supplies it",
                    spec.name
                )));
            }
            domains.push((d, ratio, sets));
        }
        Ok(Sampler { seed, domains })
    }

    fn pick<T>(items: &[T], weight: impl Fn(&T) -> f64, u: f64) -> usize {
        let total: f64 = items.iter().map(&weight).sum();
        let mut target = u * total;
        for (i, it) in items.iter().enumerate() {
            let w = weight(it);
            if target < w {
                return i;
            }
            target -= w;
        }
        items.len() - 1
    }

    pub fn draw(&self, index: u64) -> ClipRef {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index);
        let di = Self::pick(&self.domains, |d| d.1, rng.gen::<f64>());
        let (domain, _, sets) = &self.domains[di];
        let si = Self::pick(sets, |s| s.weight, rng.gen::<f64>());
        let set = &sets[si];
        let fi = rng.gen_range(0..set.files.len());
        ClipRef { dataset_id: set.id.clone(), domain: *domain, path: set.files[fi].clone() }
    }

    /// Draws `start..start + n`, in order.
    pub fn draw_range(&self, start: u64, n: usize) -> Vec<ClipRef> {
        par::map_range(n, |i| self.draw(start + i as u64))
    }
}

/// `batch_size` clip references for a fixed seed.
pub fn sample_batch(m: &DatasetManifest, spec: &MixtureSpec, batch_size: usize, seed: u64) -> Result<Vec<ClipRef>> {
    Ok(Sampler::new(m, spec, WithinDomain::Hours, seed)?.draw_range(0, batch_size))
}
