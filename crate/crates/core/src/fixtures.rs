//! Deterministic synthetic corpus and reference tables.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dsp::{write_wav, Waveform};
use crate::error::{Error, Result};
use crate::mixture::{DatasetEntry, DatasetManifest, Domain};
use crate::probe::{Splits, TaskItem, TaskKind, TaskSpec};
use crate::report::ResultRecord;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Recipe {
    Tone { freq: f64, amp: f64 },
    Mixture { freqs: Vec<f64>, amp: f64 },
    Chirp { f0: f64, f1: f64, amp: f64 },
    /// White noise through a one-pole high-pass then one-pole low-pass.
    Noise { seed: u64, low_hz: f64, high_hz: f64, amp: f64 },
}

impl Recipe {
    pub fn render(&self, sample_rate: u32, duration: f64) -> Result<Waveform> {
        let n = (duration * sample_rate as f64).round() as usize;
        let sr = sample_rate as f64;
        let t = |i: usize| i as f64 / sr;
        let samples: Vec<f64> = match self {
            Recipe::Tone { freq, amp } => (0..n).map(|i| amp * (2.0 * PI * freq * t(i)).sin()).collect(),
            Recipe::Mixture { freqs, amp } => (0..n)
                .map(|i| amp * freqs.iter().map(|f| (2.0 * PI * f * t(i)).sin()).sum::<f64>() / freqs.len() as f64)
                .collect(),
            Recipe::Chirp { f0, f1, amp } => {
                let k = (f1 - f0) / duration;
                (0..n).map(|i| amp * (2.0 * PI * (f0 * t(i) + 0.5 * k * t(i) * t(i))).sin()).collect()
            }
            Recipe::Noise { seed, low_hz, high_hz, amp } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                let a_hp = (-2.0 * PI * low_hz / sr).exp();
                let a_lp = (-2.0 * PI * high_hz / sr).exp();
                let (mut prev_x, mut hp, mut lp) = (0.0, 0.0, 0.0);
                let raw: Vec<f64> = (0..n)
                    .map(|_| {
                        let x: f64 = rng.gen_range(-1.0..1.0);
                        hp = a_hp * (hp + x - prev_x);
                        prev_x = x;
                        lp = (1.0 - a_lp) * hp + a_lp * lp;
                        lp
                    })
                    .collect();
                let peak = raw.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
                raw.into_iter().map(|v| amp * v / peak).collect()
            }
        };
        Waveform::new(samples, sample_rate)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipSpec {
    pub name: String,
    pub domain: Domain,
    pub class: usize,
    pub recipe: Recipe,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticCorpusSpec {
    pub clips_per_class: usize,
    pub duration: f64,
    pub sample_rate: u32,
    pub seed: u64,
    /// Per class: train, valid, test counts.
    pub split: [usize; 3],
}

impl Default for SyntheticCorpusSpec {
    fn default() -> Self {
        SyntheticCorpusSpec { clips_per_class: 16, duration: 1.0, sample_rate: 16_000, seed: 0, split: [10, 2, 4] }
    }
}

pub const CLASS_NAMES: [&str; 4] = ["tone", "mixture", "chirp", "noise"];

impl SyntheticCorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.clips_per_class == 0 || !(self.duration > 0.0) || self.sample_rate == 0 {
            return Err(Error::Config("corpus needs clips, a positive duration and a sample rate".into()));
        }
        if self.split.iter().sum::<usize>() != self.clips_per_class || self.split[0] == 0 {
            return Err(Error::Config(format!(
                "split {:?} must sum to clips_per_class {} with a non-empty train part",
                self.split, self.clips_per_class
            )));
        }
        Ok(())
    }

    /// Every clip's recipe, class by class.
    pub fn clips(&self) -> Vec<ClipSpec> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut out = Vec::new();
        for (class, name) in CLASS_NAMES.iter().enumerate() {
            for i in 0..self.clips_per_class {
                let amp = rng.gen_range(0.2..0.6);
                let (domain, recipe) = match class {
                    0 => (Domain::Speech, Recipe::Tone { freq: rng.gen_range(150.0..900.0), amp }),
                    1 => {
                        let base = rng.gen_range(1200.0..2400.0);
                        (Domain::Speech, Recipe::Mixture { freqs: vec![base, base * 1.5, base * 2.0], amp })
                    }
                    2 => {
                        let f0 = rng.gen_range(300.0..1000.0);
                        (Domain::Music, Recipe::Chirp { f0, f1: f0 + rng.gen_range(2000.0..5000.0), amp })
                    }
                    _ => {
                        let low = rng.gen_range(2500.0..4000.0);
                        (Domain::Sound, Recipe::Noise { seed: rng.gen(), low_hz: low, high_hz: low + 2000.0, amp })
                    }
                };
                out.push(ClipSpec { name: format!("{name}_{i:02}"), domain, class, recipe });
            }
        }
        out
    }
}

fn relative(domain: Domain, name: &str) -> PathBuf {
    PathBuf::from("corpus").join(domain.as_str()).join(format!("{name}.wav"))
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSummary {
    pub clips: Vec<ClipSpec>,
    /// Hex SHA-256 over every written file, in path order.
    pub digest: String,
    pub files: Vec<PathBuf>,
}

/// Hex SHA-256 of the files' relative paths and contents, in the given order.
pub fn digest_files(root: &Path, files: &[PathBuf]) -> Result<String> {
    let mut h = Sha256::new();
    for f in files {
        let full = root.join(f);
        h.update(f.to_string_lossy().as_bytes());
        h.update(std::fs::read(&full).map_err(|e| Error::io(&full, e))?);
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(v)? + "\n";
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes `corpus/<domain>/*.wav`, `task.json`, `manifest.json`,
/// `table2.json` and `table1.json` under `out`.
pub fn generate_corpus(spec: &SyntheticCorpusSpec, out: &Path) -> Result<CorpusSummary> {
    spec.validate()?;
    let clips = spec.clips();
    let mut files = Vec::new();
    for d in Domain::ALL {
        let dir = out.join("corpus").join(d.as_str());
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let mut splits = Splits::default();
    for (i, c) in clips.iter().enumerate() {
        let rel = relative(c.domain, &c.name);
        write_wav(&out.join(&rel), &c.recipe.render(spec.sample_rate, spec.duration)?)?;
        let item = TaskItem { clip_path: Some(rel.clone()), oemb_path: None, label: Some(c.class), labels: None };
        let k = i % spec.clips_per_class;
        if k < spec.split[0] {
            splits.train.push(item);
        } else if k < spec.split[0] + spec.split[1] {
            splits.valid.push(item);
        } else {
            splits.test.push(item);
        }
        files.push(rel);
    }
    let task = TaskSpec {
        name: "synthetic-4class".into(),
        kind: TaskKind::Multiclass,
        num_classes: CLASS_NAMES.len(),
        domain: Some("sound".into()),
        splits,
    };
    write_json(&out.join("task.json"), &task)?;
    std::fs::write(out.join("manifest.json"), corpus_manifest(spec).to_json() + "\n")
        .map_err(|e| Error::io(out.join("manifest.json"), e))?;
    std::fs::write(out.join("table2.json"), table2_manifest().to_json() + "\n")
        .map_err(|e| Error::io(out.join("table2.json"), e))?;
    write_json(&out.join("table1.json"), &table1_records())?;
    files.extend(["task.json", "manifest.json", "table2.json", "table1.json"].map(PathBuf::from));
    let digest = digest_files(out, &files)?;
    Ok(CorpusSummary { clips, digest, files })
}

/// One entry per synthetic class, hours equal to its audio length.
pub fn corpus_manifest(spec: &SyntheticCorpusSpec) -> DatasetManifest {
    let hours = spec.clips_per_class as f64 * spec.duration / 3600.0;
    let entries = CLASS_NAMES
        .iter()
        .enumerate()
        .map(|(class, name)| {
            let domain = [Domain::Speech, Domain::Speech, Domain::Music, Domain::Sound][class];
            DatasetEntry {
                id: format!("synthetic-{name}"),
                domain,
                hours,
                path_glob: format!("corpus/{}/{name}_*.wav", domain.as_str()),
                enabled: true,
            }
        })
        .collect();
    DatasetManifest { entries, base_dir: PathBuf::new() }
}

/// `(id, domain, hours)` of the 74,187-hour pretraining pool.
pub const TABLE2: [(&str, Domain, f64); 11] = [
    ("audioset", Domain::Sound, 5000.0),
    ("freesound", Domain::Sound, 4648.0),
    ("bbc-soundeffects", Domain::Sound, 1000.0),
    ("vggsound", Domain::Sound, 548.0),
    ("cochlscene", Domain::Sound, 169.0),
    ("epickitchen", Domain::Sound, 157.0),
    ("fma", Domain::Music, 7824.0),
    ("mtg-jamendo", Domain::Music, 3701.0),
    ("yodas", Domain::Speech, 34759.0),
    ("commonvoice", Domain::Speech, 16304.0),
    ("ears", Domain::Speech, 77.0),
];

/// Real hours, globs pointing at the synthetic corpus of the same domain.
pub fn table2_manifest() -> DatasetManifest {
    let entries = TABLE2
        .iter()
        .map(|&(id, domain, hours)| DatasetEntry {
            id: id.into(),
            domain,
            hours,
            path_glob: format!("corpus/{}/*.wav", domain.as_str()),
            enabled: true,
        })
        .collect();
    DatasetManifest { entries, base_dir: PathBuf::new() }
}

pub const TABLE1_SYSTEMS: [&str; 6] = [
    "Challenge Baseline",
    "BEATs (90M) iter3",
    "Dasheng 1.2B",
    "BEATs (300M) Balanced",
    "BEATs (300M) Speech",
    "Ensemble",
];

/// `(task, domain, scores in TABLE1_SYSTEMS order)`.
pub const TABLE1: [(&str, &str, [f64; 6]); 18] = [
    ("FSD50k", "sound", [0.408, 0.217, 0.455, 0.380, 0.432, 0.463]),
    ("Vocal Imitation", "sound", [0.238, 0.212, 0.293, 0.214, 0.223, 0.295]),
    ("FSD18-Kaggle", "sound", [0.557, 0.545, 0.627, 0.689, 0.612, 0.764]),
    ("DESED", "sound", [0.532, 0.560, 0.563, 0.552, 0.551, 0.566]),
    ("ESC-50", "sound", [0.869, 0.835, 0.891, 0.868, 0.857, 0.904]),
    ("Clotho", "sound", [0.033, 0.042, 0.036, 0.040, 0.041, 0.038]),
    ("UrbanSound 8k", "sound", [0.835, 0.853, 0.846, 0.863, 0.857, 0.862]),
    ("NSynth-Instruments", "music", [0.693, 0.579, 0.660, 0.589, 0.550, 0.729]),
    ("GTZAN Genre", "music", [0.869, 0.836, 0.886, 0.859, 0.845, 0.898]),
    ("Free Music Archive Small", "music", [0.640, 0.614, 0.647, 0.624, 0.616, 0.637]),
    ("LibriCount", "speech", [0.688, 0.665, 0.728, 0.699, 0.705, 0.747]),
    ("CREMA-D", "speech", [0.772, 0.642, 0.790, 0.659, 0.670, 0.815]),
    ("RAVDESS", "speech", [0.725, 0.564, 0.793, 0.630, 0.655, 0.792]),
    ("Fluent Speech Commands", "speech", [0.962, 0.545, 0.973, 0.585, 0.700, 0.956]),
    ("LibriSpeech-MF", "speech", [0.985, 0.970, 0.975, 0.973, 0.986, 0.985]),
    ("Speech Commands V1", "speech", [0.967, 0.910, 0.973, 0.944, 0.958, 0.972]),
    ("VoxLingua33", "speech", [0.855, 0.398, 0.860, 0.480, 0.615, 0.817]),
    ("VocalSound", "speech", [0.910, 0.865, 0.925, 0.877, 0.879, 0.909]),
];

pub fn table1_records() -> Vec<ResultRecord> {
    TABLE1
        .iter()
        .flat_map(|(task, domain, scores)| {
            TABLE1_SYSTEMS.iter().zip(scores).map(move |(system, &value)| ResultRecord {
                task: (*task).into(),
                domain: Some((*domain).into()),
                system: (*system).into(),
                value,
                metric: None,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::{load_wav, log_mel, FrontendConfig, MelFilterbank};
    use crate::mixture::{domain_totals, mixture_ratios};

    #[test]
    fn regeneration_is_stable_and_balanced() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let spec = SyntheticCorpusSpec::default();
        let sa = generate_corpus(&spec, a.path()).unwrap();
        let sb = generate_corpus(&spec, b.path()).unwrap();
        assert_eq!(sa.digest, sb.digest);
        assert_eq!(sa.clips.len(), 64);
        for c in 0..4 {
            assert_eq!(sa.clips.iter().filter(|s| s.class == c).count(), 16);
        }
        let task = TaskSpec::load(&a.path().join("task.json")).unwrap();
        assert_eq!((task.splits.train.len(), task.splits.valid.len(), task.splits.test.len()), (40, 8, 16));
        let m = crate::mixture::load_manifest(&a.path().join("manifest.json")).unwrap();
        assert_eq!(m.entries.len(), 4);
        let other = SyntheticCorpusSpec { seed: 1, ..spec };
        assert_ne!(generate_corpus(&other, b.path()).unwrap().digest, sa.digest);
    }

    #[test]
    fn tone_peaks_at_its_mel_bin() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticCorpusSpec::default();
        let s = generate_corpus(&spec, dir.path()).unwrap();
        let cfg = FrontendConfig::default();
        let centers = MelFilterbank::new(&cfg).centers_hz().to_vec();
        for c in s.clips.iter().filter(|c| c.class == 0) {
            let Recipe::Tone { freq, .. } = c.recipe else { unreachable!() };
            let w = load_wav(&dir.path().join(relative(c.domain, &c.name))).unwrap();
            let mel = log_mel(&w, &cfg).unwrap();
            let mid = mel.frames.row(mel.num_frames() / 2);
            let got = crate::probe::argmax(mid);
            let nearest = (0..centers.len())
                .min_by(|&a, &b| (centers[a] - freq).abs().total_cmp(&(centers[b] - freq).abs()))
                .unwrap();
            assert!(got.abs_diff(nearest) <= 1, "{freq} Hz: bin {got}, nearest center {nearest}");
        }
    }

    #[test]
    fn table2_totals() {
        let m = table2_manifest();
        let t = domain_totals(&m);
        assert_eq!((t[&Domain::Speech], t[&Domain::Music], t[&Domain::Sound]), (51140.0, 11525.0, 11522.0));
        let r = mixture_ratios(&m).unwrap();
        assert!((r[&Domain::Speech] - 0.689).abs() < 1e-3);
    }

    #[test]
    fn bad_spec() {
        let s = SyntheticCorpusSpec { split: [10, 2, 3], ..Default::default() };
        assert!(s.validate().is_err());
    }
}
