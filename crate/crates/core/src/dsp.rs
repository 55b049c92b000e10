//! PCM decoding, log-mel spectrograms and patch grids.

use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Data("waveform has no samples".into()));
        }
        if sample_rate == 0 {
            return Err(Error::Config("sample rate must be positive".into()));
        }
        Ok(Waveform { samples, sample_rate })
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Reads a mono 16-bit PCM RIFF/WAVE file, scaling samples by 1/32768.
pub fn load_wav(path: &Path) -> Result<Waveform> {
    let reader = hound::WavReader::open(path).map_err(|e| map_hound(path, e, "header"))?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int {
        return Err(Error::Format {
            field: "audio_format",
            detail: format!("{}: only integer PCM is supported", path.display()),
        });
    }
    if spec.bits_per_sample != 16 {
        return Err(Error::Format {
            field: "bits_per_sample",
            detail: format!("{}: expected 16, found {}", path.display(), spec.bits_per_sample),
        });
    }
    if spec.channels != 1 {
        return Err(Error::Format {
            field: "channels",
            detail: format!("{}: expected mono, found {} channels", path.display(), spec.channels),
        });
    }
    let expected = reader.len() as usize;
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| map_hound(path, e, "data"))?;
    if samples.len() != expected {
        return Err(Error::Format {
            field: "data",
            detail: format!("{}: header promises {expected} samples, read {}", path.display(), samples.len()),
        });
    }
    Waveform::new(samples, spec.sample_rate).map_err(|_| Error::Format {
        field: "data",
        detail: format!("{}: no samples", path.display()),
    })
}

fn map_hound(path: &Path, e: hound::Error, field: &'static str) -> Error {
    match e {
        hound::Error::IoError(io) if io.kind() == std::io::ErrorKind::NotFound => Error::io(path, io),
        hound::Error::IoError(io) if io.kind() == std::io::ErrorKind::UnexpectedEof => Error::Format {
            field: "data",
            detail: format!("{}: truncated ({io})", path.display()),
        },
        other => Error::Format { field, detail: format!("{}: {other}", path.display()) },
    }
}

/// Writes a mono 16-bit PCM file. Samples are clamped to [-1, 1].
pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let io_err = |e: hound::Error| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Data(format!("{}: {other}", path.display())),
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(io_err)?;
    for &s in &w.samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        writer.write_sample(v).map_err(io_err)?;
    }
    writer.finalize().map_err(io_err)
}

/// Linear-interpolation resampling.
pub fn resample_linear(w: &Waveform, target_rate: u32) -> Waveform {
    if w.sample_rate == target_rate {
        return w.clone();
    }
    let ratio = w.sample_rate as f64 / target_rate as f64;
    let n_out = ((w.samples.len() as f64) / ratio).floor().max(1.0) as usize;
    let last = w.samples.len() - 1;
    let samples = (0..n_out)
        .map(|j| {
            let x = j as f64 * ratio;
            let i = (x.floor() as usize).min(last);
            let frac = x - i as f64;
            let next = (i + 1).min(last);
            w.samples[i] * (1.0 - frac) + w.samples[next] * frac
        })
        .collect();
    Waveform { samples, sample_rate: target_rate }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FrontendConfig {
    pub sample_rate: u32,
    pub n_fft: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
    pub floor: f64,
    pub patch_size: usize,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        FrontendConfig {
            sample_rate: 16_000,
            n_fft: 512,
            hop: 160,
            n_mels: 64,
            fmin: 0.0,
            fmax: 8_000.0,
            floor: 1e-10,
            patch_size: 16,
        }
    }
}

impl FrontendConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !self.n_fft.is_power_of_two() || self.n_fft < 2 {
            return bad(format!("n_fft {} is not a power of two", self.n_fft));
        }
        if self.hop == 0 || self.hop > self.n_fft {
            return bad(format!("hop {} must be in 1..={}", self.hop, self.n_fft));
        }
        if self.n_mels == 0 {
            return bad("n_mels must be positive".into());
        }
        if !(self.fmin >= 0.0 && self.fmin < self.fmax) {
            return bad(format!("need 0 <= fmin < fmax, got {} and {}", self.fmin, self.fmax));
        }
        if self.fmax > self.sample_rate as f64 / 2.0 {
            return bad(format!("fmax {} above Nyquist {}", self.fmax, self.sample_rate as f64 / 2.0));
        }
        if self.floor <= 0.0 {
            return bad(format!("floor {} must be positive", self.floor));
        }
        if self.patch_size == 0 {
            return bad("patch_size must be at least 1".into());
        }
        Ok(())
    }

    pub fn frame_rate(&self) -> f64 {
        self.sample_rate as f64 / self.hop as f64
    }
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular HTK-scale filterbank over the one-sided power spectrum.
#[derive(Clone, Debug)]
pub struct MelFilterbank {
    /// `n_mels` rows of `n_fft/2 + 1` weights.
    weights: Vec<Vec<f64>>,
    centers_hz: Vec<f64>,
}

impl MelFilterbank {
    pub fn new(cfg: &FrontendConfig) -> Self {
        let n_bins = cfg.n_fft / 2 + 1;
        let (lo, hi) = (hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax));
        let edges: Vec<f64> = (0..cfg.n_mels + 2)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
            .collect();
        let bin_hz = cfg.sample_rate as f64 / cfg.n_fft as f64;
        let weights = (0..cfg.n_mels)
            .map(|m| {
                let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
                (0..n_bins)
                    .map(|k| {
                        let f = k as f64 * bin_hz;
                        if f <= l || f >= r {
                            0.0
                        } else if f <= c {
                            (f - l) / (c - l)
                        } else {
                            (r - f) / (r - c)
                        }
                    })
                    .collect()
            })
            .collect();
        MelFilterbank { weights, centers_hz: edges[1..=cfg.n_mels].to_vec() }
    }

    pub fn centers_hz(&self) -> &[f64] {
        &self.centers_hz
    }

    fn apply(&self, power: &[f64], out: &mut [f64]) {
        for (o, w) in out.iter_mut().zip(&self.weights) {
            *o = w.iter().zip(power).map(|(a, b)| a * b).sum();
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogMelSpectrogram {
    /// `T × M`, time-major.
    pub frames: Tensor,
    pub frame_rate: f64,
    pub params: FrontendConfig,
}

impl LogMelSpectrogram {
    pub fn num_frames(&self) -> usize {
        self.frames.rows()
    }

    pub fn num_mels(&self) -> usize {
        self.frames.cols()
    }
}

fn periodic_hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

/// Hann-windowed power STFT → mel filterbank → `ln(x + floor)`.
///
/// Frames start at multiples of `hop` with no centering pad; clips shorter
/// than `n_fft` are zero-padded to a single frame.
pub fn log_mel(w: &Waveform, cfg: &FrontendConfig) -> Result<LogMelSpectrogram> {
    cfg.validate()?;
    if w.sample_rate != cfg.sample_rate {
        return Err(Error::Config(format!(
            "waveform at {} Hz given to a {} Hz frontend",
            w.sample_rate, cfg.sample_rate
        )));
    }
    let n = cfg.n_fft;
    let frames = if w.samples.len() >= n { 1 + (w.samples.len() - n) / cfg.hop } else { 1 };
    let window = periodic_hann(n);
    let bank = MelFilterbank::new(cfg);
    let fft: Arc<dyn Fft<f64>> = FftPlanner::new().plan_fft_forward(n);
    let rows: Vec<Vec<f64>> = par::map_range(frames, |t| {
        let start = t * cfg.hop;
        let mut buf: Vec<Complex<f64>> = (0..n)
            .map(|i| {
                let s = w.samples.get(start + i).copied().unwrap_or(0.0);
                Complex::new(s * window[i], 0.0)
            })
            .collect();
        fft.process(&mut buf);
        let power: Vec<f64> = buf[..n / 2 + 1].iter().map(|c| c.norm_sqr()).collect();
        let mut mel = vec![0.0; cfg.n_mels];
        bank.apply(&power, &mut mel);
        mel.iter_mut().for_each(|v| *v = (*v + cfg.floor).ln());
        mel
    });
    Ok(LogMelSpectrogram {
        frames: Tensor::matrix(frames, cfg.n_mels, rows.concat())?,
        frame_rate: cfg.frame_rate(),
        params: cfg.clone(),
    })
}

/// Resamples to the configured rate if needed, then computes the log-mel.
pub fn frontend(w: &Waveform, cfg: &FrontendConfig) -> Result<LogMelSpectrogram> {
    if w.sample_rate == cfg.sample_rate {
        log_mel(w, cfg)
    } else {
        log_mel(&resample_linear(w, cfg.sample_rate), cfg)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid {
    /// `P × p²`; patch `t·rows_freq + f` holds the tile at time row `t`,
    /// frequency row `f`, flattened time-major.
    pub patches: Tensor,
    pub rows_time: usize,
    pub rows_freq: usize,
    pub patch_size: usize,
    /// Spectrogram frames per second.
    pub frame_rate: f64,
}

impl PatchGrid {
    pub fn num_patches(&self) -> usize {
        self.rows_time * self.rows_freq
    }

    /// Embeddings per second once the frequency rows are pooled.
    pub fn time_rate(&self) -> f64 {
        self.frame_rate / self.patch_size as f64
    }
}

/// Non-overlapping `p×p` tiles in time-major order; remainders are dropped.
pub fn patchify(s: &LogMelSpectrogram, p: usize) -> Result<PatchGrid> {
    if p == 0 {
        return Err(Error::Config("patch size must be at least 1".into()));
    }
    let (t, m) = (s.num_frames(), s.num_mels());
    let (rows_time, rows_freq) = (t / p, m / p);
    if rows_time == 0 || rows_freq == 0 {
        return Err(Error::Data(format!(
            "spectrogram {t}×{m} is smaller than one {p}×{p} patch"
        )));
    }
    let mut data = Vec::with_capacity(rows_time * rows_freq * p * p);
    for rt in 0..rows_time {
        for rf in 0..rows_freq {
            for i in 0..p {
                let row = s.frames.row(rt * p + i);
                data.extend_from_slice(&row[rf * p..(rf + 1) * p]);
            }
        }
    }
    Ok(PatchGrid {
        patches: Tensor::matrix(rows_time * rows_freq, p * p, data)?,
        rows_time,
        rows_freq,
        patch_size: p,
        frame_rate: s.frame_rate,
    })
}

/// Inverse of [`patchify`] on the retained `(rows_time·p) × (rows_freq·p)` region.
pub fn unpatchify(g: &PatchGrid) -> Tensor {
    let p = g.patch_size;
    let (t, m) = (g.rows_time * p, g.rows_freq * p);
    let mut out = vec![0.0; t * m];
    for rt in 0..g.rows_time {
        for rf in 0..g.rows_freq {
            let patch = g.patches.row(rt * g.rows_freq + rf);
            for i in 0..p {
                let dst = (rt * p + i) * m + rf * p;
                out[dst..dst + p].copy_from_slice(&patch[i * p..(i + 1) * p]);
            }
        }
    }
    Tensor::matrix(t, m, out).expect("non-empty grid")
}

/// Decode, frontend and patchify in one step.
pub fn load_patch_grid(path: &Path, cfg: &FrontendConfig) -> Result<PatchGrid> {
    let w = load_wav(path)?;
    patchify(&frontend(&w, cfg)?, cfg.patch_size)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(freq: f64, amp: f64, secs: f64, sr: u32) -> Waveform {
        let n = (secs * sr as f64) as usize;
        let s = (0..n)
            .map(|i| amp * (2.0 * std::f64::consts::PI * freq * i as f64 / sr as f64).sin())
            .collect();
        Waveform::new(s, sr).unwrap()
    }

    fn raw_wav(channels: u16, bits: u16, data_bytes_claimed: u32, data: &[u8]) -> Vec<u8> {
        let mut v = Vec::new();
        v.extend_from_slice(b"RIFF");
        v.extend_from_slice(&(36 + data_bytes_claimed).to_le_bytes());
        v.extend_from_slice(b"WAVEfmt ");
        v.extend_from_slice(&16u32.to_le_bytes());
        v.extend_from_slice(&1u16.to_le_bytes());
        v.extend_from_slice(&channels.to_le_bytes());
        v.extend_from_slice(&16000u32.to_le_bytes());
        let align = channels * bits / 8;
        v.extend_from_slice(&(16000u32 * align as u32).to_le_bytes());
        v.extend_from_slice(&align.to_le_bytes());
        v.extend_from_slice(&bits.to_le_bytes());
        v.extend_from_slice(b"data");
        v.extend_from_slice(&data_bytes_claimed.to_le_bytes());
        v.extend_from_slice(data);
        v
    }

    #[test]
    fn load_silence_and_full_scale() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.wav");
        std::fs::write(&p, raw_wav(1, 16, 32000, &vec![0u8; 32000])).unwrap();
        let w = load_wav(&p).unwrap();
        assert_eq!(w.samples.len(), 16000);
        assert!(w.samples.iter().all(|&s| s == 0.0));
        assert_eq!(w.sample_rate, 16000);

        let loud: Vec<u8> = std::iter::repeat_n(32767i16.to_le_bytes(), 100).flatten().collect();
        std::fs::write(&p, raw_wav(1, 16, 200, &loud)).unwrap();
        let w = load_wav(&p).unwrap();
        assert!(w.samples.iter().all(|&s| (s - 32767.0 / 32768.0).abs() < 1e-12));
        assert!((w.samples[0] - 0.99997).abs() < 1e-5);
    }

    #[test]
    fn load_rejects_bad_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.wav");
        std::fs::write(&p, raw_wav(1, 16, 4000, &[0u8; 100])).unwrap();
        let e = load_wav(&p).unwrap_err();
        assert!(matches!(e, Error::Format { field: "data", .. }), "{e}");

        std::fs::write(&p, raw_wav(2, 16, 400, &[0u8; 400])).unwrap();
        assert!(matches!(load_wav(&p), Err(Error::Format { field: "channels", .. })));

        std::fs::write(&p, raw_wav(1, 8, 400, &[0u8; 400])).unwrap();
        assert!(matches!(load_wav(&p), Err(Error::Format { field: "bits_per_sample", .. })));

        std::fs::write(&p, b"RIFX0000").unwrap();
        assert!(matches!(load_wav(&p), Err(Error::Format { .. })));
    }

    #[test]
    fn wav_write_read_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.wav");
        let w = tone(440.0, 0.5, 0.1, 16000);
        write_wav(&p, &w).unwrap();
        let r = load_wav(&p).unwrap();
        assert_eq!(r.samples.len(), w.samples.len());
        assert!(r.samples.iter().zip(&w.samples).all(|(a, b)| (a - b).abs() < 1e-4));
    }

    #[test]
    fn silence_sits_on_the_floor() {
        let cfg = FrontendConfig::default();
        let s = log_mel(&Waveform::new(vec![0.0; 16000], 16000).unwrap(), &cfg).unwrap();
        assert_eq!(s.num_frames(), 97);
        assert!(s.frames.data().iter().all(|&v| v == cfg.floor.ln()));
        assert_eq!(s.frame_rate, 100.0);
    }

    #[test]
    fn tone_peaks_at_nearest_center() {
        let cfg = FrontendConfig::default();
        let s = log_mel(&tone(1000.0, 0.5, 1.0, 16000), &cfg).unwrap();
        // oracle: centers recomputed from the HTK formula directly
        let (lo, hi) = (0.0, 2595.0 * (1.0f64 + 8000.0 / 700.0).log10());
        let nearest = (0..64)
            .map(|m| {
                let mel = lo + (hi - lo) * (m + 1) as f64 / 65.0;
                (m, (700.0 * (10f64.powf(mel / 2595.0) - 1.0) - 1000.0).abs())
            })
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap()
            .0;
        for t in 0..s.num_frames() {
            let row = s.frames.row(t);
            let arg = (0..64).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            assert_eq!(arg, nearest, "frame {t}");
        }
    }

    #[test]
    fn doubling_amplitude_adds_ln4() {
        let cfg = FrontendConfig::default();
        let a = log_mel(&tone(700.0, 0.2, 0.5, 16000), &cfg).unwrap();
        let b = log_mel(&tone(700.0, 0.4, 0.5, 16000), &cfg).unwrap();
        let mut checked = 0;
        for (x, y) in a.frames.data().iter().zip(b.frames.data()) {
            if *x > cfg.floor.ln() + 16.0 {
                assert!((y - x - 4f64.ln()).abs() < 1e-6);
                checked += 1;
            }
        }
        assert!(checked > 100);
    }

    #[test]
    fn delay_by_hop_shifts_one_frame() {
        let cfg = FrontendConfig::default();
        let w = tone(523.0, 0.3, 0.5, 16000);
        let mut delayed = vec![0.0; cfg.hop];
        delayed.extend_from_slice(&w.samples);
        let a = log_mel(&w, &cfg).unwrap();
        let b = log_mel(&Waveform::new(delayed, 16000).unwrap(), &cfg).unwrap();
        for t in 0..a.num_frames() {
            for (x, y) in a.frames.row(t).iter().zip(b.frames.row(t + 1)) {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn config_violations() {
        let base = FrontendConfig::default();
        for cfg in [
            FrontendConfig { n_fft: 500, ..base.clone() },
            FrontendConfig { hop: 1024, ..base.clone() },
            FrontendConfig { fmax: 9000.0, ..base.clone() },
            FrontendConfig { floor: 0.0, ..base.clone() },
        ] {
            assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        }
    }

    fn spec(t: usize, m: usize) -> LogMelSpectrogram {
        let data = (0..t * m).map(|i| i as f64).collect();
        LogMelSpectrogram {
            frames: Tensor::matrix(t, m, data).unwrap(),
            frame_rate: 100.0,
            params: FrontendConfig::default(),
        }
    }

    #[test]
    fn patch_arithmetic() {
        let g = patchify(&spec(32, 16), 16).unwrap();
        assert_eq!((g.num_patches(), g.rows_time, g.rows_freq), (2, 2, 1));
        let g = patchify(&spec(33, 16), 16).unwrap();
        assert_eq!(g.num_patches(), 2);
        let g = patchify(&spec(97, 64), 16).unwrap();
        assert_eq!((g.rows_time, g.rows_freq), (6, 4));
        assert_eq!(g.time_rate(), 6.25);
    }

    #[test]
    fn unpatchify_restores_retained_region() {
        let s = spec(37, 21);
        let g = patchify(&s, 4).unwrap();
        let r = unpatchify(&g);
        assert_eq!(r.shape(), &[36, 20]);
        for t in 0..36 {
            assert_eq!(r.row(t), &s.frames.row(t)[..20]);
        }
    }

    #[test]
    fn resample_keeps_duration() {
        let w = tone(100.0, 0.5, 0.5, 8000);
        let r = resample_linear(&w, 16000);
        assert_eq!(r.samples.len(), 8000);
        assert_eq!(r.samples[0], w.samples[0]);
        assert_eq!(r.samples[2], w.samples[1]);
        assert!((r.samples[1] - 0.5 * (w.samples[0] + w.samples[1])).abs() < 1e-15);
    }
}
