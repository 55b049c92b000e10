//! Length alignment and feature-axis combination of embedding sequences
//! from different encoders, plus the OEMB embedding file.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container;
use crate::encoder::EmbeddingSequence;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const EMBEDDING_MAGIC: &[u8; 4] = b"OEMB";
pub const EMBEDDING_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UpsampleMode {
    /// Output `j` copies source `floor(j·N/N′)`.
    #[default]
    Nearest,
    /// Interpolates between the two source vectors around each output center.
    Linear,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CombinerMode {
    Concatenate,
    Average,
}

impl CombinerMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "concat" | "concatenate" => Ok(CombinerMode::Concatenate),
            "average" | "avg" => Ok(CombinerMode::Average),
            other => Err(Error::Config(format!("unknown combine mode {other:?}; expected concat or average"))),
        }
    }
}

/// Source index feeding output `j` under nearest-repeat.
pub fn nearest_index(j: usize, n: usize, target: usize) -> usize {
    ((j as u128 * n as u128) / target as u128) as usize
}

pub fn upsample(seq: &EmbeddingSequence, target: usize, mode: UpsampleMode) -> Result<EmbeddingSequence> {
    let (n, h) = (seq.len(), seq.dim());
    if target < n {
        return Err(Error::DownsampleNotSupported { from: n, to: target });
    }
    if target == n {
        return Ok(seq.clone());
    }
    let src = seq.vectors.data();
    let mut out = Vec::with_capacity(target * h);
    for j in 0..target {
        match mode {
            UpsampleMode::Nearest => {
                let i = nearest_index(j, n, target);
                out.extend_from_slice(&src[i * h..(i + 1) * h]);
            }
            UpsampleMode::Linear => {
                let x = ((j as f64 + 0.5) * n as f64 / target as f64 - 0.5).clamp(0.0, (n - 1) as f64);
                let lo = x.floor() as usize;
                let hi = (lo + 1).min(n - 1);
                let w = x - lo as f64;
                out.extend((0..h).map(|c| src[lo * h + c] * (1.0 - w) + src[hi * h + c] * w));
            }
        }
    }
    EmbeddingSequence::new(
        Tensor::matrix(target, h, out)?,
        seq.frame_rate * target as f64 / n as f64,
        seq.source_id.clone(),
    )
}

/// Sequences of equal length in source order, with each member's
/// `(offset, width)` on the concatenated feature axis.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignedStack {
    pub sequences: Vec<EmbeddingSequence>,
    pub offsets: Vec<(usize, usize)>,
}

impl AlignedStack {
    pub fn len(&self) -> usize {
        self.sequences[0].len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn total_dim(&self) -> usize {
        self.offsets.last().map_or(0, |(o, w)| o + w)
    }
}

/// Upsamples every sequence to the longest length among them.
pub fn align(seqs: &[EmbeddingSequence], mode: UpsampleMode) -> Result<AlignedStack> {
    let target = seqs
        .iter()
        .map(EmbeddingSequence::len)
        .max()
        .ok_or_else(|| Error::EmptyInput("nothing to align".into()))?;
    let sequences: Vec<EmbeddingSequence> = seqs.iter().map(|s| upsample(s, target, mode)).collect::<Result<_>>()?;
    let mut offsets = Vec::with_capacity(sequences.len());
    let mut at = 0;
    for s in &sequences {
        offsets.push((at, s.dim()));
        at += s.dim();
    }
    Ok(AlignedStack { sequences, offsets })
}

/// Per-dimension zero mean, unit variance over positions; constant
/// dimensions are only centered.
pub fn standardize(seq: &EmbeddingSequence) -> Result<EmbeddingSequence> {
    let (n, h) = (seq.len(), seq.dim());
    let x = seq.vectors.data();
    let mut out = x.to_vec();
    for c in 0..h {
        let mean = (0..n).map(|r| x[r * h + c]).sum::<f64>() / n as f64;
        let var = (0..n).map(|r| (x[r * h + c] - mean).powi(2)).sum::<f64>() / n as f64;
        let scale = if var > 0.0 { 1.0 / var.sqrt() } else { 1.0 };
        for r in 0..n {
            out[r * h + c] = (x[r * h + c] - mean) * scale;
        }
    }
    EmbeddingSequence::new(Tensor::matrix(n, h, out)?, seq.frame_rate, seq.source_id.clone())
}

fn composite_id(mode: CombinerMode, stack: &AlignedStack) -> String {
    let ids: Vec<&str> = stack.sequences.iter().map(|s| s.source_id.as_str()).collect();
    let tag = match mode {
        CombinerMode::Concatenate => "concat",
        CombinerMode::Average => "average",
    };
    format!("{tag}({})", ids.join("+"))
}

pub fn combine(stack: &AlignedStack, mode: CombinerMode) -> Result<EmbeddingSequence> {
    let first = stack
        .sequences
        .first()
        .ok_or_else(|| Error::EmptyInput("empty stack".into()))?;
    let n = first.len();
    if let Some(s) = stack.sequences.iter().find(|s| s.len() != n) {
        return Err(Error::Dimension(format!(
            "stack member {} has N={}, expected {n}",
            s.source_id,
            s.len()
        )));
    }
    let vectors = match mode {
        CombinerMode::Concatenate => {
            let total = stack.total_dim();
            let mut out = vec![0.0; n * total];
            for (s, &(off, w)) in stack.sequences.iter().zip(&stack.offsets) {
                let src = s.vectors.data();
                for r in 0..n {
                    out[r * total + off..r * total + off + w].copy_from_slice(&src[r * w..(r + 1) * w]);
                }
            }
            Tensor::matrix(n, total, out)?
        }
        CombinerMode::Average => {
            let h = first.dim();
            if let Some(s) = stack.sequences.iter().find(|s| s.dim() != h) {
                return Err(Error::Dimension(format!(
                    "average needs equal widths: {} has h={}, {} has h={h}",
                    s.source_id,
                    s.dim(),
                    first.source_id
                )));
            }
            let mut out = vec![0.0; n * h];
            for s in &stack.sequences {
                out.iter_mut().zip(s.vectors.data()).for_each(|(a, b)| *a += b);
            }
            let k = stack.sequences.len() as f64;
            out.iter_mut().for_each(|v| *v /= k);
            Tensor::matrix(n, h, out)?
        }
    };
    EmbeddingSequence::new(vectors, first.frame_rate, composite_id(mode, stack))
}

/// Columns `offset..offset + width` of a combined sequence.
pub fn slice_source(seq: &EmbeddingSequence, offset: usize, width: usize) -> Result<Tensor> {
    let (n, h) = (seq.len(), seq.dim());
    if width == 0 || offset + width > h {
        return Err(Error::Index(format!("slice {offset}+{width} outside width {h}")));
    }
    let data = seq.vectors.data();
    let out = (0..n).flat_map(|r| data[r * h + offset..r * h + offset + width].iter().copied()).collect();
    Tensor::matrix(n, width, out)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleOptions {
    pub upsample: UpsampleMode,
    /// Standardize each source before combining.
    pub standardize: bool,
}

/// align → optional standardization → combine.
pub fn ensemble(seqs: &[EmbeddingSequence], mode: CombinerMode, opts: &EnsembleOptions) -> Result<EmbeddingSequence> {
    let mut stack = align(seqs, opts.upsample)?;
    if opts.standardize {
        stack.sequences = stack.sequences.iter().map(standardize).collect::<Result<_>>()?;
    }
    combine(&stack, mode)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EmbeddingHeader {
    source_id: String,
    #[serde(rename = "N")]
    n: usize,
    h: usize,
    frame_rate: f64,
}

pub fn encode_embedding(seq: &EmbeddingSequence) -> Result<Vec<u8>> {
    let header = EmbeddingHeader {
        source_id: seq.source_id.clone(),
        n: seq.len(),
        h: seq.dim(),
        frame_rate: seq.frame_rate,
    };
    let payload: Vec<f32> = seq.vectors.data().iter().map(|&v| v as f32).collect();
    Ok(container::encode(EMBEDDING_MAGIC, EMBEDDING_VERSION, &serde_json::to_vec(&header)?, &payload))
}

pub fn decode_embedding(bytes: &[u8]) -> Result<EmbeddingSequence> {
    let (h, payload) = container::decode(bytes, EMBEDDING_MAGIC, EMBEDDING_VERSION, "embedding file")?;
    let header: EmbeddingHeader =
        serde_json::from_slice(h).map_err(|e| Error::Corrupt(format!("embedding header: {e}")))?;
    if header.n * header.h != payload.len() {
        return Err(Error::Corrupt(format!(
            "embedding header says {}×{} but payload holds {} values",
            header.n,
            header.h,
            payload.len()
        )));
    }
    let data = payload.into_iter().map(f64::from).collect();
    let t = Tensor::matrix(header.n, header.h, data).map_err(|e| Error::Corrupt(e.to_string()))?;
    EmbeddingSequence::new(t, header.frame_rate, header.source_id)
}

pub fn save_embedding(seq: &EmbeddingSequence, path: &Path) -> Result<()> {
    container::write_file(path, &encode_embedding(seq)?)
}

pub fn load_embedding(path: &Path) -> Result<EmbeddingSequence> {
    decode_embedding(&container::read_file(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq_of(n: usize, h: usize, id: &str) -> EmbeddingSequence {
        let data = (0..n * h).map(|i| (i / h) as f64 * 10.0 + (i % h) as f64).collect();
        EmbeddingSequence::new(Tensor::matrix(n, h, data).unwrap(), n as f64, id).unwrap()
    }

    fn rows_of(seq: &EmbeddingSequence) -> Vec<usize> {
        (0..seq.len()).map(|r| (seq.vectors.at(r, 0) / 10.0) as usize).collect()
    }

    #[test]
    fn upsample_examples() {
        let s = seq_of(4, 2, "a");
        let u = upsample(&s, 8, UpsampleMode::Nearest).unwrap();
        assert_eq!(rows_of(&u), vec![0, 0, 1, 1, 2, 2, 3, 3]);
        assert_eq!(u.frame_rate, 8.0);
        let u = upsample(&seq_of(3, 1, "b"), 7, UpsampleMode::Nearest).unwrap();
        assert_eq!(rows_of(&u), vec![0, 0, 0, 1, 1, 2, 2]);
        assert_eq!(upsample(&s, 4, UpsampleMode::Nearest).unwrap(), s);
        assert!(matches!(
            upsample(&s, 3, UpsampleMode::Nearest),
            Err(Error::DownsampleNotSupported { from: 4, to: 3 })
        ));
    }

    #[test]
    fn linear_mode() {
        let s = EmbeddingSequence::new(Tensor::matrix(2, 1, vec![0.0, 1.0]).unwrap(), 1.0, "a").unwrap();
        let u = upsample(&s, 4, UpsampleMode::Linear).unwrap();
        assert_eq!(u.vectors.data(), &[0.0, 0.25, 0.75, 1.0]);
        let one = EmbeddingSequence::new(Tensor::matrix(1, 1, vec![3.0]).unwrap(), 1.0, "a").unwrap();
        assert_eq!(upsample(&one, 3, UpsampleMode::Linear).unwrap().vectors.data(), &[3.0; 3]);
    }

    #[test]
    fn align_examples() {
        let st = align(&[seq_of(10, 2, "a"), seq_of(20, 3, "b"), seq_of(20, 1, "c")], UpsampleMode::Nearest).unwrap();
        assert!(st.sequences.iter().all(|s| s.len() == 20));
        assert_eq!(st.offsets, vec![(0, 2), (2, 3), (5, 1)]);
        let one = seq_of(5, 2, "x");
        assert_eq!(align(&[one.clone()], UpsampleMode::Nearest).unwrap().sequences, vec![one]);
        assert!(matches!(align(&[], UpsampleMode::Nearest), Err(Error::EmptyInput(_))));
        let st = align(&[seq_of(3, 1, "a"), seq_of(7, 1, "b")], UpsampleMode::Nearest).unwrap();
        assert_eq!(st.sequences[0], upsample(&seq_of(3, 1, "a"), 7, UpsampleMode::Nearest).unwrap());
        let again = align(&st.sequences, UpsampleMode::Nearest).unwrap();
        assert_eq!(again, st);
    }

    #[test]
    fn combine_examples() {
        let st = align(&[seq_of(4, 2, "a"), seq_of(4, 3, "b"), seq_of(2, 4, "c")], UpsampleMode::Nearest).unwrap();
        let c = combine(&st, CombinerMode::Concatenate).unwrap();
        assert_eq!(c.dim(), 9);
        assert_eq!(c.source_id, "concat(a+b+c)");
        for (s, &(o, w)) in st.sequences.iter().zip(&st.offsets) {
            assert_eq!(&slice_source(&c, o, w).unwrap(), &s.vectors);
        }
        assert!(matches!(combine(&st, CombinerMode::Average), Err(Error::Dimension(_))));

        let a = seq_of(3, 4, "a");
        let st = align(&[a.clone(), a.clone(), a.clone()], UpsampleMode::Nearest).unwrap();
        assert_eq!(combine(&st, CombinerMode::Average).unwrap().vectors, a.vectors);
    }

    #[test]
    fn average_matches_elementwise_mean() {
        let x = Tensor::matrix(3, 4, (0..12).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let y = Tensor::matrix(3, 4, (0..12).map(|i| (i as f64 * 1.3).cos()).collect()).unwrap();
        let a = EmbeddingSequence::new(x.clone(), 1.0, "a").unwrap();
        let b = EmbeddingSequence::new(y.clone(), 1.0, "b").unwrap();
        let ab = combine(&align(&[a.clone(), b.clone()], UpsampleMode::Nearest).unwrap(), CombinerMode::Average).unwrap();
        let ba = combine(&align(&[b, a], UpsampleMode::Nearest).unwrap(), CombinerMode::Average).unwrap();
        for i in 0..12 {
            assert_eq!(ab.vectors.data()[i], (x.data()[i] + y.data()[i]) / 2.0);
        }
        assert_eq!(ab.vectors, ba.vectors);
    }

    #[test]
    fn standardized_sources() {
        let s = standardize(&seq_of(5, 2, "a")).unwrap();
        for c in 0..2 {
            let col: Vec<f64> = (0..5).map(|r| s.vectors.at(r, c)).collect();
            assert!(col.iter().sum::<f64>().abs() < 1e-12);
            assert!((col.iter().map(|v| v * v).sum::<f64>() / 5.0 - 1.0).abs() < 1e-12);
        }
        let flat = EmbeddingSequence::new(Tensor::full(&[3, 1], 2.0), 1.0, "f").unwrap();
        assert_eq!(standardize(&flat).unwrap().vectors.data(), &[0.0; 3]);
        let opts = EnsembleOptions { standardize: true, ..Default::default() };
        let e = ensemble(&[seq_of(2, 1, "a"), seq_of(4, 1, "b")], CombinerMode::Concatenate, &opts).unwrap();
        assert_eq!((e.len(), e.dim()), (4, 2));
    }

    #[test]
    fn embedding_file_round_trip() {
        let s = EmbeddingSequence::new(Tensor::matrix(2, 2, vec![0.5, -1.0, 2.25, 8.0]).unwrap(), 6.25, "beats").unwrap();
        let bytes = encode_embedding(&s).unwrap();
        let back = decode_embedding(&bytes).unwrap();
        assert_eq!(back, s);
        assert_eq!(encode_embedding(&back).unwrap(), bytes);
        let mut bad = bytes.clone();
        bad[bytes.len() - 40] ^= 1;
        assert!(matches!(decode_embedding(&bad), Err(Error::Corrupt(_))));
        assert!(matches!(crate::pretrain::decode_checkpoint(&bytes), Err(Error::Incompatible(_))));
    }
}
