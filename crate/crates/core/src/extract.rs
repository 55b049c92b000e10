//! Clip-level embedding extraction from checkpoints and from the log-mel stand-in.

use std::path::{Path, PathBuf};

use crate::dsp::{frontend, load_wav, patchify, FrontendConfig};
use crate::encoder::{encode, EmbeddingSequence, EncoderWeights};
use crate::error::{Error, Result};
use crate::par;
use crate::pretrain::crop_to_positions;
use crate::tensor::Tensor;

/// Where clip embeddings come from.
#[derive(Clone, Debug)]
pub enum EmbeddingSource {
    Encoder { weights: EncoderWeights, frontend: FrontendConfig, source_id: String },
    /// Log-mel frames averaged over non-overlapping windows of `pool` frames.
    MelPool { frontend: FrontendConfig, pool: usize, source_id: String },
}

impl EmbeddingSource {
    pub fn source_id(&self) -> &str {
        match self {
            EmbeddingSource::Encoder { source_id, .. } | EmbeddingSource::MelPool { source_id, .. } => source_id,
        }
    }

    pub fn embed(&self, path: &Path) -> Result<EmbeddingSequence> {
        let w = load_wav(path)?;
        match self {
            EmbeddingSource::Encoder { weights, frontend: fe, source_id } => {
                let grid = patchify(&frontend(&w, fe)?, weights.config.patch_size)?;
                let grid = crop_to_positions(grid, weights.config.max_positions)?;
                let (mut seq, _) = encode(weights, &grid, &[])?;
                seq.source_id = source_id.clone();
                Ok(seq)
            }
            EmbeddingSource::MelPool { frontend: fe, pool, source_id } => {
                if *pool == 0 {
                    return Err(Error::Config("mel pool width must be at least 1".into()));
                }
                let s = frontend(&w, fe)?;
                let (t, m) = (s.num_frames(), s.num_mels());
                let n = t / pool;
                if n == 0 {
                    return Err(Error::ClipTooShort { required: *pool, available: t });
                }
                let mut out = vec![0.0; n * m];
                for r in 0..n * pool {
                    let row = s.frames.row(r);
                    out[(r / pool) * m..(r / pool + 1) * m].iter_mut().zip(row).for_each(|(a, b)| *a += b);
                }
                out.iter_mut().for_each(|v| *v /= *pool as f64);
                EmbeddingSequence::new(Tensor::matrix(n, m, out)?, s.frame_rate / *pool as f64, source_id.clone())
            }
        }
    }
}

/// Embeds clips in parallel, results in input order.
pub fn embed_clips(source: &EmbeddingSource, paths: &[PathBuf]) -> Vec<Result<EmbeddingSequence>> {
    par::map(paths, |p| {
        source.embed(p).map_err(|e| match e {
            Error::Io { .. } => e,
            other => Error::Data(format!("{}: {other}", p.display())),
        })
    })
}
