//! Per-speaker Gaussian models over ingested d-vectors.
//!
//! The raw per-utterance embedding leaks utterance acoustics, so training
//! samples from a per-speaker Gaussian instead of using the raw vector, and
//! inference collapses to the Gaussian mean.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;
use thiserror::Error;

pub const DVECTOR_DIM: usize = 128;
/// Variance floor keeping degenerate Gaussians sampleable.
pub const VAR_FLOOR: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum SpeakerError {
    #[error("no embeddings supplied")]
    EmptyInput,
    #[error("embedding dimension {found} != {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("embedding file `{path}` row {row}: {msg}")]
    File { path: String, row: usize, msg: String },
    #[error("unknown speaker `{0}`")]
    UnknownSpeaker(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SpeakerGaussian {
    pub speaker: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Sample mean and per-dimension sample variance (ddof = 1), floored.
pub fn fit_speaker_gaussian(
    speaker: &str,
    embeddings: &[Vec<f64>],
) -> Result<SpeakerGaussian, SpeakerError> {
    if embeddings.is_empty() {
        return Err(SpeakerError::EmptyInput);
    }
    for e in embeddings {
        if e.len() != DVECTOR_DIM {
            return Err(SpeakerError::DimensionMismatch {
                expected: DVECTOR_DIM,
                found: e.len(),
            });
        }
    }
    let n = embeddings.len();
    let mut mean = vec![0.0f64; DVECTOR_DIM];
    for e in embeddings {
        for (m, &x) in mean.iter_mut().zip(e) {
            *m += x;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut var = vec![VAR_FLOOR; DVECTOR_DIM];
    if n > 1 {
        for (d, v) in var.iter_mut().enumerate() {
            let ss: f64 = embeddings.iter().map(|e| (e[d] - mean[d]).powi(2)).sum();
            *v = (ss / (n - 1) as f64).max(VAR_FLOOR);
        }
    }
    Ok(SpeakerGaussian { speaker: speaker.to_string(), mean, var })
}

/// Fresh draw from `N(mean, diag(var))`; used once per utterance in training.
pub fn draw_training_embedding<R: Rng>(g: &SpeakerGaussian, rng: &mut R) -> Vec<f64> {
    g.mean
        .iter()
        .zip(&g.var)
        .map(|(&m, &v)| {
            let eps: f64 = rng.sample(StandardNormal);
            m + v.sqrt() * eps
        })
        .collect()
}

/// Inference embedding: exactly the fitted mean.
pub fn inference_embedding(g: &SpeakerGaussian) -> Vec<f64> {
    g.mean.clone()
}

/// All fitted speakers of one training run.
#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct SpeakerSpace {
    pub gaussians: BTreeMap<String, SpeakerGaussian>,
}

impl SpeakerSpace {
    pub fn get(&self, speaker: &str) -> Result<&SpeakerGaussian, SpeakerError> {
        self.gaussians
            .get(speaker)
            .ok_or_else(|| SpeakerError::UnknownSpeaker(speaker.to_string()))
    }

    pub fn speakers(&self) -> Vec<String> {
        self.gaussians.keys().cloned().collect()
    }

    /// Fit one Gaussian per speaker from per-utterance embeddings, using
    /// `utt_speaker` to resolve each row's owner.
    pub fn fit(
        embeddings: &BTreeMap<String, Vec<f64>>,
        utt_speaker: &BTreeMap<String, String>,
    ) -> Result<Self, SpeakerError> {
        let mut grouped: BTreeMap<String, Vec<Vec<f64>>> = BTreeMap::new();
        for (utt_id, emb) in embeddings {
            if let Some(speaker) = utt_speaker.get(utt_id) {
                grouped.entry(speaker.clone()).or_default().push(emb.clone());
            }
        }
        let mut gaussians = BTreeMap::new();
        for (speaker, embs) in grouped {
            gaussians.insert(speaker.clone(), fit_speaker_gaussian(&speaker, &embs)?);
        }
        Ok(SpeakerSpace { gaussians })
    }
}

/// Read a d-vector CSV: one row per utterance, `utt_id` followed by 128 reals.
pub fn read_embedding_csv(path: &Path) -> Result<BTreeMap<String, Vec<f64>>, SpeakerError> {
    let text = std::fs::read_to_string(path)?;
    let mut out = BTreeMap::new();
    for (row, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let utt_id = fields
            .next()
            .ok_or_else(|| SpeakerError::File {
                path: path.display().to_string(),
                row: row + 1,
                msg: "empty row".into(),
            })?
            .trim()
            .to_string();
        let values: Result<Vec<f64>, _> =
            fields.map(|f| f.trim().parse::<f64>()).collect();
        let values = values.map_err(|e| SpeakerError::File {
            path: path.display().to_string(),
            row: row + 1,
            msg: e.to_string(),
        })?;
        if values.len() != DVECTOR_DIM {
            return Err(SpeakerError::File {
                path: path.display().to_string(),
                row: row + 1,
                msg: format!("expected {DVECTOR_DIM} values, found {}", values.len()),
            });
        }
        out.insert(utt_id, values);
    }
    Ok(out)
}

pub fn write_embedding_csv(
    path: &Path,
    embeddings: &BTreeMap<String, Vec<f64>>,
) -> Result<(), SpeakerError> {
    use std::io::Write;
    let mut f = std::fs::File::create(path)?;
    for (utt_id, values) in embeddings {
        let row: Vec<String> = values.iter().map(|v| format!("{v}")).collect();
        writeln!(f, "{utt_id},{}", row.join(","))?;
    }
    Ok(())
}

/// Synthetic d-vectors for corpora without a speaker-verification front end:
/// a unit-norm per-speaker direction plus small per-utterance jitter.
pub fn synthetic_dvectors<R: Rng>(
    utt_speaker: &BTreeMap<String, String>,
    jitter: f64,
    rng: &mut R,
) -> BTreeMap<String, Vec<f64>> {
    let mut speaker_base: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let speakers: std::collections::BTreeSet<&String> = utt_speaker.values().collect();
    for speaker in speakers {
        let mut v: Vec<f64> =
            (0..DVECTOR_DIM).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        for x in &mut v {
            *x /= norm;
        }
        speaker_base.insert(speaker.clone(), v);
    }
    let mut out = BTreeMap::new();
    for (utt_id, speaker) in utt_speaker {
        let base = &speaker_base[speaker];
        let v: Vec<f64> = base
            .iter()
            .map(|&b| b + jitter * rng.sample::<f64, _>(StandardNormal))
            .collect();
        out.insert(utt_id.clone(), v);
    }
    out
}
