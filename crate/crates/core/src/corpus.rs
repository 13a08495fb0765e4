//! Utterance manifests, balanced training subsets and batch assembly.

use crate::audio;
use crate::features::{FeatureConfig, FRAME_DIM};
use crate::phones::{self, PhoneError, RuleTable, UnifiedPhoneSequence};
use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("manifest `{path}` line {line}: {msg}")]
    Manifest { path: String, line: usize, msg: String },
    #[error("duplicate utterance id `{utt_id}`")]
    DuplicateId { utt_id: String },
    #[error("utterance `{utt_id}`: {source}")]
    Audio { utt_id: String, source: audio::AudioError },
    #[error("utterance `{utt_id}`: invalid phone sequence: {source}")]
    Phones { utt_id: String, source: PhoneError },
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("n_per_speaker must be >= 1")]
    BadSubsetSize,
    #[error("subset file `{path}`: {msg}")]
    SubsetFile { path: String, msg: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct UtteranceRecord {
    pub utt_id: String,
    pub audio_path: PathBuf,
    pub speaker: String,
    pub locale: String,
    #[serde(skip)]
    pub phones: UnifiedPhoneSequence,
}

/// One manifest line on disk; `phones` is the stress-prefixed string form.
#[derive(Serialize, Deserialize)]
struct ManifestLine {
    utt_id: String,
    audio_path: String,
    speaker: String,
    locale: String,
    phones: String,
}

#[derive(Clone, Debug, Default)]
pub struct Corpus {
    pub records: Vec<UtteranceRecord>,
    by_id: BTreeMap<String, usize>,
}

impl Corpus {
    pub fn from_records(records: Vec<UtteranceRecord>) -> Result<Self, CorpusError> {
        let mut by_id = BTreeMap::new();
        for (i, r) in records.iter().enumerate() {
            if by_id.insert(r.utt_id.clone(), i).is_some() {
                return Err(CorpusError::DuplicateId { utt_id: r.utt_id.clone() });
            }
        }
        Ok(Corpus { records, by_id })
    }

    pub fn get(&self, utt_id: &str) -> Option<&UtteranceRecord> {
        self.by_id.get(utt_id).map(|&i| &self.records[i])
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn speakers(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.records.iter().map(|r| r.speaker.as_str()).collect();
        set.into_iter().map(str::to_string).collect()
    }

    pub fn locales(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.records.iter().map(|r| r.locale.as_str()).collect();
        set.into_iter().map(str::to_string).collect()
    }
}

fn parse_manifest_lines(
    path: &Path,
    mut handle: impl FnMut(usize, ManifestLine) -> Result<(), CorpusError>,
) -> Result<(), CorpusError> {
    let file = std::fs::File::open(path)?;
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: ManifestLine =
            serde_json::from_str(&line).map_err(|e| CorpusError::Manifest {
                path: path.display().to_string(),
                line: lineno + 1,
                msg: e.to_string(),
            })?;
        handle(lineno + 1, parsed)?;
    }
    Ok(())
}

/// Load and fully validate a manifest: unique ids, audio present at 24 kHz,
/// phones valid against `rules`. Relative audio paths resolve against the
/// manifest's directory.
pub fn load_manifest(path: &Path, rules: &RuleTable) -> Result<Corpus, CorpusError> {
    let corpus = load_manifest_phones_only(path, rules)?;
    for r in &corpus.records {
        audio::check_wav_header(&r.audio_path)
            .map_err(|source| CorpusError::Audio { utt_id: r.utt_id.clone(), source })?;
    }
    Ok(corpus)
}

/// Manifest load that validates ids and phones but does not touch the audio
/// files (enough for analysis-only flows).
pub fn load_manifest_phones_only(path: &Path, rules: &RuleTable) -> Result<Corpus, CorpusError> {
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut records = Vec::new();
    parse_manifest_lines(path, |_line, m| {
        let phones = phones::parse_unified(&m.phones, rules)
            .map_err(|source| CorpusError::Phones { utt_id: m.utt_id.clone(), source })?;
        let audio_path = if Path::new(&m.audio_path).is_absolute() {
            PathBuf::from(&m.audio_path)
        } else {
            base.join(&m.audio_path)
        };
        records.push(UtteranceRecord {
            utt_id: m.utt_id,
            audio_path,
            speaker: m.speaker,
            locale: m.locale,
            phones,
        });
        Ok(())
    })?;
    Corpus::from_records(records)
}

/// Raw (pre-normalization) manifest entry: phones are locale-specific tokens.
pub struct RawUtterance {
    pub utt_id: String,
    pub audio_path: String,
    pub speaker: String,
    pub locale: String,
    pub raw_phones: String,
}

pub fn load_raw_manifest(path: &Path) -> Result<Vec<RawUtterance>, CorpusError> {
    let mut out = Vec::new();
    parse_manifest_lines(path, |_line, m| {
        out.push(RawUtterance {
            utt_id: m.utt_id,
            audio_path: m.audio_path,
            speaker: m.speaker,
            locale: m.locale,
            raw_phones: m.phones,
        });
        Ok(())
    })?;
    Ok(out)
}

pub fn write_manifest(path: &Path, records: &[UtteranceRecord]) -> Result<(), CorpusError> {
    let mut f = std::fs::File::create(path)?;
    for r in records {
        let line = ManifestLine {
            utt_id: r.utt_id.clone(),
            audio_path: r.audio_path.display().to_string(),
            speaker: r.speaker.clone(),
            locale: r.locale.clone(),
            phones: r.phones.to_string(),
        };
        writeln!(f, "{}", serde_json::to_string(&line).expect("manifest line"))?;
    }
    Ok(())
}

/// Reproducible per-speaker utterance selection.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingSubset {
    pub seed: u64,
    /// speaker -> sorted utterance ids
    pub per_speaker: BTreeMap<String, Vec<String>>,
}

impl TrainingSubset {
    pub fn all_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> =
            self.per_speaker.values().flatten().cloned().collect();
        ids.sort();
        ids
    }

    pub fn total_len(&self) -> usize {
        self.per_speaker.values().map(Vec::len).sum()
    }

    pub fn ids_for(&self, speaker: &str) -> Option<&[String]> {
        self.per_speaker.get(speaker).map(Vec::as_slice)
    }

    pub fn id_set(&self, speaker: &str) -> BTreeSet<String> {
        self.ids_for(speaker).into_iter().flatten().cloned().collect()
    }
}

/// Choose `min(n, available)` utterances per speaker uniformly at random,
/// deterministically in `seed`.
pub fn select_training_subset(
    corpus: &Corpus,
    n_per_speaker: usize,
    seed: u64,
) -> Result<TrainingSubset, CorpusError> {
    if corpus.is_empty() {
        return Err(CorpusError::EmptyCorpus);
    }
    if n_per_speaker == 0 {
        return Err(CorpusError::BadSubsetSize);
    }
    let mut by_speaker: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for r in &corpus.records {
        by_speaker.entry(r.speaker.clone()).or_default().push(r.utt_id.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut per_speaker = BTreeMap::new();
    for (speaker, mut ids) in by_speaker {
        ids.sort();
        let take = n_per_speaker.min(ids.len());
        let mut chosen: Vec<String> =
            ids.choose_multiple(&mut rng, take).cloned().collect();
        chosen.sort();
        per_speaker.insert(speaker, chosen);
    }
    Ok(TrainingSubset { seed, per_speaker })
}

/// Subset persistence: a `# seed: N` header followed by sorted ids.
pub fn write_subset(path: &Path, subset: &TrainingSubset) -> Result<(), CorpusError> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "# seed: {}", subset.seed)?;
    for id in subset.all_ids() {
        writeln!(f, "{id}")?;
    }
    Ok(())
}

/// Read a persisted subset back; speakers are recovered from the corpus.
pub fn read_subset(path: &Path, corpus: &Corpus) -> Result<TrainingSubset, CorpusError> {
    let text = std::fs::read_to_string(path)?;
    let err = |msg: String| CorpusError::SubsetFile { path: path.display().to_string(), msg };
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| err("empty file".into()))?;
    let seed: u64 = header
        .strip_prefix("# seed:")
        .map(str::trim)
        .ok_or_else(|| err("missing `# seed:` header".into()))?
        .parse()
        .map_err(|e| err(format!("bad seed: {e}")))?;
    let mut per_speaker: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for line in lines {
        let id = line.trim();
        if id.is_empty() {
            continue;
        }
        let rec = corpus
            .get(id)
            .ok_or_else(|| err(format!("utterance `{id}` not in corpus")))?;
        per_speaker.entry(rec.speaker.clone()).or_default().push(id.to_string());
    }
    for ids in per_speaker.values_mut() {
        ids.sort();
    }
    Ok(TrainingSubset { seed, per_speaker })
}

/// Deterministic shuffled batch order for one pass over `ids`.
pub fn batch_order(ids: &[String], batch_size: usize, seed: u64) -> Vec<Vec<String>> {
    let mut order: Vec<String> = ids.to_vec();
    order.sort();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    order.chunks(batch_size.max(1)).map(<[String]>::to_vec).collect()
}

/// Frames padded to a common even length with the decoder's 2-frame grouping
/// in mind.
pub struct PaddedBatch {
    /// `[batch, frames, 81]`
    pub frames: Array3<f32>,
    /// `[batch, frames]`, 1 where the frame is real (incl. the even-pad frame)
    pub mask: Array2<f32>,
    pub lens: Vec<usize>,
}

impl PaddedBatch {
    pub fn decoder_steps(&self) -> usize {
        self.frames.shape()[1] / 2
    }
}

/// Pad a group of frame sequences: odd-length utterances first get one silent
/// endpoint frame so every utterance covers whole decoder steps, then all are
/// right-padded with masked silence to the batch maximum.
pub fn pad_batch(seqs: &[Array2<f32>], cfg: &FeatureConfig) -> PaddedBatch {
    let floor = cfg.log_floor_value();
    let lens: Vec<usize> = seqs.iter().map(|s| s.nrows() + s.nrows() % 2).collect();
    let t_max = lens.iter().copied().max().unwrap_or(0);
    let b = seqs.len();
    let mut frames = Array3::<f32>::zeros((b, t_max, FRAME_DIM));
    let mut mask = Array2::<f32>::zeros((b, t_max));
    for (i, seq) in seqs.iter().enumerate() {
        for t in 0..t_max {
            if t < seq.nrows() {
                for d in 0..FRAME_DIM {
                    frames[[i, t, d]] = seq[[t, d]];
                }
                mask[[i, t]] = 1.0;
            } else {
                for d in 0..cfg.n_mels {
                    frames[[i, t, d]] = floor;
                }
                if t < lens[i] {
                    // grouping pad: real silent frame that keeps the endpoint high
                    frames[[i, t, cfg.n_mels]] = 1.0;
                    mask[[i, t]] = 1.0;
                }
            }
        }
    }
    PaddedBatch { frames, mask, lens }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phones::RuleTable;

    fn write_tone(path: &Path, seconds: f32) {
        let n = (24_000.0 * seconds) as usize;
        let samples: Vec<f32> = (0..n)
            .map(|i| (2.0 * std::f32::consts::PI * 440.0 * i as f32 / 24_000.0).sin() * 0.3)
            .collect();
        audio::write_wav(path, &samples).unwrap();
    }

    fn toy_manifest(dir: &Path, n: usize) -> PathBuf {
        let manifest = dir.join("manifest.jsonl");
        let mut lines = Vec::new();
        for i in 0..n {
            let wav = dir.join(format!("utt_{i:03}.wav"));
            write_tone(&wav, 0.2);
            let speaker = if i % 2 == 0 { "spk_a" } else { "spk_b" };
            let locale = if i % 2 == 0 { "en-US" } else { "es-MX" };
            lines.push(format!(
                r#"{{"utt_id":"utt_{i:03}","audio_path":"utt_{i:03}.wav","speaker":"{speaker}","locale":"{locale}","phones":"\"a t ."}}"#
            ));
        }
        std::fs::write(&manifest, lines.join("\n")).unwrap();
        manifest
    }

    #[test]
    fn manifest_loads_and_validates() {
        let dir = tempfile::tempdir().unwrap();
        let path = toy_manifest(dir.path(), 4);
        let corpus = load_manifest(&path, &RuleTable::default_table()).unwrap();
        assert_eq!(corpus.len(), 4);
        assert_eq!(corpus.speakers(), vec!["spk_a", "spk_b"]);
        assert_eq!(corpus.locales(), vec!["en-US", "es-MX"]);
    }

    #[test]
    fn duplicate_id_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = toy_manifest(dir.path(), 2);
        let mut text = std::fs::read_to_string(&path).unwrap();
        let dup = text.lines().next().unwrap().to_string();
        text.push('\n');
        text.push_str(&dup);
        std::fs::write(&path, text).unwrap();
        assert!(matches!(
            load_manifest(&path, &RuleTable::default_table()),
            Err(CorpusError::DuplicateId { .. })
        ));
    }

    #[test]
    fn wrong_rate_audio_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = toy_manifest(dir.path(), 1);
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 16_000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(dir.path().join("utt_000.wav"), spec).unwrap();
        w.write_sample(0i16).unwrap();
        w.finalize().unwrap();
        assert!(matches!(
            load_manifest(&path, &RuleTable::default_table()),
            Err(CorpusError::Audio { .. })
        ));
    }

    #[test]
    fn invalid_phones_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        write_tone(&dir.path().join("a.wav"), 0.1);
        std::fs::write(
            &path,
            r#"{"utt_id":"a","audio_path":"a.wav","speaker":"s","locale":"en-US","phones":"aI t"}"#,
        )
        .unwrap();
        assert!(matches!(
            load_manifest(&path, &RuleTable::default_table()),
            Err(CorpusError::Phones { .. })
        ));
    }

    #[test]
    fn subset_is_deterministic_and_clamped() {
        let dir = tempfile::tempdir().unwrap();
        let path = toy_manifest(dir.path(), 10);
        let corpus = load_manifest_phones_only(&path, &RuleTable::default_table()).unwrap();
        let a = select_training_subset(&corpus, 3, 7).unwrap();
        let b = select_training_subset(&corpus, 3, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.per_speaker["spk_a"].len(), 3);

        let all = select_training_subset(&corpus, 99, 7).unwrap();
        assert_eq!(all.per_speaker["spk_a"].len(), 5);
        assert_eq!(all.total_len(), 10);

        let other_seed = select_training_subset(&corpus, 3, 8).unwrap();
        assert!(a != other_seed || a.per_speaker == other_seed.per_speaker);
    }

    #[test]
    fn subset_round_trips_through_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = toy_manifest(dir.path(), 6);
        let corpus = load_manifest_phones_only(&path, &RuleTable::default_table()).unwrap();
        let subset = select_training_subset(&corpus, 2, 11).unwrap();
        let sfile = dir.path().join("subset.txt");
        write_subset(&sfile, &subset).unwrap();
        let back = read_subset(&sfile, &corpus).unwrap();
        assert_eq!(subset, back);
    }

    #[test]
    fn batch_order_shapes_and_determinism() {
        let ids: Vec<String> = (0..33).map(|i| format!("u{i:02}")).collect();
        let a = batch_order(&ids, 16, 3);
        let b = batch_order(&ids, 16, 3);
        assert_eq!(a, b);
        let sizes: Vec<usize> = a.iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![16, 16, 1]);
        let c = batch_order(&ids, 16, 4);
        assert_ne!(a, c);
    }

    #[test]
    fn odd_length_utterance_gets_grouping_pad() {
        let cfg = FeatureConfig::default();
        let mut seq = Array2::<f32>::zeros((101, FRAME_DIM));
        seq[[100, 80]] = 1.0;
        let batch = pad_batch(&[seq], &cfg);
        assert_eq!(batch.frames.shape(), &[1, 102, FRAME_DIM]);
        assert_eq!(batch.decoder_steps(), 51);
        assert_eq!(batch.mask[[0, 101]], 1.0);
        assert_eq!(batch.frames[[0, 101, 80]], 1.0);
        assert_eq!(batch.frames[[0, 101, 0]], cfg.log_floor_value());
    }

    #[test]
    fn batch_padding_masks_short_sequences_without_touching_real_frames() {
        let cfg = FeatureConfig::default();
        let mut a = Array2::<f32>::zeros((4, FRAME_DIM));
        a[[3, 80]] = 1.0;
        a[[1, 0]] = 2.5;
        let mut b = Array2::<f32>::zeros((8, FRAME_DIM));
        b[[7, 80]] = 1.0;
        let batch = pad_batch(&[a, b], &cfg);
        assert_eq!(batch.frames.shape(), &[2, 8, FRAME_DIM]);
        assert_eq!(batch.frames[[0, 1, 0]], 2.5);
        assert_eq!(batch.mask[[0, 3]], 1.0);
        assert_eq!(batch.mask[[0, 4]], 0.0);
        assert_eq!(batch.mask[[1, 7]], 1.0);
    }
}
