//! Self-contained synthetic corpus generator.
//!
//! Produces deterministic multi-tone audio where every phone has its own
//! spectral signature (a fixed chord of partials derived from the symbol) and
//! every speaker applies a fixed pitch factor. The phone-to-spectrum mapping
//! is therefore learnable by the acoustic model, which is all the desk-scale
//! experiments need.

use crate::audio;
use crate::corpus::{load_manifest, Corpus, CorpusError, UtteranceRecord};
use crate::phones::{PhoneKind, RuleTable, UnifiedPhoneSequence, DEFAULT_RULES_TSV};
use crate::speaker::{synthetic_dvectors, write_embedding_csv, SpeakerError};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ToyError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Audio(#[from] audio::AudioError),
    #[error(transparent)]
    Speaker(#[from] SpeakerError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug)]
pub struct ToyCorpusConfig {
    pub utterances: usize,
    pub seed: u64,
    pub min_phones: usize,
    pub max_phones: usize,
    /// Per-utterance d-vector jitter around each speaker's direction.
    pub dvector_jitter: f64,
}

impl Default for ToyCorpusConfig {
    fn default() -> Self {
        ToyCorpusConfig {
            utterances: 40,
            seed: 7,
            min_phones: 6,
            max_phones: 10,
            dvector_jitter: 0.05,
        }
    }
}

pub struct ToyCorpus {
    pub manifest_path: PathBuf,
    pub embeddings_path: PathBuf,
    pub rules_path: PathBuf,
    pub corpus: Corpus,
}

const LOCALES: [&str; 2] = ["en-US", "es-MX"];
const SPEAKERS_PER_LOCALE: usize = 2;
const VOWELS: [&str; 6] = ["a", "e", "i", "o", "u", "@"];
const CONSONANTS: [&str; 10] = ["p", "t", "k", "b", "d", "m", "n", "s", "S", "l"];
const SAMPLE_RATE: f64 = 24_000.0;

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Three partials in 200..6000 Hz, fixed per symbol.
fn phone_partials(symbol: &str) -> [f64; 3] {
    let h = fnv1a(symbol);
    let mut out = [0.0; 3];
    for (i, slot) in out.iter_mut().enumerate() {
        let frac = ((h >> (i * 16)) & 0xffff) as f64 / 65535.0;
        *slot = 200.0 * (30.0f64).powf(frac); // log-spaced in [200, 6000]
    }
    out
}

fn phone_duration_ms(symbol: &str, stressed: bool) -> f64 {
    let h = fnv1a(symbol) >> 48;
    let base = 80.0 + (h % 50) as f64;
    if stressed {
        base * 1.3
    } else {
        base
    }
}

/// Render one utterance: a tone segment per phone (silence for punctuation)
/// with short raised-cosine edges, plus a trailing silence.
fn render_audio(seq: &UnifiedPhoneSequence, pitch_factor: f64) -> Vec<f32> {
    let mut samples: Vec<f32> = Vec::new();
    for (i, phone) in seq.tokens.iter().enumerate() {
        let stressed = seq.stress_indices.contains(&i);
        if phone.kind == PhoneKind::Punctuation {
            let n = (0.1 * SAMPLE_RATE) as usize;
            samples.extend(std::iter::repeat(0.0f32).take(n));
            continue;
        }
        let dur = phone_duration_ms(&phone.symbol, stressed) / 1000.0;
        let n = (dur * SAMPLE_RATE) as usize;
        let partials = phone_partials(&phone.symbol);
        let amp = if stressed { 0.28 } else { 0.18 };
        let edge = (0.005 * SAMPLE_RATE) as usize;
        for j in 0..n {
            let t = j as f64 / SAMPLE_RATE;
            let mut v = 0.0;
            for (k, &f) in partials.iter().enumerate() {
                let freq = (f * pitch_factor).min(10_000.0);
                let w = 1.0 / (k + 1) as f64;
                v += w * (2.0 * std::f64::consts::PI * freq * t).sin();
            }
            let mut env = 1.0;
            if j < edge {
                env = 0.5 - 0.5 * (std::f64::consts::PI * j as f64 / edge as f64).cos();
            } else if n - j <= edge {
                let k = (n - j) as f64;
                env = 0.5 - 0.5 * (std::f64::consts::PI * k / edge as f64).cos();
            }
            samples.push((amp * env * v / 1.8) as f32);
        }
    }
    let tail = (0.06 * SAMPLE_RATE) as usize;
    samples.extend(std::iter::repeat(0.0f32).take(tail));
    samples
}

fn random_phone_string(rng: &mut ChaCha8Rng, cfg: &ToyCorpusConfig) -> String {
    let n = rng.gen_range(cfg.min_phones..=cfg.max_phones);
    let mut tokens = Vec::with_capacity(n + 1);
    for i in 0..n {
        if i % 2 == 0 {
            tokens.push(CONSONANTS[rng.gen_range(0..CONSONANTS.len())].to_string());
        } else {
            let v = VOWELS[rng.gen_range(0..VOWELS.len())];
            if rng.gen_bool(0.3) {
                tokens.push(format!("\"{v}"));
            } else {
                tokens.push(v.to_string());
            }
        }
    }
    tokens.push(".".to_string());
    tokens.join(" ")
}

/// Generate wavs, a unified manifest, synthetic d-vectors and a copy of the
/// shipped rule table under `out_dir`. Deterministic in `cfg.seed`.
pub fn generate_toy_corpus(out_dir: &Path, cfg: &ToyCorpusConfig) -> Result<ToyCorpus, ToyError> {
    let wav_dir = out_dir.join("wavs");
    std::fs::create_dir_all(&wav_dir)?;
    let rules = RuleTable::default_table();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut voices = Vec::new();
    for locale in LOCALES {
        for s in 0..SPEAKERS_PER_LOCALE {
            voices.push((format!("spk_{}_{}", locale.replace('-', "_"), s), locale));
        }
    }

    let mut records = Vec::new();
    let mut utt_speaker = BTreeMap::new();
    for i in 0..cfg.utterances {
        let (speaker, locale) = &voices[i % voices.len()];
        let utt_id = format!("utt_{i:03}");
        let raw = random_phone_string(&mut rng, cfg);
        let seq = crate::phones::normalize_utterance(&raw, locale, &rules)
            .expect("toy phones come from the inventory");
        // speaker-specific pitch factor spreads the voices spectrally
        let voice_idx = i % voices.len();
        let pitch = 1.0 + 0.13 * voice_idx as f64;
        let samples = render_audio(&seq, pitch);
        debug_assert!(samples.len() <= (2.0 * SAMPLE_RATE) as usize);
        let wav_path = wav_dir.join(format!("{utt_id}.wav"));
        audio::write_wav(&wav_path, &samples)?;
        utt_speaker.insert(utt_id.clone(), speaker.clone());
        records.push(UtteranceRecord {
            utt_id,
            audio_path: PathBuf::from(format!("wavs/{i:03}.wav")), // fixed below
            speaker: speaker.clone(),
            locale: locale.to_string(),
            phones: seq,
        });
    }
    for (i, r) in records.iter_mut().enumerate() {
        r.audio_path = PathBuf::from(format!("wavs/utt_{i:03}.wav"));
    }

    let manifest_path = out_dir.join("manifest.jsonl");
    crate::corpus::write_manifest(&manifest_path, &records)?;

    let embeddings = synthetic_dvectors(&utt_speaker, cfg.dvector_jitter, &mut rng);
    let embeddings_path = out_dir.join("embeddings.csv");
    write_embedding_csv(&embeddings_path, &embeddings)?;

    let rules_path = out_dir.join("rules.tsv");
    std::fs::write(&rules_path, DEFAULT_RULES_TSV)?;

    let corpus = load_manifest(&manifest_path, &rules)?;
    Ok(ToyCorpus { manifest_path, embeddings_path, rules_path, corpus })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generated_corpus_loads_and_is_deterministic() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let cfg = ToyCorpusConfig { utterances: 8, ..Default::default() };
        let a = generate_toy_corpus(d1.path(), &cfg).unwrap();
        let b = generate_toy_corpus(d2.path(), &cfg).unwrap();
        assert_eq!(a.corpus.len(), 8);
        assert_eq!(a.corpus.speakers().len(), 4);
        assert_eq!(a.corpus.locales(), vec!["en-US", "es-MX"]);

        let ma = std::fs::read_to_string(&a.manifest_path).unwrap();
        let mb = std::fs::read_to_string(&b.manifest_path).unwrap();
        assert_eq!(ma, mb);
        let wa = std::fs::read(d1.path().join("wavs/utt_000.wav")).unwrap();
        let wb = std::fs::read(d2.path().join("wavs/utt_000.wav")).unwrap();
        assert_eq!(wa, wb);
    }

    #[test]
    fn utterances_stay_under_two_seconds() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ToyCorpusConfig { utterances: 12, ..Default::default() };
        let toy = generate_toy_corpus(dir.path(), &cfg).unwrap();
        for rec in &toy.corpus.records {
            let samples = audio::read_wav(&rec.audio_path).unwrap();
            assert!(samples.len() <= 48_000, "{} too long", rec.utt_id);
        }
    }

    #[test]
    fn different_phones_have_different_signatures() {
        let a = phone_partials("a");
        let s = phone_partials("s");
        assert_ne!(a, s);
        for f in a.iter().chain(s.iter()) {
            assert!(*f >= 200.0 && *f <= 6000.0);
        }
    }
}
