//! Evaluation machinery: average phonetic distance between a test-set phone
//! distribution and a speaker's phone set, and the MOS statistics pipeline
//! (per-subject z-scoring, Welch pairwise contrasts with Bonferroni
//! correction, significance summaries).

use crate::phones::{classify, PhoneKind, UnifiedPhoneSequence};
use crate::tensor::Scalar;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use thiserror::Error;

pub const SIGNIFICANCE_ALPHA: f64 = 0.05;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("no embedding for phone `{0}`")]
    MissingEmbedding(String),
    #[error("empty phone distribution")]
    EmptyDistribution,
    #[error("empty speaker phone set")]
    EmptySpeakerSet,
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("ratings file `{path}` row {row}: {msg}")]
    Ratings { path: String, row: usize, msg: String },
    #[error("embedding table `{path}` row {row}: {msg}")]
    Table { path: String, row: usize, msg: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// How token probabilities are assigned to the unique phones of a test set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    /// Relative token frequency in the test utterances (default).
    Frequency,
    /// Uniform over the unique phones.
    Uniform,
}

/// Distribution over the unique phones of a test set. Stressed vowels count
/// as their own symbols (they have their own embeddings); punctuation is not
/// a phone and is excluded.
#[derive(Clone, Debug, PartialEq)]
pub struct PhoneDistribution {
    pub probs: BTreeMap<String, f64>,
}

/// Stressed-variant-aware symbol of token `i` of a sequence.
fn token_symbol(seq: &UnifiedPhoneSequence, i: usize) -> String {
    if seq.stress_indices.contains(&i) {
        format!("\"{}", seq.tokens[i].symbol)
    } else {
        seq.tokens[i].symbol.clone()
    }
}

impl PhoneDistribution {
    pub fn from_sequences(
        seqs: &[UnifiedPhoneSequence],
        mode: WeightMode,
    ) -> Result<Self, AnalysisError> {
        let mut counts: BTreeMap<String, f64> = BTreeMap::new();
        for seq in seqs {
            for (i, p) in seq.tokens.iter().enumerate() {
                if classify(&p.symbol) == PhoneKind::Punctuation {
                    continue;
                }
                *counts.entry(token_symbol(seq, i)).or_insert(0.0) += 1.0;
            }
        }
        if counts.is_empty() {
            return Err(AnalysisError::EmptyDistribution);
        }
        let total: f64 = match mode {
            WeightMode::Frequency => counts.values().sum(),
            WeightMode::Uniform => {
                for v in counts.values_mut() {
                    *v = 1.0;
                }
                counts.len() as f64
            }
        };
        for v in counts.values_mut() {
            *v /= total;
        }
        Ok(PhoneDistribution { probs: counts })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SpeakerPhoneSet {
    pub phones: BTreeSet<String>,
}

impl SpeakerPhoneSet {
    pub fn from_sequences(seqs: &[UnifiedPhoneSequence]) -> Result<Self, AnalysisError> {
        let mut phones = BTreeSet::new();
        for seq in seqs {
            for (i, p) in seq.tokens.iter().enumerate() {
                if classify(&p.symbol) == PhoneKind::Punctuation {
                    continue;
                }
                phones.insert(token_symbol(seq, i));
            }
        }
        if phones.is_empty() {
            return Err(AnalysisError::EmptySpeakerSet);
        }
        Ok(SpeakerPhoneSet { phones })
    }
}

/// Phone-symbol lookup table taken from a trained model's embedding layer
/// (or an exported CSV).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PhoneEmbeddingTable {
    pub vectors: BTreeMap<String, Vec<f64>>,
}

impl PhoneEmbeddingTable {
    pub fn from_model<F: Scalar>(
        table: &ndarray::ArrayD<F>,
        symbols: &[String],
    ) -> Self {
        let mut vectors = BTreeMap::new();
        for (i, sym) in symbols.iter().enumerate() {
            let row: Vec<f64> =
                (0..table.shape()[1]).map(|j| table[[i, j]].into_f64()).collect();
            vectors.insert(sym.clone(), row);
        }
        PhoneEmbeddingTable { vectors }
    }

    /// CSV rows: symbol followed by the embedding values.
    pub fn read_csv(path: &Path) -> Result<Self, AnalysisError> {
        let text = std::fs::read_to_string(path)?;
        let mut vectors = BTreeMap::new();
        for (row, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut fields = line.split(',');
            let sym = fields
                .next()
                .ok_or_else(|| AnalysisError::Table {
                    path: path.display().to_string(),
                    row: row + 1,
                    msg: "empty row".into(),
                })?
                .trim()
                .to_string();
            let values: Result<Vec<f64>, _> = fields.map(|f| f.trim().parse()).collect();
            let values = values.map_err(|e| AnalysisError::Table {
                path: path.display().to_string(),
                row: row + 1,
                msg: format!("{e}"),
            })?;
            vectors.insert(sym, values);
        }
        Ok(PhoneEmbeddingTable { vectors })
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), AnalysisError> {
        use std::io::Write;
        let mut f = std::fs::File::create(path)?;
        for (sym, values) in &self.vectors {
            let cols: Vec<String> = values.iter().map(|v| format!("{v}")).collect();
            writeln!(f, "{sym},{}", cols.join(","))?;
        }
        Ok(())
    }
}

fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na < 1e-12 || nb < 1e-12 {
        return 1.0;
    }
    1.0 - dot / (na * nb)
}

/// Probability-weighted distance from each test phone to its nearest phone in
/// the speaker's data, in the model's embedding space. Phones already covered
/// by the speaker contribute exactly zero.
pub fn avg_phone_dist(
    t: &PhoneDistribution,
    s: &SpeakerPhoneSet,
    e: &PhoneEmbeddingTable,
) -> Result<f64, AnalysisError> {
    if t.probs.is_empty() {
        return Err(AnalysisError::EmptyDistribution);
    }
    if s.phones.is_empty() {
        return Err(AnalysisError::EmptySpeakerSet);
    }
    let mut total = 0.0;
    for (phone, &prob) in &t.probs {
        if s.phones.contains(phone) {
            continue; // minimum distance is exactly 0
        }
        let et = e
            .vectors
            .get(phone)
            .ok_or_else(|| AnalysisError::MissingEmbedding(phone.clone()))?;
        let mut min_d = f64::INFINITY;
        for sp in &s.phones {
            let es = e
                .vectors
                .get(sp)
                .ok_or_else(|| AnalysisError::MissingEmbedding(sp.clone()))?;
            let d = cosine_distance(et, es);
            if d < min_d {
                min_d = d;
            }
        }
        total += prob * min_d;
    }
    Ok(total)
}

/// One MOS rating.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RatingRecord {
    pub subject: String,
    pub item: String,
    pub system: String,
    pub voice: String,
    pub score: u8,
}

impl RatingRecord {
    pub fn validate(&self) -> Result<(), AnalysisError> {
        if !(1..=5).contains(&self.score) {
            return Err(AnalysisError::InsufficientData(format!(
                "score {} outside 1..=5",
                self.score
            )));
        }
        Ok(())
    }
}

/// CSV with header `subject,item,system,voice,score`.
pub fn read_ratings_csv(path: &Path) -> Result<Vec<RatingRecord>, AnalysisError> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| AnalysisError::Ratings {
        path: path.display().to_string(),
        row: 0,
        msg: e.to_string(),
    })?;
    let mut out = Vec::new();
    for (row, rec) in reader.deserialize::<RatingRecord>().enumerate() {
        let rec = rec.map_err(|e| AnalysisError::Ratings {
            path: path.display().to_string(),
            row: row + 2,
            msg: e.to_string(),
        })?;
        rec.validate().map_err(|e| AnalysisError::Ratings {
            path: path.display().to_string(),
            row: row + 2,
            msg: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ZscoredRecord {
    pub record: RatingRecord,
    pub z: f64,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn sample_var(xs: &[f64], m: f64) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64
}

/// Normalize scores within each subject: `z = (score - mean) / sample std`.
/// Subjects with zero variance carry no ranking information and get `z = 0`.
pub fn zscore_by_subject(records: &[RatingRecord]) -> Vec<ZscoredRecord> {
    let mut by_subject: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for r in records {
        by_subject.entry(&r.subject).or_default().push(f64::from(r.score));
    }
    let stats: BTreeMap<&str, (f64, f64)> = by_subject
        .into_iter()
        .map(|(s, xs)| {
            let m = mean(&xs);
            (s, (m, sample_var(&xs, m).sqrt()))
        })
        .collect();
    records
        .iter()
        .map(|r| {
            let (m, sd) = stats[r.subject.as_str()];
            let z = if sd > 0.0 { (f64::from(r.score) - m) / sd } else { 0.0 };
            ZscoredRecord { record: r.clone(), z }
        })
        .collect()
}

/// Welch's unequal-variance t statistic and two-sided p-value.
pub fn welch_t_test(a: &[f64], b: &[f64]) -> (f64, f64) {
    let (ma, mb) = (mean(a), mean(b));
    let (va, vb) = (sample_var(a, ma), sample_var(b, mb));
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let se2 = va / na + vb / nb;
    if se2 <= 0.0 {
        return (0.0, 1.0);
    }
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2
        / ((va / na).powi(2) / (na - 1.0) + (vb / nb).powi(2) / (nb - 1.0)).max(f64::MIN_POSITIVE);
    let dist = StudentsT::new(0.0, 1.0, df.max(1.0)).expect("valid t distribution");
    let p = 2.0 * (1.0 - dist.cdf(t.abs()));
    (t, p.clamp(0.0, 1.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grouping {
    System,
    Voice,
}

#[derive(Clone, Debug, Serialize)]
pub struct Contrast {
    pub group_a: String,
    pub group_b: String,
    pub n_a: usize,
    pub n_b: usize,
    pub mean_diff: f64,
    pub t_stat: f64,
    pub p_raw: f64,
    pub p_adjusted: f64,
    pub significant: bool,
}

fn group_scores<'a>(
    records: &'a [ZscoredRecord],
    grouping: Grouping,
) -> BTreeMap<&'a str, Vec<f64>> {
    let mut groups: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for r in records {
        let key = match grouping {
            Grouping::System => r.record.system.as_str(),
            Grouping::Voice => r.record.voice.as_str(),
        };
        groups.entry(key).or_default().push(r.z);
    }
    groups
}

/// Welch t-tests on z-scores for every pair of groups, Bonferroni-adjusted by
/// the number of contrasts.
pub fn pairwise_contrasts(
    records: &[ZscoredRecord],
    grouping: Grouping,
) -> Result<Vec<Contrast>, AnalysisError> {
    let groups = group_scores(records, grouping);
    if groups.len() < 2 {
        return Err(AnalysisError::InsufficientData("need at least two groups".into()));
    }
    for (name, xs) in &groups {
        if xs.len() < 2 {
            return Err(AnalysisError::InsufficientData(format!(
                "group `{name}` has fewer than 2 records"
            )));
        }
    }
    let names: Vec<&str> = groups.keys().copied().collect();
    let n_contrasts = names.len() * (names.len() - 1) / 2;
    let mut out = Vec::with_capacity(n_contrasts);
    for i in 0..names.len() {
        for j in i + 1..names.len() {
            let (a, b) = (&groups[names[i]], &groups[names[j]]);
            let (t, p) = welch_t_test(a, b);
            let p_adj = (p * n_contrasts as f64).min(1.0);
            out.push(Contrast {
                group_a: names[i].to_string(),
                group_b: names[j].to_string(),
                n_a: a.len(),
                n_b: b.len(),
                mean_diff: mean(a) - mean(b),
                t_stat: t,
                p_raw: p,
                p_adjusted: p_adj,
                significant: p_adj < SIGNIFICANCE_ALPHA,
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Better,
    Equal,
    Worse,
}

/// Per-voice contrast of one system against the reference system.
#[derive(Clone, Debug, Serialize)]
pub struct VoiceContrast {
    pub voice: String,
    pub system: String,
    pub n: usize,
    pub mean_diff: f64,
    pub p_adjusted: f64,
    pub verdict: Verdict,
}

/// For each voice, contrast every non-reference system against `reference`.
/// Bonferroni correction uses the number of contrasts within each voice's
/// evaluation (systems minus one).
pub fn per_voice_reference_contrasts(
    records: &[ZscoredRecord],
    reference: &str,
) -> Result<Vec<VoiceContrast>, AnalysisError> {
    let voices: BTreeSet<&str> = records.iter().map(|r| r.record.voice.as_str()).collect();
    let systems: BTreeSet<&str> = records.iter().map(|r| r.record.system.as_str()).collect();
    if !systems.contains(reference) {
        return Err(AnalysisError::InsufficientData(format!(
            "reference system `{reference}` absent from ratings"
        )));
    }
    let n_contrasts = systems.len().saturating_sub(1).max(1);
    let mut out = Vec::new();
    for voice in voices {
        let ref_scores: Vec<f64> = records
            .iter()
            .filter(|r| r.record.voice == voice && r.record.system == reference)
            .map(|r| r.z)
            .collect();
        if ref_scores.len() < 2 {
            return Err(AnalysisError::InsufficientData(format!(
                "voice `{voice}` has fewer than 2 reference ratings"
            )));
        }
        for system in systems.iter().filter(|&&s| s != reference) {
            let scores: Vec<f64> = records
                .iter()
                .filter(|r| r.record.voice == voice && r.record.system == *system)
                .map(|r| r.z)
                .collect();
            if scores.len() < 2 {
                return Err(AnalysisError::InsufficientData(format!(
                    "voice `{voice}` system `{system}` has fewer than 2 ratings"
                )));
            }
            let (_, p) = welch_t_test(&scores, &ref_scores);
            let p_adj = (p * n_contrasts as f64).min(1.0);
            let diff = mean(&scores) - mean(&ref_scores);
            let verdict = if p_adj < SIGNIFICANCE_ALPHA {
                if diff > 0.0 {
                    Verdict::Better
                } else {
                    Verdict::Worse
                }
            } else {
                Verdict::Equal
            };
            out.push(VoiceContrast {
                voice: voice.to_string(),
                system: system.to_string(),
                n: scores.len(),
                mean_diff: diff,
                p_adjusted: p_adj,
                verdict,
            });
        }
    }
    Ok(out)
}

/// Per-system counts of voices better / equal / worse than the reference.
#[derive(Clone, Debug, Serialize)]
pub struct SignificanceSummary {
    pub systems: Vec<String>,
    pub better: Vec<usize>,
    pub equal: Vec<usize>,
    pub worse: Vec<usize>,
}

pub fn significance_summary(contrasts: &[VoiceContrast]) -> SignificanceSummary {
    let systems: BTreeSet<&str> = contrasts.iter().map(|c| c.system.as_str()).collect();
    let systems: Vec<String> = systems.into_iter().map(str::to_string).collect();
    let mut better = vec![0usize; systems.len()];
    let mut equal = vec![0usize; systems.len()];
    let mut worse = vec![0usize; systems.len()];
    for c in contrasts {
        let idx = systems.iter().position(|s| s == &c.system).unwrap();
        match c.verdict {
            Verdict::Better => better[idx] += 1,
            Verdict::Equal => equal[idx] += 1,
            Verdict::Worse => worse[idx] += 1,
        }
    }
    SignificanceSummary { systems, better, equal, worse }
}

impl SignificanceSummary {
    /// Three-row plain-text table: better / equal / worse per system.
    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("{:<8}", ""));
        for s in &self.systems {
            out.push_str(&format!("{s:>12}"));
        }
        out.push('\n');
        for (label, row) in
            [("better", &self.better), ("equal", &self.equal), ("worse", &self.worse)]
        {
            out.push_str(&format!("{label:<8}"));
            for v in row {
                out.push_str(&format!("{v:>12}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Additive shift making every group's mean equal to `target` (default: the
/// pooled mean), so two evaluation groups can be plotted on one axis.
/// Within-group differences are preserved exactly.
pub fn shift_mos_for_plot(
    groups: &[Vec<f64>],
    target: Option<f64>,
) -> (Vec<Vec<f64>>, Vec<f64>) {
    let pooled = target.unwrap_or_else(|| {
        let total: f64 = groups.iter().flatten().sum();
        let count: usize = groups.iter().map(Vec::len).sum();
        if count == 0 {
            0.0
        } else {
            total / count as f64
        }
    });
    let mut shifted = Vec::with_capacity(groups.len());
    let mut shifts = Vec::with_capacity(groups.len());
    for g in groups {
        let shift = if g.is_empty() { 0.0 } else { pooled - mean(g) };
        shifts.push(shift);
        shifted.push(g.iter().map(|x| x + shift).collect());
    }
    (shifted, shifts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn table(entries: &[(&str, &[f64])]) -> PhoneEmbeddingTable {
        PhoneEmbeddingTable {
            vectors: entries.iter().map(|(s, v)| (s.to_string(), v.to_vec())).collect(),
        }
    }

    fn dist(entries: &[(&str, f64)]) -> PhoneDistribution {
        PhoneDistribution {
            probs: entries.iter().map(|(s, p)| (s.to_string(), *p)).collect(),
        }
    }

    fn set(phones: &[&str]) -> SpeakerPhoneSet {
        SpeakerPhoneSet { phones: phones.iter().map(|s| s.to_string()).collect() }
    }

    #[test]
    fn covered_test_set_has_zero_distance() {
        let e = table(&[("a", &[1.0, 0.0]), ("b", &[0.0, 1.0])]);
        let t = dist(&[("a", 0.6), ("b", 0.4)]);
        let s = set(&["a", "b", "k"]);
        // "k" has no embedding but is never needed
        assert_eq!(avg_phone_dist(&t, &s, &e).unwrap(), 0.0);
    }

    #[test]
    fn orthogonal_embeddings_give_distance_one() {
        let e = table(&[("t", &[1.0, 0.0]), ("s", &[0.0, 1.0])]);
        let t = dist(&[("t", 1.0)]);
        let s = set(&["s"]);
        let d = avg_phone_dist(&t, &s, &e).unwrap();
        assert!((d - 1.0).abs() < 1e-12);
    }

    #[test]
    fn weighted_mixture_example() {
        // t1 covered (0), t2 at min distance 0.2, weights 0.5/0.5 -> 0.1
        let e = table(&[
            ("t1", &[1.0, 0.0]),
            ("t2", &[1.0, 0.0]),
            ("s2", &[0.8, 0.6]),
        ]);
        let t = dist(&[("t1", 0.5), ("t2", 0.5)]);
        let s = set(&["t1", "s2"]);
        let d = avg_phone_dist(&t, &s, &e).unwrap();
        assert!((d - 0.5 * 0.2).abs() < 1e-12, "{d}");
    }

    #[test]
    fn missing_embedding_is_reported() {
        let e = table(&[("s", &[1.0, 0.0])]);
        let t = dist(&[("t", 1.0)]);
        let s = set(&["s"]);
        assert!(matches!(
            avg_phone_dist(&t, &s, &e),
            Err(AnalysisError::MissingEmbedding(p)) if p == "t"
        ));
    }

    #[test]
    fn zscore_basic_and_degenerate() {
        let mk = |subject: &str, score: u8| RatingRecord {
            subject: subject.into(),
            item: "i".into(),
            system: "s".into(),
            voice: "v".into(),
            score,
        };
        let records = vec![mk("a", 3), mk("a", 4), mk("a", 5), mk("b", 2), mk("b", 2)];
        let z = zscore_by_subject(&records);
        assert!((z[0].z + 1.0).abs() < 1e-12);
        assert!(z[1].z.abs() < 1e-12);
        assert!((z[2].z - 1.0).abs() < 1e-12);
        // constant subject carries no information
        assert_eq!(z[3].z, 0.0);
        assert_eq!(z[4].z, 0.0);
    }

    #[test]
    fn bonferroni_multiplies_and_clamps() {
        // identical groups: raw p ~ 1, adjusted clamps to 1
        let mk = |system: &str, subject: &str, score: u8| RatingRecord {
            subject: subject.into(),
            item: "i".into(),
            system: system.into(),
            voice: "v".into(),
            score,
        };
        let mut records = Vec::new();
        for (i, sc) in [1u8, 2, 3, 4, 5, 1, 2, 3, 4, 5].iter().enumerate() {
            records.push(mk("x", &format!("s{i}"), *sc));
            records.push(mk("y", &format!("s{i}"), *sc));
        }
        let z = zscore_by_subject(&records);
        let c = pairwise_contrasts(&z, Grouping::System).unwrap();
        assert_eq!(c.len(), 1);
        assert!(c[0].mean_diff.abs() < 1e-12);
        assert!(c[0].p_adjusted > 0.99);
        assert!(!c[0].significant);

        // the adjustment is raw * contrasts, clamped at 1
        assert_eq!((0.01f64 * 6.0).min(1.0), 0.06);
        assert_eq!((0.3f64 * 6.0).min(1.0), 1.0);
    }

    #[test]
    fn welch_is_symmetric() {
        let a = [1.0, 2.0, 3.0, 4.5, 2.2];
        let b = [2.0, 2.5, 3.5, 5.0, 4.0, 3.3];
        let (t_ab, p_ab) = welch_t_test(&a, &b);
        let (t_ba, p_ba) = welch_t_test(&b, &a);
        assert!((t_ab + t_ba).abs() < 1e-12);
        assert!((p_ab - p_ba).abs() < 1e-12);
    }

    #[test]
    fn summary_counts_constructed_outcomes() {
        let mut contrasts = Vec::new();
        let verdicts = [
            Verdict::Better,
            Verdict::Better,
            Verdict::Better,
            Verdict::Equal,
            Verdict::Worse,
        ];
        for (i, v) in verdicts.iter().enumerate() {
            contrasts.push(VoiceContrast {
                voice: format!("v{i}"),
                system: "ft".into(),
                n: 10,
                mean_diff: 0.0,
                p_adjusted: 0.01,
                verdict: *v,
            });
        }
        let s = significance_summary(&contrasts);
        assert_eq!(s.systems, vec!["ft"]);
        assert_eq!(s.better, vec![3]);
        assert_eq!(s.equal, vec![1]);
        assert_eq!(s.worse, vec![1]);
        let rendered = s.render();
        assert!(rendered.contains("better"));
        assert!(rendered.contains("equal"));
        assert!(rendered.contains("worse"));
    }

    #[test]
    fn shift_aligns_means_and_preserves_differences() {
        let groups = vec![vec![3.0, 3.4], vec![3.2, 3.6, 3.4]];
        let (shifted, _) = shift_mos_for_plot(&groups, None);
        let m0 = mean(&shifted[0]);
        let m1 = mean(&shifted[1]);
        assert!((m0 - m1).abs() < 1e-9);
        assert!(((shifted[0][1] - shifted[0][0]) - 0.4).abs() < 1e-12);
        // single group: identity up to the common-mean convention
        let (one, shifts) = shift_mos_for_plot(&[vec![2.0, 4.0]], None);
        assert!(shifts[0].abs() < 1e-12);
        assert_eq!(one[0], vec![2.0, 4.0]);
    }

    proptest! {
        #[test]
        fn zscore_preserves_rank_order_within_subject(
            scores in prop::collection::vec(1u8..=5, 3..20)
        ) {
            let records: Vec<RatingRecord> = scores
                .iter()
                .enumerate()
                .map(|(i, &s)| RatingRecord {
                    subject: "subj".into(),
                    item: format!("i{i}"),
                    system: "x".into(),
                    voice: "v".into(),
                    score: s,
                })
                .collect();
            let z = zscore_by_subject(&records);
            for i in 0..z.len() {
                for j in 0..z.len() {
                    if records[i].score < records[j].score {
                        prop_assert!(z[i].z <= z[j].z);
                    }
                }
            }
        }

        #[test]
        fn avg_phone_dist_matches_brute_force(seed in 0u64..500) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let symbols: Vec<String> = (0..8).map(|i| format!("p{i}")).collect();
            let mut vectors = BTreeMap::new();
            for s in &symbols {
                let dim = 5;
                let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
                vectors.insert(s.clone(), v);
            }
            let e = PhoneEmbeddingTable { vectors };
            let n_t = rng.gen_range(1..6);
            let mut probs = BTreeMap::new();
            for _ in 0..n_t {
                let s = symbols[rng.gen_range(0..symbols.len())].clone();
                *probs.entry(s).or_insert(0.0) += rng.gen_range(0.1..1.0);
            }
            let total: f64 = probs.values().sum();
            for v in probs.values_mut() { *v /= total; }
            let t = PhoneDistribution { probs };
            let n_s = rng.gen_range(1..6);
            let s = SpeakerPhoneSet {
                phones: (0..n_s).map(|_| symbols[rng.gen_range(0..symbols.len())].clone()).collect(),
            };

            // independent double loop
            let mut oracle = 0.0;
            for (phone, &prob) in &t.probs {
                if s.phones.contains(phone) { continue; }
                let et = &e.vectors[phone];
                let mut min_d = f64::INFINITY;
                for sp in &s.phones {
                    let es = &e.vectors[sp];
                    let dot: f64 = et.iter().zip(es).map(|(x, y)| x * y).sum();
                    let na: f64 = et.iter().map(|x| x * x).sum::<f64>().sqrt();
                    let nb: f64 = es.iter().map(|x| x * x).sum::<f64>().sqrt();
                    let d = 1.0 - dot / (na * nb);
                    if d < min_d { min_d = d; }
                }
                oracle += prob * min_d;
            }
            let got = avg_phone_dist(&t, &s, &e).unwrap();
            prop_assert_eq!(got, oracle);
            prop_assert!(got >= 0.0 && got <= 2.0 + 1e-12);
        }
    }
}
