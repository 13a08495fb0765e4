//! Optimizer, schedules, and the seed / fine-tune / extend training loops.

pub mod checkpoint;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, CkptError, RngState,
};

use crate::corpus::{self, Corpus, CorpusError, TrainingSubset};
use crate::features::{compute_frames, FeatureConfig, FeatureError};
use crate::model::forward::{forward_training, BatchData, LossBreakdown, RunMode};
use crate::model::params::Params;
use crate::model::{Model, ModelError};
use crate::phones::{PhoneError, PhoneVocab};
use crate::speaker::{draw_training_embedding, SpeakerError, SpeakerSpace};
use crate::tensor::Scalar;
use crate::{audio, model::ModelVariantConfig};
use indexmap::IndexMap;
use ndarray::{Array2, Array3, ArrayD};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, VecDeque};
use std::io::Write;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("learning-rate step must be >= 1")]
    BadStep,
    #[error("invalid schedule: {0}")]
    BadSchedule(String),
    #[error("training subset does not cover speaker `{0}` present in the corpus")]
    SubsetDoesNotSpan(String),
    #[error(
        "fine-tune subset for speaker `{0}` does not match the seed checkpoint's persisted subset"
    )]
    SubsetMismatch(String),
    #[error("speaker `{0}` not present in the seed subset")]
    UnknownSpeaker(String),
    #[error("extend-training requires the SE+LE variant, checkpoint holds `{0}`")]
    WrongVariant(String),
    #[error("non-finite loss at step {step}; last good checkpoint: {last:?}")]
    Divergence { step: u64, last: Option<PathBuf> },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Speaker(#[from] SpeakerError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Phones(#[from] PhoneError),
    #[error(transparent)]
    Ckpt(#[from] CkptError),
    #[error(transparent)]
    Audio(#[from] audio::AudioError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Adam + Noam settings and step budgets. Budgets are stored at paper scale;
/// `desk_divisor` shrinks them (and the warmup) for desk-scale runs while
/// keeping the 5:1 seed-to-fine-tune ratio.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSchedule {
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub seed_steps: u64,
    pub finetune_steps: u64,
    pub extended_steps: u64,
    pub desk_divisor: u64,
    pub grad_clip: f64,
    pub kld_beta_max: f64,
    /// Fraction of the seed budget over which the KLD weight ramps 0 -> max.
    pub kld_ramp_frac: f64,
}

impl Default for TrainingSchedule {
    fn default() -> Self {
        TrainingSchedule {
            peak_lr: 0.001,
            warmup_steps: 4000,
            beta1: 0.9,
            beta2: 0.999,
            batch_size: 16,
            seed_steps: 2_500_000,
            finetune_steps: 500_000,
            extended_steps: 4_500_000,
            desk_divisor: 1,
            grad_clip: 1.0,
            kld_beta_max: 1.0,
            kld_ramp_frac: 0.05,
        }
    }
}

impl TrainingSchedule {
    pub fn desk(divisor: u64) -> Self {
        TrainingSchedule { desk_divisor: divisor, ..Default::default() }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let positives = [
            self.peak_lr,
            self.beta1,
            self.beta2,
            self.grad_clip,
            self.kld_beta_max,
            self.kld_ramp_frac,
        ];
        if positives.iter().any(|&x| x <= 0.0)
            || self.warmup_steps == 0
            || self.batch_size == 0
            || self.seed_steps == 0
            || self.finetune_steps == 0
            || self.extended_steps == 0
            || self.desk_divisor == 0
        {
            return Err(TrainError::BadSchedule("every field must be positive".into()));
        }
        Ok(())
    }

    pub fn effective_seed_steps(&self) -> u64 {
        (self.seed_steps / self.desk_divisor).max(1)
    }
    pub fn effective_finetune_steps(&self) -> u64 {
        (self.finetune_steps / self.desk_divisor).max(1)
    }
    pub fn effective_extended_steps(&self) -> u64 {
        (self.extended_steps / self.desk_divisor).max(1)
    }
    /// Warmup shrinks with the divisor but keeps enough steps for Adam to
    /// settle; at paper scale it is exactly `warmup_steps`.
    pub fn effective_warmup(&self) -> u64 {
        if self.desk_divisor == 1 {
            self.warmup_steps
        } else {
            (self.warmup_steps / self.desk_divisor).max(250).min(self.warmup_steps)
        }
    }

    pub fn lr(&self, step: u64) -> Result<f64, TrainError> {
        noam_lr(step, self.peak_lr, self.effective_warmup())
    }

    /// KLD weight at `step`: linear ramp from 0 over the first
    /// `kld_ramp_frac` of the seed budget, then constant.
    pub fn kld_beta(&self, step: u64) -> f64 {
        let ramp = (self.kld_ramp_frac * self.effective_seed_steps() as f64).max(1.0);
        self.kld_beta_max * (step as f64 / ramp).min(1.0)
    }
}

/// Noam profile: linear warmup to `peak_lr`, then inverse-square-root decay.
/// Continuous and maximal at `step == warmup_steps`.
pub fn noam_lr(step: u64, peak_lr: f64, warmup_steps: u64) -> Result<f64, TrainError> {
    if step < 1 {
        return Err(TrainError::BadStep);
    }
    let s = step as f64;
    let w = warmup_steps as f64;
    Ok(peak_lr * (s / w).min((w / s).sqrt()))
}

/// Adam with bias correction and global-norm gradient clipping.
pub struct Adam<F: Scalar> {
    pub m: IndexMap<String, ArrayD<F>>,
    pub v: IndexMap<String, ArrayD<F>>,
    pub t: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl<F: Scalar> Adam<F> {
    pub fn new(schedule: &TrainingSchedule) -> Self {
        Adam {
            m: IndexMap::new(),
            v: IndexMap::new(),
            t: 0,
            beta1: schedule.beta1,
            beta2: schedule.beta2,
            eps: 1e-8,
        }
    }

    pub fn with_state(
        schedule: &TrainingSchedule,
        m: IndexMap<String, ArrayD<F>>,
        v: IndexMap<String, ArrayD<F>>,
        t: u64,
    ) -> Self {
        Adam { m, v, t, beta1: schedule.beta1, beta2: schedule.beta2, eps: 1e-8 }
    }

    pub fn step(
        &mut self,
        params: &mut Params<F>,
        grads: &IndexMap<String, ArrayD<F>>,
        lr: f64,
        clip: f64,
    ) {
        let norm_sq: f64 = grads
            .values()
            .map(|g| g.iter().map(|x| x.into_f64().powi(2)).sum::<f64>())
            .sum();
        let norm = norm_sq.sqrt();
        let scale = if norm > clip { clip / norm } else { 1.0 };

        self.t += 1;
        let b1 = self.beta1;
        let b2 = self.beta2;
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        for (name, grad) in grads {
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(grad.raw_dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(grad.raw_dim()));
            let p = params.get_mut(name);
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .and(grad)
                .for_each(|p, m, v, g| {
                    let g = g.into_f64() * scale;
                    let mf = b1 * m.into_f64() + (1.0 - b1) * g;
                    let vf = b2 * v.into_f64() + (1.0 - b2) * g * g;
                    *m = F::from_f64(mf);
                    *v = F::from_f64(vf);
                    let update = lr * (mf / bc1) / ((vf / bc2).sqrt() + self.eps);
                    *p = F::from_f64(p.into_f64() - update);
                });
        }
    }
}

/// Everything a training loop needs, computed once up front.
pub struct TrainEnv {
    pub corpus: Corpus,
    pub subset: TrainingSubset,
    pub features: BTreeMap<String, Array2<f32>>,
    pub phone_ids: BTreeMap<String, Vec<usize>>,
    pub locales: Vec<String>,
    pub vocab: PhoneVocab,
    pub speakers: SpeakerSpace,
    pub feature_cfg: FeatureConfig,
}

impl TrainEnv {
    /// Extract targets and encode phones for every subset utterance.
    pub fn prepare(
        corpus: Corpus,
        subset: TrainingSubset,
        speakers: SpeakerSpace,
        vocab: PhoneVocab,
        feature_cfg: FeatureConfig,
    ) -> Result<Self, TrainError> {
        let locales = corpus.locales();
        let mut features = BTreeMap::new();
        let mut phone_ids = BTreeMap::new();
        for id in subset.all_ids() {
            let rec = corpus.get(&id).ok_or_else(|| CorpusError::SubsetFile {
                path: "<subset>".into(),
                msg: format!("utterance `{id}` not in corpus"),
            })?;
            let samples = audio::read_wav(&rec.audio_path)?;
            features.insert(id.clone(), compute_frames(&samples, &feature_cfg)?);
            phone_ids.insert(id.clone(), vocab.encode(&rec.phones)?);
        }
        Ok(TrainEnv { corpus, subset, features, phone_ids, locales, vocab, speakers, feature_cfg })
    }

    fn locale_id(&self, locale: &str) -> usize {
        self.locales.iter().position(|l| l == locale).expect("locale known to corpus")
    }
}

#[derive(Clone, Debug)]
pub struct TrainOptions {
    pub out_dir: PathBuf,
    pub checkpoint_every: u64,
    pub log_every: u64,
    /// Override the schedule's step budget (useful for smoke runs).
    pub max_steps: Option<u64>,
    /// Early stop once total loss has dropped by this fraction relative to
    /// the average over steps 1..=50 (and `min_steps` have run).
    pub stop_at_reduction: Option<f64>,
    pub min_steps: u64,
}

impl TrainOptions {
    pub fn new(out_dir: &Path) -> Self {
        TrainOptions {
            out_dir: out_dir.to_path_buf(),
            checkpoint_every: 1000,
            log_every: 100,
            max_steps: None,
            stop_at_reduction: None,
            min_steps: 0,
        }
    }
}

const BASELINE_STEPS: usize = 50;
const TRAILING_WINDOW: usize = 50;

/// Loss-reduction bookkeeping relative to the early-training average.
struct ReductionTracker {
    baseline: Vec<f64>,
    trailing: VecDeque<f64>,
}

impl ReductionTracker {
    fn new() -> Self {
        ReductionTracker { baseline: Vec::new(), trailing: VecDeque::new() }
    }

    fn push(&mut self, total: f64) {
        if self.baseline.len() < BASELINE_STEPS {
            self.baseline.push(total);
        }
        self.trailing.push_back(total);
        if self.trailing.len() > TRAILING_WINDOW {
            self.trailing.pop_front();
        }
    }

    fn reduction(&self) -> Option<f64> {
        if self.baseline.len() < BASELINE_STEPS || self.trailing.len() < TRAILING_WINDOW {
            return None;
        }
        let base: f64 = self.baseline.iter().sum::<f64>() / self.baseline.len() as f64;
        let tail: f64 = self.trailing.iter().sum::<f64>() / self.trailing.len() as f64;
        if base.abs() < 1e-12 {
            return None;
        }
        Some(1.0 - tail / base)
    }
}

struct MetricsLog {
    w: std::io::BufWriter<std::fs::File>,
}

impl MetricsLog {
    fn create(path: &Path) -> Result<Self, TrainError> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "step,lr,l1_decoder,l2_postnet,kld,total")?;
        Ok(MetricsLog { w })
    }

    fn push(&mut self, step: u64, lr: f64, loss: &LossBreakdown) -> Result<(), TrainError> {
        writeln!(
            self.w,
            "{step},{lr},{},{},{},{}",
            loss.l1_decoder, loss.l2_postnet, loss.kld, loss.total
        )?;
        Ok(())
    }

    fn flush(&mut self) -> Result<(), TrainError> {
        self.w.flush()?;
        Ok(())
    }
}

fn assemble_batch<F: Scalar>(
    env: &TrainEnv,
    ids: &[String],
    use_se: bool,
    rng: &mut ChaCha8Rng,
) -> Result<BatchData<F>, TrainError> {
    let mut phone_ids = Vec::with_capacity(ids.len());
    let mut locale_ids = Vec::with_capacity(ids.len());
    let mut seqs = Vec::with_capacity(ids.len());
    let mut se_rows: Vec<Vec<f64>> = Vec::new();
    for id in ids {
        let rec = env.corpus.get(id).expect("subset id in corpus");
        phone_ids.push(env.phone_ids[id].clone());
        locale_ids.push(env.locale_id(&rec.locale));
        seqs.push(env.features[id].clone());
        if use_se {
            let g = env.speakers.get(&rec.speaker)?;
            se_rows.push(draw_training_embedding(g, rng));
        }
    }
    let padded = corpus::pad_batch(&seqs, &env.feature_cfg);
    let (b, t) = (ids.len(), padded.frames.shape()[1]);
    let targets = Array3::from_shape_fn((b, t, 81), |(i, j, k)| {
        F::from_f64(f64::from(padded.frames[[i, j, k]]))
    });
    let mask =
        Array2::from_shape_fn((b, t), |(i, j)| F::from_f64(f64::from(padded.mask[[i, j]])));
    let se = if use_se {
        Some(Array2::from_shape_fn((b, 128), |(i, j)| F::from_f64(se_rows[i][j])))
    } else {
        None
    };
    Ok(BatchData { phone_ids, locale_ids, se, targets, mask })
}

struct LoopOutcome {
    step: u64,
    adam_t: u64,
}

#[allow(clippy::too_many_arguments)]
fn run_loop<F: Scalar>(
    model: &mut Model<F>,
    env: &TrainEnv,
    schedule: &TrainingSchedule,
    adam: &mut Adam<F>,
    rng: &mut ChaCha8Rng,
    rng_seed: u64,
    train_ids: &[String],
    start_step: u64,
    end_step: u64,
    opts: &TrainOptions,
    subset: &TrainingSubset,
) -> Result<LoopOutcome, TrainError> {
    std::fs::create_dir_all(&opts.out_dir)?;
    let mut metrics = MetricsLog::create(&opts.out_dir.join("metrics.csv"))?;
    let mut tracker = ReductionTracker::new();
    let use_se = model.config.use_se_le;

    let save = |model: &Model<F>,
                adam: &Adam<F>,
                rng: &ChaCha8Rng,
                step: u64,
                name: &str|
     -> Result<PathBuf, TrainError> {
        let ckpt = Checkpoint {
            meta: CheckpointMeta {
                config: model.config.clone(),
                step,
                adam_t: adam.t,
                schedule: schedule.clone(),
                subset: subset.clone(),
                rng: RngState::capture(rng_seed, rng),
                vocab_symbols: env.vocab.symbols.clone(),
                locales: env.locales.clone(),
                speakers: env.speakers.clone(),
                feature_config: env.feature_cfg.clone(),
            },
            params: model.params.clone(),
            adam_m: adam.m.clone(),
            adam_v: adam.v.clone(),
        };
        let path = opts.out_dir.join(name);
        save_checkpoint(&ckpt, &path)?;
        Ok(path)
    };

    let mut last_ckpt: Option<PathBuf> =
        Some(save(model, adam, rng, start_step, "init.ckpt")?);

    let mut queue: VecDeque<Vec<String>> = VecDeque::new();
    let mut step = start_step;
    while step < end_step {
        if queue.is_empty() {
            let mut order = train_ids.to_vec();
            order.sort();
            order.shuffle(rng);
            for chunk in order.chunks(schedule.batch_size) {
                queue.push_back(chunk.to_vec());
            }
        }
        let batch_ids = queue.pop_front().expect("nonempty queue");
        step += 1;

        let batch = assemble_batch::<F>(env, &batch_ids, use_se, rng)?;
        let beta = schedule.kld_beta(step);
        let mut fwd = forward_training(model, &batch, beta, RunMode::Train, rng)?;
        let loss = fwd.loss_breakdown(beta);
        if !loss.total.is_finite() {
            metrics.flush()?;
            return Err(TrainError::Divergence { step, last: last_ckpt });
        }

        let grads_by_tid = fwd.bd.g.backward(fwd.losses.total);
        let mut grads: IndexMap<String, ArrayD<F>> = IndexMap::new();
        for (name, tid) in fwd.bd.mounted() {
            if let Some(g) = &grads_by_tid[tid.0] {
                grads.insert(name.clone(), g.clone());
            }
        }
        let bn_updates = std::mem::take(&mut fwd.bn_updates);
        drop(fwd);

        let lr = schedule.lr(step)?;
        adam.step(&mut model.params, &grads, lr, schedule.grad_clip);

        for (prefix, mean, var) in bn_updates {
            let momentum = F::from_f64(0.9);
            let one_minus = F::from_f64(0.1);
            let rm = model.params.get_mut(&format!("{prefix}.rmean"));
            ndarray::Zip::from(rm).and(&mean).for_each(|r, &b| {
                *r = *r * momentum + b * one_minus;
            });
            let rv = model.params.get_mut(&format!("{prefix}.rvar"));
            ndarray::Zip::from(rv).and(&var).for_each(|r, &b| {
                *r = *r * momentum + b * one_minus;
            });
        }

        metrics.push(step, lr, &loss)?;
        tracker.push(loss.total);

        if step % opts.log_every == 0 {
            let red = tracker
                .reduction()
                .map(|r| format!("{:.1}%", r * 100.0))
                .unwrap_or_else(|| "n/a".into());
            eprintln!(
                "step {step}: lr {lr:.6} total {:.4} (l1 {:.4} l2 {:.4} kld {:.4}) reduction {red}",
                loss.total, loss.l1_decoder, loss.l2_postnet, loss.kld
            );
        }
        if step % opts.checkpoint_every == 0 {
            metrics.flush()?;
            last_ckpt = Some(save(model, adam, rng, step, &format!("step_{step:07}.ckpt"))?);
        }
        if let Some(target) = opts.stop_at_reduction {
            if step >= opts.min_steps.max(start_step) {
                if let Some(red) = tracker.reduction() {
                    if red >= target {
                        eprintln!("step {step}: reduction target {target} reached");
                        break;
                    }
                }
            }
        }
    }
    metrics.flush()?;
    Ok(LoopOutcome { step, adam_t: adam.t })
}

/// Train a seed model over the full multi-speaker pool.
pub fn train_seed<F: Scalar>(
    mut model: Model<F>,
    env: &TrainEnv,
    schedule: &TrainingSchedule,
    rng_seed: u64,
    opts: &TrainOptions,
) -> Result<Checkpoint<F>, TrainError> {
    schedule.validate()?;
    for speaker in env.corpus.speakers() {
        if env.subset.ids_for(&speaker).map_or(true, <[String]>::is_empty) {
            return Err(TrainError::SubsetDoesNotSpan(speaker));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut adam = Adam::new(schedule);
    let ids = env.subset.all_ids();
    let end = opts.max_steps.unwrap_or_else(|| schedule.effective_seed_steps());
    let outcome = run_loop(
        &mut model,
        env,
        schedule,
        &mut adam,
        &mut rng,
        rng_seed,
        &ids,
        0,
        end,
        opts,
        &env.subset,
    )?;
    corpus::write_subset(&opts.out_dir.join("subset.txt"), &env.subset)?;
    finish(model, env, schedule, adam, rng, rng_seed, outcome, opts)
}

/// Fine-tune every parameter on exactly the speaker's seed-training
/// utterances; the utterance-id set is asserted against the checkpoint.
pub fn finetune<F: Scalar>(
    ckpt: &Checkpoint<F>,
    env: &TrainEnv,
    speaker: &str,
    rng_seed: u64,
    opts: &TrainOptions,
) -> Result<Checkpoint<F>, TrainError> {
    let schedule = ckpt.meta.schedule.clone();
    schedule.validate()?;
    let recorded = ckpt.meta.subset.ids_for(speaker);
    if recorded.is_none() {
        return Err(TrainError::UnknownSpeaker(speaker.to_string()));
    }
    if env.subset.id_set(speaker) != ckpt.meta.subset.id_set(speaker) {
        return Err(TrainError::SubsetMismatch(speaker.to_string()));
    }
    let ids: Vec<String> = env.subset.id_set(speaker).into_iter().collect();

    let mut model = ckpt.model();
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    // optimizer state starts fresh; the LR schedule continues from the seed step count
    let mut adam = Adam::new(&schedule);
    let start = ckpt.meta.step;
    let end = start + opts.max_steps.unwrap_or_else(|| schedule.effective_finetune_steps());
    let outcome = run_loop(
        &mut model,
        env,
        &schedule,
        &mut adam,
        &mut rng,
        rng_seed,
        &ids,
        start,
        end,
        opts,
        &ckpt.meta.subset,
    )?;
    finish(model, env, &schedule, adam, rng, rng_seed, outcome, opts)
}

/// Continue seed training of the non-fine-tuned SE+LE model to the extended
/// budget, resuming the optimizer and rng streams.
pub fn extend_training<F: Scalar>(
    ckpt: &Checkpoint<F>,
    env: &TrainEnv,
    opts: &TrainOptions,
) -> Result<Checkpoint<F>, TrainError> {
    if !ckpt.meta.config.use_se_le {
        return Err(TrainError::WrongVariant(ckpt.meta.config.variant_name().to_string()));
    }
    let schedule = ckpt.meta.schedule.clone();
    let mut model = ckpt.model();
    let mut rng = ckpt.meta.rng.restore();
    let rng_seed = ckpt.meta.rng.seed;
    let mut adam =
        Adam::with_state(&schedule, ckpt.adam_m.clone(), ckpt.adam_v.clone(), ckpt.meta.adam_t);
    let ids = env.subset.all_ids();
    let start = ckpt.meta.step;
    let end = opts
        .max_steps
        .map(|m| start + m)
        .unwrap_or_else(|| schedule.effective_extended_steps());
    let outcome = run_loop(
        &mut model,
        env,
        &schedule,
        &mut adam,
        &mut rng,
        rng_seed,
        &ids,
        start,
        end,
        opts,
        &env.subset,
    )?;
    finish(model, env, &schedule, adam, rng, rng_seed, outcome, opts)
}

#[allow(clippy::too_many_arguments)]
fn finish<F: Scalar>(
    model: Model<F>,
    env: &TrainEnv,
    schedule: &TrainingSchedule,
    adam: Adam<F>,
    rng: ChaCha8Rng,
    rng_seed: u64,
    outcome: LoopOutcome,
    opts: &TrainOptions,
) -> Result<Checkpoint<F>, TrainError> {
    let ckpt = Checkpoint {
        meta: CheckpointMeta {
            config: model.config.clone(),
            step: outcome.step,
            adam_t: outcome.adam_t,
            schedule: schedule.clone(),
            subset: env.subset.clone(),
            rng: RngState::capture(rng_seed, &rng),
            vocab_symbols: env.vocab.symbols.clone(),
            locales: env.locales.clone(),
            speakers: env.speakers.clone(),
            feature_config: env.feature_cfg.clone(),
        },
        params: model.params,
        adam_m: adam.m,
        adam_v: adam.v,
    };
    save_checkpoint(&ckpt, &opts.out_dir.join("final.ckpt"))?;
    Ok(ckpt)
}

/// Deterministic teacher-forced loss of `ids` under the model (no dropout,
/// no noise, latent at the posterior mean).
pub fn eval_subset_loss<F: Scalar>(
    model: &Model<F>,
    env: &TrainEnv,
    ids: &[String],
) -> Result<f64, TrainError> {
    let mut sorted = ids.to_vec();
    sorted.sort();
    let mut total = 0.0;
    let mut count = 0usize;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for chunk in sorted.chunks(8) {
        let batch = assemble_batch::<F>(env, chunk, model.config.use_se_le, &mut rng)?;
        let fwd = forward_training(model, &batch, 1.0, RunMode::Eval, &mut rng)?;
        total += fwd.loss_breakdown(1.0).total * chunk.len() as f64;
        count += chunk.len();
    }
    Ok(total / count as f64)
}

/// Convenience used by tests and the CLI: make a toy-scale model matching an
/// environment's vocabulary and locales.
pub fn model_for_env<F: Scalar>(
    config: ModelVariantConfig,
    env: &TrainEnv,
    seed: u64,
) -> Result<Model<F>, TrainError> {
    Ok(crate::model::build_model(config, env.vocab.len(), env.locales.len(), seed)?)
}
