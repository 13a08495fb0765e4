//! Multilingual multi-speaker acoustic modeling toolkit: unified phonetic
//! normalization, mel-target extraction, a seq2seq phone-to-mel model with
//! residual-VAE and speaker/locale conditioning variants, seed training with
//! per-speaker fine-tuning, synthesis, and the evaluation statistics
//! (phonetic distance, MOS contrasts).

pub mod analysis;
pub mod audio;
pub mod corpus;
pub mod features;
pub mod model;
pub mod phones;
pub mod speaker;
pub mod synth;
pub mod tensor;
pub mod toy;
pub mod trainer;
pub mod vocoder;

pub use corpus::{Corpus, TrainingSubset, UtteranceRecord};
pub use features::FeatureConfig;
pub use model::{build_model, Model, ModelVariantConfig};
pub use phones::{Phone, PhoneVocab, RuleTable, UnifiedPhoneSequence};
pub use speaker::{SpeakerGaussian, SpeakerSpace};
pub use synth::{SynthesisRequest, SynthesisResult};
pub use trainer::{Checkpoint, TrainingSchedule};
