//! The phone-to-mel sequence-to-sequence acoustic model.
//!
//! Three buildable variants share one skeleton: a convolutional + bi-LSTM
//! phone encoder, stepwise monotonic attention, a two-LSTM decoder emitting
//! two 81-dim frames per step, and a convolutional post-net. The residual
//! VAE variant adds a 16-dim utterance latent; the SE+LE variant further
//! conditions on a 128-dim speaker embedding and a 32-dim locale embedding.

pub mod attention;
pub mod config;
pub mod forward;
pub mod net;
pub mod params;

pub use config::{AttentionKind, ConfigError, ModelVariantConfig, OUTPUT_DIM};
pub use forward::{
    forward_training, BatchData, ForwardPass, LossBreakdown, LossNodes, RunMode,
};

use crate::tensor::Scalar;
use params::{glorot, zeros, Params};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid config: {0}")]
    Config(#[from] ConfigError),
    #[error("empty phone sequence")]
    EmptyInput,
    #[error("phone id {id} out of range (inventory size {inventory})")]
    PhoneIdOutOfRange { id: usize, inventory: usize },
    #[error("locale id {id} out of range ({count} locales)")]
    LocaleOutOfRange { id: usize, count: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
}

pub struct Model<F: Scalar> {
    pub config: ModelVariantConfig,
    pub inventory_size: usize,
    pub locale_count: usize,
    pub params: Params<F>,
}

/// Build a model with deterministic, seed-derived initialization.
pub fn build_model<F: Scalar>(
    config: ModelVariantConfig,
    inventory_size: usize,
    locale_count: usize,
    rng_seed: u64,
) -> Result<Model<F>, ModelError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut p = Params::new();
    let k = config.conv_kernel;
    let e = config.embed_dim();
    let c = config.encoder_conv_channels();
    let h_enc = config.encoder_out_dim() / 2;
    let d_att = config.encoder_attention_dim();
    let a = config.attention_hidden();
    let pre = config.prenet_hidden();
    let h = config.decoder_hidden();
    let m = config.n_mels();
    let r = config.reduction_factor;

    p.insert("embed.table", glorot(&[inventory_size, e], inventory_size, e, &mut rng), true);

    for i in 0..config.encoder_conv_layers {
        let c_in = if i == 0 { e } else { c };
        p.insert(
            &format!("enc.conv{i}.w"),
            glorot(&[k, c_in, c], k * c_in, k * c, &mut rng),
            true,
        );
        p.insert(&format!("enc.conv{i}.b"), zeros(&[c]), true);
    }
    for dir in ["fw", "bw"] {
        p.insert(
            &format!("enc.lstm_{dir}.w"),
            glorot(&[c, 4 * h_enc], c, 4 * h_enc, &mut rng),
            true,
        );
        p.insert(
            &format!("enc.lstm_{dir}.u"),
            glorot(&[h_enc, 4 * h_enc], h_enc, 4 * h_enc, &mut rng),
            true,
        );
        p.insert(&format!("enc.lstm_{dir}.b"), forget_biased(4 * h_enc, h_enc), true);
    }

    if config.use_se_le {
        p.insert("locale.table", glorot(&[locale_count, config.le_dim], locale_count, config.le_dim, &mut rng), true);
    }

    p.insert("att.wq", glorot(&[h, a], h, a, &mut rng), true);
    p.insert("att.wk", glorot(&[d_att, a], d_att, a, &mut rng), true);
    p.insert("att.b", zeros(&[a]), true);
    p.insert("att.v", glorot(&[a], a, 1, &mut rng), true);
    p.insert("att.p_bias", zeros(&[1]), true);

    p.insert("prenet.fc0.w", glorot(&[m, pre], m, pre, &mut rng), true);
    p.insert("prenet.fc0.b", zeros(&[pre]), true);
    p.insert("prenet.fc1.w", glorot(&[pre, pre], pre, pre, &mut rng), true);
    p.insert("prenet.fc1.b", zeros(&[pre]), true);

    let dec_in = config.decoder_input_dim();
    p.insert("dec.lstm0.w", glorot(&[dec_in, 4 * h], dec_in, 4 * h, &mut rng), true);
    p.insert("dec.lstm0.u", glorot(&[h, 4 * h], h, 4 * h, &mut rng), true);
    p.insert("dec.lstm0.b", forget_biased(4 * h, h), true);
    let l1_in = h + d_att;
    p.insert("dec.lstm1.w", glorot(&[l1_in, 4 * h], l1_in, 4 * h, &mut rng), true);
    p.insert("dec.lstm1.u", glorot(&[h, 4 * h], h, 4 * h, &mut rng), true);
    p.insert("dec.lstm1.b", forget_biased(4 * h, h), true);

    let proj_in = h + d_att;
    p.insert("dec.mel.w", glorot(&[proj_in, r * m], proj_in, r * m, &mut rng), true);
    p.insert("dec.mel.b", zeros(&[r * m]), true);
    p.insert("dec.stop.w", glorot(&[proj_in, r], proj_in, r, &mut rng), true);
    p.insert("dec.stop.b", zeros(&[r]), true);

    let pn = config.postnet_hidden();
    let n_post = config.postnet_conv_layers;
    for i in 0..n_post {
        let c_in = if i == 0 { m } else { pn };
        let c_out = if i + 1 == n_post { m } else { pn };
        let w = if i + 1 == n_post {
            // zero-init last layer: the post-net starts as the identity residual
            zeros(&[k, c_in, c_out])
        } else {
            glorot(&[k, c_in, c_out], k * c_in, k * c_out, &mut rng)
        };
        p.insert(&format!("post.conv{i}.w"), w, true);
        p.insert(&format!("post.conv{i}.b"), zeros(&[c_out]), true);
    }

    if config.use_resvae {
        let chans = config.resvae_layer_channels();
        for (i, &c_out) in chans.iter().enumerate() {
            let c_in = if i == 0 { 1 } else { chans[i - 1] };
            p.insert(
                &format!("rv.conv{i}.w"),
                glorot(&[9, c_in, c_out], 9 * c_in, 9 * c_out, &mut rng),
                true,
            );
            p.insert(&format!("rv.conv{i}.b"), zeros(&[c_out]), true);
            p.insert(&format!("rv.bn{i}.gamma"), ones::<F>(&[c_out]), true);
            p.insert(&format!("rv.bn{i}.beta"), zeros(&[c_out]), true);
            p.insert(&format!("rv.bn{i}.rmean"), zeros(&[1, c_out]), false);
            p.insert(&format!("rv.bn{i}.rvar"), ones::<F>(&[1, c_out]), false);
        }
        let g = config.resvae_gru_hidden();
        let freq_out = forward::resvae_freq_bins(config.n_mels(), chans.len());
        let gru_in = freq_out * chans[chans.len() - 1];
        p.insert("rv.gru.w", glorot(&[gru_in, 3 * g], gru_in, 3 * g, &mut rng), true);
        p.insert("rv.gru.u", glorot(&[g, 3 * g], g, 3 * g, &mut rng), true);
        p.insert("rv.gru.b", zeros(&[3 * g]), true);
        p.insert("rv.fc.w", glorot(&[g, g], g, g, &mut rng), true);
        p.insert("rv.fc.b", zeros(&[g]), true);
        let z = config.resvae_latent_dim;
        p.insert("rv.mu.w", glorot(&[g, z], g, z, &mut rng), true);
        p.insert("rv.mu.b", zeros(&[z]), true);
        p.insert("rv.logvar.w", glorot(&[g, z], g, z, &mut rng), true);
        p.insert("rv.logvar.b", zeros(&[z]), true);
    }

    Ok(Model { config, inventory_size, locale_count, params: p })
}

fn ones<F: Scalar>(shape: &[usize]) -> ndarray::ArrayD<F> {
    ndarray::ArrayD::from_elem(ndarray::IxDyn(shape), F::one())
}

/// LSTM bias with the forget gate set to 1.
fn forget_biased<F: Scalar>(total: usize, h: usize) -> ndarray::ArrayD<F> {
    let mut b = ndarray::ArrayD::<F>::zeros(ndarray::IxDyn(&[total]));
    for i in h..2 * h {
        b[[i]] = F::one();
    }
    b
}

impl<F: Scalar> Model<F> {
    pub fn trainable_count(&self) -> usize {
        self.params.trainable_count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn desk_cfg() -> ModelVariantConfig {
        ModelVariantConfig::res_vae_se_le().with_scale(8)
    }

    #[test]
    fn same_seed_builds_identical_parameters() {
        let a = build_model::<f32>(desk_cfg(), 30, 4, 7).unwrap();
        let b = build_model::<f32>(desk_cfg(), 30, 4, 7).unwrap();
        for ((na, ta), (nb, tb)) in a.params.iter().zip(b.params.iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta.value, tb.value, "{na}");
        }
        let c = build_model::<f32>(desk_cfg(), 30, 4, 8).unwrap();
        let differs = a
            .params
            .iter()
            .zip(c.params.iter())
            .any(|((_, ta), (_, tc))| ta.value != tc.value);
        assert!(differs);
    }

    #[test]
    fn se_without_resvae_fails_to_build() {
        let cfg = ModelVariantConfig { use_se_le: true, use_resvae: false, ..Default::default() };
        assert!(matches!(
            build_model::<f32>(cfg, 10, 2, 0),
            Err(ModelError::Config(ConfigError::SeWithoutResVae))
        ));
    }

    /// Closed-form parameter count for the desk configuration, summed layer
    /// by layer from the architecture definition.
    #[test]
    fn desk_parameter_count_matches_closed_form() {
        let cfg = desk_cfg();
        let (v, l) = (40usize, 4usize);
        let model = build_model::<f64>(cfg.clone(), v, l, 3).unwrap();

        let k = 5;
        let e = 64; // 512 / 8
        let h_enc = 32; // (512 / 8) / 2 per direction
        let d_att = 64 + 32; // encoder out + locale embedding
        let a = 16; // 128 / 8
        let pre = 32; // 256 / 8
        let h = 128; // 1024 / 8
        let m = 80;

        let mut expect = 0usize;
        expect += v * e; // embedding
        expect += (k * e * e + e) + 2 * (k * e * e + e); // 3 encoder convs
        expect += 2 * (e * 4 * h_enc + h_enc * 4 * h_enc + 4 * h_enc); // bi-LSTM
        expect += l * 32; // locale table
        expect += h * a + d_att * a + a + a + 1; // attention
        expect += m * pre + pre + pre * pre + pre; // prenet
        let dec_in = pre + d_att + 128 + 16;
        expect += dec_in * 4 * h + h * 4 * h + 4 * h; // decoder lstm0
        expect += (h + d_att) * 4 * h + h * 4 * h + 4 * h; // decoder lstm1
        expect += (h + d_att) * 160 + 160 + (h + d_att) * 2 + 2; // projections
        let pn = 64; // 512 / 8
        expect += k * m * pn + pn; // postnet first
        expect += 3 * (k * pn * pn + pn); // postnet middle
        expect += k * pn * m + m; // postnet last
        let ch = [4usize, 4, 8, 8, 16, 16];
        let mut c_in = 1usize;
        for &c_out in &ch {
            expect += 9 * c_in * c_out + c_out; // conv
            expect += 2 * c_out; // gamma, beta
            c_in = c_out;
        }
        let g = 16; // gru 128 / 8
        let gru_in = 2 * 16; // two remaining freq bins x 16 channels
        expect += gru_in * 3 * g + g * 3 * g + 3 * g;
        expect += g * g + g; // common fc
        expect += 2 * (g * 16 + 16); // mu and logvar heads

        assert_eq!(model.trainable_count(), expect);
    }
}
