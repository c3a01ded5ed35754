//! Conventional, variational and sliced-Wasserstein autoencoders sharing one
//! encoder/decoder topology, plus encoding of patches into the latent
//! (representation) space.

mod latents;
mod objectives;
mod train;

pub use latents::{read_latents_csv, write_latents_csv, LatentRow};
pub use objectives::{
    kl_divergence, kl_divergence_grad, reparameterize, sample_prior_ball, sliced_wasserstein_sq,
    sliced_wasserstein_sq_grad, standard_normal, SlicedWasserstein, LOGVAR_MAX, LOGVAR_MIN,
};
pub use train::{batch_loss, loss_grad_check, mean_loss, train, BatchLoss, TrainConfig, TrainOutcome};

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{read_networks, write_networks, LayerSpec, Scalar, Sequential, Tensor};
use crate::seed;
use crate::volume_data::Patch;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Cae,
    Vae,
    Swae,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Cae, Variant::Vae, Variant::Swae];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Cae => "cae",
            Variant::Vae => "vae",
            Variant::Swae => "swae",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cae" => Ok(Variant::Cae),
            "vae" => Ok(Variant::Vae),
            "swae" => Ok(Variant::Swae),
            other => Err(Error::Config(format!(
                "unknown model variant {other:?} (expected cae, vae or swae)"
            ))),
        }
    }
}

/// Encoder/decoder topology: zero-pad the patch to `padded_side`, then one
/// stride-2 conv + relu stage per entry of `channels`, flatten, dense.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    pub patch_side: usize,
    pub padded_side: usize,
    pub channels: Vec<usize>,
    pub latent_dim: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            patch_side: 30,
            padded_side: 32,
            channels: vec![8, 16, 32],
            latent_dim: 128,
        }
    }
}

impl ArchConfig {
    fn bottleneck_side(&self) -> Result<usize> {
        let stages = self.channels.len() as u32;
        let div = 1usize << stages;
        if self.latent_dim == 0 || self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::Config("latent_dim and every channel count must be >= 1".into()));
        }
        if self.padded_side < self.patch_side
            || !(self.padded_side - self.patch_side).is_multiple_of(2)
            || !self.padded_side.is_multiple_of(div)
        {
            return Err(Error::Config(format!(
                "padded side {} must exceed patch side {} by an even amount and be divisible by {div}",
                self.padded_side, self.patch_side
            )));
        }
        Ok(self.padded_side / div)
    }

    pub fn encoder_specs(&self, out_features: usize) -> Result<Vec<LayerSpec>> {
        let s = self.bottleneck_side()?;
        let pad = (self.padded_side - self.patch_side) / 2;
        let mut specs = vec![LayerSpec::Pad3d { low: pad, high: pad }];
        let mut c_in = 1;
        for &c in &self.channels {
            specs.push(LayerSpec::Conv3d {
                in_channels: c_in,
                out_channels: c,
                kernel: 3,
                stride: 2,
                padding: 1,
            });
            specs.push(LayerSpec::Relu);
            c_in = c;
        }
        specs.push(LayerSpec::Flatten);
        specs.push(LayerSpec::Dense {
            in_features: c_in * s.pow(3),
            out_features,
        });
        Ok(specs)
    }

    pub fn decoder_specs(&self) -> Result<Vec<LayerSpec>> {
        let s = self.bottleneck_side()?;
        let pad = (self.padded_side - self.patch_side) / 2;
        let last = *self.channels.last().unwrap();
        let mut specs = vec![
            LayerSpec::Dense {
                in_features: self.latent_dim,
                out_features: last * s.pow(3),
            },
            LayerSpec::Relu,
            LayerSpec::Reshape {
                shape: vec![last, s, s, s],
            },
        ];
        let mut outs: Vec<usize> = self.channels.iter().rev().skip(1).copied().collect();
        outs.push(1);
        let mut c_in = last;
        for (i, &c) in outs.iter().enumerate() {
            specs.push(LayerSpec::Conv3dTransposed {
                in_channels: c_in,
                out_channels: c,
                kernel: 3,
                stride: 2,
                padding: 1,
                output_padding: 1,
            });
            if i + 1 < outs.len() {
                specs.push(LayerSpec::Relu);
            }
            c_in = c;
        }
        if pad > 0 {
            specs.push(LayerSpec::Crop3d { low: pad, high: pad });
        }
        Ok(specs)
    }
}

/// Variant-specific regularization weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VariantParams {
    /// Weight of the per-sample KL term (vae).
    pub beta: f64,
    /// Weight of the sliced-Wasserstein term (swae).
    pub lambda: f64,
    pub n_projections: usize,
    pub prior_radius: f64,
}

impl Default for VariantParams {
    fn default() -> Self {
        VariantParams {
            beta: 1e-2,
            lambda: 10.0,
            n_projections: 50,
            prior_radius: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ModelMeta {
    variant: Variant,
    arch: ArchConfig,
    params: VariantParams,
}

/// One trained (or freshly initialized) autoencoder.
#[derive(Debug, Clone, PartialEq)]
pub struct AeModel<T> {
    pub variant: Variant,
    pub arch: ArchConfig,
    pub params: VariantParams,
    pub encoder: Sequential<T>,
    pub decoder: Sequential<T>,
}

/// Representation of one patch.
pub type LatentVec = Vec<f32>;

impl<T: Scalar> AeModel<T> {
    pub fn new(variant: Variant, arch: ArchConfig, params: VariantParams, seed: u64) -> Result<Self> {
        let width = match variant {
            Variant::Vae => 2 * arch.latent_dim,
            Variant::Cae | Variant::Swae => arch.latent_dim,
        };
        let side = arch.patch_side;
        let encoder = Sequential::new(
            &[1, side, side, side],
            arch.encoder_specs(width)?,
            seed::derive_tag(seed, "encoder"),
        )?;
        let decoder = Sequential::new(
            &[arch.latent_dim],
            arch.decoder_specs()?,
            seed::derive_tag(seed, "decoder"),
        )?;
        if decoder.output_shape() != [1, side, side, side] {
            return Err(Error::Config(format!(
                "decoder produces {:?}, expected a {side}^3 patch",
                decoder.output_shape()
            )));
        }
        Ok(AeModel {
            variant,
            arch,
            params,
            encoder,
            decoder,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.arch.latent_dim
    }

    /// Width of the raw encoder output (twice the latent size for the vae).
    pub fn encoder_width(&self) -> usize {
        self.encoder.output_shape()[0]
    }

    pub fn cast<U: Scalar>(&self) -> AeModel<U> {
        AeModel {
            variant: self.variant,
            arch: self.arch.clone(),
            params: self.params,
            encoder: self.encoder.cast(),
            decoder: self.decoder.cast(),
        }
    }

    pub fn patch_tensor(&self, patch: &Patch) -> Result<Tensor<T>> {
        let s = self.arch.patch_side;
        if patch.side != s {
            return Err(Error::shape(
                1,
                format!("model expects {s}^3 patches, got side {}", patch.side),
            ));
        }
        Tensor::new(
            vec![1, s, s, s],
            patch.data.iter().map(|&v| T::of(f64::from(v))).collect(),
        )
    }

    /// Latent representation: the encoder output for cae/swae, the posterior
    /// mean for the vae.
    pub fn encode(&self, patch: &Patch) -> Result<LatentVec> {
        let h = self.encoder.forward(&self.patch_tensor(patch)?)?;
        Ok(h.data()[..self.latent_dim()].iter().map(|v| v.f64() as f32).collect())
    }

    /// Like [`Self::encode`] but draws a posterior sample for the vae.
    pub fn encode_sampled(&self, patch: &Patch, seed: u64) -> Result<LatentVec> {
        if self.variant != Variant::Vae {
            return self.encode(patch);
        }
        let h = self.encoder.forward(&self.patch_tensor(patch)?)?;
        let h: Vec<f64> = h.data().iter().map(|v| v.f64()).collect();
        let d = self.latent_dim();
        let (z, _) = reparameterize(&h[..d], &h[d..], seed);
        Ok(z.into_iter().map(|v| v as f32).collect())
    }

    /// Encodes every patch; `sample_seed` switches the vae to posterior sampling.
    pub fn encode_all(&self, patches: &[Patch], sample_seed: Option<u64>) -> Result<Vec<LatentVec>> {
        patches
            .par_iter()
            .enumerate()
            .map(|(i, p)| match sample_seed {
                Some(s) => self.encode_sampled(p, seed::derive(s, i as u64)),
                None => self.encode(p),
            })
            .collect()
    }

    /// Decoder output for a latent vector.
    pub fn decode(&self, z: &[f64]) -> Result<Tensor<T>> {
        let z = Tensor::new(vec![z.len()], z.iter().map(|&v| T::of(v)).collect())?;
        self.decoder.forward(&z)
    }

    /// Deterministic reconstruction (vae decodes its mean).
    pub fn reconstruct(&self, patch: &Patch) -> Result<Tensor<T>> {
        let z: Vec<f64> = self.encode(patch)?.iter().map(|&v| f64::from(v)).collect();
        self.decode(&z)
    }
}

/// The 30^3-patch model with 8/16/32-channel stride-2 stages.
pub fn build_default_model(variant: Variant, latent_dim: usize, patch_side: usize, seed: u64) -> Result<AeModel<f32>> {
    if latent_dim == 0 {
        return Err(Error::Config("latent_dim must be >= 1".into()));
    }
    // smallest multiple of 8 that holds the patch with an even pad
    let mut padded = patch_side.div_ceil(8) * 8;
    if !(padded - patch_side).is_multiple_of(2) {
        padded += 8;
    }
    let arch = ArchConfig {
        patch_side,
        padded_side: padded,
        channels: vec![8, 16, 32],
        latent_dim,
    };
    AeModel::new(variant, arch, VariantParams::default(), seed)
}

impl AeModel<f32> {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let meta = serde_json::to_value(ModelMeta {
            variant: self.variant,
            arch: self.arch.clone(),
            params: self.params,
        })
        .expect("meta serializes");
        write_networks(path, &meta, &[("encoder", &self.encoder), ("decoder", &self.decoder)])
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (meta, nets) = read_networks(path)?;
        let meta: ModelMeta =
            serde_json::from_value(meta).map_err(|e| Error::format(14, format!("bad model metadata: {e}")))?;
        let mut it = nets.into_iter();
        match (it.next(), it.next(), it.next()) {
            (Some((en, encoder)), Some((dn, decoder)), None) if en == "encoder" && dn == "decoder" => {
                let fresh = AeModel::<f32>::new(meta.variant, meta.arch.clone(), meta.params, 0)?;
                if fresh.encoder.specs() != encoder.specs() || fresh.decoder.specs() != decoder.specs() {
                    return Err(Error::format(14, "stored layers disagree with the stored architecture"));
                }
                Ok(AeModel {
                    variant: meta.variant,
                    arch: meta.arch,
                    params: meta.params,
                    encoder,
                    decoder,
                })
            }
            _ => Err(Error::format(14, "model file must hold an encoder and a decoder")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    fn random_patch(side: usize, seed: u64) -> Patch {
        let mut rng = seed::rng(seed);
        Patch::new(side, (0..side.pow(3)).map(|_| rng.gen::<f32>()).collect()).unwrap()
    }

    #[test]
    fn default_encoder_widths() {
        let cae = build_default_model(Variant::Cae, 128, 30, 1).unwrap();
        assert_eq!(cae.encoder_width(), 128);
        let vae = build_default_model(Variant::Vae, 128, 30, 1).unwrap();
        assert_eq!(vae.encoder_width(), 256);
        assert_eq!(cae.arch.padded_side, 32);
    }

    #[test]
    fn default_layout_matches_description() {
        let m = build_default_model(Variant::Swae, 128, 30, 1).unwrap();
        let specs = m.encoder.specs();
        assert_eq!(specs[0], LayerSpec::Pad3d { low: 1, high: 1 });
        assert_eq!(
            specs.last().unwrap(),
            &LayerSpec::Dense {
                in_features: 2048,
                out_features: 128
            }
        );
        assert_eq!(
            m.decoder.specs().last().unwrap(),
            &LayerSpec::Crop3d { low: 1, high: 1 }
        );
    }

    #[test]
    fn reconstruction_has_patch_shape() {
        for v in Variant::ALL {
            let m = build_default_model(v, 128, 30, 2).unwrap();
            let r = m.reconstruct(&random_patch(30, 3)).unwrap();
            assert_eq!(r.shape(), &[1, 30, 30, 30]);
            assert!(r.is_finite());
        }
    }

    #[test]
    fn encoding_is_deterministic_for_every_variant() {
        let p = random_patch(30, 4);
        for v in Variant::ALL {
            let m = build_default_model(v, 128, 30, 5).unwrap();
            let a = m.encode(&p).unwrap();
            assert_eq!(a.len(), 128);
            assert_eq!(a, m.encode(&p).unwrap());
        }
    }

    #[test]
    fn zero_weights_encode_to_zero() {
        let mut m = build_default_model(Variant::Vae, 128, 30, 6).unwrap();
        for t in m.encoder.params_mut() {
            t.data_mut().fill(0.0);
        }
        assert!(m.encode(&random_patch(30, 7)).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn wrong_patch_side_is_shape_error() {
        let m = build_default_model(Variant::Cae, 16, 30, 1).unwrap();
        assert!(matches!(m.encode(&random_patch(20, 1)), Err(Error::Shape { .. })));
    }

    #[test]
    fn sampled_vae_encoding_differs_from_mean() {
        let m = build_default_model(Variant::Vae, 16, 30, 1).unwrap();
        let p = random_patch(30, 2);
        assert_ne!(m.encode_sampled(&p, 3).unwrap(), m.encode(&p).unwrap());
        assert_eq!(m.encode_sampled(&p, 3).unwrap(), m.encode_sampled(&p, 3).unwrap());
    }

    #[test]
    fn model_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.rsmdl");
        let m = build_default_model(Variant::Swae, 32, 30, 9).unwrap();
        m.save(&path).unwrap();
        let back = AeModel::load(&path).unwrap();
        assert_eq!(back, m);
    }
}
