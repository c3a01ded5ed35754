use std::hash::{Hash, Hasher};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::objectives::{
    kl_divergence, sample_prior_ball, sliced_wasserstein_sq_grad, standard_normal, LOGVAR_MAX, LOGVAR_MIN,
};
use super::{AeModel, ArchConfig, Variant, VariantParams};
use crate::error::{Error, Result};
use crate::nn::{grad_check_fn, AdamConfig, AdamState, GradCheck, Grads, Loss, Scalar, Tensor};
use crate::seed;
use crate::volume_data::Patch;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    pub weights: VariantParams,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 16,
            seed: 0,
            adam: AdamConfig::default(),
            weights: VariantParams::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, variant: Variant) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be >= 1".into()));
        }
        if variant == Variant::Swae && self.batch_size < 2 {
            return Err(Error::Config(
                "swae needs batch_size >= 2: the sliced-Wasserstein term compares a batch of codes with prior samples"
                    .into(),
            ));
        }
        let w = &self.weights;
        let a = &self.adam;
        if !(w.beta >= 0.0 && w.lambda >= 0.0 && w.prior_radius > 0.0 && w.n_projections >= 1) {
            return Err(Error::Config(
                "variant weights must be non-negative with radius > 0 and >= 1 projection".into(),
            ));
        }
        if !(a.lr > 0.0 && (0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return Err(Error::Config("invalid optimizer hyperparameters".into()));
        }
        Ok(())
    }
}

/// Loss of one mini-batch with gradients for both networks.
#[derive(Debug, Clone)]
pub struct BatchLoss<T> {
    pub value: f64,
    pub reconstruction: f64,
    pub regularizer: f64,
    pub encoder_grads: Grads<T>,
    pub decoder_grads: Grads<T>,
    /// Hash of all discrete decisions (relu masks, clamps, sort orders).
    pub signature: u64,
}

fn to_f64<T: Scalar>(t: &Tensor<T>) -> Vec<f64> {
    t.data().iter().map(|v| v.f64()).collect()
}

fn from_f64<T: Scalar>(v: &[f64]) -> Tensor<T> {
    Tensor::new(vec![v.len()], v.iter().map(|&x| T::of(x)).collect()).expect("non-empty vector")
}

/// Mean loss over `batch` and its gradients.
///
/// * cae: mean squared reconstruction error.
/// * vae: MSE of the decoded reparameterized sample + `beta` x mean KL.
/// * swae: MSE + `lambda` x squared sliced-Wasserstein distance between
///   the batch codes and an equal-size draw from the ball prior.
pub fn batch_loss<T: Scalar>(model: &AeModel<T>, batch: &[&Patch], seed: u64) -> Result<BatchLoss<T>> {
    let b = batch.len();
    if b == 0 {
        return Err(Error::Contract("empty batch".into()));
    }
    if model.variant == Variant::Swae && b < 2 {
        return Err(Error::Contract("swae loss needs at least two samples".into()));
    }
    let d = model.latent_dim();
    let wts = model.params;
    let inv_b = 1.0 / b as f64;

    let inputs: Vec<Tensor<T>> = batch.iter().map(|p| model.patch_tensor(p)).collect::<Result<_>>()?;
    let enc = inputs
        .par_iter()
        .map(|x| model.encoder.forward_trace(x))
        .collect::<Result<Vec<_>>>()?;
    let heads: Vec<Vec<f64>> = enc.iter().map(|(h, _)| to_f64(h)).collect();

    let mut hasher = std::collections::hash_map::DefaultHasher::new();
    let eps_seed = seed::derive_tag(seed, "eps");
    // z per sample; for the vae also eps and the clamped log-variance
    let mut eps = Vec::new();
    let mut logvar = Vec::new();
    let codes: Vec<Vec<f64>> = match model.variant {
        Variant::Cae | Variant::Swae => heads.clone(),
        Variant::Vae => heads
            .iter()
            .enumerate()
            .map(|(i, h)| {
                let e = standard_normal(d, seed::derive(eps_seed, i as u64));
                let lv: Vec<f64> = h[d..].iter().map(|&v| v.clamp(LOGVAR_MIN, LOGVAR_MAX)).collect();
                for &v in &h[d..] {
                    (LOGVAR_MIN..=LOGVAR_MAX).contains(&v).hash(&mut hasher);
                }
                let z = (0..d).map(|k| h[k] + (0.5 * lv[k]).exp() * e[k]).collect();
                eps.push(e);
                logvar.push(lv);
                z
            })
            .collect(),
    };

    // Backward passes accumulate straight into shared buffers in sample
    // order, which fixes the reduction order.
    let mut decoder_grads = model.decoder.zero_grads();
    let mut dec = Vec::with_capacity(b);
    for (z, p) in codes.iter().zip(batch) {
        let (y, trace) = model.decoder.forward_trace(&from_f64(z))?;
        let target: Vec<T> = p.data.iter().map(|&v| T::of(f64::from(v))).collect();
        let mut loss = Loss::mse(&y, &target)?;
        loss.grad_output.scale(T::of(inv_b));
        let dz = model.decoder.backward_loss(&trace, &loss, &mut decoder_grads)?;
        trace.relu_signature(&model.decoder).hash(&mut hasher);
        dec.push((loss.value.data()[0].f64(), to_f64(&dz)));
    }

    let reconstruction = dec.iter().map(|r| r.0).sum::<f64>() * inv_b;
    let mut dheads: Vec<Vec<f64>> = Vec::with_capacity(b);
    let regularizer = match model.variant {
        Variant::Cae => {
            dheads.extend(dec.iter().map(|r| r.1.clone()));
            0.0
        }
        Variant::Vae => {
            let mut kl = 0.0;
            for (i, h) in heads.iter().enumerate() {
                let dz = &dec[i].1;
                let lv = &logvar[i];
                kl += kl_divergence(&h[..d], lv);
                let mut g = vec![0.0; 2 * d];
                for k in 0..d {
                    g[k] = dz[k] + wts.beta * inv_b * h[k];
                    let inside = (LOGVAR_MIN..=LOGVAR_MAX).contains(&h[d + k]);
                    if inside {
                        let s = (0.5 * lv[k]).exp();
                        g[d + k] = dz[k] * eps[i][k] * 0.5 * s + wts.beta * inv_b * 0.5 * (lv[k].exp() - 1.0);
                    }
                }
                dheads.push(g);
            }
            wts.beta * kl * inv_b
        }
        Variant::Swae => {
            let prior = sample_prior_ball(b, d, wts.prior_radius, seed::derive_tag(seed, "prior"))?;
            let sw = sliced_wasserstein_sq_grad(&codes, &prior, wts.n_projections, seed::derive_tag(seed, "proj"))?;
            sw.signature.hash(&mut hasher);
            for (i, r) in dec.iter().enumerate() {
                dheads.push(r.1.iter().zip(&sw.grad_a[i]).map(|(a, g)| a + wts.lambda * g).collect());
            }
            wts.lambda * sw.value
        }
    };

    let mut encoder_grads = model.encoder.zero_grads();
    for ((_, trace), dh) in enc.iter().zip(&dheads) {
        model.encoder.backward(trace, &from_f64(dh), &mut encoder_grads)?;
        trace.relu_signature(&model.encoder).hash(&mut hasher);
    }

    let value = reconstruction + regularizer;
    if !value.is_finite() {
        return Err(Error::Training(format!(
            "non-finite loss (reconstruction {reconstruction}, regularizer {regularizer})"
        )));
    }
    Ok(BatchLoss {
        value,
        reconstruction,
        regularizer,
        encoder_grads,
        decoder_grads,
        signature: hasher.finish(),
    })
}

/// Finite-difference check of [`batch_loss`] over encoder and decoder
/// parameters (200 coordinates, kink-guarded by the loss signature).
pub fn loss_grad_check(model: &AeModel<f64>, batch: &[&Patch], h: f64, seed: u64) -> Result<GradCheck> {
    let base = batch_loss(model, batch, seed)?;
    let n_enc = model.encoder.params().len();
    let mut params: Vec<Tensor<f64>> = model
        .encoder
        .params()
        .iter()
        .chain(model.decoder.params())
        .cloned()
        .collect();
    let analytic: Vec<Tensor<f64>> = base
        .encoder_grads
        .tensors
        .iter()
        .chain(&base.decoder_grads.tensors)
        .cloned()
        .collect();
    let mut probe = model.clone();
    Ok(grad_check_fn(
        &mut params,
        &analytic,
        h,
        200,
        seed::derive(seed, 3),
        |p| {
            probe.encoder.params_mut().clone_from_slice(&p[..n_enc]);
            probe.decoder.params_mut().clone_from_slice(&p[n_enc..]);
            let l = batch_loss(&probe, batch, seed).expect("perturbed loss stays finite");
            (l.value, l.signature)
        },
    ))
}

/// Deterministic reconstruction MSE averaged over `patches`.
pub fn mean_loss<T: Scalar>(model: &AeModel<T>, patches: &[Patch]) -> Result<f64> {
    let per = patches
        .par_iter()
        .map(|p| {
            let y = model.reconstruct(p)?;
            let target: Vec<T> = p.data.iter().map(|&v| T::of(f64::from(v))).collect();
            Ok(Loss::mse(&y, &target)?.value.data()[0].f64())
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(per.iter().sum::<f64>() / per.len().max(1) as f64)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: AeModel<f32>,
    /// Mean training loss of every epoch.
    pub epoch_losses: Vec<f64>,
}

/// Shuffled mini-batch Adam training in f32. Pure function of its inputs.
pub fn train(variant: Variant, dataset: &[Patch], arch: &ArchConfig, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate(variant)?;
    if dataset.len() < cfg.batch_size {
        return Err(Error::Config(format!(
            "dataset of {} patches is smaller than batch_size {}",
            dataset.len(),
            cfg.batch_size
        )));
    }
    let mut model = AeModel::<f32>::new(variant, arch.clone(), cfg.weights, seed::derive_tag(cfg.seed, "init"))?;
    let mut enc_opt = AdamState::new(cfg.adam, model.encoder.params());
    let mut dec_opt = AdamState::new(cfg.adam, model.decoder.params());
    let shuffle_seed = seed::derive_tag(cfg.seed, "shuffle");
    let batch_seed = seed::derive_tag(cfg.seed, "batch");
    let min_batch = if variant == Variant::Swae { 2 } else { 1 };

    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    for epoch in 0..cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut seed::rng(seed::derive(shuffle_seed, epoch as u64)));
        let (mut total, mut count) = (0.0, 0usize);
        for (bi, idx) in order.chunks(cfg.batch_size).enumerate() {
            if idx.len() < min_batch {
                continue;
            }
            let batch: Vec<&Patch> = idx.iter().map(|&i| &dataset[i]).collect();
            let s = seed::derive(seed::derive(batch_seed, epoch as u64), bi as u64);
            let context = |e: Error| match e {
                Error::Training(m) => Error::Training(format!("epoch {} batch {bi}: {m}", epoch + 1)),
                other => other,
            };
            let loss = batch_loss(&model, &batch, s).map_err(context)?;
            enc_opt
                .step(model.encoder.params_mut(), &loss.encoder_grads.tensors)
                .map_err(context)?;
            dec_opt
                .step(model.decoder.params_mut(), &loss.decoder_grads.tensors)
                .map_err(context)?;
            total += loss.value * batch.len() as f64;
            count += batch.len();
        }
        epoch_losses.push(total / count as f64);
    }
    Ok(TrainOutcome { model, epoch_losses })
}
