use rand::seq::index::sample;

use super::{Sequential, Tensor};
use crate::seed;

/// Outcome of a finite-difference comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates whose perturbation changed a discrete decision (relu
    /// mask, sort order) and were therefore not compared.
    pub skipped: usize,
}

/// Gradients below this magnitude are compared in absolute terms.
const REL_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares `analytic` against central differences of `eval` at `params`.
///
/// `eval` returns the loss and a signature of its discrete decisions;
/// coordinates where the signature differs between the base point and
/// either perturbation are skipped and replaced. At most `n_coords`
/// coordinates are compared (all of them when there are fewer).
pub fn grad_check_fn<F>(
    params: &mut [Tensor<f64>],
    analytic: &[Tensor<f64>],
    h: f64,
    n_coords: usize,
    seed: u64,
    mut eval: F,
) -> GradCheck
where
    F: FnMut(&[Tensor<f64>]) -> (f64, u64),
{
    let sizes: Vec<usize> = params.iter().map(Tensor::len).collect();
    let total: usize = sizes.iter().sum();
    let locate = |mut flat: usize| {
        for (t, &n) in sizes.iter().enumerate() {
            if flat < n {
                return (t, flat);
            }
            flat -= n;
        }
        unreachable!()
    };
    // visit every coordinate in a seeded random order; stop once enough compared
    let order = sample(&mut seed::rng(seed), total, total).into_vec();
    let (_, base_sig) = eval(params);
    let mut report = GradCheck {
        max_rel_error: 0.0,
        checked: 0,
        skipped: 0,
    };
    for flat in order {
        if report.checked >= n_coords {
            break;
        }
        let (t, i) = locate(flat);
        let orig = params[t].data()[i];
        params[t].data_mut()[i] = orig + h;
        let (plus, sig_plus) = eval(params);
        params[t].data_mut()[i] = orig - h;
        let (minus, sig_minus) = eval(params);
        params[t].data_mut()[i] = orig;
        if sig_plus != base_sig || sig_minus != base_sig {
            report.skipped += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * h);
        let err = relative_error(analytic[t].data()[i], numeric);
        report.max_rel_error = report.max_rel_error.max(err);
        report.checked += 1;
    }
    report
}

impl Sequential<f64> {
    /// Analytic parameter gradients of `<r, f(x)>` for a fixed random `r`.
    pub fn probe_gradients(&self, input: &Tensor<f64>, seed: u64) -> crate::Result<(Tensor<f64>, Vec<Tensor<f64>>)> {
        use rand::Rng as _;
        let mut rng = seed::rng(seed);
        let shape = self.output_shape().to_vec();
        let n = shape.iter().product();
        let r = Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
        let (_, trace) = self.forward_trace(input)?;
        let mut grads = self.zero_grads();
        self.backward(&trace, &r, &mut grads)?;
        Ok((r, grads.tensors))
    }

    /// Max relative error between analytic and central-difference gradients
    /// of a random linear probe of the output, over at least 200 parameter
    /// coordinates (or all of them).
    pub fn grad_check(&self, input: &Tensor<f64>, h: f64, seed: u64) -> crate::Result<GradCheck> {
        let (probe, analytic) = self.probe_gradients(input, seed)?;
        Ok(self.grad_check_against(input, &probe, &analytic, h, seed))
    }

    /// Like [`Self::grad_check`] with caller-supplied analytic gradients.
    pub fn grad_check_against(
        &self,
        input: &Tensor<f64>,
        probe: &Tensor<f64>,
        analytic: &[Tensor<f64>],
        h: f64,
        seed: u64,
    ) -> GradCheck {
        let mut net = self.clone();
        let mut params = net.params().to_vec();
        grad_check_fn(&mut params, analytic, h, 200, seed::derive(seed, 1), |p| {
            net.params_mut().clone_from_slice(p);
            let (y, trace) = net.forward_trace(input).expect("shapes fixed at build");
            (y.dot(probe), trace.relu_signature(&net))
        })
    }

    /// Like [`Self::grad_check`] for the gradient with respect to the input.
    pub fn input_grad_check(&self, input: &Tensor<f64>, h: f64, seed: u64) -> crate::Result<GradCheck> {
        let (probe, _) = self.probe_gradients(input, seed)?;
        let (_, trace) = self.forward_trace(input)?;
        let mut grads = self.zero_grads();
        let analytic = self.backward(&trace, &probe, &mut grads)?;
        let mut x = vec![input.clone()];
        Ok(grad_check_fn(&mut x, &[analytic], h, 200, seed::derive(seed, 2), |p| {
            let (y, trace) = self.forward_trace(&p[0]).expect("shapes fixed at build");
            (y.dot(&probe), trace.relu_signature(self))
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::super::LayerSpec;
    use super::*;
    use rand::Rng as _;

    fn input(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = seed::rng(seed);
        let n = shape.iter().product();
        // keep magnitudes away from zero so relus sit clear of their kink
        let data = (0..n)
            .map(|_| {
                let v: f64 = rng.gen_range(0.1..1.0);
                if rng.gen::<bool>() {
                    v
                } else {
                    -v
                }
            })
            .collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn linear_model_is_exact() {
        let net = Sequential::<f64>::new(
            &[12],
            vec![
                LayerSpec::Dense {
                    in_features: 12,
                    out_features: 7,
                },
                LayerSpec::Dense {
                    in_features: 7,
                    out_features: 3,
                },
            ],
            4,
        )
        .unwrap();
        let r = net.grad_check(&input(&[12], 1), 1e-4, 9).unwrap();
        assert!(r.max_rel_error < 1e-9, "{r:?}");
        assert_eq!(r.checked, net.n_params());
    }

    fn conv_relu_dense() -> Sequential<f64> {
        Sequential::new(
            &[2, 5, 5, 5],
            vec![
                LayerSpec::Conv3d {
                    in_channels: 2,
                    out_channels: 3,
                    kernel: 3,
                    stride: 2,
                    padding: 1,
                },
                LayerSpec::Relu,
                LayerSpec::Flatten,
                LayerSpec::Dense {
                    in_features: 81,
                    out_features: 4,
                },
            ],
            11,
        )
        .unwrap()
    }

    #[test]
    fn conv_relu_dense_within_tolerance() {
        let net = conv_relu_dense();
        let r = net.grad_check(&input(&[2, 5, 5, 5], 2), 1e-4, 3).unwrap();
        assert!(r.max_rel_error < 1e-5, "{r:?}");
        assert!(r.checked >= 200);
    }

    #[test]
    fn corrupted_gradient_is_detected() {
        let net = Sequential::<f64>::new(
            &[6],
            vec![
                LayerSpec::Dense {
                    in_features: 6,
                    out_features: 2,
                },
                LayerSpec::Relu,
            ],
            5,
        )
        .unwrap();
        let x = input(&[6], 3);
        let (probe, mut analytic) = net.probe_gradients(&x, 8).unwrap();
        let (i, _) = analytic[0]
            .data()
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
            .unwrap();
        assert!(analytic[0].data()[i].abs() > 1e-3);
        analytic[0].data_mut()[i] *= 1.1;
        let r = net.grad_check_against(&x, &probe, &analytic, 1e-4, 8);
        assert!(r.max_rel_error > 1e-2, "{r:?}");
    }
}
