//! Central finite-difference verification of tape gradients.

use alloc::string::String;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{bail, Result};
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::{ParamId, ParamStore};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub coordinates: usize,
    /// Coordinate with the largest error: (parameter, index, analytic, numeric).
    pub worst: Option<(String, usize, f64, f64)>,
}

/// Loss value and tape gradients for a loss built by `loss`.
pub fn analytic_gradients<F>(params: &ParamStore, loss: &F) -> Result<(f64, Gradients)>
where
    F: Fn(&mut Tape<'_>) -> Result<Var>,
{
    let mut tape = Tape::new(params);
    let out = loss(&mut tape)?;
    let value = tape.scalar(out)?;
    Ok((value, tape.backward(out)?))
}

fn loss_value<F>(params: &ParamStore, loss: &F) -> Result<f64>
where
    F: Fn(&mut Tape<'_>) -> Result<Var>,
{
    let mut tape = Tape::new(params);
    let out = loss(&mut tape)?;
    tape.scalar(out)
}

/// Compare `grads` against central differences on up to `samples` randomly
/// chosen trainable coordinates.
pub fn compare_gradients<F>(
    params: &ParamStore,
    loss: &F,
    grads: &Gradients,
    eps: f64,
    samples: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'_>) -> Result<Var>,
{
    if !(1e-6..=1e-4).contains(&eps) {
        bail!(Domain, "finite-difference step {} outside [1e-6, 1e-4]", eps);
    }
    let mut coords: Vec<(ParamId, usize)> = Vec::new();
    for (id, p) in params.iter().filter(|(_, p)| p.trainable) {
        coords.extend((0..p.tensor.len()).map(|k| (id, k)));
    }
    if coords.len() > samples {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut picked: Vec<usize> = rand::seq::index::sample(&mut rng, coords.len(), samples).into_vec();
        picked.sort_unstable();
        coords = picked.into_iter().map(|i| coords[i]).collect();
    }

    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        coordinates: coords.len(),
        worst: None,
    };
    for (id, k) in coords {
        let original = work.get(id).tensor.data()[k];
        work.get_mut(id).tensor.data_mut()[k] = original + eps;
        let plus = loss_value(&work, loss)?;
        work.get_mut(id).tensor.data_mut()[k] = original - eps;
        let minus = loss_value(&work, loss)?;
        work.get_mut(id).tensor.data_mut()[k] = original;

        let numeric = (plus - minus) / (2.0 * eps);
        let analytic = grads.param(id).map_or(0.0, |g| g[k]);
        let denom = analytic.abs().max(numeric.abs()).max(1e-8);
        let err = (analytic - numeric).abs() / denom;
        if report.worst.is_none() || err > report.max_relative_error {
            report.max_relative_error = err;
            report.worst = Some((work.get(id).name.clone(), k, analytic, numeric));
        }
    }
    Ok(report)
}

/// Maximum relative error between tape gradients and central differences.
pub fn grad_check<F>(params: &ParamStore, loss: F, eps: f64, samples: usize, seed: u64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'_>) -> Result<Var>,
{
    let (_, grads) = analytic_gradients(params, &loss)?;
    compare_gradients(params, &loss, &grads, eps, samples, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Activation;
    use crate::tensor::{ParamGroup, Tensor};
    use alloc::vec;

    fn store() -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut s = ParamStore::new();
        s.insert("w1", Tensor::randn(&[4, 6], 0.5, &mut rng), true, ParamGroup::Head).unwrap();
        s.insert("b1", Tensor::randn(&[6], 0.1, &mut rng), true, ParamGroup::Head).unwrap();
        s.insert("w2", Tensor::randn(&[6, 3], 0.5, &mut rng), true, ParamGroup::Head).unwrap();
        s
    }

    fn input() -> Tensor {
        Tensor::from_rows(2, 4, vec![0.3, -1.0, 0.8, 0.05, -0.4, 0.9, 0.2, 1.3]).unwrap()
    }

    #[test]
    fn linear_model_is_near_machine_precision() {
        let s = store();
        let x = input();
        let r = grad_check(
            &s,
            |t| {
                let xi = t.input(&x)?;
                let w = t.param("w1")?;
                let y = t.linear(xi, w, None)?;
                Ok(t.sum(y))
            },
            1e-5,
            500,
            0,
        )
        .unwrap();
        assert!(r.max_relative_error < 1e-8, "{r:?}");
    }

    #[test]
    fn mlp_with_cross_entropy_passes() {
        let s = store();
        let x = input();
        let r = grad_check(
            &s,
            |t| {
                let xi = t.input(&x)?;
                let (w1, b1, w2) = (t.param("w1")?, t.param("b1")?, t.param("w2")?);
                let h = t.linear(xi, w1, Some(b1))?;
                let h = t.activation(h, Activation::Gelu);
                let z = t.linear(h, w2, None)?;
                t.cross_entropy(z, &[2, 0])
            },
            1e-5,
            500,
            0,
        )
        .unwrap();
        assert!(r.max_relative_error < 1e-6, "{r:?}");
    }

    #[test]
    fn corrupted_gradient_is_detected() {
        let s = store();
        let x = input();
        let loss = |t: &mut Tape<'_>| {
            let xi = t.input(&x)?;
            let w = t.param("w1")?;
            let y = t.linear(xi, w, None)?;
            let y = t.activation(y, Activation::Gelu);
            Ok(t.sum(y))
        };
        let (_, mut grads) = analytic_gradients(&s, &loss).unwrap();
        for g in grads.param_mut(ParamId(0)).unwrap().iter_mut() {
            *g *= 1.5;
        }
        let r = compare_gradients(&s, &loss, &grads, 1e-5, 500, 0).unwrap();
        assert!(r.max_relative_error > 1e-2, "{r:?}");
    }

    #[test]
    fn step_outside_range_is_rejected() {
        let s = store();
        let r = grad_check(&s, |t| Ok(t.input_matrix(1, 1, vec![0.0])), 1e-2, 10, 0);
        assert!(matches!(r, Err(crate::Error::Domain(_))));
    }
}
