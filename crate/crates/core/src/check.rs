//! Finite-difference gradient verification.
//!
//! Always run in 64-bit mode: central differences in f32 drown in
//! rounding noise long before they reach the tolerances used here.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// One evaluation of the loss under test: its value, the analytic
/// gradients (aligned with the probed parameter list), and the tape's
/// kink diagnostics.
pub struct Probe<S> {
    pub loss: S,
    pub grads: Vec<Tensor<S>>,
    pub kink_margin: f64,
    pub selection_sig: u64,
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    pub skipped: usize,
}

/// Compares analytic gradients against central finite differences on a
/// sample of parameter coordinates.
///
/// Coordinates whose perturbed evaluations cross a non-differentiable
/// boundary are skipped: either the tape reports a kink margin below
/// `10·eps` (the relu rule) or the forward selections differ from the
/// center evaluation (pooling masks, top-k sets, argmaxes). Relative
/// error uses the denominator `max(|analytic|, |numeric|, 1e-8)`.
pub fn gradient_check<S, F>(
    params: &[Tensor<S>],
    eval: F,
    eps: f64,
    max_coords: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    S: Scalar,
    F: Fn(&[Tensor<S>]) -> Result<Probe<S>>,
{
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(Error::Config(format!(
            "gradient check step {} outside [1e-6, 1e-3]",
            eps
        )));
    }

    let center = eval(params)?;
    let again = eval(params)?;
    if center.loss.as_f64().to_bits() != again.loss.as_f64().to_bits()
        || center.selection_sig != again.selection_sig
    {
        return Err(Error::Contract(
            "loss function is not deterministic: two evaluations differ".to_string(),
        ));
    }
    if center.grads.len() != params.len() {
        return Err(Error::Contract(format!(
            "probe returned {} gradients for {} parameters",
            center.grads.len(),
            params.len()
        )));
    }

    let mut coords: Vec<(usize, usize)> = Vec::new();
    for (pi, p) in params.iter().enumerate() {
        for ei in 0..p.len() {
            coords.push((pi, ei));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    coords.shuffle(&mut rng);
    coords.truncate(max_coords);

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        checked: 0,
        skipped: 0,
    };
    let step = S::of(eps);

    for (pi, ei) in coords {
        let mut shifted = params.to_vec();
        shifted[pi].values_mut()[ei] = params[pi].values()[ei] + step;
        let plus = eval(&shifted)?;
        shifted[pi].values_mut()[ei] = params[pi].values()[ei] - step;
        let minus = eval(&shifted)?;

        // A coordinate is a kink coordinate if its perturbation dragged
        // some input into the kink neighborhood or flipped a selection.
        // A margin that was already small at the center belongs to an
        // input this coordinate does not move; the signature comparison
        // covers the case where it does.
        let margin_dipped = plus.kink_margin.min(minus.kink_margin) < 10.0 * eps
            && center.kink_margin >= 10.0 * eps;
        let selection_flipped = plus.selection_sig != center.selection_sig
            || minus.selection_sig != center.selection_sig;
        if margin_dipped || selection_flipped {
            report.skipped += 1;
            continue;
        }

        let numeric = (plus.loss.as_f64() - minus.loss.as_f64()) / (2.0 * eps);
        let analytic = center.grads[pi].values()[ei].as_f64();
        let denom = analytic.abs().max(numeric.abs()).max(1e-8);
        let rel = (analytic - numeric).abs() / denom;
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
        }
        report.checked += 1;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;

    fn quadratic_probe(params: &[Tensor<f64>]) -> Result<Probe<f64>> {
        // loss = Σ pᵢ² through the tape (row · rowᵀ).
        let mut tape = Tape::new();
        let p = tape.param(0, &params[0]);
        let b = tape.leaf(Tensor::zeros(&[1]));
        let y = tape.linear(p, p, b)?;
        let loss = tape.sum(y);
        let value = tape.value(loss).item();
        let kink_margin = tape.kink_margin();
        let selection_sig = tape.selection_sig();
        let grads = tape.backward(loss)?;
        Ok(Probe {
            loss: value,
            grads: vec![grads.get(0).unwrap().clone()],
            kink_margin,
            selection_sig,
        })
    }

    #[test]
    fn quadratic_loss_checks_tightly() {
        let p = Tensor::from_values(&[1, 4], vec![0.7, -1.3, 2.1, 0.4]).unwrap();
        let report = gradient_check(&[p], quadratic_probe, 1e-5, 16, 7).unwrap();
        assert_eq!(report.checked, 4);
        assert!(report.max_rel_err < 1e-7, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn eps_outside_range_rejected() {
        let p = Tensor::from_values(&[1, 2], vec![1.0, 2.0]).unwrap();
        assert!(gradient_check(&[p.clone()], quadratic_probe, 1e-7, 4, 0).is_err());
        assert!(gradient_check(&[p], quadratic_probe, 1e-2, 4, 0).is_err());
    }

    #[test]
    fn nondeterministic_loss_detected() {
        use std::cell::Cell;
        let calls = Cell::new(0u64);
        let p = Tensor::from_values(&[1], vec![1.0f64]).unwrap();
        let noisy = |params: &[Tensor<f64>]| -> Result<Probe<f64>> {
            calls.set(calls.get() + 1);
            Ok(Probe {
                loss: params[0].values()[0] + calls.get() as f64 * 1e-3,
                grads: vec![Tensor::from_values(&[1], vec![1.0]).unwrap()],
                kink_margin: f64::INFINITY,
                selection_sig: 0,
            })
        };
        assert!(matches!(
            gradient_check(&[p], noisy, 1e-5, 4, 0),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn relu_kink_coordinates_are_skipped() {
        // loss = Σ relu(p): the coordinate sitting almost exactly on the
        // kink must be excluded, the clearly positive one checked.
        let probe = |params: &[Tensor<f64>]| -> Result<Probe<f64>> {
            let mut tape = Tape::new();
            let p = tape.param(0, &params[0]);
            let r = tape.relu(p);
            let loss = tape.sum(r);
            let value = tape.value(loss).item();
            let kink_margin = tape.kink_margin();
            let selection_sig = tape.selection_sig();
            let grads = tape.backward(loss)?;
            Ok(Probe {
                loss: value,
                grads: vec![grads.get(0).unwrap().clone()],
                kink_margin,
                selection_sig,
            })
        };
        let p = Tensor::from_values(&[2], vec![1e-9, 0.5]).unwrap();
        let report = gradient_check(&[p], probe, 1e-5, 8, 3).unwrap();
        assert_eq!(report.skipped, 1);
        assert_eq!(report.checked, 1);
        assert!(report.max_rel_err < 1e-9);
    }
}
