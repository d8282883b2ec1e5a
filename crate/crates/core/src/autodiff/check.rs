//! Finite-difference verification of analytic gradients.
//!
//! The harness samples parameter coordinates, evaluates the loss at `w ± eps`
//! (central differences) and compares against the analytic gradient computed
//! by the caller's production path. Sampling is stratified per parameter
//! tensor so a corrupted layer cannot hide behind the others, and the report
//! names the worst offender.
//!
//! ReLU networks are only piecewise smooth, which breaks naive finite
//! differences in two ways. A kink strictly inside the stencil makes the two
//! central estimates (full step and step/8) disagree, so such coordinates are
//! skipped. A kink exactly at the evaluation point is worse: the central
//! difference returns the average of the one-sided slopes at every step size,
//! and this genuinely happens here because biases start at zero and a conv
//! over an all-dead patch outputs exactly zero. At those points any value
//! between the one-sided slopes is a valid subgradient, so a coordinate also
//! passes when the analytic value lies inside the forward/backward difference
//! hull. Neither the skip nor the hull decision widens with the analytic
//! error, so a corrupted gradient cannot hide behind them.

use rand::seq::index::sample as index_sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::model::{GradSet, ModelParams};
use crate::scalar::Scalar;

#[derive(Clone, Debug)]
pub struct FdSettings {
    /// Base step; the actual step is `eps * max(1, |w|)`.
    pub eps: f64,
    /// Maximum relative error an entry may show before the check fails.
    pub tol: f64,
    /// Coordinates sampled per parameter tensor.
    pub samples_per_layer: usize,
    pub seed: u64,
}

impl Default for FdSettings {
    fn default() -> Self {
        // tol leaves headroom for sub-skip-gate kink pollution, still three
        // orders of magnitude below a genuinely wrong gradient
        Self { eps: 1e-6, tol: 5e-4, samples_per_layer: 5, seed: 0x5eed }
    }
}

#[derive(Clone, Debug)]
pub struct FdLayerReport {
    pub name: String,
    pub checked: usize,
    pub skipped: usize,
    pub at_kink: usize,
    pub max_rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct FdReport {
    pub passed: bool,
    pub tol: f64,
    /// Coordinates actually compared (kink-straddling samples excluded).
    pub checked: usize,
    /// Coordinates skipped because the two step sizes disagreed.
    pub skipped: usize,
    /// Coordinates accepted through the one-sided difference hull.
    pub at_kink: usize,
    pub max_rel_err: f64,
    pub worst_layer: String,
    pub layers: Vec<FdLayerReport>,
}

/// `rel_err = |analytic - fd| / max(|analytic|, |fd|, 1e-8)`.
fn relative_error(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-8)
}

pub fn finite_difference_check<S, F>(
    params: &ModelParams<S>,
    analytic: &GradSet<S>,
    mut loss: F,
    settings: &FdSettings,
) -> Result<FdReport>
where
    S: Scalar,
    F: FnMut(&ModelParams<S>) -> Result<S>,
{
    let mut work = params.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let mut layers = Vec::with_capacity(params.entries().len());
    let mut total_checked = 0usize;
    let mut total_skipped = 0usize;
    let mut total_at_kink = 0usize;
    let mut worst = (0.0f64, String::new());
    let f0 = loss(&work)?.to_f64c();

    for (entry_idx, entry) in params.entries().iter().enumerate() {
        let len = entry.tensor.len();
        let take = settings.samples_per_layer.min(len);
        let picks = index_sample(&mut rng, len, take);
        let mut layer_max = 0.0f64;
        let mut layer_checked = 0usize;
        let mut layer_skipped = 0usize;
        let mut layer_at_kink = 0usize;
        for idx in picks {
            let w0 = params.entries()[entry_idx].tensor.data()[idx];
            let base = settings.eps * w0.to_f64c().abs().max(1.0);

            // one-sided differences at `step`, as (backward, forward)
            let mut sided = |step: f64| -> Result<(f64, f64)> {
                let s = S::from_f64c(step);
                work.entries_mut()[entry_idx].tensor.data_mut()[idx] = w0 + s;
                let plus = loss(&work)?.to_f64c();
                work.entries_mut()[entry_idx].tensor.data_mut()[idx] = w0 - s;
                let minus = loss(&work)?.to_f64c();
                work.entries_mut()[entry_idx].tensor.data_mut()[idx] = w0;
                Ok(((f0 - minus) / step, (plus - f0) / step))
            };
            let (bwd_wide, fwd_wide) = sided(base)?;
            let (bwd, fwd) = sided(base / 8.0)?;
            // a kink strictly between the two stencils makes the central
            // estimates disagree; no information either way, so skip
            let central_wide = 0.5 * (bwd_wide + fwd_wide);
            let central = 0.5 * (bwd + fwd);
            if relative_error(central_wide, central) > settings.tol {
                layer_skipped += 1;
                continue;
            }

            let an = analytic.by_entry[entry_idx][idx].to_f64c();
            let mut rel = relative_error(an, central);
            layer_checked += 1;
            if rel > settings.tol {
                // a kink exactly at w0 splits the one-sided slopes; any value
                // between them is a valid subgradient, so measure the error
                // against the closest point of that interval instead
                let clamped = an.clamp(bwd.min(fwd), bwd.max(fwd));
                let hull_rel = relative_error(an, clamped);
                if hull_rel <= settings.tol {
                    layer_at_kink += 1;
                    continue;
                }
                rel = rel.min(hull_rel);
            }
            layer_max = layer_max.max(rel);
            if rel > worst.0 {
                worst = (rel, entry.name.clone());
            }
        }
        total_checked += layer_checked;
        total_skipped += layer_skipped;
        total_at_kink += layer_at_kink;
        layers.push(FdLayerReport {
            name: entry.name.clone(),
            checked: layer_checked,
            skipped: layer_skipped,
            at_kink: layer_at_kink,
            max_rel_err: layer_max,
        });
    }

    Ok(FdReport {
        passed: worst.0 < settings.tol,
        tol: settings.tol,
        checked: total_checked,
        skipped: total_skipped,
        at_kink: total_at_kink,
        max_rel_err: worst.0,
        worst_layer: worst.1,
        layers,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Graph;
    use crate::model::{build_cs_sunet, build_pixel_nn, model_graph, ModelConfig, PixelNnConfig};
    use crate::tensor::TensorBase;
    use rand::RngExt;

    /// Analytic gradients for a quadratic loss are exact, so the check must
    /// pass at a tight tolerance.
    #[test]
    fn quadratic_loss_passes() {
        let cfg = PixelNnConfig { in_channels: 2, hidden_units: vec![3] };
        let params = build_pixel_nn::<f64>(&cfg, 7).unwrap();
        // loss = sum over entries of sum(w^2); gradient 2w
        let mut analytic = GradSet::zeros_like(&params);
        for (gi, e) in params.entries().iter().enumerate() {
            for (j, w) in e.tensor.iter().enumerate() {
                analytic.by_entry[gi][j] = 2.0 * *w;
            }
        }
        let loss = |p: &ModelParams<f64>| -> crate::error::Result<f64> {
            Ok(p.entries().iter().map(|e| e.tensor.iter().map(|w| w * w).sum::<f64>()).sum())
        };
        let report = finite_difference_check(&params, &analytic, loss, &FdSettings::default()).unwrap();
        assert!(report.passed, "max rel err {} in {}", report.max_rel_err, report.worst_layer);
        assert!(report.max_rel_err < 1e-7);
    }

    fn unet_loss_and_grads(
        params: &ModelParams<f64>,
        input: &TensorBase<f64>,
    ) -> (f64, GradSet<f64>) {
        let mut g = Graph::new();
        let h = model_graph(&mut g, params, input.clone()).unwrap();
        let root = g.sum_all(h.output).unwrap();
        // squared sum keeps the loss nonlinear in the output
        let root = g.square_error(root, 1.25).unwrap();
        g.backward(root).unwrap();
        let mut grads = GradSet::zeros_like(params);
        for (i, pid) in h.params.iter().enumerate() {
            if let Some(gv) = g.grad(*pid) {
                grads.by_entry[i].copy_from_slice(gv);
            }
        }
        (g.value(root).item().unwrap(), grads)
    }

    #[test]
    fn unet_graph_gradients_match_finite_differences() {
        let cfg = ModelConfig { in_channels: 3, hidden_units: [4, 6, 8] };
        let params = build_cs_sunet::<f64>(&cfg, 3).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let data: Vec<f64> = (0..3 * 8 * 8).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
        let input = TensorBase::new(vec![3, 8, 8], data).unwrap();

        let (_, analytic) = unet_loss_and_grads(&params, &input);
        let loss = |p: &ModelParams<f64>| -> crate::error::Result<f64> {
            Ok(unet_loss_and_grads(p, &input).0)
        };
        let report = finite_difference_check(&params, &analytic, loss, &FdSettings::default()).unwrap();
        assert!(report.checked >= 80, "only {} coordinates compared", report.checked);
        assert!(report.passed, "max rel err {} in {}", report.max_rel_err, report.worst_layer);
    }

    #[test]
    fn corrupted_layer_is_detected_and_named() {
        let cfg = ModelConfig { in_channels: 3, hidden_units: [4, 6, 8] };
        let params = build_cs_sunet::<f64>(&cfg, 3).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(6);
        let data: Vec<f64> = (0..3 * 8 * 8).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
        let input = TensorBase::new(vec![3, 8, 8], data).unwrap();

        let (_, mut analytic) = unet_loss_and_grads(&params, &input);
        // double one layer's gradient: fault injection
        let victim = params.entries().iter().position(|e| e.name == "up1.conv3x3.weight").unwrap();
        for v in &mut analytic.by_entry[victim] {
            *v *= 2.0;
        }
        let loss = |p: &ModelParams<f64>| -> crate::error::Result<f64> {
            Ok(unet_loss_and_grads(p, &input).0)
        };
        let report = finite_difference_check(&params, &analytic, loss, &FdSettings::default()).unwrap();
        assert!(!report.passed);
        assert_eq!(report.worst_layer, "up1.conv3x3.weight");
    }
}
