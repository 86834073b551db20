use rand::seq::index::sample;

use super::{NetSet, Networks};
use crate::error::{Error, Result};
use crate::seed::rng_for;

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    /// Coordinates sampled per parameter tensor (all of them if the tensor is smaller).
    pub coords_per_tensor: usize,
    /// Central-difference step relative to the coordinate's magnitude.
    pub rel_step: f64,
    /// Magnitude floor for the step, so zero-valued biases get a usable step.
    pub min_scale: f64,
    /// Denominator floor of the relative error.
    pub error_floor: f64,
    /// How often the step may shrink tenfold to step off a kink.
    pub max_kink_retries: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { coords_per_tensor: 20, rel_step: 1e-5, min_scale: 0.1, error_floor: 1e-6, max_kink_retries: 2, seed: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct TensorCheck {
    pub name: String,
    /// Elements in the tensor.
    pub len: usize,
    /// Coordinates drawn for checking.
    pub sampled: usize,
    /// Sampled coordinates actually compared (the rest sat on kinks).
    pub checked: usize,
    /// Step refinements caused by kinks, summed over the checked coordinates.
    pub kink_retries: usize,
    /// Coordinates left out because the loss is not differentiable there.
    pub on_kink: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max)
    }

    pub fn coordinates_checked(&self) -> usize {
        self.tensors.iter().map(|t| t.checked).sum()
    }

    pub fn coordinates_on_kinks(&self) -> usize {
        self.tensors.iter().map(|t| t.on_kink).sum()
    }

    /// The `k` tensors with the largest error, worst first.
    pub fn worst(&self, k: usize) -> Vec<&TensorCheck> {
        let mut v: Vec<&TensorCheck> = self.tensors.iter().collect();
        v.sort_by(|a, b| b.max_rel_error.total_cmp(&a.max_rel_error));
        v.truncate(k);
        v
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error() <= tol
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(
            f,
            "max relative error {:.3e} over {} coordinates ({} skipped on kinks)",
            self.max_rel_error(),
            self.coordinates_checked(),
            self.coordinates_on_kinks()
        )?;
        for t in self.worst(5) {
            writeln!(
                f,
                "  {:<40} rel {:.3e} at [{}] analytic {:+.6e} numeric {:+.6e}",
                t.name, t.max_rel_error, t.worst_index, t.analytic, t.numeric
            )?;
        }
        Ok(())
    }
}

/// Compares analytic gradients of the parameters in `set` against central
/// finite differences.
///
/// `objective(nets, backward)` must run the forward pass, return the scalar
/// loss and, when `backward` is true, accumulate its gradient into the
/// parameter accumulators. It must be a deterministic function of the
/// parameters, which in practice means BN in eval mode.
pub fn gradient_check<F>(
    nets: &mut Networks<f64>,
    set: NetSet,
    mut objective: F,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Networks<f64>, bool) -> Result<f64>,
{
    nets.zero_grad(NetSet::ALL);
    let base = objective(nets, true)?;
    if !base.is_finite() {
        return Err(Error::NonFinite("loss during gradient check".into()));
    }
    let grads: Vec<(String, Vec<f64>)> = nets.params(set).iter().map(|p| (p.name.clone(), p.grad.clone())).collect();

    let mut rng = rng_for(opts.seed, &[0x6c]);
    let mut report = GradCheckReport::default();
    for (name, grad) in grads {
        let n = grad.len();
        let coords: Vec<usize> = if n <= opts.coords_per_tensor {
            (0..n).collect()
        } else {
            sample(&mut rng, n, opts.coords_per_tensor).into_vec()
        };
        let mut check = TensorCheck {
            name: name.clone(),
            len: n,
            sampled: coords.len(),
            checked: 0,
            kink_retries: 0,
            on_kink: 0,
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for i in coords {
            let orig = nets.param_mut(&name).expect("parameter listed above").value[i];
            let mut h = opts.rel_step * orig.abs().max(opts.min_scale);
            let mut eval_at = |v: f64, nets: &mut Networks<f64>| -> Result<f64> {
                nets.param_mut(&name).expect("parameter").value[i] = v;
                let l = objective(nets, false)?;
                if l.is_finite() {
                    Ok(l)
                } else {
                    Err(Error::NonFinite(format!("loss with {name}[{i}] perturbed")))
                }
            };
            // ReLU and max-pool make the loss piecewise smooth. When the two
            // one-sided slopes disagree, the interval straddles a kink and
            // the step shrinks until it no longer does.
            let (mut plus, mut minus);
            let mut retries = 0;
            let mut straddles;
            loop {
                plus = eval_at(orig + h, nets)?;
                minus = eval_at(orig - h, nets)?;
                let (fwd, bwd) = ((plus - base) / h, (base - minus) / h);
                let noise = 8.0 * f64::EPSILON * (plus.abs() + minus.abs() + base.abs()) / h;
                straddles = (fwd - bwd).abs() > 1e-5 * fwd.abs().max(bwd.abs()).max(opts.error_floor) + noise;
                if !straddles || retries == opts.max_kink_retries {
                    break;
                }
                h /= 10.0;
                retries += 1;
            }
            nets.param_mut(&name).expect("parameter").value[i] = orig;
            check.kink_retries += retries;
            if straddles {
                // Sitting on the kink itself: any value between the one-sided
                // slopes is a valid subgradient, so there is nothing to compare.
                check.on_kink += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * h);
            let analytic = grad[i];
            // Rounding in the two loss values alone moves the quotient by up
            // to this much; only the excess counts as error.
            let rounding = 4.0 * f64::EPSILON * (plus.abs() + minus.abs()) / (2.0 * h);
            let diff = ((analytic - numeric).abs() - rounding).max(0.0);
            let rel = diff / analytic.abs().max(numeric.abs()).max(opts.error_floor);
            check.checked += 1;
            if rel >= check.max_rel_error {
                check.max_rel_error = rel;
                check.worst_index = i;
                check.analytic = analytic;
                check.numeric = numeric;
            }
        }
        report.tensors.push(check);
    }
    Ok(report)
}
