//! Whole-network gradient check against central differences.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::network::{Model, ModelConfig};
use crate::tensor::Tensor;

/// Gradients smaller than this are compared in absolute terms.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckOptions {
    /// Central-difference step.
    pub eps: f64,
    pub tol: f64,
    /// Minimum number of sampled coordinates.
    pub coords: usize,
    pub seed: u64,
    pub batch: usize,
    pub input_size: usize,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            tol: 1e-3,
            coords: 200,
            seed: 0,
            batch: 2,
            input_size: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub coords: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub num_params: usize,
    pub tensors: Vec<TensorCheck>,
    pub max_rel_error: f64,
    /// Tensor holding the worst coordinate.
    pub worst: String,
    pub tol: f64,
}

impl GradcheckReport {
    pub fn coords(&self) -> usize {
        self.tensors.iter().map(|t| t.coords).sum()
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tol
    }
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Hook applied to the analytic gradients before comparison, given each
/// tensor's name. Used to confirm the check catches a broken backward pass.
pub type GradCorruption<'a> = &'a dyn Fn(&str, &mut Tensor<f64>);

/// Checks the tape's gradients of a seeded 64-bit network against central
/// differences of the cross-entropy loss on a random labelled batch.
pub fn gradcheck(
    cfg: &ModelConfig,
    opts: &GradcheckOptions,
    corrupt: Option<GradCorruption>,
) -> Result<GradcheckReport> {
    if !(opts.eps > 0.0 && opts.eps.is_finite()) {
        return Err(Error::config(format!(
            "finite-difference step must be > 0, got {}",
            opts.eps
        )));
    }
    if !(opts.tol > 0.0) || opts.batch == 0 {
        return Err(Error::config("tolerance and batch must be positive"));
    }
    let mut model = Model::<f64>::new(cfg.clone(), opts.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(1));
    let s = opts.input_size;
    let images = Tensor::<f64>::uniform(&[opts.batch, s, s, cfg.in_channels], 0.0, 1.0, &mut rng);
    let labels: Vec<usize> = (0..opts.batch).map(|i| i % cfg.num_classes).collect();

    let mut analytic = model.loss_and_grads(&images, &labels)?.grads;
    let specs = model.layout().specs().to_vec();
    if let Some(f) = corrupt {
        for (spec, g) in specs.iter().zip(&mut analytic) {
            f(&spec.name, g);
        }
    }

    // Every tensor gets an equal share, capped by its size; leftover
    // coordinates go to the largest tensors.
    let per = opts.coords.div_ceil(specs.len()).max(1);
    let mut picks: Vec<Vec<usize>> = specs
        .iter()
        .map(|sp| sample(&mut rng, sp.numel(), per.min(sp.numel())).into_vec())
        .collect();
    let mut total: usize = picks.iter().map(Vec::len).sum();
    let mut by_size: Vec<usize> = (0..specs.len()).collect();
    by_size.sort_by_key(|&i| std::cmp::Reverse(specs[i].numel()));
    'fill: while total < opts.coords {
        let mut grew = false;
        for &i in &by_size {
            if picks[i].len() < specs[i].numel() {
                let taken = &picks[i];
                let next = (0..specs[i].numel())
                    .find(|j| !taken.contains(j))
                    .expect("room left");
                picks[i].push(next);
                total += 1;
                grew = true;
                if total >= opts.coords {
                    break 'fill;
                }
            }
        }
        if !grew {
            break;
        }
    }

    let mut tensors = Vec::with_capacity(specs.len());
    let (mut worst, mut worst_err) = (String::new(), 0.0f64);
    for (ti, spec) in specs.iter().enumerate() {
        let mut max_err = 0.0f64;
        for &j in &picks[ti] {
            let orig = model.params()[ti].data()[j];
            model.param_mut(ti).data_mut()[j] = orig + opts.eps;
            let plus = model.loss(&images, &labels)?;
            model.param_mut(ti).data_mut()[j] = orig - opts.eps;
            let minus = model.loss(&images, &labels)?;
            model.param_mut(ti).data_mut()[j] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::Numeric(format!(
                    "loss not finite while perturbing {}[{j}]",
                    spec.name
                )));
            }
            let numeric = (plus - minus) / (2.0 * opts.eps);
            max_err = max_err.max(relative_error(analytic[ti].data()[j], numeric));
        }
        if max_err > worst_err || worst.is_empty() {
            worst_err = max_err;
            worst = spec.name.clone();
        }
        tensors.push(TensorCheck {
            name: spec.name.clone(),
            coords: picks[ti].len(),
            max_rel_error: max_err,
        });
    }
    Ok(GradcheckReport {
        num_params: model.num_params(),
        tensors,
        max_rel_error: worst_err,
        worst,
        tol: opts.tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_uses_floor() {
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert!((relative_error(1e-9, 0.0) - 1e-3).abs() < 1e-12);
    }

    #[test]
    fn zero_step_is_a_usage_error() {
        let opts = GradcheckOptions {
            eps: 0.0,
            ..GradcheckOptions::default()
        };
        assert!(gradcheck(&ModelConfig::gradcheck_toy(), &opts, None)
            .unwrap_err()
            .is_usage());
    }
}
