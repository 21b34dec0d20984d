//! Central finite-difference check of the network's analytic gradients,
//! in 64-bit arithmetic, on the frame log-likelihood.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::FrameMatrix;
use crate::nn::{backward_pass, forward_pass, ForwardCache, NetworkConfig, NetworkParams, StageConfig};
use crate::train::{frame_log_likelihood, score_gradient};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradCheckConfig {
    pub epsilon: f64,
    pub tolerance: f64,
    /// Magnitudes below this are compared absolutely rather than relatively.
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            epsilon: 1e-4,
            tolerance: 1e-4,
            floor: 1e-6,
        }
    }
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub entries: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// One entry per parameter tensor, then one named `input`.
    pub tensors: Vec<TensorCheck>,
    /// Coordinates whose step had to shrink to avoid a max-pool kink.
    pub narrowed: usize,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.tensors.iter().all(|t| t.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max)
    }
}

fn summarize(name: String, analytic: &[f64], numeric: &[f64], cfg: &GradCheckConfig) -> TensorCheck {
    let mut worst = (0.0, 0);
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let e = relative_error(a, n, cfg.floor);
        if e > worst.0 || e.is_nan() {
            worst = (e, i);
        }
    }
    TensorCheck {
        name,
        entries: analytic.len(),
        max_rel_error: worst.0,
        worst_index: worst.1,
        passed: worst.0 < cfg.tolerance,
    }
}

/// Central difference of `loss` along one coordinate. When a probe point
/// selects different max-pool inputs than the base point the function has a
/// kink inside the interval, so the step is shrunk until it does not.
fn central_difference(
    base: &ForwardCache<f64>,
    eps: f64,
    mut eval: impl FnMut(f64) -> Result<(f64, ForwardCache<f64>)>,
) -> Result<(f64, bool)> {
    let mut h = eps;
    for _ in 0..8 {
        let (up, cu) = eval(h)?;
        let (down, cd) = eval(-h)?;
        if base.same_pool_selection(&cu) && base.same_pool_selection(&cd) {
            return Ok(((up - down) / (2.0 * h), h != eps));
        }
        h /= 10.0;
    }
    let (up, _) = eval(h)?;
    let (down, _) = eval(-h)?;
    Ok(((up - down) / (2.0 * h), true))
}

/// Compares every parameter and input gradient of
/// `log p(target | window)` against central differences. `corrupt` may
/// alter the analytic gradients before comparison.
pub fn check_gradients(
    params: &NetworkParams<f64>,
    window: &FrameMatrix<f64>,
    target: usize,
    cfg: &GradCheckConfig,
    corrupt: Option<&dyn Fn(&mut NetworkParams<f64>)>,
) -> Result<GradCheckReport> {
    if !(cfg.epsilon > 0.0) {
        return Err(Error::invalid("epsilon must be positive"));
    }
    let loss = |p: &NetworkParams<f64>, x: &FrameMatrix<f64>| -> Result<(f64, ForwardCache<f64>)> {
        let (scores, cache) = forward_pass(x, p)?;
        Ok((frame_log_likelihood(&scores, target)?, cache))
    };
    let (scores, cache) = forward_pass(window, params)?;
    let (mut grads, d_input) = backward_pass(&cache, params, &score_gradient(&scores, target))?;
    if let Some(f) = corrupt {
        f(&mut grads);
    }

    let eps = cfg.epsilon;
    let mut probe = params.clone();
    let mut tensors = Vec::new();
    let mut narrowed = 0;
    let infos = params.tensor_infos();
    for (ti, info) in infos.iter().enumerate() {
        let len = params.tensors()[ti].len();
        let mut numeric = vec![0.0; len];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let orig = params.tensors()[ti][i];
            let (d, shrunk) = central_difference(&cache, eps, |h| {
                probe.tensors_mut()[ti][i] = orig + h;
                let r = loss(&probe, window);
                probe.tensors_mut()[ti][i] = orig;
                r
            })?;
            *slot = d;
            narrowed += shrunk as usize;
        }
        tensors.push(summarize(info.name.clone(), grads.tensors()[ti], &numeric, cfg));
    }

    let mut x = window.clone();
    let mut numeric = vec![0.0; x.as_slice().len()];
    for (i, slot) in numeric.iter_mut().enumerate() {
        let orig = window.as_slice()[i];
        let (d, shrunk) = central_difference(&cache, eps, |h| {
            x.as_mut_slice()[i] = orig + h;
            let r = loss(params, &x);
            x.as_mut_slice()[i] = orig;
            r
        })?;
        *slot = d;
        narrowed += shrunk as usize;
    }
    tensors.push(summarize("input".into(), d_input.as_slice(), &numeric, cfg));
    Ok(GradCheckReport { tensors, narrowed })
}

/// A random network with 1 to 3 stages, at most 8 filters per stage and an
/// input window of at most 64 samples.
pub fn random_small_config(rng: &mut impl Rng) -> NetworkConfig {
    loop {
        let num_stages = rng.random_range(1..=3);
        let stages: Vec<StageConfig> = (0..num_stages)
            .map(|_| {
                StageConfig::new(
                    rng.random_range(1..=5),
                    rng.random_range(1..=3),
                    rng.random_range(1..=8),
                    rng.random_range(1..=3),
                )
            })
            .collect();
        let input_window = rng.random_range(8..=64);
        let config = NetworkConfig {
            input_window,
            input_dim: 1,
            stages,
            hidden_units: rng.random_range(1..=8),
            num_classes: rng.random_range(2..=5),
        };
        if config.validate().is_ok() {
            return config;
        }
    }
}

/// One random configuration, seeded parameters, a random window and target.
pub fn random_case(seed: u64) -> (NetworkParams<f64>, FrameMatrix<f64>, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let config = random_small_config(&mut rng);
    let params = NetworkParams::<f64>::init(&config, rng.random()).expect("validated config");
    let window = FrameMatrix::new(
        config.input_window,
        1,
        (0..config.input_window).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .expect("finite window");
    let target = rng.random_range(0..config.num_classes);
    (params, window, target)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_configs_pass() {
        for seed in 0..10 {
            let (params, window, target) = random_case(seed);
            let report = check_gradients(&params, &window, target, &GradCheckConfig::default(), None).unwrap();
            assert!(report.passed(), "seed {seed}: {report:?}");
            assert_eq!(report.tensors.last().unwrap().name, "input");
        }
    }

    #[test]
    fn probes_straddling_a_pooling_kink_are_narrowed() {
        // this case has two pooled conv outputs closer than the default step
        let (params, window, target) = random_case(214);
        let report = check_gradients(&params, &window, target, &GradCheckConfig::default(), None).unwrap();
        assert!(report.narrowed > 0);
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn corrupted_gradient_is_reported() {
        let (params, window, target) = random_case(3);
        let corrupt = |g: &mut NetworkParams<f64>| g.hidden.weights[0] += 0.1;
        let report = check_gradients(&params, &window, target, &GradCheckConfig::default(), Some(&corrupt)).unwrap();
        assert!(!report.passed());
        let failed: Vec<&str> = report.tensors.iter().filter(|t| !t.passed).map(|t| t.name.as_str()).collect();
        assert_eq!(failed, vec!["hidden.weight"]);
    }

    #[test]
    fn random_configs_respect_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            let c = random_small_config(&mut rng);
            assert!((1..=3).contains(&c.stages.len()));
            assert!(c.input_window <= 64);
            assert!(c.stages.iter().all(|s| s.filters <= 8));
            assert!(c.flattened_size().unwrap() > 0);
        }
    }

    #[test]
    fn relative_error_handles_zero() {
        assert_eq!(relative_error(0.0, 0.0, 1e-8), 0.0);
        assert!((relative_error(1.0, 1.1, 1e-8) - 0.1 / 1.1).abs() < 1e-15);
    }
}

