//! Variance-preserving noise schedules and the forward noising process.
//!
//! A schedule is a pair of tables `alpha[t]`, `sigma[t]` for integer
//! `t in [0, T)` satisfying `alpha^2 + sigma^2 = 1`, so the noising map
//! `z_t = alpha_t * x + sigma_t * eps` preserves unit marginal variance.
//! Tables are built once in f64 and cast at lookup. A per-t loss weight
//! table rides along, all ones by default.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{c, Scalar, Tensor};
use crate::{Error, Result};

/// Default table length.
pub const DEFAULT_STEPS: usize = 1000;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    /// DDPM linear-beta ramp; cumulative product of `1 - beta`.
    #[default]
    LinearBeta,
    /// Squared-cosine signal level: `alpha_t = cos(t/T * pi/2)`.
    Cosine,
}

/// Uniform timestep sampling over a fractional band of the table.
/// Extremes carry almost no signal (t near T) or almost no noise (t near 0),
/// so the default band excludes both ends.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimestepPolicy {
    pub lo: f64,
    pub hi: f64,
}

impl Default for TimestepPolicy {
    fn default() -> Self {
        TimestepPolicy { lo: 0.02, hi: 0.98 }
    }
}

impl TimestepPolicy {
    /// Inclusive integer bounds on a table of `steps` entries.
    pub fn bounds(&self, steps: usize) -> Result<(usize, usize)> {
        let lo = (self.lo * steps as f64).ceil().max(0.0) as usize;
        let hi = ((self.hi * steps as f64).floor() as usize).min(steps - 1);
        if !(self.lo <= self.hi && self.lo >= 0.0 && self.hi <= 1.0) || lo > hi {
            return Err(Error::Invalid {
                what: "timestep policy".into(),
                expected: "nonempty fraction band within [0, 1]".into(),
                got: format!("[{}, {}] on T={steps}", self.lo, self.hi),
            });
        }
        Ok((lo, hi))
    }
}

#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    alpha: Vec<f64>,
    sigma: Vec<f64>,
    loss_weight: Vec<f64>,
}

/// Build the `alpha`/`sigma` tables. `beta_min`/`beta_max` drive the
/// linear-beta ramp and are ignored by the cosine kind.
pub fn make_schedule(
    kind: ScheduleKind,
    steps: usize,
    beta_min: f64,
    beta_max: f64,
) -> Result<NoiseSchedule> {
    if steps < 2 {
        return Err(Error::Invalid {
            what: "schedule steps".into(),
            expected: ">= 2".into(),
            got: steps.to_string(),
        });
    }
    if !(0.0 < beta_min && beta_min <= beta_max && beta_max < 1.0) {
        return Err(Error::Invalid {
            what: "beta range".into(),
            expected: "0 < beta_min <= beta_max < 1".into(),
            got: format!("[{beta_min}, {beta_max}]"),
        });
    }
    let abar: Vec<f64> = match kind {
        ScheduleKind::LinearBeta => {
            let mut acc = 1.0;
            (0..steps)
                .map(|i| {
                    let beta =
                        beta_min + (beta_max - beta_min) * i as f64 / (steps - 1) as f64;
                    acc *= 1.0 - beta;
                    acc
                })
                .collect()
        }
        ScheduleKind::Cosine => (0..steps)
            .map(|i| {
                (i as f64 / steps as f64 * std::f64::consts::FRAC_PI_2)
                    .cos()
                    .powi(2)
            })
            .collect(),
    };
    Ok(NoiseSchedule {
        kind,
        alpha: abar.iter().map(|a| a.sqrt()).collect(),
        sigma: abar.iter().map(|a| (1.0 - a).sqrt()).collect(),
        loss_weight: vec![1.0; steps],
    })
}

impl NoiseSchedule {
    /// Linear-beta defaults: T=1000, beta in [1e-4, 2e-2].
    pub fn default_linear() -> Self {
        make_schedule(ScheduleKind::LinearBeta, DEFAULT_STEPS, 1e-4, 2e-2)
            .expect("defaults are valid")
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn steps(&self) -> usize {
        self.alpha.len()
    }

    fn check(&self, t: usize) -> Result<()> {
        if t < self.steps() {
            Ok(())
        } else {
            Err(Error::BadTimestep {
                t,
                steps: self.steps(),
            })
        }
    }

    pub fn alpha<T: Scalar>(&self, t: usize) -> Result<T> {
        self.check(t)?;
        Ok(c(self.alpha[t]))
    }

    pub fn sigma<T: Scalar>(&self, t: usize) -> Result<T> {
        self.check(t)?;
        Ok(c(self.sigma[t]))
    }

    pub fn loss_weight<T: Scalar>(&self, t: usize) -> Result<T> {
        self.check(t)?;
        Ok(c(self.loss_weight[t]))
    }

    pub fn set_loss_weight(&mut self, t: usize, w: f64) -> Result<()> {
        self.check(t)?;
        self.loss_weight[t] = w;
        Ok(())
    }

    /// `z_t = alpha_t * x + sigma_t * eps`.
    pub fn add_noise<T: Scalar>(
        &self,
        x: &Tensor<T>,
        t: usize,
        eps: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        if x.shape() != eps.shape() {
            return Err(Error::ShapeMismatch {
                op: "add_noise".into(),
                lhs: x.shape().to_vec(),
                rhs: eps.shape().to_vec(),
            });
        }
        let (a, s) = (self.alpha::<T>(t)?, self.sigma::<T>(t)?);
        x.scale(a).add(&eps.scale(s))
    }

    /// Uniform integer timestep in `policy.bounds(T)`.
    pub fn sample_timestep(&self, policy: TimestepPolicy, rng: &mut ChaCha8Rng) -> Result<usize> {
        let (lo, hi) = policy.bounds(self.steps())?;
        Ok(rng.gen_range(lo..=hi))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{lane, stream};

    fn linear() -> NoiseSchedule {
        NoiseSchedule::default_linear()
    }

    fn cosine() -> NoiseSchedule {
        make_schedule(ScheduleKind::Cosine, DEFAULT_STEPS, 1e-4, 2e-2).unwrap()
    }

    #[test]
    fn variance_preserving_identity() {
        for sched in [linear(), cosine()] {
            for t in 0..sched.steps() {
                let a: f64 = sched.alpha(t).unwrap();
                let s: f64 = sched.sigma(t).unwrap();
                assert!((a * a + s * s - 1.0).abs() < 1e-12, "t={t}");
            }
        }
    }

    #[test]
    fn monotone_and_boundary_invariants() {
        for sched in [linear(), cosine()] {
            for t in 1..sched.steps() {
                let (a0, a1): (f64, f64) =
                    (sched.alpha(t - 1).unwrap(), sched.alpha(t).unwrap());
                let (s0, s1): (f64, f64) =
                    (sched.sigma(t - 1).unwrap(), sched.sigma(t).unwrap());
                assert!(a1 < a0 && s1 > s0, "t={t}");
            }
            assert!(sched.alpha::<f64>(0).unwrap() >= 0.999);
            assert!(sched.sigma::<f64>(sched.steps() - 1).unwrap() >= 0.99);
        }
    }

    #[test]
    fn linear_beta_probe_values() {
        // Cumulative products recomputed independently and frozen.
        let sched = linear();
        let probes = [
            (0, 0.9999499987499375, 0.009999999999999449),
            (20, 0.996862793253013, 0.07914904565312636),
            (500, 0.27892052338439327, 0.9603141890209559),
            (980, 0.007683587294261306, 0.9999704808074544),
            (999, 0.006352818087570016, 0.99997982064757),
        ];
        for (t, a, s) in probes {
            assert!((sched.alpha::<f64>(t).unwrap() - a).abs() < 1e-12, "t={t}");
            assert!((sched.sigma::<f64>(t).unwrap() - s).abs() < 1e-12, "t={t}");
        }
    }

    #[test]
    fn cosine_midpoint_is_cos_quarter_pi() {
        for steps in [10, 100, 1000] {
            let sched = make_schedule(ScheduleKind::Cosine, steps, 1e-4, 2e-2).unwrap();
            let a: f64 = sched.alpha(steps / 2).unwrap();
            assert!((a - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-6, "T={steps}");
        }
    }

    #[test]
    fn cosine_probe_values() {
        let sched = cosine();
        let probes = [
            (0, 1.0, 0.0),
            (1, 0.9999987662997035, 0.001570795680830879),
            (980, 0.031410759078128396, 0.9995065603657316),
            (999, 0.0015707956808308423, 0.9999987662997035),
        ];
        for (t, a, s) in probes {
            assert!((sched.alpha::<f64>(t).unwrap() - a).abs() < 1e-12, "t={t}");
            assert!((sched.sigma::<f64>(t).unwrap() - s).abs() < 1e-12, "t={t}");
        }
    }

    #[test]
    fn invalid_construction_rejected() {
        assert!(make_schedule(ScheduleKind::LinearBeta, 1, 1e-4, 2e-2).is_err());
        assert!(make_schedule(ScheduleKind::LinearBeta, 100, 0.0, 2e-2).is_err());
        assert!(make_schedule(ScheduleKind::LinearBeta, 100, 0.5, 0.4).is_err());
        assert!(make_schedule(ScheduleKind::LinearBeta, 100, 1e-4, 1.0).is_err());
    }

    #[test]
    fn out_of_range_timestep_rejected() {
        assert!(matches!(
            linear().alpha::<f64>(1000),
            Err(Error::BadTimestep { t: 1000, steps: 1000 })
        ));
    }

    #[test]
    fn add_noise_boundary_and_zero_noise() {
        let sched = linear();
        let x = Tensor::from_vec(vec![0.5_f64, -0.25, 2.0], &[3]).unwrap();
        let zero = Tensor::zeros(&[3]);

        // Left boundary is almost clean data: alpha_0 ~ 1 and sigma_0 = sqrt(beta_0).
        let z0 = sched.add_noise(&x, 0, &zero).unwrap();
        for (a, b) in z0.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-3);
        }
        assert!(sched.sigma::<f64>(0).unwrap() < 0.02);

        let t = 321;
        let z = sched.add_noise(&x, t, &zero).unwrap();
        let a: f64 = sched.alpha(t).unwrap();
        for (zi, xi) in z.data().iter().zip(x.data()) {
            assert_eq!(*zi, a * xi);
        }
    }

    #[test]
    fn add_noise_linear_in_x_and_eps() {
        let sched = linear();
        let mut rng = stream(6, &[lane::NOISE]);
        let x = Tensor::<f64>::randn(&[4], &mut rng);
        let eps = Tensor::<f64>::randn(&[4], &mut rng);
        let a = 2.75;
        let t = 640;
        let lhs = sched
            .add_noise(&x.scale(a), t, &eps.scale(a))
            .unwrap();
        let rhs = sched.add_noise(&x, t, &eps).unwrap().scale(a);
        for (l, r) in lhs.data().iter().zip(rhs.data()) {
            assert!((l - r).abs() < 1e-12);
        }
    }

    #[test]
    fn noised_second_moment_matches_closed_form() {
        // x = 0: E ||z_t||^2 = sigma_t^2 * dim; Monte Carlo mean must land
        // within 3 standard errors over 1e4 draws.
        let sched = linear();
        let t = 400;
        let d = 8;
        let x = Tensor::<f64>::zeros(&[d]);
        let s: f64 = sched.sigma(t).unwrap();
        let expect = s * s * d as f64;

        let n = 10_000;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for i in 0..n {
            let mut erng = stream(11, &[lane::NOISE, i]);
            let eps = Tensor::<f64>::randn(&[d], &mut erng);
            let z = sched.add_noise(&x, t, &eps).unwrap();
            let v = z.data().iter().map(|q| q * q).sum::<f64>();
            sum += v;
            sumsq += v * v;
        }
        let mean = sum / n as f64;
        let var = (sumsq / n as f64 - mean * mean).max(0.0);
        let stderr = (var / n as f64).sqrt();
        assert!(
            (mean - expect).abs() < 3.0 * stderr,
            "mean {mean} expect {expect} stderr {stderr}"
        );
    }

    #[test]
    fn degenerate_policy_band_is_constant() {
        let sched = linear();
        let policy = TimestepPolicy { lo: 0.5, hi: 0.5 };
        let mut rng = stream(1, &[lane::TIMESTEP]);
        for _ in 0..32 {
            assert_eq!(sched.sample_timestep(policy, &mut rng).unwrap(), 500);
        }
    }

    #[test]
    fn empty_policy_band_rejected() {
        let policy = TimestepPolicy { lo: 0.9, hi: 0.1 };
        assert!(policy.bounds(1000).is_err());
    }

    #[test]
    fn timestep_sampling_is_uniform() {
        // Chi-square goodness of fit over 16 bins; the seed is fixed so the
        // statistic is deterministic.
        use statrs::distribution::{ChiSquared, ContinuousCDF};

        let sched = linear();
        let policy = TimestepPolicy::default();
        let (lo, hi) = policy.bounds(sched.steps()).unwrap();
        assert_eq!((lo, hi), (20, 980));
        let span = hi - lo + 1;
        let bins = 16;
        let mut counts = vec![0u64; bins];
        let n = 100_000;
        let mut rng = stream(3, &[lane::TIMESTEP]);
        for _ in 0..n {
            let t = sched.sample_timestep(policy, &mut rng).unwrap();
            assert!((lo..=hi).contains(&t));
            counts[(t - lo) * bins / span] += 1;
        }
        // Bin widths differ by at most one integer; use exact expected counts.
        let mut stat = 0.0;
        for (b, &cnt) in counts.iter().enumerate() {
            let width = (b + 1) * span / bins - b * span / bins;
            let expect = n as f64 * width as f64 / span as f64;
            stat += (cnt as f64 - expect).powi(2) / expect;
        }
        let chi = ChiSquared::new((bins - 1) as f64).unwrap();
        let p = 1.0 - chi.cdf(stat);
        assert!(p > 0.01, "chi2 stat {stat} p {p}");
    }
}
