//! Ground-truth machinery: closed-form fixed points for the Gaussian
//! sandbox, Monte Carlo expected gradients, finite-difference checks, and
//! MMD as the sample-quality metric.

use std::sync::Arc;

use crate::denoiser::{make_analytic, Denoiser};
use crate::schedule::NoiseSchedule;
use crate::tensor::{c, Scalar, Tensor};
use crate::{Error, Result};

/// One conditional Gaussian (`y`) and one unconditional Gaussian (null),
/// with a shared schedule. The analytic denoiser over this pair makes every
/// expected distillation gradient available in closed form.
#[derive(Debug, Clone)]
pub struct GaussianSandbox {
    pub mu_y: Tensor<f64>,
    pub var_y: f64,
    pub mu_null: Tensor<f64>,
    pub var_null: f64,
    pub sched: Arc<NoiseSchedule>,
}

impl GaussianSandbox {
    pub fn new(
        mu_y: Tensor<f64>,
        var_y: f64,
        mu_null: Tensor<f64>,
        var_null: f64,
        sched: Arc<NoiseSchedule>,
    ) -> Result<Self> {
        if mu_y.numel() != mu_null.numel() {
            return Err(Error::ShapeMismatch {
                op: "sandbox".into(),
                lhs: mu_y.shape().to_vec(),
                rhs: mu_null.shape().to_vec(),
            });
        }
        if var_y < 0.0 || var_null < 0.0 {
            return Err(Error::Invalid {
                what: "sandbox variance".into(),
                expected: ">= 0".into(),
                got: format!("({var_y}, {var_null})"),
            });
        }
        Ok(GaussianSandbox {
            mu_y,
            var_y,
            mu_null,
            var_null,
            sched,
        })
    }

    /// Equal-variance 1D default: mu_null=0, mu_y=1, unit variances.
    pub fn unit_1d(sched: Arc<NoiseSchedule>) -> Self {
        GaussianSandbox {
            mu_y: Tensor::from_vec(vec![1.0], &[1]).expect("1d"),
            var_y: 1.0,
            mu_null: Tensor::from_vec(vec![0.0], &[1]).expect("1d"),
            var_null: 1.0,
            sched,
        }
    }

    pub fn dim(&self) -> usize {
        self.mu_y.numel()
    }

    pub fn equal_variances(&self) -> bool {
        self.var_y == self.var_null
    }

    /// The matching analytic denoiser (class 0 = y, null = unconditional).
    pub fn denoiser<T: Scalar>(&self) -> Denoiser<T> {
        let cast = |src: &Tensor<f64>| {
            Tensor::from_vec(src.data().iter().map(|&v| c::<T>(v)).collect(), src.shape())
                .expect("same layout")
        };
        make_analytic(
            vec![cast(&self.mu_y)],
            vec![self.var_y],
            cast(&self.mu_null),
            self.var_null,
            Arc::clone(&self.sched),
        )
        .expect("sandbox params validated")
    }
}

/// Zero of the expected SDS gradient field.
///
/// Equal variances: `x* = w mu_y + (1-w) mu_null`, t-independent, so `t` may
/// be omitted. Unequal variances: with `d_c = alpha_t^2 var_c + sigma_t^2`,
/// `x* = [w mu_y/d_y + (1-w) mu_null/d_n] / [w/d_y + (1-w)/d_n]`, and
/// `w = inf` takes the limit. A vanishing denominator is reported.
pub fn cfg_fixed_point(
    sb: &GaussianSandbox,
    w: f64,
    t: Option<usize>,
) -> Result<Tensor<f64>> {
    if w.is_nan() || w < 0.0 {
        return Err(Error::Invalid {
            what: "guidance weight".into(),
            expected: ">= 0 or inf".into(),
            got: w.to_string(),
        });
    }
    if sb.equal_variances() {
        if w.is_infinite() {
            return Err(Error::Invalid {
                what: "fixed point".into(),
                expected: "finite w for equal variances".into(),
                got: "w = inf (displacement grows without bound)".into(),
            });
        }
        return Ok(sb
            .mu_y
            .scale(w)
            .add(&sb.mu_null.scale(1.0 - w))
            .expect("same shapes"));
    }
    let t = t.ok_or_else(|| Error::Invalid {
        what: "fixed point timestep".into(),
        expected: "explicit t for unequal variances".into(),
        got: "none".into(),
    })?;
    let a: f64 = sb.sched.alpha(t)?;
    let s: f64 = sb.sched.sigma(t)?;
    let dy = a * a * sb.var_y + s * s;
    let dn = a * a * sb.var_null + s * s;
    let (num, den) = if w.is_infinite() {
        // limit of the finite-w ratio as w grows
        (
            sb.mu_y.scale(1.0 / dy).sub(&sb.mu_null.scale(1.0 / dn))?,
            1.0 / dy - 1.0 / dn,
        )
    } else {
        (
            sb.mu_y
                .scale(w / dy)
                .add(&sb.mu_null.scale((1.0 - w) / dn))?,
            w / dy + (1.0 - w) / dn,
        )
    };
    if den.abs() < 1e-12 {
        return Err(Error::Invalid {
            what: "fixed point".into(),
            expected: "nonzero gradient-field slope".into(),
            got: format!("w={w} cancels the variance combination at t={t}"),
        });
    }
    Ok(num.scale(1.0 / den))
}

/// Mean and per-component standard error of `draw(i)` over `i in 0..n`,
/// summed in index order for reproducibility.
pub fn expected_grad_mc<T, F>(n: usize, mut draw: F) -> Result<(Tensor<T>, Tensor<T>)>
where
    T: Scalar,
    F: FnMut(u64) -> Result<Tensor<T>>,
{
    if n < 2 {
        return Err(Error::Invalid {
            what: "mc sample count".into(),
            expected: ">= 2".into(),
            got: n.to_string(),
        });
    }
    let first = draw(0)?;
    let shape = first.shape().to_vec();
    let mut sum = first.to_f64_vec();
    let mut sumsq: Vec<f64> = sum.iter().map(|v| v * v).collect();
    for i in 1..n as u64 {
        let g = draw(i)?;
        if g.shape() != shape.as_slice() {
            return Err(Error::ShapeMismatch {
                op: "expected_grad_mc".into(),
                lhs: g.shape().to_vec(),
                rhs: shape,
            });
        }
        for (j, v) in g.to_f64_vec().into_iter().enumerate() {
            sum[j] += v;
            sumsq[j] += v * v;
        }
    }
    let nf = n as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / nf).collect();
    let stderr: Vec<f64> = mean
        .iter()
        .zip(&sumsq)
        .map(|(&m, &sq)| ((sq / nf - m * m).max(0.0) / (nf - 1.0)).sqrt())
        .collect();
    Ok((
        Tensor::from_f64_slice(&mean, &shape)?,
        Tensor::from_f64_slice(&stderr, &shape)?,
    ))
}

/// Worst-component relative error of `analytic` against central finite
/// differences of `f` at `theta`. 64-bit only.
pub fn finite_diff_check<F>(
    f: F,
    analytic: &Tensor<f64>,
    theta: &Tensor<f64>,
    h: f64,
) -> Result<f64>
where
    F: Fn(&Tensor<f64>) -> Result<f64>,
{
    if analytic.shape() != theta.shape() {
        return Err(Error::ShapeMismatch {
            op: "finite_diff_check".into(),
            lhs: analytic.shape().to_vec(),
            rhs: theta.shape().to_vec(),
        });
    }
    let mut worst = 0.0_f64;
    for i in 0..theta.numel() {
        let mut plus = theta.clone();
        plus.data_mut()[i] += h;
        let mut minus = theta.clone();
        minus.data_mut()[i] -= h;
        let fd = (f(&plus)? - f(&minus)?) / (2.0 * h);
        let an = analytic.data()[i];
        let scale = fd.abs().max(an.abs());
        let err = if scale < 1e-8 {
            (fd - an).abs()
        } else {
            (fd - an).abs() / scale
        };
        worst = worst.max(err);
    }
    Ok(worst)
}

/// MC cross-check of the 1-D fixed point: bisection on the empirical
/// expected SDS gradient over `n` common random `(t, eps)` draws. Common
/// draws make the empirical mean a fixed smooth function of `x`, so
/// bisection converges to its root; distance to the analytic fixed point is
/// the genuine MC error. Returns the root and the standard error of the
/// mean gradient there. `w = inf` uses a large finite surrogate.
///
/// `t` pins the timestep; `None` averages over the full range, which is only
/// meaningful when the fixed point is t-independent (equal variances).
pub fn mc_sds_root(
    sb: &GaussianSandbox,
    w: f64,
    t: Option<usize>,
    n: usize,
    seed: u64,
    lo: f64,
    hi: f64,
) -> Result<(f64, f64)> {
    use crate::denoiser::Cond;
    use crate::priors::sds_grad;
    use crate::rng::{lane, stream};
    use crate::schedule::TimestepPolicy;

    if sb.dim() != 1 {
        return Err(Error::Invalid {
            what: "mc_sds_root".into(),
            expected: "1-D sandbox".into(),
            got: format!("dim {}", sb.dim()),
        });
    }
    let w_eff = if w.is_infinite() { 1e9 } else { w };
    let norm = 1.0 / w_eff.abs().max(1.0);
    let d = sb.denoiser::<f64>();
    let policy = TimestepPolicy { lo: 0.0, hi: 1.0 };
    let mut draws = Vec::with_capacity(n);
    for i in 0..n as u64 {
        let ti = match t {
            Some(t) => t,
            None => {
                let mut trng = stream(seed, &[lane::TIMESTEP, i]);
                sb.sched.sample_timestep(policy, &mut trng)?
            }
        };
        let mut erng = stream(seed, &[lane::NOISE, i]);
        let eps = Tensor::<f64>::randn(&[1], &mut erng);
        draws.push((ti, eps));
    }
    let mean_grad = |x: f64| -> Result<f64> {
        let xt = Tensor::from_vec(vec![x], &[1])?;
        let mut s = 0.0;
        for (t, eps) in &draws {
            s += sds_grad(&d, &xt, Cond::Class(0), w_eff, *t, eps)?.data()[0];
        }
        Ok(s * norm / n as f64)
    };
    let (mut lo, mut hi) = (lo, hi);
    let (glo, ghi) = (mean_grad(lo)?, mean_grad(hi)?);
    if glo == 0.0 {
        return Ok((lo, 0.0));
    }
    if ghi == 0.0 {
        return Ok((hi, 0.0));
    }
    if glo.signum() == ghi.signum() {
        return Err(Error::Invalid {
            what: "mc_sds_root bracket".into(),
            expected: "sign change over [lo, hi]".into(),
            got: format!("g({lo})={glo}, g({hi})={ghi}"),
        });
    }
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        let gm = mean_grad(mid)?;
        if gm == 0.0 {
            lo = mid;
            hi = mid;
            break;
        }
        if gm.signum() == glo.signum() {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let root = 0.5 * (lo + hi);
    let xt = Tensor::from_vec(vec![root], &[1])?;
    let (_, stderr) = expected_grad_mc::<f64, _>(n, |i| {
        let (t, eps) = &draws[i as usize];
        sds_grad(&d, &xt, Cond::Class(0), w_eff, *t, eps).map(|g| g.scale(norm))
    })?;
    Ok((root, stderr.data()[0]))
}

/// Median of pairwise Euclidean distances over the union of two `[n, d]`
/// sample sets; the standard kernel bandwidth heuristic.
pub fn median_heuristic(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<f64> {
    let (ra, rb) = (rows_of(a)?, rows_of(b)?);
    let all: Vec<&[f64]> = ra.iter().chain(rb.iter()).map(|r| &**r).collect();
    let mut dists = Vec::with_capacity(all.len() * (all.len() - 1) / 2);
    for i in 0..all.len() {
        for j in (i + 1)..all.len() {
            dists.push(sq_dist(all[i], all[j]).sqrt());
        }
    }
    if dists.is_empty() {
        return Err(Error::Invalid {
            what: "median heuristic".into(),
            expected: "at least 2 points".into(),
            got: all.len().to_string(),
        });
    }
    dists.sort_by(|x, y| x.partial_cmp(y).expect("finite distances"));
    let mid = dists.len() / 2;
    let med = if dists.len() % 2 == 1 {
        dists[mid]
    } else {
        0.5 * (dists[mid - 1] + dists[mid])
    };
    // degenerate case: identical points everywhere
    Ok(if med > 0.0 { med } else { 1.0 })
}

/// Squared MMD between two sample sets, biased V-statistic with a Gaussian
/// kernel `exp(-||x-y||^2 / (2 bandwidth^2))`. Zero iff the multisets match.
pub fn mmd(a: &Tensor<f64>, b: &Tensor<f64>, bandwidth: f64) -> Result<f64> {
    if bandwidth <= 0.0 {
        return Err(Error::Invalid {
            what: "mmd bandwidth".into(),
            expected: "> 0".into(),
            got: bandwidth.to_string(),
        });
    }
    let (ra, rb) = (rows_of(a)?, rows_of(b)?);
    if ra.is_empty() || rb.is_empty() || ra[0].len() != rb[0].len() {
        return Err(Error::ShapeMismatch {
            op: "mmd".into(),
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let gamma = 1.0 / (2.0 * bandwidth * bandwidth);
    let mean_kernel = |xs: &[Vec<f64>], ys: &[Vec<f64>]| -> f64 {
        let mut s = 0.0;
        for x in xs {
            for y in ys {
                s += (-gamma * sq_dist(x, y)).exp();
            }
        }
        s / (xs.len() * ys.len()) as f64
    };
    Ok(mean_kernel(&ra, &ra) + mean_kernel(&rb, &rb) - 2.0 * mean_kernel(&ra, &rb))
}

fn rows_of(t: &Tensor<f64>) -> Result<Vec<Vec<f64>>> {
    let shape = t.shape();
    let (n, d) = match shape {
        [n, d] => (*n, *d),
        [n] => (*n, 1),
        _ => {
            return Err(Error::ShapeMismatch {
                op: "sample set".into(),
                lhs: shape.to_vec(),
                rhs: vec![0, 0],
            })
        }
    };
    Ok((0..n).map(|i| t.data()[i * d..(i + 1) * d].to_vec()).collect())
}

fn sq_dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}
