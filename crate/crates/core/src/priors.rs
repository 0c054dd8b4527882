//! The score-distillation loss zoo and the two-loop distillation driver.
//!
//! Every gradient rule takes an explicit `(t, eps)` draw so identities
//! between variants can be checked on shared noise. Denoiser outputs are
//! plain values (never on the caller's tape): the gradient reaches theta
//! only through the generator pullback, which is the detach the rules
//! require.

use serde::{Deserialize, Serialize};

use crate::denoiser::{
    attach_adapter, AdapterSet, Cond, CondSpec, Denoiser, LearnableEmbedding, Trainable,
};
use crate::generators::Generator;
use crate::optim::{Sgd, SgdConfig};
use crate::rng::{lane, stream};
use crate::schedule::TimestepPolicy;
use crate::tape::Tape;
use crate::tensor::{c, Scalar, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Sds,
    ReferenceSds,
    NormalizedSds,
    Dds,
    Vsd,
    LodsEmbedding,
    LodsAdapter,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Sds,
        Variant::ReferenceSds,
        Variant::NormalizedSds,
        Variant::Dds,
        Variant::Vsd,
        Variant::LodsEmbedding,
        Variant::LodsAdapter,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Sds => "sds",
            Variant::ReferenceSds => "reference_sds",
            Variant::NormalizedSds => "normalized_sds",
            Variant::Dds => "dds",
            Variant::Vsd => "vsd",
            Variant::LodsEmbedding => "lods_embedding",
            Variant::LodsAdapter => "lods_adapter",
        }
    }

    pub fn has_alignment(self) -> bool {
        matches!(
            self,
            Variant::LodsEmbedding | Variant::LodsAdapter | Variant::Vsd
        )
    }

    /// Variants whose gradient is defined at w = inf.
    pub fn supports_infinite_w(self) -> bool {
        matches!(
            self,
            Variant::NormalizedSds | Variant::LodsEmbedding | Variant::LodsAdapter
        )
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Invalid {
                what: "variant".into(),
                expected: Variant::ALL.map(|v| v.name()).join("|"),
                got: s.into(),
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseSharing {
    /// Alignment draws its own `(t, eps)`.
    Fresh,
    /// Alignment reuses the distill step's `(t, eps)`.
    Reuse,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorConfig {
    pub variant: Variant,
    /// Guidance weight; `inf` is accepted by the normalized variants.
    pub w: f64,
    pub target: Cond,
    pub policy: TimestepPolicy,
    pub noise_sharing: NoiseSharing,
    pub seed: u64,
    pub theta_opt: SgdConfig,
    /// Learning rate for the learnable state (embedding or adapter).
    pub state_lr: f64,
    pub adapter_rank: usize,
    pub adapter_scale: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig {
            variant: Variant::Sds,
            w: 1000.0,
            target: Cond::Class(0),
            policy: TimestepPolicy::default(),
            noise_sharing: NoiseSharing::Fresh,
            seed: 0,
            theta_opt: SgdConfig {
                lr: 3e-2,
                momentum: 0.0,
                lr_final: None,
                decay_steps: None,
            },
            state_lr: 1e-4,
            adapter_rank: 4,
            adapter_scale: 0.5,
        }
    }
}

impl PriorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.w.is_nan() || self.w < 0.0 {
            return Err(Error::Invalid {
                what: "guidance weight".into(),
                expected: ">= 0 or inf".into(),
                got: self.w.to_string(),
            });
        }
        if self.w.is_infinite() && !self.variant.supports_infinite_w() {
            return Err(Error::Invalid {
                what: "guidance weight".into(),
                expected: "finite w for this variant".into(),
                got: "inf".into(),
            });
        }
        let normalized = matches!(
            self.variant,
            Variant::NormalizedSds | Variant::LodsEmbedding | Variant::LodsAdapter
        );
        if normalized && self.w == 0.0 {
            return Err(Error::Invalid {
                what: "guidance weight".into(),
                expected: "> 0 for normalized variants".into(),
                got: "0".into(),
            });
        }
        Ok(())
    }
}

/// Learnable state a normalized gradient reads its `u` branch from.
#[derive(Debug, Clone, Copy)]
pub enum AlignState<'a, T: Scalar> {
    Embedding(&'a LearnableEmbedding<T>),
    Adapter(&'a AdapterSet<T>),
}

/// `w * eps_y + (1 - w) * eps_null`.
pub fn cfg_combine<T: Scalar>(
    eps_y: &Tensor<T>,
    eps_null: &Tensor<T>,
    w: f64,
) -> Result<Tensor<T>> {
    if !w.is_finite() {
        return Err(Error::Invalid {
            what: "cfg_combine weight".into(),
            expected: "finite".into(),
            got: w.to_string(),
        });
    }
    eps_y.scale(c(w)).add(&eps_null.scale(c(1.0 - w)))
}

/// `(cfg(z_t; y) - eps) * alpha_t`. Two forwards, no backward.
pub fn sds_grad<T: Scalar>(
    d: &Denoiser<T>,
    x: &Tensor<T>,
    y: Cond,
    w: f64,
    t: usize,
    eps: &Tensor<T>,
) -> Result<Tensor<T>> {
    if !w.is_finite() {
        return Err(Error::Invalid {
            what: "sds guidance weight".into(),
            expected: "finite (see limit_grad for w = inf)".into(),
            got: w.to_string(),
        });
    }
    let sched = d.schedule().clone();
    let z = sched.add_noise(x, t, eps)?;
    let ey = d.predict_noise(&z, t, CondSpec::All(y), None)?;
    let en = d.predict_noise(&z, t, CondSpec::All(Cond::Null), None)?;
    let cfg = cfg_combine(&ey, &en, w)?;
    Ok(cfg.sub(eps)?.scale(sched.alpha(t)?))
}

/// `(eps_hat(z_t; y) - eps) * alpha_t` with no CFG. One forward.
pub fn reference_sds_grad<T: Scalar>(
    d: &Denoiser<T>,
    x: &Tensor<T>,
    y: Cond,
    t: usize,
    eps: &Tensor<T>,
) -> Result<Tensor<T>> {
    let sched = d.schedule().clone();
    let z = sched.add_noise(x, t, eps)?;
    let ey = d.predict_noise(&z, t, CondSpec::All(y), None)?;
    Ok(ey.sub(eps)?.scale(sched.alpha(t)?))
}

/// Difference of two CFG predictions on target and source observables,
/// sharing `(t, eps)` so the injected-noise bias cancels. Four forwards.
#[allow(clippy::too_many_arguments)]
pub fn dds_grad<T: Scalar>(
    d: &Denoiser<T>,
    x: &Tensor<T>,
    y: Cond,
    x_src: &Tensor<T>,
    y_src: Cond,
    w: f64,
    t: usize,
    eps: &Tensor<T>,
) -> Result<Tensor<T>> {
    if x.shape() != x_src.shape() {
        return Err(Error::ShapeMismatch {
            op: "dds_grad".into(),
            lhs: x.shape().to_vec(),
            rhs: x_src.shape().to_vec(),
        });
    }
    let sched = d.schedule().clone();
    let zt = sched.add_noise(x, t, eps)?;
    let zs = sched.add_noise(x_src, t, eps)?;
    let cfg_t = {
        let ey = d.predict_noise(&zt, t, CondSpec::All(y), None)?;
        let en = d.predict_noise(&zt, t, CondSpec::All(Cond::Null), None)?;
        cfg_combine(&ey, &en, w)?
    };
    let cfg_s = {
        let ey = d.predict_noise(&zs, t, CondSpec::All(y_src), None)?;
        let en = d.predict_noise(&zs, t, CondSpec::All(Cond::Null), None)?;
        cfg_combine(&ey, &en, w)?
    };
    Ok(cfg_t.sub(&cfg_s)?.scale(sched.alpha(t)?))
}

/// `(cfg_base(z_t; y) - eps_psi(z_t; y)) * alpha_t`: the adapted model
/// replaces the injected-noise baseline. Three forwards; the adapter's own
/// training step is [`vsd_adapter_fit`].
pub fn vsd_grad<T: Scalar>(
    d: &Denoiser<T>,
    adapter: &AdapterSet<T>,
    x: &Tensor<T>,
    y: Cond,
    w: f64,
    t: usize,
    eps: &Tensor<T>,
) -> Result<Tensor<T>> {
    let sched = d.schedule().clone();
    let z = sched.add_noise(x, t, eps)?;
    let ey = d.predict_noise(&z, t, CondSpec::All(y), None)?;
    let en = d.predict_noise(&z, t, CondSpec::All(Cond::Null), None)?;
    let cfg = cfg_combine(&ey, &en, w)?;
    let epsi = d.predict_noise(&z, t, CondSpec::All(y), Some(adapter))?;
    Ok(cfg.sub(&epsi)?.scale(sched.alpha(t)?))
}

/// Normalized gradient `(eps_y + ((1-w)/w) u - eps/w) * alpha_t`, where the
/// `u` branch is the learnable embedding's prediction or the adapted
/// unconditional prediction. Two forwards. `w = inf` delegates to
/// [`limit_grad`].
pub fn normalized_sds_grad<T: Scalar>(
    d: &Denoiser<T>,
    x: &Tensor<T>,
    y: Cond,
    state: AlignState<'_, T>,
    w: f64,
    t: usize,
    eps: &Tensor<T>,
) -> Result<Tensor<T>> {
    if w.is_infinite() {
        return limit_grad(d, x, y, state, t, eps);
    }
    if w <= 0.0 || w.is_nan() {
        return Err(Error::Invalid {
            what: "normalized guidance weight".into(),
            expected: "> 0 or inf".into(),
            got: w.to_string(),
        });
    }
    let sched = d.schedule().clone();
    let z = sched.add_noise(x, t, eps)?;
    let ey = d.predict_noise(&z, t, CondSpec::All(y), None)?;
    let u = predict_u(d, &z, t, state)?;
    let out = ey
        .add(&u.scale(c((1.0 - w) / w)))?
        .sub(&eps.scale(c(1.0 / w)))?;
    Ok(out.scale(sched.alpha(t)?))
}

/// The exact `w -> inf` limit of the normalized gradient:
/// `(eps_y - u) * alpha_t`. Two forwards.
pub fn limit_grad<T: Scalar>(
    d: &Denoiser<T>,
    x: &Tensor<T>,
    y: Cond,
    state: AlignState<'_, T>,
    t: usize,
    eps: &Tensor<T>,
) -> Result<Tensor<T>> {
    let sched = d.schedule().clone();
    let z = sched.add_noise(x, t, eps)?;
    let ey = d.predict_noise(&z, t, CondSpec::All(y), None)?;
    let u = predict_u(d, &z, t, state)?;
    Ok(ey.sub(&u)?.scale(sched.alpha(t)?))
}

fn predict_u<T: Scalar>(
    d: &Denoiser<T>,
    z: &Tensor<T>,
    t: usize,
    state: AlignState<'_, T>,
) -> Result<Tensor<T>> {
    match state {
        AlignState::Embedding(emb) => {
            d.predict_noise(z, t, CondSpec::Vector(&emb.alpha), None)
        }
        AlignState::Adapter(set) => {
            d.predict_noise(z, t, CondSpec::All(Cond::Null), Some(set))
        }
    }
}

/// Alignment objective: mean squared residual of the state's prediction
/// against the injected noise, with `x` and the base weights detached.
/// Runs forward + backward (one each) and returns the loss value and the
/// state gradients in the same order the state tensors are stored.
pub fn alignment_loss<T: Scalar>(
    d: &Denoiser<T>,
    x: &Tensor<T>,
    state: AlignState<'_, T>,
    t: usize,
    eps: &Tensor<T>,
) -> Result<(f64, Vec<Tensor<T>>)> {
    match state {
        AlignState::Embedding(emb) => state_residual_backward(
            d,
            x,
            t,
            eps,
            CondSpec::Vector(&emb.alpha),
            None,
            Trainable::Embedding,
        ),
        AlignState::Adapter(set) => state_residual_backward(
            d,
            x,
            t,
            eps,
            CondSpec::All(Cond::Null),
            Some(set),
            Trainable::Adapter,
        ),
    }
}

/// VSD's adapter training objective: same residual, conditioned on `y`.
pub fn vsd_adapter_fit<T: Scalar>(
    d: &Denoiser<T>,
    adapter: &AdapterSet<T>,
    x: &Tensor<T>,
    y: Cond,
    t: usize,
    eps: &Tensor<T>,
) -> Result<(f64, Vec<Tensor<T>>)> {
    state_residual_backward(
        d,
        x,
        t,
        eps,
        CondSpec::All(y),
        Some(adapter),
        Trainable::Adapter,
    )
}

fn state_residual_backward<T: Scalar>(
    d: &Denoiser<T>,
    x: &Tensor<T>,
    t: usize,
    eps: &Tensor<T>,
    cond: CondSpec<'_, T>,
    adapter: Option<&AdapterSet<T>>,
    train: Trainable,
) -> Result<(f64, Vec<Tensor<T>>)> {
    let sched = d.schedule().clone();
    let z = sched.add_noise(x, t, eps)?;
    let rows = if z.shape().len() == 1 {
        z.reshape(&[1, z.numel()])?
    } else {
        z
    };
    let eps_rows = eps.reshape(rows.shape())?;
    let mut tape = Tape::new();
    let zv = tape.constant(rows);
    let ev = tape.constant(eps_rows);
    let out = d.forward(&mut tape, zv, t, cond, adapter, train)?;
    let loss = tape.mse(out.pred, ev)?;
    tape.backward(loss)?;
    d.note_backward();
    let grads = out
        .trainables
        .iter()
        .map(|(_, v)| tape.grad_or_zero(*v))
        .collect();
    Ok((tape.value(loss).item().to_f64(), grads))
}

/// Final learnable state of a distillation run.
#[derive(Debug, Clone)]
pub enum RunState<T: Scalar> {
    None,
    Embedding(LearnableEmbedding<T>),
    Adapter(AdapterSet<T>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillStepRecord {
    pub step: u64,
    pub distill_grad_norm: f64,
    pub alignment_loss: Option<f64>,
    pub t: usize,
    pub forwards: u64,
    pub backwards: u64,
}

#[derive(Debug, Clone)]
pub struct DistillRun<T: Scalar> {
    pub theta: Tensor<T>,
    pub records: Vec<DistillStepRecord>,
    pub state: RunState<T>,
}

/// Two-loop distillation driver.
///
/// Step A updates theta by the variant's distill gradient with the
/// learnable state frozen; Step B (lods variants) takes one alignment step
/// on the state against a post-update render, and VSD takes one adapter fit
/// step. `source` supplies DDS's fixed source observable and condition.
pub fn lods_run<T: Scalar>(
    cfg: &PriorConfig,
    gen: &Generator,
    theta0: &Tensor<T>,
    d: &Denoiser<T>,
    steps: usize,
    source: Option<(&Tensor<T>, Cond)>,
) -> Result<DistillRun<T>> {
    cfg.validate()?;
    if cfg.variant == Variant::Dds && source.is_none() {
        return Err(Error::Invalid {
            what: "dds source".into(),
            expected: "source observable and condition".into(),
            got: "none".into(),
        });
    }
    let dim = d.data_dim();
    let out_numel: usize = gen.out_shape().iter().product();
    if !out_numel.is_multiple_of(dim) {
        return Err(Error::ShapeMismatch {
            op: "distill".into(),
            lhs: gen.out_shape(),
            rhs: vec![dim],
        });
    }
    let n_rows = out_numel / dim;

    let mut theta = theta0.clone();
    let mut theta_opt = Sgd::new(cfg.theta_opt);
    let mut state_opt = Sgd::new(SgdConfig {
        lr: cfg.state_lr,
        momentum: 0.0,
        lr_final: None,
        decay_steps: None,
    });
    let mut embedding = match cfg.variant {
        Variant::LodsEmbedding | Variant::NormalizedSds => Some(LearnableEmbedding::init(d)),
        _ => None,
    };
    let mut adapter = match cfg.variant {
        Variant::LodsAdapter | Variant::Vsd => Some(attach_adapter(
            d,
            cfg.adapter_rank,
            cfg.adapter_scale,
            cfg.seed,
        )?),
        _ => None,
    };

    let sched = d.schedule().clone();
    let mut records = Vec::with_capacity(steps);

    for step in 0..steps as u64 {
        let counts0 = d.counts();
        let t = {
            let mut rng = stream(cfg.seed, &[lane::TIMESTEP, step]);
            sched.sample_timestep(cfg.policy, &mut rng)?
        };
        let eps = {
            let mut rng = stream(cfg.seed, &[lane::NOISE, step]);
            Tensor::<T>::randn(&[n_rows, dim], &mut rng)
        };
        let x = gen.render(&theta)?.reshape(&[n_rows, dim])?;

        let grad_x = match cfg.variant {
            Variant::Sds => sds_grad(d, &x, cfg.target, cfg.w, t, &eps)?,
            Variant::ReferenceSds => reference_sds_grad(d, &x, cfg.target, t, &eps)?,
            Variant::Dds => {
                let (xs, ys) = source.expect("checked above");
                let xs = xs.reshape(&[n_rows, dim])?;
                dds_grad(d, &x, cfg.target, &xs, ys, cfg.w, t, &eps)?
            }
            Variant::Vsd => vsd_grad(
                d,
                adapter.as_ref().expect("vsd adapter"),
                &x,
                cfg.target,
                cfg.w,
                t,
                &eps,
            )?,
            Variant::NormalizedSds | Variant::LodsEmbedding => normalized_sds_grad(
                d,
                &x,
                cfg.target,
                AlignState::Embedding(embedding.as_ref().expect("embedding state")),
                cfg.w,
                t,
                &eps,
            )?,
            Variant::LodsAdapter => normalized_sds_grad(
                d,
                &x,
                cfg.target,
                AlignState::Adapter(adapter.as_ref().expect("adapter state")),
                cfg.w,
                t,
                &eps,
            )?,
        };

        let upstream = grad_x.reshape(&gen.out_shape())?;
        let grad_theta = gen.pullback(&theta, &upstream)?;
        let norm = grad_theta.norm().to_f64();
        if !norm.is_finite() || norm > 1e6 {
            return Err(Error::Diverged { step, norm });
        }
        theta_opt.step(&mut [&mut theta], &[&grad_theta])?;

        let align = match cfg.variant {
            Variant::LodsEmbedding | Variant::LodsAdapter | Variant::Vsd => {
                let (tb, eb) = match cfg.noise_sharing {
                    NoiseSharing::Reuse => (t, eps.clone()),
                    NoiseSharing::Fresh => {
                        let mut trng = stream(cfg.seed, &[lane::ALIGN, step, 0]);
                        let tb = sched.sample_timestep(cfg.policy, &mut trng)?;
                        let mut erng = stream(cfg.seed, &[lane::ALIGN, step, 1]);
                        (tb, Tensor::<T>::randn(&[n_rows, dim], &mut erng))
                    }
                };
                let x_new = gen.render(&theta)?.reshape(&[n_rows, dim])?;
                let (loss, grads) = match cfg.variant {
                    Variant::LodsEmbedding => alignment_loss(
                        d,
                        &x_new,
                        AlignState::Embedding(embedding.as_ref().expect("embedding state")),
                        tb,
                        &eb,
                    )?,
                    Variant::LodsAdapter => alignment_loss(
                        d,
                        &x_new,
                        AlignState::Adapter(adapter.as_ref().expect("adapter state")),
                        tb,
                        &eb,
                    )?,
                    Variant::Vsd => vsd_adapter_fit(
                        d,
                        adapter.as_ref().expect("vsd adapter"),
                        &x_new,
                        cfg.target,
                        tb,
                        &eb,
                    )?,
                    _ => unreachable!(),
                };
                match cfg.variant {
                    Variant::LodsEmbedding => {
                        let emb = embedding.as_mut().expect("embedding state");
                        state_opt.step(&mut [&mut emb.alpha], &[&grads[0]])?;
                    }
                    _ => {
                        let set = adapter.as_mut().expect("adapter state");
                        let mut params: Vec<&mut Tensor<T>> = Vec::new();
                        for layer in &mut set.layers {
                            params.push(&mut layer.down);
                            params.push(&mut layer.up);
                        }
                        let refs: Vec<&Tensor<T>> = grads.iter().collect();
                        state_opt.step(&mut params, &refs)?;
                    }
                }
                Some(loss)
            }
            _ => None,
        };

        let counts1 = d.counts();
        records.push(DistillStepRecord {
            step,
            distill_grad_norm: norm,
            alignment_loss: align,
            t,
            forwards: counts1.0 - counts0.0,
            backwards: counts1.1 - counts0.1,
        });
    }

    let state = match cfg.variant {
        Variant::LodsEmbedding | Variant::NormalizedSds => {
            RunState::Embedding(embedding.expect("embedding state"))
        }
        Variant::LodsAdapter | Variant::Vsd => RunState::Adapter(adapter.expect("adapter state")),
        _ => RunState::None,
    };
    Ok(DistillRun {
        theta,
        records,
        state,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{make_network, NetConfig};
    use crate::oracle::GaussianSandbox;
    use crate::schedule::NoiseSchedule;
    use std::sync::Arc;

    fn sched() -> Arc<NoiseSchedule> {
        Arc::new(NoiseSchedule::default_linear())
    }

    fn sandbox() -> GaussianSandbox {
        GaussianSandbox::unit_1d(sched())
    }

    fn rel_close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
    }

    #[test]
    fn cfg_combine_examples() {
        let ey = Tensor::from_vec(vec![1.0, 0.0], &[2]).unwrap();
        let en = Tensor::from_vec(vec![0.0, 1.0], &[2]).unwrap();
        assert_eq!(cfg_combine(&ey, &en, 1.0).unwrap().data(), ey.data());
        assert_eq!(cfg_combine(&ey, &en, 0.0).unwrap().data(), en.data());
        assert_eq!(
            cfg_combine(&ey, &en, 100.0).unwrap().data(),
            &[100.0, -99.0]
        );
        assert!(cfg_combine(&ey, &en, f64::INFINITY).is_err());
    }

    #[test]
    fn w1_collapses_sds_to_reference() {
        let d = sandbox().denoiser::<f64>();
        let x = Tensor::from_vec(vec![0.37], &[1]).unwrap();
        for (t, e) in [(100usize, 0.5), (500, -1.2), (900, 0.01)] {
            let eps = Tensor::from_vec(vec![e], &[1]).unwrap();
            let a = sds_grad(&d, &x, Cond::Class(0), 1.0, t, &eps).unwrap();
            let b = reference_sds_grad(&d, &x, Cond::Class(0), t, &eps).unwrap();
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn w0_returns_unconditional_branch() {
        let d = sandbox().denoiser::<f64>();
        let x = Tensor::from_vec(vec![-0.8], &[1]).unwrap();
        let eps = Tensor::from_vec(vec![0.3], &[1]).unwrap();
        let t = 400;
        let g = sds_grad(&d, &x, Cond::Class(0), 0.0, t, &eps).unwrap();
        let z = d.schedule().add_noise(&x, t, &eps).unwrap();
        let en = d
            .predict_noise(&z, t, CondSpec::All(Cond::Null), None)
            .unwrap();
        let a: f64 = d.schedule().alpha(t).unwrap();
        assert_eq!(g.data()[0], (en.data()[0] - eps.data()[0]) * a);
    }

    #[test]
    fn scaling_identity_embedding_and_adapter() {
        // At alpha = null copy / zero-init adapter, w * normalized == sds.
        let d = make_network::<f32>(NetConfig::new(2, 2), sched(), 5);
        let emb = LearnableEmbedding::init(&d);
        let adapter = attach_adapter(&d, 3, 0.5, 6).unwrap();
        let mut rng = stream(77, &[lane::NOISE]);
        for case in 0..6u64 {
            let x = Tensor::<f32>::randn(&[1, 2], &mut rng);
            let eps = Tensor::<f32>::randn(&[1, 2], &mut rng);
            let t = 100 + (case as usize) * 150;
            for w in [1.0, 7.5, 100.0, 1000.0] {
                let base = sds_grad(&d, &x, Cond::Class(1), w, t, &eps).unwrap();
                for state in [
                    AlignState::Embedding(&emb),
                    AlignState::Adapter(&adapter),
                ] {
                    let norm =
                        normalized_sds_grad(&d, &x, Cond::Class(1), state, w, t, &eps)
                            .unwrap()
                            .scale(w as f32);
                    for (a, b) in norm.data().iter().zip(base.data()) {
                        assert!(
                            rel_close(*a as f64, *b as f64, 1e-6),
                            "w={w} {a} vs {b}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn normalized_w1_is_reference_form() {
        let d = sandbox().denoiser::<f64>();
        let emb = LearnableEmbedding::init(&d);
        let x = Tensor::from_vec(vec![0.2], &[1]).unwrap();
        let eps = Tensor::from_vec(vec![-0.7], &[1]).unwrap();
        let t = 321;
        let a = normalized_sds_grad(&d, &x, Cond::Class(0), AlignState::Embedding(&emb), 1.0, t, &eps)
            .unwrap();
        let b = reference_sds_grad(&d, &x, Cond::Class(0), t, &eps).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn large_w_matches_limit() {
        let d = make_network::<f32>(NetConfig::new(2, 1), sched(), 8);
        let emb = LearnableEmbedding::init(&d);
        let mut rng = stream(3, &[lane::NOISE]);
        let x = Tensor::<f32>::randn(&[1, 2], &mut rng);
        let eps = Tensor::<f32>::randn(&[1, 2], &mut rng);
        let t = 555;
        let big = normalized_sds_grad(
            &d,
            &x,
            Cond::Class(0),
            AlignState::Embedding(&emb),
            1e9,
            t,
            &eps,
        )
        .unwrap();
        let lim = limit_grad(&d, &x, Cond::Class(0), AlignState::Embedding(&emb), t, &eps).unwrap();
        for (a, b) in big.data().iter().zip(lim.data()) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
        let inf = normalized_sds_grad(
            &d,
            &x,
            Cond::Class(0),
            AlignState::Embedding(&emb),
            f64::INFINITY,
            t,
            &eps,
        )
        .unwrap();
        assert_eq!(inf.data(), lim.data());
    }

    #[test]
    fn dds_zero_identity_and_editing_sign() {
        let d = sandbox().denoiser::<f64>();
        let x = Tensor::from_vec(vec![0.45], &[1]).unwrap();
        let eps = Tensor::from_vec(vec![1.3], &[1]).unwrap();
        let g = dds_grad(&d, &x, Cond::Class(0), &x, Cond::Class(0), 7.5, 300, &eps).unwrap();
        assert_eq!(g.data(), &[0.0]);

        // target mean 1 (class 0), source condition null (mean 0): starting
        // at the source observable, descent moves x toward the target mean.
        let g = dds_grad(&d, &x, Cond::Class(0), &x, Cond::Null, 1.0, 300, &eps).unwrap();
        assert!(g.data()[0] < 0.0, "descent direction must be positive");
    }

    #[test]
    fn vsd_grad_at_zero_init_matches_cfg_direction() {
        let d = make_network::<f64>(NetConfig::new(2, 1), sched(), 12);
        let adapter = attach_adapter(&d, 2, 0.5, 13).unwrap();
        let mut rng = stream(14, &[lane::NOISE]);
        let x = Tensor::<f64>::randn(&[1, 2], &mut rng);
        let eps = Tensor::<f64>::randn(&[1, 2], &mut rng);
        let t = 444;
        for w in [1.0, 7.5, 100.0] {
            let g = vsd_grad(&d, &adapter, &x, Cond::Class(0), w, t, &eps).unwrap();
            let z = d.schedule().add_noise(&x, t, &eps).unwrap();
            let ey = d.predict_noise(&z, t, CondSpec::All(Cond::Class(0)), None).unwrap();
            let en = d.predict_noise(&z, t, CondSpec::All(Cond::Null), None).unwrap();
            let a: f64 = d.schedule().alpha(t).unwrap();
            let expect = ey.sub(&en).unwrap().scale((w - 1.0) * a);
            for (gi, ei) in g.data().iter().zip(expect.data()) {
                assert!(rel_close(*gi, *ei, 1e-9), "w={w}: {gi} vs {ei}");
            }
            if w == 1.0 {
                assert!(g.data().iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn adapter_fit_step_decreases_its_loss() {
        let d = make_network::<f64>(NetConfig::new(2, 1), sched(), 20);
        let mut adapter = attach_adapter(&d, 2, 0.5, 21).unwrap();
        let mut rng = stream(22, &[lane::NOISE]);
        let x = Tensor::<f64>::randn(&[4, 2], &mut rng);
        let eps = Tensor::<f64>::randn(&[4, 2], &mut rng);
        let t = 350;
        let (l0, grads) = vsd_adapter_fit(&d, &adapter, &x, Cond::Class(0), t, &eps).unwrap();
        let mut opt = Sgd::new(SgdConfig {
            lr: 1e-2,
            ..Default::default()
        });
        let mut params: Vec<&mut Tensor<f64>> = Vec::new();
        for layer in &mut adapter.layers {
            params.push(&mut layer.down);
            params.push(&mut layer.up);
        }
        let refs: Vec<&Tensor<f64>> = grads.iter().collect();
        opt.step(&mut params, &refs).unwrap();
        let (l1, _) = vsd_adapter_fit(&d, &adapter, &x, Cond::Class(0), t, &eps).unwrap();
        assert!(l1 < l0, "{l1} !< {l0}");
    }

    #[test]
    fn alignment_step_decreases_frozen_pair_loss() {
        let d = sandbox().denoiser::<f64>();
        let mut emb = LearnableEmbedding::init(&d);
        let x = Tensor::from_vec(vec![0.6], &[1]).unwrap();
        let eps = Tensor::from_vec(vec![0.9], &[1]).unwrap();
        let t = 700;
        let (l0, grads) = alignment_loss(&d, &x, AlignState::Embedding(&emb), t, &eps).unwrap();
        for (p, g) in emb.alpha.data_mut().iter_mut().zip(grads[0].data()) {
            *p -= 0.05 * g;
        }
        let (l1, _) = alignment_loss(&d, &x, AlignState::Embedding(&emb), t, &eps).unwrap();
        assert!(l1 < l0, "{l1} !< {l0}");
    }

    #[test]
    fn alignment_has_no_guidance_input() {
        // Same probes, configs differing only in w: the loss bytes cannot
        // differ because w never enters the computation.
        let d = sandbox().denoiser::<f64>();
        let emb = LearnableEmbedding::init(&d);
        let x = Tensor::from_vec(vec![0.31], &[1]).unwrap();
        let eps = Tensor::from_vec(vec![-0.2], &[1]).unwrap();
        let (l, _) = alignment_loss(&d, &x, AlignState::Embedding(&emb), 250, &eps).unwrap();
        for _w in [1.0, 100.0, 1000.0] {
            let (l2, _) = alignment_loss(&d, &x, AlignState::Embedding(&emb), 250, &eps).unwrap();
            assert_eq!(l.to_bits(), l2.to_bits());
        }
    }

    #[test]
    fn per_step_op_budgets() {
        let sb = sandbox();
        let gen = Generator::identity(&[1, 1]);
        let theta0 = Tensor::from_vec(vec![0.0], &[1, 1]).unwrap();
        let netd = make_network::<f64>(NetConfig::new(1, 1), sched(), 2);
        let cases: &[(Variant, u64, u64)] = &[
            (Variant::Sds, 2, 0),
            (Variant::ReferenceSds, 1, 0),
            (Variant::NormalizedSds, 2, 0),
            (Variant::LodsEmbedding, 3, 1),
            (Variant::LodsAdapter, 3, 1),
            (Variant::Vsd, 4, 1),
        ];
        for &(variant, ef, eb) in cases {
            let cfg = PriorConfig {
                variant,
                w: 7.5,
                theta_opt: SgdConfig {
                    lr: 1e-3,
                    ..Default::default()
                },
                state_lr: 1e-3,
                ..Default::default()
            };
            // adapter variants need the network model
            let sbd = sb.denoiser::<f64>();
            let d: &Denoiser<f64> = if matches!(variant, Variant::LodsAdapter | Variant::Vsd) {
                &netd
            } else {
                &sbd
            };
            let run = lods_run(&cfg, &gen, &theta0, d, 3, None).unwrap();
            for rec in &run.records {
                assert_eq!((rec.forwards, rec.backwards), (ef, eb), "{variant:?}");
            }
        }
    }

    #[test]
    fn dds_run_with_same_source_keeps_theta() {
        let d = sandbox().denoiser::<f64>();
        let gen = Generator::identity(&[1, 1]);
        let theta0 = Tensor::from_vec(vec![0.45], &[1, 1]).unwrap();
        let cfg = PriorConfig {
            variant: Variant::Dds,
            w: 7.5,
            ..Default::default()
        };
        let src = theta0.clone();
        let run = lods_run(&cfg, &gen, &theta0, &d, 50, Some((&src, Cond::Class(0)))).unwrap();
        assert_eq!(run.theta.data(), theta0.data());
        for rec in &run.records {
            assert_eq!(rec.distill_grad_norm, 0.0);
            assert_eq!((rec.forwards, rec.backwards), (4, 0));
        }
    }

    #[test]
    fn sds_run_is_step_a_only() {
        let d = sandbox().denoiser::<f64>();
        let gen = Generator::identity(&[1, 1]);
        let theta0 = Tensor::from_vec(vec![0.0], &[1, 1]).unwrap();
        let cfg = PriorConfig {
            variant: Variant::Sds,
            w: 1.0,
            ..Default::default()
        };
        let run = lods_run(&cfg, &gen, &theta0, &d, 5, None).unwrap();
        assert!(run.records.iter().all(|r| r.alignment_loss.is_none()));
        assert!(matches!(run.state, RunState::None));
    }

    #[test]
    fn divergence_guard_aborts() {
        let d = sandbox().denoiser::<f64>();
        let gen = Generator::identity(&[1, 1]);
        let theta0 = Tensor::from_vec(vec![0.0], &[1, 1]).unwrap();
        let cfg = PriorConfig {
            variant: Variant::Sds,
            w: 1e9, // enormous finite guidance explodes the iterates
            theta_opt: SgdConfig {
                lr: 1e6,
                ..Default::default()
            },
            ..Default::default()
        };
        match lods_run(&cfg, &gen, &theta0, &d, 500, None) {
            Err(Error::Diverged { .. }) => {}
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn infinite_w_rejected_for_plain_sds() {
        let cfg = PriorConfig {
            variant: Variant::Sds,
            w: f64::INFINITY,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        let ok = PriorConfig {
            variant: Variant::LodsEmbedding,
            w: f64::INFINITY,
            ..Default::default()
        };
        assert!(ok.validate().is_ok());
    }
}
