//! Conditional noise-prediction models.
//!
//! Two families behind one interface: a small trainable MLP over
//! `[z_t, time features, condition embedding]`, and an analytic family that
//! is the exact optimal denoiser when each condition's data is Gaussian.
//! Low-rank adapters and a learnable copy of the null embedding plug into
//! the same forward pass.
//!
//! Forward/backward counters sit on the denoiser: every forward pass bumps
//! `forwards` once; callers that backpropagate through the model report it
//! via [`Denoiser::note_backward`].

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::optim::{Adam, AdamConfig};
use crate::rng::{lane, stream};
use crate::schedule::{NoiseSchedule, TimestepPolicy};
use crate::tape::{Tape, Var};
use crate::tensor::{c, Scalar, Tensor};
use crate::{Error, Result};

/// A class label or the unconditional marker.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Cond {
    Class(usize),
    Null,
}

/// Condition input for one forward pass over a `[n, d]` batch.
#[derive(Debug, Clone, Copy)]
pub enum CondSpec<'a, T: Scalar> {
    /// Same condition for every row.
    All(Cond),
    /// One condition per row; length must equal the batch size.
    Rows(&'a [Cond]),
    /// Learnable vector replacing the condition embedding (network: length
    /// `embed_dim`; analytic: a data-space mean, length `data_dim`).
    Vector(&'a Tensor<T>),
}

/// Which parameter group the tape should treat as trainable.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trainable {
    Frozen,
    Weights,
    Adapter,
    Embedding,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetConfig {
    pub data_dim: usize,
    pub n_classes: usize,
    pub hidden: usize,
    pub embed_dim: usize,
    pub time_feats: usize,
}

impl NetConfig {
    pub fn new(data_dim: usize, n_classes: usize) -> Self {
        NetConfig {
            data_dim,
            n_classes,
            hidden: 128,
            embed_dim: 16,
            time_feats: 16,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.data_dim + self.time_feats + self.embed_dim
    }
}

/// MLP weights. `cond_table` has one row per class plus a final null row.
#[derive(Debug, Clone)]
pub struct NetworkParams<T> {
    pub cfg: NetConfig,
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
    pub w3: Tensor<T>,
    pub b3: Tensor<T>,
    pub wout: Tensor<T>,
    pub bout: Tensor<T>,
    pub cond_table: Tensor<T>,
}

/// Per-condition Gaussian data model; class means first, null mean last.
#[derive(Debug, Clone)]
pub struct AnalyticParams<T> {
    pub means: Vec<Tensor<T>>,
    pub vars: Vec<f64>,
}

// Variant sizes differ (a network carries nine tensors); one denoiser is
// built per run, so boxing would buy nothing.
#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)]
pub enum DenoiserKind<T> {
    Network(NetworkParams<T>),
    Analytic(AnalyticParams<T>),
}

#[derive(Debug)]
pub struct Denoiser<T: Scalar> {
    kind: DenoiserKind<T>,
    sched: Arc<NoiseSchedule>,
    n_classes: usize,
    data_dim: usize,
    forwards: AtomicU64,
    backwards: AtomicU64,
}

impl<T: Scalar> Clone for Denoiser<T> {
    fn clone(&self) -> Self {
        Denoiser {
            kind: self.kind.clone(),
            sched: Arc::clone(&self.sched),
            n_classes: self.n_classes,
            data_dim: self.data_dim,
            forwards: AtomicU64::new(self.forwards.load(Ordering::Relaxed)),
            backwards: AtomicU64::new(self.backwards.load(Ordering::Relaxed)),
        }
    }
}

/// Low-rank delta on one linear layer: `W + scale * down @ up`.
#[derive(Debug, Clone)]
pub struct AdapterLayer<T> {
    pub down: Tensor<T>,
    pub up: Tensor<T>,
}

/// Adapters for the three hidden linear layers of the network variant.
#[derive(Debug, Clone)]
pub struct AdapterSet<T> {
    pub layers: Vec<AdapterLayer<T>>,
    pub rank: usize,
    pub scale: f64,
}

impl<T: Scalar> AdapterSet<T> {
    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.down.numel() + l.up.numel())
            .sum()
    }
}

/// Learnable copy of the null embedding.
#[derive(Debug, Clone)]
pub struct LearnableEmbedding<T> {
    pub alpha: Tensor<T>,
}

impl<T: Scalar> LearnableEmbedding<T> {
    /// Initialized as an exact copy of the denoiser's null embedding.
    pub fn init(d: &Denoiser<T>) -> Self {
        LearnableEmbedding {
            alpha: d.null_embedding(),
        }
    }
}

/// Prediction plus handles to whatever the tape treats as trainable,
/// in a stable (name, var) order.
pub struct ForwardOut {
    pub pred: Var,
    pub trainables: Vec<(String, Var)>,
}

/// Build a trainable network denoiser with seeded initialization.
pub fn make_network<T: Scalar>(
    cfg: NetConfig,
    sched: Arc<NoiseSchedule>,
    seed: u64,
) -> Denoiser<T> {
    let mut rng = stream(seed, &[lane::INIT]);
    let he = |rng: &mut _, rows: usize, cols: usize| {
        Tensor::<T>::randn(&[rows, cols], rng).scale(c((1.0 / rows as f64).sqrt()))
    };
    let (i, h, d) = (cfg.input_dim(), cfg.hidden, cfg.data_dim);
    let params = NetworkParams {
        cfg,
        w1: he(&mut rng, i, h),
        b1: Tensor::zeros(&[1, h]),
        w2: he(&mut rng, h, h),
        b2: Tensor::zeros(&[1, h]),
        w3: he(&mut rng, h, h),
        b3: Tensor::zeros(&[1, h]),
        wout: he(&mut rng, h, d),
        bout: Tensor::zeros(&[1, d]),
        cond_table: Tensor::randn(&[cfg.n_classes + 1, cfg.embed_dim], &mut rng)
            .scale(c(0.1)),
    };
    Denoiser {
        kind: DenoiserKind::Network(params),
        sched,
        n_classes: cfg.n_classes,
        data_dim: cfg.data_dim,
        forwards: AtomicU64::new(0),
        backwards: AtomicU64::new(0),
    }
}

/// Build the analytic optimal denoiser for per-condition Gaussian data.
/// `class_means[i]` pairs with `class_vars[i]`; the null condition gets its
/// own mean and variance.
pub fn make_analytic<T: Scalar>(
    class_means: Vec<Tensor<T>>,
    class_vars: Vec<f64>,
    null_mean: Tensor<T>,
    null_var: f64,
    sched: Arc<NoiseSchedule>,
) -> Result<Denoiser<T>> {
    if class_means.len() != class_vars.len() {
        return Err(Error::Invalid {
            what: "analytic denoiser".into(),
            expected: format!("{} variances", class_means.len()),
            got: class_vars.len().to_string(),
        });
    }
    let data_dim = null_mean.numel();
    for m in &class_means {
        if m.numel() != data_dim {
            return Err(Error::ShapeMismatch {
                op: "make_analytic".into(),
                lhs: m.shape().to_vec(),
                rhs: null_mean.shape().to_vec(),
            });
        }
    }
    for &v in class_vars.iter().chain(std::iter::once(&null_var)) {
        if v < 0.0 || !v.is_finite() {
            return Err(Error::Invalid {
                what: "analytic variance".into(),
                expected: ">= 0".into(),
                got: v.to_string(),
            });
        }
    }
    let n_classes = class_means.len();
    let mut means = class_means;
    means.push(null_mean);
    let mut vars = class_vars;
    vars.push(null_var);
    Ok(Denoiser {
        kind: DenoiserKind::Analytic(AnalyticParams { means, vars }),
        sched,
        n_classes,
        data_dim,
        forwards: AtomicU64::new(0),
        backwards: AtomicU64::new(0),
    })
}

/// Attach zero-delta low-rank adapters to the three hidden layers.
pub fn attach_adapter<T: Scalar>(
    d: &Denoiser<T>,
    rank: usize,
    scale: f64,
    seed: u64,
) -> Result<AdapterSet<T>> {
    let DenoiserKind::Network(net) = &d.kind else {
        return Err(Error::Invalid {
            what: "attach_adapter".into(),
            expected: "network denoiser".into(),
            got: "analytic".into(),
        });
    };
    let dims = [
        (net.cfg.input_dim(), net.cfg.hidden),
        (net.cfg.hidden, net.cfg.hidden),
        (net.cfg.hidden, net.cfg.hidden),
    ];
    let min_width = dims.iter().map(|(a, b)| (*a).min(*b)).min().unwrap();
    if rank == 0 || rank > min_width {
        return Err(Error::Invalid {
            what: "adapter rank".into(),
            expected: format!("1..={min_width}"),
            got: rank.to_string(),
        });
    }
    let mut rng = stream(seed, &[lane::ADAPTER]);
    let layers = dims
        .iter()
        .map(|&(i, o)| AdapterLayer {
            down: Tensor::randn(&[i, rank], &mut rng).scale(c((1.0 / i as f64).sqrt())),
            // up starts at zero so the adapted model equals the base model.
            up: Tensor::zeros(&[rank, o]),
        })
        .collect();
    Ok(AdapterSet {
        layers,
        rank,
        scale,
    })
}

impl<T: Scalar> Denoiser<T> {
    pub fn schedule(&self) -> &Arc<NoiseSchedule> {
        &self.sched
    }

    pub fn data_dim(&self) -> usize {
        self.data_dim
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn kind(&self) -> &DenoiserKind<T> {
        &self.kind
    }

    pub fn kind_mut(&mut self) -> &mut DenoiserKind<T> {
        &mut self.kind
    }

    pub fn is_network(&self) -> bool {
        matches!(self.kind, DenoiserKind::Network(_))
    }

    /// (forwards, backwards) since construction or the last reset.
    pub fn counts(&self) -> (u64, u64) {
        (
            self.forwards.load(Ordering::Relaxed),
            self.backwards.load(Ordering::Relaxed),
        )
    }

    pub fn reset_counts(&self) {
        self.forwards.store(0, Ordering::Relaxed);
        self.backwards.store(0, Ordering::Relaxed);
    }

    /// Record one backward pass through the model. Called by training and
    /// alignment code right after `tape.backward` over a forward of this
    /// denoiser.
    pub fn note_backward(&self) {
        self.backwards.fetch_add(1, Ordering::Relaxed);
    }

    /// The null embedding: condition-table null row (network) or the
    /// unconditional mean (analytic).
    pub fn null_embedding(&self) -> Tensor<T> {
        match &self.kind {
            DenoiserKind::Network(net) => {
                let e = net.cfg.embed_dim;
                let row = self.n_classes;
                Tensor::from_vec(
                    net.cond_table.data()[row * e..(row + 1) * e].to_vec(),
                    &[e],
                )
                .expect("table row")
            }
            DenoiserKind::Analytic(a) => a.means[self.n_classes].clone(),
        }
    }

    fn cond_row(&self, cond: Cond) -> Result<usize> {
        match cond {
            Cond::Class(i) if i < self.n_classes => Ok(i),
            Cond::Class(i) => Err(Error::UnknownCondition {
                id: i,
                rows: self.n_classes,
            }),
            Cond::Null => Ok(self.n_classes),
        }
    }

    fn resolve_rows(&self, cond: CondSpec<'_, T>, n: usize) -> Result<Option<Vec<usize>>> {
        match cond {
            CondSpec::All(cnd) => {
                let row = self.cond_row(cnd)?;
                Ok(Some(vec![row; n]))
            }
            CondSpec::Rows(conds) => {
                if conds.len() != n {
                    return Err(Error::ShapeMismatch {
                        op: "cond rows".into(),
                        lhs: vec![conds.len()],
                        rhs: vec![n],
                    });
                }
                Ok(Some(
                    conds.iter().map(|&cnd| self.cond_row(cnd)).collect::<Result<_>>()?,
                ))
            }
            CondSpec::Vector(_) => Ok(None),
        }
    }

    /// One forward pass on `tape`. `z` must already be on the tape with
    /// shape `[n, data_dim]`. Parameters enter the tape as trainable leaves
    /// or constants according to `train`; trainable handles are returned in
    /// a stable order for gradient extraction.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        z: Var,
        t: usize,
        cond: CondSpec<'_, T>,
        adapter: Option<&AdapterSet<T>>,
        train: Trainable,
    ) -> Result<ForwardOut> {
        let shape = tape.value(z).shape().to_vec();
        if shape.len() != 2 || shape[1] != self.data_dim {
            return Err(Error::ShapeMismatch {
                op: "denoiser forward".into(),
                lhs: shape,
                rhs: vec![0, self.data_dim],
            });
        }
        let n = shape[0];
        let rows = self.resolve_rows(cond, n)?;
        let out = match &self.kind {
            DenoiserKind::Network(net) => {
                self.forward_network(tape, net, z, t, cond, rows, adapter, train)?
            }
            DenoiserKind::Analytic(a) => {
                self.forward_analytic(tape, a, z, t, cond, rows, train)?
            }
        };
        self.forwards.fetch_add(1, Ordering::Relaxed);
        Ok(out)
    }

    #[allow(clippy::too_many_arguments)]
    fn forward_network(
        &self,
        tape: &mut Tape<T>,
        net: &NetworkParams<T>,
        z: Var,
        t: usize,
        cond: CondSpec<'_, T>,
        rows: Option<Vec<usize>>,
        adapter: Option<&AdapterSet<T>>,
        train: Trainable,
    ) -> Result<ForwardOut> {
        let n = tape.value(z).shape()[0];
        self.sched.alpha::<T>(t)?; // validates t
        let mut trainables = Vec::new();

        let weights_on = train == Trainable::Weights;
        let mut reg = |tape: &mut Tape<T>, name: &str, val: &Tensor<T>| {
            let v = tape.leaf(val.clone(), weights_on);
            if weights_on {
                trainables.push((name.to_string(), v));
            }
            v
        };
        let w1 = reg(tape, "net.w1", &net.w1);
        let b1 = reg(tape, "net.b1", &net.b1);
        let w2 = reg(tape, "net.w2", &net.w2);
        let b2 = reg(tape, "net.b2", &net.b2);
        let w3 = reg(tape, "net.w3", &net.w3);
        let b3 = reg(tape, "net.b3", &net.b3);
        let wout = reg(tape, "net.wout", &net.wout);
        let bout = reg(tape, "net.bout", &net.bout);
        let table = reg(tape, "net.cond_table", &net.cond_table);

        let feats = time_features::<T>(t, net.cfg.time_feats);
        let mut fdata = Vec::with_capacity(n * net.cfg.time_feats);
        for _ in 0..n {
            fdata.extend_from_slice(&feats);
        }
        let tfeat = tape.constant(Tensor::from_vec(fdata, &[n, net.cfg.time_feats])?);

        let cemb = match (&rows, cond) {
            (Some(ids), _) => tape.embed_lookup(table, ids)?,
            (None, CondSpec::Vector(alpha)) => {
                if alpha.numel() != net.cfg.embed_dim {
                    return Err(Error::ShapeMismatch {
                        op: "embedding vector".into(),
                        lhs: alpha.shape().to_vec(),
                        rhs: vec![net.cfg.embed_dim],
                    });
                }
                let leaf = tape.leaf(alpha.clone(), train == Trainable::Embedding);
                if train == Trainable::Embedding {
                    trainables.push(("embedding".to_string(), leaf));
                }
                tape.repeat_rows(leaf, n)?
            }
            _ => unreachable!("rows resolved for class conditions"),
        };

        let x = tape.concat(&[z, tfeat, cemb], 1)?;

        let adapter_on = train == Trainable::Adapter;
        let mut adapter_vars = Vec::new();
        if let Some(set) = adapter {
            for (li, layer) in set.layers.iter().enumerate() {
                let down = tape.leaf(layer.down.clone(), adapter_on);
                let up = tape.leaf(layer.up.clone(), adapter_on);
                if adapter_on {
                    trainables.push((format!("adapter.{li}.down"), down));
                    trainables.push((format!("adapter.{li}.up"), up));
                }
                adapter_vars.push((down, up));
            }
        }

        let scale = adapter.map(|s| c::<T>(s.scale)).unwrap_or_else(T::zero);
        let linear = |tape: &mut Tape<T>, x: Var, w: Var, b: Var, li: usize| -> Result<Var> {
            let mut h = tape.matmul(x, w)?;
            if let Some(&(down, up)) = adapter_vars.get(li) {
                let lo = tape.matmul(x, down)?;
                let delta = tape.matmul(lo, up)?;
                let delta = tape.scale(delta, scale);
                h = tape.add(h, delta)?;
            }
            tape.add(h, b)
        };

        let h1 = linear(tape, x, w1, b1, 0)?;
        let h1 = tape.silu(h1);
        let h2 = linear(tape, h1, w2, b2, 1)?;
        let h2 = tape.silu(h2);
        let h3 = linear(tape, h2, w3, b3, 2)?;
        let h3 = tape.silu(h3);
        let out = tape.matmul(h3, wout)?;
        let pred = tape.add(out, bout)?;

        Ok(ForwardOut { pred, trainables })
    }

    #[allow(clippy::too_many_arguments)]
    fn forward_analytic(
        &self,
        tape: &mut Tape<T>,
        a: &AnalyticParams<T>,
        z: Var,
        t: usize,
        cond: CondSpec<'_, T>,
        rows: Option<Vec<usize>>,
        train: Trainable,
    ) -> Result<ForwardOut> {
        let n = tape.value(z).shape()[0];
        let d = self.data_dim;
        let alpha: f64 = self.sched.alpha(t)?;
        let sigma: f64 = self.sched.sigma(t)?;
        let mut trainables = Vec::new();

        // eps_hat = sigma_t * (z - alpha_t * mu) / (alpha_t^2 var + sigma_t^2),
        // with mu and the denominator chosen per row condition.
        let (mu_rows, factor): (Var, Var) = match (&rows, cond) {
            (Some(ids), _) => {
                let mut mdata = Vec::with_capacity(n * d);
                let mut fdata = Vec::with_capacity(n);
                for &i in ids {
                    mdata.extend_from_slice(a.means[i].data());
                    let den = alpha * alpha * a.vars[i] + sigma * sigma;
                    fdata.push(c::<T>(sigma / den));
                }
                let mu = tape.constant(Tensor::from_vec(mdata, &[n, d])?);
                let f = tape.constant(Tensor::from_vec(fdata, &[n, 1])?);
                (mu, f)
            }
            (None, CondSpec::Vector(alpha_vec)) => {
                if alpha_vec.numel() != d {
                    return Err(Error::ShapeMismatch {
                        op: "analytic embedding".into(),
                        lhs: alpha_vec.shape().to_vec(),
                        rhs: vec![d],
                    });
                }
                let leaf = tape.leaf(alpha_vec.clone(), train == Trainable::Embedding);
                if train == Trainable::Embedding {
                    trainables.push(("embedding".to_string(), leaf));
                }
                let mu = tape.repeat_rows(leaf, n)?;
                // learnable mean replaces the null branch; keep its variance
                let den = alpha * alpha * a.vars[self.n_classes] + sigma * sigma;
                let f = tape.constant(Tensor::full(&[n, 1], c::<T>(sigma / den)));
                (mu, f)
            }
            _ => unreachable!("rows resolved for class conditions"),
        };

        let amu = tape.scale(mu_rows, c::<T>(alpha));
        let resid = tape.sub(z, amu)?;
        let pred = tape.mul(resid, factor)?;
        Ok(ForwardOut { pred, trainables })
    }

    /// Value-only prediction: builds a throwaway tape, returns the noise
    /// estimate shaped like `z` (rank-1 inputs accepted).
    pub fn predict_noise(
        &self,
        z: &Tensor<T>,
        t: usize,
        cond: CondSpec<'_, T>,
        adapter: Option<&AdapterSet<T>>,
    ) -> Result<Tensor<T>> {
        let rank1 = z.shape().len() == 1;
        let z2 = if rank1 {
            z.reshape(&[1, z.numel()])?
        } else {
            z.clone()
        };
        let mut tape = Tape::new();
        let zv = tape.constant(z2);
        let out = self.forward(&mut tape, zv, t, cond, adapter, Trainable::Frozen)?;
        let pred = tape.value(out.pred).clone();
        if rank1 {
            pred.reshape(&[z.numel()])
        } else {
            Ok(pred)
        }
    }
}

/// Sinusoidal features of the raw timestep index, half sines half cosines.
fn time_features<T: Scalar>(t: usize, count: usize) -> Vec<T> {
    let half = (count / 2).max(1);
    let mut out = Vec::with_capacity(count);
    for k in 0..count {
        let i = k % half;
        let freq = 10_000f64.powf(-(i as f64) / half as f64);
        let ang = t as f64 * freq;
        out.push(c(if k < half { ang.sin() } else { ang.cos() }));
    }
    out
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Probability of replacing a sample's condition with the null marker.
    pub drop_prob: f64,
    pub seed: u64,
    pub policy: TimestepPolicy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 5000,
            batch: 64,
            lr: 1e-3,
            drop_prob: 0.1,
            seed: 0,
            policy: TimestepPolicy::default(),
        }
    }
}

/// Denoising score-matching training: Adam on `||eps_hat(z_t; y, t) - eps||^2`
/// with per-sample condition dropout. Returns the per-step loss curve.
pub fn train_denoiser<T: Scalar>(
    d: &mut Denoiser<T>,
    xs: &Tensor<T>,
    labels: &[usize],
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    if !d.is_network() {
        return Err(Error::Invalid {
            what: "train_denoiser".into(),
            expected: "network denoiser".into(),
            got: "analytic".into(),
        });
    }
    let shape = xs.shape().to_vec();
    if shape.len() != 2 || shape[1] != d.data_dim() || shape[0] == 0 {
        return Err(Error::ShapeMismatch {
            op: "train data".into(),
            lhs: shape,
            rhs: vec![1, d.data_dim()],
        });
    }
    if labels.len() != shape[0] {
        return Err(Error::ShapeMismatch {
            op: "train labels".into(),
            lhs: vec![labels.len()],
            rhs: vec![shape[0]],
        });
    }
    if !(0.0..1.0).contains(&cfg.drop_prob) {
        return Err(Error::Invalid {
            what: "drop_prob".into(),
            expected: "[0, 1)".into(),
            got: cfg.drop_prob.to_string(),
        });
    }

    let (n, dim) = (shape[0], shape[1]);
    let sched = Arc::clone(d.schedule());
    let mut opt = Adam::new(AdamConfig {
        lr: cfg.lr,
        ..Default::default()
    });
    let mut losses = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps as u64 {
        let t = {
            let mut rng = stream(cfg.seed, &[lane::TIMESTEP, step]);
            sched.sample_timestep(cfg.policy, &mut rng)?
        };
        let mut brng = stream(cfg.seed, &[lane::DATA, step]);
        let mut drng = stream(cfg.seed, &[lane::DROPOUT, step]);
        let mut batch = Vec::with_capacity(cfg.batch * dim);
        let mut conds = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch {
            let i = brng.gen_range(0..n);
            batch.extend_from_slice(&xs.data()[i * dim..(i + 1) * dim]);
            let dropped = cfg.drop_prob > 0.0 && drng.gen::<f64>() < cfg.drop_prob;
            conds.push(if dropped {
                Cond::Null
            } else {
                Cond::Class(labels[i])
            });
        }
        let xb = Tensor::from_vec(batch, &[cfg.batch, dim])?;
        let mut nrng = stream(cfg.seed, &[lane::NOISE, step]);
        let eps = Tensor::randn(&[cfg.batch, dim], &mut nrng);
        let z = sched.add_noise(&xb, t, &eps)?;

        let mut tape = Tape::new();
        let zv = tape.constant(z);
        let ev = tape.constant(eps);
        let out = d.forward(&mut tape, zv, t, CondSpec::Rows(&conds), None, Trainable::Weights)?;
        let mut loss = tape.mse(out.pred, ev)?;
        let lw: T = sched.loss_weight(t)?;
        if lw != T::one() {
            loss = tape.scale(loss, lw);
        }
        tape.backward(loss)?;
        d.note_backward();
        losses.push(tape.value(loss).item().to_f64());

        let grads: Vec<Tensor<T>> = out
            .trainables
            .iter()
            .map(|(_, v)| tape.grad_or_zero(*v))
            .collect();
        let DenoiserKind::Network(net) = d.kind_mut() else {
            unreachable!()
        };
        let mut params: Vec<&mut Tensor<T>> = vec![
            &mut net.w1,
            &mut net.b1,
            &mut net.w2,
            &mut net.b2,
            &mut net.w3,
            &mut net.b3,
            &mut net.wout,
            &mut net.bout,
            &mut net.cond_table,
        ];
        debug_assert_eq!(params.len(), grads.len());
        let grad_refs: Vec<&Tensor<T>> = grads.iter().collect();
        opt.step(&mut params, &grad_refs)?;
    }
    Ok(losses)
}
