//! Differentiable parameterizations `g: theta -> x`.
//!
//! Two kinds: identity (the observable is the parameter vector itself) and a
//! 2D anisotropic Gaussian splat rasterizer with back-to-front alpha
//! compositing over a fixed background. Depth comes from a static per-splat
//! z value carried inside theta; it orders compositing but never receives
//! gradient, so storage order is irrelevant and no sort flip can break
//! differentiability.

use serde::{Deserialize, Serialize};

use crate::tape::{Tape, Var};
use crate::tensor::{c, Scalar, Tensor};
use crate::{Error, Result};

/// Per-splat parameter block, in theta order:
/// `[cx, cy, log_sx, log_sy, angle, z, color_0..color_{C-1}, opacity_logit]`.
/// Centers are in image units ([0,1] spans the canvas); color and opacity
/// are pre-sigmoid; scales are logs of standard deviations in image units.
pub const SPLAT_FIXED_FIELDS: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplatConfig {
    pub k: usize,
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub background: f64,
}

impl Default for SplatConfig {
    fn default() -> Self {
        SplatConfig {
            k: 16,
            width: 16,
            height: 16,
            channels: 1,
            background: 0.0,
        }
    }
}

impl SplatConfig {
    pub fn stride(&self) -> usize {
        SPLAT_FIXED_FIELDS + self.channels + 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Generator {
    /// `x = theta`, any shape.
    Identity { shape: Vec<usize> },
    Splats(SplatConfig),
}

impl Generator {
    pub fn identity(shape: &[usize]) -> Self {
        Generator::Identity {
            shape: shape.to_vec(),
        }
    }

    /// Flat theta length.
    pub fn theta_len(&self) -> usize {
        match self {
            Generator::Identity { shape } => shape.iter().product(),
            Generator::Splats(cfg) => cfg.k * cfg.stride(),
        }
    }

    /// Render output shape: identity keeps theta's shape; splats emit
    /// `[channels, height, width]`.
    pub fn out_shape(&self) -> Vec<usize> {
        match self {
            Generator::Identity { shape } => shape.clone(),
            Generator::Splats(cfg) => vec![cfg.channels, cfg.height, cfg.width],
        }
    }

    fn check_theta<T: Scalar>(&self, theta: &Tensor<T>) -> Result<()> {
        if theta.numel() != self.theta_len() {
            return Err(Error::ShapeMismatch {
                op: "render".into(),
                lhs: theta.shape().to_vec(),
                rhs: vec![self.theta_len()],
            });
        }
        Ok(())
    }

    /// Seeded neutral initialization: identity draws small normal values;
    /// splats get uniform centers, small isotropic scales, distinct static
    /// depths, mid-gray colors, opacity logit -1.
    pub fn init_theta<T: Scalar>(&self, seed: u64) -> Tensor<T> {
        use rand::Rng;
        let mut rng = crate::rng::stream(seed, &[crate::rng::lane::INIT]);
        match self {
            Generator::Identity { shape } => Tensor::randn(shape, &mut rng).scale(c(0.1)),
            Generator::Splats(cfg) => {
                let mut data = Vec::with_capacity(self.theta_len());
                for i in 0..cfg.k {
                    data.push(c(rng.gen_range(0.15..0.85))); // cx
                    data.push(c(rng.gen_range(0.15..0.85))); // cy
                    data.push(c((0.08f64).ln())); // log_sx
                    data.push(c((0.08f64).ln())); // log_sy
                    data.push(T::zero()); // angle
                    // distinct static depth; spacing avoids ties
                    data.push(c((i as f64 + 1.0) / (cfg.k as f64 + 1.0)));
                    for _ in 0..cfg.channels {
                        data.push(T::zero()); // color logit -> 0.5
                    }
                    data.push(c(-1.0)); // opacity logit
                }
                Tensor::from_vec(data, &[self.theta_len()]).expect("layout length")
            }
        }
    }

    /// Record the render on `tape`. The returned value has shape
    /// `out_shape()` for identity and `[channels, width*height]` for splats
    /// (callers reshape values; tapes do not carry a reshape op).
    pub fn render_on_tape<T: Scalar>(&self, tape: &mut Tape<T>, theta: Var) -> Result<Var> {
        self.check_theta(tape.value(theta))?;
        match self {
            Generator::Identity { .. } => Ok(theta),
            Generator::Splats(cfg) => render_splats(tape, theta, cfg),
        }
    }

    /// Deterministic render to values, shaped `out_shape()`.
    pub fn render<T: Scalar>(&self, theta: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let tv = tape.constant(theta.clone());
        let out = self.render_on_tape(&mut tape, tv)?;
        tape.value(out).reshape(&self.out_shape())
    }

    /// Vector-Jacobian product: gradient of `sum(render(theta) * upstream)`
    /// with respect to theta, flat-shaped like theta.
    pub fn pullback<T: Scalar>(
        &self,
        theta: &Tensor<T>,
        upstream: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        if upstream.numel() != self.out_shape().iter().product::<usize>() {
            return Err(Error::ShapeMismatch {
                op: "pullback".into(),
                lhs: upstream.shape().to_vec(),
                rhs: self.out_shape(),
            });
        }
        let mut tape = Tape::new();
        let tv = tape.leaf(theta.clone(), true);
        let out = self.render_on_tape(&mut tape, tv)?;
        let out_shape = tape.value(out).shape().to_vec();
        let up = tape.constant(upstream.reshape(&out_shape)?);
        let prod = tape.mul(out, up)?;
        let root = tape.sum_all(prod);
        tape.backward(root)?;
        Ok(tape.grad_or_zero(tv))
    }
}

/// Alpha compositing of K rotated anisotropic Gaussians, farthest first:
/// `C <- (1 - a) * C + a * color` per channel over `[1, W*H]` rows.
fn render_splats<T: Scalar>(
    tape: &mut Tape<T>,
    theta: Var,
    cfg: &SplatConfig,
) -> Result<Var> {
    let p = cfg.width * cfg.height;
    let stride = cfg.stride();

    let mut pxd = Vec::with_capacity(p);
    let mut pyd = Vec::with_capacity(p);
    for row in 0..cfg.height {
        for col in 0..cfg.width {
            pxd.push(c::<T>((col as f64 + 0.5) / cfg.width as f64));
            pyd.push(c::<T>((row as f64 + 0.5) / cfg.height as f64));
        }
    }
    let px = tape.constant(Tensor::from_vec(pxd, &[1, p])?);
    let py = tape.constant(Tensor::from_vec(pyd, &[1, p])?);

    // static depth keys order compositing; values never enter the tape math
    let mut order: Vec<usize> = (0..cfg.k).collect();
    let depth_of = |i: usize| tape.value(theta).data()[i * stride + 5].to_f64();
    order.sort_by(|&a, &b| {
        depth_of(b)
            .partial_cmp(&depth_of(a))
            .expect("finite depth keys")
    });

    let mut channels: Vec<Var> = (0..cfg.channels)
        .map(|_| tape.constant(Tensor::full(&[1, p], c::<T>(cfg.background))))
        .collect();

    for i in order {
        let base = i * stride;
        let field = |tape: &mut Tape<T>, off: usize| tape.slice(theta, base + off, 1);
        let cx = field(tape, 0)?;
        let cy = field(tape, 1)?;
        let lsx = field(tape, 2)?;
        let lsy = field(tape, 3)?;
        let ang = field(tape, 4)?;
        let op_logit = field(tape, SPLAT_FIXED_FIELDS + cfg.channels)?;

        let qx = tape.sub(px, cx)?;
        let qy = tape.sub(py, cy)?;
        let ca = tape.cos(ang);
        let sa = tape.sin(ang);

        // rotate into the splat frame, scale by inverse std devs
        let qxc = tape.mul(qx, ca)?;
        let qys = tape.mul(qy, sa)?;
        let r1 = tape.add(qxc, qys)?;
        let qyc = tape.mul(qy, ca)?;
        let qxs = tape.mul(qx, sa)?;
        let r2 = tape.sub(qyc, qxs)?;

        let nlsx = tape.scale(lsx, -T::one());
        let nlsy = tape.scale(lsy, -T::one());
        let inv_sx = tape.exp(nlsx);
        let inv_sy = tape.exp(nlsy);
        let u1 = tape.mul(r1, inv_sx)?;
        let u2 = tape.mul(r2, inv_sy)?;
        let u1s = tape.square(u1);
        let u2s = tape.square(u2);
        let m = tape.add(u1s, u2s)?;
        let mh = tape.scale(m, c::<T>(-0.5));
        let gauss = tape.exp(mh);

        let opac = tape.sigmoid(op_logit);
        let alpha = tape.mul(gauss, opac)?;
        let neg_alpha = tape.scale(alpha, -T::one());
        let keep = tape.add_scalar(neg_alpha, T::one());

        for (ch, slot) in channels.iter_mut().enumerate() {
            let col_logit = field(tape, SPLAT_FIXED_FIELDS + ch)?;
            let col = tape.sigmoid(col_logit);
            let kept = tape.mul(*slot, keep)?;
            let add = tape.mul(alpha, col)?;
            *slot = tape.add(kept, add)?;
        }
    }

    tape.concat(&channels, 0)
}
