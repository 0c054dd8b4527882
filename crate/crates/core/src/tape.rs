//! Dynamic Wengert tape: reverse-mode differentiation over [`Tensor`]s.
//!
//! Operations are evaluated eagerly and recorded in creation order, so
//! replaying the tape backwards visits nodes in reverse topological order
//! exactly once. The tape is rebuilt per optimizer step; gradients
//! accumulate additively until [`Tape::zero_grads`] or a fresh tape.
//!
//! Single-threaded per tape. Distinct tapes share nothing and may live on
//! separate threads.

use crate::tensor::{c, Scalar, Tensor};
use crate::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var, T),
    Matmul(Var, Var),
    /// Rank-2 concatenation along `axis`.
    Concat { parts: Vec<Var>, axis: usize },
    SumAll(Var),
    MeanAll(Var),
    Silu(Var),
    Sigmoid(Var),
    Exp(Var),
    Square(Var),
    Sin(Var),
    Cos(Var),
    /// Mean squared error between two same-shape tensors (scalar output).
    Mse(Var, Var),
    Detach(#[allow(dead_code)] Var),
    /// Contiguous range of the flattened input, rank-1 output.
    Slice { x: Var, start: usize },
    /// Row gather: `table[ids[i], :]` stacked into `[ids.len(), cols]`.
    EmbedLookup { table: Var, ids: Vec<usize> },
    /// Tile a `[1, d]` (or `[d]`) tensor into `[n, d]`.
    RepeatRows { x: Var, n: usize },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// Recording tape. See the module docs.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    /// Per-pass flow buffer; folded into persistent grads at the end of each
    /// `backward` so repeated passes add fresh gradients instead of
    /// re-propagating already accumulated ones.
    pass: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            pass: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register a leaf tensor. Gradients accumulate on it iff `requires_grad`.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// Leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Gradient of a leaf, zeros if nothing flowed to it.
    pub fn grad_or_zero(&self, v: Var) -> Tensor<T> {
        match &self.nodes[v.0].grad {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.nodes[v.0].value.shape()),
        }
    }

    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_requires(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    // ---- primitives -------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(value, self.any_requires(&[a, b]), Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        Ok(self.push(value, self.any_requires(&[a, b]), Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).mul(self.value(b))?;
        Ok(self.push(value, self.any_requires(&[a, b]), Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, k: T) -> Var {
        let value = self.value(x).scale(k);
        self.push(value, self.any_requires(&[x]), Op::Scale(x, k))
    }

    pub fn add_scalar(&mut self, x: Var, k: T) -> Var {
        let value = self.value(x).map(|v| v + k);
        self.push(value, self.any_requires(&[x]), Op::AddScalar(x, k))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, self.any_requires(&[a, b]), Op::Matmul(a, b)))
    }

    /// Concatenate rank-2 tensors along `axis` (0 = rows, 1 = columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() || axis > 1 {
            return Err(Error::ShapeMismatch {
                op: "concat".into(),
                lhs: vec![parts.len()],
                rhs: vec![axis],
            });
        }
        let shapes: Vec<Vec<usize>> = parts
            .iter()
            .map(|p| self.value(*p).shape().to_vec())
            .collect();
        for s in &shapes {
            if s.len() != 2 || s[1 - axis] != shapes[0][1 - axis] {
                return Err(Error::ShapeMismatch {
                    op: "concat".into(),
                    lhs: shapes[0].clone(),
                    rhs: s.clone(),
                });
            }
        }
        let keep = shapes[0][1 - axis];
        let total: usize = shapes.iter().map(|s| s[axis]).sum();
        let out_shape = if axis == 0 {
            vec![total, keep]
        } else {
            vec![keep, total]
        };
        let mut data = Vec::with_capacity(total * keep);
        if axis == 0 {
            for p in parts {
                data.extend_from_slice(self.value(*p).data());
            }
        } else {
            for r in 0..keep {
                for (p, s) in parts.iter().zip(&shapes) {
                    let cols = s[1];
                    data.extend_from_slice(&self.value(*p).data()[r * cols..(r + 1) * cols]);
                }
            }
        }
        let value = Tensor::from_vec(data, &out_shape)?;
        Ok(self.push(
            value,
            self.any_requires(parts),
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, self.any_requires(&[x]), Op::SumAll(x))
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).mean());
        self.push(value, self.any_requires(&[x]), Op::MeanAll(x))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v * sigmoid(v));
        self.push(value, self.any_requires(&[x]), Op::Silu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        self.push(value, self.any_requires(&[x]), Op::Sigmoid(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.exp());
        self.push(value, self.any_requires(&[x]), Op::Exp(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v * v);
        self.push(value, self.any_requires(&[x]), Op::Square(x))
    }

    pub fn sin(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.sin());
        self.push(value, self.any_requires(&[x]), Op::Sin(x))
    }

    pub fn cos(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.cos());
        self.push(value, self.any_requires(&[x]), Op::Cos(x))
    }

    /// `mean((a - b)^2)`, scalar output. Shapes must match exactly.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::ShapeMismatch {
                op: "mse".into(),
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let mut acc = T::zero();
        for (&x, &y) in self.value(a).data().iter().zip(self.value(b).data()) {
            let d = x - y;
            acc = acc + d * d;
        }
        let value = Tensor::scalar(acc / c(self.value(a).numel() as f64));
        Ok(self.push(value, self.any_requires(&[a, b]), Op::Mse(a, b)))
    }

    /// Same values, no gradient flow through the result.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.push(value, false, Op::Detach(x))
    }

    /// Contiguous `[start, start+len)` range of the flattened input.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let src = self.value(x);
        if start + len > src.numel() {
            return Err(Error::ShapeMismatch {
                op: "slice".into(),
                lhs: src.shape().to_vec(),
                rhs: vec![start, len],
            });
        }
        let value = Tensor::from_vec(src.data()[start..start + len].to_vec(), &[len])?;
        Ok(self.push(value, self.any_requires(&[x]), Op::Slice { x, start }))
    }

    /// Gather rows of a `[v, d]` table into `[ids.len(), d]`.
    pub fn embed_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let shape = t.shape().to_vec();
        if shape.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "embed_lookup".into(),
                lhs: shape,
                rhs: vec![ids.len()],
            });
        }
        let (rows, cols) = (shape[0], shape[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::UnknownCondition { id: bad, rows });
        }
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            data.extend_from_slice(&t.data()[i * cols..(i + 1) * cols]);
        }
        let value = Tensor::from_vec(data, &[ids.len(), cols])?;
        Ok(self.push(
            value,
            self.any_requires(&[table]),
            Op::EmbedLookup {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Tile a single row into `n` identical rows.
    pub fn repeat_rows(&mut self, x: Var, n: usize) -> Result<Var> {
        let src = self.value(x);
        let d = match src.shape() {
            [d] => *d,
            [1, d] => *d,
            other => {
                return Err(Error::ShapeMismatch {
                    op: "repeat_rows".into(),
                    lhs: other.to_vec(),
                    rhs: vec![n],
                })
            }
        };
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n {
            data.extend_from_slice(src.data());
        }
        let value = Tensor::from_vec(data, &[n, d])?;
        Ok(self.push(value, self.any_requires(&[x]), Op::RepeatRows { x, n }))
    }

    // ---- backward ---------------------------------------------------------

    /// Backpropagate from a scalar root; accumulates `d(root)/d(leaf)` into
    /// every reachable leaf with `requires_grad`.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.nodes[root.0].value.numel() != 1 {
            return Err(Error::NonScalarRoot {
                shape: self.nodes[root.0].value.shape().to_vec(),
            });
        }
        self.pass.clear();
        self.pass.resize(root.0 + 1, None);
        self.pass[root.0] = Some(Tensor::scalar(T::one()));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(grad_out) = self.pass[i].clone() else {
                continue;
            };
            self.backward_op(i, &grad_out)?;
        }
        for (i, g) in std::mem::take(&mut self.pass).into_iter().enumerate() {
            if let Some(g) = g {
                self.accumulate(Var(i), &g);
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, g: &Tensor<T>) {
        let node = &mut self.nodes[v.0];
        debug_assert_eq!(node.value.shape(), g.shape());
        match &mut node.grad {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a = *a + *b;
                }
            }
            None => node.grad = Some(g.clone()),
        }
    }

    /// Accumulate `g` into the current pass for `v` if that branch wants
    /// gradient. Children always precede parents on the tape, so `v` is in
    /// range whenever `flow` runs inside a pass.
    fn flow(&mut self, v: Var, g: Tensor<T>) -> Result<()> {
        if self.nodes[v.0].requires_grad {
            let g = g.reduce_to(self.nodes[v.0].value.shape())?;
            match &mut self.pass[v.0] {
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a = *a + *b;
                    }
                }
                None => self.pass[v.0] = Some(g),
            }
        }
        Ok(())
    }

    fn backward_op(&mut self, i: usize, gout: &Tensor<T>) -> Result<()> {
        match self.nodes[i].op.clone() {
            Op::Leaf | Op::Detach(_) => {}
            Op::Add(a, b) => {
                self.flow(a, gout.clone())?;
                self.flow(b, gout.clone())?;
            }
            Op::Sub(a, b) => {
                self.flow(a, gout.clone())?;
                self.flow(b, gout.scale(-T::one()))?;
            }
            Op::Mul(a, b) => {
                let ga = gout.mul(self.value(b))?;
                let gb = gout.mul(self.value(a))?;
                self.flow(a, ga)?;
                self.flow(b, gb)?;
            }
            Op::Scale(x, k) => self.flow(x, gout.scale(k))?,
            Op::AddScalar(x, _) => self.flow(x, gout.clone())?,
            Op::Matmul(a, b) => {
                let ga = gout.matmul(&self.value(b).transpose2()?)?;
                let gb = self.value(a).transpose2()?.matmul(gout)?;
                self.flow(a, ga)?;
                self.flow(b, gb)?;
            }
            Op::Concat { parts, axis } => {
                let out_shape = self.nodes[i].value.shape().to_vec();
                let mut offset = 0;
                for p in parts {
                    let ps = self.value(p).shape().to_vec();
                    let g = if axis == 0 {
                        let n = ps[0] * ps[1];
                        Tensor::from_vec(gout.data()[offset..offset + n].to_vec(), &ps)?
                    } else {
                        let (rows, cols, total) = (ps[0], ps[1], out_shape[1]);
                        let mut data = Vec::with_capacity(rows * cols);
                        for r in 0..rows {
                            let base = r * total + offset;
                            data.extend_from_slice(&gout.data()[base..base + cols]);
                        }
                        Tensor::from_vec(data, &ps)?
                    };
                    offset += if axis == 0 { ps[0] * ps[1] } else { ps[1] };
                    self.flow(p, g)?;
                }
            }
            Op::SumAll(x) => {
                let g = Tensor::full(self.value(x).shape(), gout.item());
                self.flow(x, g)?;
            }
            Op::MeanAll(x) => {
                let n = self.value(x).numel();
                let g = Tensor::full(self.value(x).shape(), gout.item() / c(n as f64));
                self.flow(x, g)?;
            }
            Op::Silu(x) => {
                // d/dx x*s(x) = s(x) * (1 + x*(1 - s(x)))
                let g = self
                    .value(x)
                    .map(|v| {
                        let s = sigmoid(v);
                        s * (T::one() + v * (T::one() - s))
                    })
                    .mul(gout)?;
                self.flow(x, g)?;
            }
            Op::Sigmoid(x) => {
                let g = self.nodes[i]
                    .value
                    .map(|s| s * (T::one() - s))
                    .mul(gout)?;
                self.flow(x, g)?;
            }
            Op::Exp(x) => {
                let g = self.nodes[i].value.mul(gout)?;
                self.flow(x, g)?;
            }
            Op::Square(x) => {
                let g = self.value(x).scale(c(2.0)).mul(gout)?;
                self.flow(x, g)?;
            }
            Op::Sin(x) => {
                let g = self.value(x).map(|v| v.cos()).mul(gout)?;
                self.flow(x, g)?;
            }
            Op::Cos(x) => {
                let g = self.value(x).map(|v| -v.sin()).mul(gout)?;
                self.flow(x, g)?;
            }
            Op::Mse(a, b) => {
                let n = c::<T>(self.value(a).numel() as f64);
                let k = gout.item() * c::<T>(2.0) / n;
                let diff = self.value(a).sub(self.value(b))?;
                self.flow(a, diff.scale(k))?;
                self.flow(b, diff.scale(-k))?;
            }
            Op::Slice { x, start } => {
                let mut g = Tensor::zeros(self.value(x).shape());
                for (j, &v) in gout.data().iter().enumerate() {
                    g.data_mut()[start + j] = v;
                }
                self.flow(x, g)?;
            }
            Op::EmbedLookup { table, ids } => {
                let cols = self.value(table).shape()[1];
                let mut g = Tensor::zeros(self.value(table).shape());
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..cols {
                        let dst = id * cols + j;
                        g.data_mut()[dst] = g.data()[dst] + gout.data()[r * cols + j];
                    }
                }
                self.flow(table, g)?;
            }
            Op::RepeatRows { x, n } => {
                let d = self.value(x).numel();
                let mut g = Tensor::zeros(self.value(x).shape());
                for r in 0..n {
                    for j in 0..d {
                        g.data_mut()[j] = g.data()[j] + gout.data()[r * d + j];
                    }
                }
                self.flow(x, g)?;
            }
        }
        Ok(())
    }
}

#[inline]
fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t64(data: &[f64], shape: &[usize]) -> Tensor<f64> {
        Tensor::from_vec(data.to_vec(), shape).unwrap()
    }

    #[test]
    fn add_elementwise() {
        let mut tape = Tape::new();
        let a = tape.constant(t64(&[1.0, 2.0], &[2]));
        let b = tape.constant(t64(&[3.0, 4.0], &[2]));
        let s = tape.add(a, b).unwrap();
        assert_eq!(tape.value(s).data(), &[4.0, 6.0]);
    }

    #[test]
    fn mse_of_identical_is_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(t64(&[1.0, -2.0, 0.5], &[3]));
        let m = tape.mse(x, x).unwrap();
        assert_eq!(tape.value(m).item(), 0.0);
    }

    #[test]
    fn sum_of_squares_gradient() {
        // root = sum(x^2), x = [1,2,3] -> grad = [2,4,6]
        let mut tape = Tape::new();
        let x = tape.leaf(t64(&[1.0, 2.0, 3.0], &[3]), true);
        let sq = tape.square(x);
        let root = tape.sum_all(sq);
        tape.backward(root).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(t64(&[1.0, 2.0], &[2]), true);
        let y = tape.square(x);
        assert!(matches!(
            tape.backward(y),
            Err(Error::NonScalarRoot { .. })
        ));
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t64(&[1.5, -0.5], &[2]), true);
        let d = tape.detach(x);
        assert_eq!(tape.value(d).data(), tape.value(x).data());
        let sq = tape.square(d);
        let root = tape.sum_all(sq);
        tape.backward(root).unwrap();
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn detach_splits_noising_path() {
        // z = a*x + s*e; loss = sum((detach(f(z)) - e) * z) only differentiates
        // through the explicit z branch. Compare against the manual chain rule
        // on a 2-parameter example: d/dx sum((k - e) * (a*x + s*e)) = a*(k - e).
        let (a, s) = (0.8, 0.6);
        let mut tape = Tape::new();
        let x = tape.leaf(t64(&[0.3, -1.2], &[2]), true);
        let e = tape.constant(t64(&[0.5, 0.25], &[2]));
        let ax = tape.scale(x, a);
        let se = tape.scale(e, s);
        let z = tape.add(ax, se).unwrap();
        // stand-in denoiser: f(z) = 2z, detached like a frozen network output
        let f = tape.scale(z, 2.0);
        let k = tape.detach(f);
        let resid = tape.sub(k, e).unwrap();
        let prod = tape.mul(resid, z).unwrap();
        let root = tape.sum_all(prod);
        tape.backward(root).unwrap();
        let kv = tape.value(k).data().to_vec();
        let ev = tape.value(e).data().to_vec();
        let g = tape.grad(x).unwrap().data().to_vec();
        for i in 0..2 {
            let manual = a * (kv[i] - ev[i]);
            assert!((g[i] - manual).abs() < 1e-12, "{} vs {}", g[i], manual);
        }
    }

    #[test]
    fn gradient_accumulates_across_backward_passes() {
        let mut tape = Tape::new();
        let x = tape.leaf(t64(&[2.0], &[1]), true);
        let sq = tape.square(x);
        let root = tape.sum_all(sq);
        tape.backward(root).unwrap();
        tape.backward(root).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[8.0]); // 2 * (2x)
    }

    #[test]
    fn linearity_of_gradients() {
        // grad of (a*f + b*g) == a*grad(f) + b*grad(g)
        let (a, b) = (2.5, -1.25);
        let x0 = t64(&[0.7, -0.3, 1.1], &[3]);

        let grad_of = |build: &dyn Fn(&mut Tape<f64>, Var) -> Var| -> Vec<f64> {
            let mut tape = Tape::new();
            let x = tape.leaf(x0.clone(), true);
            let r = build(&mut tape, x);
            tape.backward(r).unwrap();
            tape.grad(x).unwrap().data().to_vec()
        };

        let f = |tape: &mut Tape<f64>, x: Var| {
            let s = tape.square(x);
            tape.sum_all(s)
        };
        let g = |tape: &mut Tape<f64>, x: Var| {
            let e = tape.exp(x);
            tape.mean_all(e)
        };
        let gf = grad_of(&f);
        let gg = grad_of(&g);
        let combined = grad_of(&|tape: &mut Tape<f64>, x: Var| {
            let rf = f(tape, x);
            let rg = g(tape, x);
            let af = tape.scale(rf, a);
            let bg = tape.scale(rg, b);
            tape.add(af, bg).unwrap()
        });
        for i in 0..3 {
            let expect = a * gf[i] + b * gg[i];
            assert!((combined[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_mismatch_diagnostic_names_both_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[4, 5]));
        let err = tape.add(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 5]"), "{err}");
    }
}
