//! Matrix-level reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the node index is already a
//! topological order and the reverse sweep simply walks it backwards. Only
//! nodes downstream of a parameter leaf carry gradients; constants (frozen
//! weights, activations below the cutoff) never get a gradient buffer.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::{attention, ModelConfig};
use crate::numerics::{inv_rms, matmul, rmsnorm_rows, rope_rotate, sigmoid, silu, Matrix};

use super::loss::{distill_loss_grad, distill_loss_value};

/// Handle to a tape node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Gradients of the trainable parameters, keyed by tensor name.
pub type Gradients = BTreeMap<String, Matrix>;

#[derive(Clone, Copy, Debug)]
struct HeadGeometry {
    num_heads: usize,
    num_kv_heads: usize,
    head_dim: usize,
}

enum Op {
    Leaf { param: Option<String> },
    MatMul(Var, Var),
    Add(Var, Var),
    Scale(Var, f64),
    RmsNorm { x: Var, w: Var, eps: f64 },
    Rope { x: Var, positions: Vec<usize>, theta: f64, head_dim: usize },
    Attention { q: Var, k: Var, v: Var, positions: Vec<usize>, probs: Vec<Vec<f64>>, heads: HeadGeometry },
    SwiGlu { gate: Var, up: Var },
    DistillLoss { logits: Var, teacher: Matrix, temperature: f64 },
}

struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf { param: None }, false)
    }

    pub fn param(&mut self, name: impl Into<String>, value: Matrix) -> Var {
        self.push(value, Op::Leaf { param: Some(name.into()) }, true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = matmul(self.value(a), self.value(b))?;
        let g = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::MatMul(a, b), g))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let g = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add(a, b), g))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).scale(factor);
        let g = self.needs(a);
        self.push(value, Op::Scale(a, factor), g)
    }

    /// Row-wise RMS norm with a `1 × d` weight row.
    pub fn rmsnorm(&mut self, x: Var, w: Var, eps: f64) -> Result<Var> {
        let value = rmsnorm_rows(self.value(x), self.value(w), eps)?;
        let g = self.needs(x) || self.needs(w);
        Ok(self.push(value, Op::RmsNorm { x, w, eps }, g))
    }

    pub fn rope(&mut self, x: Var, positions: &[usize], theta: f64, head_dim: usize) -> Result<Var> {
        let value = rope_rotate(self.value(x), positions, theta, head_dim, false)?;
        let g = self.needs(x);
        Ok(self.push(value, Op::Rope { x, positions: positions.to_vec(), theta, head_dim }, g))
    }

    pub fn attention(&mut self, config: &ModelConfig, q: Var, k: Var, v: Var, positions: &[usize]) -> Result<Var> {
        let (value, probs) = attention(config, self.value(q), self.value(k), self.value(v), positions, true)?;
        let g = self.needs(q) || self.needs(k) || self.needs(v);
        let heads =
            HeadGeometry { num_heads: config.num_heads, num_kv_heads: config.num_kv_heads, head_dim: config.head_dim };
        Ok(self.push(value, Op::Attention { q, k, v, positions: positions.to_vec(), probs, heads }, g))
    }

    /// `silu(gate) ⊙ up`
    pub fn swiglu(&mut self, gate: Var, up: Var) -> Result<Var> {
        let (g, u) = (self.value(gate), self.value(up));
        if g.shape() != u.shape() {
            return Err(Error::shape("swiglu", format!("{:?} vs {:?}", g.shape(), u.shape())));
        }
        let p = g.precision();
        let value = Matrix::from_vec(
            g.rows(),
            g.cols(),
            g.data().iter().zip(u.data()).map(|(a, b)| p.round(silu(*a) * b)).collect(),
            p,
        )?;
        let needs = self.needs(gate) || self.needs(up);
        Ok(self.push(value, Op::SwiGlu { gate, up }, needs))
    }

    /// Scalar distillation loss against constant teacher logits.
    pub fn distill_loss(&mut self, logits: Var, teacher: &Matrix, temperature: f64) -> Result<Var> {
        let loss = distill_loss_value(self.value(logits), teacher, temperature)?;
        let value = Matrix::from_vec(1, 1, vec![loss], self.value(logits).precision())?;
        let g = self.needs(logits);
        Ok(self.push(value, Op::DistillLoss { logits, teacher: teacher.clone(), temperature }, g))
    }

    /// Reverse sweep from a scalar node. A tape can be swept once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::TapeReused);
        }
        self.consumed = true;
        if self.value(loss).shape() != (1, 1) {
            return Err(Error::shape("backward", format!("loss must be 1x1, got {:?}", self.value(loss).shape())));
        }
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut out = Gradients::new();
        if !self.needs(loss) {
            return Ok(out);
        }
        grads[loss.0] = Some(Matrix::from_vec(1, 1, vec![1.0], self.value(loss).precision())?);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let send = |v: Var, d: Matrix, grads: &mut Vec<Option<Matrix>>| -> Result<()> {
                if !self.nodes[v.0].needs_grad {
                    return Ok(());
                }
                grads[v.0] = Some(match grads[v.0].take() {
                    Some(acc) => acc.add(&d)?,
                    None => d,
                });
                Ok(())
            };
            match &node.op {
                Op::Leaf { param } => {
                    if let Some(name) = param {
                        out.insert(name.clone(), g);
                    }
                }
                Op::MatMul(a, b) => {
                    if self.needs(*a) {
                        send(*a, matmul(&g, &self.value(*b).transpose())?, &mut grads)?;
                    }
                    if self.needs(*b) {
                        send(*b, matmul(&self.value(*a).transpose(), &g)?, &mut grads)?;
                    }
                }
                Op::Add(a, b) => {
                    send(*a, g.clone(), &mut grads)?;
                    send(*b, g, &mut grads)?;
                }
                Op::Scale(a, f) => send(*a, g.scale(*f), &mut grads)?,
                Op::RmsNorm { x, w, eps } => {
                    let (dx, dw) = rmsnorm_backward(self.value(*x), self.value(*w), *eps, &g);
                    if self.needs(*x) {
                        send(*x, dx, &mut grads)?;
                    }
                    if self.needs(*w) {
                        send(*w, dw, &mut grads)?;
                    }
                }
                Op::Rope { x, positions, theta, head_dim } => {
                    send(*x, rope_rotate(&g, positions, *theta, *head_dim, true)?, &mut grads)?;
                }
                Op::Attention { q, k, v, positions, probs, heads } => {
                    let (dq, dk, dv) = attention_backward(
                        self.value(*q),
                        self.value(*k),
                        self.value(*v),
                        positions,
                        probs,
                        *heads,
                        &g,
                    );
                    send(*q, dq, &mut grads)?;
                    send(*k, dk, &mut grads)?;
                    send(*v, dv, &mut grads)?;
                }
                Op::SwiGlu { gate, up } => {
                    let (gv, uv) = (self.value(*gate), self.value(*up));
                    let p = gv.precision();
                    let mut dg = Matrix::zeros(gv.rows(), gv.cols(), p);
                    let mut du = Matrix::zeros(gv.rows(), gv.cols(), p);
                    for (i, ((&a, &b), &d)) in gv.data().iter().zip(uv.data()).zip(g.data()).enumerate() {
                        let s = sigmoid(a);
                        dg.data_mut()[i] = d * b * s * (1.0 + a * (1.0 - s));
                        du.data_mut()[i] = d * silu(a);
                    }
                    send(*gate, dg, &mut grads)?;
                    send(*up, du, &mut grads)?;
                }
                Op::DistillLoss { logits, teacher, temperature } => {
                    let d = distill_loss_grad(self.value(*logits), teacher, *temperature)?;
                    send(*logits, d.scale(g.get(0, 0)), &mut grads)?;
                }
            }
        }
        Ok(out)
    }
}

fn rmsnorm_backward(x: &Matrix, w: &Matrix, eps: f64, dy: &Matrix) -> (Matrix, Matrix) {
    let n = x.cols() as f64;
    let p = x.precision();
    let mut dx = Matrix::zeros(x.rows(), x.cols(), p);
    let mut dw = vec![0.0; x.cols()];
    for r in 0..x.rows() {
        let (xr, gr) = (x.row(r), dy.row(r));
        let inv = inv_rms(xr, eps);
        let mut s = 0.0;
        for i in 0..xr.len() {
            s += gr[i] * w.get(0, i) * xr[i];
            dw[i] += gr[i] * xr[i] * inv;
        }
        let c = inv * inv * inv * s / n;
        for (i, d) in dx.row_mut(r).iter_mut().enumerate() {
            *d = inv * w.get(0, i) * gr[i] - xr[i] * c;
        }
    }
    (dx, Matrix::from_vec(1, x.cols(), dw, p).expect("row"))
}

fn attention_backward(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    positions: &[usize],
    probs: &[Vec<f64>],
    heads: HeadGeometry,
    dout: &Matrix,
) -> (Matrix, Matrix, Matrix) {
    let HeadGeometry { num_heads: nh, num_kv_heads, head_dim: hd } = heads;
    let per_kv = nh / num_kv_heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let p = q.precision();
    let mut dq = Matrix::zeros(q.rows(), q.cols(), p);
    let mut dk = Matrix::zeros(k.rows(), k.cols(), p);
    let mut dv = Matrix::zeros(v.rows(), v.cols(), p);
    for i in 0..positions.len() {
        for h in 0..nh {
            let kvh = h / per_kv;
            let pr = &probs[i * nh + h];
            let go = &dout.row(i)[h * hd..(h + 1) * hd];
            let dp: Vec<f64> = (0..pr.len())
                .map(|j| go.iter().zip(&v.row(j)[kvh * hd..(kvh + 1) * hd]).map(|(a, b)| a * b).sum())
                .collect();
            let mean: f64 = pr.iter().zip(&dp).map(|(a, b)| a * b).sum();
            for j in 0..pr.len() {
                let ds = pr[j] * (dp[j] - mean) * scale;
                #[allow(clippy::needless_range_loop)]
                for t in 0..hd {
                    dv.row_mut(j)[kvh * hd + t] += pr[j] * go[t];
                    dq.row_mut(i)[h * hd + t] += ds * k.get(j, kvh * hd + t);
                    dk.row_mut(j)[kvh * hd + t] += ds * q.get(i, h * hd + t);
                }
            }
        }
    }
    (dq, dk, dv)
}
