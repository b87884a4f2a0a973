use std::borrow::Cow;
use std::fmt;

use super::kernels::{self, NormCache};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for a custom operation: maps the output gradient to one
/// gradient per input, in input order.
pub type BackwardFn = Box<dyn Fn(&Tensor) -> Vec<Tensor> + Send + Sync>;

enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    Relu(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        cache: NormCache,
    },
    Reshape(Var),
    VStack(Vec<Var>),
    Sum(Var),
    Custom {
        inputs: Vec<Var>,
        backward: BackwardFn,
    },
}

struct Node<'w> {
    value: Cow<'w, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Linear record of operations for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so every operand of node `i` has an
/// index below `i`. Leaves may borrow their tensors for the tape's lifetime,
/// which keeps large weight matrices from being copied on every forward pass.
#[derive(Default)]
pub struct Tape<'w> {
    nodes: Vec<Node<'w>>,
}

impl fmt::Debug for Tape<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.nodes.len()).finish()
    }
}

impl<'w> Tape<'w> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf borrowing `t`.
    pub fn param(&mut self, t: &'w Tensor) -> Var {
        self.push_leaf(Cow::Borrowed(t), true)
    }

    /// Non-trainable leaf borrowing `t`.
    pub fn input(&mut self, t: &'w Tensor) -> Var {
        self.push_leaf(Cow::Borrowed(t), false)
    }

    /// Non-trainable owned leaf.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_leaf(Cow::Owned(t), false)
    }

    /// Trainable owned leaf.
    pub fn param_owned(&mut self, t: Tensor) -> Var {
        self.push_leaf(Cow::Owned(t), true)
    }

    fn push_leaf(&mut self, value: Cow<'w, Tensor>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, name: &str) -> Result<Var> {
        value.check_finite(name)?;
        let requires_grad = self.parents(&op).iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn parents(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddBias(a, b) => {
                vec![*a, *b]
            }
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::Relu(a)
            | Op::SoftmaxRows(a)
            | Op::Reshape(a)
            | Op::Sum(a) => vec![*a],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::VStack(parts) => parts.clone(),
            Op::Custom { inputs, .. } => inputs.clone(),
        }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let c = kernels::matmul(self.value(a), self.value(b))?;
        self.push(c, Op::MatMul(a, b), "matmul")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = kernels::transpose(self.value(a))?;
        self.push(t, Op::Transpose(a), "transpose")
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::Shape {
                op,
                lhs: x.shape().to_vec(),
                rhs: y.shape().to_vec(),
            });
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::from_parts(x.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let t = self.zip_with(a, b, |p, q| p + q);
        self.push(t, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let t = self.zip_with(a, b, |p, q| p - q);
        self.push(t, Op::Sub(a, b), "sub")
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let t = self.zip_with(a, b, |p, q| p * q);
        self.push(t, Op::Mul(a, b), "mul")
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let x = self.value(a);
        let t = Tensor::from_parts(x.shape().to_vec(), x.data().iter().map(|v| v * s).collect());
        self.push(t, Op::Scale(a, s), "scale")
    }

    /// Adds `bias[i]` to every element of row `i` of the `m×n` matrix `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.value(a).matrix_dims()?;
        if self.value(bias).len() != m {
            return Err(Error::Shape {
                op: "add_bias",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(bias).shape().to_vec(),
            });
        }
        let x = self.value(a);
        let b = self.value(bias).data();
        let mut data = x.data().to_vec();
        for (i, row) in data.chunks_mut(n.max(1)).enumerate().take(m) {
            for v in row {
                *v += b[i];
            }
        }
        let t = Tensor::from_parts(x.shape().to_vec(), data);
        self.push(t, Op::AddBias(a, bias), "add_bias")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let t = kernels::relu(self.value(a));
        self.push(t, Op::Relu(a), "relu")
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let t = kernels::softmax_rows(self.value(a))?;
        self.push(t, Op::SoftmaxRows(a), "softmax")
    }

    /// Column-wise layer norm; see [`kernels::layer_norm`].
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (t, cache) =
            kernels::layer_norm_cached(self.value(x), self.value(gamma), self.value(beta), eps)?;
        self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                cache,
            },
            "layer_norm",
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        self.push(t, Op::Reshape(a), "reshape")
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn vstack(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("vstack of nothing".into()))?;
        let (_, cols) = self.value(*first).matrix_dims()?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, c) = self.value(p).matrix_dims()?;
            if c != cols {
                return Err(Error::Shape {
                    op: "vstack",
                    lhs: self.value(*first).shape().to_vec(),
                    rhs: self.value(p).shape().to_vec(),
                });
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let t = Tensor::from_parts(vec![rows, cols], data);
        self.push(t, Op::VStack(parts.to_vec()), "vstack")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let t = Tensor::scalar(self.value(a).sum());
        self.push(t, Op::Sum(a), "sum")
    }

    /// Records an operation whose forward value was computed by the caller.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, backward: BackwardFn) -> Result<Var> {
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                backward,
            },
            "custom op",
        )
    }

    /// Gradients of the scalar `loss` with respect to every trainable node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let value = self.value(loss);
        if value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                value.shape()
            )));
        }
        self.backward_from(loss, Tensor::filled(value.shape(), 1.0))
    }

    /// Vector-Jacobian product seeded with `seed` = ∂L/∂out for some external L.
    pub fn backward_from(&self, out: Var, seed: Tensor) -> Result<Gradients> {
        if seed.shape() != self.value(out).shape() {
            return Err(Error::Shape {
                op: "backward seed",
                lhs: self.value(out).shape().to_vec(),
                rhs: seed.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(seed);
        for idx in (0..=out.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            for (parent, pg) in self.local_grads(node, &g)? {
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                match &mut grads[parent.0] {
                    Some(acc) => acc.add_assign(&pg),
                    slot => *slot = Some(pg),
                }
            }
            // Leaves keep their gradient; interior nodes are dropped once used.
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                g.check_finite(&format!("gradient of node {i}"))?;
            }
        }
        Ok(Gradients { grads })
    }

    fn local_grads(&self, node: &Node<'w>, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let val = |v: Var| self.value(v);
        let need = |v: Var| self.nodes[v.0].requires_grad;
        let shaped = |v: Var, data: Vec<f64>| Tensor::from_parts(val(v).shape().to_vec(), data);
        let out = match &node.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let (m, k) = val(*a).matrix_dims()?;
                let (_, n) = val(*b).matrix_dims()?;
                let mut res = Vec::new();
                if need(*a) {
                    res.push((*a, shaped(*a, kernels::gemm_nt(g.data(), val(*b).data(), m, n, k))));
                }
                if need(*b) {
                    res.push((*b, shaped(*b, kernels::gemm_tn(val(*a).data(), g.data(), m, k, n))));
                }
                res
            }
            Op::Transpose(a) => {
                let (r, c) = val(*a).matrix_dims()?;
                vec![(*a, shaped(*a, kernels::transpose_raw(g.data(), c, r)))]
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => {
                let neg = g.data().iter().map(|v| -v).collect();
                vec![(*a, g.clone()), (*b, shaped(*b, neg))]
            }
            Op::Mul(a, b) => {
                let ga = g.data().iter().zip(val(*b).data()).map(|(x, y)| x * y).collect();
                let gb = g.data().iter().zip(val(*a).data()).map(|(x, y)| x * y).collect();
                vec![(*a, shaped(*a, ga)), (*b, shaped(*b, gb))]
            }
            Op::Scale(a, s) => vec![(*a, shaped(*a, g.data().iter().map(|v| v * s).collect()))],
            Op::AddBias(a, bias) => {
                let (m, n) = val(*a).matrix_dims()?;
                let gb = (0..m).map(|i| g.data()[i * n..(i + 1) * n].iter().sum()).collect();
                vec![(*a, g.clone()), (*bias, shaped(*bias, gb))]
            }
            Op::Relu(a) => {
                // Subgradient at exactly zero is zero.
                let ga = g
                    .data()
                    .iter()
                    .zip(val(*a).data())
                    .map(|(gv, x)| if *x > 0.0 { *gv } else { 0.0 })
                    .collect();
                vec![(*a, shaped(*a, ga))]
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let (r, c) = y.matrix_dims()?;
                let mut ga = vec![0.0; r * c];
                for i in 0..r {
                    let ys = &y.data()[i * c..(i + 1) * c];
                    let gs = &g.data()[i * c..(i + 1) * c];
                    let dot: f64 = ys.iter().zip(gs).map(|(p, q)| p * q).sum();
                    for j in 0..c {
                        ga[i * c + j] = ys[j] * (gs[j] - dot);
                    }
                }
                vec![(*a, shaped(*a, ga))]
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                cache,
            } => {
                let (d, n) = val(*x).matrix_dims()?;
                let gam = val(*gamma).data();
                let gd = g.data();
                let mut gx = vec![0.0; d * n];
                let mut ggamma = vec![0.0; d];
                let mut gbeta = vec![0.0; d];
                for j in 0..n {
                    let mut mean_dh = 0.0;
                    let mut mean_dh_h = 0.0;
                    for i in 0..d {
                        let k = i * n + j;
                        let dh = gd[k] * gam[i];
                        mean_dh += dh;
                        mean_dh_h += dh * cache.xhat[k];
                        ggamma[i] += gd[k] * cache.xhat[k];
                        gbeta[i] += gd[k];
                    }
                    mean_dh /= d as f64;
                    mean_dh_h /= d as f64;
                    for i in 0..d {
                        let k = i * n + j;
                        let dh = gd[k] * gam[i];
                        gx[k] = cache.inv_std[j] * (dh - mean_dh - cache.xhat[k] * mean_dh_h);
                    }
                }
                vec![
                    (*x, shaped(*x, gx)),
                    (*gamma, shaped(*gamma, ggamma)),
                    (*beta, shaped(*beta, gbeta)),
                ]
            }
            Op::Reshape(a) => vec![(*a, shaped(*a, g.data().to_vec()))],
            Op::VStack(parts) => {
                let mut offset = 0;
                parts
                    .iter()
                    .map(|&p| {
                        let len = val(p).len();
                        let slice = g.data()[offset..offset + len].to_vec();
                        offset += len;
                        (p, shaped(p, slice))
                    })
                    .collect()
            }
            Op::Sum(a) => vec![(*a, Tensor::filled(val(*a).shape(), g.data()[0]))],
            Op::Custom { inputs, backward } => {
                let gs = backward(g);
                if gs.len() != inputs.len() {
                    return Err(Error::Contract(format!(
                        "custom backward returned {} gradients for {} inputs",
                        gs.len(),
                        inputs.len()
                    )));
                }
                for (v, gv) in inputs.iter().zip(&gs) {
                    if gv.len() != val(*v).len() {
                        return Err(Error::Shape {
                            op: "custom backward",
                            lhs: val(*v).shape().to_vec(),
                            rhs: gv.shape().to_vec(),
                        });
                    }
                }
                inputs.iter().copied().zip(gs).collect()
            }
        };
        Ok(out)
    }
}

/// Gradients of one backward pass, indexed by tape variable.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, or zeros shaped like its value when nothing flowed back.
    pub fn get_or_zeros(&self, tape: &Tape<'_>, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_ones() {
        let x = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let mut tape = Tape::new();
        let xv = tape.param(&x);
        let loss = tape.sum(xv).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(xv).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn relu_subgradient() {
        let x = Tensor::new(vec![3], vec![2.0, -3.0, 0.0]).unwrap();
        let mut tape = Tape::new();
        let xv = tape.param(&x);
        let r = tape.relu(xv).unwrap();
        let loss = tape.sum(r).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(xv).unwrap().data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        // loss = sum(x * x + x) => grad = 2x + 1
        let x = Tensor::new(vec![2], vec![3.0, -1.0]).unwrap();
        let mut tape = Tape::new();
        let xv = tape.param(&x);
        let sq = tape.mul(xv, xv).unwrap();
        let s = tape.add(sq, xv).unwrap();
        let loss = tape.sum(s).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(xv).unwrap().data(), &[7.0, -1.0]);
    }

    #[test]
    fn sum_of_product_gradient_is_ones_times_b_transposed() {
        let a = Tensor::from_rows(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]).unwrap();
        let b = Tensor::from_rows(&[&[0.5, -1.0], &[2.0, 0.0], &[1.5, 3.0]]).unwrap();
        let mut tape = Tape::new();
        let (av, bv) = (tape.param(&a), tape.param(&b));
        let c = tape.matmul(av, bv).unwrap();
        let loss = tape.sum(c).unwrap();
        let g = tape.backward(loss).unwrap();
        // ones(2x2) · Bᵀ: each row is the row-sums of B.
        let expected = [-0.5, 2.0, 4.5, -0.5, 2.0, 4.5];
        assert_eq!(g.get(av).unwrap().data(), &expected);
        // Aᵀ · ones(2x2): each column holds the column sums of A.
        assert_eq!(g.get(bv).unwrap().data(), &[5.0, 5.0, 7.0, 7.0, 9.0, 9.0]);
    }

    #[test]
    fn non_scalar_loss_is_a_contract_error() {
        let x = Tensor::zeros(&[2]);
        let mut tape = Tape::new();
        let xv = tape.param(&x);
        assert!(matches!(tape.backward(xv), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let c = Tensor::new(vec![2], vec![3.0, 4.0]).unwrap();
        let mut tape = Tape::new();
        let xv = tape.param(&x);
        let cv = tape.input(&c);
        let p = tape.mul(xv, cv).unwrap();
        let loss = tape.sum(p).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(xv).unwrap().data(), &[3.0, 4.0]);
        assert!(g.get(cv).is_none());
    }

    #[test]
    fn vstack_and_bias_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[1, 3]);
        let bias = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let mut tape = Tape::new();
        let (av, bv, biasv) = (tape.param(&a), tape.param(&b), tape.param(&bias));
        let s = tape.vstack(&[av, bv]).unwrap();
        assert_eq!(tape.value(s).shape(), &[3, 3]);
        let biased = tape.add_bias(s, biasv).unwrap();
        assert_eq!(tape.value(biased).data()[3..6], [2.0, 2.0, 2.0]);
        let loss = tape.sum(biased).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(biasv).unwrap().data(), &[3.0, 3.0, 3.0]);
    }
}
