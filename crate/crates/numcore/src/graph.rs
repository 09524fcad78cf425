//! Reverse-mode autodiff on an append-only tape.
//!
//! A [`Graph`] is built fresh for every training step: leaves are snapshots of
//! parameter/input tensors, every op evaluates eagerly and records itself, and
//! [`Graph::backward`] replays the tape in reverse. A graph can be back-propagated
//! once; a second call reports an error. All op outputs are checked for
//! non-finite values and reported as errors rather than silently propagated.

use std::rc::Rc;

use crate::kernels;
use crate::tensor::Tensor;
use crate::{NumError, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// User-defined differentiable op (used for e.g. spectral transforms that live
/// outside this crate). Inputs/outputs are (data, shape) pairs.
pub trait CustomOp {
    fn name(&self) -> &'static str;
    fn forward(&self, inputs: &[(&[f32], &[usize])]) -> Result<(Vec<f32>, Vec<usize>)>;
    /// Returns one gradient per input (None for inputs without gradient).
    fn backward(
        &self,
        inputs: &[(&[f32], &[usize])],
        output: (&[f32], &[usize]),
        grad_out: &[f32],
    ) -> Result<Vec<Option<Vec<f32>>>>;
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// [rows.., n] + [n]
    AddRow(Var, Var),
    /// [rows.., n] * [n]
    MulRow(Var, Var),
    Scale(Var, f32),
    AddScalar(Var, f32),
    Matmul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Conv1d {
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    },
    ConvT1d {
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
    },
    Embedding {
        table: Var,
        ids: Vec<u32>,
    },
    SoftmaxRows(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<i64>,
    },
    LayerNormRows {
        x: Var,
        eps: f32,
    },
    Gelu(Var),
    Silu(Var),
    Tanh(Var),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    Abs(Var),
    MeanAll(Var),
    SumAll(Var),
    MeanAxis0(Var),
    Transpose2d(Var),
    Reshape(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
        len: usize,
    },
    StopGrad(Var),
    Custom {
        op: Rc<dyn CustomOp>,
        inputs: Vec<Var>,
    },
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    data: Vec<f32>,
    requires_grad: bool,
}

/// Gradients keyed by the `Var`s of a finished graph.
pub struct Gradients {
    by_id: Vec<Option<Vec<f32>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f32]> {
        self.by_id.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f32>> {
        self.by_id.get_mut(v.0).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    spent: bool,
}

fn rows_of(shape: &[usize]) -> usize {
    shape[..shape.len() - 1].iter().product()
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Snapshot a tensor as a non-differentiable input.
    pub fn input(&mut self, t: &Tensor) -> Var {
        self.push_leaf(t.shape().to_vec(), t.data().to_vec(), false)
    }

    /// Snapshot a tensor as a trainable parameter (gradient collected).
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push_leaf(t.shape().to_vec(), t.data().to_vec(), true)
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<f32>) -> Var {
        self.push_leaf(shape.to_vec(), data, false)
    }

    pub fn scalar(&mut self, v: f32) -> Var {
        self.push_leaf(vec![1], vec![v], false)
    }

    fn push_leaf(&mut self, shape: Vec<usize>, data: Vec<f32>, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            op: Op::Leaf,
            shape,
            data,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, data: Vec<f32>, name: &'static str) -> Result<Var> {
        if !data.iter().all(|v| v.is_finite()) {
            return Err(NumError::NonFinite { op: name });
        }
        let requires_grad = self.op_requires_grad(&op);
        self.nodes.push(Node {
            op,
            shape,
            data,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn op_requires_grad(&self, op: &Op) -> bool {
        let dep = |v: &Var| self.nodes[v.0].requires_grad;
        match op {
            Op::Leaf => false,
            Op::StopGrad(_) => false,
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) | Op::MulRow(a, b) => {
                dep(a) || dep(b)
            }
            Op::Scale(a, _) | Op::AddScalar(a, _) => dep(a),
            Op::Matmul { a, b, .. } => dep(a) || dep(b),
            Op::Conv1d { x, w, bias, .. } | Op::ConvT1d { x, w, bias, .. } => {
                dep(x) || dep(w) || bias.as_ref().map_or(false, dep)
            }
            Op::Embedding { table, .. } => dep(table),
            Op::SoftmaxRows(a)
            | Op::Gelu(a)
            | Op::Silu(a)
            | Op::Tanh(a)
            | Op::Exp(a)
            | Op::Ln(a)
            | Op::Sqrt(a)
            | Op::Abs(a)
            | Op::MeanAll(a)
            | Op::SumAll(a)
            | Op::MeanAxis0(a)
            | Op::Transpose2d(a)
            | Op::Reshape(a) => dep(a),
            Op::CrossEntropy { logits, .. } => dep(logits),
            Op::LayerNormRows { x, .. } => dep(x),
            Op::Concat { inputs, .. } => inputs.iter().any(dep),
            Op::Slice { x, .. } => dep(x),
            Op::Custom { inputs, .. } => inputs.iter().any(dep),
        }
    }

    pub fn data(&self, v: Var) -> &[f32] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn item(&self, v: Var) -> f32 {
        debug_assert_eq!(self.nodes[v.0].data.len(), 1);
        self.nodes[v.0].data[0]
    }

    pub fn value(&self, v: Var) -> Tensor {
        Tensor::new(&self.nodes[v.0].shape, self.nodes[v.0].data.clone()).expect("node invariant")
    }

    // ── elementwise ─────────────────────────────────────────────────────

    fn binary_same_shape(&mut self, a: Var, b: Var, name: &'static str) -> Result<()> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(NumError::ShapeMismatch {
                op: name,
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "add")?;
        let data: Vec<f32> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x + y)
            .collect();
        self.push(Op::Add(a, b), self.nodes[a.0].shape.clone(), data, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "sub")?;
        let data: Vec<f32> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x - y)
            .collect();
        self.push(Op::Sub(a, b), self.nodes[a.0].shape.clone(), data, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "mul")?;
        let data: Vec<f32> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x * y)
            .collect();
        self.push(Op::Mul(a, b), self.nodes[a.0].shape.clone(), data, "mul")
    }

    fn row_op_check(&self, a: Var, b: Var, name: &'static str) -> Result<usize> {
        let ash = &self.nodes[a.0].shape;
        let bsh = &self.nodes[b.0].shape;
        let n = *ash.last().unwrap();
        if bsh.len() != 1 || bsh[0] != n {
            return Err(NumError::ShapeMismatch {
                op: name,
                lhs: ash.clone(),
                rhs: bsh.clone(),
            });
        }
        Ok(n)
    }

    /// Broadcast-add a vector over the last axis.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let n = self.row_op_check(a, b, "add_row")?;
        let bv = &self.nodes[b.0].data;
        let data: Vec<f32> = self.nodes[a.0]
            .data
            .iter()
            .enumerate()
            .map(|(i, x)| x + bv[i % n])
            .collect();
        self.push(Op::AddRow(a, b), self.nodes[a.0].shape.clone(), data, "add_row")
    }

    /// Broadcast-multiply a vector over the last axis.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let n = self.row_op_check(a, b, "mul_row")?;
        let bv = &self.nodes[b.0].data;
        let data: Vec<f32> = self.nodes[a.0]
            .data
            .iter()
            .enumerate()
            .map(|(i, x)| x * bv[i % n])
            .collect();
        self.push(Op::MulRow(a, b), self.nodes[a.0].shape.clone(), data, "mul_row")
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Result<Var> {
        let data: Vec<f32> = self.nodes[a.0].data.iter().map(|x| x * c).collect();
        self.push(Op::Scale(a, c), self.nodes[a.0].shape.clone(), data, "scale")
    }

    pub fn add_scalar(&mut self, a: Var, c: f32) -> Result<Var> {
        let data: Vec<f32> = self.nodes[a.0].data.iter().map(|x| x + c).collect();
        self.push(Op::AddScalar(a, c), self.nodes[a.0].shape.clone(), data, "add_scalar")
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    fn unary<F: Fn(f32) -> f32>(&mut self, a: Var, f: F, op: Op, name: &'static str) -> Result<Var> {
        let data: Vec<f32> = self.nodes[a.0].data.iter().map(|&x| f(x)).collect();
        self.push(op, self.nodes[a.0].shape.clone(), data, name)
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, gelu_f, Op::Gelu(a), "gelu")
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| x * sigmoid_f(x), Op::Silu(a), "silu")
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| x.tanh(), Op::Tanh(a), "tanh")
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| x.exp(), Op::Exp(a), "exp")
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| x.ln(), Op::Ln(a), "ln")
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| x.sqrt(), Op::Sqrt(a), "sqrt")
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| x.abs(), Op::Abs(a), "abs")
    }

    // ── contractions ────────────────────────────────────────────────────

    fn mm_dims(&self, a: Var, b: Var, ta: bool, tb: bool) -> Result<(usize, usize, usize)> {
        let ash = &self.nodes[a.0].shape;
        let bsh = &self.nodes[b.0].shape;
        if ash.len() != 2 || bsh.len() != 2 {
            return Err(NumError::ShapeMismatch {
                op: "matmul",
                lhs: ash.clone(),
                rhs: bsh.clone(),
            });
        }
        let (m, k) = if ta { (ash[1], ash[0]) } else { (ash[0], ash[1]) };
        let (k2, n) = if tb { (bsh[1], bsh[0]) } else { (bsh[0], bsh[1]) };
        if k != k2 {
            return Err(NumError::ShapeMismatch {
                op: "matmul",
                lhs: ash.clone(),
                rhs: bsh.clone(),
            });
        }
        Ok((m, k, n))
    }

    fn matmul_general(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (m, k, n) = self.mm_dims(a, b, ta, tb)?;
        let mut out = vec![0.0; m * n];
        let (ad, bd) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
        match (ta, tb) {
            (false, false) => kernels::matmul_nn(ad, bd, &mut out, m, k, n),
            (false, true) => kernels::matmul_nt(ad, bd, &mut out, m, k, n),
            (true, false) => kernels::matmul_tn(ad, bd, &mut out, m, k, n),
            (true, true) => kernels::matmul_tt(ad, bd, &mut out, m, k, n),
        }
        self.push(Op::Matmul { a, b, ta, tb }, vec![m, n], out, "matmul")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_general(a, b, false, false)
    }

    /// A · Bᵀ
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_general(a, b, false, true)
    }

    /// Aᵀ · B
    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_general(a, b, true, false)
    }

    pub fn conv1d(&mut self, x: Var, w: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let xsh = self.nodes[x.0].shape.clone();
        let wsh = self.nodes[w.0].shape.clone();
        if xsh.len() != 3 || wsh.len() != 3 || xsh[1] != wsh[1] {
            return Err(NumError::ShapeMismatch {
                op: "conv1d",
                lhs: xsh,
                rhs: wsh,
            });
        }
        let (batch, c_in, len) = (xsh[0], xsh[1], xsh[2]);
        let (c_out, ksize) = (wsh[0], wsh[2]);
        if len + 2 * pad < ksize || (len + 2 * pad - ksize) % stride != 0 {
            return Err(NumError::invalid(format!(
                "conv1d geometry: len {len}, pad {pad}, k {ksize}, stride {stride} does not tile"
            )));
        }
        if let Some(bv) = bias {
            let bsh = &self.nodes[bv.0].shape;
            if bsh.as_slice() != [c_out] {
                return Err(NumError::ShapeMismatch {
                    op: "conv1d bias",
                    lhs: bsh.clone(),
                    rhs: vec![c_out],
                });
            }
        }
        let l_out = (len + 2 * pad - ksize) / stride + 1;
        let mut out = vec![0.0; batch * c_out * l_out];
        kernels::conv1d(
            &self.nodes[x.0].data,
            &self.nodes[w.0].data,
            bias.map(|b| self.nodes[b.0].data.as_slice()),
            &mut out,
            batch,
            c_in,
            len,
            c_out,
            ksize,
            stride,
            pad,
        );
        self.push(
            Op::Conv1d { x, w, bias, stride, pad },
            vec![batch, c_out, l_out],
            out,
            "conv1d",
        )
    }

    /// Transposed conv; output length is exactly `frames * stride`.
    pub fn conv_transpose1d(&mut self, x: Var, w: Var, bias: Option<Var>, stride: usize) -> Result<Var> {
        let xsh = self.nodes[x.0].shape.clone();
        let wsh = self.nodes[w.0].shape.clone();
        if xsh.len() != 3 || wsh.len() != 3 || xsh[1] != wsh[0] {
            return Err(NumError::ShapeMismatch {
                op: "conv_transpose1d",
                lhs: xsh,
                rhs: wsh,
            });
        }
        let (batch, c_in, frames) = (xsh[0], xsh[1], xsh[2]);
        let (c_out, ksize) = (wsh[1], wsh[2]);
        if ksize < stride || (ksize - stride) % 2 != 0 {
            return Err(NumError::invalid(format!(
                "conv_transpose1d requires k >= stride and even trim, got k {ksize} stride {stride}"
            )));
        }
        let l_out = frames * stride;
        let mut out = vec![0.0; batch * c_out * l_out];
        kernels::conv_transpose1d(
            &self.nodes[x.0].data,
            &self.nodes[w.0].data,
            bias.map(|b| self.nodes[b.0].data.as_slice()),
            &mut out,
            batch,
            c_in,
            frames,
            c_out,
            ksize,
            stride,
        );
        self.push(
            Op::ConvT1d { x, w, bias, stride },
            vec![batch, c_out, l_out],
            out,
            "conv_transpose1d",
        )
    }

    /// Row gather: table [V, D], ids → [len(ids), D].
    pub fn embedding(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let tsh = self.nodes[table.0].shape.clone();
        if tsh.len() != 2 {
            return Err(NumError::ShapeMismatch {
                op: "embedding",
                lhs: tsh,
                rhs: vec![],
            });
        }
        let (v, d) = (tsh[0], tsh[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= v) {
            return Err(NumError::invalid(format!(
                "embedding id {bad} out of range for table of {v}"
            )));
        }
        let src = &self.nodes[table.0].data;
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&src[i as usize * d..(i as usize + 1) * d]);
        }
        self.push(
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            vec![ids.len(), d],
            out,
            "embedding",
        )
    }

    // ── structured ──────────────────────────────────────────────────────

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let sh = self.nodes[a.0].shape.clone();
        let n = *sh.last().unwrap();
        let mut out = self.nodes[a.0].data.clone();
        for row in out.chunks_mut(n) {
            softmax_in_place(row);
        }
        self.push(Op::SoftmaxRows(a), sh, out, "softmax")
    }

    /// Mean next-token cross-entropy over rows whose target is >= 0
    /// (negative targets are ignore positions).
    pub fn cross_entropy(&mut self, logits: Var, targets: &[i64]) -> Result<Var> {
        let sh = self.nodes[logits.0].shape.clone();
        if sh.len() != 2 || sh[0] != targets.len() {
            return Err(NumError::ShapeMismatch {
                op: "cross_entropy",
                lhs: sh,
                rhs: vec![targets.len()],
            });
        }
        let v = sh[1];
        if let Some(&bad) = targets.iter().find(|&&t| t >= v as i64) {
            return Err(NumError::invalid(format!(
                "cross_entropy target {bad} out of range for vocab {v}"
            )));
        }
        let data = &self.nodes[logits.0].data;
        let mut total = 0.0f64;
        let mut count = 0usize;
        for (r, &t) in targets.iter().enumerate() {
            if t < 0 {
                continue;
            }
            let row = &data[r * v..(r + 1) * v];
            total += (log_sum_exp(row) - row[t as usize]) as f64;
            count += 1;
        }
        if count == 0 {
            return Err(NumError::invalid(
                "cross_entropy: every target position is ignored".to_string(),
            ));
        }
        let loss = (total / count as f64) as f32;
        self.push(
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
            },
            vec![1],
            vec![loss],
            "cross_entropy",
        )
    }

    /// Row-wise layer norm (no affine; compose with mul_row/add_row).
    pub fn layer_norm(&mut self, x: Var, eps: f32) -> Result<Var> {
        let sh = self.nodes[x.0].shape.clone();
        let n = *sh.last().unwrap();
        let mut out = self.nodes[x.0].data.clone();
        for row in out.chunks_mut(n) {
            let mean = row.iter().sum::<f32>() / n as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n as f32;
            let inv = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * inv;
            }
        }
        self.push(Op::LayerNormRows { x, eps }, sh, out, "layer_norm")
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let n = self.nodes[a.0].data.len();
        let s: f64 = self.nodes[a.0].data.iter().map(|&v| v as f64).sum();
        self.push(Op::MeanAll(a), vec![1], vec![(s / n as f64) as f32], "mean_all")
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.nodes[a.0].data.iter().map(|&v| v as f64).sum();
        self.push(Op::SumAll(a), vec![1], vec![s as f32], "sum_all")
    }

    /// [R, C] → [C] column means.
    pub fn mean_axis0(&mut self, a: Var) -> Result<Var> {
        let sh = self.nodes[a.0].shape.clone();
        if sh.len() != 2 {
            return Err(NumError::ShapeMismatch {
                op: "mean_axis0",
                lhs: sh,
                rhs: vec![],
            });
        }
        let (r, c) = (sh[0], sh[1]);
        let mut out = vec![0.0f32; c];
        for row in self.nodes[a.0].data.chunks(c) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        for o in out.iter_mut() {
            *o /= r as f32;
        }
        self.push(Op::MeanAxis0(a), vec![c], out, "mean_axis0")
    }

    pub fn transpose2d(&mut self, a: Var) -> Result<Var> {
        let sh = self.nodes[a.0].shape.clone();
        if sh.len() != 2 {
            return Err(NumError::ShapeMismatch {
                op: "transpose2d",
                lhs: sh,
                rhs: vec![],
            });
        }
        let (r, c) = (sh[0], sh[1]);
        let src = &self.nodes[a.0].data;
        let mut out = vec![0.0f32; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        self.push(Op::Transpose2d(a), vec![c, r], out, "transpose2d")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.nodes[a.0].data.len() || shape.iter().any(|&e| e == 0) {
            return Err(NumError::ShapeMismatch {
                op: "reshape",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        let data = self.nodes[a.0].data.clone();
        self.push(Op::Reshape(a), shape.to_vec(), data, "reshape")
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        assert!(!inputs.is_empty());
        let base = self.nodes[inputs[0].0].shape.clone();
        if axis >= base.len() {
            return Err(NumError::invalid(format!(
                "concat axis {axis} out of range for rank {}",
                base.len()
            )));
        }
        let mut axis_total = 0usize;
        for v in inputs {
            let sh = &self.nodes[v.0].shape;
            if sh.len() != base.len()
                || sh
                    .iter()
                    .zip(&base)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(NumError::ShapeMismatch {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: sh.clone(),
                });
            }
            axis_total += sh[axis];
        }
        let mut out_shape = base.clone();
        out_shape[axis] = axis_total;
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = vec![0.0f32; outer * axis_total * inner];
        let mut offset = 0usize;
        for v in inputs {
            let alen = self.nodes[v.0].shape[axis];
            let src = &self.nodes[v.0].data;
            for o in 0..outer {
                let dst_start = (o * axis_total + offset) * inner;
                let src_start = o * alen * inner;
                out[dst_start..dst_start + alen * inner]
                    .copy_from_slice(&src[src_start..src_start + alen * inner]);
            }
            offset += alen;
        }
        self.push(
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            out_shape,
            out,
            "concat",
        )
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let sh = self.nodes[x.0].shape.clone();
        if axis >= sh.len() || start + len > sh[axis] || len == 0 {
            return Err(NumError::invalid(format!(
                "slice [{start}, {}) on axis {axis} of {sh:?}",
                start + len
            )));
        }
        let outer: usize = sh[..axis].iter().product();
        let inner: usize = sh[axis + 1..].iter().product();
        let src = &self.nodes[x.0].data;
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let s = (o * sh[axis] + start) * inner;
            out.extend_from_slice(&src[s..s + len * inner]);
        }
        let mut out_shape = sh;
        out_shape[axis] = len;
        self.push(Op::Slice { x, axis, start, len }, out_shape, out, "slice")
    }

    /// Identity forward, blocks gradient flow.
    pub fn stop_grad(&mut self, a: Var) -> Result<Var> {
        let data = self.nodes[a.0].data.clone();
        self.push(Op::StopGrad(a), self.nodes[a.0].shape.clone(), data, "stop_grad")
    }

    pub fn custom(&mut self, op: Rc<dyn CustomOp>, inputs: &[Var]) -> Result<Var> {
        let name = op.name();
        let packed: Vec<(&[f32], &[usize])> = inputs
            .iter()
            .map(|v| (self.nodes[v.0].data.as_slice(), self.nodes[v.0].shape.as_slice()))
            .collect();
        let (data, shape) = op.forward(&packed)?;
        self.push(
            Op::Custom {
                op,
                inputs: inputs.to_vec(),
            },
            shape,
            data,
            name,
        )
    }

    /// Convenience: mean squared error between two same-shape vars.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        self.mean_all(sq)
    }

    /// Convenience: mean absolute error.
    pub fn l1(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let ad = self.abs(d)?;
        self.mean_all(ad)
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Returns gradients for every
    /// `requires_grad` leaf; the tape is spent afterwards (a second call is
    /// an error) though node values stay readable.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.spent {
            return Err(NumError::TapeSpent);
        }
        if self.nodes.is_empty() {
            return Err(NumError::TapeSpent);
        }
        self.spent = true;
        if self.nodes[loss.0].data.len() != 1 {
            return Err(NumError::NonScalarLoss(self.nodes[loss.0].shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f32>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut leaf_grads: Vec<Option<Vec<f32>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad && !matches!(self.nodes[id].op, Op::Leaf) {
                continue;
            }
            if matches!(self.nodes[id].op, Op::Leaf) {
                if self.nodes[id].requires_grad {
                    leaf_grads[id] = Some(g);
                }
                continue;
            }
            self.backward_op(id, &g, &mut grads)?;
        }
        Ok(Gradients { by_id: leaf_grads })
    }

    fn accumulate(grads: &mut [Option<Vec<f32>>], node_numel: usize, v: Var, contribution: &[f32]) {
        debug_assert_eq!(node_numel, contribution.len());
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(contribution) {
                    *e += c;
                }
            }
            None => grads[v.0] = Some(contribution.to_vec()),
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_op(&self, id: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) -> Result<()> {
        let numel = |v: Var| self.nodes[v.0].data.len();
        let acc = |grads: &mut [Option<Vec<f32>>], v: Var, c: &[f32]| {
            Self::accumulate(grads, self.nodes[v.0].data.len(), v, c)
        };
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.needs(*a) {
                    acc(grads, *a, g);
                }
                if self.needs(*b) {
                    acc(grads, *b, g);
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    acc(grads, *a, g);
                }
                if self.needs(*b) {
                    let neg: Vec<f32> = g.iter().map(|v| -v).collect();
                    acc(grads, *b, &neg);
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let c: Vec<f32> = g
                        .iter()
                        .zip(&self.nodes[b.0].data)
                        .map(|(gi, bi)| gi * bi)
                        .collect();
                    acc(grads, *a, &c);
                }
                if self.needs(*b) {
                    let c: Vec<f32> = g
                        .iter()
                        .zip(&self.nodes[a.0].data)
                        .map(|(gi, ai)| gi * ai)
                        .collect();
                    acc(grads, *b, &c);
                }
            }
            Op::AddRow(a, b) => {
                let n = numel(*b);
                if self.needs(*a) {
                    acc(grads, *a, g);
                }
                if self.needs(*b) {
                    let mut c = vec![0.0f32; n];
                    for (i, gi) in g.iter().enumerate() {
                        c[i % n] += gi;
                    }
                    acc(grads, *b, &c);
                }
            }
            Op::MulRow(a, b) => {
                let n = numel(*b);
                if self.needs(*a) {
                    let bv = &self.nodes[b.0].data;
                    let c: Vec<f32> = g.iter().enumerate().map(|(i, gi)| gi * bv[i % n]).collect();
                    acc(grads, *a, &c);
                }
                if self.needs(*b) {
                    let av = &self.nodes[a.0].data;
                    let mut c = vec![0.0f32; n];
                    for (i, gi) in g.iter().enumerate() {
                        c[i % n] += gi * av[i];
                    }
                    acc(grads, *b, &c);
                }
            }
            Op::Scale(a, s) => {
                if self.needs(*a) {
                    let c: Vec<f32> = g.iter().map(|v| v * s).collect();
                    acc(grads, *a, &c);
                }
            }
            Op::AddScalar(a, _) => {
                if self.needs(*a) {
                    acc(grads, *a, g);
                }
            }
            Op::Matmul { a, b, ta, tb } => {
                let (m, k, n) = self.mm_dims(*a, *b, *ta, *tb).expect("validated at forward");
                let ad = &self.nodes[a.0].data;
                let bd = &self.nodes[b.0].data;
                if self.needs(*a) {
                    // dA' = G · B'^T, with A' = op(A) of shape [m,k]
                    let mut da_p = vec![0.0f32; m * k];
                    if *tb {
                        kernels::matmul_nn(g, bd, &mut da_p, m, n, k);
                    } else {
                        kernels::matmul_nt(g, bd, &mut da_p, m, n, k);
                    }
                    if *ta {
                        let mut da = vec![0.0f32; k * m];
                        for i in 0..m {
                            for p in 0..k {
                                da[p * m + i] = da_p[i * k + p];
                            }
                        }
                        acc(grads, *a, &da);
                    } else {
                        acc(grads, *a, &da_p);
                    }
                }
                if self.needs(*b) {
                    // dB' = A'^T · G of shape [k,n]
                    let mut db_p = vec![0.0f32; k * n];
                    if *ta {
                        kernels::matmul_nn(ad, g, &mut db_p, k, m, n);
                    } else {
                        kernels::matmul_tn(ad, g, &mut db_p, k, m, n);
                    }
                    if *tb {
                        let mut db = vec![0.0f32; n * k];
                        for p in 0..k {
                            for j in 0..n {
                                db[j * k + p] = db_p[p * n + j];
                            }
                        }
                        acc(grads, *b, &db);
                    } else {
                        acc(grads, *b, &db_p);
                    }
                }
            }
            Op::Conv1d { x, w, bias, stride, pad } => {
                let xsh = &self.nodes[x.0].shape;
                let wsh = &self.nodes[w.0].shape;
                let (batch, c_in, len) = (xsh[0], xsh[1], xsh[2]);
                let (c_out, ksize) = (wsh[0], wsh[2]);
                let l_out = (len + 2 * pad - ksize) / stride + 1;
                if self.needs(*x) {
                    let mut dx = vec![0.0f32; batch * c_in * len];
                    kernels::conv1d_grad_x(
                        g,
                        &self.nodes[w.0].data,
                        &mut dx,
                        batch,
                        c_in,
                        len,
                        c_out,
                        ksize,
                        *stride,
                        *pad,
                    );
                    acc(grads, *x, &dx);
                }
                if self.needs(*w) {
                    let mut dw = vec![0.0f32; c_out * c_in * ksize];
                    kernels::conv1d_grad_w(
                        g,
                        &self.nodes[x.0].data,
                        &mut dw,
                        batch,
                        c_in,
                        len,
                        c_out,
                        ksize,
                        *stride,
                        *pad,
                    );
                    acc(grads, *w, &dw);
                }
                if let Some(bv) = bias {
                    if self.needs(*bv) {
                        let mut db = vec![0.0f32; c_out];
                        for b in 0..batch {
                            for co in 0..c_out {
                                let row = &g[(b * c_out + co) * l_out..(b * c_out + co + 1) * l_out];
                                db[co] += row.iter().sum::<f32>();
                            }
                        }
                        acc(grads, *bv, &db);
                    }
                }
            }
            Op::ConvT1d { x, w, bias, stride } => {
                let xsh = &self.nodes[x.0].shape;
                let wsh = &self.nodes[w.0].shape;
                let (batch, c_in, frames) = (xsh[0], xsh[1], xsh[2]);
                let (c_out, ksize) = (wsh[1], wsh[2]);
                let l_out = frames * stride;
                if self.needs(*x) {
                    let mut dx = vec![0.0f32; batch * c_in * frames];
                    kernels::conv_transpose1d_grad_x(
                        g,
                        &self.nodes[w.0].data,
                        &mut dx,
                        batch,
                        c_in,
                        frames,
                        c_out,
                        ksize,
                        *stride,
                    );
                    acc(grads, *x, &dx);
                }
                if self.needs(*w) {
                    let mut dw = vec![0.0f32; c_in * c_out * ksize];
                    kernels::conv_transpose1d_grad_w(
                        g,
                        &self.nodes[x.0].data,
                        &mut dw,
                        batch,
                        c_in,
                        frames,
                        c_out,
                        ksize,
                        *stride,
                    );
                    acc(grads, *w, &dw);
                }
                if let Some(bv) = bias {
                    if self.needs(*bv) {
                        let mut db = vec![0.0f32; c_out];
                        for b in 0..batch {
                            for co in 0..c_out {
                                let row = &g[(b * c_out + co) * l_out..(b * c_out + co + 1) * l_out];
                                db[co] += row.iter().sum::<f32>();
                            }
                        }
                        acc(grads, *bv, &db);
                    }
                }
            }
            Op::Embedding { table, ids } => {
                if self.needs(*table) {
                    let d = self.nodes[table.0].shape[1];
                    let mut dt = vec![0.0f32; self.nodes[table.0].data.len()];
                    for (t, &i) in ids.iter().enumerate() {
                        let dst = &mut dt[i as usize * d..(i as usize + 1) * d];
                        for (dv, gv) in dst.iter_mut().zip(&g[t * d..(t + 1) * d]) {
                            *dv += gv;
                        }
                    }
                    acc(grads, *table, &dt);
                }
            }
            Op::SoftmaxRows(a) => {
                if self.needs(*a) {
                    let n = *self.nodes[id].shape.last().unwrap();
                    let y = &self.nodes[id].data;
                    let mut dx = vec![0.0f32; y.len()];
                    for r in 0..y.len() / n {
                        let yr = &y[r * n..(r + 1) * n];
                        let gr = &g[r * n..(r + 1) * n];
                        let dot: f32 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            dx[r * n + j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    acc(grads, *a, &dx);
                }
            }
            Op::CrossEntropy { logits, targets } => {
                if self.needs(*logits) {
                    let v = self.nodes[logits.0].shape[1];
                    let data = &self.nodes[logits.0].data;
                    let count = targets.iter().filter(|&&t| t >= 0).count() as f32;
                    let scale = g[0] / count;
                    let mut dx = vec![0.0f32; data.len()];
                    for (r, &t) in targets.iter().enumerate() {
                        if t < 0 {
                            continue;
                        }
                        let row = &data[r * v..(r + 1) * v];
                        let mut sm = row.to_vec();
                        softmax_in_place(&mut sm);
                        let drow = &mut dx[r * v..(r + 1) * v];
                        for j in 0..v {
                            drow[j] = sm[j] * scale;
                        }
                        drow[t as usize] -= scale;
                    }
                    acc(grads, *logits, &dx);
                }
            }
            Op::LayerNormRows { x, eps } => {
                if self.needs(*x) {
                    let n = *self.nodes[id].shape.last().unwrap();
                    let xd = &self.nodes[x.0].data;
                    let y = &self.nodes[id].data;
                    let mut dx = vec![0.0f32; xd.len()];
                    for r in 0..xd.len() / n {
                        let xr = &xd[r * n..(r + 1) * n];
                        let yr = &y[r * n..(r + 1) * n];
                        let gr = &g[r * n..(r + 1) * n];
                        let mean = xr.iter().sum::<f32>() / n as f32;
                        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n as f32;
                        let inv = 1.0 / (var + eps).sqrt();
                        let g_mean = gr.iter().sum::<f32>() / n as f32;
                        let gy_mean = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f32>() / n as f32;
                        for j in 0..n {
                            dx[r * n + j] = inv * (gr[j] - g_mean - yr[j] * gy_mean);
                        }
                    }
                    acc(grads, *x, &dx);
                }
            }
            Op::Gelu(a) => {
                if self.needs(*a) {
                    let c: Vec<f32> = self.nodes[a.0]
                        .data
                        .iter()
                        .zip(g)
                        .map(|(&x, gi)| gi * gelu_grad_f(x))
                        .collect();
                    acc(grads, *a, &c);
                }
            }
            Op::Silu(a) => {
                if self.needs(*a) {
                    let c: Vec<f32> = self.nodes[a.0]
                        .data
                        .iter()
                        .zip(g)
                        .map(|(&x, gi)| {
                            let s = sigmoid_f(x);
                            gi * (s + x * s * (1.0 - s))
                        })
                        .collect();
                    acc(grads, *a, &c);
                }
            }
            Op::Tanh(a) => {
                if self.needs(*a) {
                    let y = &self.nodes[id].data;
                    let c: Vec<f32> = y.iter().zip(g).map(|(&yv, gi)| gi * (1.0 - yv * yv)).collect();
                    acc(grads, *a, &c);
                }
            }
            Op::Exp(a) => {
                if self.needs(*a) {
                    let y = &self.nodes[id].data;
                    let c: Vec<f32> = y.iter().zip(g).map(|(&yv, gi)| gi * yv).collect();
                    acc(grads, *a, &c);
                }
            }
            Op::Ln(a) => {
                if self.needs(*a) {
                    let xd = &self.nodes[a.0].data;
                    let c: Vec<f32> = xd.iter().zip(g).map(|(&x, gi)| gi / x).collect();
                    acc(grads, *a, &c);
                }
            }
            Op::Sqrt(a) => {
                if self.needs(*a) {
                    let y = &self.nodes[id].data;
                    let c: Vec<f32> = y.iter().zip(g).map(|(&yv, gi)| gi * 0.5 / yv).collect();
                    acc(grads, *a, &c);
                }
            }
            Op::Abs(a) => {
                if self.needs(*a) {
                    let xd = &self.nodes[a.0].data;
                    let c: Vec<f32> = xd
                        .iter()
                        .zip(g)
                        .map(|(&x, gi)| {
                            if x > 0.0 {
                                *gi
                            } else if x < 0.0 {
                                -*gi
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    acc(grads, *a, &c);
                }
            }
            Op::MeanAll(a) => {
                if self.needs(*a) {
                    let n = numel(*a);
                    let c = vec![g[0] / n as f32; n];
                    acc(grads, *a, &c);
                }
            }
            Op::SumAll(a) => {
                if self.needs(*a) {
                    let c = vec![g[0]; numel(*a)];
                    acc(grads, *a, &c);
                }
            }
            Op::MeanAxis0(a) => {
                if self.needs(*a) {
                    let sh = &self.nodes[a.0].shape;
                    let (r, cdim) = (sh[0], sh[1]);
                    let mut dx = vec![0.0f32; r * cdim];
                    for row in dx.chunks_mut(cdim) {
                        for (d, gv) in row.iter_mut().zip(g) {
                            *d = gv / r as f32;
                        }
                    }
                    acc(grads, *a, &dx);
                }
            }
            Op::Transpose2d(a) => {
                if self.needs(*a) {
                    let sh = &self.nodes[a.0].shape;
                    let (r, c) = (sh[0], sh[1]);
                    let mut dx = vec![0.0f32; r * c];
                    for i in 0..c {
                        for j in 0..r {
                            dx[j * c + i] = g[i * r + j];
                        }
                    }
                    acc(grads, *a, &dx);
                }
            }
            Op::Reshape(a) => {
                if self.needs(*a) {
                    acc(grads, *a, g);
                }
            }
            Op::Concat { inputs, axis } => {
                let out_shape = &self.nodes[id].shape;
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[*axis + 1..].iter().product();
                let axis_total = out_shape[*axis];
                let mut offset = 0usize;
                for v in inputs {
                    let alen = self.nodes[v.0].shape[*axis];
                    if self.needs(*v) {
                        let mut dv = vec![0.0f32; self.nodes[v.0].data.len()];
                        for o in 0..outer {
                            let src = (o * axis_total + offset) * inner;
                            let dst = o * alen * inner;
                            dv[dst..dst + alen * inner]
                                .copy_from_slice(&g[src..src + alen * inner]);
                        }
                        acc(grads, *v, &dv);
                    }
                    offset += alen;
                }
            }
            Op::Slice { x, axis, start, len } => {
                if self.needs(*x) {
                    let sh = &self.nodes[x.0].shape;
                    let outer: usize = sh[..*axis].iter().product();
                    let inner: usize = sh[*axis + 1..].iter().product();
                    let mut dx = vec![0.0f32; self.nodes[x.0].data.len()];
                    for o in 0..outer {
                        let dst = (o * sh[*axis] + start) * inner;
                        let src = o * len * inner;
                        dx[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                    }
                    acc(grads, *x, &dx);
                }
            }
            Op::StopGrad(_) => {}
            Op::Custom { op, inputs } => {
                let packed: Vec<(&[f32], &[usize])> = inputs
                    .iter()
                    .map(|v| (self.nodes[v.0].data.as_slice(), self.nodes[v.0].shape.as_slice()))
                    .collect();
                let out = (
                    self.nodes[id].data.as_slice(),
                    self.nodes[id].shape.as_slice(),
                );
                let input_grads = op.backward(&packed, out, g)?;
                for (v, gi) in inputs.iter().zip(input_grads) {
                    if let Some(gi) = gi {
                        if self.needs(*v) {
                            acc(grads, *v, &gi);
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

#[inline]
fn sigmoid_f(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

/// tanh-approximation GELU.
#[inline]
fn gelu_f(x: f32) -> f32 {
    const C: f32 = 0.797_884_6; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
fn gelu_grad_f(x: f32) -> f32 {
    const C: f32 = 0.797_884_6;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn log_sum_exp(row: &[f32]) -> f32 {
    let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let s: f64 = row.iter().map(|&v| ((v - m) as f64).exp()).sum();
    m + (s as f32).ln()
}

fn softmax_in_place(row: &mut [f32]) {
    let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let mut s = 0.0f32;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}
