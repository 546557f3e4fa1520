use rand::Rng as _;

use super::gemm::{gemm, Operand};
use super::ops;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    BatchMatMul {
        a: usize,
        b: usize,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    Linear {
        x: usize,
        w: usize,
        b: Option<usize>,
        rows: usize,
        inp: usize,
        out: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    AddBroadcast {
        a: usize,
        b: usize,
    },
    PrependToken {
        x: usize,
        token: usize,
        batch: usize,
        seq: usize,
        dim: usize,
    },
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
        dim: usize,
    },
    Gelu {
        x: usize,
    },
    Dropout {
        x: usize,
        mask: Vec<f64>,
    },
    Scale {
        x: usize,
        factor: f64,
    },
    Softmax {
        x: usize,
        dim: usize,
    },
    SplitHeads {
        x: usize,
        batch: usize,
        seq: usize,
        heads: usize,
        head_dim: usize,
    },
    MergeHeads {
        x: usize,
        batch: usize,
        seq: usize,
        heads: usize,
        head_dim: usize,
    },
    SelectToken {
        x: usize,
        seq: usize,
        dim: usize,
        index: usize,
    },
    CrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<f64>,
        classes: usize,
    },
    Sum {
        x: usize,
    },
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Records a computation graph for reverse-mode differentiation.
///
/// A tape is single-owner and lives for one forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by leaf [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of `var` (if any) into `tensor.grad`.
    pub fn accumulate_into(&self, var: Var, tensor: &mut Tensor) {
        if let Some(g) = self.get(var) {
            tensor.accumulate_grad(g);
        }
    }
}

fn shape_err(msg: String) -> Error {
    Error::Shape(msg)
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.nodes[v.0].shape.clone(), self.nodes[v.0].value.clone())
            .expect("recorded node has a consistent shape")
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].needs_grad)
    }

    /// Records a copy of `t`; gradients flow to it iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Leaf,
            t.requires_grad(),
        )
    }

    /// Records a value that never receives gradients.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        let len: usize = shape.iter().product();
        if len != data.len() || shape.is_empty() {
            return Err(shape_err(format!(
                "constant of shape {shape:?} given {} values",
                data.len()
            )));
        }
        Ok(self.push(shape, data, Op::Leaf, false))
    }

    /// `[m×k] · [k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err(format!("matmul {sa:?} · {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            Operand::new(self.value(a), m, k),
            Operand::new(self.value(b), k, n),
            &mut out,
            0.0,
        );
        let needs = self.needs(&[a.0, b.0]);
        Ok(self.push(
            vec![m, n],
            out,
            Op::MatMul {
                a: a.0,
                b: b.0,
                m,
                k,
                n,
            },
            needs,
        ))
    }

    /// Batched product over the leading axis: `[B×m×k] · [B×k×n]`, or with
    /// `trans_b`, `[B×m×k] · [B×n×k]ᵀ`.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(shape_err(format!("batch_matmul {sa:?} · {sb:?}")));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(shape_err(format!(
                "batch_matmul inner dims {sa:?} · {sb:?} (trans_b={trans_b})"
            )));
        }
        let mut out = vec![0.0; batch * m * n];
        {
            let (va, vb) = (self.value(a), self.value(b));
            for i in 0..batch {
                let a_i = Operand::new(&va[i * m * k..(i + 1) * m * k], m, k);
                let b_i = if trans_b {
                    Operand::new(&vb[i * n * k..(i + 1) * n * k], n, k).t()
                } else {
                    Operand::new(&vb[i * k * n..(i + 1) * k * n], k, n)
                };
                gemm(a_i, b_i, &mut out[i * m * n..(i + 1) * m * n], 0.0);
            }
        }
        let needs = self.needs(&[a.0, b.0]);
        Ok(self.push(
            vec![batch, m, n],
            out,
            Op::BatchMatMul {
                a: a.0,
                b: b.0,
                batch,
                m,
                k,
                n,
                trans_b,
            },
            needs,
        ))
    }

    /// Affine map on the last axis: `x · w + b` with `w: [in×out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let inp = *sx.last().unwrap();
        if sw.len() != 2 || sw[0] != inp {
            return Err(shape_err(format!("linear x{sx:?} · w{sw:?}")));
        }
        let out_dim = sw[1];
        if let Some(b) = b {
            if self.shape(b) != [out_dim] {
                return Err(shape_err(format!(
                    "linear bias {:?} for output width {out_dim}",
                    self.shape(b)
                )));
            }
        }
        let rows = self.value(x).len() / inp;
        let mut out = vec![0.0; rows * out_dim];
        let beta = if let Some(b) = b {
            let bias = self.value(b);
            out.chunks_exact_mut(out_dim)
                .for_each(|row| row.copy_from_slice(bias));
            1.0
        } else {
            0.0
        };
        gemm(
            Operand::new(self.value(x), rows, inp),
            Operand::new(self.value(w), inp, out_dim),
            &mut out,
            beta,
        );
        let mut shape = sx;
        *shape.last_mut().unwrap() = out_dim;
        let mut ids = vec![x.0, w.0];
        ids.extend(b.map(|b| b.0));
        let needs = self.needs(&ids);
        Ok(self.push(
            shape,
            out,
            Op::Linear {
                x: x.0,
                w: w.0,
                b: b.map(|b| b.0),
                rows,
                inp,
                out: out_dim,
            },
            needs,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(format!(
                "add {:?} + {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        let needs = self.needs(&[a.0, b.0]);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::Add { a: a.0, b: b.0 }, needs))
    }

    /// `a + b` where `b`'s shape is a trailing suffix of `a`'s shape.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(shape_err(format!("add_broadcast {sa:?} + {sb:?}")));
        }
        let blen = self.value(b).len();
        let vb = self.value(b);
        let out: Vec<f64> = self
            .value(a)
            .chunks_exact(blen)
            .flat_map(|chunk| chunk.iter().zip(vb).map(|(x, y)| x + y))
            .collect();
        let needs = self.needs(&[a.0, b.0]);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::AddBroadcast { a: a.0, b: b.0 }, needs))
    }

    /// Prepends `token: [D]` to every sequence of `x: [B×S×D]`, giving `[B×(S+1)×D]`.
    pub fn prepend_token(&mut self, x: Var, token: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 || self.shape(token) != [sx[2]] {
            return Err(shape_err(format!(
                "prepend_token x{sx:?} token{:?}",
                self.shape(token)
            )));
        }
        let (batch, seq, dim) = (sx[0], sx[1], sx[2]);
        let mut out = Vec::with_capacity(batch * (seq + 1) * dim);
        {
            let (vx, vt) = (self.value(x), self.value(token));
            for b in 0..batch {
                out.extend_from_slice(vt);
                out.extend_from_slice(&vx[b * seq * dim..(b + 1) * seq * dim]);
            }
        }
        let needs = self.needs(&[x.0, token.0]);
        Ok(self.push(
            vec![batch, seq + 1, dim],
            out,
            Op::PrependToken {
                x: x.0,
                token: token.0,
                batch,
                seq,
                dim,
            },
            needs,
        ))
    }

    /// Layer normalization over the last axis followed by `gain ⊙ x̂ + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let dim = *self.shape(x).last().unwrap();
        if self.shape(gain) != [dim] || self.shape(bias) != [dim] {
            return Err(shape_err(format!(
                "layer_norm over {dim} with gain {:?} bias {:?}",
                self.shape(gain),
                self.shape(bias)
            )));
        }
        let vx = self.value(x);
        let rows = vx.len() / dim;
        let mut xhat = vec![0.0; vx.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; vx.len()];
        let (g, bb) = (self.value(gain), self.value(bias));
        for r in 0..rows {
            let row = &vx[r * dim..(r + 1) * dim];
            let mean = row.iter().sum::<f64>() / dim as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / dim as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..dim {
                let h = (row[j] - mean) * rs;
                xhat[r * dim + j] = h;
                out[r * dim + j] = h * g[j] + bb[j];
            }
        }
        let needs = self.needs(&[x.0, gain.0, bias.0]);
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            shape,
            out,
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
                xhat,
                rstd,
                dim,
            },
            needs,
        ))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out: Vec<f64> = self.value(x).iter().map(|&v| ops::gelu(v)).collect();
        let needs = self.needs(&[x.0]);
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::Gelu { x: x.0 }, needs)
    }

    /// Inverted dropout: zeroes each element with probability `rate` and
    /// scales survivors by `1/(1-rate)`. A zero rate records nothing.
    pub fn dropout(&mut self, x: Var, rate: f64, rng: &mut Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!(
                "dropout rate {rate} outside [0, 1)"
            )));
        }
        if rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.value(x).len())
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let out: Vec<f64> = self
            .value(x)
            .iter()
            .zip(&mask)
            .map(|(v, m)| v * m)
            .collect();
        let needs = self.needs(&[x.0]);
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, out, Op::Dropout { x: x.0, mask }, needs))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out: Vec<f64> = self.value(x).iter().map(|v| v * factor).collect();
        let needs = self.needs(&[x.0]);
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::Scale { x: x.0, factor }, needs)
    }

    /// Softmax along the last axis, computed with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Var {
        let dim = *self.shape(x).last().unwrap();
        let mut out = self.value(x).to_vec();
        out.chunks_exact_mut(dim).for_each(ops::softmax_in_place);
        let needs = self.needs(&[x.0]);
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::Softmax { x: x.0, dim }, needs)
    }

    /// `[B×S×(h·d)] → [(B·h)×S×d]`.
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 || heads == 0 || !sx[2].is_multiple_of(heads) {
            return Err(shape_err(format!("split_heads {sx:?} into {heads} heads")));
        }
        let (batch, seq, width) = (sx[0], sx[1], sx[2]);
        let head_dim = width / heads;
        let vx = self.value(x);
        let mut out = vec![0.0; vx.len()];
        for b in 0..batch {
            for s in 0..seq {
                let src = &vx[(b * seq + s) * width..(b * seq + s + 1) * width];
                for h in 0..heads {
                    let dst = ((b * heads + h) * seq + s) * head_dim;
                    out[dst..dst + head_dim]
                        .copy_from_slice(&src[h * head_dim..(h + 1) * head_dim]);
                }
            }
        }
        let needs = self.needs(&[x.0]);
        Ok(self.push(
            vec![batch * heads, seq, head_dim],
            out,
            Op::SplitHeads {
                x: x.0,
                batch,
                seq,
                heads,
                head_dim,
            },
            needs,
        ))
    }

    /// `[(B·h)×S×d] → [B×S×(h·d)]`.
    pub fn merge_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 || heads == 0 || !sx[0].is_multiple_of(heads) {
            return Err(shape_err(format!("merge_heads {sx:?} from {heads} heads")));
        }
        let (batch, seq, head_dim) = (sx[0] / heads, sx[1], sx[2]);
        let width = heads * head_dim;
        let vx = self.value(x);
        let mut out = vec![0.0; vx.len()];
        for b in 0..batch {
            for s in 0..seq {
                for h in 0..heads {
                    let src = ((b * heads + h) * seq + s) * head_dim;
                    let dst = (b * seq + s) * width + h * head_dim;
                    out[dst..dst + head_dim].copy_from_slice(&vx[src..src + head_dim]);
                }
            }
        }
        let needs = self.needs(&[x.0]);
        Ok(self.push(
            vec![batch, seq, width],
            out,
            Op::MergeHeads {
                x: x.0,
                batch,
                seq,
                heads,
                head_dim,
            },
            needs,
        ))
    }

    /// Picks sequence position `index` from `[B×S×D]`, giving `[B×D]`.
    pub fn select_token(&mut self, x: Var, index: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 || index >= sx[1] {
            return Err(shape_err(format!("select_token {index} from {sx:?}")));
        }
        let (batch, seq, dim) = (sx[0], sx[1], sx[2]);
        let vx = self.value(x);
        let mut out = Vec::with_capacity(batch * dim);
        for b in 0..batch {
            let start = (b * seq + index) * dim;
            out.extend_from_slice(&vx[start..start + dim]);
        }
        let needs = self.needs(&[x.0]);
        Ok(self.push(
            vec![batch, dim],
            out,
            Op::SelectToken {
                x: x.0,
                seq,
                dim,
                index,
            },
            needs,
        ))
    }

    /// Mean negative log-softmax of the true class over a `[B×C]` batch.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let sl = self.shape(logits).to_vec();
        if sl.len() != 2 || sl[0] != labels.len() {
            return Err(shape_err(format!(
                "cross_entropy logits {sl:?} with {} labels",
                labels.len()
            )));
        }
        let classes = sl[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        let mut probs = self.value(logits).to_vec();
        let mut loss = 0.0;
        for (row, &label) in probs.chunks_exact_mut(classes).zip(labels) {
            loss -= ops::log_softmax_at(row, label);
            ops::softmax_in_place(row);
        }
        loss /= labels.len() as f64;
        let needs = self.needs(&[logits.0]);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                logits: logits.0,
                labels: labels.to_vec(),
                probs,
                classes,
            },
            needs,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).iter().sum();
        let needs = self.needs(&[x.0]);
        self.push(vec![1], vec![total], Op::Sum { x: x.0 }, needs)
    }

    /// Reverse-mode accumulation from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.shape(loss) != [1] {
            return Err(shape_err(format!(
                "backward needs a scalar loss, got {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            self.backprop_node(node, &g, &mut grads);
        }
        // Keep only leaf gradients; intermediates were consumed above.
        for (id, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) {
                grads[id] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, id: usize) -> bool {
        self.nodes[id].needs_grad
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                if self.wants(a) {
                    let mut da = vec![0.0; m * k];
                    gemm(
                        Operand::new(g, m, n),
                        Operand::new(&self.nodes[b].value, k, n).t(),
                        &mut da,
                        0.0,
                    );
                    accumulate(grads, a, da);
                }
                if self.wants(b) {
                    let mut db = vec![0.0; k * n];
                    gemm(
                        Operand::new(&self.nodes[a].value, m, k).t(),
                        Operand::new(g, m, n),
                        &mut db,
                        0.0,
                    );
                    accumulate(grads, b, db);
                }
            }
            &Op::BatchMatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            } => {
                let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
                if self.wants(a) {
                    let mut da = vec![0.0; batch * m * k];
                    for i in 0..batch {
                        let g_i = Operand::new(&g[i * m * n..(i + 1) * m * n], m, n);
                        let b_i = &vb[i * k * n..(i + 1) * k * n];
                        // C = A·B → dA = dC·Bᵀ ; C = A·Bᵀ → dA = dC·B
                        let b_op = if trans_b {
                            Operand::new(b_i, n, k)
                        } else {
                            Operand::new(b_i, k, n).t()
                        };
                        gemm(g_i, b_op, &mut da[i * m * k..(i + 1) * m * k], 0.0);
                    }
                    accumulate(grads, a, da);
                }
                if self.wants(b) {
                    let mut db = vec![0.0; batch * k * n];
                    for i in 0..batch {
                        let g_i = Operand::new(&g[i * m * n..(i + 1) * m * n], m, n);
                        let a_i = Operand::new(&va[i * m * k..(i + 1) * m * k], m, k);
                        let out = &mut db[i * k * n..(i + 1) * k * n];
                        if trans_b {
                            // dB[n×k] = dCᵀ·A
                            gemm(g_i.t(), a_i, out, 0.0);
                        } else {
                            // dB[k×n] = Aᵀ·dC
                            gemm(a_i.t(), g_i, out, 0.0);
                        }
                    }
                    accumulate(grads, b, db);
                }
            }
            &Op::Linear {
                x,
                w,
                b,
                rows,
                inp,
                out,
            } => {
                if self.wants(x) {
                    let mut dx = vec![0.0; rows * inp];
                    gemm(
                        Operand::new(g, rows, out),
                        Operand::new(&self.nodes[w].value, inp, out).t(),
                        &mut dx,
                        0.0,
                    );
                    accumulate(grads, x, dx);
                }
                if self.wants(w) {
                    let mut dw = vec![0.0; inp * out];
                    gemm(
                        Operand::new(&self.nodes[x].value, rows, inp).t(),
                        Operand::new(g, rows, out),
                        &mut dw,
                        0.0,
                    );
                    accumulate(grads, w, dw);
                }
                if let Some(b) = b {
                    if self.wants(b) {
                        let mut db = vec![0.0; out];
                        for row in g.chunks_exact(out) {
                            db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                        }
                        accumulate(grads, b, db);
                    }
                }
            }
            &Op::Add { a, b } => {
                if self.wants(a) {
                    accumulate(grads, a, g.to_vec());
                }
                if self.wants(b) {
                    accumulate(grads, b, g.to_vec());
                }
            }
            &Op::AddBroadcast { a, b } => {
                if self.wants(a) {
                    accumulate(grads, a, g.to_vec());
                }
                if self.wants(b) {
                    let blen = self.nodes[b].value.len();
                    let mut db = vec![0.0; blen];
                    for chunk in g.chunks_exact(blen) {
                        db.iter_mut().zip(chunk).for_each(|(d, v)| *d += v);
                    }
                    accumulate(grads, b, db);
                }
            }
            &Op::PrependToken {
                x,
                token,
                batch,
                seq,
                dim,
            } => {
                let stride = (seq + 1) * dim;
                if self.wants(x) {
                    let mut dx = Vec::with_capacity(batch * seq * dim);
                    for b in 0..batch {
                        dx.extend_from_slice(&g[b * stride + dim..(b + 1) * stride]);
                    }
                    accumulate(grads, x, dx);
                }
                if self.wants(token) {
                    let mut dt = vec![0.0; dim];
                    for b in 0..batch {
                        dt.iter_mut()
                            .zip(&g[b * stride..b * stride + dim])
                            .for_each(|(d, v)| *d += v);
                    }
                    accumulate(grads, token, dt);
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
                dim,
            } => {
                let (x, gain, bias, dim) = (*x, *gain, *bias, *dim);
                let gv = &self.nodes[gain].value;
                if self.wants(x) {
                    let mut dx = vec![0.0; g.len()];
                    for (r, &rs) in rstd.iter().enumerate() {
                        let span = r * dim..(r + 1) * dim;
                        let (gr, hr) = (&g[span.clone()], &xhat[span.clone()]);
                        let mut mean_d = 0.0;
                        let mut mean_dh = 0.0;
                        for j in 0..dim {
                            let d = gr[j] * gv[j];
                            mean_d += d;
                            mean_dh += d * hr[j];
                        }
                        mean_d /= dim as f64;
                        mean_dh /= dim as f64;
                        for j in 0..dim {
                            let d = gr[j] * gv[j];
                            dx[r * dim + j] = rs * (d - mean_d - hr[j] * mean_dh);
                        }
                    }
                    accumulate(grads, x, dx);
                }
                if self.wants(gain) {
                    let mut dg = vec![0.0; dim];
                    for (gr, hr) in g.chunks_exact(dim).zip(xhat.chunks_exact(dim)) {
                        for j in 0..dim {
                            dg[j] += gr[j] * hr[j];
                        }
                    }
                    accumulate(grads, gain, dg);
                }
                if self.wants(bias) {
                    let mut db = vec![0.0; dim];
                    for gr in g.chunks_exact(dim) {
                        db.iter_mut().zip(gr).for_each(|(d, v)| *d += v);
                    }
                    accumulate(grads, bias, db);
                }
            }
            &Op::Gelu { x } => {
                let dx = self.nodes[x]
                    .value
                    .iter()
                    .zip(g)
                    .map(|(&v, gi)| gi * ops::gelu_grad(v))
                    .collect();
                accumulate(grads, x, dx);
            }
            Op::Dropout { x, mask } => {
                let dx = g.iter().zip(mask).map(|(gi, m)| gi * m).collect();
                accumulate(grads, *x, dx);
            }
            &Op::Scale { x, factor } => {
                accumulate(grads, x, g.iter().map(|v| v * factor).collect());
            }
            &Op::Softmax { x, dim } => {
                let y = &node.value;
                let mut dx = vec![0.0; g.len()];
                for ((dxr, yr), gr) in dx
                    .chunks_exact_mut(dim)
                    .zip(y.chunks_exact(dim))
                    .zip(g.chunks_exact(dim))
                {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..dim {
                        dxr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                accumulate(grads, x, dx);
            }
            &Op::SplitHeads {
                x,
                batch,
                seq,
                heads,
                head_dim,
            } => {
                let width = heads * head_dim;
                let mut dx = vec![0.0; g.len()];
                for b in 0..batch {
                    for s in 0..seq {
                        for h in 0..heads {
                            let src = ((b * heads + h) * seq + s) * head_dim;
                            let dst = (b * seq + s) * width + h * head_dim;
                            dx[dst..dst + head_dim].copy_from_slice(&g[src..src + head_dim]);
                        }
                    }
                }
                accumulate(grads, x, dx);
            }
            &Op::MergeHeads {
                x,
                batch,
                seq,
                heads,
                head_dim,
            } => {
                let width = heads * head_dim;
                let mut dx = vec![0.0; g.len()];
                for b in 0..batch {
                    for s in 0..seq {
                        for h in 0..heads {
                            let dst = ((b * heads + h) * seq + s) * head_dim;
                            let src = (b * seq + s) * width + h * head_dim;
                            dx[dst..dst + head_dim].copy_from_slice(&g[src..src + head_dim]);
                        }
                    }
                }
                accumulate(grads, x, dx);
            }
            &Op::SelectToken {
                x,
                seq,
                dim,
                index,
            } => {
                let mut dx = vec![0.0; self.nodes[x].value.len()];
                for (b, gr) in g.chunks_exact(dim).enumerate() {
                    let start = (b * seq + index) * dim;
                    dx[start..start + dim].copy_from_slice(gr);
                }
                accumulate(grads, x, dx);
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
                classes,
            } => {
                let scale = g[0] / labels.len() as f64;
                let mut dl = probs.clone();
                for (row, &label) in dl.chunks_exact_mut(*classes).zip(labels) {
                    row[label] -= 1.0;
                    row.iter_mut().for_each(|v| *v *= scale);
                }
                accumulate(grads, *logits, dl);
            }
            &Op::Sum { x } => {
                let n = self.nodes[x].value.len();
                accumulate(grads, x, vec![g[0]; n]);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], id: usize, delta: Vec<f64>) {
    match &mut grads[id] {
        Some(existing) => existing
            .iter_mut()
            .zip(&delta)
            .for_each(|(e, d)| *e += d),
        slot @ None => *slot = Some(delta),
    }
}
