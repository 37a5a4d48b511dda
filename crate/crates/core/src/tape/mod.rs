//! A small reverse-mode automatic differentiation tape over dense `f64` tensors.
//!
//! Tensors are row-major with an explicit shape. The leading axis is the *row*
//! axis: for set-structured data the rows are `T` consecutive groups of `S` samples,
//! and the `group_*` ops reduce or broadcast across the samples of each group.
//! Ops never broadcast implicitly; shapes must match exactly.

pub mod kernels;

use kernels::{col2im, gemm, im2col, sigmoid, ConvGeom};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Exp(Var),
    Elu(Var),
    Clamp(Var, f64, f64),
    Reshape(Var),
    Concat(Vec<Var>),
    Gather(Var, Vec<usize>),
    GroupSum(Var, usize),
    GroupMean(Var, usize),
    GroupMax(Var, Vec<usize>),
    GroupBroadcast(Var, usize),
    GroupSoftmax(Var, usize),
    HeadSum(Var, usize),
    HeadExpand(Var, usize),
    SpatialMean(Var),
    SpatialBroadcast(Var),
    SumAll(Var),
    Conv {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
    },
    ConvTranspose {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        training: bool,
    },
    KlDiag {
        q_mean: Var,
        q_log_var: Var,
        p_mean: Var,
        p_log_var: Var,
    },
    BernoulliLogProb {
        logits: Var,
        target: Vec<f64>,
    },
}

#[derive(Debug, Clone)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
}

/// Per-channel statistics computed by a training-mode batch norm.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
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

    fn push(&mut self, value: Vec<f64>, shape: Vec<usize>, op: Op) -> Var {
        debug_assert_eq!(value.len(), numel(&shape), "tape: value/shape mismatch");
        self.nodes.push(Node { shape, value, op });
        Var(self.nodes.len() - 1)
    }

    /// Inserts a leaf. Leaves receive gradients like any other node.
    pub fn leaf(&mut self, value: Vec<f64>, shape: &[usize]) -> Var {
        assert_eq!(value.len(), numel(shape), "leaf: value length {} vs shape {:?}", value.len(), shape);
        self.push(value, shape.to_vec(), Op::Leaf)
    }

    pub fn zeros(&mut self, shape: &[usize]) -> Var {
        self.leaf(vec![0.0; numel(shape)], shape)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let val = self.value(v);
        assert_eq!(val.len(), 1, "scalar() on non-scalar node");
        val[0]
    }

    fn rows_cols(&self, v: Var) -> (usize, usize) {
        let s = self.shape(v);
        let rows = s[0];
        let total = numel(s);
        (rows, if rows == 0 { 0 } else { total / rows })
    }

    /// Batch statistics recorded by a training-mode batch norm node.
    pub fn batch_stats(&self, v: Var) -> Option<BatchStats> {
        match &self.nodes[v.0].op {
            Op::BatchNorm {
                xhat: _,
                inv_std,
                training: true,
                x,
                ..
            } => {
                let shape = self.shape(*x);
                let (n, c) = (shape[0], shape[1]);
                let hw = numel(&shape[2..]);
                let xs = self.value(*x);
                let m = (n * hw) as f64;
                let mut mean = vec![0.0; c];
                for s in 0..n {
                    for ch in 0..c {
                        let off = (s * c + ch) * hw;
                        mean[ch] += xs[off..off + hw].iter().sum::<f64>();
                    }
                }
                mean.iter_mut().for_each(|v| *v /= m);
                let var = inv_std.iter().map(|is| 1.0 / (is * is) - BN_EPS).collect();
                Some(BatchStats { mean, var })
            }
            _ => None,
        }
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) {
        assert_eq!(self.shape(a), self.shape(b), "{what}: shape mismatch");
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(value, shape, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "add");
        let value = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        self.push(value, shape, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "sub");
        let value = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x - y).collect();
        let shape = self.shape(a).to_vec();
        self.push(value, shape, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "mul");
        let value = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        self.push(value, shape, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn offset(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x + s, Op::Offset(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn elu(&mut self, a: Var) -> Var {
        self.unary(a, |x| if x > 0.0 { x } else { x.exp_m1() }, Op::Elu(a))
    }

    /// Clamps into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        assert_eq!(numel(shape), numel(self.shape(a)), "reshape: element count");
        let value = self.value(a).to_vec();
        self.push(value, shape.to_vec(), Op::Reshape(a))
    }

    /// Concatenates along axis 1. All parts share the row count and trailing dims.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat: no parts");
        if parts.len() == 1 {
            return parts[0];
        }
        let first = self.shape(parts[0]).to_vec();
        let rows = first[0];
        let tail = &first[2..];
        let mut channels = 0;
        for &p in parts {
            let s = self.shape(p);
            assert!(s.len() == first.len() && s[0] == rows && &s[2..] == tail, "concat: incompatible shapes");
            channels += s[1];
        }
        let mut shape = first.clone();
        shape[1] = channels;
        let mut value = Vec::with_capacity(numel(&shape));
        for r in 0..rows {
            for &p in parts {
                let (_, cols) = self.rows_cols(p);
                value.extend_from_slice(&self.value(p)[r * cols..(r + 1) * cols]);
            }
        }
        self.push(value, shape, Op::Concat(parts.to_vec()))
    }

    /// Selects rows by index (repeats allowed).
    pub fn gather(&mut self, a: Var, rows: &[usize]) -> Var {
        let (n, cols) = self.rows_cols(a);
        let src = self.value(a);
        let mut value = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            assert!(r < n, "gather: row {r} out of {n}");
            value.extend_from_slice(&src[r * cols..(r + 1) * cols]);
        }
        let mut shape = self.shape(a).to_vec();
        shape[0] = rows.len();
        self.push(value, shape, Op::Gather(a, rows.to_vec()))
    }

    fn group_shape(&self, a: Var, group: usize) -> (usize, usize, Vec<usize>) {
        let (n, cols) = self.rows_cols(a);
        assert!(group >= 1 && n % group == 0, "group op: {n} rows not divisible by group size {group}");
        let mut shape = self.shape(a).to_vec();
        shape[0] = n / group;
        (n / group, cols, shape)
    }

    pub fn group_sum(&mut self, a: Var, group: usize) -> Var {
        let (t, cols, shape) = self.group_shape(a, group);
        let src = self.value(a);
        let mut value = vec![0.0; t * cols];
        for g in 0..t {
            let dst = &mut value[g * cols..(g + 1) * cols];
            for s in 0..group {
                let row = &src[(g * group + s) * cols..(g * group + s + 1) * cols];
                dst.iter_mut().zip(row).for_each(|(d, v)| *d += v);
            }
        }
        self.push(value, shape, Op::GroupSum(a, group))
    }

    pub fn group_mean(&mut self, a: Var, group: usize) -> Var {
        let (t, cols, shape) = self.group_shape(a, group);
        let src = self.value(a);
        let mut value = vec![0.0; t * cols];
        for g in 0..t {
            let dst = &mut value[g * cols..(g + 1) * cols];
            for s in 0..group {
                let row = &src[(g * group + s) * cols..(g * group + s + 1) * cols];
                dst.iter_mut().zip(row).for_each(|(d, v)| *d += v);
            }
            dst.iter_mut().for_each(|d| *d /= group as f64);
        }
        self.push(value, shape, Op::GroupMean(a, group))
    }

    /// Coordinatewise maximum within each group; ties route the gradient to the
    /// lowest row index.
    pub fn group_max(&mut self, a: Var, group: usize) -> Var {
        let (t, cols, shape) = self.group_shape(a, group);
        let src = self.value(a);
        let mut value = vec![f64::NEG_INFINITY; t * cols];
        let mut arg = vec![0usize; t * cols];
        for g in 0..t {
            for s in 0..group {
                let r = g * group + s;
                for c in 0..cols {
                    let v = src[r * cols + c];
                    if s == 0 || v > value[g * cols + c] {
                        value[g * cols + c] = v;
                        arg[g * cols + c] = r;
                    }
                }
            }
        }
        self.push(value, shape, Op::GroupMax(a, arg))
    }

    /// Repeats each row `group` times.
    pub fn group_broadcast(&mut self, a: Var, group: usize) -> Var {
        let (t, cols) = self.rows_cols(a);
        let src = self.value(a);
        let mut value = Vec::with_capacity(t * group * cols);
        for g in 0..t {
            for _ in 0..group {
                value.extend_from_slice(&src[g * cols..(g + 1) * cols]);
            }
        }
        let mut shape = self.shape(a).to_vec();
        shape[0] = t * group;
        self.push(value, shape, Op::GroupBroadcast(a, group))
    }

    /// Softmax over the rows of each group, independently per column.
    pub fn group_softmax(&mut self, a: Var, group: usize) -> Var {
        let (t, cols, _) = self.group_shape(a, group);
        let src = self.value(a);
        let mut value = vec![0.0; src.len()];
        for g in 0..t {
            for c in 0..cols {
                let idx = |s: usize| (g * group + s) * cols + c;
                let max = (0..group).map(|s| src[idx(s)]).fold(f64::NEG_INFINITY, f64::max);
                let mut denom = 0.0;
                for s in 0..group {
                    let e = (src[idx(s)] - max).exp();
                    value[idx(s)] = e;
                    denom += e;
                }
                for s in 0..group {
                    value[idx(s)] /= denom;
                }
            }
        }
        let shape = self.shape(a).to_vec();
        self.push(value, shape, Op::GroupSoftmax(a, group))
    }

    /// Sums each row's columns in `heads` contiguous blocks: `[N, ...] -> [N, heads]`.
    pub fn head_sum(&mut self, a: Var, heads: usize) -> Var {
        let (n, cols) = self.rows_cols(a);
        assert!(heads >= 1 && cols % heads == 0, "head_sum: {cols} columns vs {heads} heads");
        let block = cols / heads;
        let src = self.value(a);
        let value = (0..n * heads)
            .map(|i| {
                let (r, h) = (i / heads, i % heads);
                src[r * cols + h * block..r * cols + (h + 1) * block].iter().sum()
            })
            .collect();
        self.push(value, vec![n, heads], Op::HeadSum(a, heads))
    }

    /// Adjoint of [`Tape::head_sum`]: `[N, heads] -> shape`, each head value repeated
    /// across its block.
    pub fn head_expand(&mut self, a: Var, shape: &[usize]) -> Var {
        let (n, heads) = self.rows_cols(a);
        assert_eq!(shape[0], n, "head_expand: row count");
        let cols = numel(&shape[1..]);
        assert!(cols % heads == 0, "head_expand: {cols} columns vs {heads} heads");
        let block = cols / heads;
        let src = self.value(a);
        let value = (0..n * cols).map(|i| src[(i / cols) * heads + (i % cols) / block]).collect();
        self.push(value, shape.to_vec(), Op::HeadExpand(a, block))
    }

    /// `[N, C, H, W] -> [N, C, 1, 1]`.
    pub fn spatial_mean(&mut self, a: Var) -> Var {
        let s = self.shape(a).to_vec();
        assert_eq!(s.len(), 4, "spatial_mean: expected rank 4");
        let hw = s[2] * s[3];
        let value = self.value(a).chunks(hw).map(|p| p.iter().sum::<f64>() / hw as f64).collect();
        self.push(value, vec![s[0], s[1], 1, 1], Op::SpatialMean(a))
    }

    /// `[N, C, 1, 1] -> [N, C, h, w]`.
    pub fn spatial_broadcast(&mut self, a: Var, h: usize, w: usize) -> Var {
        let s = self.shape(a).to_vec();
        assert!(s.len() == 4 && s[2] == 1 && s[3] == 1, "spatial_broadcast: expected [N, C, 1, 1]");
        let value = self.value(a).iter().flat_map(|&v| std::iter::repeat_n(v, h * w)).collect();
        self.push(value, vec![s[0], s[1], h, w], Op::SpatialBroadcast(a))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = vec![self.value(a).iter().sum()];
        self.push(value, vec![1], Op::SumAll(a))
    }

    /// 2-D convolution. `x: [N, Ci, H, W]`, `w: [Co, Ci, k, k]`, `b: [Co]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert!(xs.len() == 4 && ws.len() == 4, "conv2d: rank");
        assert_eq!(xs[1], ws[1], "conv2d: input channels {} vs weight {}", xs[1], ws[1]);
        assert_eq!(ws[2], ws[3], "conv2d: square kernels only");
        assert_eq!(self.shape(b), &[ws[0]], "conv2d: bias shape");
        let geom = ConvGeom::forward(xs[1], xs[2], xs[3], ws[2], stride, pad).expect("conv2d: kernel larger than padded input");
        let (n, co) = (xs[0], ws[0]);
        let p = geom.col_cols();
        let in_sz = xs[1] * xs[2] * xs[3];
        let mut out = vec![0.0; n * co * p];
        let mut cols = vec![0.0; if geom.is_pointwise() { 0 } else { geom.col_rows() * p }];
        let xv = &self.nodes[x.0].value;
        let wv = &self.nodes[w.0].value;
        let bv = &self.nodes[b.0].value;
        for s in 0..n {
            let img = &xv[s * in_sz..(s + 1) * in_sz];
            let dst = &mut out[s * co * p..(s + 1) * co * p];
            for (o, chunk) in dst.chunks_mut(p).enumerate() {
                chunk.fill(bv[o]);
            }
            let rhs: &[f64] = if geom.is_pointwise() {
                img
            } else {
                im2col(img, &geom, &mut cols);
                &cols
            };
            gemm(co, geom.col_rows(), p, wv, false, rhs, false, dst, 1.0);
        }
        self.push(out, vec![n, co, geom.out_h, geom.out_w], Op::Conv { x, w, b, geom })
    }

    /// Transposed convolution. `x: [N, Ci, H, W]`, `w: [Ci, Co, k, k]`, `b: [Co]`.
    /// Output side is `(H - 1) * stride - 2 * pad + k + out_pad`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize, out_pad: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert!(xs.len() == 4 && ws.len() == 4, "conv_transpose2d: rank");
        assert_eq!(xs[1], ws[0], "conv_transpose2d: input channels");
        assert_eq!(ws[2], ws[3], "conv_transpose2d: square kernels only");
        assert!(out_pad < stride.max(1), "conv_transpose2d: out_pad must be below stride");
        let (n, ci, co, k) = (xs[0], xs[1], ws[1], ws[2]);
        assert_eq!(self.shape(b), &[co], "conv_transpose2d: bias shape");
        let oh = (xs[2] - 1) * stride + k + out_pad - 2 * pad;
        let ow = (xs[3] - 1) * stride + k + out_pad - 2 * pad;
        let geom = ConvGeom::forward(co, oh, ow, k, stride, pad).expect("conv_transpose2d: geometry");
        debug_assert_eq!((geom.out_h, geom.out_w), (xs[2], xs[3]));
        let pin = xs[2] * xs[3];
        let out_sz = co * oh * ow;
        let mut out = vec![0.0; n * out_sz];
        let mut cols = vec![0.0; geom.col_rows() * pin];
        let xv = &self.nodes[x.0].value;
        let wv = &self.nodes[w.0].value;
        let bv = &self.nodes[b.0].value;
        for s in 0..n {
            let img = &xv[s * ci * pin..(s + 1) * ci * pin];
            gemm(geom.col_rows(), ci, pin, wv, true, img, false, &mut cols, 0.0);
            let dst = &mut out[s * out_sz..(s + 1) * out_sz];
            for (o, chunk) in dst.chunks_mut(oh * ow).enumerate() {
                chunk.fill(bv[o]);
            }
            col2im(&cols, &geom, dst);
        }
        self.push(out, vec![n, co, oh, ow], Op::ConvTranspose { x, w, b, geom })
    }

    /// Batch normalization over `(N, H, W)` per channel.
    ///
    /// In training mode the batch statistics are used (retrieve them with
    /// [`Tape::batch_stats`]); otherwise `running` supplies mean and variance.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, running: Option<(&[f64], &[f64])>) -> Var {
        let shape = self.shape(x).to_vec();
        assert!(shape.len() >= 2, "batch_norm: rank");
        let (n, c) = (shape[0], shape[1]);
        let hw = numel(&shape[2..]);
        assert_eq!(self.shape(gamma), &[c], "batch_norm: gamma shape");
        assert_eq!(self.shape(beta), &[c], "batch_norm: beta shape");
        let xv = self.value(x);
        let (mean, var) = match running {
            Some((m, v)) => (m.to_vec(), v.to_vec()),
            None => {
                let m = (n * hw) as f64;
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for s in 0..n {
                    for ch in 0..c {
                        let off = (s * c + ch) * hw;
                        mean[ch] += xv[off..off + hw].iter().sum::<f64>();
                    }
                }
                mean.iter_mut().for_each(|v| *v /= m);
                for s in 0..n {
                    for ch in 0..c {
                        let off = (s * c + ch) * hw;
                        var[ch] += xv[off..off + hw].iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>();
                    }
                }
                var.iter_mut().for_each(|v| *v /= m);
                (mean, var)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let gv = self.value(gamma);
        let bv = self.value(beta);
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for s in 0..n {
            for ch in 0..c {
                let off = (s * c + ch) * hw;
                for i in off..off + hw {
                    xhat[i] = (xv[i] - mean[ch]) * inv_std[ch];
                    out[i] = gv[ch] * xhat[i] + bv[ch];
                }
            }
        }
        let training = running.is_none();
        self.push(
            out,
            shape,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                training,
            },
        )
    }

    /// Row-wise analytic KL between diagonal Gaussians: `[N, ...] -> [N]`.
    pub fn kl_diag(&mut self, q_mean: Var, q_log_var: Var, p_mean: Var, p_log_var: Var) -> Var {
        for other in [q_log_var, p_mean, p_log_var] {
            self.same_shape(q_mean, other, "kl_diag");
        }
        let (n, cols) = self.rows_cols(q_mean);
        let (qm, ql, pm, pl) = (self.value(q_mean), self.value(q_log_var), self.value(p_mean), self.value(p_log_var));
        let value = (0..n)
            .map(|r| {
                (r * cols..(r + 1) * cols)
                    .map(|i| crate::distributions::kl_term(qm[i], ql[i], pm[i], pl[i]))
                    .sum()
            })
            .collect();
        self.push(
            value,
            vec![n],
            Op::KlDiag {
                q_mean,
                q_log_var,
                p_mean,
                p_log_var,
            },
        )
    }

    /// Row-wise Bernoulli log-likelihood of `target` under `logits`: `[N, ...] -> [N]`.
    /// Targets may be fractional (soft observations).
    pub fn bernoulli_log_prob(&mut self, logits: Var, target: Vec<f64>) -> Var {
        let (n, cols) = self.rows_cols(logits);
        assert_eq!(target.len(), n * cols, "bernoulli_log_prob: target size");
        let lv = self.value(logits);
        let value = (0..n)
            .map(|r| (r * cols..(r + 1) * cols).map(|i| crate::distributions::bernoulli_term(target[i], lv[i])).sum())
            .collect();
        self.push(value, vec![n], Op::BernoulliLogProb { logits, target })
    }

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.nodes[root.0].value.len(), 1, "backward: root must be scalar");
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }
        Gradients { grads }
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        macro_rules! acc {
            ($v:expr) => {
                slot(grads, &self.nodes, $v)
            };
        }
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                add_into(acc!(*a), g);
                add_into(acc!(*b), g);
            }
            Op::Sub(a, b) => {
                add_into(acc!(*a), g);
                acc!(*b).iter_mut().zip(g).for_each(|(d, v)| *d -= v);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc!(*a).iter_mut().zip(g).zip(bv).for_each(|((d, gi), y)| *d += gi * y);
                acc!(*b).iter_mut().zip(g).zip(av).for_each(|((d, gi), x)| *d += gi * x);
            }
            Op::Scale(a, s) => acc!(*a).iter_mut().zip(g).for_each(|(d, gi)| *d += s * gi),
            Op::Offset(a) | Op::Reshape(a) => add_into(acc!(*a), g),
            Op::Exp(a) => acc!(*a).iter_mut().zip(g).zip(&node.value).for_each(|((d, gi), y)| *d += gi * y),
            Op::Elu(a) => {
                let xv = self.value(*a);
                acc!(*a)
                    .iter_mut()
                    .zip(g)
                    .zip(xv.iter().zip(&node.value))
                    .for_each(|((d, gi), (x, y))| *d += if *x > 0.0 { *gi } else { gi * (y + 1.0) });
            }
            Op::Clamp(a, lo, hi) => {
                let xv = self.value(*a);
                acc!(*a).iter_mut().zip(g).zip(xv).for_each(|((d, gi), x)| {
                    if *x >= *lo && *x <= *hi {
                        *d += gi;
                    }
                });
            }
            Op::Concat(parts) => {
                let rows = node.shape[0];
                let total = node.value.len() / rows.max(1);
                let mut offset = 0;
                for &p in parts {
                    let (_, cols) = self.rows_cols(p);
                    let dst = acc!(p);
                    for r in 0..rows {
                        add_into(&mut dst[r * cols..(r + 1) * cols], &g[r * total + offset..r * total + offset + cols]);
                    }
                    offset += cols;
                }
            }
            Op::Gather(a, rows) => {
                let (_, cols) = self.rows_cols(*a);
                let dst = acc!(*a);
                for (i, &r) in rows.iter().enumerate() {
                    add_into(&mut dst[r * cols..(r + 1) * cols], &g[i * cols..(i + 1) * cols]);
                }
            }
            Op::GroupSum(a, group) | Op::GroupMean(a, group) => {
                let scale = if matches!(node.op, Op::GroupMean(..)) { 1.0 / *group as f64 } else { 1.0 };
                let (n, cols) = self.rows_cols(*a);
                let dst = acc!(*a);
                for r in 0..n {
                    let gr = &g[(r / group) * cols..(r / group + 1) * cols];
                    dst[r * cols..(r + 1) * cols].iter_mut().zip(gr).for_each(|(d, v)| *d += scale * v);
                }
            }
            Op::GroupMax(a, arg) => {
                let (_, cols) = self.rows_cols(*a);
                let dst = acc!(*a);
                for (i, &r) in arg.iter().enumerate() {
                    dst[r * cols + i % cols] += g[i];
                }
            }
            Op::GroupBroadcast(a, group) => {
                let (t, cols) = self.rows_cols(*a);
                let dst = acc!(*a);
                for gidx in 0..t {
                    for s in 0..*group {
                        let r = gidx * group + s;
                        add_into(&mut dst[gidx * cols..(gidx + 1) * cols], &g[r * cols..(r + 1) * cols]);
                    }
                }
            }
            Op::GroupSoftmax(a, group) => {
                let (n, cols) = self.rows_cols(*a);
                let y = &node.value;
                let dst = acc!(*a);
                for gidx in 0..n / group {
                    for c in 0..cols {
                        let idx = |s: usize| (gidx * group + s) * cols + c;
                        let dot: f64 = (0..*group).map(|s| y[idx(s)] * g[idx(s)]).sum();
                        for s in 0..*group {
                            dst[idx(s)] += y[idx(s)] * (g[idx(s)] - dot);
                        }
                    }
                }
            }
            Op::HeadSum(a, heads) => {
                let (n, cols) = self.rows_cols(*a);
                let block = cols / heads;
                let dst = acc!(*a);
                for (i, d) in dst.iter_mut().enumerate().take(n * cols) {
                    *d += g[(i / cols) * heads + (i % cols) / block];
                }
            }
            Op::HeadExpand(a, block) => {
                let (n, heads) = self.rows_cols(*a);
                let cols = heads * block;
                let dst = acc!(*a);
                for (i, gi) in g.iter().enumerate().take(n * cols) {
                    dst[(i / cols) * heads + (i % cols) / block] += gi;
                }
            }
            Op::SpatialMean(a) => {
                let s = self.shape(*a);
                let hw = s[2] * s[3];
                let dst = acc!(*a);
                for (i, d) in dst.iter_mut().enumerate() {
                    *d += g[i / hw] / hw as f64;
                }
            }
            Op::SpatialBroadcast(a) => {
                let hw = node.shape[2] * node.shape[3];
                let dst = acc!(*a);
                for (i, chunk) in g.chunks(hw).enumerate() {
                    dst[i] += chunk.iter().sum::<f64>();
                }
            }
            Op::SumAll(a) => {
                let g0 = g[0];
                acc!(*a).iter_mut().for_each(|d| *d += g0);
            }
            Op::Conv { x, w, b, geom } => self.conv_backward(node, g, *x, *w, *b, geom, grads),
            Op::ConvTranspose { x, w, b, geom } => self.conv_transpose_backward(node, g, *x, *w, *b, geom, grads),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                training,
            } => {
                let shape = &node.shape;
                let (n, c) = (shape[0], shape[1]);
                let hw = numel(&shape[2..]);
                let m = (n * hw) as f64;
                let gv = self.value(*gamma).to_vec();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut sum_dxhat = vec![0.0; c];
                let mut sum_dxhat_xhat = vec![0.0; c];
                for s in 0..n {
                    for ch in 0..c {
                        let off = (s * c + ch) * hw;
                        for i in off..off + hw {
                            dgamma[ch] += g[i] * xhat[i];
                            dbeta[ch] += g[i];
                            let dxh = g[i] * gv[ch];
                            sum_dxhat[ch] += dxh;
                            sum_dxhat_xhat[ch] += dxh * xhat[i];
                        }
                    }
                }
                let dx = acc!(*x);
                for s in 0..n {
                    for ch in 0..c {
                        let off = (s * c + ch) * hw;
                        for i in off..off + hw {
                            let dxh = g[i] * gv[ch];
                            dx[i] += if *training {
                                inv_std[ch] * (dxh - sum_dxhat[ch] / m - xhat[i] * sum_dxhat_xhat[ch] / m)
                            } else {
                                inv_std[ch] * dxh
                            };
                        }
                    }
                }
                add_into(acc!(*gamma), &dgamma);
                add_into(acc!(*beta), &dbeta);
            }
            Op::KlDiag {
                q_mean,
                q_log_var,
                p_mean,
                p_log_var,
            } => {
                let (_, cols) = self.rows_cols(*q_mean);
                let (qm, ql, pm, pl) = (
                    self.value(*q_mean),
                    self.value(*q_log_var),
                    self.value(*p_mean),
                    self.value(*p_log_var),
                );
                let len = qm.len();
                let (mut d_qm, mut d_ql, mut d_pm, mut d_pl) = (vec![0.0; len], vec![0.0; len], vec![0.0; len], vec![0.0; len]);
                for i in 0..len {
                    let gi = g[i / cols];
                    let ratio = (ql[i] - pl[i]).exp();
                    let diff = qm[i] - pm[i];
                    let inv_p = (-pl[i]).exp();
                    d_qm[i] = gi * diff * inv_p;
                    d_pm[i] = -gi * diff * inv_p;
                    d_ql[i] = gi * 0.5 * (ratio - 1.0);
                    d_pl[i] = gi * 0.5 * (1.0 - ratio - diff * diff * inv_p);
                }
                add_into(acc!(*q_mean), &d_qm);
                add_into(acc!(*q_log_var), &d_ql);
                add_into(acc!(*p_mean), &d_pm);
                add_into(acc!(*p_log_var), &d_pl);
            }
            Op::BernoulliLogProb { logits, target } => {
                let (_, cols) = self.rows_cols(*logits);
                let lv = self.value(*logits);
                let dst = acc!(*logits);
                for (i, d) in dst.iter_mut().enumerate() {
                    *d += g[i / cols] * (target[i] - sigmoid(lv[i]));
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_backward(&self, node: &Node, g: &[f64], x: Var, w: Var, b: Var, geom: &ConvGeom, grads: &mut [Option<Vec<f64>>]) {
        let n = node.shape[0];
        let co = node.shape[1];
        let p = geom.col_cols();
        let ckk = geom.col_rows();
        let in_sz = geom.channels * geom.height * geom.width;
        let xv = self.value(x);
        let wv = self.value(w);
        let mut dw = vec![0.0; co * ckk];
        let mut db = vec![0.0; co];
        let mut dx = vec![0.0; n * in_sz];
        let mut cols = vec![0.0; ckk * p];
        let mut dcols = vec![0.0; ckk * p];
        for s in 0..n {
            let gs = &g[s * co * p..(s + 1) * co * p];
            for (o, chunk) in gs.chunks(p).enumerate() {
                db[o] += chunk.iter().sum::<f64>();
            }
            let img = &xv[s * in_sz..(s + 1) * in_sz];
            let dimg = &mut dx[s * in_sz..(s + 1) * in_sz];
            if geom.is_pointwise() {
                gemm(co, p, ckk, gs, false, img, true, &mut dw, 1.0);
                gemm(ckk, co, p, wv, true, gs, false, dimg, 1.0);
            } else {
                im2col(img, geom, &mut cols);
                gemm(co, p, ckk, gs, false, &cols, true, &mut dw, 1.0);
                gemm(ckk, co, p, wv, true, gs, false, &mut dcols, 0.0);
                col2im(&dcols, geom, dimg);
            }
        }
        let len_of = |v: Var| self.nodes[v.0].value.len();
        add_into(grads[x.0].get_or_insert_with(|| vec![0.0; len_of(x)]), &dx);
        add_into(grads[w.0].get_or_insert_with(|| vec![0.0; len_of(w)]), &dw);
        add_into(grads[b.0].get_or_insert_with(|| vec![0.0; len_of(b)]), &db);
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_transpose_backward(&self, node: &Node, g: &[f64], x: Var, w: Var, b: Var, geom: &ConvGeom, grads: &mut [Option<Vec<f64>>]) {
        let xs = self.shape(x);
        let (n, ci) = (xs[0], xs[1]);
        let pin = xs[2] * xs[3];
        let co = node.shape[1];
        let out_sz = co * node.shape[2] * node.shape[3];
        let ckk = geom.col_rows();
        let xv = self.value(x);
        let wv = self.value(w);
        let mut dw = vec![0.0; ci * ckk];
        let mut db = vec![0.0; co];
        let mut dx = vec![0.0; n * ci * pin];
        let mut dcols = vec![0.0; ckk * pin];
        for s in 0..n {
            let gs = &g[s * out_sz..(s + 1) * out_sz];
            for (o, chunk) in gs.chunks(node.shape[2] * node.shape[3]).enumerate() {
                db[o] += chunk.iter().sum::<f64>();
            }
            im2col(gs, geom, &mut dcols);
            let img = &xv[s * ci * pin..(s + 1) * ci * pin];
            gemm(ci, ckk, pin, wv, false, &dcols, false, &mut dx[s * ci * pin..(s + 1) * ci * pin], 1.0);
            gemm(ci, pin, ckk, img, false, &dcols, true, &mut dw, 1.0);
        }
        let len_of = |v: Var| self.nodes[v.0].value.len();
        add_into(grads[x.0].get_or_insert_with(|| vec![0.0; len_of(x)]), &dx);
        add_into(grads[w.0].get_or_insert_with(|| vec![0.0; len_of(w)]), &dw);
        add_into(grads[b.0].get_or_insert_with(|| vec![0.0; len_of(b)]), &db);
    }
}

pub const BN_EPS: f64 = 1e-5;

fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> &'a mut Vec<f64> {
    let len = nodes[v.0].value.len();
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

/// Gradients produced by [`Tape::backward`]; nodes the root does not depend on
/// report `None`.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[cfg(test)]
mod tests;
