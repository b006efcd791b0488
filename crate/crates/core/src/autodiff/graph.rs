use crate::autodiff::kernels::{self, ConvGeom};
use crate::error::{Error, Result};
use crate::real::{gemm, Mat, Real};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d {
        x: Var,
        k: Var,
        geom: ConvGeom,
    },
    Relu(Var),
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    MeanPool(Var),
    LogSoftmax(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Sum(Var),
    Mean(Var),
    PairwiseSqDist(Var, Var),
    L2Normalize {
        x: Var,
        norms: Vec<T>,
    },
    Pick {
        x: Var,
        index: Vec<usize>,
    },
    MaskedLogSumExp {
        x: Var,
        include: Vec<bool>,
    },
    SegmentMean {
        x: Var,
        segment: Vec<usize>,
        counts: Vec<usize>,
    },
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Whether stochastic layers (dropout) are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Tape of operations recorded during a forward pass.
///
/// Nodes are appended in execution order, so the index order is a valid
/// topological order and backward is a single reverse sweep.
#[derive(Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    backward_done: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape<T: Real>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Constant copy of `v`'s current value; gradients stop here.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass, for leaves reached from the loss.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Clears gradients so that backward may run again.
    pub fn zero_grad(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    fn push(
        &mut self,
        name: &'static str,
        value: Tensor<T>,
        op: Op<T>,
        inputs: &[Var],
    ) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn zip_map(
        &self,
        a: Var,
        b: Var,
        op: &'static str,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(op, ta, tb)?;
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(ta.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_map(a, b, "add", |x, y| x + y)?;
        self.push("add", v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_map(a, b, "sub", |x, y| x - y)?;
        self.push("sub", v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_map(a, b, "mul", |x, y| x * y)?;
        self.push("mul", v, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        let v = self.value(a).map(|x| x * s);
        self.push("scale", v, Op::Scale(a, s), &[a])
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -T::one())
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Result<Var> {
        let v = self.value(a).map(|x| x + s);
        self.push("add_scalar", v, Op::AddScalar(a), &[a])
    }

    /// `[N, K] @ [K, M]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.value(a).dims2("matmul")?;
        let (k2, m) = self.value(b).dims2("matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("inner dims {k} vs {k2}")));
        }
        let mut out = vec![T::zero(); n * m];
        gemm(
            Mat::new(self.value(a).data(), n, k),
            Mat::new(self.value(b).data(), k, m),
            &mut out,
            false,
        );
        let v = Tensor::new(&[n, m], out)?;
        self.push("matmul", v, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.value(a).dims2("transpose")?;
        let src = self.value(a).data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let v = Tensor::new(&[c, r], out)?;
        self.push("transpose", v, Op::Transpose(a), &[a])
    }

    /// `x @ w^T + b` with `x: [B, Din]`, `w: [Dout, Din]`, `b: [Dout]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (batch, din) = self.value(x).dims2("linear")?;
        let (dout, din2) = self.value(w).dims2("linear")?;
        if din != din2 {
            return Err(Error::shape(
                "linear",
                format!("input has {din} features, weight expects {din2}"),
            ));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [dout] {
                return Err(Error::shape(
                    "linear",
                    format!("bias shape {:?}, expected [{dout}]", self.value(b).shape()),
                ));
            }
        }
        let mut out = vec![T::zero(); batch * dout];
        gemm(
            Mat::new(self.value(x).data(), batch, din),
            Mat::new(self.value(w).data(), dout, din).t(),
            &mut out,
            false,
        );
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in out.chunks_mut(dout) {
                for (o, &bv) in row.iter_mut().zip(bias) {
                    *o += bv;
                }
            }
        }
        let v = Tensor::new(&[batch, dout], out)?;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push("linear", v, Op::Linear { x, w, b }, &inputs)
    }

    /// Cross-correlation of `x: [B, Cin, H, W]` with `k: [Cout, Cin, kH, kW]`.
    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, padding: usize) -> Result<Var> {
        let (batch, cin, h, w) = self.value(x).dims4("conv2d")?;
        let (cout, kcin, kh, kw) = self.value(k).dims4("conv2d")?;
        if cin != kcin {
            return Err(Error::shape(
                "conv2d",
                format!("input has {cin} channels, kernel expects {kcin}"),
            ));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d", "stride must be positive"));
        }
        if kh > h + 2 * padding || kw > w + 2 * padding {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "kernel {kh}x{kw} larger than padded input {}x{}",
                    h + 2 * padding,
                    w + 2 * padding
                ),
            ));
        }
        let geom = ConvGeom {
            batch,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride,
            pad: padding,
            ho: (h + 2 * padding - kh) / stride + 1,
            wo: (w + 2 * padding - kw) / stride + 1,
        };
        let out = kernels::conv2d_forward(&geom, self.value(x).data(), self.value(k).data());
        let v = Tensor::new(&[batch, cout, geom.ho, geom.wo], out)?;
        self.push("conv2d", v, Op::Conv2d { x, k, geom }, &[x, k])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(|a| a.max(T::zero()));
        self.push("relu", v, Op::Relu(x), &[x])
    }

    /// Inverted dropout; the identity in eval mode or when `rate == 0`.
    pub fn dropout(&mut self, x: Var, rate: f64, mode: Mode, rng: &mut Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!(
                "dropout rate {rate} outside [0, 1)"
            )));
        }
        if mode == Mode::Eval || rate == 0.0 {
            return Ok(x);
        }
        let keep = T::lit(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..self.value(x).numel())
            .map(|_| if rng.bernoulli(rate) { T::zero() } else { keep })
            .collect();
        let src = self.value(x);
        let data = src.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let v = Tensor::new(src.shape(), data)?;
        self.push("dropout", v, Op::Dropout { x, mask }, &[x])
    }

    /// Group normalisation of `[B, C, ...]` with per-channel affine parameters.
    /// Statistics are computed per sample, so outputs never couple batch rows.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        if shape.len() < 2 {
            return Err(Error::shape(
                "group_norm",
                format!("expected [B, C, ...], got {shape:?}"),
            ));
        }
        let (batch, channels) = (shape[0], shape[1]);
        let spatial: usize = shape[2..].iter().product();
        if groups == 0 || channels % groups != 0 {
            return Err(Error::shape(
                "group_norm",
                format!("{channels} channels not divisible into {groups} groups"),
            ));
        }
        if self.value(gamma).shape() != [channels] || self.value(beta).shape() != [channels] {
            return Err(Error::shape(
                "group_norm",
                format!("affine parameters must be [{channels}]"),
            ));
        }
        let (y, xhat, inv_std) = kernels::group_norm_forward(
            self.value(x).data(),
            (batch, channels, spatial),
            groups,
            self.value(gamma).data(),
            self.value(beta).data(),
        );
        let v = Tensor::new(&shape, y)?;
        self.push(
            "group_norm",
            v,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        )
    }

    /// Global average over the spatial dims: `[B, C, H, W] -> [B, C]`.
    pub fn mean_pool(&mut self, x: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4("mean_pool")?;
        let inv = T::one() / T::lit((h * w) as f64);
        let data = self
            .value(x)
            .data()
            .chunks(h * w)
            .map(|plane| plane.iter().copied().sum::<T>() * inv)
            .collect();
        let v = Tensor::new(&[b, c], data)?;
        self.push("mean_pool", v, Op::MeanPool(x), &[x])
    }

    /// Log-softmax along the class axis of a `[B, C]` tensor.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let (b, c) = self.value(x).dims2("log_softmax")?;
        let out = kernels::log_softmax_rows(self.value(x).data(), c);
        let v = Tensor::new(&[b, c], out)?;
        self.push("log_softmax", v, Op::LogSoftmax(x), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(T::exp);
        self.push("exp", v, Op::Exp(x), &[x])
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(T::ln);
        self.push("log", v, Op::Log(x), &[x])
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(T::sqrt);
        self.push("sqrt", v, Op::Sqrt(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = t.data().iter().copied().sum::<T>() / T::lit(t.numel() as f64);
        self.push("mean", Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// `out[i, j] = sum_d (a[i, d] - b[j, d])^2`.
    pub fn pairwise_sq_euclidean(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, d) = self.value(a).dims2("pairwise_sq_euclidean")?;
        let (m, d2) = self.value(b).dims2("pairwise_sq_euclidean")?;
        if d != d2 {
            return Err(Error::shape(
                "pairwise_sq_euclidean",
                format!("feature dims {d} vs {d2}"),
            ));
        }
        let (ta, tb) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity(n * m);
        for i in 0..n {
            let ra = ta.row(i);
            for j in 0..m {
                let rb = tb.row(j);
                out.push(ra.iter().zip(rb).map(|(&x, &y)| (x - y) * (x - y)).sum());
            }
        }
        let v = Tensor::new(&[n, m], out)?;
        self.push(
            "pairwise_sq_euclidean",
            v,
            Op::PairwiseSqDist(a, b),
            &[a, b],
        )
    }

    /// Scales every row (last axis) to unit Euclidean norm.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let d = *t.shape().last().expect("tensor has at least one dim");
        let mut norms = Vec::with_capacity(t.numel() / d);
        let mut out = Vec::with_capacity(t.numel());
        for (r, row) in t.data().chunks(d).enumerate() {
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            if norm <= T::zero() || !norm.is_finite() {
                return Err(Error::degenerate(
                    "l2_normalize",
                    format!("row {r} has norm {norm}"),
                ));
            }
            norms.push(norm);
            out.extend(row.iter().map(|&v| v / norm));
        }
        let v = Tensor::new(t.shape(), out)?;
        self.push("l2_normalize", v, Op::L2Normalize { x, norms }, &[x])
    }

    /// `out[i] = x[i, index[i]]` for `x: [B, C]`.
    pub fn pick(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let (b, c) = self.value(x).dims2("pick")?;
        if index.len() != b {
            return Err(Error::shape(
                "pick",
                format!("{} indices for {b} rows", index.len()),
            ));
        }
        if let Some(&bad) = index.iter().find(|&&j| j >= c) {
            return Err(Error::shape(
                "pick",
                format!("index {bad} out of range for {c} columns"),
            ));
        }
        let src = self.value(x).data();
        let data = index
            .iter()
            .enumerate()
            .map(|(i, &j)| src[i * c + j])
            .collect();
        let v = Tensor::new(&[b], data)?;
        self.push(
            "pick",
            v,
            Op::Pick {
                x,
                index: index.to_vec(),
            },
            &[x],
        )
    }

    /// Row-wise log-sum-exp of `x: [B, C]` restricted to entries where
    /// `include[i * C + j]` holds.
    pub fn masked_logsumexp(&mut self, x: Var, include: &[bool]) -> Result<Var> {
        let (b, c) = self.value(x).dims2("masked_logsumexp")?;
        if include.len() != b * c {
            return Err(Error::shape("masked_logsumexp", "mask size mismatch"));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(b);
        for i in 0..b {
            let row = &src[i * c..(i + 1) * c];
            let mask = &include[i * c..(i + 1) * c];
            let max = row
                .iter()
                .zip(mask)
                .filter(|(_, &m)| m)
                .map(|(&v, _)| v)
                .fold(T::neg_infinity(), T::max);
            if max == T::neg_infinity() {
                return Err(Error::degenerate(
                    "masked_logsumexp",
                    format!("row {i} has no entries"),
                ));
            }
            let s: T = row
                .iter()
                .zip(mask)
                .filter(|(_, &m)| m)
                .map(|(&v, _)| (v - max).exp())
                .sum();
            out.push(s.ln() + max);
        }
        let v = Tensor::new(&[b], out)?;
        self.push(
            "masked_logsumexp",
            v,
            Op::MaskedLogSumExp {
                x,
                include: include.to_vec(),
            },
            &[x],
        )
    }

    /// Mean of the rows of `x: [N, D]` grouped by `segment[i] in 0..n_segments`.
    pub fn segment_mean(&mut self, x: Var, segment: &[usize], n_segments: usize) -> Result<Var> {
        let (n, d) = self.value(x).dims2("segment_mean")?;
        if segment.len() != n {
            return Err(Error::shape(
                "segment_mean",
                format!("{} labels for {n} rows", segment.len()),
            ));
        }
        let mut counts = vec![0usize; n_segments];
        for &s in segment {
            if s >= n_segments {
                return Err(Error::shape(
                    "segment_mean",
                    format!("segment {s} >= {n_segments}"),
                ));
            }
            counts[s] += 1;
        }
        if let Some(empty) = counts.iter().position(|&c| c == 0) {
            return Err(Error::degenerate(
                "segment_mean",
                format!("segment {empty} has no rows"),
            ));
        }
        let src = self.value(x);
        let mut sums = vec![T::zero(); n_segments * d];
        for (i, &s) in segment.iter().enumerate() {
            for (acc, &v) in sums[s * d..(s + 1) * d].iter_mut().zip(src.row(i)) {
                *acc += v;
            }
        }
        for (s, &cnt) in counts.iter().enumerate() {
            if cnt > 1 {
                let c = T::lit(cnt as f64);
                sums[s * d..(s + 1) * d].iter_mut().for_each(|v| *v /= c);
            }
        }
        let v = Tensor::new(&[n_segments, d], sums)?;
        self.push(
            "segment_mean",
            v,
            Op::SegmentMean {
                x,
                segment: segment.to_vec(),
                counts,
            },
            &[x],
        )
    }

    /// Gathers rows (along axis 0) in the given order.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let n = t.shape()[0];
        if rows.is_empty() {
            return Err(Error::shape("select_rows", "no rows selected"));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::shape(
                "select_rows",
                format!("row {bad} out of range for {n}"),
            ));
        }
        let mut data = Vec::with_capacity(rows.len() * t.numel() / n);
        for &r in rows {
            data.extend_from_slice(t.row(r));
        }
        let mut shape = t.shape().to_vec();
        shape[0] = rows.len();
        let v = Tensor::new(&shape, data)?;
        self.push(
            "select_rows",
            v,
            Op::SelectRows {
                x,
                rows: rows.to_vec(),
            },
            &[x],
        )
    }

    /// Reverse sweep from a scalar `loss`, populating gradients of every
    /// reachable node that requires them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Backward(
                "backward already ran on this graph; call zero_grad first".into(),
            ));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Backward(format!(
                "loss must be a scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));
        }
        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(gy);
                continue;
            }
            self.backprop_node(i, &gy, &mut grads)?;
        }
        self.grads = grads;
        self.backward_done = true;
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(
        &self,
        i: usize,
        gy: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let node = &self.nodes[i];
        let out = &node.value;
        let g = gy.data();
        let like =
            |t: &Tensor<T>, data: Vec<T>| Tensor::new(t.shape(), data).expect("gradient shape");
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gy.clone());
                self.accumulate(grads, *b, gy.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, gy.clone());
                if self.needs(*b) {
                    self.accumulate(grads, *b, gy.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let d = g.iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
                    self.accumulate(grads, *a, like(va, d));
                }
                if self.needs(*b) {
                    let d = g.iter().zip(va.data()).map(|(&x, &y)| x * y).collect();
                    self.accumulate(grads, *b, like(vb, d));
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.accumulate(grads, *a, gy.map(|v| v * s));
            }
            Op::AddScalar(a) => self.accumulate(grads, *a, gy.clone()),
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (n, k) = va.dims2("matmul")?;
                let m = vb.shape()[1];
                if self.needs(*a) {
                    let mut d = vec![T::zero(); n * k];
                    gemm(
                        Mat::new(g, n, m),
                        Mat::new(vb.data(), k, m).t(),
                        &mut d,
                        false,
                    );
                    self.accumulate(grads, *a, like(va, d));
                }
                if self.needs(*b) {
                    let mut d = vec![T::zero(); k * m];
                    gemm(
                        Mat::new(va.data(), n, k).t(),
                        Mat::new(g, n, m),
                        &mut d,
                        false,
                    );
                    self.accumulate(grads, *b, like(vb, d));
                }
            }
            Op::Transpose(a) => {
                let (r, c) = self.value(*a).dims2("transpose")?;
                let mut d = vec![T::zero(); r * c];
                for i in 0..r {
                    for j in 0..c {
                        d[i * c + j] = g[j * r + i];
                    }
                }
                self.accumulate(grads, *a, like(self.value(*a), d));
            }
            Op::Linear { x, w, b } => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                let (batch, din) = vx.dims2("linear")?;
                let dout = vw.shape()[0];
                if self.needs(*x) {
                    let mut d = vec![T::zero(); batch * din];
                    gemm(
                        Mat::new(g, batch, dout),
                        Mat::new(vw.data(), dout, din),
                        &mut d,
                        false,
                    );
                    self.accumulate(grads, *x, like(vx, d));
                }
                if self.needs(*w) {
                    let mut d = vec![T::zero(); dout * din];
                    gemm(
                        Mat::new(g, batch, dout).t(),
                        Mat::new(vx.data(), batch, din),
                        &mut d,
                        false,
                    );
                    self.accumulate(grads, *w, like(vw, d));
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        let mut d = vec![T::zero(); dout];
                        for row in g.chunks(dout) {
                            for (acc, &v) in d.iter_mut().zip(row) {
                                *acc += v;
                            }
                        }
                        self.accumulate(grads, *b, like(self.value(*b), d));
                    }
                }
            }
            Op::Conv2d { x, k, geom } => {
                let (vx, vk) = (self.value(*x), self.value(*k));
                let (gx, gk) = kernels::conv2d_backward(
                    geom,
                    vx.data(),
                    vk.data(),
                    g,
                    self.needs(*x),
                    self.needs(*k),
                );
                if let Some(gx) = gx {
                    self.accumulate(grads, *x, like(vx, gx));
                }
                if let Some(gk) = gk {
                    self.accumulate(grads, *k, like(vk, gk));
                }
            }
            Op::Relu(x) => {
                let vx = self.value(*x);
                let d = g
                    .iter()
                    .zip(vx.data())
                    .map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() })
                    .collect();
                self.accumulate(grads, *x, like(vx, d));
            }
            Op::Dropout { x, mask } => {
                let d = g.iter().zip(mask).map(|(&gv, &m)| gv * m).collect();
                self.accumulate(grads, *x, like(self.value(*x), d));
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                inv_std,
            } => {
                let shape = out.shape();
                let dims = (shape[0], shape[1], shape[2..].iter().product());
                let vg = self.value(*gamma);
                let (gx, ggamma, gbeta) =
                    kernels::group_norm_backward(g, xhat, inv_std, dims, *groups, vg.data());
                self.accumulate(grads, *x, like(self.value(*x), gx));
                self.accumulate(grads, *gamma, like(vg, ggamma));
                self.accumulate(grads, *beta, like(self.value(*beta), gbeta));
            }
            Op::MeanPool(x) => {
                let vx = self.value(*x);
                let (_, _, h, w) = vx.dims4("mean_pool")?;
                let inv = T::one() / T::lit((h * w) as f64);
                let mut d = Vec::with_capacity(vx.numel());
                for &gv in g {
                    d.extend(std::iter::repeat_n(gv * inv, h * w));
                }
                self.accumulate(grads, *x, like(vx, d));
            }
            Op::LogSoftmax(x) => {
                let c = out.shape()[1];
                let mut d = vec![T::zero(); out.numel()];
                for ((grow, yrow), drow) in
                    g.chunks(c).zip(out.data().chunks(c)).zip(d.chunks_mut(c))
                {
                    let total: T = grow.iter().copied().sum();
                    for ((dv, &gv), &yv) in drow.iter_mut().zip(grow).zip(yrow) {
                        *dv = gv - yv.exp() * total;
                    }
                }
                self.accumulate(grads, *x, like(out, d));
            }
            Op::Exp(x) => {
                let d = g.iter().zip(out.data()).map(|(&gv, &y)| gv * y).collect();
                self.accumulate(grads, *x, like(out, d));
            }
            Op::Log(x) => {
                let vx = self.value(*x);
                let d = g.iter().zip(vx.data()).map(|(&gv, &xv)| gv / xv).collect();
                self.accumulate(grads, *x, like(vx, d));
            }
            Op::Sqrt(x) => {
                // Subgradient 0 at the origin.
                let two = T::lit(2.0);
                let d = g
                    .iter()
                    .zip(out.data())
                    .map(|(&gv, &y)| {
                        if y > T::zero() {
                            gv / (two * y)
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                self.accumulate(grads, *x, like(out, d));
            }
            Op::Sum(x) => {
                let vx = self.value(*x);
                self.accumulate(grads, *x, Tensor::full(vx.shape(), g[0]));
            }
            Op::Mean(x) => {
                let vx = self.value(*x);
                let v = g[0] / T::lit(vx.numel() as f64);
                self.accumulate(grads, *x, Tensor::full(vx.shape(), v));
            }
            Op::PairwiseSqDist(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (n, d) = va.dims2("pairwise_sq_euclidean")?;
                let m = vb.shape()[0];
                let two = T::lit(2.0);
                let mut ga = vec![T::zero(); n * d];
                let mut gb = vec![T::zero(); m * d];
                for i in 0..n {
                    let ra = va.row(i);
                    for j in 0..m {
                        let rb = vb.row(j);
                        let c = two * g[i * m + j];
                        for k in 0..d {
                            let diff = c * (ra[k] - rb[k]);
                            ga[i * d + k] += diff;
                            gb[j * d + k] -= diff;
                        }
                    }
                }
                if self.needs(*a) {
                    self.accumulate(grads, *a, like(va, ga));
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, like(vb, gb));
                }
            }
            Op::L2Normalize { x, norms } => {
                let d = *out.shape().last().expect("non-empty shape");
                let mut gx = Vec::with_capacity(out.numel());
                for ((grow, yrow), &norm) in g.chunks(d).zip(out.data().chunks(d)).zip(norms) {
                    let dot: T = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                    gx.extend(
                        grow.iter()
                            .zip(yrow)
                            .map(|(&gv, &yv)| (gv - yv * dot) / norm),
                    );
                }
                self.accumulate(grads, *x, like(out, gx));
            }
            Op::Pick { x, index } => {
                let vx = self.value(*x);
                let c = vx.shape()[1];
                let mut d = vec![T::zero(); vx.numel()];
                for (r, &j) in index.iter().enumerate() {
                    d[r * c + j] = g[r];
                }
                self.accumulate(grads, *x, like(vx, d));
            }
            Op::MaskedLogSumExp { x, include } => {
                let vx = self.value(*x);
                let c = vx.shape()[1];
                let mut d = vec![T::zero(); vx.numel()];
                for (r, &lse) in out.data().iter().enumerate() {
                    for j in 0..c {
                        let idx = r * c + j;
                        if include[idx] {
                            d[idx] = g[r] * (vx.data()[idx] - lse).exp();
                        }
                    }
                }
                self.accumulate(grads, *x, like(vx, d));
            }
            Op::SegmentMean { x, segment, counts } => {
                let vx = self.value(*x);
                let d = vx.shape()[1];
                let mut gx = Vec::with_capacity(vx.numel());
                for &s in segment {
                    let c = T::lit(counts[s] as f64);
                    gx.extend(g[s * d..(s + 1) * d].iter().map(|&v| v / c));
                }
                self.accumulate(grads, *x, like(vx, gx));
            }
            Op::SelectRows { x, rows } => {
                let vx = self.value(*x);
                let w = vx.numel() / vx.shape()[0];
                let mut d = vec![T::zero(); vx.numel()];
                for (k, &r) in rows.iter().enumerate() {
                    for (acc, &v) in d[r * w..(r + 1) * w].iter_mut().zip(&g[k * w..(k + 1) * w]) {
                        *acc += v;
                    }
                }
                self.accumulate(grads, *x, like(vx, d));
            }
        }
        Ok(())
    }
}
