//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] is an append-only list of nodes; each op evaluates eagerly and
//! records its inputs plus whatever it needs for the backward rule. Because a
//! node can only reference earlier nodes the record is acyclic by
//! construction, and [`Graph::backward`] visits every node once, in reverse.

use crate::error::{Error, Result};
use crate::kernels::{self, ChannelDims, ConvDims, MatmulDims};
use crate::spiking::{self, LifParams};
use crate::tensor::{strides, Element, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    MatMul(Var, Var, MatmulDims),
    Conv2d {
        x: Var,
        w: Var,
        dims: ConvDims,
        rows: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Sum(Var),
    Mean(Var),
    MeanTrailing(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    Lif {
        drive: Var,
        steps: usize,
        params: LifParams,
        pre_reset: Vec<T>,
    },
    SuffixSum(Var),
    Threshold(Var),
    TimeMask(Var, Var),
    TimeAverage {
        x: Var,
        weights: Vec<T>,
        denom: T,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Reshape(_) => "reshape",
            Op::Permute(..) => "permute",
            Op::MatMul(..) => "matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::BatchNorm { .. } => "batchnorm",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::MeanTrailing(_) => "mean_trailing",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Lif { .. } => "lif",
            Op::SuffixSum(_) => "suffix_sum",
            Op::Threshold(_) => "threshold",
            Op::TimeMask(..) => "time_mask",
            Op::TimeAverage { .. } => "time_average",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    label: Option<String>,
}

/// Per-channel statistics observed by a train-mode batchnorm call.
#[derive(Clone, Debug)]
pub struct BatchNormStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    /// Number of values each channel's statistics were taken over.
    pub count: usize,
}

/// Where a batchnorm takes its normalization statistics from.
pub enum NormMode<'a, T> {
    /// Statistics of the current input (train mode).
    Batch { eps: T },
    /// Fixed running statistics (eval mode).
    Running { mean: &'a [T], var: &'a [T], eps: T },
}

pub struct Graph<T: Element = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            label: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable input.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
            label: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input that receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
            label: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Attaches a human-readable label used in numeric diagnostics.
    pub fn set_label(&mut self, v: Var, label: impl Into<String>) {
        self.nodes[v.0].label = Some(label.into());
    }

    /// First node (in recording order) holding a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<String> {
        self.nodes.iter().enumerate().find_map(|(i, n)| {
            n.value.data().iter().any(|x| !x.is_finite()).then(|| {
                format!(
                    "node #{i} ({}{})",
                    n.op.name(),
                    n.label
                        .as_ref()
                        .map(|l| format!(", {l}"))
                        .unwrap_or_default()
                )
            })
        })
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let v = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let v = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::Scale(a, s), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).reshape(shape)?;
        Ok(self.push(v, Op::Reshape(a), &[a]))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len()
            || perm
                .iter()
                .any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::Argument(format!(
                "{perm:?} is not a permutation of the {} axes of {shape:?}",
                shape.len()
            )));
        }
        let data = permute_data(self.value(a).data(), &shape, perm);
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let v = Tensor::new(out_shape, data)?;
        Ok(self.push(v, Op::Permute(a, perm.to_vec()), &[a]))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let r = self.value(a).rank();
        if r < 2 {
            return Err(Error::Argument("transpose needs rank >= 2".into()));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(a, &perm)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let dims = kernels::matmul_dims(self.shape(a), self.shape(b))?;
        let data = kernels::matmul_forward(self.value(a).data(), self.value(b).data(), &dims);
        let v = Tensor::new(dims.out_shape.clone(), data)?;
        Ok(self.push(v, Op::MatMul(a, b, dims), &[a, b]))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        let batch = self.shape(x).first().copied().unwrap_or(0);
        self.conv2d_rows(x, w, stride, padding, batch)
    }

    /// Convolution that only evaluates the first `rows` batch items and
    /// leaves the rest of the output at zero.
    pub fn conv2d_rows(
        &mut self,
        x: Var,
        w: Var,
        stride: usize,
        padding: usize,
        rows: usize,
    ) -> Result<Var> {
        let dims = kernels::conv_dims(self.shape(x), self.shape(w), stride, padding)?;
        let data = kernels::conv2d_forward(self.value(x).data(), self.value(w).data(), &dims, rows);
        let v = Tensor::new(vec![dims.batch, dims.cout, dims.oh, dims.ow], data)?;
        Ok(self.push(
            v,
            Op::Conv2d {
                x,
                w,
                dims,
                rows: rows.min(dims.batch),
            },
            &[x, w],
        ))
    }

    /// Channel-wise normalization over axis 1 with affine `gamma`/`beta`.
    /// In batch mode the observed statistics are returned so the caller can
    /// update its running averages.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: NormMode<'_, T>,
    ) -> Result<(Var, Option<BatchNormStats<T>>)> {
        let d = ChannelDims::of(self.shape(x))?;
        for p in [gamma, beta] {
            if self.shape(p) != [d.channels] {
                return Err(Error::Shape {
                    op: "batchnorm",
                    lhs: self.shape(x).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let xs = self.value(x).data();
        let (mean, var, eps, stats) = match mode {
            NormMode::Batch { eps } => {
                let s = kernels::channel_stats(xs, &d);
                let stats = BatchNormStats {
                    mean: s.mean.clone(),
                    var: s.var.clone(),
                    count: d.outer * d.inner,
                };
                (s.mean, s.var, eps, Some(stats))
            }
            NormMode::Running { mean, var, eps } => {
                if mean.len() != d.channels || var.len() != d.channels {
                    return Err(Error::Shape {
                        op: "batchnorm",
                        lhs: self.shape(x).to_vec(),
                        rhs: vec![mean.len(), var.len()],
                    });
                }
                (mean.to_vec(), var.to_vec(), eps, None)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (y, xhat) = kernels::normalize(
            xs,
            &d,
            &mean,
            &inv_std,
            self.value(gamma).data(),
            self.value(beta).data(),
        );
        let v = Tensor::new(self.shape(x).to_vec(), y)?;
        let batch_stats = stats.is_some();
        let out = self.push(
            v,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            &[x, gamma, beta],
        );
        Ok((out, stats))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = T::from_usize(self.value(a).numel()).unwrap();
        let s = self.value(a).sum() / n;
        self.push(Tensor::scalar(s), Op::Mean(a), &[a])
    }

    /// Mean over the last `k` axes.
    pub fn mean_trailing(&mut self, a: Var, k: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if k == 0 || k >= shape.len() {
            return Err(Error::Argument(format!(
                "cannot average the last {k} axes of {shape:?}"
            )));
        }
        let inner: usize = shape[shape.len() - k..].iter().product();
        let n = T::from_usize(inner).unwrap();
        let data = self
            .value(a)
            .data()
            .chunks(inner)
            .map(|c| c.iter().fold(T::zero(), |s, &x| s + x) / n)
            .collect();
        let v = Tensor::new(shape[..shape.len() - k].to_vec(), data)?;
        Ok(self.push(v, Op::MeanTrailing(a), &[a]))
    }

    /// Mean cross-entropy of `[batch, classes]` logits against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: shape,
                rhs: vec![labels.len()],
            });
        }
        let classes = shape[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Index(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        let mut probs = Vec::with_capacity(shape[0] * classes);
        let mut total = T::zero();
        for (row, &label) in self.value(logits).data().chunks(classes).zip(labels) {
            let mx = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
            let z = row.iter().fold(T::zero(), |s, &x| s + (x - mx).exp());
            let lz = z.ln();
            total = total + (lz - (row[label] - mx));
            probs.extend(row.iter().map(|&x| (x - mx).exp() / z));
        }
        let loss = total / T::from_usize(labels.len()).unwrap();
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// LIF layer over a drive stacked as `[steps, ...]`.
    pub fn lif(&mut self, drive: Var, params: LifParams) -> Result<Var> {
        let shape = self.shape(drive).to_vec();
        let steps = *shape
            .first()
            .ok_or_else(|| Error::Argument("LIF drive needs a time axis".into()))?;
        let out = spiking::lif_kernel(self.value(drive).data(), steps, &params);
        let v = Tensor::new(shape, out.spikes)?;
        Ok(self.push(
            v,
            Op::Lif {
                drive,
                steps,
                params,
                pre_reset: out.pre_reset,
            },
            &[drive],
        ))
    }

    /// Suffix sums of a vector: the score tensor of a parameter vector.
    pub fn suffix_sum(&mut self, tp: Var) -> Result<Var> {
        let scores = spiking::dtss_scores(self.value(tp).data())?;
        Ok(self.push(Tensor::from_vec(scores), Op::SuffixSum(tp), &[tp]))
    }

    /// Binary threshold at 1 with the straight-through window gradient.
    pub fn threshold(&mut self, ts: Var) -> Var {
        let m = spiking::dtss_mask(self.value(ts).data());
        let v = Tensor::new(self.shape(ts).to_vec(), m).unwrap();
        self.push(v, Op::Threshold(ts), &[ts])
    }

    /// Scales step `t` of a `[steps, ...]` tensor by `mask[t]`.
    pub fn time_mask(&mut self, y: Var, mask: Var) -> Result<Var> {
        let shape = self.shape(y).to_vec();
        if self.value(mask).rank() != 1 || shape.first() != Some(&self.value(mask).numel()) {
            return Err(Error::Argument(format!(
                "sequence of shape {shape:?} does not match mask of length {}",
                self.value(mask).numel()
            )));
        }
        let per = self.value(y).numel() / shape[0];
        let m = self.value(mask).data();
        let data = self
            .value(y)
            .data()
            .chunks(per)
            .zip(m)
            .flat_map(|(c, &s)| c.iter().map(move |&x| x * s))
            .collect();
        let v = Tensor::new(shape, data)?;
        Ok(self.push(v, Op::TimeMask(y, mask), &[y, mask]))
    }

    /// `Σ_t weights[t]·x[t] / denom` over the leading time axis. The weights
    /// are treated as constants.
    pub fn time_average(&mut self, x: Var, weights: &[T], denom: T) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 || shape[0] != weights.len() {
            return Err(Error::Argument(format!(
                "cannot average {shape:?} over {} time weights",
                weights.len()
            )));
        }
        let per = self.value(x).numel() / shape[0];
        let mut acc = vec![T::zero(); per];
        for (c, &w) in self.value(x).data().chunks(per).zip(weights) {
            for (a, &v) in acc.iter_mut().zip(c) {
                *a = *a + w * v;
            }
        }
        for a in acc.iter_mut() {
            *a = *a / denom;
        }
        let v = Tensor::new(shape[1..].to_vec(), acc)?;
        Ok(self.push(
            v,
            Op::TimeAverage {
                x,
                weights: weights.to_vec(),
                denom,
            },
            &[x],
        ))
    }

    /// Reverse pass from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Argument(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self
                .nodes
                .iter()
                .map(|n| n.value.shape().to_vec())
                .collect(),
        })
    }

    fn backward_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let mut acc = |v: Var, d: Vec<T>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(e) => {
                    for (a, b) in e.iter_mut().zip(d) {
                        *a = *a + b;
                    }
                }
                slot @ None => *slot = Some(d),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, g.iter().zip(vb).map(|(&g, &y)| g * y).collect());
                acc(*b, g.iter().zip(va).map(|(&g, &x)| g * x).collect());
            }
            Op::Scale(a, s) => acc(*a, g.iter().map(|&x| x * *s).collect()),
            Op::Reshape(a) => acc(*a, g.to_vec()),
            Op::Permute(a, perm) => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                acc(*a, permute_data(g, node.value.shape(), &inv));
            }
            Op::MatMul(a, b, dims) => {
                let (da, db) = kernels::matmul_backward(
                    self.value(*a).data(),
                    self.value(*b).data(),
                    g,
                    dims,
                    needs(*a),
                    needs(*b),
                );
                if let Some(d) = da {
                    acc(*a, d);
                }
                if let Some(d) = db {
                    acc(*b, d);
                }
            }
            Op::Conv2d { x, w, dims, rows } => {
                let (dx, dw) = kernels::conv2d_backward(
                    self.value(*x).data(),
                    self.value(*w).data(),
                    g,
                    dims,
                    *rows,
                    needs(*x),
                    needs(*w),
                );
                if let Some(d) = dx {
                    acc(*x, d);
                }
                if let Some(d) = dw {
                    acc(*w, d);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let d = ChannelDims::of(node.value.shape()).unwrap();
                let (dx, dg, db) = kernels::batchnorm_backward(
                    g,
                    xhat,
                    inv_std,
                    self.value(*gamma).data(),
                    &d,
                    *batch_stats,
                );
                acc(*x, dx);
                acc(*gamma, dg);
                acc(*beta, db);
            }
            Op::Sum(a) => acc(*a, vec![g[0]; self.value(*a).numel()]),
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                acc(*a, vec![g[0] / T::from_usize(n).unwrap(); n]);
            }
            Op::MeanTrailing(a) => {
                let inner = self.value(*a).numel() / node.value.numel();
                let n = T::from_usize(inner).unwrap();
                acc(
                    *a,
                    g.iter()
                        .flat_map(|&v| std::iter::repeat_n(v / n, inner))
                        .collect(),
                );
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let classes = probs.len() / labels.len();
                let scale = g[0] / T::from_usize(labels.len()).unwrap();
                let mut d: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (r, &l) in labels.iter().enumerate() {
                    d[r * classes + l] = d[r * classes + l] - scale;
                }
                acc(*logits, d);
            }
            Op::Lif {
                drive,
                steps,
                params,
                pre_reset,
            } => acc(
                *drive,
                spiking::lif_kernel_backward(g, pre_reset, *steps, params),
            ),
            Op::SuffixSum(tp) => acc(*tp, spiking::prefix_sums(g)),
            Op::Threshold(ts) => {
                let w = spiking::mask_surrogate_grad(self.value(*ts).data());
                acc(*ts, g.iter().zip(w).map(|(&g, w)| g * w).collect());
            }
            Op::TimeMask(y, mask) => {
                let m = self.value(*mask).data();
                let yv = self.value(*y).data();
                let per = yv.len() / m.len();
                if needs(*y) {
                    acc(
                        *y,
                        g.chunks(per)
                            .zip(m)
                            .flat_map(|(c, &s)| c.iter().map(move |&x| x * s))
                            .collect(),
                    );
                }
                if needs(*mask) {
                    acc(
                        *mask,
                        g.chunks(per)
                            .zip(yv.chunks(per))
                            .map(|(gc, yc)| {
                                gc.iter().zip(yc).fold(T::zero(), |s, (&a, &b)| s + a * b)
                            })
                            .collect(),
                    );
                }
            }
            Op::TimeAverage { x, weights, denom } => {
                let d = weights
                    .iter()
                    .flat_map(|&w| g.iter().map(move |&v| w * v / *denom))
                    .collect();
                acc(*x, d);
            }
        }
    }
}

fn permute_data<T: Copy>(data: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let in_str = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let out_str = strides(&out_shape);
    let mut out = Vec::with_capacity(data.len());
    for o in 0..data.len() {
        let mut src = 0;
        for (ax, &p) in perm.iter().enumerate() {
            let idx = (o / out_str[ax]) % out_shape[ax];
            src += idx * in_str[p];
        }
        out.push(data[src]);
    }
    out
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Element> Gradients<T> {
    /// Gradient of `v`, or `None` if no gradient reached it.
    pub fn get(&self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.shapes[v.0].clone(), g.clone()).unwrap())
    }

    /// Gradient of `v`, zero-filled when unreached.
    pub fn get_or_zeros(&self, v: Var) -> Tensor<T> {
        self.get(v)
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn matmul_values() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = g.constant(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[3.0, 4.0, 5.0, 6.0]);
        let a = g.constant(t(&[1, 2], &[1.0, 2.0]));
        let b = g.constant(t(&[2, 1], &[3.0, 4.0]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[11.0]);
        let bad = g.constant(t(&[3, 1], &[1.0; 3]));
        let err = g.matmul(a, bad).unwrap_err().to_string();
        assert!(err.contains("[1, 2]") && err.contains("[3, 1]"), "{err}");
    }

    #[test]
    fn conv_values() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let w = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let y = g.conv2d(x, w, 1, 0).unwrap();
        assert_eq!(g.value(y).data(), &[9.0]);
        let x = g.constant(t(&[1, 1, 2, 2], &[1.0, -2.0, 3.0, 4.0]));
        let w = g.constant(Tensor::zeros(&[2, 1, 1, 1]));
        let y = g.conv2d(x, w, 1, 0).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batchnorm_modes() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::full(&[4, 2, 3], 3.5));
        let one = g.constant(Tensor::full(&[2], 1.0));
        let zero = g.constant(Tensor::zeros(&[2]));
        let (y, stats) = g
            .batchnorm(x, one, zero, NormMode::Batch { eps: 1e-5 })
            .unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
        assert_eq!(stats.unwrap().count, 12);

        let x = g.constant(t(&[1, 2, 2], &[0.3, -1.0, 2.0, 5.0]));
        let (y, _) = g
            .batchnorm(
                x,
                one,
                zero,
                NormMode::Running {
                    mean: &[0.0, 0.0],
                    var: &[1.0, 1.0],
                    eps: 0.0,
                },
            )
            .unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());
    }

    #[test]
    fn cross_entropy_values() {
        let mut g = Graph::<f64>::new();
        let l = g.constant(Tensor::zeros(&[1, 10]));
        let ce = g.cross_entropy(l, &[3]).unwrap();
        assert!((g.value(ce).item() - 10f64.ln()).abs() < 1e-12);
        let l = g.constant(t(&[1, 2], &[1000.0, 0.0]));
        let ce = g.cross_entropy(l, &[0]).unwrap();
        assert!(g.value(ce).item().abs() < 1e-12);
        assert!(matches!(g.cross_entropy(l, &[2]), Err(Error::Index(_))));
    }

    #[test]
    fn unused_params_get_zero_and_each_node_once() {
        let mut g = Graph::<f64>::new();
        let a = g.param(t(&[2], &[1.0, 2.0]));
        let unused = g.param(t(&[2], &[5.0, 5.0]));
        let b = g.add(a, a).unwrap();
        let s = g.sum(b);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[2.0, 2.0]);
        assert!(grads.get(unused).is_none());
        assert_eq!(grads.get_or_zeros(unused).data(), &[0.0, 0.0]);
    }

    #[test]
    fn permute_round_trip() {
        let mut g = Graph::<f64>::new();
        let data: Vec<f64> = (0..24).map(f64::from).collect();
        let a = g.constant(t(&[2, 3, 4], &data));
        let p = g.permute(a, &[2, 0, 1]).unwrap();
        assert_eq!(g.shape(p), &[4, 2, 3]);
        assert_eq!(g.value(p).data()[1], 4.0);
        let q = g.permute(p, &[1, 2, 0]).unwrap();
        assert_eq!(g.value(q).data(), &data[..]);
        assert!(g.permute(a, &[0, 0, 1]).is_err());
    }

    #[test]
    fn mask_chain_gradient() {
        // TP -> TS -> TM, loss = sum(TM)
        let mut g = Graph::<f64>::new();
        let tp = g.param(t(&[4], &[0.01, 1.5, 0.01, 0.01]));
        let ts = g.suffix_sum(tp).unwrap();
        let tm = g.threshold(ts);
        assert_eq!(g.value(tm).data(), &[1.0, 1.0, 0.0, 0.0]);
        let s = g.sum(tm);
        let grads = g.backward(s).unwrap();
        // every score is inside the window, so TP[i] collects i + 1 ones
        assert_eq!(grads.get(tp).unwrap().data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn non_finite_diagnostic_names_node() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(t(&[2], &[1.0, f64::NAN]));
        g.set_label(a, "block0.q");
        let msg = g.first_non_finite().unwrap();
        assert!(msg.contains("block0.q"), "{msg}");
    }
}
