//! Reverse-mode automatic differentiation over tensors.
//!
//! A [`Graph`] is a write-once tape: every operator appends a node holding its
//! op tag, input node ids and the eagerly computed forward value, so insertion
//! order is already a topological order. [`Graph::backward`] seeds a scalar
//! root with 1 and visits nodes exactly once in reverse insertion order,
//! accumulating vector-Jacobian products into per-node gradient slots.
//!
//! The operator set is intentionally small: the convolutional blocks the
//! models need (conv2d with kernels 1 and 3, 2x2 average pooling, nearest 2x
//! upsampling, ReLU, channel concat) plus the reductions the losses need
//! (masked mean / MSE, gather, pairwise smoothness, affine sums of scalars).

pub mod check;
pub(crate) mod ops;

use std::sync::Arc;

pub use ops::SimMatrix;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Mask, TensorBase};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

enum Payload<S: Scalar> {
    Leaf,
    Conv2d { kernel: usize },
    AvgPool2x2,
    UpsampleNearest2x,
    Relu,
    ConcatChannels,
    ConcatVec,
    SumAll,
    Gather { indices: Arc<Vec<usize>> },
    MaskedMean { mask: Arc<Mask> },
    MaskedMse { target: TensorBase<S>, mask: Arc<Mask> },
    SquareError { target: S },
    PairwiseSmoothness { sim: Arc<SimMatrix<S>> },
    AffineSum { coeffs: Vec<S> },
}

impl<S: Scalar> Payload<S> {
    fn name(&self) -> &'static str {
        match self {
            Payload::Leaf => "leaf",
            Payload::Conv2d { .. } => "conv2d",
            Payload::AvgPool2x2 => "avg_pool_2x2",
            Payload::UpsampleNearest2x => "upsample_nearest_2x",
            Payload::Relu => "relu",
            Payload::ConcatChannels => "concat_channels",
            Payload::ConcatVec => "concat_vec",
            Payload::SumAll => "sum_all",
            Payload::Gather { .. } => "gather",
            Payload::MaskedMean { .. } => "masked_mean",
            Payload::MaskedMse { .. } => "masked_mse",
            Payload::SquareError { .. } => "square_error",
            Payload::PairwiseSmoothness { .. } => "pairwise_smoothness",
            Payload::AffineSum { .. } => "affine_sum",
        }
    }
}

pub struct Graph<S: Scalar> {
    payloads: Vec<Payload<S>>,
    inputs: Vec<Vec<NodeId>>,
    values: Vec<TensorBase<S>>,
    grads: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self { payloads: Vec::new(), inputs: Vec::new(), values: Vec::new(), grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.payloads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.payloads.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &TensorBase<S> {
        &self.values[id.0]
    }

    /// Gradient slot of a node after a backward pass; `None` for nodes the
    /// root does not depend on.
    pub fn grad(&self, id: NodeId) -> Option<&[S]> {
        self.grads[id.0].as_deref()
    }

    /// Op tags in insertion order; used by structural tests ("no batch norm")
    /// and debugging.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.payloads.iter().map(|p| p.name()).collect()
    }

    fn push(&mut self, payload: Payload<S>, inputs: Vec<NodeId>, value: TensorBase<S>) -> NodeId {
        let id = NodeId(self.payloads.len());
        self.payloads.push(payload);
        self.inputs.push(inputs);
        self.values.push(value);
        self.grads.push(None);
        id
    }

    fn check_input(&self, op: &'static str, id: NodeId) -> Result<()> {
        if id.0 >= self.payloads.len() {
            return Err(Error::Shape { op, details: format!("input node {} out of range", id.0) });
        }
        Ok(())
    }

    // ---- leaves ----

    pub fn leaf(&mut self, value: TensorBase<S>) -> NodeId {
        self.push(Payload::Leaf, Vec::new(), value)
    }

    // ---- tensor operators ----

    /// Stride-1 same-padding convolution. `x` is `[ci, h, w]`, `weight` is
    /// `[co, ci, k, k]` with k in {1, 3}, `bias` is `[co]`.
    pub fn conv2d(&mut self, x: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        self.check_input("conv2d", x)?;
        self.check_input("conv2d", weight)?;
        self.check_input("conv2d", bias)?;
        let (ci, h, w) = self.values[x.0].as_chw()?;
        let ws = self.values[weight.0].shape().to_vec();
        let (co, k) = match ws.as_slice() {
            [co, wci, k1, k2] if *wci == ci && k1 == k2 => (*co, *k1),
            _ => {
                return Err(Error::Shape {
                    op: "conv2d",
                    details: format!("weight {:?} does not match input channels {}", ws, ci),
                })
            }
        };
        if k != 1 && k != 3 {
            return Err(Error::Shape { op: "conv2d", details: format!("kernel {} not in {{1, 3}}", k) });
        }
        if self.values[bias.0].len() != co {
            return Err(Error::Shape {
                op: "conv2d",
                details: format!("bias length {} != out channels {}", self.values[bias.0].len(), co),
            });
        }
        let out = ops::conv2d_forward(
            self.values[x.0].data(),
            ci,
            h,
            w,
            self.values[weight.0].data(),
            co,
            k,
            self.values[bias.0].data(),
        );
        let value = TensorBase::new(vec![co, h, w], out)?;
        Ok(self.push(Payload::Conv2d { kernel: k }, vec![x, weight, bias], value))
    }

    /// 2x2 average pooling; spatial dims must be even.
    pub fn avg_pool_2x2(&mut self, x: NodeId) -> Result<NodeId> {
        self.check_input("avg_pool_2x2", x)?;
        let (c, h, w) = self.values[x.0].as_chw()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Shape {
                op: "avg_pool_2x2",
                details: format!("spatial dims {}x{} are not even", h, w),
            });
        }
        let out = ops::avg_pool_2x2_forward(self.values[x.0].data(), c, h, w);
        let value = TensorBase::new(vec![c, h / 2, w / 2], out)?;
        Ok(self.push(Payload::AvgPool2x2, vec![x], value))
    }

    pub fn upsample_nearest_2x(&mut self, x: NodeId) -> Result<NodeId> {
        self.check_input("upsample_nearest_2x", x)?;
        let (c, h, w) = self.values[x.0].as_chw()?;
        let out = ops::upsample_nearest_2x_forward(self.values[x.0].data(), c, h, w);
        let value = TensorBase::new(vec![c, 2 * h, 2 * w], out)?;
        Ok(self.push(Payload::UpsampleNearest2x, vec![x], value))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.check_input("relu", x)?;
        let data: Vec<S> = self.values[x.0].iter().map(|v| v.max(S::zero())).collect();
        let value = TensorBase::new(self.values[x.0].shape().to_vec(), data)?;
        Ok(self.push(Payload::Relu, vec![x], value))
    }

    /// Concatenate two maps along the channel axis.
    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_input("concat_channels", a)?;
        self.check_input("concat_channels", b)?;
        let (ca, ha, wa) = self.values[a.0].as_chw()?;
        let (cb, hb, wb) = self.values[b.0].as_chw()?;
        if (ha, wa) != (hb, wb) {
            return Err(Error::Shape {
                op: "concat_channels",
                details: format!("spatial dims differ: {}x{} vs {}x{}", ha, wa, hb, wb),
            });
        }
        let mut data = Vec::with_capacity((ca + cb) * ha * wa);
        data.extend_from_slice(self.values[a.0].data());
        data.extend_from_slice(self.values[b.0].data());
        let value = TensorBase::new(vec![ca + cb, ha, wa], data)?;
        Ok(self.push(Payload::ConcatChannels, vec![a, b], value))
    }

    /// Concatenate nodes end to end into one flat vector, in input order.
    pub fn concat_vec(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Shape { op: "concat_vec", details: "no inputs".into() });
        }
        let mut data = Vec::new();
        for p in parts {
            self.check_input("concat_vec", *p)?;
            data.extend_from_slice(self.values[p.0].data());
        }
        let value = TensorBase::new(vec![data.len()], data)?;
        Ok(self.push(Payload::ConcatVec, parts.to_vec(), value))
    }

    // ---- reductions and loss plumbing ----

    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId> {
        self.check_input("sum_all", x)?;
        let mut acc = S::zero();
        for v in self.values[x.0].iter() {
            acc += *v;
        }
        Ok(self.push(Payload::SumAll, vec![x], TensorBase::scalar(acc)))
    }

    /// Select elements of `x` (flat indices) into a vector, preserving order.
    pub fn gather(&mut self, x: NodeId, indices: Arc<Vec<usize>>) -> Result<NodeId> {
        self.check_input("gather", x)?;
        let len = self.values[x.0].len();
        if let Some(bad) = indices.iter().find(|i| **i >= len) {
            return Err(Error::Shape {
                op: "gather",
                details: format!("index {} out of range for {} elements", bad, len),
            });
        }
        let data: Vec<S> = indices.iter().map(|i| self.values[x.0].data()[*i]).collect();
        let value = TensorBase::new(vec![data.len()], data)?;
        Ok(self.push(Payload::Gather { indices }, vec![x], value))
    }

    /// Mean of a single-channel map over the mask's set pixels.
    pub fn masked_mean(&mut self, x: NodeId, mask: Arc<Mask>) -> Result<NodeId> {
        self.check_input("masked_mean", x)?;
        let (c, h, w) = self.values[x.0].as_chw()?;
        if c != 1 || h * w != mask.len() {
            return Err(Error::Shape {
                op: "masked_mean",
                details: format!("map {:?} does not match {}x{} mask", self.values[x.0].shape(), mask.height(), mask.width()),
            });
        }
        if mask.count() == 0 {
            return Err(Error::EmptyMask { op: "masked_mean" });
        }
        let m = ops::masked_mean_forward(self.values[x.0].data(), &mask);
        Ok(self.push(Payload::MaskedMean { mask }, vec![x], TensorBase::scalar(m)))
    }

    /// Mean squared error against a constant target over masked pixels.
    pub fn masked_mse(&mut self, x: NodeId, target: TensorBase<S>, mask: Arc<Mask>) -> Result<NodeId> {
        self.check_input("masked_mse", x)?;
        if self.values[x.0].len() != target.len() || target.len() != mask.len() {
            return Err(Error::Shape {
                op: "masked_mse",
                details: format!(
                    "prediction {}, target {} and mask {} lengths differ",
                    self.values[x.0].len(),
                    target.len(),
                    mask.len()
                ),
            });
        }
        if mask.count() == 0 {
            return Err(Error::EmptyMask { op: "masked_mse" });
        }
        let v = ops::masked_mse_forward(self.values[x.0].data(), target.data(), &mask);
        Ok(self.push(Payload::MaskedMse { target, mask }, vec![x], TensorBase::scalar(v)))
    }

    /// `(target - x)^2` for a scalar node.
    pub fn square_error(&mut self, x: NodeId, target: S) -> Result<NodeId> {
        self.check_input("square_error", x)?;
        let xv = self.values[x.0].item()?;
        let d = target - xv;
        Ok(self.push(Payload::SquareError { target }, vec![x], TensorBase::scalar(d * d)))
    }

    /// Sample-normalized pairwise smoothness of a gathered prediction vector.
    pub fn pairwise_smoothness(&mut self, z: NodeId, sim: Arc<SimMatrix<S>>) -> Result<NodeId> {
        self.check_input("pairwise_smoothness", z)?;
        let n = self.values[z.0].len();
        if n != sim.n() {
            return Err(Error::Shape {
                op: "pairwise_smoothness",
                details: format!("{} samples vs similarity matrix for {}", n, sim.n()),
            });
        }
        let v = ops::pairwise_smoothness_forward(self.values[z.0].data(), &sim);
        Ok(self.push(Payload::PairwiseSmoothness { sim }, vec![z], TensorBase::scalar(v)))
    }

    /// Weighted sum of scalar nodes: `sum coeffs[i] * terms[i]`.
    pub fn affine_sum(&mut self, terms: &[NodeId], coeffs: &[S]) -> Result<NodeId> {
        if terms.len() != coeffs.len() {
            return Err(Error::Shape {
                op: "affine_sum",
                details: format!("{} terms vs {} coefficients", terms.len(), coeffs.len()),
            });
        }
        let mut acc = S::zero();
        for (t, c) in terms.iter().zip(coeffs) {
            self.check_input("affine_sum", *t)?;
            acc += *c * self.values[t.0].item()?;
        }
        Ok(self.push(Payload::AffineSum { coeffs: coeffs.to_vec() }, terms.to_vec(), TensorBase::scalar(acc)))
    }

    // ---- backward ----

    /// Reverse pass from a scalar root seeded with 1.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        self.check_input("backward", root)?;
        if !self.values[root.0].is_scalar_shape() {
            return Err(Error::NonScalarRoot(self.values[root.0].shape().to_vec()));
        }
        self.backward_seeded(root, &[S::one()])
    }

    /// Reverse pass from an arbitrary node with a caller-provided cotangent
    /// (`seed` must match the node's element count). Clears previous grads.
    pub fn backward_seeded(&mut self, node: NodeId, seed: &[S]) -> Result<()> {
        self.check_input("backward", node)?;
        if seed.len() != self.values[node.0].len() {
            return Err(Error::Shape {
                op: "backward",
                details: format!("seed length {} vs node length {}", seed.len(), self.values[node.0].len()),
            });
        }
        for g in &mut self.grads {
            *g = None;
        }
        self.grads[node.0] = Some(seed.to_vec());
        for i in (0..=node.0).rev() {
            let Some(gout) = self.grads[i].take() else { continue };
            self.propagate(i, &gout);
            self.grads[i] = Some(gout);
        }
        Ok(())
    }

    /// Push one node's output gradient onto its inputs. Inputs always have
    /// smaller indices than the node, so slot writes never alias `gout`.
    fn propagate(&mut self, i: usize, gout: &[S]) {
        let Self { payloads, inputs, values, grads } = self;
        let ins = &inputs[i];
        let mut add_to = |id: NodeId, f: &mut dyn FnMut(&mut Vec<S>)| {
            let slot = grads[id.0].get_or_insert_with(|| vec![S::zero(); values[id.0].len()]);
            f(slot);
        };
        match &payloads[i] {
            Payload::Leaf => {}
            Payload::Conv2d { kernel } => {
                let x = &values[ins[0].0];
                let wt = &values[ins[1].0];
                let (ci, h, w) = x.as_chw().expect("validated at construction");
                let co = wt.shape()[0];
                let (dx, dw, db) = ops::conv2d_backward(x.data(), ci, h, w, wt.data(), co, *kernel, gout);
                add_to(ins[0], &mut |s| add_assign(s, &dx));
                add_to(ins[1], &mut |s| add_assign(s, &dw));
                add_to(ins[2], &mut |s| add_assign(s, &db));
            }
            Payload::AvgPool2x2 => {
                let (c, h, w) = values[ins[0].0].as_chw().expect("validated");
                let dx = ops::avg_pool_2x2_backward(gout, c, h, w);
                add_to(ins[0], &mut |s| add_assign(s, &dx));
            }
            Payload::UpsampleNearest2x => {
                let (c, h, w) = values[ins[0].0].as_chw().expect("validated");
                let dx = ops::upsample_nearest_2x_backward(gout, c, h, w);
                add_to(ins[0], &mut |s| add_assign(s, &dx));
            }
            Payload::Relu => {
                let x = values[ins[0].0].data();
                add_to(ins[0], &mut |s| {
                    for (j, g) in gout.iter().enumerate() {
                        if x[j] > S::zero() {
                            s[j] += *g;
                        }
                    }
                });
            }
            Payload::ConcatChannels => {
                let la = values[ins[0].0].len();
                add_to(ins[0], &mut |s| add_assign(s, &gout[..la]));
                add_to(ins[1], &mut |s| add_assign(s, &gout[la..]));
            }
            Payload::ConcatVec => {
                let mut offset = 0;
                for p in ins {
                    let len = values[p.0].len();
                    add_to(*p, &mut |s| add_assign(s, &gout[offset..offset + len]));
                    offset += len;
                }
            }
            Payload::SumAll => {
                let g = gout[0];
                add_to(ins[0], &mut |s| {
                    for v in s.iter_mut() {
                        *v += g;
                    }
                });
            }
            Payload::Gather { indices } => {
                add_to(ins[0], &mut |s| {
                    for (j, idx) in indices.iter().enumerate() {
                        s[*idx] += gout[j];
                    }
                });
            }
            Payload::MaskedMean { mask } => {
                let g = gout[0] / S::from_f64c(mask.count() as f64);
                add_to(ins[0], &mut |s| {
                    for idx in mask.indices() {
                        s[idx] += g;
                    }
                });
            }
            Payload::MaskedMse { target, mask } => {
                let x = values[ins[0].0].data();
                let scale = S::from_f64c(2.0) * gout[0] / S::from_f64c(mask.count() as f64);
                add_to(ins[0], &mut |s| {
                    for idx in mask.indices() {
                        s[idx] += scale * (x[idx] - target.data()[idx]);
                    }
                });
            }
            Payload::SquareError { target } => {
                let x = values[ins[0].0].data()[0];
                let g = S::from_f64c(2.0) * (x - *target) * gout[0];
                add_to(ins[0], &mut |s| s[0] += g);
            }
            Payload::PairwiseSmoothness { sim } => {
                let z = values[ins[0].0].data();
                add_to(ins[0], &mut |s| ops::pairwise_smoothness_backward(z, sim, gout[0], s));
            }
            Payload::AffineSum { coeffs } => {
                for (t, c) in ins.iter().zip(coeffs.iter()) {
                    let g = *c * gout[0];
                    add_to(*t, &mut |s| s[0] += g);
                }
            }
        }
    }
}

fn add_assign<S: Scalar>(acc: &mut [S], rhs: &[S]) {
    debug_assert_eq!(acc.len(), rhs.len());
    for (a, r) in acc.iter_mut().zip(rhs) {
        *a += *r;
    }
}
