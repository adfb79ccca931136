//! Reverse-mode autodiff tape over `f64` ndarrays.
//!
//! A [`Graph`] is rebuilt for every forward pass. Values are computed eagerly
//! when an op node is pushed; [`Graph::backward`] walks the tape in reverse
//! and accumulates gradients for every node that needs them. All reductions
//! run in fixed order, so results are bit-reproducible across runs.

use ndarray::{ArrayD, Axis, Ix2, Ix3, Ix4, IxDyn};

use crate::error::{Error, Result};
use crate::kernels::{self, ConvSpec};
use crate::nn::{ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    Ln(NodeId),
    Clamp(NodeId, f64, f64),
    SoftmaxLast(NodeId),
    SumLast(NodeId),
    MeanAll(NodeId),
    Linear {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
    },
    Conv2d {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        spec: ConvSpec,
    },
    BilinearResize {
        input: NodeId,
    },
    ConcatChannels(Vec<NodeId>),
    TileSpatial {
        input: NodeId,
    },
    GlobalAvgPool(NodeId),
    BatchMatMul {
        a: NodeId,
        b: NodeId,
    },
    SwapLast2(NodeId),
    Reshape {
        input: NodeId,
    },
    BceWithLogits {
        logits: NodeId,
        targets: ArrayD<f64>,
    },
    MulScalar {
        scalar: NodeId,
        tensor: NodeId,
    },
}

struct Node {
    value: ArrayD<f64>,
    op: Op,
    needs_grad: bool,
}

/// Per-node gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&ArrayD<f64>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_nodes: Vec<(NodeId, ParamId)>,
}

fn scalar(v: f64) -> ArrayD<f64> {
    ArrayD::from_elem(IxDyn(&[]), v)
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

    fn push(&mut self, value: ArrayD<f64>, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Constant input; no gradient is propagated into it.
    pub fn input(&mut self, value: ArrayD<f64>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable leaf (used by parameters and gradient checks).
    pub fn var(&mut self, value: ArrayD<f64>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Differentiable leaf bound to a parameter in `store`.
    pub fn param(&mut self, store: &ParamStore, pid: ParamId) -> NodeId {
        let id = self.var(store.value(pid).clone());
        self.param_nodes.push((id, pid));
        id
    }

    pub fn value(&self, id: NodeId) -> &ArrayD<f64> {
        &self.nodes[id.0].value
    }

    /// Value of a 0-d node.
    pub fn scalar_value(&self, id: NodeId) -> f64 {
        let v = &self.nodes[id.0].value;
        debug_assert_eq!(v.len(), 1, "scalar_value on non-scalar node");
        *v.iter().next().unwrap()
    }

    pub fn check_finite(&self, id: NodeId, context: &str) -> Result<()> {
        if self.nodes[id.0].value.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::Numeric {
                context: context.to_string(),
                msg: "non-finite values".to_string(),
            })
        }
    }

    fn binary_same_shape(&mut self, a: NodeId, b: NodeId, name: &str) {
        assert_eq!(
            self.nodes[a.0].value.shape(),
            self.nodes[b.0].value.shape(),
            "{name}: shape mismatch"
        );
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary_same_shape(a, b, "add");
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary_same_shape(a, b, "sub");
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary_same_shape(a, b, "mul");
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.nodes[a.0].value.mapv(|x| x * c);
        let ng = self.needs(a);
        self.push(v, Op::Scale(a, c), ng)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.mapv(|x| x.max(0.0));
        let ng = self.needs(a);
        self.push(v, Op::Relu(a), ng)
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.mapv(f64::ln);
        let ng = self.needs(a);
        self.push(v, Op::Ln(a), ng)
    }

    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        let v = self.nodes[a.0].value.mapv(|x| x.clamp(lo, hi));
        let ng = self.needs(a);
        self.push(v, Op::Clamp(a, lo, hi), ng)
    }

    pub fn softmax_last(&mut self, a: NodeId) -> NodeId {
        let v = kernels::softmax_lastdim(&self.nodes[a.0].value);
        let ng = self.needs(a);
        self.push(v, Op::SoftmaxLast(a), ng)
    }

    /// Sum over the last axis.
    pub fn sum_last(&mut self, a: NodeId) -> NodeId {
        let x = &self.nodes[a.0].value;
        let last = x.ndim() - 1;
        let v = x.sum_axis(Axis(last));
        let ng = self.needs(a);
        self.push(v, Op::SumLast(a), ng)
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let x = &self.nodes[a.0].value;
        let v = scalar(x.sum() / x.len() as f64);
        let ng = self.needs(a);
        self.push(v, Op::MeanAll(a), ng)
    }

    /// `input` [B,F] x `weight` [F,K] + `bias` [K].
    pub fn linear(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> NodeId {
        let x = self.nodes[input.0]
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .expect("linear: input must be 2-d");
        let w = self.nodes[weight.0]
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .expect("linear: weight must be 2-d");
        let b = &self.nodes[bias.0].value;
        let mut y = x.dot(&w);
        for mut row in y.rows_mut() {
            for (v, bv) in row.iter_mut().zip(b.iter()) {
                *v += *bv;
            }
        }
        let ng = self.needs(input) || self.needs(weight) || self.needs(bias);
        self.push(y.into_dyn(), Op::Linear { input, weight, bias }, ng)
    }

    /// 2-d convolution over [B,C,H,W].
    pub fn conv2d(&mut self, input: NodeId, weight: NodeId, bias: NodeId, spec: ConvSpec) -> NodeId {
        let x = self.nodes[input.0]
            .value
            .view()
            .into_dimensionality::<Ix4>()
            .expect("conv2d: input must be 4-d");
        let w = self.nodes[weight.0]
            .value
            .view()
            .into_dimensionality::<Ix4>()
            .expect("conv2d: weight must be 4-d");
        let b = self.nodes[bias.0]
            .value
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .expect("conv2d: bias must be 1-d");
        let y = kernels::conv2d_forward(&x, &w, &b, spec);
        let ng = self.needs(input) || self.needs(weight) || self.needs(bias);
        self.push(
            y.into_dyn(),
            Op::Conv2d {
                input,
                weight,
                bias,
                spec,
            },
            ng,
        )
    }

    pub fn bilinear_resize(&mut self, input: NodeId, th: usize, tw: usize) -> NodeId {
        let x = self.nodes[input.0]
            .value
            .view()
            .into_dimensionality::<Ix4>()
            .expect("bilinear_resize: input must be 4-d");
        let y = kernels::bilinear_resize(&x, th, tw);
        let ng = self.needs(input);
        self.push(y.into_dyn(), Op::BilinearResize { input }, ng)
    }

    /// Concatenate [B,C_i,H,W] inputs along the channel axis.
    pub fn concat_channels(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts
            .iter()
            .map(|id| {
                self.nodes[id.0]
                    .value
                    .view()
                    .into_dimensionality::<Ix4>()
                    .expect("concat_channels: 4-d inputs")
            })
            .collect();
        let y = ndarray::concatenate(
            Axis(1),
            &views.iter().map(|v| v.view()).collect::<Vec<_>>(),
        )
        .expect("concat_channels: incompatible shapes")
        .as_standard_layout()
        .to_owned();
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(y.into_dyn(), Op::ConcatChannels(parts.to_vec()), ng)
    }

    /// Tile [B,K] over an (h, w) grid, producing [B,K,h,w].
    pub fn tile_spatial(&mut self, input: NodeId, h: usize, w: usize) -> NodeId {
        let x = self.nodes[input.0]
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .expect("tile_spatial: input must be 2-d");
        let (b, k) = x.dim();
        let mut y = ndarray::Array4::<f64>::zeros((b, k, h, w));
        for bi in 0..b {
            for ki in 0..k {
                y.index_axis_mut(Axis(0), bi)
                    .index_axis_mut(Axis(0), ki)
                    .fill(x[(bi, ki)]);
            }
        }
        let ng = self.needs(input);
        self.push(y.into_dyn(), Op::TileSpatial { input }, ng)
    }

    /// Spatial mean of [B,C,H,W], producing [B,C].
    pub fn global_avg_pool(&mut self, input: NodeId) -> NodeId {
        let x = self.nodes[input.0]
            .value
            .view()
            .into_dimensionality::<Ix4>()
            .expect("global_avg_pool: input must be 4-d");
        let (b, c, h, w) = x.dim();
        let mut y = ndarray::Array2::<f64>::zeros((b, c));
        for bi in 0..b {
            for ci in 0..c {
                y[(bi, ci)] = x.index_axis(Axis(0), bi).index_axis(Axis(0), ci).sum()
                    / (h * w) as f64;
            }
        }
        let ng = self.needs(input);
        self.push(y.into_dyn(), Op::GlobalAvgPool(input), ng)
    }

    /// Batched matmul [B,M,K] x [B,K,N] -> [B,M,N].
    pub fn batch_matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = self.nodes[a.0]
            .value
            .view()
            .into_dimensionality::<Ix3>()
            .expect("batch_matmul: 3-d lhs");
        let bv = self.nodes[b.0]
            .value
            .view()
            .into_dimensionality::<Ix3>()
            .expect("batch_matmul: 3-d rhs");
        let (nb, m, _k) = av.dim();
        let (nb2, _k2, n) = bv.dim();
        assert_eq!(nb, nb2, "batch_matmul: batch mismatch");
        let mut y = ndarray::Array3::<f64>::zeros((nb, m, n));
        for i in 0..nb {
            let prod = av.index_axis(Axis(0), i).dot(&bv.index_axis(Axis(0), i));
            y.index_axis_mut(Axis(0), i).assign(&prod);
        }
        let ng = self.needs(a) || self.needs(b);
        self.push(y.into_dyn(), Op::BatchMatMul { a, b }, ng)
    }

    /// Swap the last two axes of a 3-d array.
    pub fn swap_last2(&mut self, a: NodeId) -> NodeId {
        let x = self.nodes[a.0]
            .value
            .view()
            .into_dimensionality::<Ix3>()
            .expect("swap_last2: 3-d input");
        let y = x
            .permuted_axes([0, 2, 1])
            .as_standard_layout()
            .to_owned();
        let ng = self.needs(a);
        self.push(y.into_dyn(), Op::SwapLast2(a), ng)
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> NodeId {
        let v = self.nodes[a.0]
            .value
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: element count mismatch");
        let ng = self.needs(a);
        self.push(v, Op::Reshape { input: a }, ng)
    }

    /// Mean binary cross-entropy over logits against constant targets.
    pub fn bce_with_logits(&mut self, logits: NodeId, targets: ArrayD<f64>) -> NodeId {
        assert_eq!(
            self.nodes[logits.0].value.shape(),
            targets.shape(),
            "bce_with_logits: shape mismatch"
        );
        let v = kernels::bce_with_logits_mean(
            &self.nodes[logits.0].value.view(),
            &targets.view(),
        );
        let ng = self.needs(logits);
        self.push(scalar(v), Op::BceWithLogits { logits, targets }, ng)
    }

    /// Multiply a tensor by a 0-d scalar node.
    pub fn mul_scalar(&mut self, scalar_node: NodeId, tensor: NodeId) -> NodeId {
        let s = self.scalar_value(scalar_node);
        let v = self.nodes[tensor.0].value.mapv(|x| x * s);
        let ng = self.needs(scalar_node) || self.needs(tensor);
        self.push(
            v,
            Op::MulScalar {
                scalar: scalar_node,
                tensor,
            },
            ng,
        )
    }

    /// Backpropagate from a scalar loss node.
    pub fn backward(&self, loss: NodeId) -> Gradients {
        assert_eq!(
            self.nodes[loss.0].value.len(),
            1,
            "backward: loss must be scalar"
        );
        let mut grads: Vec<Option<ArrayD<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(ArrayD::from_elem(
            self.nodes[loss.0].value.raw_dim(),
            1.0,
        ));

        for idx in (0..self.nodes.len()).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            // Re-store: leaves keep their gradient for the caller.
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                op => {
                    self.backward_op(op, &g, &node.value, &mut grads);
                }
            }
        }
        Gradients { grads }
    }

    fn backward_op(
        &self,
        op: &Op,
        g: &ArrayD<f64>,
        out_value: &ArrayD<f64>,
        grads: &mut [Option<ArrayD<f64>>],
    ) {
        let accum = |grads: &mut [Option<ArrayD<f64>>], id: NodeId, delta: ArrayD<f64>| {
            match &mut grads[id.0] {
                Some(a) => *a += &delta,
                slot @ None => *slot = Some(delta),
            }
        };
        match op {
            Op::Leaf => unreachable!(),
            Op::Add(a, b) => {
                if self.needs(*a) {
                    accum(grads, *a, g.clone());
                }
                if self.needs(*b) {
                    accum(grads, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    accum(grads, *a, g.clone());
                }
                if self.needs(*b) {
                    accum(grads, *b, g.mapv(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    accum(grads, *a, g * &self.nodes[b.0].value);
                }
                if self.needs(*b) {
                    accum(grads, *b, g * &self.nodes[a.0].value);
                }
            }
            Op::Scale(a, c) => {
                if self.needs(*a) {
                    accum(grads, *a, g.mapv(|x| x * c));
                }
            }
            Op::Relu(a) => {
                if self.needs(*a) {
                    let x = &self.nodes[a.0].value;
                    let mut d = g.clone();
                    d.zip_mut_with(x, |dv, &xv| {
                        if xv <= 0.0 {
                            *dv = 0.0;
                        }
                    });
                    accum(grads, *a, d);
                }
            }
            Op::Ln(a) => {
                if self.needs(*a) {
                    let x = &self.nodes[a.0].value;
                    let mut d = g.clone();
                    d.zip_mut_with(x, |dv, &xv| *dv /= xv);
                    accum(grads, *a, d);
                }
            }
            Op::Clamp(a, lo, hi) => {
                if self.needs(*a) {
                    let x = &self.nodes[a.0].value;
                    let mut d = g.clone();
                    d.zip_mut_with(x, |dv, &xv| {
                        if xv < *lo || xv > *hi {
                            *dv = 0.0;
                        }
                    });
                    accum(grads, *a, d);
                }
            }
            Op::SoftmaxLast(a) => {
                if self.needs(*a) {
                    accum(grads, *a, kernels::softmax_lastdim_backward(out_value, g));
                }
            }
            Op::SumLast(a) => {
                if self.needs(*a) {
                    let xshape = self.nodes[a.0].value.raw_dim();
                    let k = *xshape.as_array_view().last().unwrap();
                    let mut d = ArrayD::<f64>::zeros(xshape.clone());
                    {
                        let ds = d.as_slice_mut().unwrap();
                        let gs = g.as_slice().expect("sum_last backward: layout");
                        for (chunk, &gv) in ds.chunks_mut(k).zip(gs.iter()) {
                            for v in chunk {
                                *v = gv;
                            }
                        }
                    }
                    accum(grads, *a, d);
                }
            }
            Op::MeanAll(a) => {
                if self.needs(*a) {
                    let xshape = self.nodes[a.0].value.raw_dim();
                    let n = self.nodes[a.0].value.len() as f64;
                    let gv = *g.iter().next().unwrap() / n;
                    accum(grads, *a, ArrayD::from_elem(xshape, gv));
                }
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let x = self.nodes[input.0]
                    .value
                    .view()
                    .into_dimensionality::<Ix2>()
                    .unwrap();
                let w = self.nodes[weight.0]
                    .value
                    .view()
                    .into_dimensionality::<Ix2>()
                    .unwrap();
                if self.needs(*input) {
                    accum(grads, *input, g2.dot(&w.t()).into_dyn());
                }
                if self.needs(*weight) {
                    accum(grads, *weight, x.t().dot(&g2).into_dyn());
                }
                if self.needs(*bias) {
                    accum(grads, *bias, g2.sum_axis(Axis(0)).into_dyn());
                }
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                spec,
            } => {
                let x = self.nodes[input.0]
                    .value
                    .view()
                    .into_dimensionality::<Ix4>()
                    .unwrap();
                let w = self.nodes[weight.0]
                    .value
                    .view()
                    .into_dimensionality::<Ix4>()
                    .unwrap();
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let need_dx = self.needs(*input);
                let (dx, dw, db) = kernels::conv2d_backward(&x, &w, *spec, &g4, need_dx);
                if let Some(dx) = dx {
                    accum(grads, *input, dx.into_dyn());
                }
                if self.needs(*weight) {
                    accum(grads, *weight, dw.into_dyn());
                }
                if self.needs(*bias) {
                    accum(grads, *bias, db.into_dyn());
                }
            }
            Op::BilinearResize { input } => {
                if self.needs(*input) {
                    let xdim = self.nodes[input.0].value.shape();
                    let (h, w) = (xdim[2], xdim[3]);
                    let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                    accum(
                        grads,
                        *input,
                        kernels::bilinear_resize_backward(&g4, h, w).into_dyn(),
                    );
                }
            }
            Op::ConcatChannels(parts) => {
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let mut offset = 0;
                for &p in parts {
                    let c = self.nodes[p.0].value.shape()[1];
                    if self.needs(p) {
                        let slice = g4
                            .slice(ndarray::s![.., offset..offset + c, .., ..])
                            .as_standard_layout()
                            .to_owned();
                        accum(grads, p, slice.into_dyn());
                    }
                    offset += c;
                }
            }
            Op::TileSpatial { input } => {
                if self.needs(*input) {
                    let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                    let summed = g4.sum_axis(Axis(3)).sum_axis(Axis(2));
                    accum(grads, *input, summed.into_dyn());
                }
            }
            Op::GlobalAvgPool(a) => {
                if self.needs(*a) {
                    let xdim = self.nodes[a.0].value.shape();
                    let (b, c, h, w) = (xdim[0], xdim[1], xdim[2], xdim[3]);
                    let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                    let mut d = ndarray::Array4::<f64>::zeros((b, c, h, w));
                    let inv = 1.0 / (h * w) as f64;
                    for bi in 0..b {
                        for ci in 0..c {
                            d.index_axis_mut(Axis(0), bi)
                                .index_axis_mut(Axis(0), ci)
                                .fill(g2[(bi, ci)] * inv);
                        }
                    }
                    accum(grads, *a, d.into_dyn());
                }
            }
            Op::BatchMatMul { a, b } => {
                let av = self.nodes[a.0]
                    .value
                    .view()
                    .into_dimensionality::<Ix3>()
                    .unwrap();
                let bv = self.nodes[b.0]
                    .value
                    .view()
                    .into_dimensionality::<Ix3>()
                    .unwrap();
                let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                let nb = av.dim().0;
                if self.needs(*a) {
                    let mut da = ndarray::Array3::<f64>::zeros(av.raw_dim());
                    for i in 0..nb {
                        let prod = g3
                            .index_axis(Axis(0), i)
                            .dot(&bv.index_axis(Axis(0), i).t());
                        da.index_axis_mut(Axis(0), i).assign(&prod);
                    }
                    accum(grads, *a, da.into_dyn());
                }
                if self.needs(*b) {
                    let mut db = ndarray::Array3::<f64>::zeros(bv.raw_dim());
                    for i in 0..nb {
                        let prod = av
                            .index_axis(Axis(0), i)
                            .t()
                            .dot(&g3.index_axis(Axis(0), i));
                        db.index_axis_mut(Axis(0), i).assign(&prod);
                    }
                    accum(grads, *b, db.into_dyn());
                }
            }
            Op::SwapLast2(a) => {
                if self.needs(*a) {
                    let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                    let d = g3
                        .permuted_axes([0, 2, 1])
                        .as_standard_layout()
                        .to_owned();
                    accum(grads, *a, d.into_dyn());
                }
            }
            Op::Reshape { input } => {
                if self.needs(*input) {
                    let xshape = self.nodes[input.0].value.raw_dim();
                    let d = g.clone().into_shape_with_order(xshape).unwrap();
                    accum(grads, *input, d);
                }
            }
            Op::BceWithLogits { logits, targets } => {
                if self.needs(*logits) {
                    let gv = *g.iter().next().unwrap();
                    let d = kernels::bce_with_logits_backward(
                        &self.nodes[logits.0].value,
                        targets,
                        gv,
                    );
                    accum(grads, *logits, d);
                }
            }
            Op::MulScalar { scalar: s, tensor } => {
                let sv = self.scalar_value(*s);
                if self.needs(*tensor) {
                    accum(grads, *tensor, g.mapv(|x| x * sv));
                }
                if self.needs(*s) {
                    let dot: f64 = g
                        .iter()
                        .zip(self.nodes[tensor.0].value.iter())
                        .map(|(a, b)| a * b)
                        .sum();
                    accum(grads, *s, scalar(dot));
                }
            }
        }
    }

    /// Gradients of all bound parameters, in binding order.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<(ParamId, ArrayD<f64>)> {
        self.param_nodes
            .iter()
            .filter_map(|&(nid, pid)| grads.get(nid).map(|g| (pid, g.clone())))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2, Array4};

    fn dyn2(v: ndarray::Array2<f64>) -> ArrayD<f64> {
        v.into_dyn()
    }

    /// Central finite difference of a scalar-valued graph function.
    pub(crate) fn numeric_grad(
        build: &dyn Fn(&mut Graph, &[NodeId]) -> NodeId,
        inputs: &[ArrayD<f64>],
        wrt: usize,
        h: f64,
    ) -> ArrayD<f64> {
        let mut out = ArrayD::zeros(inputs[wrt].raw_dim());
        let eval = |xs: &[ArrayD<f64>]| -> f64 {
            let mut g = Graph::new();
            let ids: Vec<NodeId> = xs.iter().map(|x| g.var(x.clone())).collect();
            let loss = build(&mut g, &ids);
            g.scalar_value(loss)
        };
        for idx in 0..inputs[wrt].len() {
            let mut plus = inputs.to_vec();
            let mut minus = inputs.to_vec();
            plus[wrt].as_slice_mut().unwrap()[idx] += h;
            minus[wrt].as_slice_mut().unwrap()[idx] -= h;
            out.as_slice_mut().unwrap()[idx] = (eval(&plus) - eval(&minus)) / (2.0 * h);
        }
        out
    }

    pub(crate) fn assert_grad_close(analytic: &ArrayD<f64>, numeric: &ArrayD<f64>, tol: f64) {
        for (a, n) in analytic.iter().zip(numeric.iter()) {
            let denom = n.abs().max(1e-6);
            let rel = (a - n).abs() / denom;
            assert!(
                rel < tol || (a - n).abs() < 1e-8,
                "gradient mismatch: analytic {a} vs numeric {n} (rel {rel})"
            );
        }
    }

    #[test]
    fn add_mul_backward() {
        let mut g = Graph::new();
        let a = g.var(dyn2(arr2(&[[1.0, 2.0], [3.0, 4.0]])));
        let b = g.var(dyn2(arr2(&[[5.0, 6.0], [7.0, 8.0]])));
        let prod = g.mul(a, b);
        let loss = g.mean_all(prod);
        let grads = g.backward(loss);
        let da = grads.get(a).unwrap();
        // d/da mean(a*b) = b/4
        assert!((da[[0, 0]] - 5.0 / 4.0).abs() < 1e-12);
        assert!((da[[1, 1]] - 8.0 / 4.0).abs() < 1e-12);
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let x = Array4::from_shape_fn((1, 2, 5, 5), |(_, c, i, j)| {
            ((c * 25 + i * 5 + j) as f64 * 0.37).sin()
        })
        .into_dyn();
        let w = Array4::from_shape_fn((3, 2, 3, 3), |(o, c, i, j)| {
            ((o * 18 + c * 9 + i * 3 + j) as f64 * 0.21).cos() * 0.3
        })
        .into_dyn();
        let b = arr1(&[0.1, -0.2, 0.05]).into_dyn();
        let spec = ConvSpec {
            stride: 2,
            padding: 1,
            dilation: 1,
        };
        let build = move |g: &mut Graph, ids: &[NodeId]| -> NodeId {
            let y = g.conv2d(ids[0], ids[1], ids[2], spec);
            let r = g.relu(y);
            g.mean_all(r)
        };
        let inputs = vec![x, w, b];
        let mut g = Graph::new();
        let ids: Vec<NodeId> = inputs.iter().map(|v| g.var(v.clone())).collect();
        let loss = build(&mut g, &ids);
        let grads = g.backward(loss);
        for wrt in 0..3 {
            let num = numeric_grad(&build, &inputs, wrt, 1e-5);
            assert_grad_close(grads.get(ids[wrt]).unwrap(), &num, 1e-4);
        }
    }

    #[test]
    fn softmax_entropy_chain_gradient() {
        let raw = arr2(&[[0.3, -0.7, 1.2, 0.0, 0.5, -0.1]]).into_dyn();
        let build = |g: &mut Graph, ids: &[NodeId]| -> NodeId {
            let p = g.softmax_last(ids[0]);
            let pc = g.clamp(p, 1e-8, 1.0);
            let lp = g.ln(pc);
            let t = g.mul(p, lp);
            let s = g.sum_last(t);
            let neg = g.scale(s, -1.0);
            g.mean_all(neg)
        };
        let inputs = vec![raw];
        let mut g = Graph::new();
        let ids: Vec<NodeId> = inputs.iter().map(|v| g.var(v.clone())).collect();
        let loss = build(&mut g, &ids);
        let grads = g.backward(loss);
        let num = numeric_grad(&build, &inputs, 0, 1e-6);
        assert_grad_close(grads.get(ids[0]).unwrap(), &num, 1e-4);
    }

    #[test]
    fn attention_style_ops_gradient() {
        // reshape -> bmm -> softmax -> bmm -> mean: the position-attention core.
        let x = Array4::from_shape_fn((1, 3, 2, 2), |(_, c, i, j)| {
            ((c * 4 + i * 2 + j) as f64 * 0.31).sin()
        })
        .into_dyn();
        let build = |g: &mut Graph, ids: &[NodeId]| -> NodeId {
            let flat = g.reshape(ids[0], &[1, 3, 4]);
            let t = g.swap_last2(flat);
            let e = g.batch_matmul(t, flat); // [1,4,4]
            let a = g.softmax_last(e);
            let at = g.swap_last2(a);
            let out = g.batch_matmul(flat, at);
            g.mean_all(out)
        };
        let inputs = vec![x];
        let mut g = Graph::new();
        let ids: Vec<NodeId> = inputs.iter().map(|v| g.var(v.clone())).collect();
        let loss = build(&mut g, &ids);
        let grads = g.backward(loss);
        let num = numeric_grad(&build, &inputs, 0, 1e-6);
        assert_grad_close(grads.get(ids[0]).unwrap(), &num, 1e-4);
    }

    #[test]
    fn resize_tile_pool_gradients() {
        let x = Array4::from_shape_fn((2, 2, 4, 4), |(b, c, i, j)| {
            ((b * 32 + c * 16 + i * 4 + j) as f64 * 0.17).cos()
        })
        .into_dyn();
        let v = arr2(&[[0.5, -0.3], [0.2, 0.9]]).into_dyn();
        let build = |g: &mut Graph, ids: &[NodeId]| -> NodeId {
            let up = g.bilinear_resize(ids[0], 6, 6);
            let pooled = g.global_avg_pool(up); // [2,2]
            let joined = g.add(pooled, ids[1]);
            let tiled = g.tile_spatial(joined, 3, 3);
            let both = g.concat_channels(&[tiled, tiled]);
            g.mean_all(both)
        };
        let inputs = vec![x, v];
        let mut g = Graph::new();
        let ids: Vec<NodeId> = inputs.iter().map(|q| g.var(q.clone())).collect();
        let loss = build(&mut g, &ids);
        let grads = g.backward(loss);
        for wrt in 0..2 {
            let num = numeric_grad(&build, &inputs, wrt, 1e-6);
            assert_grad_close(grads.get(ids[wrt]).unwrap(), &num, 1e-4);
        }
    }

    #[test]
    fn constant_inputs_get_no_gradient() {
        let mut g = Graph::new();
        let a = g.input(dyn2(arr2(&[[1.0, 2.0]])));
        let b = g.var(dyn2(arr2(&[[3.0, 4.0]])));
        let s = g.mul(a, b);
        let loss = g.mean_all(s);
        let grads = g.backward(loss);
        assert!(grads.get(a).is_none());
        assert!(grads.get(b).is_some());
    }
}
