//! Reverse-mode differentiation over `H x W x C` grids.
//!
//! A [`Tape`] records the forward pass as a flat list of nodes; [`Tape::backward`]
//! walks it in reverse and accumulates gradients for every named parameter it
//! touched. Parameters live outside the tape in a [`ParamSet`] and are
//! referenced by name, so weight sharing (tied branch kernels, the recurrent
//! block reused at every loop) falls out of plain gradient accumulation.
//!
//! Everything is `f64` on the CPU and single-threaded, which keeps training
//! bitwise reproducible and lets analytic gradients be checked against central
//! finite differences at tight tolerances.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Array3, ArrayD, Axis, Ix1, Ix4};

use crate::error::{Error, Result};
use crate::quantizer::QuantizedDepth;
use crate::types::{DepthMap, LabelMap, IGNORE_LABEL};

pub type Arr3 = Array3<f64>;

const NORM_EPS: f64 = 1e-5;

/// Named parameter arrays plus non-trainable buffers (frozen normalization
/// statistics). Maps are ordered by name, so serialization and optimizer
/// passes are deterministic.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamSet {
    trainable: BTreeMap<String, ArrayD<f64>>,
    buffers: BTreeMap<String, ArrayD<f64>>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: ArrayD<f64>) {
        let name = name.into();
        assert!(
            self.trainable.insert(name.clone(), value).is_none(),
            "duplicate parameter {name}"
        );
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, value: ArrayD<f64>) {
        let name = name.into();
        assert!(
            self.buffers.insert(name.clone(), value).is_none(),
            "duplicate buffer {name}"
        );
    }

    pub fn get(&self, name: &str) -> &ArrayD<f64> {
        self.trainable
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut ArrayD<f64> {
        self.trainable
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get_buffer(&self, name: &str) -> &ArrayD<f64> {
        self.buffers
            .get(name)
            .unwrap_or_else(|| panic!("unknown buffer {name}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<f64>)> {
        self.trainable.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut ArrayD<f64>)> {
        self.trainable.iter_mut()
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&String, &ArrayD<f64>)> {
        self.buffers.iter()
    }

    pub fn names(&self) -> Vec<String> {
        self.trainable.keys().cloned().collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.trainable.values().map(|a| a.len()).sum()
    }
}

/// Gradients keyed by parameter name.
pub type GradStore = BTreeMap<String, ArrayD<f64>>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op {
    Leaf,
    Conv {
        x: NodeId,
        weight: String,
        bias: Option<String>,
        stride: usize,
        dilation: usize,
    },
    FrozenNorm {
        x: NodeId,
        scale: String,
        shift: String,
        mean: Array1<f64>,
        inv_std: Array1<f64>,
    },
    Relu {
        x: NodeId,
    },
    Softmax {
        x: NodeId,
    },
    Concat {
        a: NodeId,
        b: NodeId,
    },
    GateCombine {
        branches: Vec<NodeId>,
        gate: NodeId,
    },
    Upsample {
        x: NodeId,
        factor: usize,
    },
    SegCrossEntropy {
        logits: NodeId,
        labels: Array2<u8>,
        count: usize,
    },
    DepthRegLoss {
        pred: NodeId,
        target_log: Array2<f64>,
        mask: Array2<bool>,
        count: usize,
    },
    DepthClsLoss {
        logits: NodeId,
        bins: Array2<u8>,
        mask: Array2<bool>,
        count: usize,
    },
    WeightedSum {
        terms: Vec<(f64, NodeId)>,
    },
}

struct Node {
    value: Arr3,
    op: Op,
}

/// Records a forward pass for later reverse traversal.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn scalar(v: f64) -> Arr3 {
    Array3::from_elem((1, 1, 1), v)
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, value: Arr3, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    /// Inserts external data; gradients flowing into a leaf are recorded but
    /// go nowhere.
    pub fn leaf(&mut self, value: Arr3) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, id: NodeId) -> &Arr3 {
        &self.nodes[id.0].value
    }

    pub fn scalar_value(&self, id: NodeId) -> f64 {
        let v = &self.nodes[id.0].value;
        debug_assert_eq!(v.len(), 1, "node is not a scalar");
        v[[0, 0, 0]]
    }

    /// 2-D convolution with zero padding chosen to preserve the grid at
    /// stride 1 (`pad = dilation * (k-1) / 2`); odd kernels only.
    pub fn conv2d(
        &mut self,
        params: &ParamSet,
        x: NodeId,
        weight: &str,
        bias: Option<&str>,
        stride: usize,
        dilation: usize,
    ) -> Result<NodeId> {
        let w = params.get(weight);
        let w4 = w
            .view()
            .into_dimensionality::<Ix4>()
            .map_err(|_| Error::Shape(format!("{weight}: conv weight must be 4-d")))?;
        let (kh, kw, cin, _cout) = w4.dim();
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::Shape(format!("{weight}: kernel must be odd")));
        }
        let xv = self.value(x);
        if xv.dim().2 != cin {
            return Err(Error::Shape(format!(
                "conv {weight}: input has {} channels, kernel expects {cin}",
                xv.dim().2
            )));
        }
        let b = bias.map(|name| {
            params
                .get(name)
                .view()
                .into_dimensionality::<Ix1>()
                .expect("bias must be 1-d")
                .to_owned()
        });
        let value = conv_forward(xv, &w4.to_owned(), b.as_ref(), stride, dilation);
        Ok(self.push(
            value,
            Op::Conv {
                x,
                weight: weight.to_string(),
                bias: bias.map(str::to_string),
                stride,
                dilation,
            },
        ))
    }

    /// Per-channel affine normalization with frozen statistics:
    /// `y = (x - mean) / sqrt(var + eps) * scale + shift`. Mean and variance
    /// come from buffers `<prefix>.mean` / `<prefix>.var` and are never
    /// updated; scale and shift are trainable.
    pub fn frozen_norm(&mut self, params: &ParamSet, x: NodeId, prefix: &str) -> Result<NodeId> {
        let scale = format!("{prefix}.scale");
        let shift = format!("{prefix}.shift");
        let mean = params
            .get_buffer(&format!("{prefix}.mean"))
            .view()
            .into_dimensionality::<Ix1>()
            .map_err(|_| Error::Shape(format!("{prefix}.mean must be 1-d")))?
            .to_owned();
        let var = params
            .get_buffer(&format!("{prefix}.var"))
            .view()
            .into_dimensionality::<Ix1>()
            .map_err(|_| Error::Shape(format!("{prefix}.var must be 1-d")))?;
        let inv_std = var.mapv(|v| 1.0 / (v + NORM_EPS).sqrt());
        let sc = params
            .get(&scale)
            .view()
            .into_dimensionality::<Ix1>()
            .unwrap();
        let sh = params
            .get(&shift)
            .view()
            .into_dimensionality::<Ix1>()
            .unwrap();
        let xv = self.value(x);
        let (h, w, c) = xv.dim();
        if c != mean.len() {
            return Err(Error::Shape(format!(
                "{prefix}: norm over {} channels applied to {c}",
                mean.len()
            )));
        }
        let mut out = Arr3::zeros((h, w, c));
        for ((r, cc, k), v) in out.indexed_iter_mut() {
            *v = (xv[[r, cc, k]] - mean[k]) * inv_std[k] * sc[k] + sh[k];
        }
        Ok(self.push(
            out,
            Op::FrozenNorm {
                x,
                scale,
                shift,
                mean,
                inv_std,
            },
        ))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).mapv(|v| v.max(0.0));
        self.push(value, Op::Relu { x })
    }

    /// Channel-axis softmax.
    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        let value = softmax_channels(self.value(x));
        self.push(value, Op::Softmax { x })
    }

    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        let (h, w, ca) = av.dim();
        let (h2, w2, cb) = bv.dim();
        if (h, w) != (h2, w2) {
            return Err(Error::Shape(format!(
                "concat: grids {h}x{w} vs {h2}x{w2} differ"
            )));
        }
        let mut out = Arr3::zeros((h, w, ca + cb));
        out.slice_mut(ndarray::s![.., .., ..ca]).assign(av);
        out.slice_mut(ndarray::s![.., .., ca..]).assign(bv);
        Ok(self.push(out, Op::Concat { a, b }))
    }

    /// Per-pixel convex combination of branch feature maps:
    /// `out[p, :] = sum_b gate[p, b] * branch_b[p, :]`.
    pub fn gate_combine(&mut self, branches: &[NodeId], gate: NodeId) -> Result<NodeId> {
        if branches.is_empty() {
            return Err(Error::Shape("gate_combine: no branches".into()));
        }
        let dim0 = self.value(branches[0]).dim();
        for &b in branches {
            if self.value(b).dim() != dim0 {
                return Err(Error::Shape(format!(
                    "gate_combine: branch shape {:?} != {:?}",
                    self.value(b).dim(),
                    dim0
                )));
            }
        }
        let (h, w, c) = dim0;
        let gv = self.value(gate);
        if gv.dim() != (h, w, branches.len()) {
            return Err(Error::Shape(format!(
                "gate_combine: gate {:?} does not match {h}x{w}x{}",
                gv.dim(),
                branches.len()
            )));
        }
        let mut out = Arr3::zeros((h, w, c));
        for (bi, &b) in branches.iter().enumerate() {
            let bv = &self.nodes[b.0].value;
            let gv = &self.nodes[gate.0].value;
            for r in 0..h {
                for cc in 0..w {
                    let g = gv[[r, cc, bi]];
                    if g != 0.0 {
                        for k in 0..c {
                            out[[r, cc, k]] += g * bv[[r, cc, k]];
                        }
                    }
                }
            }
        }
        Ok(self.push(
            out,
            Op::GateCombine {
                branches: branches.to_vec(),
                gate,
            },
        ))
    }

    /// Bilinear upsampling with half-pixel center alignment; values beyond
    /// the outermost source centers extrapolate the boundary cell, so affine
    /// inputs stay affine all the way to the border.
    pub fn upsample_bilinear(&mut self, x: NodeId, factor: usize) -> NodeId {
        let value = bilinear_upsample(self.value(x), factor);
        self.push(value, Op::Upsample { x, factor })
    }

    /// Mean softmax cross-entropy over non-ignore pixels of a full-resolution
    /// logit map.
    pub fn seg_cross_entropy(&mut self, logits: NodeId, labels: &LabelMap) -> Result<NodeId> {
        let lv = self.value(logits);
        let (h, w, c) = lv.dim();
        if labels.dim() != (h, w) {
            return Err(Error::Shape(format!(
                "seg loss: logits {h}x{w} vs labels {:?}",
                labels.dim()
            )));
        }
        let mut total = 0.0;
        let mut count = 0usize;
        for r in 0..h {
            for cc in 0..w {
                let l = labels.get(r, cc);
                if l == IGNORE_LABEL {
                    continue;
                }
                debug_assert!((l as usize) < c);
                total += cross_entropy_at(lv, r, cc, l as usize);
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::Loss(
                "all pixels ignored in segmentation loss".into(),
            ));
        }
        Ok(self.push(
            scalar(total / count as f64),
            Op::SegCrossEntropy {
                logits,
                labels: labels.labels().clone(),
                count,
            },
        ))
    }

    /// Masked mean squared error between predicted log-depth and the log of
    /// ground-truth depth, over valid pixels only.
    pub fn depth_reg_loss(&mut self, pred: NodeId, target: &DepthMap) -> Result<NodeId> {
        let pv = self.value(pred);
        let (h, w, c) = pv.dim();
        if c != 1 {
            return Err(Error::Shape(format!(
                "depth regression head has {c} channels"
            )));
        }
        if target.dim() != (h, w) {
            return Err(Error::Shape(format!(
                "depth reg loss: pred {h}x{w} vs target {:?}",
                target.dim()
            )));
        }
        let count = target.num_valid();
        if count == 0 {
            return Err(Error::Loss(
                "empty valid mask in depth regression loss".into(),
            ));
        }
        let mut target_log = Array2::zeros((h, w));
        let mut total = 0.0;
        for (r, cc, v) in target.iter_valid() {
            let t = v.ln();
            target_log[[r, cc]] = t;
            let d = pv[[r, cc, 0]] - t;
            total += d * d;
        }
        Ok(self.push(
            scalar(total / count as f64),
            Op::DepthRegLoss {
                pred,
                target_log,
                mask: target.valid().clone(),
                count,
            },
        ))
    }

    /// Mean softmax cross-entropy between depth-bin logits and quantized
    /// ground truth, over valid pixels only.
    pub fn depth_cls_loss(&mut self, logits: NodeId, target: &QuantizedDepth) -> Result<NodeId> {
        let lv = self.value(logits);
        let (h, w, b) = lv.dim();
        if target.dim() != (h, w) {
            return Err(Error::Shape(format!(
                "depth cls loss: logits {h}x{w} vs target {:?}",
                target.dim()
            )));
        }
        let count = target.num_valid();
        if count == 0 {
            return Err(Error::Loss(
                "empty valid mask in depth classification loss".into(),
            ));
        }
        let mut total = 0.0;
        for ((r, cc), &ok) in target.valid.indexed_iter() {
            if ok {
                let bin = target.bins[[r, cc]] as usize;
                if bin >= b {
                    return Err(Error::Data(format!(
                        "depth bin {bin} out of range for {b} logits"
                    )));
                }
                total += cross_entropy_at(lv, r, cc, bin);
            }
        }
        Ok(self.push(
            scalar(total / count as f64),
            Op::DepthClsLoss {
                logits,
                bins: target.bins.clone(),
                mask: target.valid.clone(),
                count,
            },
        ))
    }

    /// Weighted sum of scalar nodes: `sum_i coeff_i * term_i`, summed in the
    /// order given.
    pub fn weighted_sum(&mut self, terms: &[(f64, NodeId)]) -> NodeId {
        let mut total = 0.0;
        for &(coeff, id) in terms {
            total += coeff * self.scalar_value(id);
        }
        self.push(
            scalar(total),
            Op::WeightedSum {
                terms: terms.to_vec(),
            },
        )
    }

    /// Reverse pass from `root` (a scalar node). Returns parameter gradients
    /// and per-node gradients; the latter are mostly useful in tests.
    pub fn backward(&self, params: &ParamSet, root: NodeId) -> Gradients {
        let mut node_grads: Vec<Option<Arr3>> = (0..self.nodes.len()).map(|_| None).collect();
        node_grads[root.0] = Some(scalar(1.0));
        let mut grads: GradStore = BTreeMap::new();

        for i in (0..=root.0).rev() {
            let Some(gout) = node_grads[i].take() else {
                continue;
            };
            self.backward_node(params, i, &gout, &mut node_grads, &mut grads);
            node_grads[i] = Some(gout);
        }
        Gradients {
            params: grads,
            nodes: node_grads,
        }
    }

    fn backward_node(
        &self,
        params: &ParamSet,
        i: usize,
        gout: &Arr3,
        node_grads: &mut [Option<Arr3>],
        grads: &mut GradStore,
    ) {
        let accumulate =
            |node_grads: &mut [Option<Arr3>], id: NodeId, delta: Arr3| match &mut node_grads[id.0]
            {
                Some(g) => *g += &delta,
                slot @ None => *slot = Some(delta),
            };
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Conv {
                x,
                weight,
                bias,
                stride,
                dilation,
            } => {
                let w4 = params
                    .get(weight)
                    .view()
                    .into_dimensionality::<Ix4>()
                    .unwrap()
                    .to_owned();
                let (dx, dw, db) =
                    conv_backward(&self.nodes[x.0].value, &w4, gout, *stride, *dilation);
                accumulate(node_grads, *x, dx);
                add_grad(grads, weight, dw.into_dyn());
                if let Some(bname) = bias {
                    add_grad(grads, bname, db.into_dyn());
                }
            }
            Op::FrozenNorm {
                x,
                scale,
                shift,
                mean,
                inv_std,
            } => {
                let xv = &self.nodes[x.0].value;
                let (h, w, c) = xv.dim();
                let sc = params
                    .get(scale)
                    .view()
                    .into_dimensionality::<Ix1>()
                    .unwrap();
                let mut dx = Arr3::zeros((h, w, c));
                let mut dscale = Array1::<f64>::zeros(c);
                let mut dshift = Array1::<f64>::zeros(c);
                for r in 0..h {
                    for cc in 0..w {
                        for k in 0..c {
                            let g = gout[[r, cc, k]];
                            dx[[r, cc, k]] = g * inv_std[k] * sc[k];
                            dscale[k] += g * (xv[[r, cc, k]] - mean[k]) * inv_std[k];
                            dshift[k] += g;
                        }
                    }
                }
                accumulate(node_grads, *x, dx);
                add_grad(grads, scale, dscale.into_dyn());
                add_grad(grads, shift, dshift.into_dyn());
            }
            Op::Relu { x } => {
                let xv = &self.nodes[x.0].value;
                let mut dx = gout.clone();
                ndarray::Zip::from(&mut dx).and(xv).for_each(|g, &v| {
                    if v <= 0.0 {
                        *g = 0.0;
                    }
                });
                accumulate(node_grads, *x, dx);
            }
            Op::Softmax { x } => {
                let y = &self.nodes[i].value;
                let (h, w, c) = y.dim();
                let mut dx = Arr3::zeros((h, w, c));
                for r in 0..h {
                    for cc in 0..w {
                        let mut dot = 0.0;
                        for k in 0..c {
                            dot += gout[[r, cc, k]] * y[[r, cc, k]];
                        }
                        for k in 0..c {
                            dx[[r, cc, k]] = y[[r, cc, k]] * (gout[[r, cc, k]] - dot);
                        }
                    }
                }
                accumulate(node_grads, *x, dx);
            }
            Op::Concat { a, b } => {
                let ca = self.nodes[a.0].value.dim().2;
                let da = gout.slice(ndarray::s![.., .., ..ca]).to_owned();
                let db = gout.slice(ndarray::s![.., .., ca..]).to_owned();
                accumulate(node_grads, *a, da);
                accumulate(node_grads, *b, db);
            }
            Op::GateCombine { branches, gate } => {
                let (h, w, _c) = gout.dim();
                let gv = &self.nodes[gate.0].value;
                let mut dgate = Arr3::zeros(gv.dim());
                for (bi, &b) in branches.iter().enumerate() {
                    let bv = &self.nodes[b.0].value;
                    let mut dbranch = Arr3::zeros(bv.dim());
                    for r in 0..h {
                        for cc in 0..w {
                            let g = gv[[r, cc, bi]];
                            let mut dot = 0.0;
                            for k in 0..bv.dim().2 {
                                dbranch[[r, cc, k]] = g * gout[[r, cc, k]];
                                dot += bv[[r, cc, k]] * gout[[r, cc, k]];
                            }
                            dgate[[r, cc, bi]] = dot;
                        }
                    }
                    accumulate(node_grads, b, dbranch);
                }
                accumulate(node_grads, *gate, dgate);
            }
            Op::Upsample { x, factor } => {
                let dx = bilinear_upsample_transpose(gout, self.nodes[x.0].value.dim(), *factor);
                accumulate(node_grads, *x, dx);
            }
            Op::SegCrossEntropy {
                logits,
                labels,
                count,
            } => {
                let g = gout[[0, 0, 0]] / *count as f64;
                let lv = &self.nodes[logits.0].value;
                let (h, w, c) = lv.dim();
                let mut dl = Arr3::zeros((h, w, c));
                for r in 0..h {
                    for cc in 0..w {
                        let l = labels[[r, cc]];
                        if l == IGNORE_LABEL {
                            continue;
                        }
                        softmax_minus_onehot(lv, r, cc, l as usize, g, &mut dl);
                    }
                }
                accumulate(node_grads, *logits, dl);
            }
            Op::DepthRegLoss {
                pred,
                target_log,
                mask,
                count,
            } => {
                let g = gout[[0, 0, 0]] / *count as f64;
                let pv = &self.nodes[pred.0].value;
                let (h, w, _) = pv.dim();
                let mut dp = Arr3::zeros((h, w, 1));
                for ((r, cc), &ok) in mask.indexed_iter() {
                    if ok {
                        dp[[r, cc, 0]] = 2.0 * g * (pv[[r, cc, 0]] - target_log[[r, cc]]);
                    }
                }
                accumulate(node_grads, *pred, dp);
            }
            Op::DepthClsLoss {
                logits,
                bins,
                mask,
                count,
            } => {
                let g = gout[[0, 0, 0]] / *count as f64;
                let lv = &self.nodes[logits.0].value;
                let mut dl = Arr3::zeros(lv.dim());
                for ((r, cc), &ok) in mask.indexed_iter() {
                    if ok {
                        softmax_minus_onehot(lv, r, cc, bins[[r, cc]] as usize, g, &mut dl);
                    }
                }
                accumulate(node_grads, *logits, dl);
            }
            Op::WeightedSum { terms } => {
                let g = gout[[0, 0, 0]];
                for &(coeff, id) in terms {
                    accumulate(node_grads, id, scalar(coeff * g));
                }
            }
        }
    }
}

/// Result of a backward pass.
pub struct Gradients {
    pub params: GradStore,
    nodes: Vec<Option<Arr3>>,
}

impl Gradients {
    /// Gradient that reached a node, if any.
    pub fn node_grad(&self, id: NodeId) -> Option<&Arr3> {
        self.nodes[id.0].as_ref()
    }
}

fn add_grad(grads: &mut GradStore, name: &str, delta: ArrayD<f64>) {
    match grads.get_mut(name) {
        Some(g) => *g += &delta,
        None => {
            grads.insert(name.to_string(), delta);
        }
    }
}

/// `-log softmax(x)[target]` at one pixel, computed via log-sum-exp.
fn cross_entropy_at(logits: &Arr3, r: usize, c: usize, target: usize) -> f64 {
    let ch = logits.dim().2;
    let mut m = f64::NEG_INFINITY;
    for k in 0..ch {
        m = m.max(logits[[r, c, k]]);
    }
    let mut sum = 0.0;
    for k in 0..ch {
        sum += (logits[[r, c, k]] - m).exp();
    }
    m + sum.ln() - logits[[r, c, target]]
}

/// Accumulates `g * (softmax(x) - onehot(target))` into `out` at one pixel.
fn softmax_minus_onehot(logits: &Arr3, r: usize, c: usize, target: usize, g: f64, out: &mut Arr3) {
    let ch = logits.dim().2;
    let mut m = f64::NEG_INFINITY;
    for k in 0..ch {
        m = m.max(logits[[r, c, k]]);
    }
    let mut sum = 0.0;
    for k in 0..ch {
        sum += (logits[[r, c, k]] - m).exp();
    }
    for k in 0..ch {
        let p = (logits[[r, c, k]] - m).exp() / sum;
        out[[r, c, k]] += g * (p - if k == target { 1.0 } else { 0.0 });
    }
}

/// Channel-axis softmax of a full grid.
pub fn softmax_channels(x: &Arr3) -> Arr3 {
    let (h, w, c) = x.dim();
    let mut out = Arr3::zeros((h, w, c));
    for r in 0..h {
        for cc in 0..w {
            let mut m = f64::NEG_INFINITY;
            for k in 0..c {
                m = m.max(x[[r, cc, k]]);
            }
            let mut sum = 0.0;
            for k in 0..c {
                let e = (x[[r, cc, k]] - m).exp();
                out[[r, cc, k]] = e;
                sum += e;
            }
            for k in 0..c {
                out[[r, cc, k]] /= sum;
            }
        }
    }
    out
}

fn conv_out_dim(n: usize, k: usize, stride: usize, dilation: usize) -> usize {
    let pad = dilation * (k - 1) / 2;
    let eff = dilation * (k - 1) + 1;
    (n + 2 * pad - eff) / stride + 1
}

/// Unrolls input patches into a `(oh*ow, kh*kw*cin)` matrix whose column
/// order matches the C-order flattening of a `(kh, kw, cin, cout)` kernel.
fn im2col(
    x: &Arr3,
    kh: usize,
    kw: usize,
    stride: usize,
    dilation: usize,
    oh: usize,
    ow: usize,
) -> Array2<f64> {
    let (h, w, cin) = x.dim();
    let pad_h = dilation * (kh - 1) / 2;
    let pad_w = dilation * (kw - 1) / 2;
    let mut cols = Array2::zeros((oh * ow, kh * kw * cin));
    for or in 0..oh {
        for oc in 0..ow {
            let row = or * ow + oc;
            let base_r = (or * stride) as isize - pad_h as isize;
            let base_c = (oc * stride) as isize - pad_w as isize;
            for ky in 0..kh {
                let r = base_r + (ky * dilation) as isize;
                if r < 0 || r >= h as isize {
                    continue;
                }
                for kx in 0..kw {
                    let c = base_c + (kx * dilation) as isize;
                    if c < 0 || c >= w as isize {
                        continue;
                    }
                    let col0 = (ky * kw + kx) * cin;
                    for ci in 0..cin {
                        cols[[row, col0 + ci]] = x[[r as usize, c as usize, ci]];
                    }
                }
            }
        }
    }
    cols
}

fn conv_forward(
    x: &Arr3,
    w: &ndarray::Array4<f64>,
    bias: Option<&Array1<f64>>,
    stride: usize,
    dilation: usize,
) -> Arr3 {
    let (h, wd, _cin) = x.dim();
    let (kh, kw, cin, cout) = w.dim();
    let oh = conv_out_dim(h, kh, stride, dilation);
    let ow = conv_out_dim(wd, kw, stride, dilation);
    let cols = im2col(x, kh, kw, stride, dilation, oh, ow);
    let w2 = w
        .view()
        .into_shape_with_order((kh * kw * cin, cout))
        .unwrap();
    let mut out2 = cols.dot(&w2);
    if let Some(b) = bias {
        out2 += &b.view().insert_axis(Axis(0));
    }
    out2.into_shape_with_order((oh, ow, cout)).unwrap()
}

fn conv_backward(
    x: &Arr3,
    w: &ndarray::Array4<f64>,
    gout: &Arr3,
    stride: usize,
    dilation: usize,
) -> (Arr3, ndarray::Array4<f64>, Array1<f64>) {
    let (h, wd, cin_x) = x.dim();
    let (kh, kw, cin, cout) = w.dim();
    debug_assert_eq!(cin_x, cin);
    let (oh, ow, _) = gout.dim();
    let cols = im2col(x, kh, kw, stride, dilation, oh, ow);
    let g2 = gout.view().into_shape_with_order((oh * ow, cout)).unwrap();
    // dW = colsᵀ · g
    let dw2 = cols.t().dot(&g2);
    let dw = dw2.into_shape_with_order((kh, kw, cin, cout)).unwrap();
    let db = g2.sum_axis(Axis(0));
    // dX scatters g · Wᵀ back through the patch map.
    let w2 = w
        .view()
        .into_shape_with_order((kh * kw * cin, cout))
        .unwrap();
    let dcols = g2.dot(&w2.t());
    let mut dx = Arr3::zeros((h, wd, cin));
    let pad_h = dilation * (kh - 1) / 2;
    let pad_w = dilation * (kw - 1) / 2;
    for or in 0..oh {
        for oc in 0..ow {
            let row = or * ow + oc;
            let base_r = (or * stride) as isize - pad_h as isize;
            let base_c = (oc * stride) as isize - pad_w as isize;
            for ky in 0..kh {
                let r = base_r + (ky * dilation) as isize;
                if r < 0 || r >= h as isize {
                    continue;
                }
                for kx in 0..kw {
                    let c = base_c + (kx * dilation) as isize;
                    if c < 0 || c >= wd as isize {
                        continue;
                    }
                    let col0 = (ky * kw + kx) * cin;
                    for ci in 0..cin {
                        dx[[r as usize, c as usize, ci]] += dcols[[row, col0 + ci]];
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

/// Cell index and interpolation weight for a continuous source coordinate.
/// The cell is clamped to the grid but the weight is not, which makes border
/// samples extrapolate instead of flatten.
fn interp_cell(src: f64, n: usize) -> (usize, f64) {
    if n == 1 {
        return (0, 0.0);
    }
    let cell = (src.floor() as isize).clamp(0, n as isize - 2) as usize;
    (cell, src - cell as f64)
}

/// Bilinear upsampling by an integer factor with half-pixel center alignment.
pub fn bilinear_upsample(x: &Arr3, factor: usize) -> Arr3 {
    let (h, w, c) = x.dim();
    let (oh, ow) = (h * factor, w * factor);
    let mut out = Arr3::zeros((oh, ow, c));
    for i in 0..oh {
        let sy = (i as f64 + 0.5) / factor as f64 - 0.5;
        let (r0, ty) = interp_cell(sy, h);
        let r1 = (r0 + 1).min(h - 1);
        for j in 0..ow {
            let sx = (j as f64 + 0.5) / factor as f64 - 0.5;
            let (c0, tx) = interp_cell(sx, w);
            let c1 = (c0 + 1).min(w - 1);
            for k in 0..c {
                let top = x[[r0, c0, k]] * (1.0 - tx) + x[[r0, c1, k]] * tx;
                let bot = x[[r1, c0, k]] * (1.0 - tx) + x[[r1, c1, k]] * tx;
                out[[i, j, k]] = top * (1.0 - ty) + bot * ty;
            }
        }
    }
    out
}

/// Transpose of [`bilinear_upsample`]: scatters output gradients back onto
/// the source grid with the same weights.
fn bilinear_upsample_transpose(gout: &Arr3, src_dim: (usize, usize, usize), factor: usize) -> Arr3 {
    let (h, w, c) = src_dim;
    let (oh, ow, _) = gout.dim();
    let mut dx = Arr3::zeros((h, w, c));
    for i in 0..oh {
        let sy = (i as f64 + 0.5) / factor as f64 - 0.5;
        let (r0, ty) = interp_cell(sy, h);
        let r1 = (r0 + 1).min(h - 1);
        for j in 0..ow {
            let sx = (j as f64 + 0.5) / factor as f64 - 0.5;
            let (c0, tx) = interp_cell(sx, w);
            let c1 = (c0 + 1).min(w - 1);
            for k in 0..c {
                let g = gout[[i, j, k]];
                dx[[r0, c0, k]] += g * (1.0 - tx) * (1.0 - ty);
                dx[[r0, c1, k]] += g * tx * (1.0 - ty);
                dx[[r1, c0, k]] += g * (1.0 - tx) * ty;
                dx[[r1, c1, k]] += g * tx * ty;
            }
        }
    }
    dx
}

/// Evaluates the continuous bilinear interpolant of `x` at source
/// coordinates `(sy, sx)` for channel `k`.
pub fn bilinear_at(x: &Arr3, sy: f64, sx: f64, k: usize) -> f64 {
    let (h, w, _) = x.dim();
    let (r0, ty) = interp_cell(sy, h);
    let (c0, tx) = interp_cell(sx, w);
    let r1 = (r0 + 1).min(h - 1);
    let c1 = (c0 + 1).min(w - 1);
    let top = x[[r0, c0, k]] * (1.0 - tx) + x[[r0, c1, k]] * tx;
    let bot = x[[r1, c0, k]] * (1.0 - tx) + x[[r1, c1, k]] * tx;
    top * (1.0 - ty) + bot * ty
}

/// Central finite-difference gradient of `eval` with respect to one scalar of
/// one named parameter.
pub fn fd_param_grad(
    params: &mut ParamSet,
    name: &str,
    index: usize,
    step: f64,
    mut eval: impl FnMut(&ParamSet) -> f64,
) -> f64 {
    let original = params.get(name).as_slice().unwrap()[index];
    params.get_mut(name).as_slice_mut().unwrap()[index] = original + step;
    let plus = eval(params);
    params.get_mut(name).as_slice_mut().unwrap()[index] = original - step;
    let minus = eval(params);
    params.get_mut(name).as_slice_mut().unwrap()[index] = original;
    (plus - minus) / (2.0 * step)
}

/// Per-array relative error between analytic and finite-difference gradients:
/// `max|a - f| / max(max|a|, max|f|, 1e-10)`.
pub fn array_relative_error(analytic: &[f64], fd: &[f64]) -> f64 {
    assert_eq!(analytic.len(), fd.len());
    let mut max_diff: f64 = 0.0;
    let mut max_mag: f64 = 0.0;
    for (&a, &f) in analytic.iter().zip(fd) {
        max_diff = max_diff.max((a - f).abs());
        max_mag = max_mag.max(a.abs()).max(f.abs());
    }
    max_diff / max_mag.max(1e-10)
}

/// Checks the analytic gradient of every parameter array against central
/// finite differences; returns `(name, relative error)` per array.
pub fn check_all_param_grads(
    params: &mut ParamSet,
    step: f64,
    mut eval: impl FnMut(&ParamSet) -> f64,
    analytic: &GradStore,
) -> Vec<(String, f64)> {
    let names = params.names();
    let mut report = Vec::new();
    for name in names {
        let n = params.get(&name).len();
        let mut fd = vec![0.0; n];
        for (i, slot) in fd.iter_mut().enumerate() {
            *slot = fd_param_grad(params, &name, i, step, &mut eval);
        }
        let zero;
        let a = match analytic.get(&name) {
            Some(g) => g.as_slice().unwrap(),
            None => {
                zero = vec![0.0; n];
                &zero
            }
        };
        report.push((name.clone(), array_relative_error(a, &fd)));
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, Array4};
    use rand::Rng;

    fn rng(label: &str) -> rand_chacha::ChaCha12Rng {
        crate::seed::SeedNode::root(42).child(label).rng()
    }

    fn random_arr3(dim: (usize, usize, usize), r: &mut impl Rng) -> Arr3 {
        Arr3::from_shape_fn(dim, |_| r.gen::<f64>() * 2.0 - 1.0)
    }

    fn random_param(params: &mut ParamSet, name: &str, shape: &[usize], r: &mut impl Rng) {
        let arr = ArrayD::from_shape_fn(ndarray::IxDyn(shape), |_| r.gen::<f64>() * 0.8 - 0.4);
        params.insert(name, arr);
    }

    #[test]
    fn conv_dilation_footprint_matches_direct_convolution() {
        // An impulse through a dilated 3x3 kernel responds only at offsets
        // {-d, 0, d} around the impulse.
        for dilation in [1usize, 8] {
            let n = 33;
            let mut x = Arr3::zeros((n, n, 1));
            x[[16, 16, 0]] = 1.0;
            let mut params = ParamSet::new();
            params.insert("w", ArrayD::from_elem(ndarray::IxDyn(&[3, 3, 1, 1]), 1.0));
            let mut tape = Tape::new();
            let xid = tape.leaf(x);
            let out = tape.conv2d(&params, xid, "w", None, 1, dilation).unwrap();
            let ov = tape.value(out);
            for r in 0..n {
                for c in 0..n {
                    let dr = r as isize - 16;
                    let dc = c as isize - 16;
                    let d = dilation as isize;
                    let expected =
                        if (dr == -d || dr == 0 || dr == d) && (dc == -d || dc == 0 || dc == d) {
                            1.0
                        } else {
                            0.0
                        };
                    assert_eq!(ov[[r, c, 0]], expected, "dil {dilation} at ({r},{c})");
                }
            }
        }
    }

    #[test]
    fn conv_matches_naive_loop_oracle() {
        let mut r = rng("conv-naive");
        let (h, w, cin, cout) = (5, 6, 3, 2);
        let x = random_arr3((h, w, cin), &mut r);
        let wk = Array4::from_shape_fn((3, 3, cin, cout), |_| r.gen::<f64>() - 0.5);
        let bias = arr1(&[0.3, -0.2]);
        for (stride, dilation) in [(1usize, 1usize), (2, 1), (1, 2)] {
            let out = conv_forward(&x, &wk, Some(&bias), stride, dilation);
            let (oh, ow, _) = out.dim();
            for or in 0..oh {
                for oc in 0..ow {
                    for co in 0..cout {
                        let mut acc = bias[co];
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let rr =
                                    (or * stride + ky * dilation) as isize - dilation as isize;
                                let cc =
                                    (oc * stride + kx * dilation) as isize - dilation as isize;
                                if rr < 0 || cc < 0 || rr >= h as isize || cc >= w as isize {
                                    continue;
                                }
                                for ci in 0..cin {
                                    acc +=
                                        x[[rr as usize, cc as usize, ci]] * wk[[ky, kx, ci, co]];
                                }
                            }
                        }
                        let got = out[[or, oc, co]];
                        assert!(
                            (got - acc).abs() < 1e-12,
                            "s{stride} d{dilation} ({or},{oc},{co}): {got} vs {acc}"
                        );
                    }
                }
            }
        }
    }

    /// Finite-difference check of a conv -> norm -> relu -> 1x1 head -> loss
    /// chain, exercising every op's parameter path.
    #[test]
    fn composite_graph_gradients_match_finite_differences() {
        let mut r = rng("composite");
        let x = random_arr3((6, 6, 2), &mut r);
        let labels =
            LabelMap::new(Array2::from_shape_fn((6, 6), |(i, j)| ((i + j) % 3) as u8), 3).unwrap();
        let mut params = ParamSet::new();
        random_param(&mut params, "conv.w", &[3, 3, 2, 4], &mut r);
        random_param(&mut params, "conv.b", &[4], &mut r);
        random_param(&mut params, "head.w", &[1, 1, 4, 3], &mut r);
        random_param(&mut params, "head.b", &[3], &mut r);
        params.insert("norm.scale", ArrayD::from_elem(ndarray::IxDyn(&[4]), 1.0));
        params.insert("norm.shift", ArrayD::from_elem(ndarray::IxDyn(&[4]), 0.1));
        params.insert_buffer("norm.mean", ArrayD::zeros(ndarray::IxDyn(&[4])));
        params.insert_buffer("norm.var", ArrayD::from_elem(ndarray::IxDyn(&[4]), 1.0));

        let run = |p: &ParamSet| -> (Tape, NodeId) {
            let mut tape = Tape::new();
            let xid = tape.leaf(x.clone());
            let c = tape.conv2d(p, xid, "conv.w", Some("conv.b"), 1, 2).unwrap();
            let n = tape.frozen_norm(p, c, "norm").unwrap();
            let a = tape.relu(n);
            let logits = tape.conv2d(p, a, "head.w", Some("head.b"), 1, 1).unwrap();
            let loss = tape.seg_cross_entropy(logits, &labels).unwrap();
            (tape, loss)
        };
        let (tape, loss) = run(&params);
        let grads = tape.backward(&params, loss).params;
        let eval = |p: &ParamSet| {
            let (tape, loss) = run(p);
            tape.scalar_value(loss)
        };
        for (name, err) in check_all_param_grads(&mut params, 1e-3, eval, &grads) {
            assert!(err < 1e-6, "{name}: rel err {err}");
        }
    }

    #[test]
    fn gate_combine_one_hot_selects_bitwise() {
        let mut r = rng("onehot");
        let b0 = random_arr3((4, 4, 3), &mut r);
        let b1 = random_arr3((4, 4, 3), &mut r);
        let b2 = random_arr3((4, 4, 3), &mut r);
        let mut gate = Arr3::zeros((4, 4, 3));
        for i in 0..4 {
            for j in 0..4 {
                gate[[i, j, 2]] = 1.0;
            }
        }
        let mut tape = Tape::new();
        let ids = [tape.leaf(b0), tape.leaf(b1), tape.leaf(b2.clone())];
        let g = tape.leaf(gate);
        let out = tape.gate_combine(&ids, g).unwrap();
        assert_eq!(tape.value(out), &b2);
    }

    #[test]
    fn gate_combine_uniform_is_the_mean() {
        let mut r = rng("uniform-gate");
        let branches: Vec<Arr3> = (0..5).map(|_| random_arr3((3, 3, 2), &mut r)).collect();
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = branches.iter().map(|b| tape.leaf(b.clone())).collect();
        let g = tape.leaf(Arr3::from_elem((3, 3, 5), 0.2));
        let out = tape.gate_combine(&ids, g).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                for k in 0..2 {
                    let mean: f64 = branches.iter().map(|b| b[[i, j, k]]).sum::<f64>() / 5.0;
                    assert!((tape.value(out)[[i, j, k]] - mean).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn gate_combine_matches_triple_loop_oracle() {
        let mut r = rng("gate-oracle");
        let branches: Vec<Arr3> = (0..4).map(|_| random_arr3((4, 4, 3), &mut r)).collect();
        let mut gate = Arr3::from_shape_fn((4, 4, 4), |_| r.gen::<f64>() + 0.01);
        for i in 0..4 {
            for j in 0..4 {
                let s: f64 = (0..4).map(|b| gate[[i, j, b]]).sum();
                for b in 0..4 {
                    gate[[i, j, b]] /= s;
                }
            }
        }
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = branches.iter().map(|b| tape.leaf(b.clone())).collect();
        let g = tape.leaf(gate.clone());
        let out = tape.gate_combine(&ids, g).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                for k in 0..3 {
                    let mut acc = 0.0;
                    for b in 0..4 {
                        acc += gate[[i, j, b]] * branches[b][[i, j, k]];
                    }
                    assert!((tape.value(out)[[i, j, k]] - acc).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn gate_combine_rejects_shape_mismatch() {
        let mut tape = Tape::new();
        let a = tape.leaf(Arr3::zeros((2, 2, 3)));
        let b = tape.leaf(Arr3::zeros((2, 3, 3)));
        let g = tape.leaf(Arr3::from_elem((2, 2, 2), 0.5));
        assert!(tape.gate_combine(&[a, b], g).is_err());
    }

    #[test]
    fn softmax_of_zeros_is_uniform_and_shift_invariant() {
        let mut tape = Tape::new();
        let x = tape.leaf(Arr3::zeros((1, 1, 5)));
        let s = tape.softmax(x);
        for k in 0..5 {
            assert!((tape.value(s)[[0, 0, k]] - 0.2).abs() < 1e-15);
        }
        let mut r = rng("shift");
        let logits = random_arr3((2, 2, 4), &mut r);
        let shifted = &logits + 3.7;
        assert!(softmax_channels(&logits)
            .iter()
            .zip(softmax_channels(&shifted).iter())
            .all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn softmax_of_dominant_logit_saturates() {
        let mut x = Arr3::zeros((1, 1, 5));
        x[[0, 0, 0]] = 10.0;
        let s = softmax_channels(&x);
        // Closed form: e^10 / (e^10 + 4).
        let expected = 10f64.exp() / (10f64.exp() + 4.0);
        assert!((s[[0, 0, 0]] - expected).abs() < 1e-12);
        let sum: f64 = (0..5).map(|k| s[[0, 0, k]]).sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn upsample_preserves_constants_and_ramps() {
        let c = Arr3::from_elem((3, 5, 2), 1.25);
        let up = bilinear_upsample(&c, 8);
        assert!(up.iter().all(|&v| (v - 1.25).abs() < 1e-12));

        // A ramp in x stays a ramp: the output at column j equals the ramp
        // evaluated at the mapped source coordinate, border included.
        let ramp = Arr3::from_shape_fn((2, 6, 1), |(_, j, _)| j as f64);
        let up = bilinear_upsample(&ramp, 8);
        for j in 0..48 {
            let src = (j as f64 + 0.5) / 8.0 - 0.5;
            assert!(
                (up[[0, j, 0]] - src).abs() < 1e-6,
                "col {j}: {} vs {src}",
                up[[0, j, 0]]
            );
        }
    }

    #[test]
    fn interpolant_reproduces_source_centers() {
        let mut r = rng("centers");
        let x = random_arr3((4, 7, 2), &mut r);
        for i in 0..4 {
            for j in 0..7 {
                for k in 0..2 {
                    let v = bilinear_at(&x, i as f64, j as f64, k);
                    assert!((v - x[[i, j, k]]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn upsample_backward_is_the_transpose() {
        // <A u, v> == <u, Aᵀ v> for random u, v.
        let mut r = rng("transpose");
        let u = random_arr3((3, 4, 2), &mut r);
        let v = random_arr3((24, 32, 2), &mut r);
        let au = bilinear_upsample(&u, 8);
        let atv = bilinear_upsample_transpose(&v, (3, 4, 2), 8);
        let lhs: f64 = au.iter().zip(v.iter()).map(|(a, b)| a * b).sum();
        let rhs: f64 = u.iter().zip(atv.iter()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9, "{lhs} vs {rhs}");
    }

    #[test]
    fn concat_stacks_channels() {
        let mut r = rng("concat");
        let a = random_arr3((2, 2, 3), &mut r);
        let b = random_arr3((2, 2, 2), &mut r);
        let mut tape = Tape::new();
        let ai = tape.leaf(a.clone());
        let bi = tape.leaf(b.clone());
        let c = tape.concat(ai, bi).unwrap();
        assert_eq!(tape.value(c).dim(), (2, 2, 5));
        for k in 0..3 {
            assert_eq!(tape.value(c)[[1, 0, k]], a[[1, 0, k]]);
        }
        for k in 0..2 {
            assert_eq!(tape.value(c)[[1, 0, 3 + k]], b[[1, 0, k]]);
        }
    }

    #[test]
    fn gradients_flow_through_gate_combine_and_softmax() {
        // Gate produced by a 1x1 head feeding gate_combine; every parameter
        // checked against finite differences.
        let mut r = rng("gate-grad");
        let x = random_arr3((4, 4, 3), &mut r);
        let labels =
            LabelMap::new(Array2::from_shape_fn((4, 4), |(i, _)| (i % 2) as u8), 2).unwrap();
        let mut params = ParamSet::new();
        random_param(&mut params, "b0.w", &[3, 3, 3, 3], &mut r);
        random_param(&mut params, "b1.w", &[3, 3, 3, 3], &mut r);
        random_param(&mut params, "gate.w", &[1, 1, 3, 2], &mut r);
        random_param(&mut params, "gate.b", &[2], &mut r);
        random_param(&mut params, "cls.w", &[1, 1, 3, 2], &mut r);
        random_param(&mut params, "cls.b", &[2], &mut r);

        let run = |p: &ParamSet| -> (Tape, NodeId) {
            let mut tape = Tape::new();
            let xid = tape.leaf(x.clone());
            let b0 = tape.conv2d(p, xid, "b0.w", None, 1, 1).unwrap();
            let b0 = tape.relu(b0);
            let b1 = tape.conv2d(p, xid, "b1.w", None, 1, 2).unwrap();
            let b1 = tape.relu(b1);
            let glog = tape.conv2d(p, xid, "gate.w", Some("gate.b"), 1, 1).unwrap();
            let gate = tape.softmax(glog);
            let mix = tape.gate_combine(&[b0, b1], gate).unwrap();
            let logits = tape.conv2d(p, mix, "cls.w", Some("cls.b"), 1, 1).unwrap();
            let loss = tape.seg_cross_entropy(logits, &labels).unwrap();
            (tape, loss)
        };
        let (tape, loss) = run(&params);
        let grads = tape.backward(&params, loss).params;
        let eval = |p: &ParamSet| {
            let (tape, loss) = run(p);
            tape.scalar_value(loss)
        };
        for (name, err) in check_all_param_grads(&mut params, 1e-3, eval, &grads) {
            assert!(err < 1e-6, "{name}: rel err {err}");
        }
    }

    #[test]
    fn weight_sharing_accumulates_gradients() {
        // Applying the same kernel twice must yield the summed gradient; FD
        // sees the total effect automatically.
        let mut r = rng("shared");
        let x = random_arr3((4, 4, 2), &mut r);
        let labels = LabelMap::new(Array2::zeros((4, 4)), 2).unwrap();
        let mut params = ParamSet::new();
        random_param(&mut params, "w", &[3, 3, 2, 2], &mut r);

        let run = |p: &ParamSet| -> (Tape, NodeId) {
            let mut tape = Tape::new();
            let xid = tape.leaf(x.clone());
            let a = tape.conv2d(p, xid, "w", None, 1, 1).unwrap();
            let b = tape.conv2d(p, a, "w", None, 1, 1).unwrap();
            let loss = tape.seg_cross_entropy(b, &labels).unwrap();
            (tape, loss)
        };
        let (tape, loss) = run(&params);
        let grads = tape.backward(&params, loss).params;
        let eval = |p: &ParamSet| {
            let (tape, loss) = run(p);
            tape.scalar_value(loss)
        };
        for (name, err) in check_all_param_grads(&mut params, 1e-3, eval, &grads) {
            assert!(err < 1e-6, "{name}: rel err {err}");
        }
    }

    #[test]
    fn weighted_sum_routes_coefficients() {
        let mut tape = Tape::new();
        let a = tape.leaf(scalar(2.0));
        let b = tape.leaf(scalar(3.0));
        let s = tape.weighted_sum(&[(0.5, a), (2.0, b)]);
        assert_eq!(tape.scalar_value(s), 7.0);
        let g = tape.backward(&ParamSet::new(), s);
        assert_eq!(g.node_grad(a).unwrap()[[0, 0, 0]], 0.5);
        assert_eq!(g.node_grad(b).unwrap()[[0, 0, 0]], 2.0);
    }
}
