//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation of a forward pass; [`Tape::backward`]
//! replays it in reverse to produce exact gradients with respect to any
//! recorded value. Graphs are rebuilt per training iteration (define-by-run).
//!
//! All kernels are plain sequential loops on `f64` slices, so results are
//! bit-reproducible run to run.

use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// One bilinear sample point: four source indices into a feature plane and
/// their interpolation weights.
#[derive(Clone, Debug)]
pub struct BilinearPoint {
    pub idx: [usize; 4],
    pub w: [f64; 4],
}

/// Precomputed sampling pattern for ROI extraction from one feature plane.
#[derive(Clone, Debug)]
pub struct RoiSamples {
    pub plane_h: usize,
    pub plane_w: usize,
    pub out_size: usize,
    pub points: Vec<BilinearPoint>,
}

/// Per-location target of the IOU regression loss.
#[derive(Clone, Debug)]
pub struct RegLossTarget {
    /// Flat spatial index (y * width + x) into the level's maps.
    pub loc: usize,
    /// Target edge distances (left, top, right, bottom), all > 0.
    pub target: [f64; 4],
    /// Weight of this location's term (the centerness target).
    pub weight: f64,
}

const IOU_FLOOR: f64 = 1e-9;

enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    },
    ConvTranspose2 {
        x: Var,
        w: Var,
        b: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Relu {
        x: Var,
    },
    Sigmoid {
        x: Var,
    },
    Exp {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        c: f64,
    },
    ChannelGate {
        x: Var,
        g: Var,
    },
    SpatialGate {
        x: Var,
        a: Var,
    },
    ConcatC {
        xs: Vec<Var>,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool {
        x: Var,
    },
    ChannelMax {
        x: Var,
        argmax: Vec<usize>,
    },
    ChannelMean {
        x: Var,
    },
    UpsampleNearest2 {
        x: Var,
    },
    RoiBilinear {
        x: Var,
        samples: RoiSamples,
    },
    FocalLossSum {
        logits: Var,
        targets: Vec<i32>,
        alpha: f64,
        gamma: f64,
    },
    IouLossSum {
        reg_raw: Var,
        targets: Vec<RegLossTarget>,
        stride: f64,
    },
    BceSum {
        logits: Var,
        targets: Vec<(usize, f64)>,
    },
    MaskBceMean {
        logits: Var,
        class_id: usize,
        target: Vec<f64>,
    },
    SumWeighted {
        xs: Vec<(Var, f64)>,
    },
    SumAll {
        x: Var,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn constant(&mut self, value: f64) -> Var {
        self.push(Tensor::scalar(value), Op::Leaf)
    }

    /// 2-D convolution. `x: [Cin,H,W]`, `w: [Cout,Cin,k,k]`, `b: [Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let out = conv2d_forward(
            self.value(x),
            self.value(w),
            self.value(b),
            stride,
            pad,
        );
        self.push(out, Op::Conv2d { x, w, b, stride, pad })
    }

    /// Transposed convolution with kernel 2, stride 2 (exact 2x upsampling).
    /// `x: [Cin,H,W]`, `w: [Cin,Cout,2,2]`, `b: [Cout]` -> `[Cout,2H,2W]`.
    pub fn conv_transpose2(&mut self, x: Var, w: Var, b: Var) -> Var {
        let out = convt2_forward(self.value(x), self.value(w), self.value(b));
        self.push(out, Op::ConvTranspose2 { x, w, b })
    }

    /// Fully connected layer. `x: [n]`, `w: [m,n]`, `b: [m]` -> `[m]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let bv = self.value(b);
        let (m, n) = (wv.shape()[0], wv.shape()[1]);
        assert_eq!(xv.numel(), n, "linear: input length mismatch");
        assert_eq!(bv.numel(), m, "linear: bias length mismatch");
        let mut out = vec![0.0; m];
        for i in 0..m {
            let row = &wv.data()[i * n..(i + 1) * n];
            let mut acc = bv.data()[i];
            for (wij, xj) in row.iter().zip(xv.data()) {
                acc += wij * xj;
            }
            out[i] = acc;
        }
        self.push(Tensor::from_vec(&[m], out), Op::Linear { x, w, b })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push(out, Op::Relu { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        self.push(out, Op::Sigmoid { x })
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::exp);
        self.push(out, Op::Exp { x })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(av.shape(), bv.shape(), "add: shape mismatch");
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| x + y)
            .collect();
        let out = Tensor::from_vec(av.shape(), data);
        self.push(out, Op::Add { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(av.shape(), bv.shape(), "mul: shape mismatch");
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::from_vec(av.shape(), data);
        self.push(out, Op::Mul { a, b })
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v * c);
        self.push(out, Op::Scale { x, c })
    }

    /// Per-channel multiplicative gate: `x: [C,H,W]`, `g: [C]`.
    pub fn channel_gate(&mut self, x: Var, g: Var) -> Var {
        let xv = self.value(x);
        let gv = self.value(g);
        let (c, h, w) = dims3(xv);
        assert_eq!(gv.numel(), c, "channel_gate: gate length mismatch");
        let plane = h * w;
        let mut out = xv.clone();
        for ci in 0..c {
            let gc = gv.data()[ci];
            for v in &mut out.data_mut()[ci * plane..(ci + 1) * plane] {
                *v *= gc;
            }
        }
        self.push(out, Op::ChannelGate { x, g })
    }

    /// Spatial multiplicative gate: `x: [C,H,W]`, `a: [1,H,W]`.
    pub fn spatial_gate(&mut self, x: Var, a: Var) -> Var {
        let xv = self.value(x);
        let av = self.value(a);
        let (c, h, w) = dims3(xv);
        assert_eq!(av.shape(), &[1, h, w], "spatial_gate: map shape mismatch");
        let plane = h * w;
        let mut out = xv.clone();
        for ci in 0..c {
            for (v, g) in out.data_mut()[ci * plane..(ci + 1) * plane]
                .iter_mut()
                .zip(av.data())
            {
                *v *= g;
            }
        }
        self.push(out, Op::SpatialGate { x, a })
    }

    /// Concatenate `[Ci,H,W]` tensors along the channel axis.
    pub fn concat_c(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty());
        let (_, h, w) = dims3(self.value(xs[0]));
        let mut total_c = 0;
        let mut data = Vec::new();
        for &v in xs {
            let t = self.value(v);
            let (c, th, tw) = dims3(t);
            assert_eq!((th, tw), (h, w), "concat_c: spatial dims mismatch");
            total_c += c;
            data.extend_from_slice(t.data());
        }
        let out = Tensor::from_vec(&[total_c, h, w], data);
        self.push(out, Op::ConcatC { xs: xs.to_vec() })
    }

    /// 2x2 max pooling with stride 2 (floor semantics on odd inputs).
    pub fn max_pool2(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (c, h, w) = dims3(xv);
        let (oh, ow) = (h / 2, w / 2);
        assert!(oh >= 1 && ow >= 1, "max_pool2: input too small");
        let mut out = Tensor::zeros(&[c, oh, ow]);
        let mut argmax = vec![0usize; c * oh * ow];
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0;
                    for ky in 0..2 {
                        for kx in 0..2 {
                            let idx = xv.idx3(ci, oy * 2 + ky, ox * 2 + kx);
                            let v = xv.data()[idx];
                            if v > best {
                                best = v;
                                best_idx = idx;
                            }
                        }
                    }
                    let oidx = out.idx3(ci, oy, ox);
                    out.data_mut()[oidx] = best;
                    argmax[oidx] = best_idx;
                }
            }
        }
        self.push(out, Op::MaxPool2 { x, argmax })
    }

    /// Global average pool `[C,H,W]` -> `[C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (c, h, w) = dims3(xv);
        let plane = h * w;
        let mut out = vec![0.0; c];
        for ci in 0..c {
            let s: f64 = xv.data()[ci * plane..(ci + 1) * plane].iter().sum();
            out[ci] = s / plane as f64;
        }
        self.push(Tensor::from_vec(&[c], out), Op::GlobalAvgPool { x })
    }

    /// Channel-wise maximum `[C,H,W]` -> `[1,H,W]` (ties to the lowest channel).
    pub fn channel_max(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (c, h, w) = dims3(xv);
        let plane = h * w;
        let mut out = vec![f64::NEG_INFINITY; plane];
        let mut argmax = vec![0usize; plane];
        for ci in 0..c {
            for (i, v) in xv.data()[ci * plane..(ci + 1) * plane].iter().enumerate() {
                if *v > out[i] {
                    out[i] = *v;
                    argmax[i] = ci;
                }
            }
        }
        self.push(
            Tensor::from_vec(&[1, h, w], out),
            Op::ChannelMax { x, argmax },
        )
    }

    /// Channel-wise mean `[C,H,W]` -> `[1,H,W]`.
    pub fn channel_mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (c, h, w) = dims3(xv);
        let plane = h * w;
        let mut out = vec![0.0; plane];
        for ci in 0..c {
            for (o, v) in out.iter_mut().zip(&xv.data()[ci * plane..(ci + 1) * plane]) {
                *o += *v;
            }
        }
        for o in &mut out {
            *o /= c as f64;
        }
        self.push(Tensor::from_vec(&[1, h, w], out), Op::ChannelMean { x })
    }

    /// Nearest-neighbor 2x upsample `[C,H,W]` -> `[C,2H,2W]`.
    pub fn upsample_nearest2(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (c, h, w) = dims3(xv);
        let (oh, ow) = (h * 2, w * 2);
        let mut out = Tensor::zeros(&[c, oh, ow]);
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let idx = out.idx3(ci, oy, ox);
                    out.data_mut()[idx] = xv.at3(ci, oy / 2, ox / 2);
                }
            }
        }
        self.push(out, Op::UpsampleNearest2 { x })
    }

    /// Bilinear ROI sampling from `x: [C,H,W]` with a precomputed pattern.
    pub fn roi_bilinear(&mut self, x: Var, samples: RoiSamples) -> Var {
        let xv = self.value(x);
        let (c, h, w) = dims3(xv);
        assert_eq!(
            (samples.plane_h, samples.plane_w),
            (h, w),
            "roi_bilinear: plane dims mismatch"
        );
        let s = samples.out_size;
        assert_eq!(samples.points.len(), s * s);
        let plane = h * w;
        let mut out = Tensor::zeros(&[c, s, s]);
        for ci in 0..c {
            let src = &xv.data()[ci * plane..(ci + 1) * plane];
            let dst = &mut out.data_mut()[ci * s * s..(ci + 1) * s * s];
            for (o, p) in dst.iter_mut().zip(&samples.points) {
                *o = p.w[0] * src[p.idx[0]]
                    + p.w[1] * src[p.idx[1]]
                    + p.w[2] * src[p.idx[2]]
                    + p.w[3] * src[p.idx[3]];
            }
        }
        self.push(out, Op::RoiBilinear { x, samples })
    }

    /// Sigmoid focal loss summed over all locations and classes.
    ///
    /// `logits: [C,H,W]`; `targets[loc]` is the positive class index or -1
    /// for background, `loc = y*W + x`.
    pub fn focal_loss_sum(&mut self, logits: Var, targets: Vec<i32>, alpha: f64, gamma: f64) -> Var {
        let lv = self.value(logits);
        let (c, h, w) = dims3(lv);
        assert_eq!(targets.len(), h * w, "focal_loss_sum: target length mismatch");
        let plane = h * w;
        let mut total = 0.0;
        for ci in 0..c {
            for (loc, &t) in targets.iter().enumerate() {
                let z = lv.data()[ci * plane + loc];
                total += focal_term(z, t == ci as i32, alpha, gamma).0;
            }
        }
        self.push(
            Tensor::scalar(total),
            Op::FocalLossSum {
                logits,
                targets,
                alpha,
                gamma,
            },
        )
    }

    /// Weighted sum of `-ln IOU(pred, target)` over positive locations.
    ///
    /// `reg_raw: [4,H,W]` holds raw regression outputs; predicted distances
    /// are `exp(raw) * stride`. Channel order: left, top, right, bottom.
    pub fn iou_loss_sum(&mut self, reg_raw: Var, targets: Vec<RegLossTarget>, stride: f64) -> Var {
        let rv = self.value(reg_raw);
        let (c, h, w) = dims3(rv);
        assert_eq!(c, 4, "iou_loss_sum: expected 4 regression channels");
        let plane = h * w;
        let mut total = 0.0;
        for t in &targets {
            let mut pred = [0.0; 4];
            for k in 0..4 {
                pred[k] = rv.data()[k * plane + t.loc].exp() * stride;
            }
            let (iou, _) = iou_from_distances(&pred, &t.target);
            total += -iou.max(IOU_FLOOR).ln() * t.weight;
        }
        self.push(
            Tensor::scalar(total),
            Op::IouLossSum {
                reg_raw,
                targets,
                stride,
            },
        )
    }

    /// Sum of binary cross entropy with logits at selected flat positions.
    pub fn bce_sum(&mut self, logits: Var, targets: Vec<(usize, f64)>) -> Var {
        let lv = self.value(logits);
        let mut total = 0.0;
        for &(pos, t) in &targets {
            total += bce_with_logits(lv.data()[pos], t);
        }
        self.push(Tensor::scalar(total), Op::BceSum { logits, targets })
    }

    /// Mean per-pixel BCE of one class plane of mask logits against a
    /// binary target. `logits: [C,m,m]`, `target.len() == m*m`.
    pub fn mask_bce_mean(&mut self, logits: Var, class_id: usize, target: Vec<f64>) -> Var {
        let lv = self.value(logits);
        let (c, h, w) = dims3(lv);
        assert!(class_id < c, "mask_bce_mean: class out of range");
        let plane = h * w;
        assert_eq!(target.len(), plane, "mask_bce_mean: target length mismatch");
        let mut total = 0.0;
        for (i, &t) in target.iter().enumerate() {
            total += bce_with_logits(lv.data()[class_id * plane + i], t);
        }
        self.push(
            Tensor::scalar(total / plane as f64),
            Op::MaskBceMean {
                logits,
                class_id,
                target,
            },
        )
    }

    /// Sum of every element of a tensor.
    pub fn sum_all(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(total), Op::SumAll { x })
    }

    /// Weighted sum of scalar values.
    pub fn sum_weighted(&mut self, xs: &[(Var, f64)]) -> Var {
        let mut total = 0.0;
        for &(v, c) in xs {
            total += self.value(v).item() * c;
        }
        self.push(Tensor::scalar(total), Op::SumWeighted { xs: xs.to_vec() })
    }

    /// Reverse pass from a scalar root. Returns the gradient of `root`'s
    /// value with respect to every recorded tensor that influences it.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(
            self.value(root).numel(),
            1,
            "backward: root must be a scalar"
        );
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::scalar(1.0));

        for id in (0..=root.0).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate_parents(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate_parents(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let add_to = |grads: &mut [Option<Tensor>], v: Var, delta: Tensor| {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        };

        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, stride, pad } => {
                let (dx, dw, db) =
                    conv2d_backward(self.value(*x), self.value(*w), g, *stride, *pad);
                add_to(grads, *x, dx);
                add_to(grads, *w, dw);
                add_to(grads, *b, db);
            }
            Op::ConvTranspose2 { x, w, b } => {
                let (dx, dw, db) = convt2_backward(self.value(*x), self.value(*w), g);
                add_to(grads, *x, dx);
                add_to(grads, *w, dw);
                add_to(grads, *b, db);
            }
            Op::Linear { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (m, n) = (wv.shape()[0], wv.shape()[1]);
                let mut dx = Tensor::zeros(&[n]);
                let mut dw = Tensor::zeros(&[m, n]);
                for i in 0..m {
                    let gi = g.data()[i];
                    let wrow = &wv.data()[i * n..(i + 1) * n];
                    let dwrow = &mut dw.data_mut()[i * n..(i + 1) * n];
                    for j in 0..n {
                        dwrow[j] += gi * xv.data()[j];
                        dx.data_mut()[j] += gi * wrow[j];
                    }
                }
                add_to(grads, *x, dx);
                add_to(grads, *w, dw);
                add_to(grads, *b, g.clone());
            }
            Op::Relu { x } => {
                let xv = self.value(*x);
                let mut dx = g.clone();
                for (d, v) in dx.data_mut().iter_mut().zip(xv.data()) {
                    if *v <= 0.0 {
                        *d = 0.0;
                    }
                }
                add_to(grads, *x, dx);
            }
            Op::Sigmoid { x } => {
                let yv = &self.nodes[id].value;
                let mut dx = g.clone();
                for (d, y) in dx.data_mut().iter_mut().zip(yv.data()) {
                    *d *= y * (1.0 - y);
                }
                add_to(grads, *x, dx);
            }
            Op::Exp { x } => {
                let yv = &self.nodes[id].value;
                let mut dx = g.clone();
                for (d, y) in dx.data_mut().iter_mut().zip(yv.data()) {
                    *d *= y;
                }
                add_to(grads, *x, dx);
            }
            Op::Add { a, b } => {
                add_to(grads, *a, g.clone());
                add_to(grads, *b, g.clone());
            }
            Op::Mul { a, b } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let da = Tensor::from_vec(
                    g.shape(),
                    g.data().iter().zip(bv.data()).map(|(g, b)| g * b).collect(),
                );
                let db = Tensor::from_vec(
                    g.shape(),
                    g.data().iter().zip(av.data()).map(|(g, a)| g * a).collect(),
                );
                add_to(grads, *a, da);
                add_to(grads, *b, db);
            }
            Op::Scale { x, c } => {
                add_to(grads, *x, g.map(|v| v * c));
            }
            Op::ChannelGate { x, g: gate } => {
                let xv = self.value(*x);
                let gv = self.value(*gate);
                let (c, h, w) = dims3(xv);
                let plane = h * w;
                let mut dx = g.clone();
                let mut dg = Tensor::zeros(&[c]);
                for ci in 0..c {
                    let gc = gv.data()[ci];
                    let mut acc = 0.0;
                    for i in ci * plane..(ci + 1) * plane {
                        acc += g.data()[i] * xv.data()[i];
                        dx.data_mut()[i] *= gc;
                    }
                    dg.data_mut()[ci] = acc;
                }
                add_to(grads, *x, dx);
                add_to(grads, *gate, dg);
            }
            Op::SpatialGate { x, a } => {
                let xv = self.value(*x);
                let av = self.value(*a);
                let (c, h, w) = dims3(xv);
                let plane = h * w;
                let mut dx = g.clone();
                let mut da = Tensor::zeros(&[1, h, w]);
                for ci in 0..c {
                    for i in 0..plane {
                        let gi = g.data()[ci * plane + i];
                        da.data_mut()[i] += gi * xv.data()[ci * plane + i];
                        dx.data_mut()[ci * plane + i] = gi * av.data()[i];
                    }
                }
                add_to(grads, *x, dx);
                add_to(grads, *a, da);
            }
            Op::ConcatC { xs } => {
                let mut offset = 0;
                for &v in xs {
                    let t = self.value(v);
                    let n = t.numel();
                    let dv = Tensor::from_vec(t.shape(), g.data()[offset..offset + n].to_vec());
                    add_to(grads, v, dv);
                    offset += n;
                }
            }
            Op::MaxPool2 { x, argmax } => {
                let mut dx = Tensor::zeros(self.value(*x).shape());
                for (o, &src) in argmax.iter().enumerate() {
                    dx.data_mut()[src] += g.data()[o];
                }
                add_to(grads, *x, dx);
            }
            Op::GlobalAvgPool { x } => {
                let xv = self.value(*x);
                let (c, h, w) = dims3(xv);
                let plane = h * w;
                let inv = 1.0 / plane as f64;
                let mut dx = Tensor::zeros(xv.shape());
                for ci in 0..c {
                    let gc = g.data()[ci] * inv;
                    for d in &mut dx.data_mut()[ci * plane..(ci + 1) * plane] {
                        *d += gc;
                    }
                }
                add_to(grads, *x, dx);
            }
            Op::ChannelMax { x, argmax } => {
                let xv = self.value(*x);
                let (_, h, w) = dims3(xv);
                let plane = h * w;
                let mut dx = Tensor::zeros(xv.shape());
                for i in 0..plane {
                    dx.data_mut()[argmax[i] * plane + i] += g.data()[i];
                }
                add_to(grads, *x, dx);
            }
            Op::ChannelMean { x } => {
                let xv = self.value(*x);
                let (c, h, w) = dims3(xv);
                let plane = h * w;
                let inv = 1.0 / c as f64;
                let mut dx = Tensor::zeros(xv.shape());
                for ci in 0..c {
                    for i in 0..plane {
                        dx.data_mut()[ci * plane + i] += g.data()[i] * inv;
                    }
                }
                add_to(grads, *x, dx);
            }
            Op::UpsampleNearest2 { x } => {
                let xv = self.value(*x);
                let (c, h, w) = dims3(xv);
                let (oh, ow) = (h * 2, w * 2);
                let mut dx = Tensor::zeros(xv.shape());
                for ci in 0..c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let d = dx.idx3(ci, oy / 2, ox / 2);
                            dx.data_mut()[d] += g.data()[(ci * oh + oy) * ow + ox];
                        }
                    }
                }
                add_to(grads, *x, dx);
            }
            Op::RoiBilinear { x, samples } => {
                let xv = self.value(*x);
                let (c, h, w) = dims3(xv);
                let plane = h * w;
                let s = samples.out_size;
                let mut dx = Tensor::zeros(xv.shape());
                for ci in 0..c {
                    let dst = &mut dx.data_mut()[ci * plane..(ci + 1) * plane];
                    let gsrc = &g.data()[ci * s * s..(ci + 1) * s * s];
                    for (gv, p) in gsrc.iter().zip(&samples.points) {
                        for k in 0..4 {
                            dst[p.idx[k]] += gv * p.w[k];
                        }
                    }
                }
                add_to(grads, *x, dx);
            }
            Op::FocalLossSum {
                logits,
                targets,
                alpha,
                gamma,
            } => {
                let lv = self.value(*logits);
                let (c, h, w) = dims3(lv);
                let plane = h * w;
                let gs = g.item();
                let mut dl = Tensor::zeros(lv.shape());
                for ci in 0..c {
                    for (loc, &t) in targets.iter().enumerate() {
                        let z = lv.data()[ci * plane + loc];
                        let (_, dz) = focal_term(z, t == ci as i32, *alpha, *gamma);
                        dl.data_mut()[ci * plane + loc] = dz * gs;
                    }
                }
                add_to(grads, *logits, dl);
            }
            Op::IouLossSum {
                reg_raw,
                targets,
                stride,
            } => {
                let rv = self.value(*reg_raw);
                let (_, h, w) = dims3(rv);
                let plane = h * w;
                let gs = g.item();
                let mut dr = Tensor::zeros(rv.shape());
                for t in targets {
                    let mut pred = [0.0; 4];
                    for k in 0..4 {
                        pred[k] = rv.data()[k * plane + t.loc].exp() * stride;
                    }
                    let (iou, diou) = iou_from_distances(&pred, &t.target);
                    if iou > IOU_FLOOR {
                        let dloss_diou = -t.weight / iou;
                        for k in 0..4 {
                            // d(pred_k)/d(raw_k) = pred_k
                            dr.data_mut()[k * plane + t.loc] +=
                                gs * dloss_diou * diou[k] * pred[k];
                        }
                    }
                }
                add_to(grads, *reg_raw, dr);
            }
            Op::BceSum { logits, targets } => {
                let lv = self.value(*logits);
                let gs = g.item();
                let mut dl = Tensor::zeros(lv.shape());
                for &(pos, t) in targets {
                    dl.data_mut()[pos] += (sigmoid(lv.data()[pos]) - t) * gs;
                }
                add_to(grads, *logits, dl);
            }
            Op::MaskBceMean {
                logits,
                class_id,
                target,
            } => {
                let lv = self.value(*logits);
                let (_, h, w) = dims3(lv);
                let plane = h * w;
                let gs = g.item() / plane as f64;
                let mut dl = Tensor::zeros(lv.shape());
                for (i, &t) in target.iter().enumerate() {
                    let pos = class_id * plane + i;
                    dl.data_mut()[pos] = (sigmoid(lv.data()[pos]) - t) * gs;
                }
                add_to(grads, *logits, dl);
            }
            Op::SumWeighted { xs } => {
                let gs = g.item();
                for &(v, c) in xs {
                    add_to(grads, v, Tensor::scalar(gs * c));
                }
            }
            Op::SumAll { x } => {
                let gs = g.item();
                add_to(grads, *x, Tensor::filled(self.value(*x).shape(), gs));
            }
        }
    }
}

#[inline]
fn dims3(t: &Tensor) -> (usize, usize, usize) {
    let s = t.shape();
    assert_eq!(s.len(), 3, "expected rank-3 tensor, got shape {:?}", s);
    (s[0], s[1], s[2])
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable ln(1 + e^z).
#[inline]
pub fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// BCE with logits: softplus(z) - t*z.
#[inline]
pub fn bce_with_logits(z: f64, t: f64) -> f64 {
    softplus(z) - t * z
}

/// One focal-loss term and its derivative w.r.t. the logit.
fn focal_term(z: f64, positive: bool, alpha: f64, gamma: f64) -> (f64, f64) {
    let p = sigmoid(z);
    let ln_p = -softplus(-z);
    let ln_1mp = -softplus(z);
    if positive {
        let mod_f = (1.0 - p).powf(gamma);
        let loss = -alpha * mod_f * ln_p;
        let p_lnp = if p == 0.0 { 0.0 } else { p * ln_p };
        let dz = alpha * mod_f * (gamma * p_lnp - (1.0 - p));
        (loss, dz)
    } else {
        let mod_f = p.powf(gamma);
        let loss = -(1.0 - alpha) * mod_f * ln_1mp;
        let q_lnq = if p == 1.0 { 0.0 } else { (1.0 - p) * ln_1mp };
        let dz = -(1.0 - alpha) * mod_f * (gamma * q_lnq - p);
        (loss, dz)
    }
}

/// IOU of two boxes sharing an anchor point, each given as distances
/// (left, top, right, bottom) from that point, plus the partial
/// derivatives of the IOU w.r.t. the four predicted distances.
fn iou_from_distances(pred: &[f64; 4], target: &[f64; 4]) -> (f64, [f64; 4]) {
    let iw = pred[0].min(target[0]) + pred[2].min(target[2]);
    let ih = pred[1].min(target[1]) + pred[3].min(target[3]);
    let inter = iw * ih;
    let ap = (pred[0] + pred[2]) * (pred[1] + pred[3]);
    let ag = (target[0] + target[2]) * (target[1] + target[3]);
    let union = ap + ag - inter;
    if union <= 0.0 {
        return (0.0, [0.0; 4]);
    }
    let iou = inter / union;

    // dI/dd: ih (or iw) where pred is the binding side of the min.
    let d_inter = [
        if pred[0] < target[0] { ih } else { 0.0 },
        if pred[1] < target[1] { iw } else { 0.0 },
        if pred[2] < target[2] { ih } else { 0.0 },
        if pred[3] < target[3] { iw } else { 0.0 },
    ];
    let d_ap = [
        pred[1] + pred[3],
        pred[0] + pred[2],
        pred[1] + pred[3],
        pred[0] + pred[2],
    ];
    let mut diou = [0.0; 4];
    for k in 0..4 {
        let d_union = d_ap[k] - d_inter[k];
        diou[k] = (d_inter[k] * union - inter * d_union) / (union * union);
    }
    (iou, diou)
}

fn conv2d_forward(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (cin, h, wd) = dims3(x);
    let ws = w.shape();
    assert_eq!(ws.len(), 4, "conv2d: weight must be rank 4");
    let (cout, wcin, k) = (ws[0], ws[1], ws[2]);
    assert_eq!(ws[3], k, "conv2d: kernel must be square");
    assert_eq!(wcin, cin, "conv2d: input channel mismatch");
    assert_eq!(b.numel(), cout, "conv2d: bias length mismatch");
    assert!(h + 2 * pad >= k && wd + 2 * pad >= k, "conv2d: input too small");
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;

    let mut out = Tensor::zeros(&[cout, oh, ow]);
    for co in 0..cout {
        let bias = b.data()[co];
        let out_plane = &mut out.data_mut()[co * oh * ow..(co + 1) * oh * ow];
        out_plane.fill(bias);
        for ci in 0..cin {
            let x_plane = &x.data()[ci * h * wd..(ci + 1) * h * wd];
            for ky in 0..k {
                for kx in 0..k {
                    let wv = w.data()[((co * cin + ci) * k + ky) * k + kx];
                    conv_row_accumulate(
                        out_plane, x_plane, wv, h, wd, oh, ow, stride, pad, ky, kx,
                    );
                }
            }
        }
    }
    out
}

/// Accumulate `out += wv * shifted(x)` over the valid output range of one
/// kernel tap. Shared by the forward pass and the input-gradient pass
/// (which is the same operation with `out` and `x` in swapped roles).
#[allow(clippy::too_many_arguments)]
fn conv_row_accumulate(
    out_plane: &mut [f64],
    x_plane: &[f64],
    wv: f64,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
    ky: usize,
    kx: usize,
) {
    if wv == 0.0 {
        return;
    }
    let (lo, hi) = match tap_range(ow, w, stride, pad, kx) {
        Some(r) => r,
        None => return,
    };
    for oy in 0..oh {
        let iy = (oy * stride + ky) as isize - pad as isize;
        if iy < 0 || iy >= h as isize {
            continue;
        }
        let xrow = &x_plane[iy as usize * w..(iy as usize + 1) * w];
        let orow = &mut out_plane[oy * ow..(oy + 1) * ow];
        if stride == 1 {
            let off = kx as isize - pad as isize;
            let xs = (lo as isize + off) as usize;
            let len = hi - lo + 1;
            for (o, xv) in orow[lo..lo + len].iter_mut().zip(&xrow[xs..xs + len]) {
                *o += wv * xv;
            }
        } else {
            for ox in lo..=hi {
                orow[ox] += wv * xrow[ox * stride + kx - pad];
            }
        }
    }
}

/// Valid output x-range `[lo, hi]` for a kernel tap at offset `kx`.
fn tap_range(ow: usize, w: usize, stride: usize, pad: usize, kx: usize) -> Option<(usize, usize)> {
    let lo = if kx >= pad {
        0
    } else {
        (pad - kx).div_ceil(stride)
    };
    let hi_num = w as isize - 1 + pad as isize - kx as isize;
    if hi_num < 0 {
        return None;
    }
    let hi = ((hi_num as usize) / stride).min(ow - 1);
    if lo > hi {
        return None;
    }
    Some((lo, hi))
}

fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    g: &Tensor,
    stride: usize,
    pad: usize,
) -> (Tensor, Tensor, Tensor) {
    let (cin, h, wd) = dims3(x);
    let ws = w.shape();
    let (cout, k) = (ws[0], ws[2]);
    let (_, oh, ow) = dims3(g);

    let mut dx = Tensor::zeros(x.shape());
    let mut dw = Tensor::zeros(w.shape());
    let mut db = Tensor::zeros(&[cout]);

    for co in 0..cout {
        let g_plane = &g.data()[co * oh * ow..(co + 1) * oh * ow];
        db.data_mut()[co] = g_plane.iter().sum();
        for ci in 0..cin {
            let x_plane = &x.data()[ci * h * wd..(ci + 1) * h * wd];
            for ky in 0..k {
                for kx in 0..k {
                    let widx = ((co * cin + ci) * k + ky) * k + kx;
                    let (lo, hi) = match tap_range(ow, wd, stride, pad, kx) {
                        Some(r) => r,
                        None => continue,
                    };
                    let mut wacc = 0.0;
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let xrow = &x_plane[iy as usize * wd..(iy as usize + 1) * wd];
                        let grow = &g_plane[oy * ow..(oy + 1) * ow];
                        if stride == 1 {
                            let off = kx as isize - pad as isize;
                            let xs = (lo as isize + off) as usize;
                            let len = hi - lo + 1;
                            for (gv, xv) in grow[lo..lo + len].iter().zip(&xrow[xs..xs + len]) {
                                wacc += gv * xv;
                            }
                        } else {
                            for ox in lo..=hi {
                                wacc += grow[ox] * xrow[ox * stride + kx - pad];
                            }
                        }
                    }
                    dw.data_mut()[widx] = wacc;
                }
            }
        }
    }

    // dx: scatter each output gradient through the kernel.
    for co in 0..cout {
        let g_plane = &g.data()[co * oh * ow..(co + 1) * oh * ow];
        for ci in 0..cin {
            let dx_plane = &mut dx.data_mut()[ci * h * wd..(ci + 1) * h * wd];
            for ky in 0..k {
                for kx in 0..k {
                    let wv = w.data()[((co * cin + ci) * k + ky) * k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (lo, hi) = match tap_range(ow, wd, stride, pad, kx) {
                        Some(r) => r,
                        None => continue,
                    };
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dxrow =
                            &mut dx_plane[iy as usize * wd..(iy as usize + 1) * wd];
                        let grow = &g_plane[oy * ow..(oy + 1) * ow];
                        if stride == 1 {
                            let off = kx as isize - pad as isize;
                            let xs = (lo as isize + off) as usize;
                            let len = hi - lo + 1;
                            for (xv, gv) in
                                dxrow[xs..xs + len].iter_mut().zip(&grow[lo..lo + len])
                            {
                                *xv += wv * gv;
                            }
                        } else {
                            for ox in lo..=hi {
                                dxrow[ox * stride + kx - pad] += wv * grow[ox];
                            }
                        }
                    }
                }
            }
        }
    }

    (dx, dw, db)
}

fn convt2_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let (cin, h, wd) = dims3(x);
    let ws = w.shape();
    assert_eq!(ws.len(), 4);
    assert_eq!(ws[0], cin, "conv_transpose2: input channel mismatch");
    let cout = ws[1];
    assert_eq!((ws[2], ws[3]), (2, 2), "conv_transpose2: kernel must be 2x2");
    assert_eq!(b.numel(), cout);
    let (oh, ow) = (h * 2, wd * 2);
    let mut out = Tensor::zeros(&[cout, oh, ow]);
    for co in 0..cout {
        out.data_mut()[co * oh * ow..(co + 1) * oh * ow].fill(b.data()[co]);
    }
    for ci in 0..cin {
        let x_plane = &x.data()[ci * h * wd..(ci + 1) * h * wd];
        for co in 0..cout {
            for ky in 0..2 {
                for kx in 0..2 {
                    let wv = w.data()[((ci * cout + co) * 2 + ky) * 2 + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    for iy in 0..h {
                        let orow_base = (co * oh + iy * 2 + ky) * ow;
                        let xrow = &x_plane[iy * wd..(iy + 1) * wd];
                        for ix in 0..wd {
                            out.data_mut()[orow_base + ix * 2 + kx] += wv * xrow[ix];
                        }
                    }
                }
            }
        }
    }
    out
}

fn convt2_backward(x: &Tensor, w: &Tensor, g: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (cin, h, wd) = dims3(x);
    let cout = w.shape()[1];
    let (_, oh, ow) = dims3(g);
    let mut dx = Tensor::zeros(x.shape());
    let mut dw = Tensor::zeros(w.shape());
    let mut db = Tensor::zeros(&[cout]);
    for co in 0..cout {
        db.data_mut()[co] = g.data()[co * oh * ow..(co + 1) * oh * ow].iter().sum();
    }
    for ci in 0..cin {
        let x_plane = &x.data()[ci * h * wd..(ci + 1) * h * wd];
        let dx_plane = &mut dx.data_mut()[ci * h * wd..(ci + 1) * h * wd];
        for co in 0..cout {
            for ky in 0..2 {
                for kx in 0..2 {
                    let widx = ((ci * cout + co) * 2 + ky) * 2 + kx;
                    let wv = w.data()[widx];
                    let mut wacc = 0.0;
                    for iy in 0..h {
                        let grow_base = (co * oh + iy * 2 + ky) * ow;
                        for ix in 0..wd {
                            let gv = g.data()[grow_base + ix * 2 + kx];
                            wacc += gv * x_plane[iy * wd + ix];
                            dx_plane[iy * wd + ix] += wv * gv;
                        }
                    }
                    dw.data_mut()[widx] = wacc;
                }
            }
        }
    }
    (dx, dw, db)
}
