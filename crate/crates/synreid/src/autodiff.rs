//! Tape-based reverse-mode automatic differentiation over `ndarray` f64 tensors.
//!
//! A [`Tape`] records every forward operation as a node; [`Tape::backward`]
//! replays the recording in reverse and accumulates gradients for every node.
//! The op set is exactly what the training losses need: convolution, pooling,
//! linear layers, dropout, the gradient reversal layer, grouped row means,
//! the classification/regression/metric losses, and scalar arithmetic for
//! loss weighting. All arithmetic is f64 and single-threaded, so identical
//! inputs produce bitwise-identical outputs.

use ndarray::{Array1, Array2, Array4, ArrayD, ArrayView2, ArrayView4, Axis, IxDyn};

/// Handle to a node on a [`Tape`].
#[derive(Copy, Clone, PartialEq, Eq, Debug)]
pub struct TensorId(usize);

enum Op {
    Leaf,
    /// 2-D convolution, stride 1, zero padding `pad`. x: (N,Cin,H,W), w: (Cout,Cin,k,k), b: (Cout).
    Conv2d { x: TensorId, w: TensorId, b: TensorId, pad: usize },
    Relu { x: TensorId },
    /// 2x2 average pooling with stride 2. Spatial dims must be even.
    AvgPool2 { x: TensorId },
    /// (N,C,H,W) -> (N,C) spatial mean.
    GlobalAvgPool { x: TensorId },
    /// x: (N,in), w: (in,out), b: (out) -> (N,out).
    Linear { x: TensorId, w: TensorId, b: TensorId },
    /// Multiply by a fixed mask (entries 0 or 1/(1-p)).
    Dropout { x: TensorId, mask: ArrayD<f64> },
    /// Identity forward; backward multiplies incoming gradients by -lambda.
    Grl { x: TensorId, lambda: f64 },
    /// Row means over index groups: x (N,d) -> (G,d), row g = mean of x[groups[g]].
    GroupMean { x: TensorId, groups: Vec<Vec<usize>> },
    /// Row gather: x (N,d) -> (|rows|,d).
    GatherRows { x: TensorId, rows: Vec<usize> },
    /// Mean over rows of softmax cross-entropy against integer classes. Scalar output.
    CeMean { logits: TensorId, classes: Vec<usize> },
    /// Mean over rows of cross-entropy against fixed soft target distributions. Scalar output.
    SoftCeMean { logits: TensorId, targets: Array2<f64> },
    /// Mean squared error over every entry against a fixed target. Scalar output.
    MseMean { pred: TensorId, target: ArrayD<f64> },
    /// y[n][m] = -scale * ||x_n - centers_m||^2. x (N,d), centers (M,d) fixed -> (N,M).
    NegSqDist { x: TensorId, centers: Array2<f64>, scale: f64 },
    /// Mean over (anchor,pos,neg) row triples of [d(a,p) - d(a,n) + margin]_+ . Scalar output.
    TripletHinge { x: TensorId, triplets: Vec<(usize, usize, usize)>, margin: f64 },
    /// Sum over rows of Euclidean distance to the assigned fixed center. Scalar output.
    DistToAssignedSum { x: TensorId, centers: Array2<f64>, assign: Vec<usize> },
    /// Sum of every entry. Scalar output.
    Sum { x: TensorId },
    /// Scalar affine combination: sum of coef * scalar-node + bias.
    AffineScalars { terms: Vec<(TensorId, f64)> },
    /// Elementwise exp.
    Exp { x: TensorId },
    /// Elementwise logistic sigmoid.
    Sigmoid { x: TensorId },
    /// Elementwise product of two same-shape tensors.
    Mul { a: TensorId, b: TensorId },
}

struct Node {
    value: ArrayD<f64>,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients for every node of a tape, produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<ArrayD<f64>>,
}

impl Gradients {
    pub fn get(&self, id: TensorId) -> &ArrayD<f64> {
        &self.grads[id.0]
    }
}

fn scalar(v: f64) -> ArrayD<f64> {
    ArrayD::from_elem(IxDyn(&[]), v)
}

fn as2(a: &ArrayD<f64>) -> ArrayView2<'_, f64> {
    a.view().into_dimensionality().expect("expected rank-2 tensor")
}

fn as4(a: &ArrayD<f64>) -> ArrayView4<'_, f64> {
    a.view().into_dimensionality().expect("expected rank-4 tensor")
}

/// Row-wise log-softmax with the max-shift trick.
fn log_softmax_rows(logits: &ArrayView2<f64>) -> Array2<f64> {
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|v| (v - m).exp()).sum::<f64>().ln() + m;
        row.mapv_inplace(|v| v - lse);
    }
    out
}

/// im2col for one sample: (C,H,W) -> (C*k*k, Ho*Wo), stride 1, zero padding.
/// Flat-slice addressing keeps this off the step-time critical path.
fn im2col(x: &ndarray::ArrayView3<f64>, k: usize, pad: usize) -> Array2<f64> {
    let (c, h, w) = x.dim();
    let ho = h + 2 * pad - k + 1;
    let wo = w + 2 * pad - k + 1;
    let xs = x.as_slice().expect("contiguous conv input");
    let mut cols = Array2::<f64>::zeros((c * k * k, ho * wo));
    let cs = cols.as_slice_mut().unwrap();
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                for i in 0..ho {
                    let src_i = i + ki;
                    if src_i < pad || src_i >= h + pad {
                        continue;
                    }
                    let x_row = ci * h * w + (src_i - pad) * w;
                    let c_row = row * ho * wo + i * wo;
                    let j_lo = pad.saturating_sub(kj);
                    let j_hi = (w + pad - kj).min(wo);
                    for j in j_lo..j_hi {
                        cs[c_row + j] = xs[x_row + j + kj - pad];
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add inverse of [`im2col`].
fn col2im_add(cols: &ArrayView2<f64>, c: usize, h: usize, w: usize, k: usize, pad: usize, out: &mut ndarray::ArrayViewMut3<f64>) {
    let ho = h + 2 * pad - k + 1;
    let wo = w + 2 * pad - k + 1;
    let cs = cols.as_slice().expect("contiguous col matrix");
    let os = out.as_slice_mut().expect("contiguous conv gradient");
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                for i in 0..ho {
                    let src_i = i + ki;
                    if src_i < pad || src_i >= h + pad {
                        continue;
                    }
                    let o_row = ci * h * w + (src_i - pad) * w;
                    let c_row = row * ho * wo + i * wo;
                    let j_lo = pad.saturating_sub(kj);
                    let j_hi = (w + pad - kj).min(wo);
                    for j in j_lo..j_hi {
                        os[o_row + j + kj - pad] += cs[c_row + j];
                    }
                }
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, value: ArrayD<f64>, op: Op) -> TensorId {
        self.nodes.push(Node { value, op });
        TensorId(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: TensorId) -> &ArrayD<f64> {
        &self.nodes[id.0].value
    }

    /// Value of a rank-0 node.
    pub fn scalar_value(&self, id: TensorId) -> f64 {
        let v = &self.nodes[id.0].value;
        assert_eq!(v.ndim(), 0, "node is not a scalar");
        *v.first().unwrap()
    }

    pub fn leaf(&mut self, value: ArrayD<f64>) -> TensorId {
        self.push(value, Op::Leaf)
    }

    pub fn leaf_scalar(&mut self, v: f64) -> TensorId {
        self.push(scalar(v), Op::Leaf)
    }

    pub fn conv2d(&mut self, x: TensorId, w: TensorId, b: TensorId, pad: usize) -> TensorId {
        let (xv, wv, bv) = (as4(self.value(x)), as4(self.value(w)), self.value(b).to_owned());
        let (n, cin, h, wd) = xv.dim();
        let (cout, cin_w, k, k2) = wv.dim();
        assert_eq!(cin, cin_w, "conv2d channel mismatch");
        assert_eq!(k, k2, "conv2d kernel must be square");
        assert_eq!(bv.len(), cout, "conv2d bias length");
        let ho = h + 2 * pad - k + 1;
        let wo = wd + 2 * pad - k + 1;
        let wflat = wv.to_shape((cout, cin * k * k)).unwrap().to_owned();
        let mut y = Array4::<f64>::zeros((n, cout, ho, wo));
        {
            let ys = y.as_slice_mut().unwrap();
            let plane = ho * wo;
            for ni in 0..n {
                let cols = im2col(&xv.index_axis(Axis(0), ni), k, pad);
                let prod = wflat.dot(&cols); // (cout, ho*wo)
                let ps = prod.as_slice().unwrap();
                let base = ni * cout * plane;
                for co in 0..cout {
                    let bias = bv[co];
                    let dst = &mut ys[base + co * plane..base + (co + 1) * plane];
                    let src = &ps[co * plane..(co + 1) * plane];
                    for (d, s) in dst.iter_mut().zip(src.iter()) {
                        *d = s + bias;
                    }
                }
            }
        }
        self.push(y.into_dyn(), Op::Conv2d { x, w, b, pad })
    }

    pub fn relu(&mut self, x: TensorId) -> TensorId {
        let y = self.value(x).mapv(|v| v.max(0.0));
        self.push(y, Op::Relu { x })
    }

    pub fn avg_pool2(&mut self, x: TensorId) -> TensorId {
        let xv = as4(self.value(x));
        let (n, c, h, w) = xv.dim();
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even spatial dims");
        let xs = xv.as_slice().expect("contiguous pool input");
        let mut y = Array4::<f64>::zeros((n, c, h / 2, w / 2));
        {
            let ys = y.as_slice_mut().unwrap();
            let (ho, wo) = (h / 2, w / 2);
            for p in 0..n * c {
                let src = &xs[p * h * w..(p + 1) * h * w];
                let dst = &mut ys[p * ho * wo..(p + 1) * ho * wo];
                for i in 0..ho {
                    let r0 = 2 * i * w;
                    let r1 = r0 + w;
                    for j in 0..wo {
                        dst[i * wo + j] =
                            0.25 * (src[r0 + 2 * j] + src[r0 + 2 * j + 1] + src[r1 + 2 * j] + src[r1 + 2 * j + 1]);
                    }
                }
            }
        }
        self.push(y.into_dyn(), Op::AvgPool2 { x })
    }

    pub fn global_avg_pool(&mut self, x: TensorId) -> TensorId {
        let xv = as4(self.value(x));
        let (n, c, h, w) = xv.dim();
        let xs = xv.as_slice().expect("contiguous pool input");
        let mut y = Array2::<f64>::zeros((n, c));
        {
            let ys = y.as_slice_mut().unwrap();
            let inv = 1.0 / (h * w) as f64;
            for (p, out) in ys.iter_mut().enumerate() {
                *out = xs[p * h * w..(p + 1) * h * w].iter().sum::<f64>() * inv;
            }
        }
        self.push(y.into_dyn(), Op::GlobalAvgPool { x })
    }

    pub fn linear(&mut self, x: TensorId, w: TensorId, b: TensorId) -> TensorId {
        let xv = as2(self.value(x)).to_owned();
        let wv = as2(self.value(w)).to_owned();
        let bv = self.value(b).to_owned();
        assert_eq!(xv.ncols(), wv.nrows(), "linear dims");
        assert_eq!(bv.len(), wv.ncols(), "linear bias");
        let mut y = xv.dot(&wv);
        let b1: Array1<f64> = bv.into_dimensionality().unwrap();
        for mut row in y.rows_mut() {
            row += &b1;
        }
        self.push(y.into_dyn(), Op::Linear { x, w, b })
    }

    pub fn dropout(&mut self, x: TensorId, mask: ArrayD<f64>) -> TensorId {
        assert_eq!(mask.shape(), self.value(x).shape(), "dropout mask shape");
        let y = self.value(x) * &mask;
        self.push(y, Op::Dropout { x, mask })
    }

    /// Gradient reversal: identity forward, backward scales gradients by -lambda.
    pub fn grl(&mut self, x: TensorId, lambda: f64) -> TensorId {
        let y = self.value(x).clone();
        self.push(y, Op::Grl { x, lambda })
    }

    pub fn group_mean(&mut self, x: TensorId, groups: Vec<Vec<usize>>) -> TensorId {
        let xv = as2(self.value(x));
        let d = xv.ncols();
        let mut y = Array2::<f64>::zeros((groups.len(), d));
        for (g, members) in groups.iter().enumerate() {
            assert!(!members.is_empty(), "group_mean: empty group");
            for &i in members {
                let row = xv.row(i);
                for j in 0..d {
                    y[[g, j]] += row[j];
                }
            }
            let inv = 1.0 / members.len() as f64;
            for j in 0..d {
                y[[g, j]] *= inv;
            }
        }
        self.push(y.into_dyn(), Op::GroupMean { x, groups })
    }

    pub fn gather_rows(&mut self, x: TensorId, rows: Vec<usize>) -> TensorId {
        let xv = as2(self.value(x));
        let d = xv.ncols();
        let mut y = Array2::<f64>::zeros((rows.len(), d));
        for (k, &i) in rows.iter().enumerate() {
            y.row_mut(k).assign(&xv.row(i));
        }
        self.push(y.into_dyn(), Op::GatherRows { x, rows })
    }

    pub fn ce_mean(&mut self, logits: TensorId, classes: Vec<usize>) -> TensorId {
        let lv = as2(self.value(logits));
        assert_eq!(lv.nrows(), classes.len(), "ce_mean row count");
        let logp = log_softmax_rows(&lv);
        let mut total = 0.0;
        for (n, &c) in classes.iter().enumerate() {
            assert!(c < lv.ncols(), "ce_mean class out of range");
            total -= logp[[n, c]];
        }
        let v = total / classes.len() as f64;
        self.push(scalar(v), Op::CeMean { logits, classes })
    }

    pub fn soft_ce_mean(&mut self, logits: TensorId, targets: Array2<f64>) -> TensorId {
        let lv = as2(self.value(logits));
        assert_eq!(lv.dim(), targets.dim(), "soft_ce_mean shape");
        let logp = log_softmax_rows(&lv);
        let n = lv.nrows() as f64;
        let v = -(&targets * &logp).sum() / n;
        self.push(scalar(v), Op::SoftCeMean { logits, targets })
    }

    pub fn mse_mean(&mut self, pred: TensorId, target: ArrayD<f64>) -> TensorId {
        assert_eq!(self.value(pred).shape(), target.shape(), "mse_mean shape");
        let diff = self.value(pred) - &target;
        let v = diff.mapv(|d| d * d).sum() / target.len() as f64;
        self.push(scalar(v), Op::MseMean { pred, target })
    }

    pub fn neg_sqdist(&mut self, x: TensorId, centers: Array2<f64>, scale: f64) -> TensorId {
        let xv = as2(self.value(x));
        assert_eq!(xv.ncols(), centers.ncols(), "neg_sqdist dims");
        let (n, m) = (xv.nrows(), centers.nrows());
        let mut y = Array2::<f64>::zeros((n, m));
        for i in 0..n {
            for j in 0..m {
                let mut s = 0.0;
                for d in 0..xv.ncols() {
                    let t = xv[[i, d]] - centers[[j, d]];
                    s += t * t;
                }
                y[[i, j]] = -scale * s;
            }
        }
        self.push(y.into_dyn(), Op::NegSqDist { x, centers, scale })
    }

    pub fn triplet_hinge_mean(
        &mut self,
        x: TensorId,
        triplets: Vec<(usize, usize, usize)>,
        margin: f64,
    ) -> TensorId {
        assert!(!triplets.is_empty(), "triplet_hinge_mean: no triplets");
        let xv = as2(self.value(x));
        let mut total = 0.0;
        for &(a, p, n) in &triplets {
            let dap = row_dist(&xv, a, p);
            let dan = row_dist(&xv, a, n);
            total += (dap - dan + margin).max(0.0);
        }
        let v = total / triplets.len() as f64;
        self.push(scalar(v), Op::TripletHinge { x, triplets, margin })
    }

    pub fn dist_to_assigned_sum(
        &mut self,
        x: TensorId,
        centers: Array2<f64>,
        assign: Vec<usize>,
    ) -> TensorId {
        let xv = as2(self.value(x));
        assert_eq!(xv.nrows(), assign.len(), "dist_to_assigned_sum rows");
        let mut total = 0.0;
        for (i, &a) in assign.iter().enumerate() {
            let mut s = 0.0;
            for d in 0..xv.ncols() {
                let t = xv[[i, d]] - centers[[a, d]];
                s += t * t;
            }
            total += s.sqrt();
        }
        self.push(scalar(total), Op::DistToAssignedSum { x, centers, assign })
    }

    pub fn sum(&mut self, x: TensorId) -> TensorId {
        let v = self.value(x).sum();
        self.push(scalar(v), Op::Sum { x })
    }

    /// sum_i coef_i * scalar_i + bias, all operands rank-0.
    pub fn affine_scalars(&mut self, terms: Vec<(TensorId, f64)>, bias: f64) -> TensorId {
        let mut v = bias;
        for &(id, coef) in &terms {
            v += coef * self.scalar_value(id);
        }
        self.push(scalar(v), Op::AffineScalars { terms })
    }

    pub fn exp(&mut self, x: TensorId) -> TensorId {
        let y = self.value(x).mapv(f64::exp);
        self.push(y, Op::Exp { x })
    }

    pub fn sigmoid(&mut self, x: TensorId) -> TensorId {
        let y = self.value(x).mapv(|v| 1.0 / (1.0 + (-v).exp()));
        self.push(y, Op::Sigmoid { x })
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "mul shape");
        let y = self.value(a) * self.value(b);
        self.push(y, Op::Mul { a, b })
    }

    /// Reverse pass from a rank-0 loss node. Returns gradients for every node.
    pub fn backward(&self, loss: TensorId) -> Gradients {
        assert_eq!(self.value(loss).ndim(), 0, "backward needs a scalar loss");
        let mut grads: Vec<ArrayD<f64>> = self
            .nodes
            .iter()
            .map(|n| ArrayD::zeros(n.value.raw_dim()))
            .collect();
        grads[loss.0] = scalar(1.0);

        for idx in (0..=loss.0).rev() {
            if grads[idx].iter().all(|&g| g == 0.0) {
                continue;
            }
            let g_out = grads[idx].clone();
            match &self.nodes[idx].op {
                Op::Leaf => {}
                Op::Conv2d { x, w, b, pad } => {
                    let xv = as4(self.value(*x));
                    let wv = as4(self.value(*w));
                    let (n, cin, h, wd) = xv.dim();
                    let (cout, _, k, _) = wv.dim();
                    let ho = h + 2 * pad - k + 1;
                    let wo = wd + 2 * pad - k + 1;
                    let g4 = as4(&g_out).to_owned();
                    let wflat = wv.to_shape((cout, cin * k * k)).unwrap().to_owned();
                    let mut dw_flat = Array2::<f64>::zeros((cout, cin * k * k));
                    {
                        let mut db = grads[b.0].view_mut().into_dimensionality::<ndarray::Ix1>().unwrap();
                        let gs = g4.as_slice().unwrap();
                        let plane = ho * wo;
                        for ni in 0..n {
                            for co in 0..cout {
                                let base = (ni * cout + co) * plane;
                                db[co] += gs[base..base + plane].iter().sum::<f64>();
                            }
                        }
                    }
                    let mut dx = Array4::<f64>::zeros((n, cin, h, wd));
                    for ni in 0..n {
                        let cols = im2col(&xv.index_axis(Axis(0), ni), k, *pad);
                        let gflat = g4
                            .index_axis(Axis(0), ni)
                            .to_shape((cout, ho * wo))
                            .unwrap()
                            .to_owned();
                        dw_flat = dw_flat + gflat.dot(&cols.t());
                        let dcols = wflat.t().dot(&gflat); // (cin*k*k, ho*wo)
                        col2im_add(&dcols.view(), cin, h, wd, k, *pad, &mut dx.index_axis_mut(Axis(0), ni));
                    }
                    let dw = dw_flat.into_shape_with_order((cout, cin, k, k)).unwrap();
                    grads[w.0] += &dw.into_dyn();
                    grads[x.0] += &dx.into_dyn();
                }
                Op::Relu { x } => {
                    let mask = self.value(*x).mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
                    grads[x.0] += &(&g_out * &mask);
                }
                Op::AvgPool2 { x } => {
                    let (n, c, h, w) = as4(self.value(*x)).dim();
                    let gs = g_out.as_slice().expect("contiguous pool gradient");
                    let mut dx = Array4::<f64>::zeros((n, c, h, w));
                    {
                        let ds = dx.as_slice_mut().unwrap();
                        let (ho, wo) = (h / 2, w / 2);
                        for p in 0..n * c {
                            let src = &gs[p * ho * wo..(p + 1) * ho * wo];
                            let dst = &mut ds[p * h * w..(p + 1) * h * w];
                            for i in 0..ho {
                                let r0 = 2 * i * w;
                                let r1 = r0 + w;
                                for j in 0..wo {
                                    let g = 0.25 * src[i * wo + j];
                                    dst[r0 + 2 * j] += g;
                                    dst[r0 + 2 * j + 1] += g;
                                    dst[r1 + 2 * j] += g;
                                    dst[r1 + 2 * j + 1] += g;
                                }
                            }
                        }
                    }
                    grads[x.0] += &dx.into_dyn();
                }
                Op::GlobalAvgPool { x } => {
                    let (n, c, h, w) = as4(self.value(*x)).dim();
                    let gs = g_out.as_slice().expect("contiguous pool gradient");
                    let inv = 1.0 / (h * w) as f64;
                    let mut dx = Array4::<f64>::zeros((n, c, h, w));
                    {
                        let ds = dx.as_slice_mut().unwrap();
                        for (p, &g) in gs.iter().enumerate() {
                            let gv = g * inv;
                            for v in &mut ds[p * h * w..(p + 1) * h * w] {
                                *v += gv;
                            }
                        }
                    }
                    grads[x.0] += &dx.into_dyn();
                }
                Op::Linear { x, w, b } => {
                    let xv = as2(self.value(*x)).to_owned();
                    let wv = as2(self.value(*w)).to_owned();
                    let g2 = as2(&g_out).to_owned();
                    grads[x.0] += &g2.dot(&wv.t()).into_dyn();
                    grads[w.0] += &xv.t().dot(&g2).into_dyn();
                    grads[b.0] += &g2.sum_axis(Axis(0)).into_dyn();
                }
                Op::Dropout { x, mask } => {
                    grads[x.0] += &(&g_out * mask);
                }
                Op::Grl { x, lambda } => {
                    grads[x.0] += &g_out.mapv(|g| -lambda * g);
                }
                Op::GroupMean { x, groups } => {
                    let d = as2(self.value(*x)).ncols();
                    let g2 = as2(&g_out).to_owned();
                    let mut dx = as2(&grads[x.0]).to_owned();
                    for (g, members) in groups.iter().enumerate() {
                        let inv = 1.0 / members.len() as f64;
                        for &i in members {
                            for j in 0..d {
                                dx[[i, j]] += g2[[g, j]] * inv;
                            }
                        }
                    }
                    grads[x.0] = dx.into_dyn();
                }
                Op::GatherRows { x, rows } => {
                    let g2 = as2(&g_out).to_owned();
                    let mut dx = as2(&grads[x.0]).to_owned();
                    for (k, &i) in rows.iter().enumerate() {
                        let mut dr = dx.row_mut(i);
                        dr += &g2.row(k);
                    }
                    grads[x.0] = dx.into_dyn();
                }
                Op::CeMean { logits, classes } => {
                    let lv = as2(self.value(*logits));
                    let logp = log_softmax_rows(&lv);
                    let g = *g_out.first().unwrap() / classes.len() as f64;
                    let mut dl = logp.mapv(f64::exp);
                    for (n, &c) in classes.iter().enumerate() {
                        dl[[n, c]] -= 1.0;
                    }
                    grads[logits.0] += &(dl.mapv(|v| v * g)).into_dyn();
                }
                Op::SoftCeMean { logits, targets } => {
                    let lv = as2(self.value(*logits));
                    let logp = log_softmax_rows(&lv);
                    let g = *g_out.first().unwrap() / lv.nrows() as f64;
                    let dl = (logp.mapv(f64::exp) - targets).mapv(|v| v * g);
                    grads[logits.0] += &dl.into_dyn();
                }
                Op::MseMean { pred, target } => {
                    let g = *g_out.first().unwrap() * 2.0 / target.len() as f64;
                    let d = (self.value(*pred) - target).mapv(|v| v * g);
                    grads[pred.0] += &d;
                }
                Op::NegSqDist { x, centers, scale } => {
                    let xv = as2(self.value(*x)).to_owned();
                    let g2 = as2(&g_out).to_owned();
                    let mut dx = as2(&grads[x.0]).to_owned();
                    for i in 0..xv.nrows() {
                        for j in 0..centers.nrows() {
                            let g = g2[[i, j]];
                            if g == 0.0 {
                                continue;
                            }
                            for d in 0..xv.ncols() {
                                dx[[i, d]] += g * (-2.0 * scale) * (xv[[i, d]] - centers[[j, d]]);
                            }
                        }
                    }
                    grads[x.0] = dx.into_dyn();
                }
                Op::TripletHinge { x, triplets, margin } => {
                    let xv = as2(self.value(*x)).to_owned();
                    let g = *g_out.first().unwrap() / triplets.len() as f64;
                    let mut dx = as2(&grads[x.0]).to_owned();
                    for &(a, p, n) in triplets {
                        let dap = row_dist(&xv.view(), a, p);
                        let dan = row_dist(&xv.view(), a, n);
                        if dap - dan + margin <= 0.0 {
                            continue;
                        }
                        // d/dx of Euclidean distance; zero sub-gradient at coincident rows.
                        if dap > 1e-12 {
                            for d in 0..xv.ncols() {
                                let u = (xv[[a, d]] - xv[[p, d]]) / dap;
                                dx[[a, d]] += g * u;
                                dx[[p, d]] -= g * u;
                            }
                        }
                        if dan > 1e-12 {
                            for d in 0..xv.ncols() {
                                let u = (xv[[a, d]] - xv[[n, d]]) / dan;
                                dx[[a, d]] -= g * u;
                                dx[[n, d]] += g * u;
                            }
                        }
                    }
                    grads[x.0] = dx.into_dyn();
                }
                Op::DistToAssignedSum { x, centers, assign } => {
                    let xv = as2(self.value(*x)).to_owned();
                    let g = *g_out.first().unwrap();
                    let mut dx = as2(&grads[x.0]).to_owned();
                    for (i, &a) in assign.iter().enumerate() {
                        let mut s = 0.0;
                        for d in 0..xv.ncols() {
                            let t = xv[[i, d]] - centers[[a, d]];
                            s += t * t;
                        }
                        let dist = s.sqrt();
                        if dist <= 1e-12 {
                            continue;
                        }
                        for d in 0..xv.ncols() {
                            dx[[i, d]] += g * (xv[[i, d]] - centers[[a, d]]) / dist;
                        }
                    }
                    grads[x.0] = dx.into_dyn();
                }
                Op::Sum { x } => {
                    let g = *g_out.first().unwrap();
                    grads[x.0] += &ArrayD::from_elem(self.value(*x).raw_dim(), g);
                }
                Op::AffineScalars { terms } => {
                    let g = *g_out.first().unwrap();
                    for &(id, coef) in terms {
                        let cur = *grads[id.0].first().unwrap();
                        grads[id.0] = scalar(cur + coef * g);
                    }
                }
                Op::Exp { x } => {
                    grads[x.0] += &(&g_out * &self.nodes[idx].value);
                }
                Op::Sigmoid { x } => {
                    let y = &self.nodes[idx].value;
                    grads[x.0] += &(&g_out * &y.mapv(|v| v * (1.0 - v)));
                }
                Op::Mul { a, b } => {
                    let av = self.value(*a).clone();
                    let bv = self.value(*b).clone();
                    grads[a.0] += &(&g_out * &bv);
                    grads[b.0] += &(&g_out * &av);
                }
            }
        }
        Gradients { grads }
    }
}

fn row_dist(x: &ArrayView2<f64>, i: usize, j: usize) -> f64 {
    let mut s = 0.0;
    for d in 0..x.ncols() {
        let t = x[[i, d]] - x[[j, d]];
        s += t * t;
    }
    s.sqrt()
}

/// Central-difference gradient of `f` at `x`: (f(x+eps e_i) - f(x-eps e_i)) / (2 eps).
///
/// Independent oracle used by the gradient tests; evaluates `f` only.
pub fn central_diff_gradient(f: impl Fn(&ArrayD<f64>) -> f64, x: &ArrayD<f64>, eps: f64) -> ArrayD<f64> {
    let mut grad = ArrayD::zeros(x.raw_dim());
    let mut probe = x.clone();
    let flat_len = x.len();
    for i in 0..flat_len {
        let orig = probe.as_slice_mut().unwrap()[i];
        probe.as_slice_mut().unwrap()[i] = orig + eps;
        let fp = f(&probe);
        probe.as_slice_mut().unwrap()[i] = orig - eps;
        let fm = f(&probe);
        probe.as_slice_mut().unwrap()[i] = orig;
        grad.as_slice_mut().unwrap()[i] = (fp - fm) / (2.0 * eps);
    }
    grad
}

/// Relative error between two gradient tensors: ||a-b|| / max(||a||, ||b||, floor).
pub fn rel_err(a: &ArrayD<f64>, b: &ArrayD<f64>) -> f64 {
    let diff = (a - b).mapv(|v| v * v).sum().sqrt();
    let na = a.mapv(|v| v * v).sum().sqrt();
    let nb = b.mapv(|v| v * v).sum().sqrt();
    diff / na.max(nb).max(1e-12)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr2, Array};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> ArrayD<f64> {
        Array::from_shape_fn(IxDyn(shape), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn linear_matches_manual() {
        let mut t = Tape::new();
        let x = t.leaf(arr2(&[[1.0, 2.0]]).into_dyn());
        let w = t.leaf(arr2(&[[1.0, 0.0, -1.0], [0.5, 2.0, 0.0]]).into_dyn());
        let b = t.leaf(ndarray::arr1(&[0.1, -0.2, 0.3]).into_dyn());
        let y = t.linear(x, w, b);
        let yv = as2(t.value(y));
        assert!((yv[[0, 0]] - 2.1).abs() < 1e-12);
        assert!((yv[[0, 1]] - 3.8).abs() < 1e-12);
        assert!((yv[[0, 2]] - (-0.7)).abs() < 1e-12);
    }

    #[test]
    fn softmax_ce_uniform_logits_is_ln_c() {
        let mut t = Tape::new();
        let logits = t.leaf(ArrayD::zeros(IxDyn(&[3, 4])));
        let l = t.ce_mean(logits, vec![0, 1, 2]);
        assert!((t.scalar_value(l) - 4.0_f64.ln()).abs() < 1e-12);
    }

    // Every differentiable op composed into one scalar, checked against
    // central differences on each leaf.
    #[test]
    fn full_graph_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let x0 = randn(&mut rng, &[2, 3, 4, 4]);
        let w0 = randn(&mut rng, &[2, 3, 3, 3]);
        let b0 = randn(&mut rng, &[2]);
        let lw0 = randn(&mut rng, &[2, 3]);
        let lb0 = randn(&mut rng, &[3]);
        let centers = arr2(&[[0.3, -0.2, 0.5], [-0.4, 0.1, 0.0]]);
        let mask = randn(&mut rng, &[4, 3]).mapv(|v| if v > 0.0 { 2.0 } else { 0.0 });
        let targets = arr2(&[[0.2, 0.8], [0.6, 0.4]]);
        let mse_target = randn(&mut rng, &[4, 3]);

        let build = |x: &ArrayD<f64>,
                     w: &ArrayD<f64>,
                     b: &ArrayD<f64>,
                     lw: &ArrayD<f64>,
                     lb: &ArrayD<f64>|
         -> (Tape, TensorId, Vec<TensorId>) {
            let mut t = Tape::new();
            let xi = t.leaf(x.clone());
            let wi = t.leaf(w.clone());
            let bi = t.leaf(b.clone());
            let lwi = t.leaf(lw.clone());
            let lbi = t.leaf(lb.clone());
            let c = t.conv2d(xi, wi, bi, 1);
            let r = t.relu(c);
            let p = t.avg_pool2(r);
            let gp = t.global_avg_pool(p); // (2,2)
            // tile rows into 4 via gather, project to 3 dims
            let gath = t.gather_rows(gp, vec![0, 1, 0, 1]);
            let gm = t.group_mean(gath, vec![vec![0], vec![1], vec![2, 3], vec![0, 1]]);
            let lin = t.linear(gm, lwi, lbi); // needs (4,2)x(2,3)
            // grl is excluded here: its backward is intentionally not the
            // derivative of its forward, so it cannot sit inside an FD check.
            let dr = t.dropout(lin, mask.clone());
            let ce = t.ce_mean(dr, vec![0, 2, 1, 0]);
            let nd = t.neg_sqdist(lin, centers.clone(), 2.5);
            let sub = t.gather_rows(nd, vec![0, 1]);
            let sce = t.soft_ce_mean(sub, targets.clone());
            let mse = t.mse_mean(lin, mse_target.clone());
            let tri = t.triplet_hinge_mean(lin, vec![(0, 1, 2), (1, 0, 3)], 0.4);
            let das = t.dist_to_assigned_sum(lin, centers.clone(), vec![0, 1, 1, 0]);
            let e = t.exp(ce);
            let m = t.mul(ce, sce);
            let total = t.affine_scalars(
                vec![(ce, 1.0), (sce, 0.7), (mse, 1.3), (tri, 0.9), (das, 0.2), (e, 0.05), (m, 0.1)],
                0.11,
            );
            (t, total, vec![xi, wi, bi, lwi, lbi])
        };

        let leaves: Vec<ArrayD<f64>> = vec![x0.clone(), w0.clone(), b0.clone(), lw0.clone(), lb0.clone()];
        let (tape, loss, ids) = build(&x0, &w0, &b0, &lw0, &lb0);
        let grads = tape.backward(loss);

        for (li, id) in ids.iter().enumerate() {
            let numeric = central_diff_gradient(
                |probe| {
                    let mut args: Vec<ArrayD<f64>> = leaves.clone();
                    args[li] = probe.clone();
                    let (t2, l2, _) = build(&args[0], &args[1], &args[2], &args[3], &args[4]);
                    t2.scalar_value(l2)
                },
                &leaves[li],
                1e-5,
            );
            let e = rel_err(grads.get(*id), &numeric);
            assert!(e < 1e-6, "leaf {li} rel err {e}");
        }

        // MSE target of 4 rows: reuse mse_target by tiling — shape check only here.
        assert_eq!(tape.value(loss).ndim(), 0);
    }

    #[test]
    fn grl_scales_and_negates_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Array::from_shape_vec(IxDyn(&[1, 3]), vec![1.0, -2.0, 3.0]).unwrap());
        let g = t.grl(x, 1.0);
        let target = ArrayD::zeros(IxDyn(&[1, 3]));
        // loss = mean((g - 0)^2) has grad 2g/3 at g; input sees -1 * that
        let loss = t.mse_mean(g, target);
        let grads = t.backward(loss);
        let gx = grads.get(x);
        let expect = [-2.0 / 3.0, 4.0 / 3.0, -2.0];
        for (a, b) in gx.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn conv_identity_kernel_preserves_input() {
        let mut t = Tape::new();
        let x = t.leaf(Array::from_shape_fn(IxDyn(&[1, 1, 4, 4]), |ix| (ix[2] * 4 + ix[3]) as f64));
        let mut w = ArrayD::zeros(IxDyn(&[1, 1, 3, 3]));
        w[[0, 0, 1, 1]] = 1.0;
        let wi = t.leaf(w);
        let bi = t.leaf(ArrayD::zeros(IxDyn(&[1])));
        let y = t.conv2d(x, wi, bi, 1);
        assert_eq!(t.value(y).shape(), &[1, 1, 4, 4]);
        for (a, b) in t.value(y).iter().zip(t.value(x).iter()) {
            assert_eq!(a, b);
        }
    }
}
