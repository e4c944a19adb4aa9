//! Reverse-mode automatic differentiation over `f64` tensors.
//!
//! A [`Tape`] records a directed acyclic graph of tensor operations; nodes are
//! appended in topological order, so a single reverse sweep in
//! [`Tape::backward`] produces gradients for every leaf. Values are
//! dynamically-shaped `ndarray` arrays; scalars are zero-dimensional.
//!
//! The op set is exactly what the CAM / MIL / loss stack needs. Convolutions
//! are lowered to im2col + GEMM so the training loop stays usable on a CPU.

use ndarray::{Array2, Array3, ArrayD, Axis, Ix1, Ix2, Ix3, IxDyn};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Abs(Var),
    Sigmoid(Var),
    Softplus(Var),
    Ln(Var),
    Sqrt(Var),
    Square(Var),
    ClampMin(Var, f64),
    MatMul(Var, Var),
    Transpose2(Var),
    Reshape(Var),
    Conv2d {
        input: Var,
        weight: Var,
        stride: usize,
        pad: usize,
    },
    BiasAddChannel(Var, Var),
    ResizeBilinear(Var),
    FlipH(Var),
    FlipV(Var),
    /// Quarter-turn rotations, counter-clockwise, `k` in 1..=3.
    Rot90(Var, u8),
    ConcatChannels(Var, Var),
    MeanAll(Var),
    SumAll(Var),
    SumAxis(Var, usize),
    MeanAxis(Var, usize),
    SpatialMean(Var),
    /// Per-channel spatial max of a [C,H,W] tensor; flat argmax per channel.
    SpatialMax(Var, Vec<usize>),
    /// x:[C,H,W] divided per-channel by d:[C].
    DivChannel(Var, Var),
    /// x:[K,N] scaled per-column by a:[N].
    MulCols(Var, Var),
    SetDiagOne(Var),
    Softmax(Var),
    Index(Var, usize),
}

struct Node {
    value: ArrayD<f64>,
    op: Op,
}

/// Record of a forward computation, consumed by [`Tape::backward`].
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    // ln(1 + e^x), stable for large |x|
    x.max(0.0) + (-x.abs()).exp().ln_1p()
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

    pub fn value(&self, v: Var) -> &ArrayD<f64> {
        &self.nodes[v.0].value
    }

    /// Value of a zero-dimensional (or single-element) node as a scalar.
    pub fn scalar(&self, v: Var) -> f64 {
        let a = self.value(v);
        debug_assert_eq!(a.len(), 1, "scalar() on tensor of len {}", a.len());
        *a.iter().next().unwrap()
    }

    fn push(&mut self, value: ArrayD<f64>, op: Op) -> Var {
        debug_assert!(value.iter().all(|x| x.is_finite() || true));
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: ArrayD<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn leaf_scalar(&mut self, value: f64) -> Var {
        self.leaf(ArrayD::from_elem(IxDyn(&[]), value))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        self.push(v, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value / &self.nodes[b.0].value;
        self.push(v, Op::Div(a, b))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| -x);
        self.push(v, Op::Neg(a))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| c * x);
        self.push(v, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x + c);
        self.push(v, Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(f64::abs);
        self.push(v, Op::Abs(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(softplus);
        self.push(v, Op::Softplus(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(f64::ln);
        self.push(v, Op::Ln(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(f64::sqrt);
        self.push(v, Op::Sqrt(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x * x);
        self.push(v, Op::Square(a))
    }

    pub fn clamp_min(&mut self, a: Var, c: f64) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x.max(c));
        self.push(v, Op::ClampMin(a, c))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let av = as2(&self.nodes[a.0].value);
        let bv = as2(&self.nodes[b.0].value);
        let v = av.dot(&bv).into_dyn();
        self.push(v, Op::MatMul(a, b))
    }

    pub fn transpose2(&mut self, a: Var) -> Var {
        let v = as2(&self.nodes[a.0].value).t().to_owned().into_dyn();
        self.push(v, Op::Transpose2(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let v = self.nodes[a.0]
            .value
            .clone()
            .into_shape(IxDyn(shape))
            .expect("reshape: element count mismatch");
        self.push(v, Op::Reshape(a))
    }

    /// 2-D convolution: input [Cin,H,W], weight [Cout,Cin,kh,kw].
    pub fn conv2d(&mut self, input: Var, weight: Var, stride: usize, pad: usize) -> Var {
        let x = as3(&self.nodes[input.0].value);
        let w = &self.nodes[weight.0].value;
        let v = conv2d_forward(&x, w, stride, pad).into_dyn();
        self.push(
            v,
            Op::Conv2d {
                input,
                weight,
                stride,
                pad,
            },
        )
    }

    /// Adds bias [C] to every spatial cell of x [C,H,W].
    pub fn bias_add_channel(&mut self, x: Var, b: Var) -> Var {
        let xv = as3(&self.nodes[x.0].value);
        let bv = self.nodes[b.0].value.clone().into_dimensionality::<Ix1>().unwrap();
        let mut out = xv.to_owned();
        for (c, mut plane) in out.outer_iter_mut().enumerate() {
            plane += bv[c];
        }
        self.push(out.into_dyn(), Op::BiasAddChannel(x, b))
    }

    /// Bilinear resize of a [C,H,W] tensor to [C,out_h,out_w] (half-pixel centers).
    pub fn resize_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Var {
        let xv = as3(&self.nodes[x.0].value);
        let v = resize_bilinear_forward(&xv, out_h, out_w).into_dyn();
        self.push(v, Op::ResizeBilinear(x))
    }

    pub fn flip_h(&mut self, x: Var) -> Var {
        let xv = as3(&self.nodes[x.0].value);
        let (c, h, w) = xv.dim();
        let mut out = Array3::<f64>::zeros((c, h, w));
        for ci in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    out[[ci, y, xx]] = xv[[ci, y, w - 1 - xx]];
                }
            }
        }
        self.push(out.into_dyn(), Op::FlipH(x))
    }

    pub fn flip_v(&mut self, x: Var) -> Var {
        let xv = as3(&self.nodes[x.0].value);
        let (c, h, w) = xv.dim();
        let mut out = Array3::<f64>::zeros((c, h, w));
        for ci in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    out[[ci, y, xx]] = xv[[ci, h - 1 - y, xx]];
                }
            }
        }
        self.push(out.into_dyn(), Op::FlipV(x))
    }

    pub fn rot90(&mut self, x: Var, k: u8) -> Var {
        let k = k % 4;
        if k == 0 {
            let v = self.nodes[x.0].value.clone();
            // identity rotation still records a node so callers can treat it uniformly
            return self.push(v, Op::Scale(x, 1.0));
        }
        let xv = as3(&self.nodes[x.0].value);
        let v = rot90_forward(&xv, k).into_dyn();
        self.push(v, Op::Rot90(x, k))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Var {
        let av = as3(&self.nodes[a.0].value);
        let bv = as3(&self.nodes[b.0].value);
        let v = ndarray::concatenate(Axis(0), &[av.view(), bv.view()])
            .expect("concat_channels: spatial dims differ")
            .into_dyn();
        self.push(v, Op::ConcatChannels(a, b))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let m = self.nodes[a.0].value.mean().unwrap();
        self.push(ArrayD::from_elem(IxDyn(&[]), m), Op::MeanAll(a))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.sum();
        self.push(ArrayD::from_elem(IxDyn(&[]), s), Op::SumAll(a))
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Var {
        let v = self.nodes[a.0].value.sum_axis(Axis(axis));
        self.push(v, Op::SumAxis(a, axis))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Var {
        let v = self.nodes[a.0].value.mean_axis(Axis(axis)).unwrap();
        self.push(v, Op::MeanAxis(a, axis))
    }

    /// [C,H,W] -> [C] spatial mean (adaptive average pool to 1x1).
    pub fn spatial_mean(&mut self, a: Var) -> Var {
        let xv = as3(&self.nodes[a.0].value);
        let hw = (xv.dim().1 * xv.dim().2) as f64;
        let v = xv.sum_axis(Axis(2)).sum_axis(Axis(1)).mapv(|s| s / hw);
        self.push(v.into_dyn(), Op::SpatialMean(a))
    }

    /// [C,H,W] -> [C] spatial max; gradient flows to the first argmax cell.
    pub fn spatial_max(&mut self, a: Var) -> Var {
        let xv = as3(&self.nodes[a.0].value);
        let (c, h, w) = xv.dim();
        let mut out = ndarray::Array1::<f64>::zeros(c);
        let mut arg = vec![0usize; c];
        for ci in 0..c {
            let mut best = f64::NEG_INFINITY;
            let mut bi = 0usize;
            for y in 0..h {
                for xx in 0..w {
                    let v = xv[[ci, y, xx]];
                    if v > best {
                        best = v;
                        bi = y * w + xx;
                    }
                }
            }
            out[ci] = best;
            arg[ci] = bi;
        }
        self.push(out.into_dyn(), Op::SpatialMax(a, arg))
    }

    /// x:[C,H,W] / d:[C], broadcast over the spatial grid.
    pub fn div_channel(&mut self, x: Var, d: Var) -> Var {
        let xv = as3(&self.nodes[x.0].value);
        let dv = self.nodes[d.0].value.clone().into_dimensionality::<Ix1>().unwrap();
        let mut out = xv.to_owned();
        for (c, mut plane) in out.outer_iter_mut().enumerate() {
            plane /= dv[c];
        }
        self.push(out.into_dyn(), Op::DivChannel(x, d))
    }

    /// x:[K,N] * a:[N], per-column broadcast over rows.
    pub fn mul_cols(&mut self, x: Var, a: Var) -> Var {
        let xv = as2(&self.nodes[x.0].value);
        let av = self.nodes[a.0].value.clone().into_dimensionality::<Ix1>().unwrap();
        let mut out = xv.to_owned();
        for mut row in out.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v *= av[j];
            }
        }
        self.push(out.into_dyn(), Op::MulCols(x, a))
    }

    /// Overwrites the diagonal of a square matrix with 1; gradient passes off-diagonal only.
    pub fn set_diag_one(&mut self, x: Var) -> Var {
        let mut v = as2(&self.nodes[x.0].value).to_owned();
        let n = v.nrows();
        debug_assert_eq!(n, v.ncols());
        for i in 0..n {
            v[[i, i]] = 1.0;
        }
        self.push(v.into_dyn(), Op::SetDiagOne(x))
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let xv = self.nodes[x.0].value.clone().into_dimensionality::<Ix1>().unwrap();
        let m = xv.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e = xv.mapv(|v| (v - m).exp());
        let s = e.sum();
        self.push((e / s).into_dyn(), Op::Softmax(x))
    }

    /// Picks element `i` of a 1-D vector as a scalar node.
    pub fn index(&mut self, x: Var, i: usize) -> Var {
        let xv = self.nodes[x.0].value.clone().into_dimensionality::<Ix1>().unwrap();
        self.push(ArrayD::from_elem(IxDyn(&[]), xv[i]), Op::Index(x, i))
    }

    /// L1 distance, mean-reduced: mean(|a - b|).
    pub fn l1_mean(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let ad = self.abs(d);
        self.mean_all(ad)
    }

    /// Reverse sweep from a scalar `loss` node. Returns one gradient slot per node
    /// (same shape as the node's value); untouched slots are `None`.
    pub fn backward(&self, loss: Var) -> Vec<Option<ArrayD<f64>>> {
        assert_eq!(
            self.nodes[loss.0].value.len(),
            1,
            "backward() expects a scalar loss"
        );
        let mut grads: Vec<Option<ArrayD<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(ArrayD::from_elem(self.nodes[loss.0].value.raw_dim(), 1.0));

        for i in (0..=loss.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        grads
    }

    fn accumulate(&self, i: usize, g: &ArrayD<f64>, grads: &mut [Option<ArrayD<f64>>]) {
        let add_to = |grads: &mut [Option<ArrayD<f64>>], v: Var, delta: ArrayD<f64>| {
            match &mut grads[v.0] {
                Some(acc) => *acc += &delta,
                slot @ None => *slot = Some(delta),
            }
        };
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                add_to(grads, *a, g.clone());
                add_to(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                add_to(grads, *a, g.clone());
                add_to(grads, *b, g.mapv(|x| -x));
            }
            Op::Mul(a, b) => {
                add_to(grads, *a, g * &self.nodes[b.0].value);
                add_to(grads, *b, g * &self.nodes[a.0].value);
            }
            Op::Div(a, b) => {
                let bv = &self.nodes[b.0].value;
                add_to(grads, *a, g / bv);
                let av = &self.nodes[a.0].value;
                add_to(grads, *b, -(g * av) / (bv * bv));
            }
            Op::Neg(a) => add_to(grads, *a, g.mapv(|x| -x)),
            Op::Scale(a, c) => add_to(grads, *a, g.mapv(|x| c * x)),
            Op::AddScalar(a) => add_to(grads, *a, g.clone()),
            Op::Relu(a) => {
                let mask = self.nodes[a.0].value.mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                add_to(grads, *a, g * &mask);
            }
            Op::Abs(a) => {
                let s = self.nodes[a.0].value.mapv(|x| {
                    if x > 0.0 {
                        1.0
                    } else if x < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                });
                add_to(grads, *a, g * &s);
            }
            Op::Sigmoid(a) => {
                let y = &self.nodes[i].value;
                add_to(grads, *a, g * &(y * &y.mapv(|v| 1.0 - v)));
            }
            Op::Softplus(a) => {
                let d = self.nodes[a.0].value.mapv(sigmoid);
                add_to(grads, *a, g * &d);
            }
            Op::Ln(a) => add_to(grads, *a, g / &self.nodes[a.0].value),
            Op::Sqrt(a) => {
                let y = &self.nodes[i].value;
                add_to(grads, *a, g * &y.mapv(|v| 0.5 / v));
            }
            Op::Square(a) => {
                add_to(grads, *a, g * &self.nodes[a.0].value.mapv(|v| 2.0 * v));
            }
            Op::ClampMin(a, c) => {
                let c = *c;
                let mask = self.nodes[a.0].value.mapv(|x| if x > c { 1.0 } else { 0.0 });
                add_to(grads, *a, g * &mask);
            }
            Op::MatMul(a, b) => {
                let gm = as2(g);
                let av = as2(&self.nodes[a.0].value);
                let bv = as2(&self.nodes[b.0].value);
                add_to(grads, *a, gm.dot(&bv.t()).into_dyn());
                add_to(grads, *b, av.t().dot(&gm).into_dyn());
            }
            Op::Transpose2(a) => {
                add_to(grads, *a, as2(g).t().to_owned().into_dyn());
            }
            Op::Reshape(a) => {
                let orig = self.nodes[a.0].value.raw_dim();
                add_to(grads, *a, g.clone().into_shape(orig).unwrap());
            }
            Op::Conv2d {
                input,
                weight,
                stride,
                pad,
            } => {
                let x = as3(&self.nodes[input.0].value);
                let w = &self.nodes[weight.0].value;
                let go = as3(g);
                let (gx, gw) = conv2d_backward(&x, w, &go, *stride, *pad);
                add_to(grads, *input, gx.into_dyn());
                add_to(grads, *weight, gw);
            }
            Op::BiasAddChannel(x, b) => {
                add_to(grads, *x, g.clone());
                let g3 = as3(g);
                let gb = g3.sum_axis(Axis(2)).sum_axis(Axis(1));
                add_to(grads, *b, gb.into_dyn());
            }
            Op::ResizeBilinear(x) => {
                let xv = as3(&self.nodes[x.0].value);
                let go = as3(g);
                add_to(grads, *x, resize_bilinear_backward(xv.dim(), &go).into_dyn());
            }
            Op::FlipH(x) => {
                let go = as3(g);
                let (c, h, w) = go.dim();
                let mut gx = Array3::<f64>::zeros((c, h, w));
                for ci in 0..c {
                    for y in 0..h {
                        for xx in 0..w {
                            gx[[ci, y, w - 1 - xx]] = go[[ci, y, xx]];
                        }
                    }
                }
                add_to(grads, *x, gx.into_dyn());
            }
            Op::FlipV(x) => {
                let go = as3(g);
                let (c, h, w) = go.dim();
                let mut gx = Array3::<f64>::zeros((c, h, w));
                for ci in 0..c {
                    for y in 0..h {
                        for xx in 0..w {
                            gx[[ci, h - 1 - y, xx]] = go[[ci, y, xx]];
                        }
                    }
                }
                add_to(grads, *x, gx.into_dyn());
            }
            Op::Rot90(x, k) => {
                let go = as3(g);
                let inv = (4 - k % 4) % 4;
                add_to(grads, *x, rot90_forward(&go, inv).into_dyn());
            }
            Op::ConcatChannels(a, b) => {
                let ca = self.nodes[a.0].value.shape()[0];
                let go = as3(g);
                let ga = go.slice(ndarray::s![..ca, .., ..]).to_owned();
                let gb = go.slice(ndarray::s![ca.., .., ..]).to_owned();
                add_to(grads, *a, ga.into_dyn());
                add_to(grads, *b, gb.into_dyn());
            }
            Op::MeanAll(a) => {
                let n = self.nodes[a.0].value.len() as f64;
                let gs = *g.iter().next().unwrap() / n;
                add_to(grads, *a, ArrayD::from_elem(self.nodes[a.0].value.raw_dim(), gs));
            }
            Op::SumAll(a) => {
                let gs = *g.iter().next().unwrap();
                add_to(grads, *a, ArrayD::from_elem(self.nodes[a.0].value.raw_dim(), gs));
            }
            Op::SumAxis(a, axis) => {
                let mut gx = ArrayD::<f64>::zeros(self.nodes[a.0].value.raw_dim());
                for mut lane in gx.axis_iter_mut(Axis(*axis)) {
                    lane += g;
                }
                add_to(grads, *a, gx);
            }
            Op::MeanAxis(a, axis) => {
                let n = self.nodes[a.0].value.shape()[*axis] as f64;
                let mut gx = ArrayD::<f64>::zeros(self.nodes[a.0].value.raw_dim());
                let gn = g.mapv(|v| v / n);
                for mut lane in gx.axis_iter_mut(Axis(*axis)) {
                    lane += &gn;
                }
                add_to(grads, *a, gx);
            }
            Op::SpatialMean(a) => {
                let shape = self.nodes[a.0].value.shape().to_vec();
                let hw = (shape[1] * shape[2]) as f64;
                let g1 = g.clone().into_dimensionality::<Ix1>().unwrap();
                let mut gx = Array3::<f64>::zeros((shape[0], shape[1], shape[2]));
                for (c, mut plane) in gx.outer_iter_mut().enumerate() {
                    plane += g1[c] / hw;
                }
                add_to(grads, *a, gx.into_dyn());
            }
            Op::SpatialMax(a, arg) => {
                let shape = self.nodes[a.0].value.shape().to_vec();
                let w = shape[2];
                let g1 = g.clone().into_dimensionality::<Ix1>().unwrap();
                let mut gx = Array3::<f64>::zeros((shape[0], shape[1], shape[2]));
                for c in 0..shape[0] {
                    gx[[c, arg[c] / w, arg[c] % w]] = g1[c];
                }
                add_to(grads, *a, gx.into_dyn());
            }
            Op::DivChannel(x, d) => {
                let go = as3(g);
                let xv = as3(&self.nodes[x.0].value);
                let dv = self.nodes[d.0].value.clone().into_dimensionality::<Ix1>().unwrap();
                let (c, h, w) = xv.dim();
                let mut gx = Array3::<f64>::zeros((c, h, w));
                let mut gd = ndarray::Array1::<f64>::zeros(c);
                for ci in 0..c {
                    for y in 0..h {
                        for xx in 0..w {
                            gx[[ci, y, xx]] = go[[ci, y, xx]] / dv[ci];
                            gd[ci] -= go[[ci, y, xx]] * xv[[ci, y, xx]] / (dv[ci] * dv[ci]);
                        }
                    }
                }
                add_to(grads, *x, gx.into_dyn());
                add_to(grads, *d, gd.into_dyn());
            }
            Op::MulCols(x, a) => {
                let go = as2(g);
                let xv = as2(&self.nodes[x.0].value);
                let av = self.nodes[a.0].value.clone().into_dimensionality::<Ix1>().unwrap();
                let (k, n) = xv.dim();
                let mut gx = Array2::<f64>::zeros((k, n));
                let mut ga = ndarray::Array1::<f64>::zeros(n);
                for ki in 0..k {
                    for j in 0..n {
                        gx[[ki, j]] = go[[ki, j]] * av[j];
                        ga[j] += go[[ki, j]] * xv[[ki, j]];
                    }
                }
                add_to(grads, *x, gx.into_dyn());
                add_to(grads, *a, ga.into_dyn());
            }
            Op::SetDiagOne(x) => {
                let mut gx = as2(g).to_owned();
                for di in 0..gx.nrows() {
                    gx[[di, di]] = 0.0;
                }
                add_to(grads, *x, gx.into_dyn());
            }
            Op::Softmax(x) => {
                let y = self.nodes[i].value.clone().into_dimensionality::<Ix1>().unwrap();
                let g1 = g.clone().into_dimensionality::<Ix1>().unwrap();
                let dot: f64 = y.iter().zip(g1.iter()).map(|(a, b)| a * b).sum();
                let gx = ndarray::Array1::from_iter(
                    y.iter().zip(g1.iter()).map(|(yi, gi)| yi * (gi - dot)),
                );
                add_to(grads, *x, gx.into_dyn());
            }
            Op::Index(x, idx) => {
                let mut gx = ArrayD::<f64>::zeros(self.nodes[x.0].value.raw_dim());
                gx[*idx] = *g.iter().next().unwrap();
                add_to(grads, *x, gx);
            }
        }
    }
}

fn as2(a: &ArrayD<f64>) -> ndarray::ArrayView2<'_, f64> {
    a.view().into_dimensionality::<Ix2>().expect("expected 2-D tensor")
}

fn as3(a: &ArrayD<f64>) -> ndarray::ArrayView3<'_, f64> {
    a.view().into_dimensionality::<Ix3>().expect("expected 3-D tensor")
}

fn im2col(
    x: &ndarray::ArrayView3<'_, f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> (Array2<f64>, usize, usize) {
    let (cin, h, w) = x.dim();
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut cols = Array2::<f64>::zeros((cin * kh * kw, oh * ow));
    for c in 0..cin {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (c * kh + ky) * kw + kx;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        cols[[row, oy * ow + ox]] = x[[c, iy as usize, ix as usize]];
                    }
                }
            }
        }
    }
    (cols, oh, ow)
}

fn conv2d_forward(
    x: &ndarray::ArrayView3<'_, f64>,
    w: &ArrayD<f64>,
    stride: usize,
    pad: usize,
) -> Array3<f64> {
    let ws = w.shape();
    let (cout, cin, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
    assert_eq!(cin, x.dim().0, "conv2d: input channel mismatch");
    let (cols, oh, ow) = im2col(x, kh, kw, stride, pad);
    let wmat = w
        .view()
        .into_shape((cout, cin * kh * kw))
        .unwrap()
        .to_owned();
    let y = wmat.dot(&cols);
    y.into_shape((cout, oh, ow)).unwrap()
}

fn conv2d_backward(
    x: &ndarray::ArrayView3<'_, f64>,
    w: &ArrayD<f64>,
    grad_out: &ndarray::ArrayView3<'_, f64>,
    stride: usize,
    pad: usize,
) -> (Array3<f64>, ArrayD<f64>) {
    let ws = w.shape();
    let (cout, cin, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
    let (_, h, wd) = x.dim();
    let (_, oh, ow) = grad_out.dim();
    let gmat = grad_out.to_owned().into_shape((cout, oh * ow)).unwrap();
    let (cols, _, _) = im2col(x, kh, kw, stride, pad);
    let gw = gmat.dot(&cols.t()).into_shape((cout, cin, kh, kw)).unwrap();

    let wmat = w
        .view()
        .into_shape((cout, cin * kh * kw))
        .unwrap()
        .to_owned();
    let gcols = wmat.t().dot(&gmat); // [cin*kh*kw, oh*ow]
    let mut gx = Array3::<f64>::zeros((cin, h, wd));
    for c in 0..cin {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (c * kh + ky) * kw + kx;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= wd as isize {
                            continue;
                        }
                        gx[[c, iy as usize, ix as usize]] += gcols[[row, oy * ow + ox]];
                    }
                }
            }
        }
    }
    (gx, gw.into_dyn())
}

/// Source coordinate and lerp weights for one output index (half-pixel convention).
fn lerp_coords(out_i: usize, out_n: usize, in_n: usize) -> (usize, usize, f64) {
    let scale = in_n as f64 / out_n as f64;
    let src = ((out_i as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_n - 1) as f64);
    let i0 = src.floor() as usize;
    let i1 = (i0 + 1).min(in_n - 1);
    (i0, i1, src - i0 as f64)
}

fn resize_bilinear_forward(
    x: &ndarray::ArrayView3<'_, f64>,
    out_h: usize,
    out_w: usize,
) -> Array3<f64> {
    let (c, h, w) = x.dim();
    let mut out = Array3::<f64>::zeros((c, out_h, out_w));
    for oy in 0..out_h {
        let (y0, y1, wy) = lerp_coords(oy, out_h, h);
        for ox in 0..out_w {
            let (x0, x1, wx) = lerp_coords(ox, out_w, w);
            for ci in 0..c {
                let top = x[[ci, y0, x0]] * (1.0 - wx) + x[[ci, y0, x1]] * wx;
                let bot = x[[ci, y1, x0]] * (1.0 - wx) + x[[ci, y1, x1]] * wx;
                out[[ci, oy, ox]] = top * (1.0 - wy) + bot * wy;
            }
        }
    }
    out
}

fn resize_bilinear_backward(
    in_dim: (usize, usize, usize),
    grad_out: &ndarray::ArrayView3<'_, f64>,
) -> Array3<f64> {
    let (c, h, w) = in_dim;
    let (_, out_h, out_w) = grad_out.dim();
    let mut gx = Array3::<f64>::zeros((c, h, w));
    for oy in 0..out_h {
        let (y0, y1, wy) = lerp_coords(oy, out_h, h);
        for ox in 0..out_w {
            let (x0, x1, wx) = lerp_coords(ox, out_w, w);
            for ci in 0..c {
                let g = grad_out[[ci, oy, ox]];
                gx[[ci, y0, x0]] += g * (1.0 - wx) * (1.0 - wy);
                gx[[ci, y0, x1]] += g * wx * (1.0 - wy);
                gx[[ci, y1, x0]] += g * (1.0 - wx) * wy;
                gx[[ci, y1, x1]] += g * wx * wy;
            }
        }
    }
    gx
}

fn rot90_forward(x: &ndarray::ArrayView3<'_, f64>, k: u8) -> Array3<f64> {
    let (c, h, w) = x.dim();
    match k % 4 {
        0 => x.to_owned(),
        1 => {
            // (y, x) -> (w-1-x, y)
            let mut out = Array3::<f64>::zeros((c, w, h));
            for ci in 0..c {
                for y in 0..h {
                    for xx in 0..w {
                        out[[ci, w - 1 - xx, y]] = x[[ci, y, xx]];
                    }
                }
            }
            out
        }
        2 => {
            let mut out = Array3::<f64>::zeros((c, h, w));
            for ci in 0..c {
                for y in 0..h {
                    for xx in 0..w {
                        out[[ci, h - 1 - y, w - 1 - xx]] = x[[ci, y, xx]];
                    }
                }
            }
            out
        }
        3 => {
            let mut out = Array3::<f64>::zeros((c, w, h));
            for ci in 0..c {
                for y in 0..h {
                    for xx in 0..w {
                        out[[ci, xx, h - 1 - y]] = x[[ci, y, xx]];
                    }
                }
            }
            out
        }
        _ => unreachable!(),
    }
}
