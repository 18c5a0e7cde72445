use std::collections::BTreeMap;
use std::sync::Arc;

use super::params::ParamStore;
use super::tensor::{matmul, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

/// Axis-aligned crop in continuous pixel coordinates of batch item `batch`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Crop {
    pub batch: usize,
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

/// A user-defined differentiable operation.
pub trait CustomOp<T: Real>: Send + Sync {
    fn name(&self) -> &str;
    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>>;
    /// Gradients with respect to each input, given the upstream gradient.
    fn backward(&self, inputs: &[&Tensor<T>], output: &Tensor<T>, grad: &Tensor<T>) -> Result<Vec<Tensor<T>>>;
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }
}

fn im2col<T: Real>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let p = g.cols();
    for c in 0..g.c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let out = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let dst = &mut out[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        dst.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &x[(c * g.h + iy as usize) * g.w..][..g.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *d = if ix >= 0 && ix < g.w as isize { src[ix as usize] } else { T::zero() };
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(cols: &[T], g: &ConvGeom, x: &mut [T]) {
    let p = g.cols();
    for c in 0..g.c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut x[(c * g.h + iy as usize) * g.w..][..g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Tap<T> {
    i00: usize,
    i01: usize,
    i10: usize,
    i11: usize,
    w00: T,
    w01: T,
    w10: T,
    w11: T,
}

enum Op<T: Real> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    LeakyRelu {
        x: Var,
        alpha: T,
    },
    Sigmoid {
        x: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    SpatialMean {
        x: Var,
    },
    Mean {
        x: Var,
    },
    Sum {
        x: Var,
    },
    Concat {
        a: Var,
        b: Var,
    },
    Reshape {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        c: T,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    CropResize {
        x: Var,
        taps: Vec<Tap<T>>,
    },
    Gray {
        x: Var,
    },
    Compose {
        gx: Var,
        x: Var,
        mask: Tensor<T>,
    },
    Custom {
        inputs: Vec<Var>,
        op: Arc<dyn CustomOp<T>>,
    },
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    label: String,
}

/// A define-by-run tape: every op is evaluated when it is added.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    params: BTreeMap<String, Var>,
    frozen: BTreeMap<String, Var>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

const GRAY_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

fn shape_err(node: &str, expected: impl std::fmt::Debug, actual: impl std::fmt::Debug) -> Error {
    Error::Shape {
        node: node.to_string(),
        expected: format!("{expected:?}"),
        actual: format!("{actual:?}"),
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: BTreeMap::new(),
            frozen: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool, label: impl Into<String>) -> Result<Var> {
        let label = label.into();
        if !value.all_finite() {
            return Err(Error::NonFinite(format!("node {} ({label})", self.nodes.len())));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            label,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Input that does not receive gradients.
    pub fn constant(&mut self, t: Tensor<T>) -> Result<Var> {
        self.push(t, Op::Leaf, false, "constant")
    }

    /// Input that receives gradients.
    pub fn input(&mut self, t: Tensor<T>) -> Result<Var> {
        self.push(t, Op::Leaf, true, "input")
    }

    /// Trainable parameter; repeated binds of one name share a node.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let t = store
            .get(name)
            .ok_or_else(|| Error::Graph(format!("unknown parameter {name}")))?
            .clone();
        let v = self.push(t, Op::Leaf, true, name)?;
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    /// Parameter read as a constant: no gradient flows into it.
    pub fn frozen_param(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.frozen.get(name) {
            return Ok(v);
        }
        let t = store
            .get(name)
            .ok_or_else(|| Error::Graph(format!("unknown parameter {name}")))?
            .clone();
        let v = self.push(t, Op::Leaf, false, name)?;
        self.frozen.insert(name.to_string(), v);
        Ok(v)
    }

    /// Bind `name` as trainable or frozen.
    pub fn bind(&mut self, store: &ParamStore<T>, name: &str, trainable: bool) -> Result<Var> {
        if trainable {
            self.param(store, name)
        } else {
            self.frozen_param(store, name)
        }
    }

    fn conv_geom(&self, op: &str, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<(ConvGeom, usize)> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if xs.len() != 4 {
            return Err(shape_err(op, "[N, C, H, W]", xs));
        }
        if ws.len() != 4 || ws[2] != ws[3] {
            return Err(shape_err(op, "square kernel [A, B, k, k]", ws));
        }
        if stride == 0 {
            return Err(Error::invalid(format!("{op}: stride must be positive")));
        }
        let _ = b;
        Ok((
            ConvGeom {
                c: xs[1],
                h: xs[2],
                w: xs[3],
                k: ws[2],
                stride,
                pad,
                oh: 0,
                ow: 0,
            },
            xs[0],
        ))
    }

    fn check_bias(&self, op: &str, b: Option<Var>, channels: usize) -> Result<()> {
        if let Some(b) = b {
            if self.shape(b) != [channels] {
                return Err(shape_err(op, [channels], self.shape(b)));
            }
        }
        Ok(())
    }

    /// Zero-padded 2-D convolution. `w: [Cout, Cin, k, k]`, `b: [Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (mut g, n) = self.conv_geom("conv2d", x, w, b, stride, pad)?;
        let ws = self.shape(w).to_vec();
        let cout = ws[0];
        if ws[1] != g.c {
            return Err(shape_err("conv2d", format!("kernel with {} input channels", g.c), &ws));
        }
        self.check_bias("conv2d", b, cout)?;
        if g.h + 2 * pad < g.k || g.w + 2 * pad < g.k {
            return Err(shape_err("conv2d", format!("input at least {} after padding", g.k), self.shape(x)));
        }
        g.oh = (g.h + 2 * pad - g.k) / stride + 1;
        g.ow = (g.w + 2 * pad - g.k) / stride + 1;
        let (rows, p) = (g.rows(), g.cols());
        let mut cols = vec![T::zero(); rows * p];
        let mut out = vec![T::zero(); n * cout * p];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        for i in 0..n {
            im2col(&xv[i * g.c * g.h * g.w..(i + 1) * g.c * g.h * g.w], &g, &mut cols);
            let y = &mut out[i * cout * p..(i + 1) * cout * p];
            matmul(cout, rows, p, wv, false, &cols, false, y, false);
            if let Some(b) = b {
                let bv = self.value(b).data();
                for (o, row) in y.chunks_mut(p).enumerate() {
                    row.iter_mut().for_each(|v| *v += bv[o]);
                }
            }
        }
        let t = Tensor::new(vec![n, cout, g.oh, g.ow], out)?;
        let deps: Vec<Var> = [x, w].into_iter().chain(b).collect();
        let rg = self.rg(&deps);
        self.push(t, Op::Conv2d { x, w, b, geom: g }, rg, "conv2d")
    }

    /// Transposed convolution (adjoint of [`Graph::conv2d`] with the same
    /// stride and padding). `w: [Cin, Cout, k, k]`; output size
    /// `(H−1)·stride − 2·pad + k + output_padding`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        output_padding: usize,
    ) -> Result<Var> {
        let (xg, n) = self.conv_geom("conv_transpose2d", x, w, b, stride, pad)?;
        let ws = self.shape(w).to_vec();
        if ws[0] != xg.c {
            return Err(shape_err("conv_transpose2d", format!("kernel with {} input channels", xg.c), &ws));
        }
        if output_padding >= stride {
            return Err(Error::invalid("conv_transpose2d: output_padding must be below stride"));
        }
        let cout = ws[1];
        self.check_bias("conv_transpose2d", b, cout)?;
        let k = ws[2];
        let size = |i: usize| (i as isize - 1) * stride as isize - 2 * pad as isize + k as isize + output_padding as isize;
        let (oh, ow) = (size(xg.h), size(xg.w));
        if oh <= 0 || ow <= 0 {
            return Err(shape_err("conv_transpose2d", "positive output size", (oh, ow)));
        }
        // Geometry of the forward convolution whose adjoint this is.
        let g = ConvGeom {
            c: cout,
            h: oh as usize,
            w: ow as usize,
            k,
            stride,
            pad,
            oh: xg.h,
            ow: xg.w,
        };
        let (rows, p) = (g.rows(), g.cols());
        let plane = g.h * g.w;
        let mut cols = vec![T::zero(); rows * p];
        let mut out = vec![T::zero(); n * cout * plane];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        for i in 0..n {
            matmul(rows, xg.c, p, wv, true, &xv[i * xg.c * p..(i + 1) * xg.c * p], false, &mut cols, false);
            let y = &mut out[i * cout * plane..(i + 1) * cout * plane];
            col2im(&cols, &g, y);
            if let Some(b) = b {
                let bv = self.value(b).data();
                for (o, ch) in y.chunks_mut(plane).enumerate() {
                    ch.iter_mut().for_each(|v| *v += bv[o]);
                }
            }
        }
        let t = Tensor::new(vec![n, cout, g.h, g.w], out)?;
        let deps: Vec<Var> = [x, w].into_iter().chain(b).collect();
        let rg = self.rg(&deps);
        self.push(t, Op::ConvTranspose2d { x, w, b, geom: g }, rg, "conv_transpose2d")
    }

    pub fn leaky_relu(&mut self, x: Var, alpha: T) -> Result<Var> {
        let t = Tensor::new(
            self.shape(x).to_vec(),
            self.value(x).data().iter().map(|&v| if v > T::zero() { v } else { alpha * v }).collect(),
        )?;
        let rg = self.rg(&[x]);
        self.push(t, Op::LeakyRelu { x, alpha }, rg, "leaky_relu")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let one = T::one();
        let t = Tensor::new(
            self.shape(x).to_vec(),
            self.value(x)
                .data()
                .iter()
                .map(|&v| {
                    if v >= T::zero() {
                        one / (one + (-v).exp())
                    } else {
                        let e = v.exp();
                        e / (one + e)
                    }
                })
                .collect(),
        )?;
        let rg = self.rg(&[x]);
        self.push(t, Op::Sigmoid { x }, rg, "sigmoid")
    }

    /// `x: [N, I]`, `w: [O, I]`, `b: [O]` → `[N, O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 2 || ws.len() != 2 || ws[1] != xs[1] {
            return Err(shape_err("linear", format!("[N, I] x [O, I] with I = {:?}", ws.get(1)), &xs));
        }
        let (n, i, o) = (xs[0], xs[1], ws[0]);
        self.check_bias("linear", b, o)?;
        let mut out = vec![T::zero(); n * o];
        matmul(n, i, o, self.value(x).data(), false, self.value(w).data(), true, &mut out, false);
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in out.chunks_mut(o) {
                row.iter_mut().zip(bv).for_each(|(v, &bb)| *v += bb);
            }
        }
        let deps: Vec<Var> = [x, w].into_iter().chain(b).collect();
        let rg = self.rg(&deps);
        self.push(Tensor::new(vec![n, o], out)?, Op::Linear { x, w, b }, rg, "linear")
    }

    /// `[N, C, H, W]` → `[N, C]`.
    pub fn spatial_mean(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(shape_err("spatial_mean", "[N, C, H, W]", &s));
        }
        let plane = s[2] * s[3];
        let inv = T::one() / T::from_usize(plane).expect("size");
        let out = self
            .value(x)
            .data()
            .chunks(plane)
            .map(|c| c.iter().copied().sum::<T>() * inv)
            .collect();
        let rg = self.rg(&[x]);
        self.push(Tensor::new(vec![s[0], s[1]], out)?, Op::SpatialMean { x }, rg, "spatial_mean")
    }

    /// Mean of all entries, as a scalar.
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.is_empty() {
            return Err(shape_err("mean", "non-empty tensor", v.shape()));
        }
        let m = v.data().iter().copied().sum::<T>() / T::from_usize(v.len()).expect("size");
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(m), Op::Mean { x }, rg, "mean")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum::<T>();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum { x }, rg, "sum")
    }

    /// Concatenate along axis 1; all other axes must agree.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sa.len() != sb.len() || sa[0] != sb[0] || sa[2..] != sb[2..] {
            return Err(shape_err("concat_channels", &sa, &sb));
        }
        let inner: usize = sa[2..].iter().product();
        let (ca, cb) = (sa[1] * inner, sb[1] * inner);
        let mut out = Vec::with_capacity(sa[0] * (ca + cb));
        for i in 0..sa[0] {
            out.extend_from_slice(&self.value(a).data()[i * ca..(i + 1) * ca]);
            out.extend_from_slice(&self.value(b).data()[i * cb..(i + 1) * cb]);
        }
        let mut shape = sa.clone();
        shape[1] += sb[1];
        let rg = self.rg(&[a, b]);
        self.push(Tensor::new(shape, out)?, Op::Concat { a, b }, rg, "concat_channels")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        let rg = self.rg(&[x]);
        self.push(t, Op::Reshape { x }, rg, "reshape")
    }

    /// `[N, ...]` → `[N, prod(...)]`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let n = s.first().copied().unwrap_or(1);
        let rest: usize = s.iter().skip(1).product();
        self.reshape(x, &[n, rest])
    }

    fn binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(name, self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(self.shape(a).to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        self.push(t, Op::Add { a, b }, rg, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        self.push(t, Op::Sub { a, b }, rg, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        self.push(t, Op::Mul { a, b }, rg, "mul")
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let t = Tensor::new(self.shape(x).to_vec(), self.value(x).data().iter().map(|&v| v * c).collect())?;
        let rg = self.rg(&[x]);
        self.push(t, Op::Scale { x, c }, rg, "scale")
    }

    /// Mean softmax cross-entropy of `logits: [N, K]` against class indices.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != targets.len() || s[0] == 0 {
            return Err(shape_err("softmax_cross_entropy", format!("[{}, K]", targets.len()), &s));
        }
        let k = s[1];
        if let Some(&t) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::invalid(format!("target class {t} outside {k} classes")));
        }
        let mut probs = Vec::with_capacity(s[0] * k);
        let mut loss = T::zero();
        for (row, &t) in self.value(logits).data().chunks(k).zip(targets) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&v| (v - m).exp()).sum();
            let lse = m + z.ln();
            loss += lse - row[t];
            probs.extend(row.iter().map(|&v| (v - lse).exp()));
        }
        let loss = loss / T::from_usize(s[0]).expect("size");
        let rg = self.rg(&[logits]);
        self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
            "softmax_cross_entropy",
        )
    }

    /// Bilinear crop-and-resize of `x: [N, C, H, W]` into
    /// `[crops.len(), C, out_h, out_w]`, sampling pixel centers with
    /// clamp-to-edge addressing.
    pub fn crop_resize(&mut self, x: Var, crops: &[Crop], out_h: usize, out_w: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || crops.is_empty() || out_h == 0 || out_w == 0 {
            return Err(shape_err("crop_resize", "[N, C, H, W] with at least one crop", &s));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let mut taps = Vec::with_capacity(crops.len() * out_h * out_w);
        for cr in crops {
            if cr.batch >= n || !(cr.x1 > cr.x0 && cr.y1 > cr.y0) {
                return Err(Error::invalid(format!("bad crop {cr:?} for batch of {n}")));
            }
            let base = cr.batch * c * h * w;
            for i in 0..out_h {
                let sy = (cr.y0 + (i as f64 + 0.5) * (cr.y1 - cr.y0) / out_h as f64 - 0.5).clamp(0.0, (h - 1) as f64);
                let y0 = sy.floor() as usize;
                let y1 = (y0 + 1).min(h - 1);
                let fy = sy - y0 as f64;
                for j in 0..out_w {
                    let sx =
                        (cr.x0 + (j as f64 + 0.5) * (cr.x1 - cr.x0) / out_w as f64 - 0.5).clamp(0.0, (w - 1) as f64);
                    let x0 = sx.floor() as usize;
                    let x1 = (x0 + 1).min(w - 1);
                    let fx = sx - x0 as f64;
                    taps.push(Tap {
                        i00: base + y0 * w + x0,
                        i01: base + y0 * w + x1,
                        i10: base + y1 * w + x0,
                        i11: base + y1 * w + x1,
                        w00: T::lit((1.0 - fy) * (1.0 - fx)),
                        w01: T::lit((1.0 - fy) * fx),
                        w10: T::lit(fy * (1.0 - fx)),
                        w11: T::lit(fy * fx),
                    });
                }
            }
        }
        let plane = h * w;
        let per = out_h * out_w;
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(crops.len() * c * per);
        for m in 0..crops.len() {
            for ch in 0..c {
                let off = ch * plane;
                for t in &taps[m * per..(m + 1) * per] {
                    out.push(
                        t.w00 * xv[t.i00 + off] + t.w01 * xv[t.i01 + off] + t.w10 * xv[t.i10 + off] + t.w11 * xv[t.i11 + off],
                    );
                }
            }
        }
        let t = Tensor::new(vec![crops.len(), c, out_h, out_w], out)?;
        let rg = self.rg(&[x]);
        self.push(t, Op::CropResize { x, taps }, rg, "crop_resize")
    }

    /// Luma of `[N, 3, H, W]` as `[N, 1, H, W]`.
    pub fn gray(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || s[1] != 3 {
            return Err(shape_err("gray", "[N, 3, H, W]", &s));
        }
        let plane = s[2] * s[3];
        let wts = GRAY_WEIGHTS.map(T::lit);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(s[0] * plane);
        for i in 0..s[0] {
            let b = &xv[i * 3 * plane..(i + 1) * 3 * plane];
            out.extend((0..plane).map(|p| wts[0] * b[p] + wts[1] * b[plane + p] + wts[2] * b[2 * plane + p]));
        }
        let rg = self.rg(&[x]);
        self.push(Tensor::new(vec![s[0], 1, s[2], s[3]], out)?, Op::Gray { x }, rg, "gray")
    }

    /// Masked composition `gx·m + x·(1−m)` with a binary `mask: [N, 1, H, W]`
    /// broadcast over channels.
    pub fn compose_masked(&mut self, gx: Var, x: Var, mask: &Tensor<T>) -> Result<Var> {
        let s = self.shape(gx).to_vec();
        if s != self.shape(x) {
            return Err(shape_err("compose_masked", &s, self.shape(x)));
        }
        if s.len() != 4 || mask.shape() != [s[0], 1, s[2], s[3]] {
            return Err(shape_err("compose_masked", [s[0], 1, s.get(2).copied().unwrap_or(0), s.get(3).copied().unwrap_or(0)], mask.shape()));
        }
        if mask.data().iter().any(|&v| v != T::zero() && v != T::one()) {
            return Err(Error::invalid("compose_masked: mask is not binary"));
        }
        let plane = s[2] * s[3];
        let one = T::one();
        let (gv, xv, mv) = (self.value(gx).data(), self.value(x).data(), mask.data());
        let out = (0..gv.len())
            .map(|i| {
                let n = i / (s[1] * plane);
                let m = mv[n * plane + i % plane];
                gv[i] * m + xv[i] * (one - m)
            })
            .collect();
        let rg = self.rg(&[gx, x]);
        self.push(
            Tensor::new(s, out)?,
            Op::Compose {
                gx,
                x,
                mask: mask.clone(),
            },
            rg,
            "compose_masked",
        )
    }

    pub fn custom(&mut self, op: Arc<dyn CustomOp<T>>, inputs: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor<T>> = inputs.iter().map(|v| self.value(*v)).collect();
        let t = op.forward(&vals)?;
        let rg = self.rg(inputs);
        let label = op.name().to_string();
        self.push(
            t,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            rg,
            label,
        )
    }

    /// Reverse-mode sweep from `output`. A scalar output may omit `seed`
    /// (taken as 1).
    pub fn backward(&self, output: Var, seed: Option<Tensor<T>>) -> Result<Gradients<T>> {
        if output.0 >= self.nodes.len() {
            return Err(Error::Graph("backward from a node outside this graph".into()));
        }
        let out_shape = self.shape(output);
        let seed = match seed {
            Some(s) => {
                if s.shape() != out_shape {
                    return Err(shape_err("backward seed", out_shape, s.shape()));
                }
                s
            }
            None if self.value(output).len() == 1 => Tensor::filled(out_shape, T::one()),
            None => return Err(Error::Graph("non-scalar output needs an explicit gradient".into())),
        };
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[output.0].requires_grad {
            return Ok(Gradients {
                grads,
                params: self.params.clone(),
            });
        }
        grads[output.0] = Some(seed);
        for id in (0..=output.0).rev() {
            let Some(g) = grads[id].take() else {
                continue;
            };
            if !g.all_finite() {
                return Err(Error::NonFinite(format!("gradient at node {id} ({})", self.nodes[id].label)));
            }
            self.backprop_node(id, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, t: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&t),
            slot => *slot = Some(t),
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, id: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[id];
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                let geom = *geom;
                let xs = self.shape(*x).to_vec();
                let ws = self.shape(*w).to_vec();
                let (n, cout) = (xs[0], ws[0]);
                let (rows, p) = (geom.rows(), geom.cols());
                let in_size = geom.c * geom.h * geom.w;
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let mut cols = vec![T::zero(); rows * p];
                let mut dw = vec![T::zero(); cout * rows];
                let mut dx = vec![T::zero(); n * in_size];
                let (need_x, need_w) = (self.needs(*x), self.needs(*w));
                for i in 0..n {
                    let gy = &gd[i * cout * p..(i + 1) * cout * p];
                    if need_w {
                        im2col(&xv[i * in_size..(i + 1) * in_size], &geom, &mut cols);
                        matmul(cout, p, rows, gy, false, &cols, true, &mut dw, true);
                    }
                    if need_x {
                        matmul(rows, cout, p, wv, true, gy, false, &mut cols, false);
                        col2im(&cols, &geom, &mut dx[i * in_size..(i + 1) * in_size]);
                    }
                }
                if need_x {
                    self.acc(grads, *x, Tensor::new(xs, dx)?);
                }
                if need_w {
                    self.acc(grads, *w, Tensor::new(ws, dw)?);
                }
                if let Some(b) = b {
                    self.acc(grads, *b, channel_sums(gd, n, cout, p));
                }
            }
            Op::ConvTranspose2d { x, w, b, geom } => {
                let geom = *geom;
                let xs = self.shape(*x).to_vec();
                let ws = self.shape(*w).to_vec();
                let (n, cin, cout) = (xs[0], xs[1], ws[1]);
                let (rows, p) = (geom.rows(), geom.cols());
                let plane = geom.h * geom.w;
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let mut gcols = vec![T::zero(); rows * p];
                let mut dw = vec![T::zero(); cin * rows];
                let mut dx = vec![T::zero(); n * cin * p];
                for i in 0..n {
                    im2col(&gd[i * cout * plane..(i + 1) * cout * plane], &geom, &mut gcols);
                    if self.needs(*x) {
                        matmul(cin, rows, p, wv, false, &gcols, false, &mut dx[i * cin * p..(i + 1) * cin * p], false);
                    }
                    if self.needs(*w) {
                        matmul(cin, p, rows, &xv[i * cin * p..(i + 1) * cin * p], false, &gcols, true, &mut dw, true);
                    }
                }
                self.acc(grads, *x, Tensor::new(xs, dx)?);
                self.acc(grads, *w, Tensor::new(ws, dw)?);
                if let Some(b) = b {
                    self.acc(grads, *b, channel_sums(gd, n, cout, plane));
                }
            }
            Op::LeakyRelu { x, alpha } => {
                let xv = self.value(*x).data();
                let d = xv.iter().zip(gd).map(|(&v, &gv)| if v > T::zero() { gv } else { *alpha * gv }).collect();
                self.acc(grads, *x, Tensor::new(g.shape().to_vec(), d)?);
            }
            Op::Sigmoid { x } => {
                let y = node.value.data();
                let d = y.iter().zip(gd).map(|(&s, &gv)| gv * s * (T::one() - s)).collect();
                self.acc(grads, *x, Tensor::new(g.shape().to_vec(), d)?);
            }
            Op::Linear { x, w, b } => {
                let xs = self.shape(*x).to_vec();
                let ws = self.shape(*w).to_vec();
                let (n, i, o) = (xs[0], xs[1], ws[0]);
                if self.needs(*x) {
                    let mut dx = vec![T::zero(); n * i];
                    matmul(n, o, i, gd, false, self.value(*w).data(), false, &mut dx, false);
                    self.acc(grads, *x, Tensor::new(xs, dx)?);
                }
                if self.needs(*w) {
                    let mut dw = vec![T::zero(); o * i];
                    matmul(o, n, i, gd, true, self.value(*x).data(), false, &mut dw, false);
                    self.acc(grads, *w, Tensor::new(ws, dw)?);
                }
                if let Some(b) = b {
                    let mut db = vec![T::zero(); o];
                    for row in gd.chunks(o) {
                        db.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
                    }
                    self.acc(grads, *b, Tensor::new(vec![o], db)?);
                }
            }
            Op::SpatialMean { x } => {
                let xs = self.shape(*x).to_vec();
                let plane = xs[2] * xs[3];
                let inv = T::one() / T::from_usize(plane).expect("size");
                let d = gd.iter().flat_map(|&v| std::iter::repeat_n(v * inv, plane)).collect();
                self.acc(grads, *x, Tensor::new(xs, d)?);
            }
            Op::Mean { x } => {
                let n = self.value(*x).len();
                let v = gd[0] / T::from_usize(n).expect("size");
                self.acc(grads, *x, Tensor::filled(self.shape(*x), v));
            }
            Op::Sum { x } => {
                self.acc(grads, *x, Tensor::filled(self.shape(*x), gd[0]));
            }
            Op::Concat { a, b } => {
                let sa = self.shape(*a).to_vec();
                let sb = self.shape(*b).to_vec();
                let inner: usize = sa[2..].iter().product();
                let (ca, cb) = (sa[1] * inner, sb[1] * inner);
                let mut da = Vec::with_capacity(sa[0] * ca);
                let mut db = Vec::with_capacity(sa[0] * cb);
                for chunk in gd.chunks(ca + cb) {
                    da.extend_from_slice(&chunk[..ca]);
                    db.extend_from_slice(&chunk[ca..]);
                }
                self.acc(grads, *a, Tensor::new(sa, da)?);
                self.acc(grads, *b, Tensor::new(sb, db)?);
            }
            Op::Reshape { x } => {
                self.acc(grads, *x, g.clone().reshaped(self.shape(*x))?);
            }
            Op::Add { a, b } => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub { a, b } => {
                self.acc(grads, *a, g.clone());
                let neg = gd.iter().map(|&v| -v).collect();
                self.acc(grads, *b, Tensor::new(g.shape().to_vec(), neg)?);
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let da = gd.iter().zip(bv).map(|(&gv, &y)| gv * y).collect();
                let db = gd.iter().zip(av).map(|(&gv, &x)| gv * x).collect();
                self.acc(grads, *a, Tensor::new(g.shape().to_vec(), da)?);
                self.acc(grads, *b, Tensor::new(g.shape().to_vec(), db)?);
            }
            Op::Scale { x, c } => {
                let d = gd.iter().map(|&v| v * *c).collect();
                self.acc(grads, *x, Tensor::new(g.shape().to_vec(), d)?);
            }
            Op::SoftmaxCrossEntropy { logits, targets, probs } => {
                let s = self.shape(*logits).to_vec();
                let k = s[1];
                let scale = gd[0] / T::from_usize(s[0]).expect("size");
                let mut d: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (r, &t) in targets.iter().enumerate() {
                    d[r * k + t] -= scale;
                }
                self.acc(grads, *logits, Tensor::new(s, d)?);
            }
            Op::CropResize { x, taps } => {
                let xs = self.shape(*x).to_vec();
                let (c, plane) = (xs[1], xs[2] * xs[3]);
                let os = g.shape();
                let per = os[2] * os[3];
                let mut dx = vec![T::zero(); self.value(*x).len()];
                for m in 0..os[0] {
                    for ch in 0..c {
                        let off = ch * plane;
                        let gsl = &gd[(m * c + ch) * per..(m * c + ch + 1) * per];
                        for (t, &gv) in taps[m * per..(m + 1) * per].iter().zip(gsl) {
                            dx[t.i00 + off] += t.w00 * gv;
                            dx[t.i01 + off] += t.w01 * gv;
                            dx[t.i10 + off] += t.w10 * gv;
                            dx[t.i11 + off] += t.w11 * gv;
                        }
                    }
                }
                self.acc(grads, *x, Tensor::new(xs, dx)?);
            }
            Op::Gray { x } => {
                let xs = self.shape(*x).to_vec();
                let plane = xs[2] * xs[3];
                let wts = GRAY_WEIGHTS.map(T::lit);
                let mut dx = Vec::with_capacity(xs[0] * 3 * plane);
                for gp in gd.chunks(plane) {
                    for wt in wts {
                        dx.extend(gp.iter().map(|&v| v * wt));
                    }
                }
                self.acc(grads, *x, Tensor::new(xs, dx)?);
            }
            Op::Compose { gx, x, mask } => {
                let s = g.shape();
                let plane = s[2] * s[3];
                let mv = mask.data();
                let m_at = |i: usize| mv[(i / (s[1] * plane)) * plane + i % plane];
                let dg = gd.iter().enumerate().map(|(i, &v)| v * m_at(i)).collect();
                let dx = gd.iter().enumerate().map(|(i, &v)| v * (T::one() - m_at(i))).collect();
                self.acc(grads, *gx, Tensor::new(s.to_vec(), dg)?);
                self.acc(grads, *x, Tensor::new(s.to_vec(), dx)?);
            }
            Op::Custom { inputs, op } => {
                let vals: Vec<&Tensor<T>> = inputs.iter().map(|v| self.value(*v)).collect();
                let gs = op.backward(&vals, &node.value, g)?;
                if gs.len() != inputs.len() {
                    return Err(Error::Graph(format!("{} returned {} gradients for {} inputs", op.name(), gs.len(), inputs.len())));
                }
                for (v, t) in inputs.iter().zip(gs) {
                    if t.shape() != self.shape(*v) {
                        return Err(shape_err(op.name(), self.shape(*v), t.shape()));
                    }
                    self.acc(grads, *v, t);
                }
            }
        }
        Ok(())
    }
}

fn channel_sums<T: Real>(gd: &[T], n: usize, c: usize, plane: usize) -> Tensor<T> {
    let mut db = vec![T::zero(); c];
    for i in 0..n {
        for (ch, d) in db.iter_mut().enumerate() {
            *d += gd[(i * c + ch) * plane..(i * c + ch + 1) * plane].iter().copied().sum::<T>();
        }
    }
    Tensor::new(vec![c], db).expect("bias shape")
}

/// Result of [`Graph::backward`].
pub struct Gradients<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
    params: BTreeMap<String, Var>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name).and_then(|v| self.get(*v))
    }

    /// Gradients of every trainable parameter bound in the graph; parameters
    /// the output does not depend on get zeros.
    pub fn param_grads(&self, graph: &Graph<T>) -> BTreeMap<String, Tensor<T>> {
        self.params
            .iter()
            .map(|(k, v)| {
                let g = self.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(graph.shape(*v)));
                (k.clone(), g)
            })
            .collect()
    }
}
