//! Wengert tape: operations append nodes in execution order, backward walks
//! the tape in strict reverse order and accumulates gradients additively.

use super::{numel, Result, Tensor, TensorError};

/// Handle to a node on a [`Graph`]. Only valid for the graph that created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

// the tape record keeps input ids even where backward ignores them
#[allow(dead_code)]
#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Relu(Var),
    Sigmoid(Var),
    PowScalar(Var, f64),
    ClampMin(Var, f64),
    Matmul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Softmax { x: Var, axis: usize },
    SumAxis { x: Var, axis: usize },
    MeanAxis { x: Var, axis: usize },
    MaxAxis { x: Var, axis: usize, argmax: Vec<usize> },
    SumAll(Var),
    MeanAll(Var),
    AvgPool2d { x: Var, kernel: usize, stride: usize },
    ResizeBilinear { x: Var },
    Conv2d { x: Var, w: Var, stride: usize, padding: usize },
    StopGradient(Var),
    GatherSpatial { x: Var, points: Vec<(usize, usize)> },
    CropSpatial { x: Var, top: usize, left: usize },
}

#[derive(Debug)]
struct Node {
    op: Op,
    out: Tensor,
}

/// Append-only operation tape. Forward values live in the nodes; gradients
/// are filled in by [`Graph::backward`] and read back via [`Graph::grad`].
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

// ── axis bookkeeping ─────────────────────────────────────────────────

/// (outer, len, inner) decomposition of `shape` around `axis`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(TensorError::InvalidAxis {
            op,
            axis,
            shape: shape.to_vec(),
        });
    }
    Ok(())
}

fn check_same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        });
    }
    Ok(())
}

/// Splits `shape` as [...lead, H, W]; `min_rank` guards against scalars.
fn spatial_split(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(TensorError::RankMismatch {
            op,
            expected: 2,
            shape: shape.to_vec(),
        });
    }
    let w = shape[shape.len() - 1];
    let h = shape[shape.len() - 2];
    let lead = shape[..shape.len() - 2].iter().product();
    Ok((lead, h, w))
}

// ── raw kernels shared by forward and backward ───────────────────────

/// C = A·B for row-major A[m×k], B[k×n].
fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    out.fill(0.0);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut out[i * n..(i + 1) * n];
        for (p, &aip) in arow.iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (c, &bv) in crow.iter_mut().zip(brow) {
                *c += aip * bv;
            }
        }
    }
}

/// dA += G·Bᵀ for G[m×n], B[k×n].
fn mm_acc_a(g: &[f64], b: &[f64], m: usize, k: usize, n: usize, da: &mut [f64]) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        let darow = &mut da[i * k..(i + 1) * k];
        for (p, dav) in darow.iter_mut().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = 0.0;
            for (gv, bv) in grow.iter().zip(brow) {
                acc += gv * bv;
            }
            *dav += acc;
        }
    }
}

/// dB += Aᵀ·G for A[m×k], G[m×n].
fn mm_acc_b(a: &[f64], g: &[f64], m: usize, k: usize, n: usize, db: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let grow = &g[i * n..(i + 1) * n];
        for (p, &aip) in arow.iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let dbrow = &mut db[p * n..(p + 1) * n];
            for (dbv, &gv) in dbrow.iter_mut().zip(grow) {
                *dbv += aip * gv;
            }
        }
    }
}

struct ConvDims {
    batch: usize,
    in_ch: usize,
    in_h: usize,
    in_w: usize,
    filters: usize,
    kh: usize,
    kw: usize,
    out_h: usize,
    out_w: usize,
}

fn conv_dims(
    x_shape: &[usize],
    w_shape: &[usize],
    stride: usize,
    padding: usize,
) -> Result<ConvDims> {
    if x_shape.len() != 4 {
        return Err(TensorError::RankMismatch {
            op: "conv2d input",
            expected: 4,
            shape: x_shape.to_vec(),
        });
    }
    if w_shape.len() != 4 {
        return Err(TensorError::RankMismatch {
            op: "conv2d weight",
            expected: 4,
            shape: w_shape.to_vec(),
        });
    }
    if x_shape[1] != w_shape[1] {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d channels",
            lhs: x_shape.to_vec(),
            rhs: w_shape.to_vec(),
        });
    }
    let (in_h, in_w) = (x_shape[2], x_shape[3]);
    let (kh, kw) = (w_shape[2], w_shape[3]);
    if kh > in_h + 2 * padding || kw > in_w + 2 * padding {
        return Err(TensorError::KernelTooLarge {
            kernel: vec![kh, kw],
            padded: vec![in_h + 2 * padding, in_w + 2 * padding],
        });
    }
    Ok(ConvDims {
        batch: x_shape[0],
        in_ch: x_shape[1],
        in_h,
        in_w,
        filters: w_shape[0],
        kh,
        kw,
        out_h: (in_h + 2 * padding - kh) / stride + 1,
        out_w: (in_w + 2 * padding - kw) / stride + 1,
    })
}

/// Unfold one image [C×H×W] into columns [C·kh·kw × OH·OW] with zero padding.
fn im2col(x: &[f64], d: &ConvDims, stride: usize, padding: usize, col: &mut [f64]) {
    let cols = d.out_h * d.out_w;
    col.fill(0.0);
    for c in 0..d.in_ch {
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let row = (c * d.kh + ky) * d.kw + kx;
                let dst = &mut col[row * cols..(row + 1) * cols];
                for oy in 0..d.out_h {
                    let iy = oy * stride + ky;
                    if iy < padding || iy >= d.in_h + padding {
                        continue;
                    }
                    let iy = iy - padding;
                    let src = &x[(c * d.in_h + iy) * d.in_w..(c * d.in_h + iy + 1) * d.in_w];
                    for ox in 0..d.out_w {
                        let ix = ox * stride + kx;
                        if ix < padding || ix >= d.in_w + padding {
                            continue;
                        }
                        dst[oy * d.out_w + ox] = src[ix - padding];
                    }
                }
            }
        }
    }
}

/// Transpose of [`im2col`]: scatter-add columns back onto the image.
fn col2im_acc(col: &[f64], d: &ConvDims, stride: usize, padding: usize, dx: &mut [f64]) {
    let cols = d.out_h * d.out_w;
    for c in 0..d.in_ch {
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let row = (c * d.kh + ky) * d.kw + kx;
                let src = &col[row * cols..(row + 1) * cols];
                for oy in 0..d.out_h {
                    let iy = oy * stride + ky;
                    if iy < padding || iy >= d.in_h + padding {
                        continue;
                    }
                    let iy = iy - padding;
                    let dst = &mut dx[(c * d.in_h + iy) * d.in_w..(c * d.in_h + iy + 1) * d.in_w];
                    for ox in 0..d.out_w {
                        let ix = ox * stride + kx;
                        if ix < padding || ix >= d.in_w + padding {
                            continue;
                        }
                        dst[ix - padding] += src[oy * d.out_w + ox];
                    }
                }
            }
        }
    }
}

/// Source taps for bilinear resampling of a length-`src` axis to `dst`
/// samples: (lo, hi, weight of hi), half-pixel convention, edges clamped.
fn bilinear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let pos = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (pos.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            let t = (pos - lo as f64).clamp(0.0, 1.0);
            (lo, hi, t)
        })
        .collect()
}

impl Graph {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), data.len());
        self.nodes.push(Node {
            op,
            out: Tensor {
                shape,
                data,
                requires_grad,
                grad: None,
            },
        });
        Var(self.nodes.len() - 1)
    }

    fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].out.requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].out
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].out.data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].out.shape
    }

    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].out.item()
    }

    /// Gradient of the last `backward` root w.r.t. `v`, if any was recorded.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].out.grad.as_deref()
    }

    /// Forward value as an owned plain tensor (gradient flag stripped).
    pub fn detach(&self, v: Var) -> Tensor {
        let node = &self.nodes[v.0].out;
        Tensor {
            shape: node.shape.clone(),
            data: node.data.clone(),
            requires_grad: false,
            grad: None,
        }
    }

    // ── node constructors ────────────────────────────────────────────

    /// Insert a tensor as a leaf; it participates in backward iff
    /// `t.requires_grad` is set.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let rg = t.requires_grad;
        self.push(Op::Leaf, t.shape().to_vec(), t.data().to_vec(), rg)
    }

    /// Insert a tensor as a non-differentiable constant.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(Op::Leaf, t.shape().to_vec(), t.data().to_vec(), false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.push(Op::Leaf, vec![], vec![value], false)
    }

    fn binary_elementwise(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        check_same_shape(op_name, self.shape(a), self.shape(b))?;
        let data: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.needs_grad(a) || self.needs_grad(b);
        Ok(self.push(op, self.nodes[a.0].out.shape.clone(), data, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let data: Vec<f64> = self.data(x).iter().map(|&v| f(v)).collect();
        let rg = self.needs_grad(x);
        self.push(op, self.nodes[x.0].out.shape.clone(), data, rg)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v + c, Op::AddScalar(x))
    }

    pub fn mul_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v * c, Op::MulScalar(x, c))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.mul_scalar(x, -1.0)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    /// Natural log with the input clamped at 1e-12 so losses stay finite.
    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(Self::LOG_CLAMP).ln(), Op::Log(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, f64::sqrt, Op::Sqrt(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(
            x,
            |v| {
                if v >= 0.0 {
                    1.0 / (1.0 + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (1.0 + e)
                }
            },
            Op::Sigmoid(x),
        )
    }

    /// x^p for non-negative inputs.
    pub fn powf(&mut self, x: Var, p: f64) -> Var {
        self.unary(x, |v| v.powf(p), Op::PowScalar(x, p))
    }

    pub fn clamp_min(&mut self, x: Var, lo: f64) -> Var {
        self.unary(x, |v| v.max(lo), Op::ClampMin(x, lo))
    }

    pub const LOG_CLAMP: f64 = 1e-12;

    /// Forward identity whose backward contributes nothing upstream.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let data = self.data(x).to_vec();
        self.push(
            Op::StopGradient(x),
            self.nodes[x.0].out.shape.clone(),
            data,
            false,
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        mm(self.data(a), self.data(b), m, k, n, &mut out);
        let rg = self.needs_grad(a) || self.needs_grad(b);
        Ok(self.push(Op::Matmul(a, b), vec![m, n], out, rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(TensorError::RankMismatch {
                op: "transpose",
                expected: 2,
                shape: s.to_vec(),
            });
        }
        let (m, n) = (s[0], s[1]);
        let src = self.data(x);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let rg = self.needs_grad(x);
        Ok(self.push(Op::Transpose(x), vec![n, m], out, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let from = self.shape(x).to_vec();
        let (from_n, to_n) = (numel(&from), numel(shape));
        if from_n != to_n {
            return Err(TensorError::NumelMismatch {
                op: "reshape",
                from,
                from_n,
                to: shape.to_vec(),
                to_n,
            });
        }
        let data = self.data(x).to_vec();
        let rg = self.needs_grad(x);
        Ok(self.push(Op::Reshape(x), shape.to_vec(), data, rg))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs.first().ok_or(TensorError::Invalid {
            op: "concat",
            msg: "no inputs".into(),
        })?;
        let base = self.shape(*first).to_vec();
        check_axis("concat", &base, axis)?;
        let mut axis_total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != base.len()
                || s.iter()
                    .zip(&base)
                    .enumerate()
                    .any(|(d, (a, b))| d != axis && a != b)
            {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            axis_total += s[axis];
        }
        let mut out_shape = base.clone();
        out_shape[axis] = axis_total;
        let (outer, _, inner) = axis_split(&out_shape, axis);
        let mut out = vec![0.0; numel(&out_shape)];
        for o in 0..outer {
            let mut written = 0;
            for &v in inputs {
                let len = self.shape(v)[axis];
                let src = &self.data(v)[o * len * inner..(o + 1) * len * inner];
                let at = (o * axis_total + written) * inner;
                out[at..at + len * inner].copy_from_slice(src);
                written += len;
            }
        }
        let rg = inputs.iter().any(|&v| self.needs_grad(v));
        Ok(self.push(
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            out_shape,
            out,
            rg,
        ))
    }

    /// Softmax along `axis` with max subtraction for stability.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis("softmax", &shape, axis)?;
        let (outer, len, inner) = axis_split(&shape, axis);
        let src = self.data(x);
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let mut max = f64::NEG_INFINITY;
                for j in 0..len {
                    max = max.max(src[idx(j)]);
                }
                let mut sum = 0.0;
                for j in 0..len {
                    let e = (src[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    sum += e;
                }
                for j in 0..len {
                    out[idx(j)] /= sum;
                }
            }
        }
        let rg = self.needs_grad(x);
        Ok(self.push(Op::Softmax { x, axis }, shape, out, rg))
    }

    fn reduce_axis(
        &mut self,
        op_name: &'static str,
        x: Var,
        axis: usize,
    ) -> Result<(Vec<usize>, usize, usize, usize)> {
        let shape = self.shape(x).to_vec();
        check_axis(op_name, &shape, axis)?;
        let (outer, len, inner) = axis_split(&shape, axis);
        let mut out_shape = shape;
        out_shape.remove(axis);
        Ok((out_shape, outer, len, inner))
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (out_shape, outer, len, inner) = self.reduce_axis("sum_axis", x, axis)?;
        let src = self.data(x);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let base = (o * len + j) * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i];
                }
            }
        }
        let rg = self.needs_grad(x);
        Ok(self.push(Op::SumAxis { x, axis }, out_shape, out, rg))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (out_shape, outer, len, inner) = self.reduce_axis("mean_axis", x, axis)?;
        let src = self.data(x);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let base = (o * len + j) * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i];
                }
            }
        }
        let scale = 1.0 / len as f64;
        for v in &mut out {
            *v *= scale;
        }
        let rg = self.needs_grad(x);
        Ok(self.push(Op::MeanAxis { x, axis }, out_shape, out, rg))
    }

    /// Max along `axis`; ties resolve to the first (lowest index) maximum.
    pub fn max_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (out_shape, outer, len, inner) = self.reduce_axis("max_axis", x, axis)?;
        let src = self.data(x);
        let mut out = vec![f64::NEG_INFINITY; outer * inner];
        let mut argmax = vec![0usize; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let base = (o * len + j) * inner;
                for i in 0..inner {
                    let v = src[base + i];
                    let slot = o * inner + i;
                    if v > out[slot] {
                        out[slot] = v;
                        argmax[slot] = j;
                    }
                }
            }
        }
        let rg = self.needs_grad(x);
        Ok(self.push(Op::MaxAxis { x, axis, argmax }, out_shape, out, rg))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let total: f64 = self.data(x).iter().sum();
        let rg = self.needs_grad(x);
        self.push(Op::SumAll(x), vec![], vec![total], rg)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.data(x).len();
        let total: f64 = self.data(x).iter().sum();
        let rg = self.needs_grad(x);
        self.push(Op::MeanAll(x), vec![], vec![total / n as f64], rg)
    }

    /// Average pooling over the trailing two axes, windows fully inside.
    pub fn avg_pool2d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (lead, h, w) = spatial_split("avg_pool2d", &shape)?;
        if kernel == 0 || stride == 0 || kernel > h || kernel > w {
            return Err(TensorError::Invalid {
                op: "avg_pool2d",
                msg: format!("kernel {kernel} stride {stride} on {h}x{w}"),
            });
        }
        let oh = (h - kernel) / stride + 1;
        let ow = (w - kernel) / stride + 1;
        let src = self.data(x);
        let mut out = vec![0.0; lead * oh * ow];
        let norm = 1.0 / (kernel * kernel) as f64;
        for l in 0..lead {
            let plane = &src[l * h * w..(l + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ky in 0..kernel {
                        let row = &plane[(oy * stride + ky) * w..][..w];
                        for kx in 0..kernel {
                            acc += row[ox * stride + kx];
                        }
                    }
                    out[(l * oh + oy) * ow + ox] = acc * norm;
                }
            }
        }
        let mut out_shape = shape;
        let r = out_shape.len();
        out_shape[r - 2] = oh;
        out_shape[r - 1] = ow;
        let rg = self.needs_grad(x);
        Ok(self.push(Op::AvgPool2d { x, kernel, stride }, out_shape, out, rg))
    }

    /// Bilinear resampling of the trailing two axes to `out_h` x `out_w`
    /// (half-pixel centres, clamped edges). Identity when sizes match.
    pub fn resize_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (lead, h, w) = spatial_split("resize_bilinear", &shape)?;
        if out_h == 0 || out_w == 0 {
            return Err(TensorError::Invalid {
                op: "resize_bilinear",
                msg: "zero output extent".into(),
            });
        }
        let ytaps = bilinear_taps(h, out_h);
        let xtaps = bilinear_taps(w, out_w);
        let src = self.data(x);
        let mut out = vec![0.0; lead * out_h * out_w];
        for l in 0..lead {
            let plane = &src[l * h * w..(l + 1) * h * w];
            for (oy, &(y0, y1, ty)) in ytaps.iter().enumerate() {
                let r0 = &plane[y0 * w..(y0 + 1) * w];
                let r1 = &plane[y1 * w..(y1 + 1) * w];
                let dst = &mut out[(l * out_h + oy) * out_w..][..out_w];
                for (ox, &(x0, x1, tx)) in xtaps.iter().enumerate() {
                    let top = r0[x0] * (1.0 - tx) + r0[x1] * tx;
                    let bot = r1[x0] * (1.0 - tx) + r1[x1] * tx;
                    dst[ox] = top * (1.0 - ty) + bot * ty;
                }
            }
        }
        let mut out_shape = shape;
        let r = out_shape.len();
        out_shape[r - 2] = out_h;
        out_shape[r - 1] = out_w;
        let rg = self.needs_grad(x);
        Ok(self.push(Op::ResizeBilinear { x }, out_shape, out, rg))
    }

    /// Cross-correlation of x[B×C×H×W] with w[F×C×kh×kw], zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        if stride == 0 {
            return Err(TensorError::Invalid {
                op: "conv2d",
                msg: "stride must be positive".into(),
            });
        }
        let d = conv_dims(self.shape(x), self.shape(w), stride, padding)?;
        let ckk = d.in_ch * d.kh * d.kw;
        let cols = d.out_h * d.out_w;
        let mut col = vec![0.0; ckk * cols];
        let mut out = vec![0.0; d.batch * d.filters * cols];
        let img = d.in_ch * d.in_h * d.in_w;
        for b in 0..d.batch {
            im2col(&self.data(x)[b * img..(b + 1) * img], &d, stride, padding, &mut col);
            let dst = &mut out[b * d.filters * cols..(b + 1) * d.filters * cols];
            mm(self.data(w), &col, d.filters, ckk, cols, dst);
        }
        let rg = self.needs_grad(x) || self.needs_grad(w);
        Ok(self.push(
            Op::Conv2d {
                x,
                w,
                stride,
                padding,
            },
            vec![d.batch, d.filters, d.out_h, d.out_w],
            out,
            rg,
        ))
    }

    /// Pick the channel vector at each (row, col) of x[C×H×W] -> [k×C].
    pub fn gather_spatial(&mut self, x: Var, points: &[(usize, usize)]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 {
            return Err(TensorError::RankMismatch {
                op: "gather_spatial",
                expected: 3,
                shape,
            });
        }
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        for &(r, col) in points {
            if r >= h || col >= w {
                return Err(TensorError::Invalid {
                    op: "gather_spatial",
                    msg: format!("point ({r}, {col}) outside {h}x{w}"),
                });
            }
        }
        let src = self.data(x);
        let mut out = vec![0.0; points.len() * c];
        for (i, &(r, col)) in points.iter().enumerate() {
            for ch in 0..c {
                out[i * c + ch] = src[(ch * h + r) * w + col];
            }
        }
        let rg = self.needs_grad(x);
        Ok(self.push(
            Op::GatherSpatial {
                x,
                points: points.to_vec(),
            },
            vec![points.len(), c],
            out,
            rg,
        ))
    }

    /// Rectangular window of x[C×H×W] -> [C×height×width].
    pub fn crop_spatial(
        &mut self,
        x: Var,
        top: usize,
        left: usize,
        height: usize,
        width: usize,
    ) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 {
            return Err(TensorError::RankMismatch {
                op: "crop_spatial",
                expected: 3,
                shape,
            });
        }
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        if height == 0 || width == 0 || top + height > h || left + width > w {
            return Err(TensorError::Invalid {
                op: "crop_spatial",
                msg: format!("window {top},{left} {height}x{width} outside {h}x{w}"),
            });
        }
        let src = self.data(x);
        let mut out = vec![0.0; c * height * width];
        for ch in 0..c {
            for dy in 0..height {
                let s = (ch * h + top + dy) * w + left;
                let dsta = (ch * height + dy) * width;
                out[dsta..dsta + width].copy_from_slice(&src[s..s + width]);
            }
        }
        let rg = self.needs_grad(x);
        Ok(self.push(
            Op::CropSpatial { x, top, left },
            vec![c, height, width],
            out,
            rg,
        ))
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar root, seeding d(root)/d(root) = 1.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.nodes[root.0].out.numel() != 1 {
            return Err(TensorError::NonScalarRoot {
                shape: self.nodes[root.0].out.shape.clone(),
            });
        }
        self.backward_seeded(&[(root, vec![1.0])])
    }

    /// Reverse sweep with explicit output gradients for the given nodes.
    /// Used when a loss spans several graphs (batch-level terms backpropagate
    /// per-element seed gradients into each element's graph).
    pub fn backward_seeded(&mut self, seeds: &[(Var, Vec<f64>)]) -> Result<()> {
        for node in &mut self.nodes {
            node.out.grad = None;
        }
        let mut start = 0;
        for (v, seed) in seeds {
            let node = &mut self.nodes[v.0];
            if seed.len() != node.out.numel() {
                return Err(TensorError::DataLength {
                    shape: node.out.shape.clone(),
                    expected: node.out.numel(),
                    got: seed.len(),
                });
            }
            if !node.out.requires_grad {
                continue;
            }
            let grad = node
                .out
                .grad
                .get_or_insert_with(|| vec![0.0; seed.len()]);
            for (g, s) in grad.iter_mut().zip(seed) {
                *g += s;
            }
            start = start.max(v.0);
        }
        for id in (0..=start.min(self.nodes.len().saturating_sub(1))).rev() {
            self.backprop_node(id);
        }
        Ok(())
    }

    fn backprop_node(&mut self, id: usize) {
        let (before, rest) = self.nodes.split_at_mut(id);
        let node = &mut rest[0];
        if !node.out.requires_grad {
            return;
        }
        // Taken during propagation and restored below so callers can read it.
        let Some(gout) = node.out.grad.take() else {
            return;
        };

        // accumulate `src` into the gradient of node `v`
        macro_rules! acc {
            ($v:expr, $f:expr) => {{
                let n = &mut before[$v.0];
                if n.out.requires_grad {
                    let len = n.out.data.len();
                    let buf = n.out.grad.get_or_insert_with(|| vec![0.0; len]);
                    #[allow(clippy::redundant_closure_call)]
                    ($f)(&n.out.data, buf);
                }
            }};
        }

        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc!(a, |_: &[f64], g: &mut [f64]| {
                    for (gv, &o) in g.iter_mut().zip(&gout) {
                        *gv += o;
                    }
                });
                acc!(b, |_: &[f64], g: &mut [f64]| {
                    for (gv, &o) in g.iter_mut().zip(&gout) {
                        *gv += o;
                    }
                });
            }
            Op::Sub(a, b) => {
                acc!(a, |_: &[f64], g: &mut [f64]| {
                    for (gv, &o) in g.iter_mut().zip(&gout) {
                        *gv += o;
                    }
                });
                acc!(b, |_: &[f64], g: &mut [f64]| {
                    for (gv, &o) in g.iter_mut().zip(&gout) {
                        *gv -= o;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let bdata = before[b.0].out.data.clone();
                acc!(a, |_: &[f64], g: &mut [f64]| {
                    for i in 0..g.len() {
                        g[i] += gout[i] * bdata[i];
                    }
                });
                let adata = before[a.0].out.data.clone();
                acc!(b, |_: &[f64], g: &mut [f64]| {
                    for i in 0..g.len() {
                        g[i] += gout[i] * adata[i];
                    }
                });
            }
            Op::Div(a, b) => {
                let (a, b) = (*a, *b);
                let bdata = before[b.0].out.data.clone();
                acc!(a, |_: &[f64], g: &mut [f64]| {
                    for i in 0..g.len() {
                        g[i] += gout[i] / bdata[i];
                    }
                });
                let adata = before[a.0].out.data.clone();
                acc!(b, |_: &[f64], g: &mut [f64]| {
                    for i in 0..g.len() {
                        g[i] -= gout[i] * adata[i] / (bdata[i] * bdata[i]);
                    }
                });
            }
            Op::AddScalar(x) => {
                acc!(x, |_: &[f64], g: &mut [f64]| {
                    for (gv, &o) in g.iter_mut().zip(&gout) {
                        *gv += o;
                    }
                });
            }
            Op::MulScalar(x, c) => {
                let c = *c;
                acc!(x, |_: &[f64], g: &mut [f64]| {
                    for (gv, &o) in g.iter_mut().zip(&gout) {
                        *gv += o * c;
                    }
                });
            }
            Op::Exp(x) => {
                let y = node.out.data.clone();
                acc!(x, |_: &[f64], g: &mut [f64]| {
                    for i in 0..g.len() {
                        g[i] += gout[i] * y[i];
                    }
                });
            }
            Op::Log(x) => {
                acc!(x, |xd: &[f64], g: &mut [f64]| {
                    for i in 0..g.len() {
                        if xd[i] >= Self::LOG_CLAMP {
                            g[i] += gout[i] / xd[i];
                        }
                    }
                });
            }
            Op::Sqrt(x) => {
                let y = node.out.data.clone();
                acc!(x, |_: &[f64], g: &mut [f64]| {
                    for i in 0..g.len() {
                        if y[i] > 0.0 {
                            g[i] += gout[i] * 0.5 / y[i];
                        }
                    }
                });
            }
            Op::Relu(x) => {
                acc!(x, |xd: &[f64], g: &mut [f64]| {
                    for i in 0..g.len() {
                        if xd[i] > 0.0 {
                            g[i] += gout[i];
                        }
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = node.out.data.clone();
                acc!(x, |_: &[f64], g: &mut [f64]| {
                    for i in 0..g.len() {
                        g[i] += gout[i] * y[i] * (1.0 - y[i]);
                    }
                });
            }
            Op::PowScalar(x, p) => {
                let p = *p;
                acc!(x, |xd: &[f64], g: &mut [f64]| {
                    for i in 0..g.len() {
                        let base = if p < 1.0 { xd[i].max(1e-12) } else { xd[i] };
                        g[i] += gout[i] * p * base.powf(p - 1.0);
                    }
                });
            }
            Op::ClampMin(x, lo) => {
                let lo = *lo;
                acc!(x, |xd: &[f64], g: &mut [f64]| {
                    for i in 0..g.len() {
                        if xd[i] > lo {
                            g[i] += gout[i];
                        }
                    }
                });
            }
            Op::StopGradient(_) => {}
            Op::Matmul(a, b) => {
                let (a, b) = (*a, *b);
                let (m, k) = {
                    let s = &before[a.0].out.shape;
                    (s[0], s[1])
                };
                let n = before[b.0].out.shape[1];
                let bdata = before[b.0].out.data.clone();
                acc!(a, |_: &[f64], g: &mut [f64]| {
                    mm_acc_a(&gout, &bdata, m, k, n, g);
                });
                let adata = before[a.0].out.data.clone();
                acc!(b, |_: &[f64], g: &mut [f64]| {
                    mm_acc_b(&adata, &gout, m, k, n, g);
                });
            }
            Op::Transpose(x) => {
                let (n, m) = (node.out.shape[0], node.out.shape[1]);
                acc!(x, |_: &[f64], g: &mut [f64]| {
                    for j in 0..n {
                        for i in 0..m {
                            g[i * n + j] += gout[j * m + i];
                        }
                    }
                });
            }
            Op::Reshape(x) => {
                acc!(x, |_: &[f64], g: &mut [f64]| {
                    for (gv, &o) in g.iter_mut().zip(&gout) {
                        *gv += o;
                    }
                });
            }
            Op::Concat { inputs, axis } => {
                let axis = *axis;
                let inputs = inputs.clone();
                let out_shape = node.out.shape.clone();
                let (outer, total, inner) = axis_split(&out_shape, axis);
                let mut written = 0;
                for v in inputs {
                    let len = before[v.0].out.shape[axis];
                    let offset = written;
                    acc!(v, |_: &[f64], g: &mut [f64]| {
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            let dst = o * len * inner;
                            for i in 0..len * inner {
                                g[dst + i] += gout[src + i];
                            }
                        }
                    });
                    written += len;
                }
            }
            Op::Softmax { x, axis } => {
                let axis = *axis;
                let y = node.out.data.clone();
                let shape = node.out.shape.clone();
                let (outer, len, inner) = axis_split(&shape, axis);
                acc!(x, |_: &[f64], g: &mut [f64]| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |j: usize| (o * len + j) * inner + i;
                            let mut dot = 0.0;
                            for j in 0..len {
                                dot += gout[idx(j)] * y[idx(j)];
                            }
                            for j in 0..len {
                                g[idx(j)] += y[idx(j)] * (gout[idx(j)] - dot);
                            }
                        }
                    }
                });
            }
            Op::SumAxis { x, axis } => {
                let axis = *axis;
                let shape = before[x.0].out.shape.clone();
                let (outer, len, inner) = axis_split(&shape, axis);
                acc!(x, |_: &[f64], g: &mut [f64]| {
                    for o in 0..outer {
                        for j in 0..len {
                            let base = (o * len + j) * inner;
                            for i in 0..inner {
                                g[base + i] += gout[o * inner + i];
                            }
                        }
                    }
                });
            }
            Op::MeanAxis { x, axis } => {
                let axis = *axis;
                let shape = before[x.0].out.shape.clone();
                let (outer, len, inner) = axis_split(&shape, axis);
                let scale = 1.0 / len as f64;
                acc!(x, |_: &[f64], g: &mut [f64]| {
                    for o in 0..outer {
                        for j in 0..len {
                            let base = (o * len + j) * inner;
                            for i in 0..inner {
                                g[base + i] += gout[o * inner + i] * scale;
                            }
                        }
                    }
                });
            }
            Op::MaxAxis { x, axis, argmax } => {
                let axis = *axis;
                let argmax = argmax.clone();
                let shape = before[x.0].out.shape.clone();
                let (outer, len, inner) = axis_split(&shape, axis);
                acc!(x, |_: &[f64], g: &mut [f64]| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let j = argmax[o * inner + i];
                            g[(o * len + j) * inner + i] += gout[o * inner + i];
                        }
                    }
                });
            }
            Op::SumAll(x) => {
                let o = gout[0];
                acc!(x, |_: &[f64], g: &mut [f64]| {
                    for gv in g.iter_mut() {
                        *gv += o;
                    }
                });
            }
            Op::MeanAll(x) => {
                let n = before[x.0].out.data.len();
                let o = gout[0] / n as f64;
                acc!(x, |_: &[f64], g: &mut [f64]| {
                    for gv in g.iter_mut() {
                        *gv += o;
                    }
                });
            }
            Op::AvgPool2d { x, kernel, stride } => {
                let (kernel, stride) = (*kernel, *stride);
                let in_shape = before[x.0].out.shape.clone();
                let (lead, h, w) = spatial_split("avg_pool2d", &in_shape).expect("checked");
                let r = node.out.shape.len();
                let (oh, ow) = (node.out.shape[r - 2], node.out.shape[r - 1]);
                let norm = 1.0 / (kernel * kernel) as f64;
                acc!(x, |_: &[f64], g: &mut [f64]| {
                    for l in 0..lead {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let gv = gout[(l * oh + oy) * ow + ox] * norm;
                                for ky in 0..kernel {
                                    let base = (l * h + oy * stride + ky) * w + ox * stride;
                                    for kx in 0..kernel {
                                        g[base + kx] += gv;
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::ResizeBilinear { x } => {
                let in_shape = before[x.0].out.shape.clone();
                let (lead, h, w) = spatial_split("resize_bilinear", &in_shape).expect("checked");
                let r = node.out.shape.len();
                let (oh, ow) = (node.out.shape[r - 2], node.out.shape[r - 1]);
                let ytaps = bilinear_taps(h, oh);
                let xtaps = bilinear_taps(w, ow);
                acc!(x, |_: &[f64], g: &mut [f64]| {
                    for l in 0..lead {
                        for (oy, &(y0, y1, ty)) in ytaps.iter().enumerate() {
                            for (ox, &(x0, x1, tx)) in xtaps.iter().enumerate() {
                                let gv = gout[(l * oh + oy) * ow + ox];
                                g[(l * h + y0) * w + x0] += gv * (1.0 - ty) * (1.0 - tx);
                                g[(l * h + y0) * w + x1] += gv * (1.0 - ty) * tx;
                                g[(l * h + y1) * w + x0] += gv * ty * (1.0 - tx);
                                g[(l * h + y1) * w + x1] += gv * ty * tx;
                            }
                        }
                    }
                });
            }
            Op::Conv2d {
                x,
                w,
                stride,
                padding,
            } => {
                let (x, w, stride, padding) = (*x, *w, *stride, *padding);
                let d = conv_dims(
                    &before[x.0].out.shape,
                    &before[w.0].out.shape,
                    stride,
                    padding,
                )
                .expect("checked in forward");
                let ckk = d.in_ch * d.kh * d.kw;
                let cols = d.out_h * d.out_w;
                let img = d.in_ch * d.in_h * d.in_w;
                let xdata = before[x.0].out.data.clone();
                let wdata = before[w.0].out.data.clone();
                let mut col = vec![0.0; ckk * cols];
                acc!(w, |_: &[f64], g: &mut [f64]| {
                    for b in 0..d.batch {
                        im2col(&xdata[b * img..(b + 1) * img], &d, stride, padding, &mut col);
                        let gslice = &gout[b * d.filters * cols..(b + 1) * d.filters * cols];
                        // dW += G_b · col_bᵀ
                        mm_acc_a(gslice, &col, d.filters, ckk, cols, g);
                    }
                });
                let mut dcol = vec![0.0; ckk * cols];
                acc!(x, |_: &[f64], g: &mut [f64]| {
                    for b in 0..d.batch {
                        let gslice = &gout[b * d.filters * cols..(b + 1) * d.filters * cols];
                        // dcol = Wᵀ · G_b
                        dcol.fill(0.0);
                        mm_acc_b(&wdata, gslice, d.filters, ckk, cols, &mut dcol);
                        col2im_acc(
                            &dcol,
                            &d,
                            stride,
                            padding,
                            &mut g[b * img..(b + 1) * img],
                        );
                    }
                });
            }
            Op::GatherSpatial { x, points } => {
                let points = points.clone();
                let in_shape = before[x.0].out.shape.clone();
                let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
                acc!(x, |_: &[f64], g: &mut [f64]| {
                    for (i, &(row, col)) in points.iter().enumerate() {
                        for ch in 0..c {
                            g[(ch * h + row) * w + col] += gout[i * c + ch];
                        }
                    }
                });
            }
            Op::CropSpatial { x, top, left } => {
                let (top, left) = (*top, *left);
                let in_shape = before[x.0].out.shape.clone();
                let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
                let (ch_, hh, ww) = (
                    node.out.shape[0],
                    node.out.shape[1],
                    node.out.shape[2],
                );
                debug_assert_eq!(c, ch_);
                acc!(x, |_: &[f64], g: &mut [f64]| {
                    for ch in 0..c {
                        for dy in 0..hh {
                            let src = (ch * hh + dy) * ww;
                            let dst = (ch * h + top + dy) * w + left;
                            for dx in 0..ww {
                                g[dst + dx] += gout[src + dx];
                            }
                        }
                    }
                });
            }
        }
        node.out.grad = Some(gout);
    }
}

// ── composite helpers built from primitives ──────────────────────────

impl Graph {
    /// max(‖u‖, eps)·max(‖v‖, eps) guarded cosine similarity of two
    /// equal-length vectors.
    pub fn cosine_similarity(&mut self, u: Var, v: Var, eps: f64) -> Result<Var> {
        let (su, sv) = (self.shape(u).to_vec(), self.shape(v).to_vec());
        if numel(&su) != numel(&sv) || numel(&su) == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "cosine_similarity",
                lhs: su,
                rhs: sv,
            });
        }
        let n = numel(&su);
        let uf = self.reshape(u, &[n])?;
        let vf = self.reshape(v, &[n])?;
        let dot = {
            let p = self.mul(uf, vf)?;
            self.sum_all(p)
        };
        let nu = self.vector_norm(uf, eps)?;
        let nv = self.vector_norm(vf, eps)?;
        let denom = self.mul(nu, nv)?;
        self.div(dot, denom)
    }

    /// max(‖x‖₂, eps) as sqrt(max(Σx², eps²)) — identical values, safe grad.
    fn vector_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let sq = self.mul(x, x)?;
        let ss = self.sum_all(sq);
        let clamped = self.clamp_min(ss, eps * eps);
        Ok(self.sqrt(clamped))
    }

    /// Row-wise x / max(‖row‖, eps) for x[k×d].
    pub fn l2_normalize_rows(&mut self, x: Var, eps: f64) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(TensorError::RankMismatch {
                op: "l2_normalize_rows",
                expected: 2,
                shape: s,
            });
        }
        let (k, d) = (s[0], s[1]);
        let sq = self.mul(x, x)?;
        let ss = self.sum_axis(sq, 1)?;
        let clamped = self.clamp_min(ss, eps * eps);
        let norms = self.sqrt(clamped);
        let col = self.reshape(norms, &[k, 1])?;
        let ones = self.constant(&Tensor::full(&[1, d], 1.0));
        let denom = self.matmul(col, ones)?;
        self.div(x, denom)
    }

    /// Broadcast a column [m] and a row [n] against an [m×n] target via
    /// rank-one products with constant ones.
    pub fn broadcast_col(&mut self, col: Var, n: usize) -> Result<Var> {
        let m = numel(self.shape(col));
        let c = self.reshape(col, &[m, 1])?;
        let ones = self.constant(&Tensor::full(&[1, n], 1.0));
        self.matmul(c, ones)
    }

    pub fn broadcast_row(&mut self, row: Var, m: usize) -> Result<Var> {
        let n = numel(self.shape(row));
        let r = self.reshape(row, &[1, n])?;
        let ones = self.constant(&Tensor::full(&[m, 1], 1.0));
        self.matmul(ones, r)
    }

    /// relu(x) - slope * relu(-x): keeps a small gradient on the negative
    /// side so stacked activations cannot die wholesale.
    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let pos = self.relu(x);
        let nx = self.neg(x);
        let neg = self.relu(nx);
        let scaled = self.mul_scalar(neg, slope);
        self.sub(pos, scaled).expect("same shape by construction")
    }

    /// Pairwise cosine similarities between rows of a[m×d] and rows of
    /// b[n×d], eps-guarded row norms.
    pub fn cosine_matrix(&mut self, a: Var, b: Var, eps: f64) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(TensorError::ShapeMismatch {
                op: "cosine_matrix",
                lhs: sa,
                rhs: sb,
            });
        }
        let na = self.l2_normalize_rows(a, eps)?;
        let nb = self.l2_normalize_rows(b, eps)?;
        let nbt = self.transpose(nb)?;
        self.matmul(na, nbt)
    }

    /// log Σ exp along `axis`, max-subtracted.
    pub fn logsumexp_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis("logsumexp_axis", &shape, axis)?;
        if shape.len() != 2 {
            return Err(TensorError::RankMismatch {
                op: "logsumexp_axis",
                expected: 2,
                shape,
            });
        }
        let (m, n) = (shape[0], shape[1]);
        let mx = self.max_axis(x, axis)?;
        let wide = if axis == 1 {
            self.broadcast_col(mx, n)?
        } else {
            self.broadcast_row(mx, m)?
        };
        let shifted = self.sub(x, wide)?;
        let e = self.exp(shifted);
        let s = self.sum_axis(e, axis)?;
        let l = self.log(s);
        self.add(l, mx)
    }
}
