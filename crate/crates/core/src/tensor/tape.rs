use super::kernels::{gemm, gemm_abt, with_scratch};
use super::{Result, Tensor, TensorError};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    MatMul(Var, Var),
    Conv2d { x: Var, k: Var, b: Option<Var> },
    AddChannelBias(Var, Var),
    Relu(Var),
    Softplus(Var),
    Exp(Var),
    Log(Var),
    Pow(Var, f64),
    Sum(Var),
    Mean(Var),
    ChannelSoftmax(Var),
    MaxPool2 { x: Var, argmax: Vec<usize> },
    Upsample2(Var),
    Concat(Vec<Var>),
    Slice { x: Var, start: usize },
    Tile(Var),
    SpatialMean(Var),
    Reshape(Var),
    ColumnNormalize { x: Var, classes: usize },
    PixelMatVec { w: Var, p: Var },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Linear record of primitive applications for one forward/backward pass.
///
/// Nodes are appended in evaluation order, so inputs always precede the
/// nodes that consume them and the backward sweep is a reverse scan.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    conv_grad_scale: f64,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Valid output range `[lo, hi)` along one axis for a kernel offset `d`.
fn shifted_range(len: usize, d: isize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (len as isize - d).min(len as isize).max(0) as usize;
    (lo, hi.max(lo))
}

/// Unfolds (C_in, H, W) into `cols` as (C_in*9, H*W), zero padded.
fn im2col(x: &[f64], cin: usize, h: usize, w: usize, cols: &mut [f64]) {
    let hw = h * w;
    for ci in 0..cin {
        let xi = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            let dy = ky as isize - 1;
            let (y0, y1) = shifted_range(h, dy);
            for kx in 0..3 {
                let dx = kx as isize - 1;
                let (x0, x1) = shifted_range(w, dx);
                let row = &mut cols[((ci * 3 + ky) * 3 + kx) * hw..][..hw];
                row[..y0 * w].fill(0.0);
                row[y1 * w..].fill(0.0);
                for y in y0..y1 {
                    let sy = (y as isize + dy) as usize;
                    let sx0 = (x0 as isize + dx) as usize;
                    let r = &mut row[y * w..(y + 1) * w];
                    r[..x0].fill(0.0);
                    r[x1..].fill(0.0);
                    r[x0..x1].copy_from_slice(&xi[sy * w + sx0..sy * w + sx0 + (x1 - x0)]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds columns back into (C_in, H, W).
fn col2im(cols: &[f64], cin: usize, h: usize, w: usize, gx: &mut [f64]) {
    let hw = h * w;
    for ci in 0..cin {
        let gxi = &mut gx[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            let dy = ky as isize - 1;
            let (y0, y1) = shifted_range(h, dy);
            for kx in 0..3 {
                let dx = kx as isize - 1;
                let (x0, x1) = shifted_range(w, dx);
                let row = &cols[((ci * 3 + ky) * 3 + kx) * hw..][..hw];
                for y in y0..y1 {
                    let sy = (y as isize + dy) as usize;
                    let sx0 = (x0 as isize + dx) as usize;
                    let dst = &mut gxi[sy * w + sx0..sy * w + sx0 + (x1 - x0)];
                    for (a, b) in dst.iter_mut().zip(&row[y * w + x0..y * w + x1]) {
                        *a += b;
                    }
                }
            }
        }
    }
}

fn conv3x3_forward(x: &[f64], cin: usize, h: usize, w: usize, k: &[f64], out: &mut [f64]) {
    let hw = h * w;
    let kk = cin * 9;
    let cout = out.len() / hw;
    with_scratch(kk * hw, |cols| {
        im2col(x, cin, h, w, cols);
        gemm(cout, hw, kk, k, kk, 1, cols, out);
    });
}

#[allow(clippy::too_many_arguments)]
fn conv3x3_backward(
    x: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    k: &[f64],
    g: &[f64],
    gx: Option<&mut [f64]>,
    gk: Option<&mut [f64]>,
) {
    let hw = h * w;
    let kk = cin * 9;
    let cout = g.len() / hw;
    if let Some(gk) = gk {
        with_scratch(kk * hw, |cols| {
            im2col(x, cin, h, w, cols);
            gemm_abt(cout, kk, hw, g, cols, gk);
        });
    }
    if let Some(gx) = gx {
        with_scratch(kk * hw, |dcols| {
            dcols.fill(0.0);
            gemm(kk, hw, cout, k, 1, kk, g, dcols);
            col2im(dcols, cin, h, w, gx);
        });
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            conv_grad_scale: 1.0,
        }
    }

    /// Fault-injection hook: scales every conv2d kernel gradient. Used by the
    /// self-test to prove the gradient checker detects a wrong derivative.
    pub fn set_conv_grad_scale(&mut self, scale: f64) {
        self.conv_grad_scale = scale;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            shape,
            data,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(
        &mut self,
        name: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        op: Op,
        inputs: &[Var],
    ) -> Result<Var> {
        check_finite(name, &data)?;
        Ok(self.push(shape, data, op, inputs))
    }

    /// Records a leaf; it is differentiated iff `t.requires_grad`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            data: t.data().to_vec(),
            op: Op::Leaf,
            requires_grad: t.requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a trainable leaf regardless of the tensor's flag.
    pub fn param(&mut self, t: &Tensor) -> Var {
        let v = self.leaf(t);
        self.nodes[v.0].requires_grad = true;
        v
    }

    pub fn constant(&mut self, t: &Tensor) -> Var {
        let v = self.leaf(t);
        self.nodes[v.0].requires_grad = false;
        v
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].data[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.data.clone()).expect("node shape invariant")
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward root with respect to `v`, if `v` is a
    /// differentiable leaf.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn chw(&self, op: &'static str, v: Var) -> Result<(usize, usize, usize)> {
        match *self.shape(v) {
            [c, h, w] => Ok((c, h, w)),
            ref s => Err(TensorError::InvalidArgument {
                op,
                reason: format!("expected (C, H, W), got {s:?}"),
            }),
        }
    }

    fn zip_map(&mut self, name: &'static str, a: Var, b: Var, f: fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let data = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| f(*x, *y))
            .collect();
        let shape = self.shape(a).to_vec();
        self.push_checked(name, shape, data, op, &[a, b])
    }

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let data = self.value(a).iter().map(|x| f(*x)).collect();
        let shape = self.shape(a).to_vec();
        self.push_checked(name, shape, data, op, &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        self.unary("add_scalar", a, |x| x + s, Op::AddScalar(a))
    }

    pub fn mul_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        self.unary("mul_scalar", a, |x| x * s, Op::MulScalar(a, s))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.mul_scalar(a, -1.0)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary("softplus", a, softplus, Op::Softplus(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary("log", a, f64::ln, Op::Log(a))
    }

    /// Elementwise `a^q`. The derivative at `a == 0` with `q < 1` is taken
    /// as 0 instead of infinity.
    pub fn pow(&mut self, a: Var, q: f64) -> Result<Var> {
        self.unary("pow", a, |x| x.powf(q), Op::Pow(a, q))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).iter().sum::<f64>();
        self.push_checked("sum", vec![], vec![s], Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(TensorError::InvalidArgument {
                op: "mean",
                reason: "empty tensor".into(),
            });
        }
        let s = self.value(a).iter().sum::<f64>() / n as f64;
        self.push_checked("mean", vec![], vec![s], Op::Mean(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(a).len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(a).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let data = self.value(a).to_vec();
        Ok(self.push(shape.to_vec(), data, Op::Reshape(a), &[a]))
    }

    /// (m, k) x (k, n) -> (m, n)
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k, n) = match (self.shape(a), self.shape(b)) {
            (&[m, k], &[k2, n]) if k == k2 => (m, k, n),
            (sa, sb) => {
                return Err(TensorError::ShapeMismatch {
                    op: "matmul",
                    lhs: sa.to_vec(),
                    rhs: sb.to_vec(),
                })
            }
        };
        let mut out = vec![0.0; m * n];
        gemm(m, n, k, self.value(a), k, 1, self.value(b), &mut out);
        self.push_checked("matmul", vec![m, n], out, Op::MatMul(a, b), &[a, b])
    }

    /// 3x3 convolution, stride 1, zero padding 1 (spatial size preserved).
    /// `x`: (C_in, H, W), `k`: (C_out, C_in, 3, 3), `b`: (C_out).
    pub fn conv2d(&mut self, x: Var, k: Var, b: Option<Var>) -> Result<Var> {
        let (cin, h, w) = self.chw("conv2d", x)?;
        let cout = match *self.shape(k) {
            [co, ci, 3, 3] if ci == cin => co,
            ref s => {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d",
                    lhs: self.shape(x).to_vec(),
                    rhs: s.to_vec(),
                })
            }
        };
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d",
                    lhs: vec![cout],
                    rhs: self.shape(b).to_vec(),
                });
            }
        }
        let hw = h * w;
        let mut out = vec![0.0; cout * hw];
        if let Some(b) = b {
            for (co, bias) in self.value(b).iter().enumerate() {
                out[co * hw..(co + 1) * hw].fill(*bias);
            }
        }
        conv3x3_forward(self.value(x), cin, h, w, self.value(k), &mut out);
        let mut inputs = vec![x, k];
        inputs.extend(b);
        self.push_checked("conv2d", vec![cout, h, w], out, Op::Conv2d { x, k, b }, &inputs)
    }

    /// Adds a per-channel bias `b` (C) to `x` (C, ...).
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let c = self.shape(x).first().copied().unwrap_or(0);
        if self.shape(b) != [c] || c == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "add_channel_bias",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let per = self.value(x).len() / c;
        let bv = self.value(b);
        let data = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, v)| v + bv[i / per])
            .collect();
        let shape = self.shape(x).to_vec();
        self.push_checked("add_channel_bias", shape, data, Op::AddChannelBias(x, b), &[x, b])
    }

    /// Softmax over the leading (channel) axis at every pixel of (C, H, W).
    pub fn channel_softmax(&mut self, a: Var) -> Result<Var> {
        let (c, h, w) = self.chw("channel_softmax", a)?;
        let hw = h * w;
        let v = self.value(a);
        let mut out = vec![0.0; c * hw];
        for p in 0..hw {
            let mx = (0..c).map(|j| v[j * hw + p]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..c {
                let e = (v[j * hw + p] - mx).exp();
                out[j * hw + p] = e;
                z += e;
            }
            for j in 0..c {
                out[j * hw + p] /= z;
            }
        }
        self.push_checked("channel_softmax", vec![c, h, w], out, Op::ChannelSoftmax(a), &[a])
    }

    /// 2x2 max pooling with stride 2; H and W must be even.
    pub fn maxpool2(&mut self, a: Var) -> Result<Var> {
        let (c, h, w) = self.chw("maxpool2", a)?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(TensorError::InvalidArgument {
                op: "maxpool2",
                reason: format!("odd spatial size {h}x{w}"),
            });
        }
        let (oh, ow) = (h / 2, w / 2);
        let v = self.value(a);
        let mut out = vec![0.0; c * oh * ow];
        let mut argmax = vec![0; c * oh * ow];
        for ch in 0..c {
            for y in 0..oh {
                for x in 0..ow {
                    let mut best = ch * h * w + (2 * y) * w + 2 * x;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = ch * h * w + (2 * y + dy) * w + 2 * x + dx;
                        if v[idx] > v[best] {
                            best = idx;
                        }
                    }
                    let o = (ch * oh + y) * ow + x;
                    out[o] = v[best];
                    argmax[o] = best;
                }
            }
        }
        self.push_checked("maxpool2", vec![c, oh, ow], out, Op::MaxPool2 { x: a, argmax }, &[a])
    }

    /// Nearest-neighbour 2x upsampling of (C, H, W).
    pub fn upsample2(&mut self, a: Var) -> Result<Var> {
        let (c, h, w) = self.chw("upsample_nearest2", a)?;
        let (oh, ow) = (2 * h, 2 * w);
        let v = self.value(a);
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for y in 0..oh {
                for x in 0..ow {
                    out[(ch * oh + y) * ow + x] = v[(ch * h + y / 2) * w + x / 2];
                }
            }
        }
        self.push_checked("upsample_nearest2", vec![c, oh, ow], out, Op::Upsample2(a), &[a])
    }

    /// Concatenates tensors along the leading axis; trailing dims must agree.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| TensorError::InvalidArgument {
            op: "concat_channels",
            reason: "no inputs".into(),
        })?;
        let tail = self.shape(first)[1..].to_vec();
        let mut c = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_channels",
                    lhs: self.shape(first).to_vec(),
                    rhs: s.to_vec(),
                });
            }
            c += s[0];
            data.extend_from_slice(self.value(p));
        }
        let mut shape = vec![c];
        shape.extend(tail);
        Ok(self.push(shape, data, Op::Concat(parts.to_vec()), parts))
    }

    /// Channels `start..start+len` along the leading axis.
    pub fn slice_channels(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.is_empty() || start + len > s[0] || len == 0 {
            return Err(TensorError::InvalidArgument {
                op: "slice_channels",
                reason: format!("range {start}..{} out of bounds for {s:?}", start + len),
            });
        }
        let per = numel(&s[1..]);
        let data = self.value(a)[start * per..(start + len) * per].to_vec();
        let mut shape = s;
        shape[0] = len;
        Ok(self.push(shape, data, Op::Slice { x: a, start }, &[a]))
    }

    /// Broadcasts a vector (D) to a (D, H, W) feature map.
    pub fn tile(&mut self, a: Var, h: usize, w: usize) -> Result<Var> {
        let d = match *self.shape(a) {
            [d] => d,
            ref s => {
                return Err(TensorError::InvalidArgument {
                    op: "tile",
                    reason: format!("expected a vector, got {s:?}"),
                })
            }
        };
        let v = self.value(a);
        let mut data = Vec::with_capacity(d * h * w);
        for x in v {
            data.extend(std::iter::repeat_n(*x, h * w));
        }
        Ok(self.push(vec![d, h, w], data, Op::Tile(a), &[a]))
    }

    /// Global average pool (C, H, W) -> (C).
    pub fn spatial_mean(&mut self, a: Var) -> Result<Var> {
        let (c, h, w) = self.chw("spatial_mean", a)?;
        let hw = h * w;
        let data = self
            .value(a)
            .chunks(hw)
            .map(|ch| ch.iter().sum::<f64>() / hw as f64)
            .collect();
        self.push_checked("spatial_mean", vec![c], data, Op::SpatialMean(a), &[a])
    }

    /// Normalizes each per-pixel column of a (C*C, H, W) stack of C x C
    /// matrices (channel `i*C + j` holds entry (i, j)) to sum to one.
    /// Entries must be strictly positive.
    pub fn column_normalize(&mut self, a: Var, classes: usize) -> Result<Var> {
        let (cc, h, w) = self.chw("column_normalize", a)?;
        if cc != classes * classes {
            return Err(TensorError::InvalidArgument {
                op: "column_normalize",
                reason: format!("{cc} channels is not {classes}x{classes}"),
            });
        }
        let v = self.value(a);
        if v.iter().any(|x| *x <= 0.0) {
            return Err(TensorError::InvalidArgument {
                op: "column_normalize",
                reason: "entries must be positive".into(),
            });
        }
        let hw = h * w;
        let mut out = vec![0.0; cc * hw];
        for j in 0..classes {
            for p in 0..hw {
                let s: f64 = (0..classes).map(|i| v[(i * classes + j) * hw + p]).sum();
                for i in 0..classes {
                    let idx = (i * classes + j) * hw + p;
                    out[idx] = v[idx] / s;
                }
            }
        }
        self.push_checked(
            "column_normalize",
            vec![cc, h, w],
            out,
            Op::ColumnNormalize { x: a, classes },
            &[a],
        )
    }

    /// Per-pixel matrix-vector product: `w` (C*C, H, W), `p` (C, H, W);
    /// `out[i] = sum_j w[i, j] * p[j]` at every pixel.
    pub fn pixel_matvec(&mut self, w: Var, p: Var) -> Result<Var> {
        let (c, h, wd) = self.chw("pixel_matvec", p)?;
        if self.shape(w) != [c * c, h, wd] {
            return Err(TensorError::ShapeMismatch {
                op: "pixel_matvec",
                lhs: self.shape(w).to_vec(),
                rhs: self.shape(p).to_vec(),
            });
        }
        let hw = h * wd;
        let (wv, pv) = (self.value(w), self.value(p));
        let mut out = vec![0.0; c * hw];
        for i in 0..c {
            for j in 0..c {
                let wrow = &wv[(i * c + j) * hw..(i * c + j + 1) * hw];
                let prow = &pv[j * hw..(j + 1) * hw];
                for ((o, a), b) in out[i * hw..(i + 1) * hw].iter_mut().zip(wrow).zip(prow) {
                    *o += a * b;
                }
            }
        }
        self.push_checked("pixel_matvec", vec![c, h, wd], out, Op::PixelMatVec { w, p }, &[w, p])
    }

    /// Reverse sweep from a scalar root. Gradients accumulate into every
    /// differentiable node and are retained for leaves.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if numel(self.shape(root)) != 1 {
            return Err(TensorError::NonScalarRoot(self.shape(root).to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if !self.nodes[root.0].requires_grad {
            self.grads = grads;
            return Ok(());
        }
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate_conv(&self, x: Var, k: Var, b: Option<Var>, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let (cin, h, w) = (nodes[x.0].shape[0], nodes[x.0].shape[1], nodes[x.0].shape[2]);
        let mut take = |v: Var| {
            nodes[v.0]
                .requires_grad
                .then(|| grads[v.0].take().unwrap_or_else(|| vec![0.0; nodes[v.0].data.len()]))
        };
        let mut gx = take(x);
        let mut gk = take(k);
        let mut gk_raw = gk.as_ref().map(|s| vec![0.0; s.len()]);
        conv3x3_backward(
            &nodes[x.0].data,
            cin,
            h,
            w,
            &nodes[k.0].data,
            g,
            gx.as_deref_mut(),
            gk_raw.as_deref_mut(),
        );
        if let (Some(gk), Some(raw)) = (gk.as_mut(), gk_raw) {
            for (a, r) in gk.iter_mut().zip(raw) {
                *a += self.conv_grad_scale * r;
            }
        }
        if gx.is_some() {
            grads[x.0] = gx;
        }
        if gk.is_some() {
            grads[k.0] = gk;
        }
        if let Some(b) = b {
            if nodes[b.0].requires_grad {
                let hw = h * w;
                let gb = grads[b.0].get_or_insert_with(|| vec![0.0; nodes[b.0].data.len()]);
                for (co, slot) in gb.iter_mut().enumerate() {
                    *slot += g[co * hw..(co + 1) * hw].iter().sum::<f64>();
                }
            }
        }
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let node = &nodes[i];
        if let Op::Conv2d { x, k, b } = node.op {
            self.propagate_conv(x, k, b, g, grads);
            return;
        }
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].data.len()]);
            f(slot);
        };
        let val = |v: Var| nodes[v.0].data.as_slice();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |ga| {
                    for ((x, gy), bb) in ga.iter_mut().zip(g).zip(bv) {
                        *x += gy * bb;
                    }
                });
                acc(*b, &mut |gb| {
                    for ((x, gy), aa) in gb.iter_mut().zip(g).zip(av) {
                        *x += gy * aa;
                    }
                });
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            }
            Op::MulScalar(a, s) => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += s * y));
            }
            Op::MatMul(a, b) => {
                let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let n = nodes[b.0].shape[1];
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |ga| gemm_abt(m, k, n, g, bv, ga));
                acc(*b, &mut |gb| gemm(k, n, m, av, 1, k, g, gb));
            }
            Op::Conv2d { .. } => unreachable!("handled in propagate_conv"),
            Op::AddChannelBias(x, b) => {
                acc(*x, &mut |gx| gx.iter_mut().zip(g).for_each(|(a, y)| *a += y));
                let c = nodes[b.0].data.len();
                let per = g.len() / c;
                acc(*b, &mut |gb| {
                    for (ch, slot) in gb.iter_mut().enumerate() {
                        *slot += g[ch * per..(ch + 1) * per].iter().sum::<f64>();
                    }
                });
            }
            Op::Relu(a) => {
                let av = val(*a);
                acc(*a, &mut |ga| {
                    for ((x, gy), aa) in ga.iter_mut().zip(g).zip(av) {
                        if *aa > 0.0 {
                            *x += gy;
                        }
                    }
                });
            }
            Op::Softplus(a) => {
                let av = val(*a);
                acc(*a, &mut |ga| {
                    for ((x, gy), aa) in ga.iter_mut().zip(g).zip(av) {
                        *x += gy * sigmoid(*aa);
                    }
                });
            }
            Op::Exp(a) => {
                let out = &node.data;
                acc(*a, &mut |ga| {
                    for ((x, gy), o) in ga.iter_mut().zip(g).zip(out) {
                        *x += gy * o;
                    }
                });
            }
            Op::Log(a) => {
                let av = val(*a);
                acc(*a, &mut |ga| {
                    for ((x, gy), aa) in ga.iter_mut().zip(g).zip(av) {
                        *x += gy / aa;
                    }
                });
            }
            Op::Pow(a, q) => {
                let av = val(*a);
                let q = *q;
                acc(*a, &mut |ga| {
                    for ((x, gy), aa) in ga.iter_mut().zip(g).zip(av) {
                        if *aa == 0.0 && q < 1.0 {
                            continue;
                        }
                        *x += gy * q * aa.powf(q - 1.0);
                    }
                });
            }
            Op::Sum(a) => {
                let g0 = g[0];
                acc(*a, &mut |ga| ga.iter_mut().for_each(|x| *x += g0));
            }
            Op::Mean(a) => {
                let n = nodes[a.0].data.len() as f64;
                let g0 = g[0] / n;
                acc(*a, &mut |ga| ga.iter_mut().for_each(|x| *x += g0));
            }
            Op::ChannelSoftmax(a) => {
                let s = &node.data;
                let c = node.shape[0];
                let hw = s.len() / c;
                acc(*a, &mut |ga| {
                    for p in 0..hw {
                        let dot: f64 = (0..c).map(|j| g[j * hw + p] * s[j * hw + p]).sum();
                        for j in 0..c {
                            ga[j * hw + p] += s[j * hw + p] * (g[j * hw + p] - dot);
                        }
                    }
                });
            }
            Op::MaxPool2 { x, argmax } => {
                acc(*x, &mut |gx| {
                    for (o, src) in argmax.iter().enumerate() {
                        gx[*src] += g[o];
                    }
                });
            }
            Op::Upsample2(a) => {
                let (c, h, w) = (nodes[a.0].shape[0], nodes[a.0].shape[1], nodes[a.0].shape[2]);
                let (oh, ow) = (2 * h, 2 * w);
                acc(*a, &mut |ga| {
                    for ch in 0..c {
                        for y in 0..oh {
                            for x in 0..ow {
                                ga[(ch * h + y / 2) * w + x / 2] += g[(ch * oh + y) * ow + x];
                            }
                        }
                    }
                });
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = nodes[p.0].data.len();
                    let seg = &g[off..off + n];
                    acc(*p, &mut |gp| gp.iter_mut().zip(seg).for_each(|(a, y)| *a += y));
                    off += n;
                }
            }
            Op::Slice { x, start } => {
                let per = numel(&node.shape[1..]);
                let off = start * per;
                acc(*x, &mut |gx| {
                    gx[off..off + g.len()].iter_mut().zip(g).for_each(|(a, y)| *a += y);
                });
            }
            Op::Tile(a) => {
                let hw = node.shape[1] * node.shape[2];
                acc(*a, &mut |ga| {
                    for (d, slot) in ga.iter_mut().enumerate() {
                        *slot += g[d * hw..(d + 1) * hw].iter().sum::<f64>();
                    }
                });
            }
            Op::SpatialMean(a) => {
                let hw = nodes[a.0].shape[1] * nodes[a.0].shape[2];
                acc(*a, &mut |ga| {
                    for (idx, slot) in ga.iter_mut().enumerate() {
                        *slot += g[idx / hw] / hw as f64;
                    }
                });
            }
            Op::ColumnNormalize { x, classes } => {
                let c = *classes;
                let out = &node.data;
                let xv = val(*x);
                let hw = out.len() / (c * c);
                acc(*x, &mut |gx| {
                    for j in 0..c {
                        for p in 0..hw {
                            let s: f64 = (0..c).map(|i| xv[(i * c + j) * hw + p]).sum();
                            let dot: f64 = (0..c)
                                .map(|i| g[(i * c + j) * hw + p] * out[(i * c + j) * hw + p])
                                .sum();
                            for i in 0..c {
                                let idx = (i * c + j) * hw + p;
                                gx[idx] += (g[idx] - dot) / s;
                            }
                        }
                    }
                });
            }
            Op::PixelMatVec { w, p } => {
                let c = nodes[p.0].shape[0];
                let hw = g.len() / c;
                let (wv, pv) = (val(*w), val(*p));
                acc(*w, &mut |gw| {
                    for i in 0..c {
                        for j in 0..c {
                            let base = (i * c + j) * hw;
                            for q in 0..hw {
                                gw[base + q] += g[i * hw + q] * pv[j * hw + q];
                            }
                        }
                    }
                });
                acc(*p, &mut |gp| {
                    for i in 0..c {
                        for j in 0..c {
                            let base = (i * c + j) * hw;
                            for q in 0..hw {
                                gp[j * hw + q] += wv[base + q] * g[i * hw + q];
                            }
                        }
                    }
                });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::zeros(&[2, 3, 3]));
        let s = tape.channel_softmax(x).unwrap();
        assert!(tape.value(s).iter().all(|v| *v == 0.5));
    }

    #[test]
    fn identity_kernel_conv_is_identity() {
        let mut tape = Tape::new();
        let img: Vec<f64> = (0..20).map(|i| i as f64 * 0.3 - 2.0).collect();
        let x = tape.constant(&t(&[1, 4, 5], &img));
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let k = tape.constant(&t(&[1, 1, 3, 3], &k));
        let y = tape.conv2d(x, k, None).unwrap();
        assert_eq!(tape.value(y), img.as_slice());
    }

    #[test]
    fn matmul_by_identity() {
        let mut tape = Tape::new();
        let a = tape.constant(&t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let i = tape.constant(&t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let y = tape.matmul(a, i).unwrap();
        assert_eq!(tape.value(y), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(&Tensor::from_vec(vec![1.0, 2.0, 3.0]));
        let sq = tape.mul(x, x).unwrap();
        let r = tape.sum(sq).unwrap();
        tape.backward(r).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn relu_dead_unit_and_softplus_slope() {
        let mut tape = Tape::new();
        let x = tape.param(&Tensor::scalar(-5.0));
        let r = tape.relu(x).unwrap();
        tape.backward(r).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0]);

        let mut tape = Tape::new();
        let x = tape.param(&Tensor::scalar(0.0));
        let r = tape.softplus(x).unwrap();
        tape.backward(r).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.5]);
    }

    #[test]
    fn diamond_graph_accumulates_both_paths() {
        let mut tape = Tape::new();
        let x = tape.param(&Tensor::scalar(3.0));
        let a = tape.mul(x, x).unwrap();
        let b = tape.mul(x, x).unwrap();
        let r = tape.add(a, b).unwrap();
        tape.backward(r).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[12.0]);
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut tape = Tape::new();
        let a = tape.constant(&Tensor::zeros(&[2]));
        let b = tape.constant(&Tensor::zeros(&[3]));
        let err = tape.add(a, b).unwrap_err();
        assert_eq!(
            err,
            TensorError::ShapeMismatch {
                op: "add",
                lhs: vec![2],
                rhs: vec![3]
            }
        );
        assert!(err.to_string().contains("add"));
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let mut tape = Tape::new();
        let a = tape.constant(&Tensor::scalar(0.0));
        assert_eq!(tape.log(a).unwrap_err(), TensorError::NonFinite { op: "log" });
        let b = tape.constant(&Tensor::scalar(800.0));
        assert!(tape.exp(b).is_err());
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut tape = Tape::new();
        let a = tape.param(&Tensor::zeros(&[2]));
        assert!(matches!(tape.backward(a), Err(TensorError::NonScalarRoot(_))));
    }

    #[test]
    fn pow_gradient_clamped_at_zero() {
        let mut tape = Tape::new();
        let a = tape.param(&Tensor::from_vec(vec![0.0, 0.25]));
        let p = tape.pow(a, 0.5).unwrap();
        let r = tape.sum(p).unwrap();
        tape.backward(r).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[0.0, 1.0]);
    }

    #[test]
    fn maxpool_and_upsample_shapes() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..16).map(f64::from).collect();
        let x = tape.constant(&t(&[1, 4, 4], &data));
        let p = tape.maxpool2(x).unwrap();
        assert_eq!(tape.value(p), &[5.0, 7.0, 13.0, 15.0]);
        let u = tape.upsample2(p).unwrap();
        assert_eq!(tape.shape(u), &[1, 4, 4]);
        assert_eq!(tape.value(u)[0..4], [5.0, 5.0, 7.0, 7.0]);
    }

    #[test]
    fn concat_then_slice_roundtrip() {
        let mut tape = Tape::new();
        let a = tape.constant(&t(&[1, 1, 2], &[1.0, 2.0]));
        let b = tape.constant(&t(&[2, 1, 2], &[3.0, 4.0, 5.0, 6.0]));
        let c = tape.concat_channels(&[a, b]).unwrap();
        assert_eq!(tape.shape(c), &[3, 1, 2]);
        let s = tape.slice_channels(c, 1, 2).unwrap();
        assert_eq!(tape.value(s), &[3.0, 4.0, 5.0, 6.0]);
        assert!(tape.slice_channels(c, 2, 2).is_err());
    }

    #[test]
    fn untracked_graph_backward_is_noop() {
        let mut tape = Tape::new();
        let a = tape.constant(&Tensor::from_vec(vec![1.0, 2.0]));
        let s = tape.sum(a).unwrap();
        tape.backward(s).unwrap();
        assert!(tape.grad(a).is_none());
    }
}
