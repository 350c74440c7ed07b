use super::kernels::{bilinear_taps, col2im, gemm, im2col, ConvGeom, MatRef};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias {
        x: Var,
        bias: Var,
    },
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Softplus(Var),
    Ln(Var),
    Powf(Var, f64),
    Sum(Var),
    Conv2d {
        input: Var,
        kernel: Var,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    MaxPool2 {
        input: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool(Var),
    GridSample {
        input: Var,
        grid: Var,
    },
    ConcatCols(Vec<Var>),
    SoftmaxXent {
        logits: Var,
        probs: Vec<f64>,
        targets: Vec<f64>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddBias { .. } => "add_bias",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Relu(..) => "relu",
            Op::Softplus(..) => "softplus",
            Op::Ln(..) => "ln",
            Op::Powf(..) => "powf",
            Op::Sum(..) => "sum",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool2 { .. } => "maxpool2",
            Op::GlobalAvgPool(..) => "global_avg_pool",
            Op::GridSample { .. } => "grid_sample",
            Op::ConcatCols(..) => "concat_cols",
            Op::SoftmaxXent { .. } => "softmax_cross_entropy",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of a forward computation.
///
/// Entries are stored in creation order, which is a topological order; a
/// backward pass walks them once in reverse.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
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

    /// Records a leaf.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated by the last [`Tape::backward`], if any reached `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient as a tensor shaped like the value; zeros when none reached `v`.
    pub fn grad_tensor(&self, v: Var) -> Tensor {
        let shape = self.shape(v).to_vec();
        match self.grad(v) {
            Some(g) => Tensor::new(shape, g.to_vec()).expect("grad shape"),
            None => Tensor::zeros(&shape),
        }
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let src = self.value(x);
        let out = Tensor::new(
            src.shape().to_vec(),
            src.data().iter().map(|&v| f(v)).collect(),
        )
        .expect("same shape");
        let rg = self.requires_grad(x);
        self.push(out, op, rg)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let out = Tensor::new(va.shape().to_vec(), data).expect("same shape");
        let rg = self.any_grad(&[a, b]);
        self.push(out, op, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", sa, sb));
        }
        let (m, p, q) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * q];
        gemm(
            1.0,
            MatRef::new(self.value(a).data(), m, p),
            MatRef::new(self.value(b).data(), p, q),
            0.0,
            &mut out,
        );
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, q], out)?, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.binary(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.binary(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.binary(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    /// Adds a per-channel bias along axis 1 (`[N, C, ...] + [C]`).
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x).to_vec(), self.shape(bias).to_vec());
        if sx.len() < 2 || sb.len() != 1 || sb[0] != sx[1] {
            return Err(Error::dim("add_bias", &sx, &sb));
        }
        let inner: usize = sx[2..].iter().product();
        let b = self.value(bias).data();
        let mut data = self.value(x).data().to_vec();
        for (plane, chunk) in data.chunks_exact_mut(inner).enumerate() {
            let bv = b[plane % sx[1]];
            chunk.iter_mut().for_each(|v| *v += bv);
        }
        let rg = self.any_grad(&[x, bias]);
        Ok(self.push(Tensor::new(sx, data)?, Op::AddBias { x, bias }, rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, Op::Scale(x, s), |v| v * s)
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, Op::AddScalar(x), |v| v + s)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| v.max(0.0))
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Op::Softplus(x), softplus)
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, Op::Ln(x), f64::ln)
    }

    pub fn powf(&mut self, x: Var, p: f64) -> Var {
        self.unary(x, Op::Powf(x, p), |v| v.powf(p))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.requires_grad(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Cross-correlation of `[N, Cin, H, W]` with `[Cout, Cin, kh, kw]`.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (si, sk) = (self.shape(input).to_vec(), self.shape(kernel).to_vec());
        if si.len() != 4 || sk.len() != 4 || si[1] != sk[1] {
            return Err(Error::dim("conv2d", &si, &sk));
        }
        if stride == 0 {
            return Err(Error::Config("conv2d stride must be positive".into()));
        }
        let (n, cin, h, w) = (si[0], si[1], si[2], si[3]);
        let (cout, kh, kw) = (sk[0], sk[2], sk[3]);
        let (ph, pw) = (h + 2 * padding, w + 2 * padding);
        if kh > ph || kw > pw {
            return Err(Error::Config(format!(
                "conv2d kernel {kh}x{kw} larger than padded input {ph}x{pw}"
            )));
        }
        if (ph - kh) % stride != 0 || (pw - kw) % stride != 0 {
            return Err(Error::Config(format!(
                "conv2d output extent not integral: ({ph}-{kh})/{stride}, ({pw}-{kw})/{stride}"
            )));
        }
        let geom = ConvGeom {
            cin,
            h,
            w,
            kh,
            kw,
            stride,
            pad: padding,
            oh: (ph - kh) / stride + 1,
            ow: (pw - kw) / stride + 1,
        };
        let (patch, hw) = (geom.patch(), geom.out_len());
        let img_len = cin * h * w;
        let mut cols = vec![0.0; n * patch * hw];
        let mut out = vec![0.0; n * cout * hw];
        {
            let x = self.value(input).data();
            let k = self.value(kernel).data();
            for b in 0..n {
                let col = &mut cols[b * patch * hw..(b + 1) * patch * hw];
                im2col(&x[b * img_len..(b + 1) * img_len], &geom, col);
                gemm(
                    1.0,
                    MatRef::new(k, cout, patch),
                    MatRef::new(col, patch, hw),
                    0.0,
                    &mut out[b * cout * hw..(b + 1) * cout * hw],
                );
            }
        }
        let rg = self.any_grad(&[input, kernel]);
        let value = Tensor::new(vec![n, cout, geom.oh, geom.ow], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                geom,
                cols,
            },
            rg,
        ))
    }

    /// 2x2 max pooling with stride 2; ties go to the smallest flat index.
    pub fn maxpool2(&mut self, input: Var) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if s.len() != 4 {
            return Err(Error::dim("maxpool2", &s, &[0, 0, 0, 0]));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Config(format!(
                "maxpool2 needs even extents, got {h}x{w}"
            )));
        }
        let (oh, ow) = (h / 2, w / 2);
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let first = base + 2 * oy * w + 2 * ox;
                    let mut best = first;
                    for idx in [first + 1, first + w, first + w + 1] {
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best);
                }
            }
        }
        let rg = self.requires_grad(input);
        Ok(self.push(
            Tensor::new(vec![n, c, oh, ow], out)?,
            Op::MaxPool2 { input, argmax },
            rg,
        ))
    }

    /// Mean over the spatial axes: `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if s.len() != 4 {
            return Err(Error::dim("global_avg_pool", &s, &[0, 0, 0, 0]));
        }
        let hw = s[2] * s[3];
        let out = self
            .value(input)
            .data()
            .chunks_exact(hw)
            .map(|p| p.iter().sum::<f64>() / hw as f64)
            .collect();
        let rg = self.requires_grad(input);
        Ok(self.push(
            Tensor::new(vec![s[0], s[1]], out)?,
            Op::GlobalAvgPool(input),
            rg,
        ))
    }

    /// Bilinear resampling with align-corners coordinates and border clamping.
    ///
    /// `grid` is `[N, H', W', 2]` holding `(x, y)` pairs in `[-1, 1]`.
    pub fn grid_sample(&mut self, input: Var, grid: Var) -> Result<Var> {
        let (si, sg) = (self.shape(input).to_vec(), self.shape(grid).to_vec());
        if si.len() != 4 || sg.len() != 4 || sg[3] != 2 || sg[0] != si[0] {
            return Err(Error::dim("grid_sample", &si, &sg));
        }
        let (n, c, h, w) = (si[0], si[1], si[2], si[3]);
        let (oh, ow) = (sg[1], sg[2]);
        let x = self.value(input).data();
        let g = self.value(grid).data();
        let mut out = vec![0.0; n * c * oh * ow];
        for b in 0..n {
            for p in 0..oh * ow {
                let gx = g[(b * oh * ow + p) * 2];
                let gy = g[(b * oh * ow + p) * 2 + 1];
                let (x0, x1, fx, _) = bilinear_taps(gx, w);
                let (y0, y1, fy, _) = bilinear_taps(gy, h);
                for ch in 0..c {
                    let plane = &x[(b * c + ch) * h * w..(b * c + ch + 1) * h * w];
                    let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                    let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                    out[(b * c + ch) * oh * ow + p] = top * (1.0 - fy) + bot * fy;
                }
            }
        }
        let rg = self.any_grad(&[input, grid]);
        Ok(self.push(
            Tensor::new(vec![n, c, oh, ow], out)?,
            Op::GridSample { input, grid },
            rg,
        ))
    }

    /// Concatenates `[N, d_i]` matrices along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Usage("concat of zero tensors".into()))?;
        let rows = self.shape(*first)[0];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != rows {
                return Err(Error::dim("concat_cols", self.shape(*first), s));
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &wd) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * wd..(r + 1) * wd]);
            }
        }
        let rg = self.any_grad(parts);
        Ok(self.push(
            Tensor::new(vec![rows, total], data)?,
            Op::ConcatCols(parts.to_vec()),
            rg,
        ))
    }

    /// Mean over rows of `-sum_k t_k log softmax(z)_k`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &Tensor) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || targets.shape() != s.as_slice() {
            return Err(Error::dim("softmax_cross_entropy", &s, targets.shape()));
        }
        let (n, l) = (s[0], s[1]);
        for (r, row) in targets.data().chunks_exact(l).enumerate() {
            let total: f64 = row.iter().sum();
            if (total - 1.0).abs() > 1e-9 {
                return Err(Error::Validation(format!(
                    "target row {r} sums to {total}, expected 1"
                )));
            }
        }
        let z = self.value(logits).data();
        let mut probs = vec![0.0; n * l];
        let mut loss = 0.0;
        for r in 0..n {
            let row = &z[r * l..(r + 1) * l];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
            for k in 0..l {
                let logp = row[k] - lse;
                probs[r * l + k] = logp.exp();
                loss -= targets.data()[r * l + k] * logp;
            }
        }
        let rg = self.requires_grad(logits);
        Ok(self.push(
            Tensor::scalar(loss / n as f64),
            Op::SoftmaxXent {
                logits,
                probs,
                targets: targets.data().to_vec(),
            },
            rg,
        ))
    }

    /// Reverse-mode sweep from a scalar root.
    ///
    /// Gradients from any previous call are discarded first.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if root.0 >= self.nodes.len() {
            return Err(Error::Usage("backward root is not on this tape".into()));
        }
        if !self.nodes[root.0].value.is_scalar() {
            return Err(Error::Usage(format!(
                "backward needs a scalar root, got shape {:?}",
                self.nodes[root.0].value.shape()
            )));
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[root.0] = Some(vec![1.0]);
        let Tape { nodes, grads } = self;
        for i in (0..=root.0).rev() {
            if !nodes[i].requires_grad || matches!(nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            backprop(nodes, grads, i, &g);
            grads[i] = Some(g);
        }
        Ok(())
    }
}

pub(crate) fn softplus(v: f64) -> f64 {
    v.max(0.0) + (-v.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
    if !nodes[v.0].requires_grad {
        return;
    }
    let len = nodes[v.0].value.len();
    let buf = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
    f(buf);
}

/// `d += scale * g`, taking a copy of `g` when `v` has no gradient yet.
fn accumulate_scaled(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    v: Var,
    g: &[f64],
    scale: f64,
) {
    if !nodes[v.0].requires_grad {
        return;
    }
    match &mut grads[v.0] {
        Some(d) => add_into(d, g, scale),
        slot @ None => *slot = Some(g.iter().map(|&x| x * scale).collect()),
    }
}

fn backprop(nodes: &[Node], grads: &mut [Option<Vec<f64>>], i: usize, g: &[f64]) {
    let node = &nodes[i];
    let val = |v: Var| nodes[v.0].value.data();
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, p) = (nodes[a.0].value.shape()[0], nodes[a.0].value.shape()[1]);
            let q = nodes[b.0].value.shape()[1];
            let dc = MatRef::new(g, m, q);
            accumulate(nodes, grads, *a, |da| {
                gemm(1.0, dc, MatRef::new(val(*b), p, q).t(), 1.0, da)
            });
            accumulate(nodes, grads, *b, |db| {
                gemm(1.0, MatRef::new(val(*a), m, p).t(), dc, 1.0, db)
            });
        }
        Op::Add(a, b) => {
            accumulate_scaled(nodes, grads, *a, g, 1.0);
            accumulate_scaled(nodes, grads, *b, g, 1.0);
        }
        Op::Sub(a, b) => {
            accumulate_scaled(nodes, grads, *a, g, 1.0);
            accumulate_scaled(nodes, grads, *b, g, -1.0);
        }
        Op::Mul(a, b) => {
            accumulate(nodes, grads, *a, |d| {
                for ((d, &gv), &bv) in d.iter_mut().zip(g).zip(val(*b)) {
                    *d += gv * bv;
                }
            });
            accumulate(nodes, grads, *b, |d| {
                for ((d, &gv), &av) in d.iter_mut().zip(g).zip(val(*a)) {
                    *d += gv * av;
                }
            });
        }
        Op::AddBias { x, bias } => {
            let s = nodes[x.0].value.shape();
            let (c, inner) = (s[1], s[2..].iter().product::<usize>());
            accumulate_scaled(nodes, grads, *x, g, 1.0);
            accumulate(nodes, grads, *bias, |d| {
                for (plane, chunk) in g.chunks_exact(inner).enumerate() {
                    d[plane % c] += chunk.iter().sum::<f64>();
                }
            });
        }
        Op::Scale(x, s) => accumulate_scaled(nodes, grads, *x, g, *s),
        Op::AddScalar(x) => accumulate_scaled(nodes, grads, *x, g, 1.0),
        Op::Relu(x) => accumulate(nodes, grads, *x, |d| {
            for ((d, &gv), &xv) in d.iter_mut().zip(g).zip(val(*x)) {
                if xv > 0.0 {
                    *d += gv;
                }
            }
        }),
        Op::Softplus(x) => accumulate(nodes, grads, *x, |d| {
            for ((d, &gv), &xv) in d.iter_mut().zip(g).zip(val(*x)) {
                *d += gv * sigmoid(xv);
            }
        }),
        Op::Ln(x) => accumulate(nodes, grads, *x, |d| {
            for ((d, &gv), &xv) in d.iter_mut().zip(g).zip(val(*x)) {
                *d += gv / xv;
            }
        }),
        Op::Powf(x, p) => accumulate(nodes, grads, *x, |d| {
            for ((d, &gv), &xv) in d.iter_mut().zip(g).zip(val(*x)) {
                *d += gv * p * xv.powf(p - 1.0);
            }
        }),
        Op::Sum(x) => accumulate(nodes, grads, *x, |d| {
            for d in d.iter_mut() {
                *d += g[0];
            }
        }),
        Op::Conv2d {
            input,
            kernel,
            geom,
            cols,
        } => {
            let n = nodes[input.0].value.shape()[0];
            let cout = nodes[kernel.0].value.shape()[0];
            let (patch, hw) = (geom.patch(), geom.out_len());
            accumulate(nodes, grads, *kernel, |dk| {
                for b in 0..n {
                    gemm(
                        1.0,
                        MatRef::new(&g[b * cout * hw..(b + 1) * cout * hw], cout, hw),
                        MatRef::new(&cols[b * patch * hw..(b + 1) * patch * hw], patch, hw).t(),
                        1.0,
                        dk,
                    );
                }
            });
            accumulate(nodes, grads, *input, |dx| {
                let k = val(*kernel);
                let img_len = geom.cin * geom.h * geom.w;
                let mut dcols = vec![0.0; patch * hw];
                for b in 0..n {
                    gemm(
                        1.0,
                        MatRef::new(k, cout, patch).t(),
                        MatRef::new(&g[b * cout * hw..(b + 1) * cout * hw], cout, hw),
                        0.0,
                        &mut dcols,
                    );
                    col2im(&dcols, geom, &mut dx[b * img_len..(b + 1) * img_len]);
                }
            });
        }
        Op::MaxPool2 { input, argmax } => accumulate(nodes, grads, *input, |d| {
            for (&src, &gv) in argmax.iter().zip(g) {
                d[src] += gv;
            }
        }),
        Op::GlobalAvgPool(x) => {
            let s = nodes[x.0].value.shape();
            let hw = s[2] * s[3];
            accumulate(nodes, grads, *x, |d| {
                for (plane, &gv) in d.chunks_exact_mut(hw).zip(g) {
                    let share = gv / hw as f64;
                    plane.iter_mut().for_each(|v| *v += share);
                }
            });
        }
        Op::GridSample { input, grid } => {
            let si = nodes[input.0].value.shape();
            let (n, c, h, w) = (si[0], si[1], si[2], si[3]);
            let so = node.value.shape();
            let (oh, ow) = (so[2], so[3]);
            let gd = val(*grid);
            accumulate(nodes, grads, *input, |dx| {
                for b in 0..n {
                    for p in 0..oh * ow {
                        let (x0, x1, fx, _) = bilinear_taps(gd[(b * oh * ow + p) * 2], w);
                        let (y0, y1, fy, _) = bilinear_taps(gd[(b * oh * ow + p) * 2 + 1], h);
                        for ch in 0..c {
                            let gv = g[(b * c + ch) * oh * ow + p];
                            let plane = &mut dx[(b * c + ch) * h * w..(b * c + ch + 1) * h * w];
                            plane[y0 * w + x0] += gv * (1.0 - fx) * (1.0 - fy);
                            plane[y0 * w + x1] += gv * fx * (1.0 - fy);
                            plane[y1 * w + x0] += gv * (1.0 - fx) * fy;
                            plane[y1 * w + x1] += gv * fx * fy;
                        }
                    }
                }
            });
            let xin = val(*input);
            accumulate(nodes, grads, *grid, |dg| {
                for b in 0..n {
                    for p in 0..oh * ow {
                        let (x0, x1, fx, sx) = bilinear_taps(gd[(b * oh * ow + p) * 2], w);
                        let (y0, y1, fy, sy) = bilinear_taps(gd[(b * oh * ow + p) * 2 + 1], h);
                        let (mut gx, mut gy) = (0.0, 0.0);
                        for ch in 0..c {
                            let gv = g[(b * c + ch) * oh * ow + p];
                            let plane = &xin[(b * c + ch) * h * w..(b * c + ch + 1) * h * w];
                            let (v00, v01) = (plane[y0 * w + x0], plane[y0 * w + x1]);
                            let (v10, v11) = (plane[y1 * w + x0], plane[y1 * w + x1]);
                            gx += gv * ((1.0 - fy) * (v01 - v00) + fy * (v11 - v10));
                            gy += gv * ((1.0 - fx) * (v10 - v00) + fx * (v11 - v01));
                        }
                        dg[(b * oh * ow + p) * 2] += gx * sx;
                        dg[(b * oh * ow + p) * 2 + 1] += gy * sy;
                    }
                }
            });
        }
        Op::ConcatCols(parts) => {
            let rows = node.value.shape()[0];
            let total = node.value.shape()[1];
            let mut offset = 0;
            for &p in parts {
                let wd = nodes[p.0].value.shape()[1];
                accumulate(nodes, grads, p, |d| {
                    for r in 0..rows {
                        add_into(
                            &mut d[r * wd..(r + 1) * wd],
                            &g[r * total + offset..r * total + offset + wd],
                            1.0,
                        );
                    }
                });
                offset += wd;
            }
        }
        Op::SoftmaxXent {
            logits,
            probs,
            targets,
        } => {
            let s = nodes[logits.0].value.shape();
            let (n, l) = (s[0], s[1]);
            let scale = g[0] / n as f64;
            accumulate(nodes, grads, *logits, |d| {
                for r in 0..n {
                    let t = &targets[r * l..(r + 1) * l];
                    let mass: f64 = t.iter().sum();
                    for k in 0..l {
                        d[r * l + k] += scale * (probs[r * l + k] * mass - t[k]);
                    }
                }
            });
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64], s: f64) {
    for (d, &v) in dst.iter_mut().zip(src) {
        *d += s * v;
    }
}
