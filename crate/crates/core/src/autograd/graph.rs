use super::kernels::{self, ConvGeometry};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddScalar(usize),
    MulScalar(usize, f64),
    MatMul { a: usize, b: usize, m: usize, k: usize, n: usize },
    Relu(usize),
    Sigmoid(usize),
    Tanh(usize),
    Exp(usize),
    Softplus(usize),
    Square(usize),
    Softmax { x: usize, axis: usize },
    L2Normalize { x: usize, eps: f64, norm: f64 },
    Sum { x: usize, axis: Option<usize> },
    Mean { x: usize, axis: Option<usize> },
    Max { x: usize, arg: Vec<usize> },
    Concat { xs: Vec<usize>, axis: usize },
    Reshape(usize),
    Narrow { x: usize, axis: usize, start: usize, len: usize },
    Conv2d { x: usize, kernel: usize, geom: ConvGeometry },
    MaxPool2d { x: usize, arg: Vec<usize> },
    AffineGrid { params: usize, h: usize, w: usize },
    Bilinear { fm: usize, grid: usize },
    AttentionMask { grid: usize, total: f64 },
    TextureEncode { x: usize, codewords: usize, smoothing: usize, assign: Vec<f64> },
}

#[derive(Clone, Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run record of executed operations.
///
/// Every operation appends one node; [`Graph::backward`] walks the nodes in
/// exact reverse order, summing contributions into each input's gradient.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    track_branches: bool,
    branch_sig: u64,
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// `(outer, axis_len, inner)` split of a shape around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn add_into(dst: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    dst.get_or_insert_with(|| vec![0.0; len])
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            branch_sig: FNV_OFFSET,
            ..Default::default()
        }
    }

    /// Graph that fingerprints every branch decision taken by non-smooth
    /// operators (ReLU signs, argmax picks, interpolation cells). Used by the
    /// gradient checker to detect perturbations that cross a kink.
    pub fn with_branch_tracking() -> Self {
        Graph {
            track_branches: true,
            ..Self::new()
        }
    }

    pub fn branch_signature(&self) -> u64 {
        self.branch_sig
    }

    fn mix(&mut self, v: u64) {
        self.branch_sig = (self.branch_sig ^ v).wrapping_mul(FNV_PRIME);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// Records a leaf; it receives a gradient iff the tensor requires grad.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    /// Records a leaf that always receives a gradient.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true)
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t.shape().to_vec(), t.into_data(), Op::Leaf, false))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(&n.shape, n.value.clone()).expect("graph nodes hold valid shapes")
    }

    /// Gradient of the last backward pass with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// `b` must equal a trailing sub-shape of `a` (bias-style broadcast).
    fn broadcast_check(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Vec<f64>> {
        self.broadcast_check(op, a, b)?;
        let bv = self.value(b);
        let nb = bv.len();
        Ok(self
            .value(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bv[i % nb]))
            .collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("add", a, b, |x, y| x + y)?;
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(self.shape(a).to_vec(), v, Op::Add(a.0, b.0), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(self.shape(a).to_vec(), v, Op::Sub(a.0, b.0), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(self.shape(a).to_vec(), v, Op::Mul(a.0, b.0), rg))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).iter().map(|x| x + c).collect();
        let rg = self.rg(&[a.0]);
        self.push(self.shape(a).to_vec(), v, Op::AddScalar(a.0), rg)
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).iter().map(|x| x * c).collect();
        let rg = self.rg(&[a.0]);
        self.push(self.shape(a).to_vec(), v, Op::MulScalar(a.0, c), rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..][..n];
            for p in 0..k {
                let x = av[i * k + p];
                if x == 0.0 {
                    continue;
                }
                for (o, &w) in row.iter_mut().zip(&bv[p * n..][..n]) {
                    *o += x * w;
                }
            }
        }
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(vec![m, n], out, Op::MatMul { a: a.0, b: b.0, m, k, n }, rg))
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let v = self.value(a).iter().map(|&x| f(x)).collect();
        let rg = self.rg(&[a.0]);
        self.push(self.shape(a).to_vec(), v, op, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        if self.track_branches {
            let bits: Vec<u64> = self.value(a).iter().map(|&x| (x > 0.0) as u64).collect();
            bits.into_iter().for_each(|b| self.mix(b));
        }
        self.unary(a, Op::Relu(a.0), |x| x.max(0.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a.0), sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a.0), f64::tanh)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a.0), f64::exp)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Op::Softplus(a.0), softplus)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a.0), |x| x * x)
    }

    fn check_axis(&self, op: &'static str, a: Var, axis: usize) -> Result<()> {
        if axis >= self.shape(a).len() {
            return Err(Error::InvalidShape {
                op,
                shape: self.shape(a).to_vec(),
                reason: format!("axis {axis} out of range"),
            });
        }
        Ok(())
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis("softmax", a, axis)?;
        let (outer, len, inner) = split_axis(self.shape(a), axis);
        let x = self.value(a);
        let mut y = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| x[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for j in 0..len {
                    let e = (x[at(j)] - max).exp();
                    y[at(j)] = e;
                    z += e;
                }
                for j in 0..len {
                    y[at(j)] /= z;
                }
            }
        }
        let rg = self.rg(&[a.0]);
        Ok(self.push(self.shape(a).to_vec(), y, Op::Softmax { x: a.0, axis }, rg))
    }

    /// `x / (‖x‖₂ + eps)` over the whole tensor.
    pub fn l2_normalize(&mut self, a: Var, eps: f64) -> Var {
        let norm = self.value(a).iter().map(|v| v * v).sum::<f64>().sqrt();
        let v = self.value(a).iter().map(|x| x / (norm + eps)).collect();
        let rg = self.rg(&[a.0]);
        self.push(self.shape(a).to_vec(), v, Op::L2Normalize { x: a.0, eps, norm }, rg)
    }

    fn reduced_shape(&self, a: Var, axis: Option<usize>) -> Vec<usize> {
        match axis {
            None => Vec::new(),
            Some(ax) => {
                let mut s = self.shape(a).to_vec();
                s.remove(ax);
                s
            }
        }
    }

    fn reduce_sum(&self, a: Var, axis: Option<usize>) -> Vec<f64> {
        let x = self.value(a);
        match axis {
            None => vec![x.iter().sum()],
            Some(ax) => {
                let (outer, len, inner) = split_axis(self.shape(a), ax);
                let mut out = vec![0.0; outer * inner];
                for o in 0..outer {
                    for j in 0..len {
                        let src = &x[(o * len + j) * inner..][..inner];
                        for (d, s) in out[o * inner..][..inner].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
                out
            }
        }
    }

    /// Sum over `axis`, or over everything when `None` (rank-0 result).
    pub fn sum(&mut self, a: Var, axis: Option<usize>) -> Result<Var> {
        if let Some(ax) = axis {
            self.check_axis("sum", a, ax)?;
        }
        let v = self.reduce_sum(a, axis);
        let rg = self.rg(&[a.0]);
        Ok(self.push(self.reduced_shape(a, axis), v, Op::Sum { x: a.0, axis }, rg))
    }

    pub fn mean(&mut self, a: Var, axis: Option<usize>) -> Result<Var> {
        if let Some(ax) = axis {
            self.check_axis("mean", a, ax)?;
        }
        let count = match axis {
            None => self.value(a).len(),
            Some(ax) => self.shape(a)[ax],
        } as f64;
        let v = self.reduce_sum(a, axis).into_iter().map(|s| s / count).collect();
        let rg = self.rg(&[a.0]);
        Ok(self.push(self.reduced_shape(a, axis), v, Op::Mean { x: a.0, axis }, rg))
    }

    /// Maximum along `axis`; ties resolve to the lowest index.
    pub fn max(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis("max", a, axis)?;
        let (outer, len, inner) = split_axis(self.shape(a), axis);
        let x = self.value(a);
        let mut out = vec![f64::NEG_INFINITY; outer * inner];
        let mut arg = vec![0usize; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                for i in 0..inner {
                    let src = (o * len + j) * inner + i;
                    if x[src] > out[o * inner + i] {
                        out[o * inner + i] = x[src];
                        arg[o * inner + i] = src;
                    }
                }
            }
        }
        if self.track_branches {
            arg.clone().into_iter().for_each(|v| self.mix(v as u64));
        }
        let rg = self.rg(&[a.0]);
        Ok(self.push(self.reduced_shape(a, Some(axis)), out, Op::Max { x: a.0, arg }, rg))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| Error::Invalid("concat of zero tensors".into()))?;
        self.check_axis("concat", first, axis)?;
        let base = self.shape(first).to_vec();
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let len = self.shape(x)[axis];
                out.extend_from_slice(&self.value(x)[o * len * inner..][..len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let ids: Vec<usize> = xs.iter().map(|v| v.0).collect();
        let rg = self.rg(&ids);
        Ok(self.push(shape, out, Op::Concat { xs: ids, axis }, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(a).len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(a).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let v = self.value(a).to_vec();
        let rg = self.rg(&[a.0]);
        Ok(self.push(shape.to_vec(), v, Op::Reshape(a.0), rg))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check_axis("narrow", a, axis)?;
        let shape = self.shape(a).to_vec();
        if len == 0 || start + len > shape[axis] {
            return Err(Error::InvalidShape {
                op: "narrow",
                shape,
                reason: format!("range {start}..{} out of bounds on axis {axis}", start + len),
            });
        }
        let (outer, full, inner) = split_axis(&shape, axis);
        let x = self.value(a);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&x[(o * full + start) * inner..][..len * inner]);
        }
        let mut s = shape;
        s[axis] = len;
        let rg = self.rg(&[a.0]);
        Ok(self.push(s, out, Op::Narrow { x: a.0, axis, start, len }, rg))
    }

    /// 2-D convolution of a channel-last `[h, w, c_in]` input with a
    /// `[c_out, c_in, kh, kw]` kernel.
    pub fn conv2d(&mut self, x: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sk) = (self.shape(x), self.shape(kernel));
        if sx.len() != 3 || sk.len() != 4 || sx[2] != sk[1] || stride == 0 {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: sx.to_vec(),
                rhs: sk.to_vec(),
            });
        }
        let geom = ConvGeometry {
            in_h: sx[0],
            in_w: sx[1],
            in_c: sx[2],
            out_c: sk[0],
            kh: sk[2],
            kw: sk[3],
            stride,
            pad,
        };
        if sx[0] + 2 * pad < sk[2] || sx[1] + 2 * pad < sk[3] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: sx.to_vec(),
                rhs: sk.to_vec(),
            });
        }
        let out = kernels::conv2d_forward(self.value(x), self.value(kernel), &geom);
        let rg = self.rg(&[x.0, kernel.0]);
        Ok(self.push(
            vec![geom.out_h(), geom.out_w(), geom.out_c],
            out,
            Op::Conv2d { x: x.0, kernel: kernel.0, geom },
            rg,
        ))
    }

    /// Non-overlapping `window`×`window` max pooling of `[h, w, c]`.
    pub fn maxpool2d(&mut self, x: Var, window: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || window == 0 || s[0] < window || s[1] < window {
            return Err(Error::InvalidShape {
                op: "maxpool2d",
                shape: s,
                reason: format!("window {window} does not fit"),
            });
        }
        let (out, arg) = kernels::maxpool2d_forward(self.value(x), s[0], s[1], s[2], window);
        if self.track_branches {
            arg.iter().for_each(|&v| {
                self.branch_sig = (self.branch_sig ^ v as u64).wrapping_mul(FNV_PRIME);
            });
        }
        let rg = self.rg(&[x.0]);
        Ok(self.push(vec![s[0] / window, s[1] / window, s[2]], out, Op::MaxPool2d { x: x.0, arg }, rg))
    }

    /// `[4]` affine parameters `(s_x, s_y, t_x, t_y)` -> `[h, w, 2]` grid.
    pub fn affine_grid(&mut self, params: Var, h: usize, w: usize) -> Result<Var> {
        if self.value(params).len() != 4 || h == 0 || w == 0 {
            return Err(Error::InvalidShape {
                op: "affine_grid",
                shape: self.shape(params).to_vec(),
                reason: "expected 4 parameters".into(),
            });
        }
        let grid = kernels::affine_grid_forward(self.value(params), h, w);
        let rg = self.rg(&[params.0]);
        Ok(self.push(vec![h, w, 2], grid, Op::AffineGrid { params: params.0, h, w }, rg))
    }

    /// Validates shapes; `Ok(false)` flags a non-finite grid, whose outputs
    /// are NaN so the failure surfaces as a non-finite loss.
    fn grid_check(&self, op: &'static str, fm: Option<Var>, grid: Var) -> Result<bool> {
        let sg = self.shape(grid);
        let bad_fm = fm.is_some_and(|f| self.shape(f).len() != 3);
        if sg.len() != 3 || sg[2] != 2 || bad_fm {
            return Err(Error::ShapeMismatch {
                op,
                lhs: fm.map(|f| self.shape(f).to_vec()).unwrap_or_default(),
                rhs: sg.to_vec(),
            });
        }
        Ok(self.value(grid).iter().all(|v| v.is_finite()))
    }

    fn track_grid(&mut self, grid: Var, hf: usize, wf: usize) {
        if self.track_branches {
            let cells: Vec<i64> = kernels::grid_cells(self.value(grid), hf, wf).collect();
            cells.into_iter().for_each(|c| self.mix(c as u64));
        }
    }

    /// Bilinear sampling (zero padding) of `[hf, wf, d]` at a `[hr, wr, 2]` grid.
    pub fn bilinear_sample(&mut self, fm: Var, grid: Var) -> Result<Var> {
        let finite = self.grid_check("bilinear_sample", Some(fm), grid)?;
        let (hf, wf, d) = {
            let s = self.shape(fm);
            (s[0], s[1], s[2])
        };
        let (hr, wr) = (self.shape(grid)[0], self.shape(grid)[1]);
        let out = if finite {
            self.track_grid(grid, hf, wf);
            kernels::bilinear_forward(self.value(fm), hf, wf, d, self.value(grid))
        } else {
            vec![f64::NAN; hr * wr * d]
        };
        let rg = self.rg(&[fm.0, grid.0]);
        Ok(self.push(vec![hr, wr, d], out, Op::Bilinear { fm: fm.0, grid: grid.0 }, rg))
    }

    /// Normalized sampling footprint of `grid` over an `[hf, wf]` map. The
    /// second value reports a degenerate (fully out-of-range) grid, in which
    /// case the mask is uniform and carries no gradient.
    pub fn attention_mask(&mut self, grid: Var, hf: usize, wf: usize) -> Result<(Var, bool)> {
        let (mask, total) = if self.grid_check("attention_mask", None, grid)? {
            self.track_grid(grid, hf, wf);
            kernels::attention_mask_forward(self.value(grid), hf, wf)
        } else {
            (vec![f64::NAN; hf * wf], f64::NAN)
        };
        let rg = self.rg(&[grid.0]);
        let v = self.push(vec![hf, wf], mask, Op::AttentionMask { grid: grid.0, total }, rg);
        Ok((v, total <= 0.0))
    }

    /// Soft-assignment residual aggregation: descriptors `[n, d]`, codewords
    /// `[k, d]`, positive smoothing `[k]` -> aggregate `[k, d]`.
    pub fn texture_encode(&mut self, x: Var, codewords: Var, smoothing: Var) -> Result<Var> {
        let (sx, sc, ss) = (self.shape(x), self.shape(codewords), self.shape(smoothing));
        if sx.len() != 2 || sc.len() != 2 || sx[1] != sc[1] || ss != [sc[0]] {
            return Err(Error::ShapeMismatch {
                op: "texture_encode",
                lhs: sx.to_vec(),
                rhs: sc.to_vec(),
            });
        }
        let (k, d) = (sc[0], sc[1]);
        let (agg, assign) = kernels::texture_encode_forward(
            self.value(x),
            self.value(codewords),
            self.value(smoothing),
            d,
        );
        let rg = self.rg(&[x.0, codewords.0, smoothing.0]);
        Ok(self.push(
            vec![k, d],
            agg,
            Op::TextureEncode {
                x: x.0,
                codewords: codewords.0,
                smoothing: smoothing.0,
                assign,
            },
            rg,
        ))
    }

    /// Assignment matrix `[n, k]` computed by a texture-encode node.
    pub fn assignments(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::TextureEncode { assign, .. } => Some(assign),
            _ => None,
        }
    }

    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.backward_scaled(loss, 1.0)
    }

    /// Reverse-mode accumulation seeded with `seed · ∂loss/∂loss`.
    pub fn backward_scaled(&mut self, loss: Var, seed: f64) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::NonScalarLoss(self.nodes[loss.0].shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![seed]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if self.nodes[id].requires_grad {
                self.propagate(id, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let val = |i: usize| self.nodes[i].value.as_slice();
        let wants = |i: usize| self.nodes[i].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if wants(*a) {
                    let ga = add_into(&mut grads[*a], g.len());
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if wants(*b) {
                    let nb = val(*b).len();
                    let gb = add_into(&mut grads[*b], nb);
                    for (i, y) in g.iter().enumerate() {
                        gb[i % nb] += sign * y;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let nb = bv.len();
                if wants(*a) {
                    let ga = add_into(&mut grads[*a], g.len());
                    for (i, y) in g.iter().enumerate() {
                        ga[i] += y * bv[i % nb];
                    }
                }
                if wants(*b) {
                    let gb = add_into(&mut grads[*b], nb);
                    for (i, y) in g.iter().enumerate() {
                        gb[i % nb] += y * av[i];
                    }
                }
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                let ga = add_into(&mut grads[*a], g.len());
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
            Op::MulScalar(a, c) => {
                let ga = add_into(&mut grads[*a], g.len());
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += c * y);
            }
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let (av, bv) = (val(*a), val(*b));
                if wants(*a) {
                    let ga = add_into(&mut grads[*a], m * k);
                    for i in 0..m {
                        let gi = &g[i * n..][..n];
                        for p in 0..k {
                            ga[i * k + p] += gi.iter().zip(&bv[p * n..][..n]).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                }
                if wants(*b) {
                    let gb = add_into(&mut grads[*b], k * n);
                    for i in 0..m {
                        let gi = &g[i * n..][..n];
                        for p in 0..k {
                            let x = av[i * k + p];
                            if x == 0.0 {
                                continue;
                            }
                            for (o, y) in gb[p * n..][..n].iter_mut().zip(gi) {
                                *o += x * y;
                            }
                        }
                    }
                }
            }
            Op::Relu(a) => {
                let av = val(*a);
                let ga = add_into(&mut grads[*a], g.len());
                for i in 0..g.len() {
                    if av[i] > 0.0 {
                        ga[i] += g[i];
                    }
                }
            }
            Op::Sigmoid(a) | Op::Tanh(a) | Op::Exp(a) | Op::Softplus(a) | Op::Square(a) => {
                let (xv, yv) = (val(*a), node.value.as_slice());
                let ga = add_into(&mut grads[*a], g.len());
                for i in 0..g.len() {
                    let d = match node.op {
                        Op::Sigmoid(_) => yv[i] * (1.0 - yv[i]),
                        Op::Tanh(_) => 1.0 - yv[i] * yv[i],
                        Op::Exp(_) => yv[i],
                        Op::Softplus(_) => sigmoid(xv[i]),
                        _ => 2.0 * xv[i],
                    };
                    ga[i] += d * g[i];
                }
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = split_axis(&node.shape, *axis);
                let y = node.value.as_slice();
                let gx = add_into(&mut grads[*x], g.len());
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let dot: f64 = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..len {
                            gx[at(j)] += y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
            }
            Op::L2Normalize { x, eps, norm } => {
                let xv = val(*x);
                let denom = norm + eps;
                let gx = add_into(&mut grads[*x], g.len());
                let dot: f64 = g.iter().zip(xv).map(|(a, b)| a * b).sum();
                let coef = if *norm > 0.0 { dot / (denom * denom * norm) } else { 0.0 };
                for i in 0..g.len() {
                    gx[i] += g[i] / denom - coef * xv[i];
                }
            }
            Op::Sum { x, axis } | Op::Mean { x, axis } => {
                let xs = &self.nodes[*x].shape;
                let n = val(*x).len();
                let scale = match (&node.op, axis) {
                    (Op::Mean { .. }, None) => 1.0 / n as f64,
                    (Op::Mean { .. }, Some(ax)) => 1.0 / xs[*ax] as f64,
                    _ => 1.0,
                };
                let gx = add_into(&mut grads[*x], n);
                match axis {
                    None => gx.iter_mut().for_each(|v| *v += g[0] * scale),
                    Some(ax) => {
                        let (outer, len, inner) = split_axis(xs, *ax);
                        for o in 0..outer {
                            for j in 0..len {
                                let dst = &mut gx[(o * len + j) * inner..][..inner];
                                for (d, s) in dst.iter_mut().zip(&g[o * inner..][..inner]) {
                                    *d += s * scale;
                                }
                            }
                        }
                    }
                }
            }
            Op::Max { x, arg, .. } | Op::MaxPool2d { x, arg } => {
                let n = val(*x).len();
                let gx = add_into(&mut grads[*x], n);
                for (gi, &src) in g.iter().zip(arg) {
                    gx[src] += gi;
                }
            }
            Op::Concat { xs, axis } => {
                let (outer, total, inner) = split_axis(&node.shape, *axis);
                let mut offset = 0;
                for &x in xs {
                    let len = self.nodes[x].shape[*axis];
                    if wants(x) {
                        let n = val(x).len();
                        let gx = add_into(&mut grads[x], n);
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..][..len * inner];
                            for (d, s) in gx[o * len * inner..][..len * inner].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                    offset += len;
                }
            }
            Op::Narrow { x, axis, start, len } => {
                let xs = &self.nodes[*x].shape;
                let (outer, full, inner) = split_axis(xs, *axis);
                let gx = add_into(&mut grads[*x], val(*x).len());
                for o in 0..outer {
                    let dst = &mut gx[(o * full + start) * inner..][..len * inner];
                    for (d, s) in dst.iter_mut().zip(&g[o * len * inner..][..len * inner]) {
                        *d += s;
                    }
                }
            }
            Op::Conv2d { x, kernel, geom } => {
                let (gi, gk) = kernels::conv2d_backward(val(*x), val(*kernel), g, geom, wants(*x), wants(*kernel));
                if let Some(gi) = gi {
                    accumulate(&mut grads[*x], gi);
                }
                if let Some(gk) = gk {
                    accumulate(&mut grads[*kernel], gk);
                }
            }
            Op::AffineGrid { params, h, w } => {
                let gp = kernels::affine_grid_backward(g, *h, *w);
                accumulate(&mut grads[*params], gp.to_vec());
            }
            Op::Bilinear { fm, grid } => {
                let s = &self.nodes[*fm].shape;
                let (gf, gg) = kernels::bilinear_backward(
                    val(*fm),
                    s[0],
                    s[1],
                    s[2],
                    val(*grid),
                    g,
                    wants(*fm),
                    wants(*grid),
                );
                if let Some(gf) = gf {
                    accumulate(&mut grads[*fm], gf);
                }
                if let Some(gg) = gg {
                    accumulate(&mut grads[*grid], gg);
                }
            }
            Op::AttentionMask { grid, total } => {
                let (hf, wf) = (node.shape[0], node.shape[1]);
                let gg = kernels::attention_mask_backward(val(*grid), hf, wf, &node.value, *total, g);
                accumulate(&mut grads[*grid], gg);
            }
            Op::TextureEncode {
                x,
                codewords,
                smoothing,
                assign,
            } => {
                let d = self.nodes[*codewords].shape[1];
                let (gx, gc, gs) = kernels::texture_encode_backward(
                    val(*x),
                    val(*codewords),
                    val(*smoothing),
                    assign,
                    g,
                    d,
                );
                if wants(*x) {
                    accumulate(&mut grads[*x], gx);
                }
                if wants(*codewords) {
                    accumulate(&mut grads[*codewords], gc);
                }
                if wants(*smoothing) {
                    accumulate(&mut grads[*smoothing], gs);
                }
            }
        }
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, delta: Vec<f64>) {
    match slot {
        Some(g) => g.iter_mut().zip(&delta).for_each(|(a, b)| *a += b),
        None => *slot = Some(delta),
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.max(0.0) + (-x.abs()).exp().ln_1p()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vecvar(g: &mut Graph, shape: &[usize], data: &[f64]) -> Var {
        g.param(&Tensor::new(shape, data.to_vec()).unwrap())
    }

    #[test]
    fn softmax_of_uniform_input() {
        let mut g = Graph::new();
        let x = vecvar(&mut g, &[3], &[0.0, 0.0, 0.0]);
        let y = g.softmax(x, 0).unwrap();
        for v in g.value(y) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn maxpool_picks_block_maximum() {
        let mut g = Graph::new();
        let x = vecvar(&mut g, &[2, 2, 1], &[1.0, 2.0, 3.0, 4.0]);
        let y = g.maxpool2d(x, 2).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 1]);
        assert_eq!(g.value(y), &[4.0]);
    }

    #[test]
    fn conv_with_scalar_kernel() {
        let mut g = Graph::new();
        let x = vecvar(&mut g, &[3, 3, 1], &[1.0; 9]);
        let k = vecvar(&mut g, &[1, 1, 1, 1], &[2.0]);
        let y = g.conv2d(x, k, 1, 0).unwrap();
        assert_eq!(g.shape(y), &[3, 3, 1]);
        assert!(g.value(y).iter().all(|&v| v == 2.0));
    }

    #[test]
    fn sum_backward_is_ones() {
        let mut g = Graph::new();
        let x = vecvar(&mut g, &[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 7.0]);
        let s = g.sum(x, None).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn quadratic_backward() {
        let mut g = Graph::new();
        let x = vecvar(&mut g, &[2], &[1.0, 2.0]);
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq, None).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn value_consumed_twice_sums_contributions() {
        let mut g = Graph::new();
        let x = vecvar(&mut g, &[2], &[1.5, -0.5]);
        let a = g.mul_scalar(x, 3.0);
        let b = g.square(x);
        let c = g.add(a, b).unwrap();
        let s = g.sum(c, None).unwrap();
        g.backward(s).unwrap();
        let gx = g.grad(x).unwrap();
        assert_eq!(gx, &[3.0 + 2.0 * 1.5, 3.0 + 2.0 * -0.5]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = vecvar(&mut g, &[2], &[1.0, 2.0]);
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn shape_mismatch_names_operation() {
        let mut g = Graph::new();
        let a = vecvar(&mut g, &[2, 3], &[0.0; 6]);
        let b = vecvar(&mut g, &[2], &[0.0; 2]);
        let err = g.add(a, b).unwrap_err().to_string();
        assert!(err.contains("add") && err.contains("[2, 3]") && err.contains("[2]"), "{err}");
        let err = g.matmul(a, a).unwrap_err().to_string();
        assert!(err.starts_with("matmul"), "{err}");
    }

    #[test]
    fn trailing_broadcast_bias() {
        let mut g = Graph::new();
        let a = vecvar(&mut g, &[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = vecvar(&mut g, &[2], &[10.0, 20.0]);
        let c = g.add(a, b).unwrap();
        assert_eq!(g.value(c), &[11.0, 22.0, 13.0, 24.0]);
        let s = g.sum(c, None).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(b).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(&[2], vec![1.0, 2.0]).unwrap();
        let x = vecvar(&mut g, &[2], &[3.0, 4.0]);
        let p = g.mul(c, x).unwrap();
        let s = g.sum(p, None).unwrap();
        g.backward(s).unwrap();
        assert!(g.grad(c).is_none());
        assert_eq!(g.grad(x).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn reductions_along_axis() {
        let mut g = Graph::new();
        let x = vecvar(&mut g, &[2, 3], &[1.0, 5.0, 3.0, 4.0, 2.0, 6.0]);
        let s = g.sum(x, Some(0)).unwrap();
        assert_eq!(g.value(s), &[5.0, 7.0, 9.0]);
        let m = g.mean(x, Some(1)).unwrap();
        assert_eq!(g.value(m), &[3.0, 4.0]);
        let mx = g.max(x, 0).unwrap();
        assert_eq!(g.value(mx), &[4.0, 5.0, 6.0]);
        let c = g.concat(&[x, x], 1).unwrap();
        assert_eq!(g.shape(c), &[2, 6]);
        assert_eq!(&g.value(c)[..6], &[1.0, 5.0, 3.0, 1.0, 5.0, 3.0]);
        let n = g.narrow(c, 1, 2, 2).unwrap();
        assert_eq!(g.value(n), &[3.0, 1.0, 6.0, 4.0]);
    }

    #[test]
    fn max_ties_pick_lowest_index() {
        let mut g = Graph::new();
        let x = vecvar(&mut g, &[3], &[2.0, 2.0, 1.0]);
        let m = g.max(x, 0).unwrap();
        g.backward(m).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn l2_normalize_norm() {
        let mut g = Graph::new();
        let x = vecvar(&mut g, &[3], &[3.0, 4.0, 12.0]);
        let y = g.l2_normalize(x, 1e-12);
        let n: f64 = g.value(y).iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-9);
        let z = g.constant(&[2], vec![0.0, 0.0]).unwrap();
        let y = g.l2_normalize(z, 1e-12);
        assert_eq!(g.value(y), &[0.0, 0.0]);
    }

    #[test]
    fn softplus_is_stable() {
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(softplus(100.0), 100.0);
        assert!(softplus(-100.0) > 0.0);
    }
}
