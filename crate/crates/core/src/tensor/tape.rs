use std::cell::{Ref, RefCell};

use super::conv::{cn_to_nchw, col2im, gemm, im2col, nchw_to_cn, ConvGeom};
use super::{Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Minimum(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddBias(Var, Var),
    MatMul(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        out_channels: usize,
        cols: Vec<f64>,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        // Geometry of the equivalent forward conv over the *output* image.
        geom: ConvGeom,
        in_channels: usize,
    },
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    Mean(Var),
    SumLast(Var),
    Reshape(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    L2Norm(Var),
    Cosine {
        a: Var,
        b: Var,
        norms_a: Vec<f64>,
        norms_b: Vec<f64>,
    },
    LogSoftmax(Var),
    Pick {
        x: Var,
        cols: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Records primitive operations in execution order so that [`Tape::backward`]
/// can replay them in reverse.
///
/// Only leaves created with `requires_grad = true` retain gradients. A
/// second `backward` call on the same tape adds to those gradients; use
/// [`Tape::zero_grad`] to reset them.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    leaf_grads: RefCell<Vec<Option<Vec<f64>>>>,
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

fn invalid(op: &'static str, msg: impl Into<String>) -> TensorError {
    TensorError::Invalid {
        op,
        msg: msg.into(),
    }
}

/// Split a shape into (leading rows, last-axis width).
fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape.split_last() {
        Some((&last, lead)) => (lead.iter().product(), last),
        None => (1, 1),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Record a leaf value.
    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var {
        self.push_node(value, requires_grad, Op::Leaf)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    /// Scalar value of a one-element var.
    pub fn item(&self, v: Var) -> f64 {
        self.nodes.borrow()[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if it requires grad and any
    /// backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let grads = self.leaf_grads.borrow();
        let g = grads.get(v.0)?.as_ref()?;
        let shape = self.shape(v);
        Some(Tensor::new(shape, g.clone()).expect("grad shape tracks value"))
    }

    /// Gradient of a leaf, or zeros when no gradient reached it.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor {
        self.grad(v)
            .unwrap_or_else(|| Tensor::zeros(&self.shape(v)))
    }

    pub fn zero_grad(&self) {
        self.leaf_grads
            .borrow_mut()
            .iter_mut()
            .for_each(|g| *g = None);
    }

    fn push_node(&self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(nodes.len() - 1)
    }

    fn push(&self, name: &'static str, value: Tensor, inputs: &[Var], op: Op) -> Result<Var> {
        if !value.all_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let rg = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|v| nodes[v.0].requires_grad)
        };
        let op = if rg { op } else { Op::Leaf };
        Ok(self.push_node(value, rg, op))
    }

    fn map_unary(&self, name: &'static str, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            Tensor {
                shape: xv.shape.clone(),
                data: xv.data.iter().map(|&v| f(v)).collect(),
            }
        };
        self.push(name, out, &[x], op)
    }

    fn zip_binary(
        &self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
            if av.shape != bv.shape {
                return Err(mismatch(name, &av.shape, &bv.shape));
            }
            Tensor {
                shape: av.shape.clone(),
                data: av
                    .data
                    .iter()
                    .zip(&bv.data)
                    .map(|(&x, &y)| f(x, y))
                    .collect(),
            }
        };
        self.push(name, out, &[a, b], op)
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.zip_binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.zip_binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.zip_binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn minimum(&self, a: Var, b: Var) -> Result<Var> {
        self.zip_binary("minimum", a, b, f64::min, Op::Minimum(a, b))
    }

    pub fn scale(&self, x: Var, c: f64) -> Result<Var> {
        self.map_unary("scale", x, |v| v * c, Op::Scale(x, c))
    }

    pub fn neg(&self, x: Var) -> Result<Var> {
        self.scale(x, -1.0)
    }

    pub fn add_scalar(&self, x: Var, c: f64) -> Result<Var> {
        self.map_unary("add_scalar", x, |v| v + c, Op::AddScalar(x))
    }

    /// `x[.., j] + b[j]` for `x` of shape `[.., M]` and `b` of shape `[M]`.
    pub fn add_bias(&self, x: Var, b: Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let (xv, bv) = (&nodes[x.0].value, &nodes[b.0].value);
            let (_, m) = rows_cols(&xv.shape);
            if bv.shape != [m] {
                return Err(mismatch("add_bias", &xv.shape, &bv.shape));
            }
            let mut data = xv.data.clone();
            for row in data.chunks_mut(m) {
                row.iter_mut().zip(&bv.data).for_each(|(v, b)| *v += b);
            }
            Tensor {
                shape: xv.shape.clone(),
                data,
            }
        };
        self.push("add_bias", out, &[x, b], Op::AddBias(x, b))
    }

    /// `[N, K] × [K, M] → [N, M]`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
            if av.shape.len() != 2 || bv.shape.len() != 2 || av.shape[1] != bv.shape[0] {
                return Err(mismatch("matmul", &av.shape, &bv.shape));
            }
            let (n, k, m) = (av.shape[0], av.shape[1], bv.shape[1]);
            let mut data = vec![0.0; n * m];
            gemm(n, k, m, &av.data, false, &bv.data, false, &mut data, 0.0);
            Tensor {
                shape: vec![n, m],
                data,
            }
        };
        self.push("matmul", out, &[a, b], Op::MatMul(a, b))
    }

    /// Valid-padding 2D convolution. `x: [N, C, H, W]`, `w: [O, C, k, k]`,
    /// optional `b: [O]`; output `[N, O, (H-k)/s+1, (W-k)/s+1]`.
    pub fn conv2d(&self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        let (out, geom, out_channels, cols) = {
            let nodes = self.nodes.borrow();
            let (xv, wv) = (&nodes[x.0].value, &nodes[w.0].value);
            if xv.shape.len() != 4 || wv.shape.len() != 4 {
                return Err(mismatch("conv2d", &xv.shape, &wv.shape));
            }
            let (n, c, h, wd) = (xv.shape[0], xv.shape[1], xv.shape[2], xv.shape[3]);
            let (o, wc, k, k2) = (wv.shape[0], wv.shape[1], wv.shape[2], wv.shape[3]);
            if wc != c || k != k2 {
                return Err(mismatch("conv2d", &xv.shape, &wv.shape));
            }
            if stride == 0 || k == 0 || k > h || k > wd {
                return Err(invalid(
                    "conv2d",
                    format!("kernel {k} stride {stride} on {h}x{wd}"),
                ));
            }
            if let Some(b) = b {
                let bs = &nodes[b.0].value.shape;
                if bs[..] != [o] {
                    return Err(mismatch("conv2d bias", bs, &[o]));
                }
            }
            let geom = ConvGeom {
                batch: n,
                channels: c,
                h,
                w: wd,
                kernel: k,
                stride,
            };
            let cols = im2col(&xv.data, &geom);
            let p = geom.out_h() * geom.out_w();
            let mut mat = vec![0.0; o * geom.col_cols()];
            gemm(
                o,
                geom.col_rows(),
                geom.col_cols(),
                &wv.data,
                false,
                &cols,
                false,
                &mut mat,
                0.0,
            );
            let mut data = cn_to_nchw(&mat, n, o, p);
            if let Some(b) = b {
                let bv = &nodes[b.0].value.data;
                for (i, chunk) in data.chunks_mut(p).enumerate() {
                    let bias = bv[i % o];
                    chunk.iter_mut().for_each(|v| *v += bias);
                }
            }
            let out = Tensor {
                shape: vec![n, o, geom.out_h(), geom.out_w()],
                data,
            };
            (out, geom, o, cols)
        };
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(
            "conv2d",
            out,
            &inputs,
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                out_channels,
                cols,
            },
        )
    }

    /// Transposed convolution, the adjoint of [`Tape::conv2d`] with the same
    /// kernel and stride. `x: [N, Cin, H, W]`, `w: [Cin, Cout, k, k]`,
    /// optional `b: [Cout]`; output `[N, Cout, (H-1)s+k, (W-1)s+k]`.
    pub fn conv_transpose2d(&self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        let (out, geom, in_channels) = {
            let nodes = self.nodes.borrow();
            let (xv, wv) = (&nodes[x.0].value, &nodes[w.0].value);
            if xv.shape.len() != 4 || wv.shape.len() != 4 {
                return Err(mismatch("conv_transpose2d", &xv.shape, &wv.shape));
            }
            let (n, cin, h, wd) = (xv.shape[0], xv.shape[1], xv.shape[2], xv.shape[3]);
            let (wcin, cout, k, k2) = (wv.shape[0], wv.shape[1], wv.shape[2], wv.shape[3]);
            if wcin != cin || k != k2 {
                return Err(mismatch("conv_transpose2d", &xv.shape, &wv.shape));
            }
            if stride == 0 || k == 0 || h == 0 || wd == 0 {
                return Err(invalid(
                    "conv_transpose2d",
                    format!("kernel {k} stride {stride}"),
                ));
            }
            if let Some(b) = b {
                let bs = &nodes[b.0].value.shape;
                if bs[..] != [cout] {
                    return Err(mismatch("conv_transpose2d bias", bs, &[cout]));
                }
            }
            let (oh, ow) = ((h - 1) * stride + k, (wd - 1) * stride + k);
            let geom = ConvGeom {
                batch: n,
                channels: cout,
                h: oh,
                w: ow,
                kernel: k,
                stride,
            };
            let p = h * wd;
            let xmat = nchw_to_cn(&xv.data, n, cin, p);
            let mut cols = vec![0.0; geom.col_rows() * geom.col_cols()];
            gemm(
                geom.col_rows(),
                cin,
                geom.col_cols(),
                &wv.data,
                true,
                &xmat,
                false,
                &mut cols,
                0.0,
            );
            let mut data = vec![0.0; n * cout * oh * ow];
            col2im(&cols, &geom, &mut data);
            if let Some(b) = b {
                let bv = &nodes[b.0].value.data;
                for (i, chunk) in data.chunks_mut(oh * ow).enumerate() {
                    let bias = bv[i % cout];
                    chunk.iter_mut().for_each(|v| *v += bias);
                }
            }
            let out = Tensor {
                shape: vec![n, cout, oh, ow],
                data,
            };
            (out, geom, cin)
        };
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(
            "conv_transpose2d",
            out,
            &inputs,
            Op::ConvTranspose2d {
                x,
                w,
                b,
                geom,
                in_channels,
            },
        )
    }

    pub fn relu(&self, x: Var) -> Result<Var> {
        self.map_unary("relu", x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn tanh(&self, x: Var) -> Result<Var> {
        self.map_unary("tanh", x, f64::tanh, Op::Tanh(x))
    }

    pub fn sigmoid(&self, x: Var) -> Result<Var> {
        self.map_unary("sigmoid", x, |v| 1.0 / (1.0 + (-v).exp()), Op::Sigmoid(x))
    }

    pub fn exp(&self, x: Var) -> Result<Var> {
        self.map_unary("exp", x, f64::exp, Op::Exp(x))
    }

    pub fn log(&self, x: Var) -> Result<Var> {
        self.map_unary("log", x, f64::ln, Op::Log(x))
    }

    pub fn square(&self, x: Var) -> Result<Var> {
        self.map_unary("square", x, |v| v * v, Op::Square(x))
    }

    /// Clamp into `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(&self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        if lo > hi {
            return Err(invalid("clamp", format!("lo {lo} > hi {hi}")));
        }
        self.map_unary("clamp", x, |v| v.clamp(lo, hi), Op::Clamp(x, lo, hi))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&self, x: Var) -> Result<Var> {
        let s = self.nodes.borrow()[x.0].value.data.iter().sum();
        self.push("sum", Tensor::scalar(s), &[x], Op::Sum(x))
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&self, x: Var) -> Result<Var> {
        let m = {
            let nodes = self.nodes.borrow();
            let d = &nodes[x.0].value.data;
            if d.is_empty() {
                return Err(invalid("mean", "empty tensor"));
            }
            d.iter().sum::<f64>() / d.len() as f64
        };
        self.push("mean", Tensor::scalar(m), &[x], Op::Mean(x))
    }

    /// Sum over the last axis: `[.., M] → [..]`.
    pub fn sum_last(&self, x: Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            if xv.shape.is_empty() {
                return Err(invalid("sum_last", "scalar input"));
            }
            let (_, m) = rows_cols(&xv.shape);
            Tensor {
                shape: xv.shape[..xv.shape.len() - 1].to_vec(),
                data: xv.data.chunks(m.max(1)).map(|r| r.iter().sum()).collect(),
            }
        };
        self.push("sum_last", out, &[x], Op::SumLast(x))
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.nodes.borrow()[x.0].value.clone().reshape(shape)?;
        self.push("reshape", out, &[x], Op::Reshape(x))
    }

    /// Concatenate along `axis`; all other dimensions must agree.
    pub fn concat(&self, inputs: &[Var], axis: usize) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let first = inputs
                .first()
                .ok_or_else(|| invalid("concat", "no inputs"))?;
            let base = &nodes[first.0].value.shape;
            if axis >= base.len() {
                return Err(invalid(
                    "concat",
                    format!("axis {axis} for rank {}", base.len()),
                ));
            }
            let mut total = 0;
            for v in inputs {
                let s = &nodes[v.0].value.shape;
                let ok = s.len() == base.len()
                    && s.iter()
                        .zip(base)
                        .enumerate()
                        .all(|(i, (a, b))| i == axis || a == b);
                if !ok {
                    return Err(mismatch("concat", base, s));
                }
                total += s[axis];
            }
            let outer: usize = base[..axis].iter().product();
            let inner: usize = base[axis + 1..].iter().product();
            let mut data = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for v in inputs {
                    let t = &nodes[v.0].value;
                    let chunk = t.shape[axis] * inner;
                    data.extend_from_slice(&t.data[o * chunk..(o + 1) * chunk]);
                }
            }
            let mut shape = base.clone();
            shape[axis] = total;
            Tensor { shape, data }
        };
        self.push(
            "concat",
            out,
            inputs,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        )
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            if axis >= xv.shape.len() || start > end || end > xv.shape[axis] {
                return Err(invalid(
                    "slice",
                    format!("{start}..{end} on axis {axis} of {:?}", xv.shape),
                ));
            }
            let outer: usize = xv.shape[..axis].iter().product();
            let inner: usize = xv.shape[axis + 1..].iter().product();
            let dim = xv.shape[axis];
            let mut data = Vec::with_capacity(outer * (end - start) * inner);
            for o in 0..outer {
                let base = o * dim * inner;
                data.extend_from_slice(&xv.data[base + start * inner..base + end * inner]);
            }
            let mut shape = xv.shape.clone();
            shape[axis] = end - start;
            Tensor { shape, data }
        };
        self.push("slice", out, &[x], Op::Slice { x, axis, start })
    }

    /// Select rows (entries along axis 0), with repetition allowed.
    pub fn gather_rows(&self, x: Var, rows: &[usize]) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            let n = *xv
                .shape
                .first()
                .ok_or_else(|| invalid("gather_rows", "scalar input"))?;
            let width = if n == 0 { 0 } else { xv.data.len() / n };
            let mut data = Vec::with_capacity(rows.len() * width);
            for &r in rows {
                if r >= n {
                    return Err(invalid("gather_rows", format!("row {r} out of {n}")));
                }
                data.extend_from_slice(&xv.data[r * width..(r + 1) * width]);
            }
            let mut shape = xv.shape.clone();
            shape[0] = rows.len();
            Tensor { shape, data }
        };
        self.push(
            "gather_rows",
            out,
            &[x],
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
        )
    }

    /// Euclidean norm over the last axis. The gradient at an exactly zero
    /// vector is taken as zero.
    pub fn l2_norm(&self, x: Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            if xv.shape.is_empty() {
                return Err(invalid("l2_norm", "scalar input"));
            }
            let (_, m) = rows_cols(&xv.shape);
            Tensor {
                shape: xv.shape[..xv.shape.len() - 1].to_vec(),
                data: xv
                    .data
                    .chunks(m.max(1))
                    .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
                    .collect(),
            }
        };
        self.push("l2_norm", out, &[x], Op::L2Norm(x))
    }

    /// Row-wise cosine similarity over the last axis. Zero-norm rows are
    /// rejected.
    pub fn cosine_similarity(&self, a: Var, b: Var) -> Result<Var> {
        let (out, norms_a, norms_b) = {
            let nodes = self.nodes.borrow();
            let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
            if av.shape != bv.shape || av.shape.is_empty() {
                return Err(mismatch("cosine_similarity", &av.shape, &bv.shape));
            }
            let (rows, m) = rows_cols(&av.shape);
            let mut na = Vec::with_capacity(rows);
            let mut nb = Vec::with_capacity(rows);
            let mut data = Vec::with_capacity(rows);
            for (i, (ra, rb)) in av.data.chunks(m).zip(bv.data.chunks(m)).enumerate() {
                let x = ra.iter().map(|v| v * v).sum::<f64>().sqrt();
                let y = rb.iter().map(|v| v * v).sum::<f64>().sqrt();
                if x == 0.0 || y == 0.0 {
                    return Err(TensorError::ZeroNorm {
                        op: "cosine_similarity",
                        row: i,
                    });
                }
                let dot: f64 = ra.iter().zip(rb).map(|(p, q)| p * q).sum();
                data.push(dot / (x * y));
                na.push(x);
                nb.push(y);
            }
            let out = Tensor {
                shape: av.shape[..av.shape.len() - 1].to_vec(),
                data,
            };
            (out, na, nb)
        };
        self.push(
            "cosine_similarity",
            out,
            &[a, b],
            Op::Cosine {
                a,
                b,
                norms_a,
                norms_b,
            },
        )
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&self, x: Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            let (_, m) = rows_cols(&xv.shape);
            let mut data = Vec::with_capacity(xv.data.len());
            for r in xv.data.chunks(m.max(1)) {
                let mx = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = mx + r.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
                data.extend(r.iter().map(|v| v - lse));
            }
            Tensor {
                shape: xv.shape.clone(),
                data,
            }
        };
        self.push("log_softmax", out, &[x], Op::LogSoftmax(x))
    }

    /// `out[i] = x[i, cols[i]]` for `x: [N, M]`.
    pub fn pick(&self, x: Var, cols: &[usize]) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            if xv.shape.len() != 2 || xv.shape[0] != cols.len() {
                return Err(mismatch("pick", &xv.shape, &[cols.len()]));
            }
            let m = xv.shape[1];
            let mut data = Vec::with_capacity(cols.len());
            for (i, &c) in cols.iter().enumerate() {
                if c >= m {
                    return Err(invalid("pick", format!("column {c} out of {m}")));
                }
                data.push(xv.data[i * m + c]);
            }
            Tensor {
                shape: vec![cols.len()],
                data,
            }
        };
        self.push(
            "pick",
            out,
            &[x],
            Op::Pick {
                x,
                cols: cols.to_vec(),
            },
        )
    }

    /// Forward identity that blocks gradient flow into `x`.
    pub fn stop_grad(&self, x: Var) -> Var {
        let value = self.nodes.borrow()[x.0].value.clone();
        self.push_node(value, false, Op::Leaf)
    }

    /// Reverse-mode sweep from a scalar `loss`, accumulating into leaf
    /// gradients.
    pub fn backward(&self, loss: Var) -> Result<()> {
        let nodes = self.nodes.borrow();
        let lv = &nodes[loss.0].value;
        if lv.data.len() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape.clone()));
        }
        if !lv.all_finite() {
            return Err(TensorError::NonFinite { op: "backward" });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        if nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        let mut leaf_grads = self.leaf_grads.borrow_mut();
        if leaf_grads.len() < nodes.len() {
            leaf_grads.resize(nodes.len(), None);
        }
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if let Op::Leaf = node.op {
                if node.requires_grad {
                    if g.iter().any(|v| !v.is_finite()) {
                        return Err(TensorError::NonFinite { op: "backward" });
                    }
                    match &mut leaf_grads[id] {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        slot => *slot = Some(g),
                    }
                }
                continue;
            }
            backprop(&nodes, node, &g, &mut grads);
        }
        Ok(())
    }
}

/// Add `f`'s contribution into the gradient slot of `v`, allocating zeros
/// on first touch. Skips inputs that do not require grad.
fn accumulate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
    if !nodes[v.0].requires_grad {
        return;
    }
    let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.data.len()]);
    f(slot);
}

fn backprop(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let val = |v: Var| &nodes[v.0].value;
    let out = &node.value.data;
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, |d| add_into(d, g));
            accumulate(nodes, grads, *b, |d| add_into(d, g));
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, |d| add_into(d, g));
            accumulate(nodes, grads, *b, |d| {
                d.iter_mut().zip(g).for_each(|(x, y)| *x -= y)
            });
        }
        Op::Mul(a, b) => {
            let (av, bv) = (&val(*a).data, &val(*b).data);
            accumulate(nodes, grads, *a, |d| {
                for i in 0..d.len() {
                    d[i] += g[i] * bv[i];
                }
            });
            accumulate(nodes, grads, *b, |d| {
                for i in 0..d.len() {
                    d[i] += g[i] * av[i];
                }
            });
        }
        Op::Minimum(a, b) => {
            let (av, bv) = (&val(*a).data, &val(*b).data);
            accumulate(nodes, grads, *a, |d| {
                for i in 0..d.len() {
                    if av[i] <= bv[i] {
                        d[i] += g[i];
                    }
                }
            });
            accumulate(nodes, grads, *b, |d| {
                for i in 0..d.len() {
                    if av[i] > bv[i] {
                        d[i] += g[i];
                    }
                }
            });
        }
        Op::Scale(x, c) => {
            accumulate(nodes, grads, *x, |d| {
                d.iter_mut().zip(g).for_each(|(p, q)| *p += c * q)
            });
        }
        Op::AddScalar(x) | Op::Reshape(x) => accumulate(nodes, grads, *x, |d| add_into(d, g)),
        Op::AddBias(x, b) => {
            accumulate(nodes, grads, *x, |d| add_into(d, g));
            let m = val(*b).data.len();
            accumulate(nodes, grads, *b, |d| {
                for row in g.chunks(m) {
                    add_into(d, row);
                }
            });
        }
        Op::MatMul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (n, k, m) = (av.shape[0], av.shape[1], bv.shape[1]);
            // dA = G · Bᵀ, dB = Aᵀ · G
            accumulate(nodes, grads, *a, |d| {
                gemm(n, m, k, g, false, &bv.data, true, d, 1.0)
            });
            accumulate(nodes, grads, *b, |d| {
                gemm(k, n, m, &av.data, true, g, false, d, 1.0)
            });
        }
        Op::Conv2d {
            x,
            w,
            b,
            geom,
            out_channels,
            cols,
        } => {
            let o = *out_channels;
            let p = geom.out_h() * geom.out_w();
            let gmat = nchw_to_cn(g, geom.batch, o, p);
            accumulate(nodes, grads, *w, |d| {
                gemm(
                    o,
                    geom.col_cols(),
                    geom.col_rows(),
                    &gmat,
                    false,
                    cols,
                    true,
                    d,
                    1.0,
                )
            });
            if let Some(b) = b {
                accumulate(nodes, grads, *b, |d| {
                    for (ch, row) in gmat.chunks(geom.col_cols()).enumerate() {
                        d[ch] += row.iter().sum::<f64>();
                    }
                });
            }
            let wv = &val(*w).data;
            accumulate(nodes, grads, *x, |d| {
                let mut dcols = vec![0.0; geom.col_rows() * geom.col_cols()];
                gemm(
                    geom.col_rows(),
                    o,
                    geom.col_cols(),
                    wv,
                    true,
                    &gmat,
                    false,
                    &mut dcols,
                    0.0,
                );
                col2im(&dcols, geom, d);
            });
        }
        Op::ConvTranspose2d {
            x,
            w,
            b,
            geom,
            in_channels,
        } => {
            let cin = *in_channels;
            let xv = val(*x);
            let p = xv.shape[2] * xv.shape[3];
            let gcols = im2col(g, geom);
            if let Some(b) = b {
                let plane = geom.h * geom.w;
                accumulate(nodes, grads, *b, |d| {
                    for (i, chunk) in g.chunks(plane).enumerate() {
                        d[i % geom.channels] += chunk.iter().sum::<f64>();
                    }
                });
            }
            let needs_w = nodes[w.0].requires_grad;
            if needs_w {
                let xmat = nchw_to_cn(&xv.data, geom.batch, cin, p);
                accumulate(nodes, grads, *w, |d| {
                    gemm(
                        cin,
                        geom.col_cols(),
                        geom.col_rows(),
                        &xmat,
                        false,
                        &gcols,
                        true,
                        d,
                        1.0,
                    )
                });
            }
            let wv = &val(*w).data;
            accumulate(nodes, grads, *x, |d| {
                let mut dx = vec![0.0; cin * geom.col_cols()];
                gemm(
                    cin,
                    geom.col_rows(),
                    geom.col_cols(),
                    wv,
                    false,
                    &gcols,
                    false,
                    &mut dx,
                    0.0,
                );
                add_into(d, &cn_to_nchw(&dx, geom.batch, cin, p));
            });
        }
        Op::Relu(x) => {
            let xv = &val(*x).data;
            accumulate(nodes, grads, *x, |d| {
                for i in 0..d.len() {
                    if xv[i] > 0.0 {
                        d[i] += g[i];
                    }
                }
            });
        }
        Op::Tanh(x) => accumulate(nodes, grads, *x, |d| {
            for i in 0..d.len() {
                d[i] += g[i] * (1.0 - out[i] * out[i]);
            }
        }),
        Op::Sigmoid(x) => accumulate(nodes, grads, *x, |d| {
            for i in 0..d.len() {
                d[i] += g[i] * out[i] * (1.0 - out[i]);
            }
        }),
        Op::Exp(x) => accumulate(nodes, grads, *x, |d| {
            for i in 0..d.len() {
                d[i] += g[i] * out[i];
            }
        }),
        Op::Log(x) => {
            let xv = &val(*x).data;
            accumulate(nodes, grads, *x, |d| {
                for i in 0..d.len() {
                    d[i] += g[i] / xv[i];
                }
            });
        }
        Op::Square(x) => {
            let xv = &val(*x).data;
            accumulate(nodes, grads, *x, |d| {
                for i in 0..d.len() {
                    d[i] += 2.0 * xv[i] * g[i];
                }
            });
        }
        Op::Clamp(x, lo, hi) => {
            let xv = &val(*x).data;
            accumulate(nodes, grads, *x, |d| {
                for i in 0..d.len() {
                    if xv[i] >= *lo && xv[i] <= *hi {
                        d[i] += g[i];
                    }
                }
            });
        }
        Op::Sum(x) => accumulate(nodes, grads, *x, |d| d.iter_mut().for_each(|v| *v += g[0])),
        Op::Mean(x) => accumulate(nodes, grads, *x, |d| {
            let s = g[0] / d.len() as f64;
            d.iter_mut().for_each(|v| *v += s);
        }),
        Op::SumLast(x) => accumulate(nodes, grads, *x, |d| {
            let m = d.len() / g.len().max(1);
            for (row, gi) in d.chunks_mut(m.max(1)).zip(g) {
                row.iter_mut().for_each(|v| *v += gi);
            }
        }),
        Op::Concat { inputs, axis } => {
            let shape = &node.value.shape;
            let outer: usize = shape[..*axis].iter().product();
            let inner: usize = shape[axis + 1..].iter().product();
            let total = shape[*axis];
            let mut offset = 0;
            for v in inputs {
                let len = val(*v).shape[*axis];
                accumulate(nodes, grads, *v, |d| {
                    for o in 0..outer {
                        let src =
                            &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                        add_into(&mut d[o * len * inner..(o + 1) * len * inner], src);
                    }
                });
                offset += len;
            }
        }
        Op::Slice { x, axis, start } => {
            let xs = &val(*x).shape;
            let outer: usize = xs[..*axis].iter().product();
            let inner: usize = xs[axis + 1..].iter().product();
            let dim = xs[*axis];
            let len = node.value.shape[*axis];
            accumulate(nodes, grads, *x, |d| {
                for o in 0..outer {
                    let base = (o * dim + start) * inner;
                    add_into(
                        &mut d[base..base + len * inner],
                        &g[o * len * inner..(o + 1) * len * inner],
                    );
                }
            });
        }
        Op::GatherRows { x, rows } => {
            let width = if rows.is_empty() {
                0
            } else {
                g.len() / rows.len()
            };
            accumulate(nodes, grads, *x, |d| {
                for (i, &r) in rows.iter().enumerate() {
                    add_into(
                        &mut d[r * width..(r + 1) * width],
                        &g[i * width..(i + 1) * width],
                    );
                }
            });
        }
        Op::L2Norm(x) => {
            let xv = &val(*x).data;
            let m = xv.len() / g.len().max(1);
            accumulate(nodes, grads, *x, |d| {
                for (r, gi) in g.iter().enumerate() {
                    let norm = out[r];
                    if norm == 0.0 {
                        continue;
                    }
                    for j in r * m..(r + 1) * m {
                        d[j] += gi * xv[j] / norm;
                    }
                }
            });
        }
        Op::Cosine {
            a,
            b,
            norms_a,
            norms_b,
        } => {
            let (av, bv) = (&val(*a).data, &val(*b).data);
            let m = av.len() / g.len().max(1);
            // d cos / d a = b/(|a||b|) - cos · a/|a|²
            accumulate(nodes, grads, *a, |d| {
                for r in 0..g.len() {
                    let (na, nb, c) = (norms_a[r], norms_b[r], out[r]);
                    for j in r * m..(r + 1) * m {
                        d[j] += g[r] * (bv[j] / (na * nb) - c * av[j] / (na * na));
                    }
                }
            });
            accumulate(nodes, grads, *b, |d| {
                for r in 0..g.len() {
                    let (na, nb, c) = (norms_a[r], norms_b[r], out[r]);
                    for j in r * m..(r + 1) * m {
                        d[j] += g[r] * (av[j] / (na * nb) - c * bv[j] / (nb * nb));
                    }
                }
            });
        }
        Op::LogSoftmax(x) => {
            let m = *node.value.shape.last().unwrap_or(&1);
            accumulate(nodes, grads, *x, |d| {
                for ((dr, gr), or) in d.chunks_mut(m).zip(g.chunks(m)).zip(out.chunks(m)) {
                    let gs: f64 = gr.iter().sum();
                    for j in 0..m {
                        dr[j] += gr[j] - or[j].exp() * gs;
                    }
                }
            });
        }
        Op::Pick { x, cols } => {
            let m = val(*x).shape[1];
            accumulate(nodes, grads, *x, |d| {
                for (i, &c) in cols.iter().enumerate() {
                    d[i * m + c] += g[i];
                }
            });
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}
