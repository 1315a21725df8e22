use std::cell::{Cell, Ref, RefCell};
use std::rc::Rc;

use super::taps::BilinearTaps;
use super::tensor::{numel, Tensor};
use super::GraphError;

type Result<T> = std::result::Result<T, GraphError>;

enum Op {
    Leaf,
    Constant,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    MatMul(usize, usize),
    Transpose(usize),
    Sum(usize),
    Mean(usize),
    SumLast(usize),
    Relu(usize),
    Sigmoid(usize),
    Exp(usize),
    Sin(usize),
    Cos(usize),
    Concat {
        inputs: Vec<usize>,
        axis: usize,
    },
    Slice {
        input: usize,
        axis: usize,
        start: usize,
    },
    Reshape(usize),
    Broadcast(usize),
    ExclusiveCumsum(usize),
    Conv2d {
        input: usize,
        weight: usize,
        bias: usize,
        stride: usize,
    },
    GatherRows {
        input: usize,
        taps: Rc<BilinearTaps>,
    },
    MeanOf(Vec<usize>),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records operations in execution order; node ids are topologically sorted
/// by construction.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    relu_margin: Cell<f64>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            relu_margin: Cell::new(f64::INFINITY),
        }
    }

    /// A trainable input; receives a gradient from [`Tape::backward`].
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Constant, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// Smallest |input| seen by any gradient-carrying relu so far.
    ///
    /// Finite-difference checks are only meaningful when this exceeds the
    /// perturbation size.
    pub fn relu_margin(&self) -> f64 {
        self.relu_margin.get()
    }

    fn push(&self, value: Tensor, op: Op, needs_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn needs(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].needs_grad)
    }

    fn record(&self, value: Tensor, op: Op, inputs: &[usize]) -> Var<'_> {
        let needs = self.needs(inputs);
        self.push(value, op, needs)
    }

    fn value_ref(&self, id: usize) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat<'t>(&'t self, vars: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = vars.first().ok_or(GraphError::EmptyInput("concat"))?;
        let ids: Vec<usize> = vars.iter().map(|v| v.id).collect();
        let value = {
            let nodes = self.nodes.borrow();
            let base = nodes[first.id].value.shape().to_vec();
            if axis >= base.len() {
                return Err(GraphError::InvalidAxis { axis, shape: base });
            }
            let mut out_shape = base.clone();
            out_shape[axis] = 0;
            for &id in &ids {
                let s = nodes[id].value.shape();
                let compatible = s.len() == base.len()
                    && s.iter()
                        .zip(&base)
                        .enumerate()
                        .all(|(d, (a, b))| d == axis || a == b);
                if !compatible {
                    return Err(GraphError::ShapeMismatch {
                        op: "concat",
                        lhs: base,
                        rhs: s.to_vec(),
                    });
                }
                out_shape[axis] += s[axis];
            }
            let outer: usize = base[..axis].iter().product();
            let inner: usize = base[axis + 1..].iter().product();
            let mut data = Vec::with_capacity(numel(&out_shape));
            for o in 0..outer {
                for &id in &ids {
                    let v = &nodes[id].value;
                    let chunk = v.shape()[axis] * inner;
                    data.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
                }
            }
            Tensor::from_parts(out_shape, data)
        };
        Ok(self.record(
            value,
            Op::Concat {
                inputs: ids.clone(),
                axis,
            },
            &ids,
        ))
    }

    /// Elementwise arithmetic mean of equally shaped values, summed in list
    /// order.
    pub fn mean_of<'t>(&'t self, vars: &[Var<'t>]) -> Result<Var<'t>> {
        let first = vars.first().ok_or(GraphError::EmptyInput("mean_of"))?;
        let ids: Vec<usize> = vars.iter().map(|v| v.id).collect();
        let value = {
            let nodes = self.nodes.borrow();
            let mut acc = nodes[first.id].value.clone();
            for &id in &ids[1..] {
                let v = &nodes[id].value;
                if v.shape() != acc.shape() {
                    return Err(GraphError::ShapeMismatch {
                        op: "mean_of",
                        lhs: acc.shape().to_vec(),
                        rhs: v.shape().to_vec(),
                    });
                }
                acc.add_assign(v);
            }
            let n = ids.len() as f64;
            for a in acc.data_mut() {
                *a /= n;
            }
            acc
        };
        Ok(self.record(value, Op::MeanOf(ids.clone()), &ids))
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root_value = &nodes[root.id].value;
        if root_value.len() != 1 {
            return Err(GraphError::NonScalarRoot(root_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.id] = Some(Tensor::filled(root_value.shape(), 1.0));
        for id in (0..=root.id).rev() {
            if !nodes[id].needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            propagate(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        for (id, node) in nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) {
                grads[id] = None;
            }
        }
        Ok(Gradients { grads })
    }
}

/// Gradients of a root with respect to the trainable leaves of a tape.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// `None` when the leaf does not influence the root.
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Gradient for `var`, zero-filled when it does not influence the root.
    pub fn wrt(&self, var: Var<'_>) -> Tensor {
        match self.get(var) {
            Some(g) => g.clone(),
            None => Tensor::zeros(&var.shape()),
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: usize, g: Tensor) {
    match &mut grads[id] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Sums `g` into blocks of length `len` (undoes leading-dimension broadcast).
fn reduce_to(g: &[f64], shape: &[usize]) -> Tensor {
    let len = numel(shape);
    if g.len() == len {
        return Tensor::from_parts(shape.to_vec(), g.to_vec());
    }
    let mut out = vec![0.0; len];
    for chunk in g.chunks_exact(len) {
        for (o, v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    Tensor::from_parts(shape.to_vec(), out)
}

/// Elementwise `f` where the shorter operand repeats over the longer one;
/// suffix broadcasting guarantees the longer length is a multiple.
fn zip_broadcast(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    let n = a.len().max(b.len());
    let mut out = Vec::with_capacity(n);
    if a.is_empty() || b.is_empty() {
        return out;
    }
    if a.len() == n {
        for chunk in a.chunks_exact(b.len()) {
            out.extend(chunk.iter().zip(b).map(|(&x, &y)| f(x, y)));
        }
    } else {
        for chunk in b.chunks_exact(a.len()) {
            out.extend(a.iter().zip(chunk).map(|(&x, &y)| f(x, y)));
        }
    }
    out
}

fn propagate(nodes: &[Node], id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let node = &nodes[id];
    let out = &node.value;
    let gd = g.data();
    let wants = |i: usize| nodes[i].needs_grad;
    match &node.op {
        Op::Leaf | Op::Constant => {}
        Op::Add(a, b) | Op::Sub(a, b) => {
            let sign = if matches!(node.op, Op::Sub(..)) {
                -1.0
            } else {
                1.0
            };
            if wants(*a) {
                accumulate(grads, *a, reduce_to(gd, nodes[*a].value.shape()));
            }
            if wants(*b) {
                let mut gb = reduce_to(gd, nodes[*b].value.shape());
                if sign < 0.0 {
                    gb.data_mut().iter_mut().for_each(|v| *v = -*v);
                }
                accumulate(grads, *b, gb);
            }
        }
        Op::Mul(a, b) => {
            let av = nodes[*a].value.data();
            let bv = nodes[*b].value.data();
            if wants(*a) {
                let full = zip_broadcast(gd, bv, |g, b| g * b);
                accumulate(grads, *a, reduce_to(&full, nodes[*a].value.shape()));
            }
            if wants(*b) {
                let full = zip_broadcast(gd, av, |g, a| g * a);
                accumulate(grads, *b, reduce_to(&full, nodes[*b].value.shape()));
            }
        }
        Op::Scale(a, k) => {
            let data = gd.iter().map(|g| g * k).collect();
            accumulate(grads, *a, Tensor::from_parts(out.shape().to_vec(), data));
        }
        Op::AddScalar(a) | Op::Reshape(a) => {
            let shape = nodes[*a].value.shape().to_vec();
            accumulate(grads, *a, Tensor::from_parts(shape, gd.to_vec()));
        }
        Op::MatMul(a, b) => {
            let av = &nodes[*a].value;
            let bv = &nodes[*b].value;
            let (n, k) = (av.shape()[0], av.shape()[1]);
            let m = bv.shape()[1];
            if wants(*a) {
                // dA = dC · Bᵀ
                let ga = gemm(n, m, k, gd, (m, 1), bv.data(), (1, m));
                accumulate(grads, *a, Tensor::from_parts(vec![n, k], ga));
            }
            if wants(*b) {
                // dB = Aᵀ · dC
                let gb = gemm(k, n, m, av.data(), (1, k), gd, (m, 1));
                accumulate(grads, *b, Tensor::from_parts(vec![k, m], gb));
            }
        }
        Op::Transpose(a) => {
            let (r, c) = (out.shape()[0], out.shape()[1]);
            accumulate(
                grads,
                *a,
                Tensor::from_parts(vec![c, r], transpose(gd, r, c)),
            );
        }
        Op::Sum(a) => {
            let shape = nodes[*a].value.shape();
            accumulate(grads, *a, Tensor::filled(shape, gd[0]));
        }
        Op::Mean(a) => {
            let shape = nodes[*a].value.shape();
            accumulate(
                grads,
                *a,
                Tensor::filled(shape, gd[0] / numel(shape) as f64),
            );
        }
        Op::SumLast(a) => {
            let shape = nodes[*a].value.shape().to_vec();
            let k = *shape.last().unwrap();
            let data = gd
                .iter()
                .flat_map(|&g| std::iter::repeat(g).take(k))
                .collect();
            accumulate(grads, *a, Tensor::from_parts(shape, data));
        }
        Op::Relu(a) => {
            let x = nodes[*a].value.data();
            let data = gd
                .iter()
                .zip(x)
                .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                .collect();
            accumulate(grads, *a, Tensor::from_parts(out.shape().to_vec(), data));
        }
        Op::Sigmoid(a) => {
            let data = gd
                .iter()
                .zip(out.data())
                .map(|(g, s)| g * s * (1.0 - s))
                .collect();
            accumulate(grads, *a, Tensor::from_parts(out.shape().to_vec(), data));
        }
        Op::Exp(a) => {
            let data = gd.iter().zip(out.data()).map(|(g, e)| g * e).collect();
            accumulate(grads, *a, Tensor::from_parts(out.shape().to_vec(), data));
        }
        Op::Sin(a) => {
            let x = nodes[*a].value.data();
            let data = gd.iter().zip(x).map(|(g, x)| g * x.cos()).collect();
            accumulate(grads, *a, Tensor::from_parts(out.shape().to_vec(), data));
        }
        Op::Cos(a) => {
            let x = nodes[*a].value.data();
            let data = gd.iter().zip(x).map(|(g, x)| -g * x.sin()).collect();
            accumulate(grads, *a, Tensor::from_parts(out.shape().to_vec(), data));
        }
        Op::Concat { inputs, axis } => {
            let shape = out.shape();
            let outer: usize = shape[..*axis].iter().product();
            let inner: usize = shape[axis + 1..].iter().product();
            let mut offset = 0;
            let row = shape[*axis] * inner;
            for &input in inputs {
                let in_shape = nodes[input].value.shape();
                let chunk = in_shape[*axis] * inner;
                if wants(input) {
                    let mut data = Vec::with_capacity(outer * chunk);
                    for o in 0..outer {
                        let start = o * row + offset;
                        data.extend_from_slice(&gd[start..start + chunk]);
                    }
                    accumulate(grads, input, Tensor::from_parts(in_shape.to_vec(), data));
                }
                offset += chunk;
            }
        }
        Op::Slice { input, axis, start } => {
            let in_shape = nodes[*input].value.shape().to_vec();
            let outer: usize = in_shape[..*axis].iter().product();
            let inner: usize = in_shape[axis + 1..].iter().product();
            let row = in_shape[*axis] * inner;
            let chunk = out.shape()[*axis] * inner;
            let mut data = vec![0.0; numel(&in_shape)];
            for o in 0..outer {
                let dst = o * row + start * inner;
                data[dst..dst + chunk].copy_from_slice(&gd[o * chunk..(o + 1) * chunk]);
            }
            accumulate(grads, *input, Tensor::from_parts(in_shape, data));
        }
        Op::Broadcast(a) => {
            accumulate(grads, *a, reduce_to(gd, nodes[*a].value.shape()));
        }
        Op::ExclusiveCumsum(a) => {
            let shape = out.shape();
            let k = *shape.last().unwrap();
            let mut data = vec![0.0; gd.len()];
            for (dst, src) in data.chunks_exact_mut(k).zip(gd.chunks_exact(k)) {
                let mut acc = 0.0;
                for j in (0..k).rev() {
                    dst[j] = acc;
                    acc += src[j];
                }
            }
            accumulate(grads, *a, Tensor::from_parts(shape.to_vec(), data));
        }
        Op::Conv2d {
            input,
            weight,
            bias,
            stride,
        } => {
            let x = &nodes[*input].value;
            let w = &nodes[*weight].value;
            let geo = ConvGeometry::new(x.shape(), w.shape(), *stride);
            let cols = im2col(x.data(), &geo);
            let (rows, pix) = (geo.patch_len(), geo.out_pixels());
            let cout = geo.cout;
            if wants(*weight) {
                // dW = dOut · colsᵀ
                let gw = gemm(cout, pix, rows, gd, (pix, 1), &cols, (1, pix));
                accumulate(grads, *weight, Tensor::from_parts(w.shape().to_vec(), gw));
            }
            if wants(*bias) {
                let gb = gd.chunks_exact(pix).map(|r| r.iter().sum()).collect();
                accumulate(grads, *bias, Tensor::from_parts(vec![cout], gb));
            }
            if wants(*input) {
                // dcols = Wᵀ · dOut
                let gcols = gemm(rows, cout, pix, w.data(), (1, rows), gd, (pix, 1));
                let gx = col2im(&gcols, &geo);
                accumulate(grads, *input, Tensor::from_parts(x.shape().to_vec(), gx));
            }
        }
        Op::GatherRows { input, taps } => {
            let in_shape = nodes[*input].value.shape().to_vec();
            let c = in_shape[1];
            let mut data = vec![0.0; numel(&in_shape)];
            for ((idx, wt), grow) in taps.stencils().zip(gd.chunks_exact(c)) {
                for (&i, &w) in idx.iter().zip(wt) {
                    if w == 0.0 {
                        continue;
                    }
                    let dst = &mut data[i as usize * c..(i as usize + 1) * c];
                    for (d, g) in dst.iter_mut().zip(grow) {
                        *d += w * g;
                    }
                }
            }
            accumulate(grads, *input, Tensor::from_parts(in_shape, data));
        }
        Op::MeanOf(inputs) => {
            let n = inputs.len() as f64;
            for &input in inputs {
                if wants(input) {
                    let data = gd.iter().map(|g| g / n).collect();
                    accumulate(grads, input, Tensor::from_parts(out.shape().to_vec(), data));
                }
            }
        }
    }
}

/// `a · b` for row-major strided operands, returned as a fresh `m × n`
/// row-major buffer.
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
) -> Vec<f64> {
    assert!(
        a.len() >= m * k && b.len() >= k * n,
        "gemm operands too short"
    );
    let mut c = Vec::with_capacity(m * n);
    // SAFETY: the strides address only elements inside `a` and `b`, whose
    // lengths are checked above. With beta = 0 dgemm writes every element
    // of the `m × n` output without reading it, so `c` is fully
    // initialised before `set_len`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
        c.set_len(m * n);
    }
    c
}

fn transpose(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = data[r * cols + c];
        }
    }
    out
}

struct ConvGeometry {
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeometry {
    fn new(x: &[usize], w: &[usize], stride: usize) -> Self {
        let (cin, h, wd) = (x[0], x[1], x[2]);
        let (cout, k) = (w[0], w[2]);
        let pad = k / 2;
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        Self {
            cin,
            h,
            w: wd,
            cout,
            k,
            stride,
            pad,
            ho,
            wo,
        }
    }

    fn patch_len(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn out_pixels(&self) -> usize {
        self.ho * self.wo
    }

    /// Input pixel feeding output `(oy, ox)` at kernel tap `(ky, kx)`.
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<usize> {
        let y = (oy * self.stride + ky).checked_sub(self.pad)?;
        let x = (ox * self.stride + kx).checked_sub(self.pad)?;
        (y < self.h && x < self.w).then_some(y * self.w + x)
    }
}

fn im2col(x: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let pix = g.out_pixels();
    let mut cols = vec![0.0; g.patch_len() * pix];
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * pix..(row + 1) * pix];
                for oy in 0..g.ho {
                    for ox in 0..g.wo {
                        if let Some(src) = g.source(oy, ox, ky, kx) {
                            dst[oy * g.wo + ox] = plane[src];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let pix = g.out_pixels();
    let mut x = vec![0.0; g.cin * g.h * g.w];
    for c in 0..g.cin {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * pix..(row + 1) * pix];
                for oy in 0..g.ho {
                    for ox in 0..g.wo {
                        if let Some(dst) = g.source(oy, ox, ky, kx) {
                            plane[dst] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

/// Output shape of an elementwise binary op under leading-dimension
/// broadcast.
fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a == b {
        return Ok(a.to_vec());
    }
    if a.len() > b.len() && a.ends_with(b) {
        return Ok(a.to_vec());
    }
    if b.len() > a.len() && b.ends_with(a) {
        return Ok(b.to_vec());
    }
    Err(GraphError::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    })
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Ref<'t, Tensor> {
        self.tape.value_ref(self.id)
    }

    pub fn to_tensor(&self) -> Tensor {
        self.value().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].needs_grad
    }

    fn unary(self, op: Op, f: impl Fn(f64) -> f64) -> Var<'t> {
        let value = {
            let v = self.value();
            Tensor::from_parts(v.shape().to_vec(), v.data().iter().map(|&x| f(x)).collect())
        };
        self.tape.record(value, op, &[self.id])
    }

    fn binary(
        self,
        rhs: Var<'t>,
        name: &'static str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'t>> {
        let value = {
            let a = self.value();
            let b = rhs.value();
            let shape = broadcast_shape(name, a.shape(), b.shape())?;
            let data = zip_broadcast(a.data(), b.data(), f);
            Tensor::from_parts(shape, data)
        };
        Ok(self.tape.record(value, op, &[self.id, rhs.id]))
    }

    pub fn add(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, "add", Op::Add(self.id, rhs.id), |a, b| a + b)
    }

    pub fn sub(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, "sub", Op::Sub(self.id, rhs.id), |a, b| a - b)
    }

    pub fn mul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, "mul", Op::Mul(self.id, rhs.id), |a, b| a * b)
    }

    pub fn scale(self, k: f64) -> Var<'t> {
        self.unary(Op::Scale(self.id, k), |x| x * k)
    }

    pub fn add_scalar(self, k: f64) -> Var<'t> {
        self.unary(Op::AddScalar(self.id), |x| x + k)
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn square(self) -> Var<'t> {
        self.mul(self).expect("identical shapes")
    }

    /// `[n, k] · [k, m] → [n, m]`.
    pub fn matmul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        let value = {
            let a = self.value();
            let b = rhs.value();
            let (sa, sb) = (a.shape(), b.shape());
            if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
                return Err(GraphError::ShapeMismatch {
                    op: "matmul",
                    lhs: sa.to_vec(),
                    rhs: sb.to_vec(),
                });
            }
            let (n, k, m) = (sa[0], sa[1], sb[1]);
            let c = gemm(n, k, m, a.data(), (k, 1), b.data(), (m, 1));
            Tensor::from_parts(vec![n, m], c)
        };
        Ok(self
            .tape
            .record(value, Op::MatMul(self.id, rhs.id), &[self.id, rhs.id]))
    }

    pub fn transpose(self) -> Result<Var<'t>> {
        let value = {
            let a = self.value();
            let s = a.shape();
            if s.len() != 2 {
                return Err(GraphError::InvalidAxis {
                    axis: 1,
                    shape: s.to_vec(),
                });
            }
            Tensor::from_parts(vec![s[1], s[0]], transpose(a.data(), s[0], s[1]))
        };
        Ok(self.tape.record(value, Op::Transpose(self.id), &[self.id]))
    }

    pub fn sum(self) -> Var<'t> {
        let total = self.value().data().iter().sum();
        self.tape
            .record(Tensor::scalar(total), Op::Sum(self.id), &[self.id])
    }

    pub fn mean(self) -> Var<'t> {
        let value = {
            let v = self.value();
            v.data().iter().sum::<f64>() / v.len() as f64
        };
        self.tape
            .record(Tensor::scalar(value), Op::Mean(self.id), &[self.id])
    }

    /// Sums over the last axis, dropping it.
    pub fn sum_last(self) -> Result<Var<'t>> {
        let value = {
            let v = self.value();
            let shape = v.shape();
            let Some((&k, lead)) = shape.split_last() else {
                return Err(GraphError::InvalidAxis {
                    axis: 0,
                    shape: Vec::new(),
                });
            };
            let data = v.data().chunks_exact(k).map(|c| c.iter().sum()).collect();
            Tensor::from_parts(lead.to_vec(), data)
        };
        Ok(self.tape.record(value, Op::SumLast(self.id), &[self.id]))
    }

    pub fn relu(self) -> Var<'t> {
        if self.requires_grad() {
            let margin = self
                .value()
                .data()
                .iter()
                .fold(f64::INFINITY, |m, x| m.min(x.abs()));
            let tape = self.tape;
            tape.relu_margin.set(tape.relu_margin.get().min(margin));
        }
        self.unary(Op::Relu(self.id), |x| x.max(0.0))
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(Op::Sigmoid(self.id), |x| 1.0 / (1.0 + (-x).exp()))
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(Op::Exp(self.id), f64::exp)
    }

    pub fn sin(self) -> Var<'t> {
        self.unary(Op::Sin(self.id), f64::sin)
    }

    pub fn cos(self) -> Var<'t> {
        self.unary(Op::Cos(self.id), f64::cos)
    }

    /// Keeps indices `start..end` of `axis`.
    pub fn slice(self, axis: usize, start: usize, end: usize) -> Result<Var<'t>> {
        let value = {
            let v = self.value();
            let shape = v.shape();
            if axis >= shape.len() || start >= end || end > shape[axis] {
                return Err(GraphError::InvalidAxis {
                    axis,
                    shape: shape.to_vec(),
                });
            }
            let outer: usize = shape[..axis].iter().product();
            let inner: usize = shape[axis + 1..].iter().product();
            let row = shape[axis] * inner;
            let mut out_shape = shape.to_vec();
            out_shape[axis] = end - start;
            let mut data = Vec::with_capacity(numel(&out_shape));
            for o in 0..outer {
                let base = o * row;
                data.extend_from_slice(&v.data()[base + start * inner..base + end * inner]);
            }
            Tensor::from_parts(out_shape, data)
        };
        Ok(self.tape.record(
            value,
            Op::Slice {
                input: self.id,
                axis,
                start,
            },
            &[self.id],
        ))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let value = {
            let v = self.value();
            if numel(shape) != v.len() {
                return Err(GraphError::ShapeMismatch {
                    op: "reshape",
                    lhs: v.shape().to_vec(),
                    rhs: shape.to_vec(),
                });
            }
            v.clone().reshaped(shape.to_vec())
        };
        Ok(self.tape.record(value, Op::Reshape(self.id), &[self.id]))
    }

    /// Repeats the value along a new leading axis of length `n`.
    pub fn broadcast(self, n: usize) -> Var<'t> {
        let value = {
            let v = self.value();
            let mut shape = vec![n];
            shape.extend_from_slice(v.shape());
            let mut data = Vec::with_capacity(n * v.len());
            for _ in 0..n {
                data.extend_from_slice(v.data());
            }
            Tensor::from_parts(shape, data)
        };
        self.tape.record(value, Op::Broadcast(self.id), &[self.id])
    }

    /// `y[.., j] = Σ_{i<j} x[.., i]` along the last axis.
    pub fn exclusive_cumsum(self) -> Result<Var<'t>> {
        let value = {
            let v = self.value();
            let Some(&k) = v.shape().last() else {
                return Err(GraphError::InvalidAxis {
                    axis: 0,
                    shape: Vec::new(),
                });
            };
            let mut data = vec![0.0; v.len()];
            for (dst, src) in data.chunks_exact_mut(k).zip(v.data().chunks_exact(k)) {
                let mut acc = 0.0;
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = acc;
                    acc += s;
                }
            }
            Tensor::from_parts(v.shape().to_vec(), data)
        };
        Ok(self
            .tape
            .record(value, Op::ExclusiveCumsum(self.id), &[self.id]))
    }

    /// 2-D convolution of a `[cin, h, w]` map with a `[cout, cin, k, k]`
    /// kernel (odd `k`, zero padding `k / 2`).
    pub fn conv2d(self, weight: Var<'t>, bias: Var<'t>, stride: usize) -> Result<Var<'t>> {
        let value = {
            let x = self.value();
            let w = weight.value();
            let b = bias.value();
            let (xs, ws) = (x.shape(), w.shape());
            let ok = xs.len() == 3
                && ws.len() == 4
                && ws[1] == xs[0]
                && ws[2] == ws[3]
                && ws[2] % 2 == 1
                && b.shape() == [ws[0]]
                && stride > 0;
            if !ok {
                return Err(GraphError::ShapeMismatch {
                    op: "conv2d",
                    lhs: xs.to_vec(),
                    rhs: ws.to_vec(),
                });
            }
            let geo = ConvGeometry::new(xs, ws, stride);
            let cols = im2col(x.data(), &geo);
            let pix = geo.out_pixels();
            let mut out = gemm(
                geo.cout,
                geo.patch_len(),
                pix,
                w.data(),
                (geo.patch_len(), 1),
                &cols,
                (pix, 1),
            );
            for (row, bias) in out.chunks_exact_mut(pix).zip(b.data()) {
                row.iter_mut().for_each(|v| *v += bias);
            }
            Tensor::from_parts(vec![geo.cout, geo.ho, geo.wo], out)
        };
        Ok(self.tape.record(
            value,
            Op::Conv2d {
                input: self.id,
                weight: weight.id,
                bias: bias.id,
                stride,
            },
            &[self.id, weight.id, bias.id],
        ))
    }

    /// Bilinear lookup into a `[h * w, c]` row table: returns `[n, c]` for
    /// the `n` stencils in `taps`.
    pub fn gather_rows(self, taps: Rc<BilinearTaps>) -> Result<Var<'t>> {
        let value = {
            let v = self.value();
            let (h, w) = taps.grid_size();
            let shape = v.shape();
            if shape.len() != 2 || shape[0] != h * w || taps.is_empty() {
                return Err(GraphError::ShapeMismatch {
                    op: "gather_rows",
                    lhs: shape.to_vec(),
                    rhs: vec![h * w, taps.len()],
                });
            }
            let c = shape[1];
            let src = v.data();
            let mut data = vec![0.0; taps.len() * c];
            for ((idx, wt), dst) in taps.stencils().zip(data.chunks_exact_mut(c)) {
                for (&i, &wgt) in idx.iter().zip(wt) {
                    if wgt == 0.0 {
                        continue;
                    }
                    let row = &src[i as usize * c..(i as usize + 1) * c];
                    for (d, s) in dst.iter_mut().zip(row) {
                        *d += wgt * s;
                    }
                }
            }
            Tensor::from_parts(vec![taps.len(), c], data)
        };
        Ok(self.tape.record(
            value,
            Op::GatherRows {
                input: self.id,
                taps,
            },
            &[self.id],
        ))
    }
}
