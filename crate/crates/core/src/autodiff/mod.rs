//! Minimal dense tensors with tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its nodes in creation
//! order, so the node list is already topologically sorted. [`Graph::backward`]
//! walks it once in reverse and accumulates gradients into every node that
//! requires them. Leaves are either trainable ([`Graph::leaf`] with a tensor
//! that has `requires_grad`) or constants ([`Graph::constant`]); constants
//! never receive a gradient buffer.
//!
//! ```
//! use crossalign::autodiff::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.leaf(Tensor::new(vec![2, 2], vec![1.0, -2.0, 3.0, 0.5]).unwrap().with_grad());
//! let y = g.relu(x);
//! let s = g.sum(y);
//! g.backward(s).unwrap();
//! assert_eq!(g.value(s).item(), 4.5);
//! assert_eq!(g.grad(x).unwrap(), &[1.0, 0.0, 1.0, 1.0]);
//! ```

mod kernels;

use crate::error::{Error, Result};
use kernels::ConvGeometry;


/// Dense row-major `f64` array with an optional gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::dim(
                "tensor",
                format!("extents must be positive, got {shape:?}"),
            ));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dim(
                "tensor",
                format!("shape {shape:?} needs {numel} values, got {}", data.len()),
            ));
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self::new(shape.to_vec(), vec![0.0; numel]).expect("positive extents")
    }

    pub fn scalar(value: f64) -> Self {
        Self::new(vec![1], vec![value]).expect("scalar shape")
    }

    /// Marks this tensor as trainable.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = &mut self.grad {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    fn matrix_dims(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::dim(
                op,
                format!("expected a matrix, got shape {:?}", self.shape),
            )),
        }
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }

    #[cfg(test)]
    pub(crate) fn from_index(i: usize) -> Self {
        Var(i)
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Conv2d {
        input: Var,
        kernel: Var,
        geom: ConvGeometry,
    },
    AvgPool2(Var),
    GlobalAvgPool(Var),
    Reshape(Var),
    Sum(Var),
    NormalizeRows {
        x: Var,
        norms: Vec<f64>,
        eps: f64,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Recording of one forward computation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds an input tensor. It is trainable iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        self.push(tensor, Op::Leaf)
    }

    /// Adds an input that never receives a gradient.
    pub fn constant(&mut self, mut tensor: Tensor) -> Var {
        tensor.requires_grad = false;
        tensor.grad = None;
        self.push(tensor, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Clears every accumulated gradient buffer.
    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.value.zero_grad();
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, shape: Vec<usize>, data: Vec<f64>, inputs: &[Var], op: Op) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].value.requires_grad);
        let value = Tensor {
            shape,
            data,
            requires_grad,
            grad: None,
        };
        self.push(value, op)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = self.value(a).matrix_dims("matmul")?;
        let (n2, p) = self.value(b).matrix_dims("matmul")?;
        if n != n2 {
            return Err(Error::dim(
                "matmul",
                format!(
                    "inner dimensions disagree: {:?} x {:?}",
                    self.shape(a),
                    self.shape(b)
                ),
            ));
        }
        let mut out = vec![0.0; m * p];
        kernels::matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, n, p);
        Ok(self.push_op(vec![m, p], out, &[a, b], Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.value(a).matrix_dims("transpose")?;
        let out = kernels::transpose(self.value(a).data(), r, c);
        Ok(self.push_op(vec![c, r], out, &[a], Op::Transpose(a)))
    }

    /// `x[B×n] + bias[n]`, broadcasting the bias over the batch axis.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (rows, cols) = self.value(x).matrix_dims("add_bias")?;
        if self.value(bias).numel() != cols {
            return Err(Error::dim(
                "add_bias",
                format!("bias {:?} vs input {:?}", self.shape(bias), self.shape(x)),
            ));
        }
        let b = self.value(bias).data();
        let mut out = self.value(x).data().to_vec();
        for r in 0..rows {
            for (o, bv) in out[r * cols..(r + 1) * cols].iter_mut().zip(b) {
                *o += bv;
            }
        }
        Ok(self.push_op(vec![rows, cols], out, &[x, bias], Op::AddBias(x, bias)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(
                "add",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push_op(shape, out, &[a, b], Op::Add(a, b)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).data().iter().map(|x| x * factor).collect();
        let shape = self.shape(a).to_vec();
        self.push_op(shape, out, &[a], Op::Scale(a, factor))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).data().iter().map(|&x| x.max(0.0)).collect();
        let shape = self.shape(a).to_vec();
        self.push_op(shape, out, &[a], Op::Relu(a))
    }

    /// Direct cross-correlation of `input[B×C×H×W]` with `kernel[O×C×kh×kw]`
    /// and zero padding.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        let (batch, in_ch, height, width) = match self.shape(input)[..] {
            [b, c, h, w] => (b, c, h, w),
            _ => {
                return Err(Error::dim(
                    "conv2d",
                    format!("input must be B×C×H×W, got {:?}", self.shape(input)),
                ))
            }
        };
        let (out_ch, k_ch, kh, kw) = match self.shape(kernel)[..] {
            [o, c, h, w] => (o, c, h, w),
            _ => {
                return Err(Error::dim(
                    "conv2d",
                    format!("kernel must be O×C×kh×kw, got {:?}", self.shape(kernel)),
                ))
            }
        };
        if stride == 0 {
            return Err(Error::dim("conv2d", "stride must be positive"));
        }
        if k_ch != in_ch || height + 2 * pad < kh || width + 2 * pad < kw {
            return Err(Error::dim(
                "conv2d",
                format!(
                    "kernel {:?} incompatible with input {:?} at pad {pad}",
                    self.shape(kernel),
                    self.shape(input)
                ),
            ));
        }
        let geom = ConvGeometry {
            batch,
            in_ch,
            height,
            width,
            out_ch,
            kh,
            kw,
            stride,
            pad,
            out_h: (height + 2 * pad - kh) / stride + 1,
            out_w: (width + 2 * pad - kw) / stride + 1,
        };
        let out = kernels::conv2d_forward(self.value(input).data(), self.value(kernel).data(), &geom);
        Ok(self.push_op(
            vec![batch, out_ch, geom.out_h, geom.out_w],
            out,
            &[input, kernel],
            Op::Conv2d {
                input,
                kernel,
                geom,
            },
        ))
    }

    /// 2×2 mean pooling with stride 2; odd trailing rows/columns are dropped.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let [b, c, h, w] = self.shape4("avg_pool2", x)?;
        let (oh, ow) = (h / 2, w / 2);
        if oh == 0 || ow == 0 {
            return Err(Error::dim("avg_pool2", format!("input {:?} too small", self.shape(x))));
        }
        let src = self.value(x).data();
        let mut out = vec![0.0; b * c * oh * ow];
        for plane in 0..b * c {
            let ib = plane * h * w;
            let ob = plane * oh * ow;
            for y in 0..oh {
                for xx in 0..ow {
                    let s = src[ib + 2 * y * w + 2 * xx]
                        + src[ib + 2 * y * w + 2 * xx + 1]
                        + src[ib + (2 * y + 1) * w + 2 * xx]
                        + src[ib + (2 * y + 1) * w + 2 * xx + 1];
                    out[ob + y * ow + xx] = 0.25 * s;
                }
            }
        }
        Ok(self.push_op(vec![b, c, oh, ow], out, &[x], Op::AvgPool2(x)))
    }

    /// Mean over the spatial axes: `B×C×H×W → B×C`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let [b, c, h, w] = self.shape4("global_avg_pool", x)?;
        let plane = h * w;
        let out = self
            .value(x)
            .data()
            .chunks(plane)
            .map(|p| p.iter().sum::<f64>() / plane as f64)
            .collect();
        Ok(self.push_op(vec![b, c], out, &[x], Op::GlobalAvgPool(x)))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if shape.contains(&0) || numel != self.value(x).numel() {
            return Err(Error::dim(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape(x)),
            ));
        }
        let data = self.value(x).data().to_vec();
        Ok(self.push_op(shape, data, &[x], Op::Reshape(x)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push_op(vec![1], vec![s], &[x], Op::Sum(x))
    }

    /// Divides each row by `max(‖row‖₂, eps)`.
    pub fn normalize_rows(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (rows, cols) = self.value(x).matrix_dims("normalize_rows")?;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(rows * cols);
        let mut norms = Vec::with_capacity(rows);
        for row in src.chunks(cols) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            let denom = n.max(eps);
            out.extend(row.iter().map(|v| v / denom));
            norms.push(n);
        }
        Ok(self.push_op(
            vec![rows, cols],
            out,
            &[x],
            Op::NormalizeRows { x, norms, eps },
        ))
    }

    /// Batch mean of `−log softmax(logits)[label]`, via log-sum-exp.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (rows, classes) = self.value(logits).matrix_dims("softmax_cross_entropy")?;
        if labels.len() != rows {
            return Err(Error::dim(
                "softmax_cross_entropy",
                format!("{} labels for {rows} rows", labels.len()),
            ));
        }
        if let Some((row, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
            return Err(Error::LabelOutOfRange {
                row,
                label,
                classes,
            });
        }
        let src = self.value(logits).data();
        let mut probs = Vec::with_capacity(rows * classes);
        let mut total = 0.0;
        for (row, &label) in src.chunks(classes).zip(labels) {
            let lse = kernels::log_sum_exp(row);
            total += lse - row[label];
            probs.extend(row.iter().map(|v| (v - lse).exp()));
        }
        let loss = total / rows as f64;
        Ok(self.push_op(
            vec![1],
            vec![loss],
            &[logits],
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    fn shape4(&self, op: &'static str, x: Var) -> Result<[usize; 4]> {
        match self.shape(x)[..] {
            [b, c, h, w] => Ok([b, c, h, w]),
            _ => Err(Error::dim(op, format!("expected rank 4, got {:?}", self.shape(x)))),
        }
    }

    /// Reverse pass from a scalar node. Gradients are added to any existing
    /// buffers, so repeated calls accumulate until [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let end = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = (0..end).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..end).rev() {
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            if self.nodes[idx].value.requires_grad {
                self.propagate(idx, &upstream, &mut grads);
            }
            let node = &mut self.nodes[idx].value;
            if node.requires_grad {
                match &mut node.grad {
                    Some(g) => g.iter_mut().zip(&upstream).for_each(|(a, b)| *a += b),
                    None => node.grad = Some(upstream),
                }
            }
        }
        for node in &mut self.nodes[..end] {
            let value = &mut node.value;
            if value.requires_grad && value.grad.is_none() {
                value.grad = Some(vec![0.0; value.data.len()]);
            }
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, up: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let acc = |v: Var, grads: &mut [Option<Vec<f64>>]| -> Option<usize> {
            self.needs(v).then(|| {
                grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
                v.0
            })
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, n) = (self.shape(*a)[0], self.shape(*a)[1]);
                let p = self.shape(*b)[1];
                if let Some(i) = acc(*a, grads) {
                    let da = grads[i].as_mut().unwrap();
                    kernels::matmul_bt_acc(up, self.value(*b).data(), da, m, p, n);
                }
                if let Some(i) = acc(*b, grads) {
                    let db = grads[i].as_mut().unwrap();
                    kernels::matmul_at_acc(self.value(*a).data(), up, db, m, n, p);
                }
            }
            Op::Transpose(a) => {
                if let Some(i) = acc(*a, grads) {
                    let (r, c) = (self.shape(*a)[0], self.shape(*a)[1]);
                    let back = kernels::transpose(up, c, r);
                    add_into(grads[i].as_mut().unwrap(), &back);
                }
            }
            Op::AddBias(x, bias) => {
                if let Some(i) = acc(*x, grads) {
                    add_into(grads[i].as_mut().unwrap(), up);
                }
                if let Some(i) = acc(*bias, grads) {
                    let cols = self.value(*bias).numel();
                    let db = grads[i].as_mut().unwrap();
                    for row in up.chunks(cols) {
                        add_into(db, row);
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(i) = acc(v, grads) {
                        add_into(grads[i].as_mut().unwrap(), up);
                    }
                }
            }
            Op::Scale(a, f) => {
                if let Some(i) = acc(*a, grads) {
                    for (g, u) in grads[i].as_mut().unwrap().iter_mut().zip(up) {
                        *g += f * u;
                    }
                }
            }
            Op::Relu(a) => {
                if let Some(i) = acc(*a, grads) {
                    let x = self.value(*a).data();
                    for ((g, u), &xv) in grads[i].as_mut().unwrap().iter_mut().zip(up).zip(x) {
                        if xv > 0.0 {
                            *g += u;
                        }
                    }
                }
            }
            Op::Conv2d {
                input,
                kernel,
                geom,
            } => {
                let mut din = acc(*input, grads).map(|i| grads[i].take().unwrap());
                let mut dk = acc(*kernel, grads).map(|i| grads[i].take().unwrap());
                kernels::conv2d_backward(
                    self.value(*input).data(),
                    self.value(*kernel).data(),
                    up,
                    geom,
                    din.as_deref_mut(),
                    dk.as_deref_mut(),
                );
                if let Some(d) = din {
                    grads[input.0] = Some(d);
                }
                if let Some(d) = dk {
                    grads[kernel.0] = Some(d);
                }
            }
            Op::AvgPool2(x) => {
                if let Some(i) = acc(*x, grads) {
                    let [_, _, h, w] = self.shape4("avg_pool2", *x).unwrap();
                    let (oh, ow) = (h / 2, w / 2);
                    let dx = grads[i].as_mut().unwrap();
                    for (plane, up_plane) in up.chunks(oh * ow).enumerate() {
                        let ib = plane * h * w;
                        for y in 0..oh {
                            for xx in 0..ow {
                                let g = 0.25 * up_plane[y * ow + xx];
                                dx[ib + 2 * y * w + 2 * xx] += g;
                                dx[ib + 2 * y * w + 2 * xx + 1] += g;
                                dx[ib + (2 * y + 1) * w + 2 * xx] += g;
                                dx[ib + (2 * y + 1) * w + 2 * xx + 1] += g;
                            }
                        }
                    }
                }
            }
            Op::GlobalAvgPool(x) => {
                if let Some(i) = acc(*x, grads) {
                    let [_, _, h, w] = self.shape4("global_avg_pool", *x).unwrap();
                    let plane = h * w;
                    let dx = grads[i].as_mut().unwrap();
                    for (chunk, u) in dx.chunks_mut(plane).zip(up) {
                        let g = u / plane as f64;
                        chunk.iter_mut().for_each(|v| *v += g);
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(i) = acc(*x, grads) {
                    add_into(grads[i].as_mut().unwrap(), up);
                }
            }
            Op::Sum(x) => {
                if let Some(i) = acc(*x, grads) {
                    grads[i].as_mut().unwrap().iter_mut().for_each(|g| *g += up[0]);
                }
            }
            Op::NormalizeRows { x, norms, eps } => {
                if let Some(i) = acc(*x, grads) {
                    let cols = self.shape(*x)[1];
                    let y = node.value.data();
                    let dx = grads[i].as_mut().unwrap();
                    for (r, &n) in norms.iter().enumerate() {
                        let span = r * cols..(r + 1) * cols;
                        let (yr, ur) = (&y[span.clone()], &up[span.clone()]);
                        let dr = &mut dx[span];
                        if n > *eps {
                            let dot: f64 = yr.iter().zip(ur).map(|(a, b)| a * b).sum();
                            for ((d, &u), &yv) in dr.iter_mut().zip(ur).zip(yr) {
                                *d += (u - yv * dot) / n;
                            }
                        } else {
                            for (d, &u) in dr.iter_mut().zip(ur) {
                                *d += u / eps;
                            }
                        }
                    }
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                if let Some(i) = acc(*logits, grads) {
                    let classes = self.shape(*logits)[1];
                    let scale = up[0] / labels.len() as f64;
                    let dl = grads[i].as_mut().unwrap();
                    for (r, &label) in labels.iter().enumerate() {
                        let row = &probs[r * classes..(r + 1) * classes];
                        for (c, &p) in row.iter().enumerate() {
                            let onehot = if c == label { 1.0 } else { 0.0 };
                            dl[r * classes + c] += scale * (p - onehot);
                        }
                    }
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn tensor_rejects_bad_shapes() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![0], vec![]).is_err());
        assert!(Tensor::new(vec![], vec![]).is_err());
    }

    #[test]
    fn matmul_identity_and_annihilator() {
        let mut g = Graph::new();
        let eye = g.constant(t(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]));
        let b = g.constant(t(&[3, 2], &[1.5, -2., 3., 0.25, -7., 11.]));
        let c = g.matmul(eye, b).unwrap();
        assert_eq!(g.value(c).data(), g.value(b).data());

        let z = g.constant(Tensor::zeros(&[2, 4]));
        let r = g.constant(t(&[4, 3], &[1.; 12]));
        let c = g.matmul(z, r).unwrap();
        assert_eq!(g.value(c).data(), &[0.0; 6]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[4, 2]));
        let msg = g.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn conv_identity_kernel_and_zero_kernel() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..16).map(|v| v as f64 - 3.5).collect();
        let x = g.constant(t(&[1, 1, 4, 4], &data));
        let k = g.constant(t(&[1, 1, 1, 1], &[1.0]));
        let y = g.conv2d(x, k, 1, 0).unwrap();
        assert_eq!(g.value(y).data(), &data[..]);

        let k0 = g.constant(Tensor::zeros(&[2, 1, 3, 3]));
        let y0 = g.conv2d(x, k0, 1, 1).unwrap();
        assert_eq!(g.shape(y0), &[1, 2, 4, 4]);
        assert!(g.value(y0).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_kernel_larger_than_padded_input() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 1, 2, 2]));
        let k = g.constant(Tensor::zeros(&[1, 1, 5, 5]));
        assert!(matches!(g.conv2d(x, k, 1, 1), Err(Error::Dimension { .. })));
        assert!(g.conv2d(x, k, 1, 2).is_ok());
    }

    #[test]
    fn conv_output_extent_uses_integer_division() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 3, 7, 6]));
        let k = g.constant(Tensor::zeros(&[4, 3, 3, 2]));
        let y = g.conv2d(x, k, 2, 1).unwrap();
        // (7 + 2 - 3) / 2 + 1 = 4, (6 + 2 - 2) / 2 + 1 = 4
        assert_eq!(g.shape(y), &[2, 4, 4, 4]);
    }

    #[test]
    fn relu_forward_and_subgradient_at_zero() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[3], &[-1.0, 0.0, 2.0]).with_grad());
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn relu_all_negative_gives_zero_grad() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2, 2], &[-1.0, -0.5, -3.0, -1e-9]).with_grad());
        let y = g.relu(x);
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.value(y).data(), &[0.0; 4]);
        assert_eq!(g.grad(x).unwrap(), &[0.0; 4]);
    }

    #[test]
    fn cross_entropy_closed_forms() {
        let mut g = Graph::new();
        let uniform = g.constant(Tensor::zeros(&[3, 10]));
        let l = g.softmax_cross_entropy(uniform, &[0, 4, 9]).unwrap();
        assert!((g.value(l).item() - 10f64.ln()).abs() < 1e-12);

        let x = g.constant(t(&[1, 2], &[2f64.ln(), 0.0]));
        let l = g.softmax_cross_entropy(x, &[0]).unwrap();
        assert!((g.value(l).item() - 1.5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_large_logits_stay_finite() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2, 3], &[1e4, -1e4, 0.0, -1e4, 1e4, 9999.0]).with_grad());
        let l = g.softmax_cross_entropy(x, &[1, 2]).unwrap();
        g.backward(l).unwrap();
        assert!(g.value(l).item().is_finite());
        assert!(g.grad(x).unwrap().iter().all(|v| v.is_finite()));
        // row 0: label logit is 2e4 below the max
        assert!((g.value(l).item() - (2e4 + 1.0 + (-1f64).exp().ln_1p()) / 2.0).abs() < 1e-9);
    }

    #[test]
    fn cross_entropy_label_out_of_range() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 3]));
        match g.softmax_cross_entropy(x, &[0, 3]) {
            Err(Error::LabelOutOfRange { row, label, .. }) => assert_eq!((row, label), (1, 3)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot_over_batch() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2, 2], &[2f64.ln(), 0.0, 0.0, 0.0]).with_grad());
        let l = g.softmax_cross_entropy(x, &[0, 1]).unwrap();
        g.backward(l).unwrap();
        let expect = [(2.0 / 3.0 - 1.0) / 2.0, (1.0 / 3.0) / 2.0, 0.25, -0.25];
        for (a, b) in g.grad(x).unwrap().iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[2, 3, 4]).with_grad());
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 24][..]);
    }

    #[test]
    fn backward_independent_parameter_has_zero_grad() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[1.0, 2.0]).with_grad());
        let p = g.leaf(t(&[3], &[1.0, 2.0, 3.0]).with_grad());
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(p).unwrap(), &[0.0; 3]);
    }

    #[test]
    fn backward_accumulates_until_reset() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[1.0, 2.0]).with_grad());
        let y = g.scale(x, 3.0);
        let s = g.sum(y);
        g.backward(s).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[6.0, 6.0]);
        g.zero_grad();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[3.0, 3.0]);
    }

    #[test]
    fn backward_on_non_scalar_is_usage_error() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[2]).with_grad());
        assert!(matches!(g.backward(x), Err(Error::Usage(_))));
    }

    #[test]
    fn constants_never_receive_gradients() {
        let mut g = Graph::new();
        let c = g.constant(t(&[1, 2], &[1.0, 2.0]).with_grad());
        let w = g.leaf(t(&[2, 1], &[0.5, -0.5]).with_grad());
        let y = g.matmul(c, w).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert!(g.grad(c).is_none());
        assert_eq!(g.grad(w).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn normalize_rows_keeps_zero_rows_zero() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2, 2], &[3.0, 4.0, 0.0, 0.0]).with_grad());
        let y = g.normalize_rows(x, 1e-12).unwrap();
        assert_eq!(g.value(y).data(), &[0.6, 0.8, 0.0, 0.0]);
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert!(g.grad(x).unwrap().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn pooling_shapes_and_values() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..16).map(f64::from).collect();
        let x = g.constant(t(&[1, 1, 4, 4], &data));
        let p = g.avg_pool2(x).unwrap();
        assert_eq!(g.value(p).data(), &[2.5, 4.5, 10.5, 12.5]);
        let gp = g.global_avg_pool(x).unwrap();
        assert_eq!(g.value(gp).data(), &[7.5]);
        assert_eq!(g.shape(gp), &[1, 1]);
    }
}
