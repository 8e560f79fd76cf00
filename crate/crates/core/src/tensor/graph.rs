use rand::Rng;

use super::{Tensor, TensorError};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv1d { input: Var, kernel: Var, bias: Var, stride: usize, padding: usize },
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, xhat: Vec<f64>, inv_std: Vec<f64> },
    Linear { x: Var, w: Var, b: Var },
    Silu { x: Var },
    Dropout { x: Var, mask: Vec<f64> },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddChannel { x: Var, v: Var },
    Concat { a: Var, b: Var },
    Upsample { x: Var, factor: usize },
    MeanTime { x: Var },
    Row { m: Var, row: usize },
    Scale { x: Var, s: f64 },
    Sum { x: Var },
    Mse { a: Var, b: Var },
    CrossEntropy { logits: Var, label: usize, probs: Vec<f64> },
    WeightedSum { terms: Vec<(Var, f64)> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Reverse-mode tape.
///
/// Nodes are appended in evaluation order, so parents always precede children
/// and the backward sweep is a reverse scan.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    consumed: bool,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_finite(op: &'static str, t: &Tensor) -> Result<(), TensorError> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Output range `o` such that `o*stride + kk - padding` lies in `[0, len)`.
fn valid_range(lout: usize, len: usize, kk: usize, stride: usize, padding: usize) -> (usize, usize) {
    let offset = kk as isize - padding as isize;
    let lo = if offset >= 0 {
        0
    } else {
        ((-offset) as usize).div_ceil(stride)
    };
    let hi_excl = {
        let max_in = len as isize - 1 - offset;
        if max_in < 0 {
            0
        } else {
            ((max_in as usize) / stride + 1).min(lout)
        }
    };
    (lo, hi_excl.max(lo))
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds a trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, true, Op::Leaf)
    }

    /// Adds a constant leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, false, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` call with respect to `v`.
    ///
    /// Returns `None` for nodes that do not require gradients or were not
    /// reached from the loss.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, or zeros when it was not reached.
    pub fn grad_or_zeros(&self, v: Var) -> Vec<f64> {
        self.grad(v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; self.nodes[v.0].value.len()])
    }

    /// Clears gradients so `backward` may run again.
    pub fn reset(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
        self.consumed = false;
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node { value, requires_grad, op });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn push_checked(
        &mut self,
        name: &'static str,
        value: Tensor,
        parents: &[Var],
        op: Op,
    ) -> Result<Var, TensorError> {
        check_finite(name, &value)?;
        let rg = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        Ok(self.push(value, rg, op))
    }

    /// 1D cross-correlation of a `Cin×L` input with a `Cout×Cin×K` kernel.
    pub fn conv1d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var, TensorError> {
        const OP: &str = "conv1d";
        if stride == 0 {
            return Err(TensorError::invalid(OP, "stride must be positive"));
        }
        let x = self.value(input);
        let w = self.value(kernel);
        let b = self.value(bias);
        let (cin, len) = x.dims2(OP)?;
        let (cout, wcin, k) = match w.shape() {
            &[a, b, c] => (a, b, c),
            s => return Err(TensorError::shape(OP, format!("kernel must be rank 3, got {s:?}"))),
        };
        if wcin != cin {
            return Err(TensorError::shape(OP, format!("input has {cin} channels, kernel expects {wcin}")));
        }
        if b.shape() != [cout] {
            return Err(TensorError::shape(OP, format!("bias {:?} for {cout} outputs", b.shape())));
        }
        let span = len as isize + 2 * padding as isize - k as isize;
        if span < 0 {
            return Err(TensorError::invalid(OP, format!("output length < 1 (L={len}, K={k}, pad={padding})")));
        }
        let lout = span as usize / stride + 1;

        let xd = x.data();
        let wd = w.data();
        let mut out = vec![0.0; cout * lout];
        for co in 0..cout {
            let orow = &mut out[co * lout..(co + 1) * lout];
            orow.fill(b.data()[co]);
            for ci in 0..cin {
                let xrow = &xd[ci * len..(ci + 1) * len];
                for kk in 0..k {
                    let wv = wd[(co * cin + ci) * k + kk];
                    let (lo, hi) = valid_range(lout, len, kk, stride, padding);
                    if lo >= hi {
                        continue;
                    }
                    let start = lo * stride + kk - padding;
                    if stride == 1 {
                        let xs = &xrow[start..start + (hi - lo)];
                        for (o, xv) in orow[lo..hi].iter_mut().zip(xs) {
                            *o += wv * xv;
                        }
                    } else {
                        for (j, o) in orow[lo..hi].iter_mut().enumerate() {
                            *o += wv * xrow[start + j * stride];
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![cout, lout], out)?;
        self.push_checked(OP, value, &[input, kernel, bias], Op::Conv1d { input, kernel, bias, stride, padding })
    }

    /// Group normalization over `(channels in group) × L`, then per-channel affine.
    pub fn group_norm(
        &mut self,
        x: Var,
        groups: usize,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<Var, TensorError> {
        const OP: &str = "group_norm";
        let xv = self.value(x);
        let (c, len) = xv.dims2(OP)?;
        if groups == 0 || c % groups != 0 {
            return Err(TensorError::invalid(OP, format!("{c} channels not divisible by {groups} groups")));
        }
        let g = self.value(gamma);
        let bt = self.value(beta);
        if g.shape() != [c] || bt.shape() != [c] {
            return Err(TensorError::shape(OP, format!("gamma {:?} beta {:?} for {c} channels", g.shape(), bt.shape())));
        }
        let cpg = c / groups;
        let n = (cpg * len) as f64;
        let xd = xv.data();
        let mut xhat = vec![0.0; c * len];
        let mut inv_std = vec![0.0; groups];
        let mut out = vec![0.0; c * len];
        for gi in 0..groups {
            let range = gi * cpg * len..(gi + 1) * cpg * len;
            let seg = &xd[range.clone()];
            let mean = seg.iter().sum::<f64>() / n;
            let var = seg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[gi] = inv;
            for (h, v) in xhat[range].iter_mut().zip(seg) {
                *h = (v - mean) * inv;
            }
        }
        for ch in 0..c {
            let (gm, bs) = (g.data()[ch], bt.data()[ch]);
            for l in 0..len {
                out[ch * len + l] = gm * xhat[ch * len + l] + bs;
            }
        }
        let value = Tensor::new(vec![c, len], out)?;
        self.push_checked(OP, value, &[x, gamma, beta], Op::GroupNorm { x, gamma, beta, groups, xhat, inv_std })
    }

    /// `W·x + b` for a vector `x` of length N and `W` of shape `M×N`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, TensorError> {
        const OP: &str = "linear";
        let xv = self.value(x);
        let wv = self.value(w);
        let bv = self.value(b);
        let (m, n) = wv.dims2(OP)?;
        if xv.len() != n || xv.shape().len() != 1 {
            return Err(TensorError::shape(OP, format!("x {:?} for weight {m}×{n}", xv.shape())));
        }
        if bv.shape() != [m] {
            return Err(TensorError::shape(OP, format!("bias {:?} for {m} outputs", bv.shape())));
        }
        let out: Vec<f64> = (0..m)
            .map(|i| {
                let row = &wv.data()[i * n..(i + 1) * n];
                bv.data()[i] + row.iter().zip(xv.data()).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect();
        self.push_checked(OP, Tensor::from_vec(out), &[x, w, b], Op::Linear { x, w, b })
    }

    pub fn silu(&mut self, x: Var) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let out: Vec<f64> = xv.data().iter().map(|&v| v * sigmoid(v)).collect();
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        self.push_checked("silu", value, &[x], Op::Silu { x })
    }

    /// Inverted dropout. Identity in evaluation mode or with `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        p: f64,
        rng: &mut R,
        training: bool,
    ) -> Result<Var, TensorError> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::invalid("dropout", format!("p = {p} outside [0, 1)")));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let xv = self.value(x);
        let mask: Vec<f64> = (0..xv.len())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let out: Vec<f64> = xv.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        self.push_checked("dropout", value, &[x], Op::Dropout { x, mask })
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(TensorError::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("add", a, b)?;
        let out: Vec<f64> =
            self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), out)?;
        self.push_checked("add", value, &[a, b], Op::Add { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("mul", a, b)?;
        let out: Vec<f64> =
            self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), out)?;
        self.push_checked("mul", value, &[a, b], Op::Mul { a, b })
    }

    /// Adds a per-channel vector to every time step of a `C×L` map.
    pub fn add_channel(&mut self, x: Var, v: Var) -> Result<Var, TensorError> {
        const OP: &str = "add_channel";
        let xv = self.value(x);
        let (c, len) = xv.dims2(OP)?;
        let vv = self.value(v);
        if vv.shape() != [c] {
            return Err(TensorError::shape(OP, format!("vector {:?} for {c} channels", vv.shape())));
        }
        let mut out = xv.data().to_vec();
        for ch in 0..c {
            let add = vv.data()[ch];
            out[ch * len..(ch + 1) * len].iter_mut().for_each(|o| *o += add);
        }
        let value = Tensor::new(vec![c, len], out)?;
        self.push_checked(OP, value, &[x, v], Op::AddChannel { x, v })
    }

    /// Channel-wise concatenation of two maps of equal length.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        const OP: &str = "concat";
        let (ca, la) = self.value(a).dims2(OP)?;
        let (cb, lb) = self.value(b).dims2(OP)?;
        if la != lb {
            return Err(TensorError::shape(OP, format!("lengths {la} and {lb}")));
        }
        let mut out = Vec::with_capacity((ca + cb) * la);
        out.extend_from_slice(self.value(a).data());
        out.extend_from_slice(self.value(b).data());
        let value = Tensor::new(vec![ca + cb, la], out)?;
        self.push_checked(OP, value, &[a, b], Op::Concat { a, b })
    }

    /// Nearest-neighbour upsampling along time.
    pub fn upsample(&mut self, x: Var, factor: usize) -> Result<Var, TensorError> {
        const OP: &str = "upsample";
        if factor == 0 {
            return Err(TensorError::invalid(OP, "factor must be positive"));
        }
        let (c, len) = self.value(x).dims2(OP)?;
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(c * len * factor);
        for ch in 0..c {
            for &v in &xd[ch * len..(ch + 1) * len] {
                out.extend(std::iter::repeat_n(v, factor));
            }
        }
        let value = Tensor::new(vec![c, len * factor], out)?;
        self.push_checked(OP, value, &[x], Op::Upsample { x, factor })
    }

    /// Mean over time of a `C×L` map, giving a length-C vector.
    pub fn mean_time(&mut self, x: Var) -> Result<Var, TensorError> {
        const OP: &str = "mean_time";
        let (c, len) = self.value(x).dims2(OP)?;
        let xd = self.value(x).data();
        let out: Vec<f64> =
            (0..c).map(|ch| xd[ch * len..(ch + 1) * len].iter().sum::<f64>() / len as f64).collect();
        self.push_checked(OP, Tensor::from_vec(out), &[x], Op::MeanTime { x })
    }

    /// Selects one row of a matrix.
    pub fn row(&mut self, m: Var, row: usize) -> Result<Var, TensorError> {
        const OP: &str = "row";
        let (r, d) = self.value(m).dims2(OP)?;
        if row >= r {
            return Err(TensorError::invalid(OP, format!("row {row} of {r}")));
        }
        let out = self.value(m).data()[row * d..(row + 1) * d].to_vec();
        self.push_checked(OP, Tensor::from_vec(out), &[m], Op::Row { m, row })
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let value = Tensor::new(xv.shape().to_vec(), xv.data().iter().map(|v| v * s).collect())?;
        self.push_checked("scale", value, &[x], Op::Scale { x, s })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, TensorError> {
        let s = self.value(x).data().iter().sum::<f64>();
        self.push_checked("sum", Tensor::scalar(s), &[x], Op::Sum { x })
    }

    /// Mean squared difference, as a scalar.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("mse", a, b)?;
        let n = self.value(a).len() as f64;
        let s = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / n;
        self.push_checked("mse", Tensor::scalar(s), &[a, b], Op::Mse { a, b })
    }

    /// `-log softmax(logits)[label]` with max subtraction.
    pub fn softmax_cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var, TensorError> {
        const OP: &str = "softmax_cross_entropy";
        let lv = self.value(logits);
        if lv.shape().len() != 1 {
            return Err(TensorError::shape(OP, format!("logits must be a vector, got {:?}", lv.shape())));
        }
        if label >= lv.len() {
            return Err(TensorError::invalid(OP, format!("label {label} out of range for {} classes", lv.len())));
        }
        let probs = softmax(lv.data());
        let max = lv.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + lv.data().iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let loss = lse - lv.data()[label];
        self.push_checked(OP, Tensor::scalar(loss), &[logits], Op::CrossEntropy { logits, label, probs })
    }

    /// `Σ wᵢ·termᵢ` over scalar terms.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var, TensorError> {
        const OP: &str = "weighted_sum";
        let mut s = 0.0;
        for &(v, w) in terms {
            let t = self.value(v);
            if !t.is_scalar() {
                return Err(TensorError::shape(OP, format!("term {:?} is not scalar", t.shape())));
            }
            s += w * t.item();
        }
        let parents: Vec<Var> = terms.iter().map(|t| t.0).collect();
        self.push_checked(OP, Tensor::scalar(s), &parents, Op::WeightedSum { terms: terms.to_vec() })
    }

    /// Back-propagates from a scalar loss into every node requiring gradients.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.consumed {
            return Err(TensorError::AlreadyConsumed);
        }
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(TensorError::NotScalar(lv.shape().to_vec()));
        }
        self.consumed = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);

        let Graph { nodes, grads, .. } = self;
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            backprop_node(nodes, grads, node, &g);
            grads[i] = Some(g);
        }
        Ok(())
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Returns the gradient buffer for `v`, allocating zeros on first touch, or
/// `None` when `v` does not need a gradient.
fn slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.len()]))
}

fn backprop_node(nodes: &[Node], grads: &mut [Option<Vec<f64>>], node: &Node, g: &[f64]) {
    match &node.op {
        Op::Leaf => {}
        &Op::Conv1d { input, kernel, bias, stride, padding } => {
            let x = &nodes[input.0].value;
            let w = &nodes[kernel.0].value;
            let (cin, len) = (x.shape()[0], x.shape()[1]);
            let (cout, k) = (w.shape()[0], w.shape()[2]);
            let lout = node.value.shape()[1];
            if let Some(gb) = slot(nodes, grads, bias) {
                for co in 0..cout {
                    gb[co] += g[co * lout..(co + 1) * lout].iter().sum::<f64>();
                }
            }
            if let Some(gw) = slot(nodes, grads, kernel) {
                for co in 0..cout {
                    let grow = &g[co * lout..(co + 1) * lout];
                    for ci in 0..cin {
                        let xrow = &x.data()[ci * len..(ci + 1) * len];
                        for kk in 0..k {
                            let (lo, hi) = valid_range(lout, len, kk, stride, padding);
                            if lo >= hi {
                                continue;
                            }
                            let start = lo * stride + kk - padding;
                            let acc: f64 = if stride == 1 {
                                grow[lo..hi].iter().zip(&xrow[start..start + hi - lo]).map(|(a, b)| a * b).sum()
                            } else {
                                grow[lo..hi].iter().enumerate().map(|(j, a)| a * xrow[start + j * stride]).sum()
                            };
                            gw[(co * cin + ci) * k + kk] += acc;
                        }
                    }
                }
            }
            if let Some(gx) = slot(nodes, grads, input) {
                for co in 0..cout {
                    let grow = &g[co * lout..(co + 1) * lout];
                    for ci in 0..cin {
                        let gxrow = &mut gx[ci * len..(ci + 1) * len];
                        for kk in 0..k {
                            let wv = w.data()[(co * cin + ci) * k + kk];
                            let (lo, hi) = valid_range(lout, len, kk, stride, padding);
                            if lo >= hi {
                                continue;
                            }
                            let start = lo * stride + kk - padding;
                            if stride == 1 {
                                for (d, a) in gxrow[start..start + hi - lo].iter_mut().zip(&grow[lo..hi]) {
                                    *d += wv * a;
                                }
                            } else {
                                for (j, a) in grow[lo..hi].iter().enumerate() {
                                    gxrow[start + j * stride] += wv * a;
                                }
                            }
                        }
                    }
                }
            }
        }
        Op::GroupNorm { x, gamma, beta, groups, xhat, inv_std } => {
            let (c, len) = (node.value.shape()[0], node.value.shape()[1]);
            let gm = nodes[gamma.0].value.data();
            if let Some(gb) = slot(nodes, grads, *beta) {
                for ch in 0..c {
                    gb[ch] += g[ch * len..(ch + 1) * len].iter().sum::<f64>();
                }
            }
            if let Some(gg) = slot(nodes, grads, *gamma) {
                for ch in 0..c {
                    let r = ch * len..(ch + 1) * len;
                    gg[ch] += g[r.clone()].iter().zip(&xhat[r]).map(|(a, b)| a * b).sum::<f64>();
                }
            }
            if let Some(gx) = slot(nodes, grads, *x) {
                let cpg = c / groups;
                let n = (cpg * len) as f64;
                for gi in 0..*groups {
                    let mut sum_d = 0.0;
                    let mut sum_dx = 0.0;
                    for ch in gi * cpg..(gi + 1) * cpg {
                        for l in 0..len {
                            let d = g[ch * len + l] * gm[ch];
                            sum_d += d;
                            sum_dx += d * xhat[ch * len + l];
                        }
                    }
                    let inv = inv_std[gi];
                    for ch in gi * cpg..(gi + 1) * cpg {
                        for l in 0..len {
                            let idx = ch * len + l;
                            let d = g[idx] * gm[ch];
                            gx[idx] += inv / n * (n * d - sum_d - xhat[idx] * sum_dx);
                        }
                    }
                }
            }
        }
        &Op::Linear { x, w, b } => {
            let xv = nodes[x.0].value.data();
            let wv = &nodes[w.0].value;
            let (m, n) = (wv.shape()[0], wv.shape()[1]);
            if let Some(gb) = slot(nodes, grads, b) {
                add_into(gb, g);
            }
            if let Some(gw) = slot(nodes, grads, w) {
                for i in 0..m {
                    for j in 0..n {
                        gw[i * n + j] += g[i] * xv[j];
                    }
                }
            }
            if let Some(gx) = slot(nodes, grads, x) {
                for i in 0..m {
                    for j in 0..n {
                        gx[j] += wv.data()[i * n + j] * g[i];
                    }
                }
            }
        }
        &Op::Silu { x } => {
            let xv = nodes[x.0].value.data();
            if let Some(gx) = slot(nodes, grads, x) {
                for ((d, &v), a) in gx.iter_mut().zip(xv).zip(g) {
                    let s = sigmoid(v);
                    *d += a * s * (1.0 + v * (1.0 - s));
                }
            }
        }
        Op::Dropout { x, mask } => {
            if let Some(gx) = slot(nodes, grads, *x) {
                for ((d, m), a) in gx.iter_mut().zip(mask).zip(g) {
                    *d += a * m;
                }
            }
        }
        &Op::Add { a, b } => {
            if let Some(ga) = slot(nodes, grads, a) {
                add_into(ga, g);
            }
            if let Some(gb) = slot(nodes, grads, b) {
                add_into(gb, g);
            }
        }
        &Op::Mul { a, b } => {
            let av = nodes[a.0].value.data();
            let bv = nodes[b.0].value.data();
            if let Some(ga) = slot(nodes, grads, a) {
                for ((d, y), gi) in ga.iter_mut().zip(bv).zip(g) {
                    *d += gi * y;
                }
            }
            if let Some(gb) = slot(nodes, grads, b) {
                for ((d, x), gi) in gb.iter_mut().zip(av).zip(g) {
                    *d += gi * x;
                }
            }
        }
        &Op::AddChannel { x, v } => {
            let (c, len) = (node.value.shape()[0], node.value.shape()[1]);
            if let Some(gx) = slot(nodes, grads, x) {
                add_into(gx, g);
            }
            if let Some(gv) = slot(nodes, grads, v) {
                for ch in 0..c {
                    gv[ch] += g[ch * len..(ch + 1) * len].iter().sum::<f64>();
                }
            }
        }
        &Op::Concat { a, b } => {
            let na = nodes[a.0].value.len();
            if let Some(ga) = slot(nodes, grads, a) {
                add_into(ga, &g[..na]);
            }
            if let Some(gb) = slot(nodes, grads, b) {
                add_into(gb, &g[na..]);
            }
        }
        &Op::Upsample { x, factor } => {
            if let Some(gx) = slot(nodes, grads, x) {
                for (d, chunk) in gx.iter_mut().zip(g.chunks_exact(factor)) {
                    *d += chunk.iter().sum::<f64>();
                }
            }
        }
        &Op::MeanTime { x } => {
            let (c, len) = {
                let s = nodes[x.0].value.shape();
                (s[0], s[1])
            };
            if let Some(gx) = slot(nodes, grads, x) {
                for ch in 0..c {
                    let v = g[ch] / len as f64;
                    gx[ch * len..(ch + 1) * len].iter_mut().for_each(|d| *d += v);
                }
            }
        }
        &Op::Row { m, row } => {
            let d = nodes[m.0].value.shape()[1];
            if let Some(gm) = slot(nodes, grads, m) {
                add_into(&mut gm[row * d..(row + 1) * d], g);
            }
        }
        &Op::Scale { x, s } => {
            if let Some(gx) = slot(nodes, grads, x) {
                for (d, a) in gx.iter_mut().zip(g) {
                    *d += a * s;
                }
            }
        }
        &Op::Sum { x } => {
            if let Some(gx) = slot(nodes, grads, x) {
                gx.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        &Op::Mse { a, b } => {
            let av = nodes[a.0].value.data();
            let bv = nodes[b.0].value.data();
            let scale = 2.0 * g[0] / av.len() as f64;
            if let Some(ga) = slot(nodes, grads, a) {
                for ((d, x), y) in ga.iter_mut().zip(av).zip(bv) {
                    *d += scale * (x - y);
                }
            }
            if let Some(gb) = slot(nodes, grads, b) {
                for ((d, x), y) in gb.iter_mut().zip(av).zip(bv) {
                    *d -= scale * (x - y);
                }
            }
        }
        Op::CrossEntropy { logits, label, probs } => {
            if let Some(gl) = slot(nodes, grads, *logits) {
                for (k, (d, p)) in gl.iter_mut().zip(probs).enumerate() {
                    let target = if k == *label { 1.0 } else { 0.0 };
                    *d += g[0] * (p - target);
                }
            }
        }
        Op::WeightedSum { terms } => {
            for &(v, w) in terms {
                if let Some(gv) = slot(nodes, grads, v) {
                    gv[0] += g[0] * w;
                }
            }
        }
    }
}
