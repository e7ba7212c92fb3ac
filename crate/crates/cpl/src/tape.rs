//! Reverse-mode automatic differentiation on an append-only tape.
//!
//! Every operation records a node holding its forward value and the parent
//! references needed for the chain rule. `backward` walks the nodes in strict
//! reverse append order (a valid reverse topological order, since parents are
//! always appended before children) and accumulates gradients by summation,
//! so a value feeding several consumers receives the sum of branch gradients.
//! A tape is consumed by its first `backward`; calling it again is an error.
//!
//! Forward outputs are checked for NaN/Inf on every op. The tape also folds a
//! "kink signature" over all non-smooth decisions (ReLU signs, clip masks,
//! absolute-value signs, retained gate sets); finite-difference harnesses
//! compare signatures across stencil evaluations to exclude probes that
//! straddle a kink.

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom, Padding};
use crate::tensor::Tensor;

/// Handle to a node on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    AddScalar(Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulScalar(Var, f64),
    Power(Var, f64),
    Clip(Var, f64, f64),
    Relu(Var),
    Matmul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Conv2d { input: Var, kernels: Var, geom: ConvGeom },
    Softmax(Var),
    /// Softmax over a retained subset of the logits with the normalizer
    /// treated as a constant in backward: d out_j / d z[retained_j] = out_j,
    /// zero for every logit outside the retained set. This keeps a k=1 gate
    /// trainable (a fully renormalized weight is constantly 1) and makes
    /// gate-gradient locality exact. Deliberately not the Jacobian of the
    /// renormalized forward; it is exactly the Jacobian of the frozen-
    /// normalizer forward (`topk_renorm_frozen`), which finite-difference
    /// harnesses evaluate so stencils measure the rule as defined.
    TopkRenorm { logits: Var, retained: Vec<usize> },
    GatherRows { src: Var, rows: Vec<usize>, cols: usize },
    Sum(Var),
    Mean(Var),
    L1Mean(Var),
    L2SqMean(Var),
    AddChannel { x: Var, bias: Var, hw: usize },
    MulChannel { x: Var, scale: Var, hw: usize },
    SpatialMean { x: Var, hw: usize },
    Upsample2x { x: Var, ch: usize, h: usize, w: usize },
    AvgPool2x { x: Var, ch: usize, h: usize, w: usize },
    Reshape(Var),
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    needs_grad: bool,
    op: Op,
}

pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
    kink_sig: u64,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), consumed: false, kink_sig: 0xcbf29ce484222325 }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    /// Hash of every non-smooth decision taken during the forward passes
    /// recorded so far (ReLU signs, clip masks, absolute-value signs,
    /// retained gate sets).
    pub fn kink_signature(&self) -> u64 {
        self.kink_sig
    }

    fn fold_sig(&mut self, word: u64) {
        self.kink_sig ^= word;
        self.kink_sig = self.kink_sig.wrapping_mul(0x100000001b3);
    }

    fn fold_sig_bits(&mut self, bits: impl Iterator<Item = bool>) {
        let mut word = 1u64; // sentinel bit keeps chunks length-aware
        for b in bits {
            word = (word << 1) | b as u64;
            if word >> 63 == 1 {
                self.fold_sig(word);
                word = 1;
            }
        }
        if word != 1 {
            self.fold_sig(word);
        }
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Gradient of the last backward target w.r.t. `v`, if one was computed.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Detached value snapshot.
    pub fn to_tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.nodes[v.0].shape.clone(), self.nodes[v.0].data.clone())
            .expect("tape nodes always carry consistent shapes")
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, needs_grad: bool, op: Op) -> Result<Var> {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let opname = op_name(&op);
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: opname });
        }
        self.nodes.push(Node { shape, data, grad: None, needs_grad, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Record a tensor as a leaf; gradient participation follows the tensor's
    /// `requires_grad` flag.
    pub fn leaf(&mut self, t: &Tensor) -> Result<Var> {
        self.push(t.shape().to_vec(), t.data().to_vec(), t.requires_grad(), Op::Leaf)
    }

    /// Record a tensor as a constant (never receives gradient).
    pub fn constant(&mut self, t: &Tensor) -> Result<Var> {
        self.push(t.shape().to_vec(), t.data().to_vec(), false, Op::Leaf)
    }

    /// Snapshot a node's current value as a new constant leaf: stop-gradient.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let shape = self.nodes[v.0].shape.clone();
        let data = self.nodes[v.0].data.clone();
        self.push(shape, data, false, Op::Leaf)
    }

    fn binary_shapes(&self, op: &'static str, a: Var, b: Var) -> Result<(bool, bool)> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        let (la, lb) = (self.nodes[a.0].data.len(), self.nodes[b.0].data.len());
        // Only scalar-vs-tensor and equal-shape broadcasting.
        if sa == sb {
            Ok((false, false))
        } else if la == 1 {
            Ok((true, false))
        } else if lb == 1 {
            Ok((false, true))
        } else {
            Err(Error::shape(op, format!("{sa:?} vs {sb:?}")))
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ba, bb) = self.binary_shapes("add", a, b)?;
        let (da, db) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
        let (shape, data): (Vec<usize>, Vec<f64>) = if ba {
            (self.nodes[b.0].shape.clone(), db.iter().map(|y| da[0] + y).collect())
        } else if bb {
            (self.nodes[a.0].shape.clone(), da.iter().map(|x| x + db[0]).collect())
        } else {
            (self.nodes[a.0].shape.clone(), da.iter().zip(db).map(|(x, y)| x + y).collect())
        };
        let ng = self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad;
        self.push(shape, data, ng, Op::Add(a, b))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let data = self.nodes[a.0].data.iter().map(|x| x + c).collect();
        let (shape, ng) = (self.nodes[a.0].shape.clone(), self.nodes[a.0].needs_grad);
        self.push(shape, data, ng, Op::AddScalar(a))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ba, bb) = self.binary_shapes("sub", a, b)?;
        let (da, db) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
        let (shape, data): (Vec<usize>, Vec<f64>) = if ba {
            (self.nodes[b.0].shape.clone(), db.iter().map(|y| da[0] - y).collect())
        } else if bb {
            (self.nodes[a.0].shape.clone(), da.iter().map(|x| x - db[0]).collect())
        } else {
            (self.nodes[a.0].shape.clone(), da.iter().zip(db).map(|(x, y)| x - y).collect())
        };
        let ng = self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad;
        self.push(shape, data, ng, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ba, bb) = self.binary_shapes("mul", a, b)?;
        let (da, db) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
        let (shape, data): (Vec<usize>, Vec<f64>) = if ba {
            (self.nodes[b.0].shape.clone(), db.iter().map(|y| da[0] * y).collect())
        } else if bb {
            (self.nodes[a.0].shape.clone(), da.iter().map(|x| x * db[0]).collect())
        } else {
            (self.nodes[a.0].shape.clone(), da.iter().zip(db).map(|(x, y)| x * y).collect())
        };
        let ng = self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad;
        self.push(shape, data, ng, Op::Mul(a, b))
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let data = self.nodes[a.0].data.iter().map(|x| x * c).collect();
        let (shape, ng) = (self.nodes[a.0].shape.clone(), self.nodes[a.0].needs_grad);
        self.push(shape, data, ng, Op::MulScalar(a, c))
    }

    /// Elementwise `a^c` for a constant exponent.
    pub fn power(&mut self, a: Var, c: f64) -> Result<Var> {
        let data = self.nodes[a.0].data.iter().map(|x| x.powf(c)).collect();
        let (shape, ng) = (self.nodes[a.0].shape.clone(), self.nodes[a.0].needs_grad);
        self.push(shape, data, ng, Op::Power(a, c))
    }

    /// Clamp into [lo, hi]; zero gradient outside the open interval. The
    /// training loss never uses this (dead gradients); it exists for the
    /// optional margin cap and for completeness.
    pub fn clip(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        if !(lo <= hi) {
            return Err(Error::InvalidArgument(format!("clip bounds inverted: [{lo}, {hi}]")));
        }
        let src = &self.nodes[a.0];
        let data: Vec<f64> = src.data.iter().map(|x| x.clamp(lo, hi)).collect();
        let (shape, ng) = (src.shape.clone(), src.needs_grad);
        let mask: Vec<bool> = self.nodes[a.0].data.iter().map(|&x| x > lo && x < hi).collect();
        self.fold_sig_bits(mask.into_iter());
        self.push(shape, data, ng, Op::Clip(a, lo, hi))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|x| x.max(0.0)).collect();
        let (shape, ng) = (self.nodes[a.0].shape.clone(), self.nodes[a.0].needs_grad);
        let signs: Vec<bool> = self.nodes[a.0].data.iter().map(|&x| x > 0.0).collect();
        self.fold_sig_bits(signs.into_iter());
        self.push(shape, data, ng, Op::Relu(a))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        let ([m, k], [k2, n]) = (
            <[usize; 2]>::try_from(sa.as_slice())
                .map_err(|_| Error::shape("matmul", format!("lhs must be 2-D, got {sa:?}")))?,
            <[usize; 2]>::try_from(sb.as_slice())
                .map_err(|_| Error::shape("matmul", format!("rhs must be 2-D, got {sb:?}")))?,
        );
        if k != k2 {
            return Err(Error::shape("matmul", format!("inner dims differ: {sa:?} · {sb:?}")));
        }
        let (da, db) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let aip = da[i * k + p];
                let brow = &db[p * n..][..n];
                let orow = &mut out[i * n..][..n];
                for (o, bv) in orow.iter_mut().zip(brow) {
                    *o += aip * bv;
                }
            }
        }
        let ng = self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad;
        self.push(vec![m, n], out, ng, Op::Matmul { a, b, m, k, n })
    }

    pub fn conv2d(&mut self, input: Var, kernels: Var, stride: usize, padding: Padding) -> Result<Var> {
        let geom =
            ConvGeom::resolve(&self.nodes[input.0].shape, &self.nodes[kernels.0].shape, stride, padding)?;
        let mut out = vec![0.0; geom.c_out * geom.out_h * geom.out_w];
        kernels::conv2d_forward(&self.nodes[input.0].data, &self.nodes[kernels.0].data, &geom, &mut out);
        let ng = self.nodes[input.0].needs_grad || self.nodes[kernels.0].needs_grad;
        self.push(geom.out_shape(), out, ng, Op::Conv2d { input, kernels, geom })
    }

    pub fn softmax(&mut self, z: Var) -> Result<Var> {
        let node = &self.nodes[z.0];
        if node.shape.len() != 1 {
            return Err(Error::shape("softmax", format!("expects a vector, got {:?}", node.shape)));
        }
        let data = kernels::softmax(&node.data);
        let (shape, ng) = (node.shape.clone(), node.needs_grad);
        self.push(shape, data, ng, Op::Softmax(z))
    }

    /// Renormalized weights over a retained index subset (see `Op::TopkRenorm`
    /// for the backward convention). Forward equals softmax over the retained
    /// logits exactly.
    pub fn topk_renorm(&mut self, logits: Var, retained: &[usize]) -> Result<Var> {
        let node = &self.nodes[logits.0];
        if node.shape.len() != 1 {
            return Err(Error::shape("topk_renorm", format!("expects a vector, got {:?}", node.shape)));
        }
        let n = node.data.len();
        if retained.is_empty() || retained.iter().any(|&i| i >= n) {
            return Err(Error::InvalidArgument(format!(
                "retained set {retained:?} invalid for {n} logits"
            )));
        }
        let data = kernels::softmax_over(&node.data, retained);
        let ng = node.needs_grad;
        for &i in retained {
            self.fold_sig(i as u64 + 1);
        }
        self.push(vec![retained.len()], data, ng, Op::TopkRenorm { logits, retained: retained.to_vec() })
    }

    /// `topk_renorm` with the stabilizing shift and exp-sum injected from a
    /// base evaluation instead of recomputed: w_j = exp(z_j − shift) / sum.
    /// At the base point this reproduces `topk_renorm` bit for bit; away
    /// from it, it is the function whose true derivative is the frozen-
    /// normalizer rule of `Op::TopkRenorm`. Finite-difference stencils use
    /// this so their numeric derivative measures exactly the gradient the
    /// backward pass reports.
    pub fn topk_renorm_frozen(
        &mut self,
        logits: Var,
        retained: &[usize],
        shift: f64,
        sum: f64,
    ) -> Result<Var> {
        let node = &self.nodes[logits.0];
        if node.shape.len() != 1 {
            return Err(Error::shape("topk_renorm", format!("expects a vector, got {:?}", node.shape)));
        }
        let n = node.data.len();
        if retained.is_empty() || retained.iter().any(|&i| i >= n) {
            return Err(Error::InvalidArgument(format!(
                "retained set {retained:?} invalid for {n} logits"
            )));
        }
        if !(shift.is_finite() && sum.is_finite() && sum > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "frozen normalizer must be finite with a positive sum, got shift {shift}, sum {sum}"
            )));
        }
        let data: Vec<f64> = retained.iter().map(|&i| (node.data[i] - shift).exp() / sum).collect();
        let ng = node.needs_grad;
        for &i in retained {
            self.fold_sig(i as u64 + 1);
        }
        self.push(vec![retained.len()], data, ng, Op::TopkRenorm { logits, retained: retained.to_vec() })
    }

    pub fn gather_rows(&mut self, src: Var, rows: &[usize]) -> Result<Var> {
        let node = &self.nodes[src.0];
        let [r, c] = *node.shape.as_slice() else {
            return Err(Error::shape("gather_rows", format!("expects a matrix, got {:?}", node.shape)));
        };
        if rows.iter().any(|&i| i >= r) {
            return Err(Error::InvalidArgument(format!("row index out of range: {rows:?} for {r} rows")));
        }
        let mut data = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            data.extend_from_slice(&node.data[i * c..][..c]);
        }
        let ng = node.needs_grad;
        self.push(vec![rows.len(), c], data, ng, Op::GatherRows { src, rows: rows.to_vec(), cols: c })
    }

    fn reduce(&mut self, a: Var, op: Op, f: impl Fn(&[f64]) -> f64) -> Result<Var> {
        let node = &self.nodes[a.0];
        if node.data.is_empty() {
            return Err(Error::InvalidArgument("reduction over an empty tensor".into()));
        }
        let v = f(&node.data);
        let ng = node.needs_grad;
        self.push(vec![1], vec![v], ng, op)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.reduce(a, Op::Sum(a), |d| d.iter().sum())
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.reduce(a, Op::Mean(a), |d| d.iter().sum::<f64>() / d.len() as f64)
    }

    /// Mean absolute value. The sign pattern enters the kink signature: each
    /// |·| creases at zero exactly like a ReLU, and finite-difference probes
    /// straddling a crease must be detectable.
    pub fn l1_mean(&mut self, a: Var) -> Result<Var> {
        let signs: Vec<bool> = self.nodes[a.0].data.iter().map(|&x| x > 0.0).collect();
        self.fold_sig_bits(signs.into_iter());
        self.reduce(a, Op::L1Mean(a), |d| d.iter().map(|x| x.abs()).sum::<f64>() / d.len() as f64)
    }

    /// Mean squared value (squared ℓ2 distance as a mean over elements).
    pub fn l2_sq_mean(&mut self, a: Var) -> Result<Var> {
        self.reduce(a, Op::L2SqMean(a), |d| d.iter().map(|x| x * x).sum::<f64>() / d.len() as f64)
    }

    fn chw(&self, op: &'static str, x: Var) -> Result<(usize, usize, usize)> {
        let [c, h, w] = *self.nodes[x.0].shape.as_slice() else {
            return Err(Error::shape(op, format!("expects C×H×W, got {:?}", self.nodes[x.0].shape)));
        };
        Ok((c, h, w))
    }

    /// Per-channel bias: out[c,·] = x[c,·] + bias[c].
    pub fn add_channel(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (c, h, w) = self.chw("add_channel", x)?;
        if self.nodes[bias.0].shape != [c] {
            return Err(Error::shape(
                "add_channel",
                format!("bias {:?} vs {} channels", self.nodes[bias.0].shape, c),
            ));
        }
        let hw = h * w;
        let (dx, db) = (&self.nodes[x.0].data, &self.nodes[bias.0].data);
        let mut out = Vec::with_capacity(c * hw);
        for ch in 0..c {
            let b = db[ch];
            out.extend(dx[ch * hw..][..hw].iter().map(|v| v + b));
        }
        let ng = self.nodes[x.0].needs_grad || self.nodes[bias.0].needs_grad;
        let shape = self.nodes[x.0].shape.clone();
        self.push(shape, out, ng, Op::AddChannel { x, bias, hw })
    }

    /// Per-channel scale: out[c,·] = x[c,·] · scale[c].
    pub fn mul_channel(&mut self, x: Var, scale: Var) -> Result<Var> {
        let (c, h, w) = self.chw("mul_channel", x)?;
        if self.nodes[scale.0].shape != [c] {
            return Err(Error::shape(
                "mul_channel",
                format!("scale {:?} vs {} channels", self.nodes[scale.0].shape, c),
            ));
        }
        let hw = h * w;
        let (dx, ds) = (&self.nodes[x.0].data, &self.nodes[scale.0].data);
        let mut out = Vec::with_capacity(c * hw);
        for ch in 0..c {
            let s = ds[ch];
            out.extend(dx[ch * hw..][..hw].iter().map(|v| v * s));
        }
        let ng = self.nodes[x.0].needs_grad || self.nodes[scale.0].needs_grad;
        let shape = self.nodes[x.0].shape.clone();
        self.push(shape, out, ng, Op::MulChannel { x, scale, hw })
    }

    /// Global average pool: C×H×W → C.
    pub fn spatial_mean(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.chw("spatial_mean", x)?;
        let hw = h * w;
        let dx = &self.nodes[x.0].data;
        let out: Vec<f64> =
            (0..c).map(|ch| dx[ch * hw..][..hw].iter().sum::<f64>() / hw as f64).collect();
        let ng = self.nodes[x.0].needs_grad;
        self.push(vec![c], out, ng, Op::SpatialMean { x, hw })
    }

    /// Nearest-neighbour 2× upsampling.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.chw("upsample2x", x)?;
        let dx = &self.nodes[x.0].data;
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for y in 0..h {
                let src = &dx[ch * h * w + y * w..][..w];
                for dy in 0..2 {
                    let dst = &mut out[ch * oh * ow + (2 * y + dy) * ow..][..ow];
                    for (xx, &v) in src.iter().enumerate() {
                        dst[2 * xx] = v;
                        dst[2 * xx + 1] = v;
                    }
                }
            }
        }
        let ng = self.nodes[x.0].needs_grad;
        self.push(vec![c, oh, ow], out, ng, Op::Upsample2x { x, ch: c, h, w })
    }

    /// 2×2 average pooling with stride 2; spatial extents must be even.
    pub fn avg_pool2x(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.chw("avg_pool2x", x)?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape("avg_pool2x", format!("extents must be even, got {h}×{w}")));
        }
        let dx = &self.nodes[x.0].data;
        let (oh, ow) = (h / 2, w / 2);
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for y in 0..oh {
                let r0 = &dx[ch * h * w + 2 * y * w..][..w];
                let r1 = &dx[ch * h * w + (2 * y + 1) * w..][..w];
                let dst = &mut out[ch * oh * ow + y * ow..][..ow];
                for xx in 0..ow {
                    dst[xx] = 0.25 * (r0[2 * xx] + r0[2 * xx + 1] + r1[2 * xx] + r1[2 * xx + 1]);
                }
            }
        }
        let ng = self.nodes[x.0].needs_grad;
        self.push(vec![c, oh, ow], out, ng, Op::AvgPool2x { x, ch: c, h, w })
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let node = &self.nodes[a.0];
        if shape.iter().product::<usize>() != node.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} ({} elems) → {:?}", node.shape, node.data.len(), shape),
            ));
        }
        let data = node.data.clone();
        let ng = node.needs_grad;
        self.push(shape, data, ng, Op::Reshape(a))
    }

    /// Reverse sweep from `loss` (a scalar). Consumes the tape.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let len = self.nodes[loss.0].data.len();
        if len != 1 {
            return Err(Error::BackwardNonScalar { len });
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(vec![1.0]);

        // Accumulation buffer for a parent, created on first touch.
        fn buf<'g>(
            grads: &'g mut [Option<Vec<f64>>],
            nodes: &[Node],
            p: Var,
        ) -> Option<&'g mut [f64]> {
            if !nodes[p.0].needs_grad {
                return None;
            }
            Some(grads[p.0].get_or_insert_with(|| vec![0.0; nodes[p.0].data.len()]).as_mut_slice())
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let op = self.nodes[i].op.clone();
            let nodes = &self.nodes;
            match op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    for (p, _other) in [(a, b), (b, a)] {
                        if let Some(gb) = buf(&mut grads, nodes, p) {
                            if gb.len() == g.len() {
                                for (d, s) in gb.iter_mut().zip(&g) {
                                    *d += s;
                                }
                            } else {
                                // broadcast side: scalar accumulates the sum
                                gb[0] += g.iter().sum::<f64>();
                            }
                        }
                    }
                }
                Op::AddScalar(a) => {
                    if let Some(gb) = buf(&mut grads, nodes, a) {
                        for (d, s) in gb.iter_mut().zip(&g) {
                            *d += s;
                        }
                    }
                }
                Op::Sub(a, b) => {
                    if let Some(gb) = buf(&mut grads, nodes, a) {
                        if gb.len() == g.len() {
                            for (d, s) in gb.iter_mut().zip(&g) {
                                *d += s;
                            }
                        } else {
                            gb[0] += g.iter().sum::<f64>();
                        }
                    }
                    if let Some(gb) = buf(&mut grads, nodes, b) {
                        if gb.len() == g.len() {
                            for (d, s) in gb.iter_mut().zip(&g) {
                                *d -= s;
                            }
                        } else {
                            gb[0] -= g.iter().sum::<f64>();
                        }
                    }
                }
                Op::Mul(a, b) => {
                    let (da, db) = (&nodes[a.0].data, &nodes[b.0].data);
                    if let Some(gb) = buf(&mut grads, nodes, a) {
                        if gb.len() == g.len() {
                            if db.len() == 1 {
                                for (d, s) in gb.iter_mut().zip(&g) {
                                    *d += s * db[0];
                                }
                            } else {
                                for ((d, s), y) in gb.iter_mut().zip(&g).zip(db) {
                                    *d += s * y;
                                }
                            }
                        } else {
                            gb[0] += g.iter().zip(db).map(|(s, y)| s * y).sum::<f64>();
                        }
                    }
                    if let Some(gb) = buf(&mut grads, nodes, b) {
                        if gb.len() == g.len() {
                            if da.len() == 1 {
                                for (d, s) in gb.iter_mut().zip(&g) {
                                    *d += s * da[0];
                                }
                            } else {
                                for ((d, s), x) in gb.iter_mut().zip(&g).zip(da) {
                                    *d += s * x;
                                }
                            }
                        } else {
                            gb[0] += g.iter().zip(da).map(|(s, x)| s * x).sum::<f64>();
                        }
                    }
                }
                Op::MulScalar(a, c) => {
                    if let Some(gb) = buf(&mut grads, nodes, a) {
                        for (d, s) in gb.iter_mut().zip(&g) {
                            *d += s * c;
                        }
                    }
                }
                Op::Power(a, c) => {
                    let da = &nodes[a.0].data;
                    if let Some(gb) = buf(&mut grads, nodes, a) {
                        if c == 0.0 {
                            // a^0 is constant
                        } else {
                            for ((d, s), x) in gb.iter_mut().zip(&g).zip(da) {
                                *d += s * c * x.powf(c - 1.0);
                            }
                        }
                    }
                }
                Op::Clip(a, lo, hi) => {
                    let da = &nodes[a.0].data;
                    if let Some(gb) = buf(&mut grads, nodes, a) {
                        for ((d, s), &x) in gb.iter_mut().zip(&g).zip(da) {
                            if x > lo && x < hi {
                                *d += s;
                            }
                        }
                    }
                }
                Op::Relu(a) => {
                    let da = &nodes[a.0].data;
                    if let Some(gb) = buf(&mut grads, nodes, a) {
                        for ((d, s), &x) in gb.iter_mut().zip(&g).zip(da) {
                            if x > 0.0 {
                                *d += s;
                            }
                        }
                    }
                }
                Op::Matmul { a, b, m, k, n } => {
                    let (da, db) = (&nodes[a.0].data, &nodes[b.0].data);
                    if let Some(gb) = buf(&mut grads, nodes, a) {
                        // dA = dC · Bᵀ
                        for i in 0..m {
                            for p in 0..k {
                                let grow = &g[i * n..][..n];
                                let brow = &db[p * n..][..n];
                                let mut acc = 0.0;
                                for (gv, bv) in grow.iter().zip(brow) {
                                    acc += gv * bv;
                                }
                                gb[i * k + p] += acc;
                            }
                        }
                    }
                    if let Some(gb) = buf(&mut grads, nodes, b) {
                        // dB = Aᵀ · dC
                        for p in 0..k {
                            for i in 0..m {
                                let aip = da[i * k + p];
                                let grow = &g[i * n..][..n];
                                let brow = &mut gb[p * n..][..n];
                                for (d, gv) in brow.iter_mut().zip(grow) {
                                    *d += aip * gv;
                                }
                            }
                        }
                    }
                }
                Op::Conv2d { input, kernels: kv, geom } => {
                    let (din_needed, dk_needed) =
                        (nodes[input.0].needs_grad, nodes[kv.0].needs_grad);
                    if din_needed {
                        let kdata = &nodes[kv.0].data;
                        if let Some(gb) = buf(&mut grads, nodes, input) {
                            kernels::conv2d_backward_input(&g, kdata, &geom, gb);
                        }
                    }
                    if dk_needed {
                        let idata = &nodes[input.0].data;
                        if let Some(gb) = buf(&mut grads, nodes, kv) {
                            kernels::conv2d_backward_kernels(&g, idata, &geom, gb);
                        }
                    }
                }
                Op::Softmax(z) => {
                    let p = &nodes[i].data;
                    if let Some(gb) = buf(&mut grads, nodes, z) {
                        let dot: f64 = g.iter().zip(p).map(|(gv, pv)| gv * pv).sum();
                        for ((d, gv), pv) in gb.iter_mut().zip(&g).zip(p) {
                            *d += pv * (gv - dot);
                        }
                    }
                }
                Op::TopkRenorm { logits, retained } => {
                    let wts = &nodes[i].data;
                    if let Some(gb) = buf(&mut grads, nodes, logits) {
                        for ((&idx, gv), wv) in retained.iter().zip(&g).zip(wts) {
                            gb[idx] += gv * wv;
                        }
                    }
                }
                Op::GatherRows { src, rows, cols } => {
                    if let Some(gb) = buf(&mut grads, nodes, src) {
                        for (j, &r) in rows.iter().enumerate() {
                            let grow = &g[j * cols..][..cols];
                            let drow = &mut gb[r * cols..][..cols];
                            for (d, s) in drow.iter_mut().zip(grow) {
                                *d += s;
                            }
                        }
                    }
                }
                Op::Sum(a) => {
                    if let Some(gb) = buf(&mut grads, nodes, a) {
                        for d in gb.iter_mut() {
                            *d += g[0];
                        }
                    }
                }
                Op::Mean(a) => {
                    let inv = 1.0 / nodes[a.0].data.len() as f64;
                    if let Some(gb) = buf(&mut grads, nodes, a) {
                        for d in gb.iter_mut() {
                            *d += g[0] * inv;
                        }
                    }
                }
                Op::L1Mean(a) => {
                    let da = &nodes[a.0].data;
                    let inv = 1.0 / da.len() as f64;
                    if let Some(gb) = buf(&mut grads, nodes, a) {
                        for (d, &x) in gb.iter_mut().zip(da) {
                            // subgradient 0 at x == 0
                            *d += g[0] * inv * if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 };
                        }
                    }
                }
                Op::L2SqMean(a) => {
                    let da = &nodes[a.0].data;
                    let inv = 1.0 / da.len() as f64;
                    if let Some(gb) = buf(&mut grads, nodes, a) {
                        for (d, &x) in gb.iter_mut().zip(da) {
                            *d += g[0] * inv * 2.0 * x;
                        }
                    }
                }
                Op::AddChannel { x, bias, hw } => {
                    if let Some(gb) = buf(&mut grads, nodes, x) {
                        for (d, s) in gb.iter_mut().zip(&g) {
                            *d += s;
                        }
                    }
                    if let Some(gb) = buf(&mut grads, nodes, bias) {
                        for (ch, d) in gb.iter_mut().enumerate() {
                            *d += g[ch * hw..][..hw].iter().sum::<f64>();
                        }
                    }
                }
                Op::MulChannel { x, scale, hw } => {
                    let (dx, ds) = (&nodes[x.0].data, &nodes[scale.0].data);
                    if let Some(gb) = buf(&mut grads, nodes, x) {
                        for ch in 0..ds.len() {
                            let s = ds[ch];
                            for (d, gv) in gb[ch * hw..][..hw].iter_mut().zip(&g[ch * hw..][..hw]) {
                                *d += gv * s;
                            }
                        }
                    }
                    if let Some(gb) = buf(&mut grads, nodes, scale) {
                        for (ch, d) in gb.iter_mut().enumerate() {
                            let mut acc = 0.0;
                            for (gv, xv) in g[ch * hw..][..hw].iter().zip(&dx[ch * hw..][..hw]) {
                                acc += gv * xv;
                            }
                            *d += acc;
                        }
                    }
                }
                Op::SpatialMean { x, hw } => {
                    let inv = 1.0 / hw as f64;
                    if let Some(gb) = buf(&mut grads, nodes, x) {
                        for (ch, &gv) in g.iter().enumerate() {
                            for d in gb[ch * hw..][..hw].iter_mut() {
                                *d += gv * inv;
                            }
                        }
                    }
                }
                Op::Upsample2x { x, ch, h, w } => {
                    let (oh, ow) = (2 * h, 2 * w);
                    if let Some(gb) = buf(&mut grads, nodes, x) {
                        for c in 0..ch {
                            for y in 0..h {
                                for xx in 0..w {
                                    let mut acc = 0.0;
                                    for dy in 0..2 {
                                        for dx2 in 0..2 {
                                            acc += g[c * oh * ow + (2 * y + dy) * ow + 2 * xx + dx2];
                                        }
                                    }
                                    gb[c * h * w + y * w + xx] += acc;
                                }
                            }
                        }
                    }
                }
                Op::AvgPool2x { x, ch, h, w } => {
                    let (oh, ow) = (h / 2, w / 2);
                    if let Some(gb) = buf(&mut grads, nodes, x) {
                        for c in 0..ch {
                            for y in 0..oh {
                                for xx in 0..ow {
                                    let gv = 0.25 * g[c * oh * ow + y * ow + xx];
                                    gb[c * h * w + 2 * y * w + 2 * xx] += gv;
                                    gb[c * h * w + 2 * y * w + 2 * xx + 1] += gv;
                                    gb[c * h * w + (2 * y + 1) * w + 2 * xx] += gv;
                                    gb[c * h * w + (2 * y + 1) * w + 2 * xx + 1] += gv;
                                }
                            }
                        }
                    }
                }
                Op::Reshape(a) => {
                    if let Some(gb) = buf(&mut grads, nodes, a) {
                        for (d, s) in gb.iter_mut().zip(&g) {
                            *d += s;
                        }
                    }
                }
            }
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Add(..) => "add",
        Op::AddScalar(..) => "add_scalar",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::MulScalar(..) => "mul_scalar",
        Op::Power(..) => "power",
        Op::Clip(..) => "clip",
        Op::Relu(..) => "relu",
        Op::Matmul { .. } => "matmul",
        Op::Conv2d { .. } => "conv2d",
        Op::Softmax(..) => "softmax",
        Op::TopkRenorm { .. } => "topk_renorm",
        Op::GatherRows { .. } => "gather_rows",
        Op::Sum(..) => "sum",
        Op::Mean(..) => "mean",
        Op::L1Mean(..) => "l1_mean",
        Op::L2SqMean(..) => "l2_sq_mean",
        Op::AddChannel { .. } => "add_channel",
        Op::MulChannel { .. } => "mul_channel",
        Op::SpatialMean { .. } => "spatial_mean",
        Op::Upsample2x { .. } => "upsample2x",
        Op::AvgPool2x { .. } => "avg_pool2x",
        Op::Reshape(..) => "reshape",
    }
}
