//! Dense tensors with a reverse-mode gradient tape.
//!
//! The tape records every operation in execution order, so the reverse sweep
//! over `nodes` is a valid topological order. Model activations use the
//! layout `[batch, channels, height, width]`.

mod optim;
mod pointwise;
mod spectral;

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::grid::Field2D;

pub use optim::{AdamConfig, CosineSchedule, ParamEntry, ParamStore};
use spectral::SpectralPlan;

/// Dense row-major array of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Stacks equally sized fields as channels of a single batch entry.
    pub fn from_fields(fields: &[Field2D]) -> Result<Self> {
        Self::from_batch(std::slice::from_ref(&fields.to_vec()))
    }

    /// `batch[b][c]` becomes entry `(b, c)` of a `[B, C, n, n]` tensor.
    pub fn from_batch(batch: &[Vec<Field2D>]) -> Result<Self> {
        let first = batch
            .first()
            .and_then(|s| s.first())
            .ok_or_else(|| Error::Shape("empty batch".into()))?;
        let (c, n) = (batch[0].len(), first.n());
        let mut data = Vec::with_capacity(batch.len() * c * n * n);
        for sample in batch {
            if sample.len() != c {
                return Err(Error::Shape(format!(
                    "batch mixes {c} and {} channels",
                    sample.len()
                )));
            }
            for f in sample {
                if f.n() != n {
                    return Err(Error::Shape(format!(
                        "batch mixes grid sizes {n} and {}",
                        f.n()
                    )));
                }
                data.extend_from_slice(f.data());
            }
        }
        Self::new(vec![batch.len(), c, n, n], data)
    }

    /// Splits a `[B, C, n, n]` tensor back into fields.
    pub fn to_batch(&self) -> Result<Vec<Vec<Field2D>>> {
        let (b, c, h, w) = self.dims4()?;
        if h != w {
            return Err(Error::Shape(format!("fields must be square, got {h}x{w}")));
        }
        let plane = h * w;
        (0..b)
            .map(|bi| {
                (0..c)
                    .map(|ci| {
                        let off = (bi * c + ci) * plane;
                        Field2D::new(h, self.data[off..off + plane].to_vec())
                    })
                    .collect()
            })
            .collect()
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [b, c, h, w] => Ok((b, c, h, w)),
            _ => Err(Error::Shape(format!(
                "expected a [B, C, H, W] tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    /// Selects batch entries in the given order.
    pub fn gather_batch(&self, indices: &[usize]) -> Result<Tensor> {
        let (b, c, h, w) = self.dims4()?;
        let stride = c * h * w;
        let mut data = Vec::with_capacity(indices.len() * stride);
        for &i in indices {
            if i >= b {
                return Err(Error::Shape(format!("batch index {i} out of range {b}")));
            }
            data.extend_from_slice(&self.data[i * stride..(i + 1) * stride]);
        }
        Tensor::new(vec![indices.len(), c, h, w], data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "tensor shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Gelu {
        x: usize,
        tanh: Vec<f64>,
    },
    Linear {
        x: usize,
        w: usize,
        b: usize,
    },
    Spectral {
        x: usize,
        wr: usize,
        wi: usize,
        plan: Arc<SpectralPlan>,
        xhat: Vec<num_complex::Complex64>,
    },
    L1 {
        pred: usize,
        target: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records operations for one forward pass and differentiates them.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(String, usize)>,
}

/// Gradients from one backward sweep, by variable and by parameter name.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

#[inline]
fn gelu_tanh(x: f64) -> f64 {
    // tanh(u) = 1 - 2 / (e^{2u} + 1); saturates cleanly for large |u|
    let u = GELU_K * (x + GELU_C * x * x * x);
    1.0 - 2.0 / ((2.0 * u).exp() + 1.0)
}

#[inline]
fn gelu_grad_from_tanh(x: f64, t: f64) -> f64 {
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + gelu_tanh(x))
}

pub fn gelu_grad_scalar(x: f64) -> f64 {
    gelu_grad_from_tanh(x, gelu_tanh(x))
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
        self.params.clear();
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input data; never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable leaf not tied to a parameter store.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Differentiable copy of a named parameter; its gradient is reported
    /// under the same name.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let value = store
            .get(name)
            .ok_or_else(|| Error::Parameter(format!("unknown parameter `{name}`")))?
            .clone();
        let v = self.leaf(value);
        self.params.push((name.to_string(), v.0));
        Ok(v)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Whether gradients can flow into `v`.
    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn rg(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape != vb.shape {
            return Err(Error::Shape(format!(
                "add of shapes {:?} and {:?}",
                va.shape, vb.shape
            )));
        }
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x + y).collect();
        let out = Tensor::new(va.shape.clone(), data)?;
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(out, Op::Add(a.0, b.0), rg))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let tanh: Vec<f64> = vx.data.iter().map(|&v| gelu_tanh(v)).collect();
        let data = vx
            .data
            .iter()
            .zip(&tanh)
            .map(|(&v, &t)| 0.5 * v * (1.0 + t))
            .collect();
        let out = Tensor {
            shape: vx.shape.clone(),
            data,
        };
        let rg = self.rg(&[x.0]);
        let tanh = if rg { tanh } else { Vec::new() };
        self.push(out, Op::Gelu { x: x.0, tanh }, rg)
    }

    /// Per-pixel channel mixing `y[b, o] = Σ_i w[o, i] x[b, i] + bias[o]`.
    pub fn pointwise_linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (vx, vw, vb) = (self.value(x), self.value(w), self.value(b));
        let (bs, cin, h, wd) = vx.dims4()?;
        let (cout, wcin) = match vw.shape[..] {
            [o, i] => (o, i),
            _ => {
                return Err(Error::Shape(format!(
                    "pointwise weight must be [Cout, Cin], got {:?}",
                    vw.shape
                )))
            }
        };
        if wcin != cin || vb.shape != [cout] {
            return Err(Error::Shape(format!(
                "pointwise weight {:?} / bias {:?} incompatible with input {:?}",
                vw.shape, vb.shape, vx.shape
            )));
        }
        let p = h * wd;
        let mut out = vec![0.0; bs * cout * p];
        for bi in 0..bs {
            pointwise::forward(
                &vw.data,
                &vb.data,
                &vx.data[bi * cin * p..(bi + 1) * cin * p],
                &mut out[bi * cout * p..(bi + 1) * cout * p],
                cin,
            );
        }
        let out = Tensor::new(vec![bs, cout, h, wd], out)?;
        let rg = self.rg(&[x.0, w.0, b.0]);
        Ok(self.push(
            out,
            Op::Linear {
                x: x.0,
                w: w.0,
                b: b.0,
            },
            rg,
        ))
    }

    /// Truncated Fourier-space channel mixing with complex weights given as
    /// separate real and imaginary parts, each `[Cout, Cin, Mh, Mw]`.
    ///
    /// Weight index `(a, b)` addresses wavenumber `(a - Mh/2, b - Mw/2)`.
    /// Kept modes are `|ky| < Mh/2`, `|kx| < Mw/2`, so the first row and
    /// column of each weight block are never read. The output is the real part of the
    /// inverse transform, which equals the transform of the Hermitian part of
    /// the mixed spectrum.
    pub fn spectral_mix(&mut self, x: Var, wr: Var, wi: Var) -> Result<Var> {
        let (vx, vwr, vwi) = (self.value(x), self.value(wr), self.value(wi));
        let (bs, cin, h, w) = vx.dims4()?;
        if h != w {
            return Err(Error::Shape(format!(
                "spectral mixing needs square inputs, got {h}x{w}"
            )));
        }
        let (cout, wcin, mh, mw) = vwr.dims4()?;
        if vwi.shape != vwr.shape || wcin != cin {
            return Err(Error::Shape(format!(
                "spectral weights {:?}/{:?} incompatible with input {:?}",
                vwr.shape, vwi.shape, vx.shape
            )));
        }
        let plan = SpectralPlan::get(h, mh, mw)?;
        let (out, xhat) = plan.forward(&vx.data, bs, cin, &vwr.data, &vwi.data, cout);
        let out = Tensor::new(vec![bs, cout, h, w], out)?;
        let rg = self.rg(&[x.0, wr.0, wi.0]);
        Ok(self.push(
            out,
            Op::Spectral {
                x: x.0,
                wr: wr.0,
                wi: wi.0,
                plan,
                xhat,
            },
            rg,
        ))
    }

    /// Mean absolute difference, as a one-element tensor.
    pub fn l1_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (vp, vt) = (self.value(pred), self.value(target));
        if vp.shape != vt.shape {
            return Err(Error::Shape(format!(
                "loss of shapes {:?} and {:?}",
                vp.shape, vt.shape
            )));
        }
        let sum: f64 = vp.data.iter().zip(&vt.data).map(|(p, t)| (p - t).abs()).sum();
        let out = Tensor::scalar(sum / vp.len() as f64);
        let rg = self.rg(&[pred.0, target.0]);
        Ok(self.push(
            out,
            Op::L1 {
                pred: pred.0,
                target: target.0,
            },
            rg,
        ))
    }

    /// Reverse sweep from a one-element output.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar output, got shape {:?}",
                self.value(loss).shape
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            self.backprop(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        let mut params: BTreeMap<String, Tensor> = BTreeMap::new();
        for (name, id) in &self.params {
            if let Some(g) = &grads[*id] {
                match params.get_mut(name) {
                    Some(acc) => acc.data.iter_mut().zip(&g.data).for_each(|(a, b)| *a += b),
                    None => {
                        params.insert(name.clone(), g.clone());
                    }
                }
            }
        }
        Ok(Gradients { grads, params })
    }

    fn backprop(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for &i in [a, b].iter() {
                    if self.nodes[*i].requires_grad {
                        accumulate(grads, *i, &self.nodes[*i].value.shape, |acc| {
                            acc.iter_mut().zip(&g.data).for_each(|(s, v)| *s += v)
                        });
                    }
                }
            }
            Op::Gelu { x, tanh } => {
                let vx = &self.nodes[*x].value;
                accumulate(grads, *x, &vx.shape, |acc| {
                    for (((s, &xv), &t), &gv) in acc.iter_mut().zip(&vx.data).zip(tanh).zip(&g.data) {
                        *s += gv * gelu_grad_from_tanh(xv, t);
                    }
                });
            }
            Op::Linear { x, w, b } => self.backprop_linear(*x, *w, *b, g, grads),
            Op::Spectral {
                x,
                wr,
                wi,
                plan,
                xhat,
            } => {
                let vx = &self.nodes[*x].value;
                let (bs, cin, _, _) = vx.dims4().expect("checked in forward");
                let vwr = &self.nodes[*wr].value;
                let vwi = &self.nodes[*wi].value;
                let cout = vwr.shape[0];
                let need_x = self.nodes[*x].requires_grad;
                let need_w = self.nodes[*wr].requires_grad || self.nodes[*wi].requires_grad;
                let sg = plan.backward(
                    &g.data, bs, cin, cout, &vwr.data, &vwi.data, xhat, need_x, need_w,
                );
                if let Some(gx) = sg.x {
                    accumulate(grads, *x, &vx.shape, |acc| add_into(acc, &gx));
                }
                if let Some((gwr, gwi)) = sg.w {
                    if self.nodes[*wr].requires_grad {
                        accumulate(grads, *wr, &vwr.shape, |acc| add_into(acc, &gwr));
                    }
                    if self.nodes[*wi].requires_grad {
                        accumulate(grads, *wi, &vwi.shape, |acc| add_into(acc, &gwi));
                    }
                }
            }
            Op::L1 { pred, target } => {
                let vp = &self.nodes[*pred].value;
                let vt = &self.nodes[*target].value;
                let scale = g.data[0] / vp.len() as f64;
                let sign = |p: f64, t: f64| {
                    if p > t {
                        scale
                    } else if p < t {
                        -scale
                    } else {
                        0.0
                    }
                };
                if self.nodes[*pred].requires_grad {
                    accumulate(grads, *pred, &vp.shape, |acc| {
                        for ((s, &p), &t) in acc.iter_mut().zip(&vp.data).zip(&vt.data) {
                            *s += sign(p, t);
                        }
                    });
                }
                if self.nodes[*target].requires_grad {
                    accumulate(grads, *target, &vt.shape, |acc| {
                        for ((s, &p), &t) in acc.iter_mut().zip(&vp.data).zip(&vt.data) {
                            *s -= sign(p, t);
                        }
                    });
                }
            }
        }
    }

    fn backprop_linear(
        &self,
        x: usize,
        w: usize,
        b: usize,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let vx = &self.nodes[x].value;
        let vw = &self.nodes[w].value;
        let (bs, cin, h, wd) = vx.dims4().expect("checked in forward");
        let cout = vw.shape[0];
        let p = h * wd;
        if self.nodes[x].requires_grad {
            accumulate(grads, x, &vx.shape, |acc| {
                for bi in 0..bs {
                    pointwise::backward_input(
                        &vw.data,
                        &g.data[bi * cout * p..(bi + 1) * cout * p],
                        &mut acc[bi * cin * p..(bi + 1) * cin * p],
                        cout,
                    );
                }
            });
        }
        if self.nodes[w].requires_grad {
            accumulate(grads, w, &vw.shape, |acc| {
                for bi in 0..bs {
                    pointwise::backward_weight(
                        &g.data[bi * cout * p..(bi + 1) * cout * p],
                        &vx.data[bi * cin * p..(bi + 1) * cin * p],
                        acc,
                        cin,
                    );
                }
            });
        }
        if self.nodes[b].requires_grad {
            accumulate(grads, b, &[cout], |acc| {
                for bi in 0..bs {
                    for (o, s) in acc.iter_mut().enumerate() {
                        let off = (bi * cout + o) * p;
                        *s += pointwise::sum(&g.data[off..off + p]);
                    }
                }
            });
        }
    }
}

fn accumulate(
    grads: &mut [Option<Tensor>],
    id: usize,
    shape: &[usize],
    f: impl FnOnce(&mut [f64]),
) {
    let slot = grads[id].get_or_insert_with(|| Tensor::zeros(shape));
    f(&mut slot.data);
}

fn add_into(acc: &mut [f64], v: &[f64]) {
    acc.iter_mut().zip(v).for_each(|(a, b)| *a += b);
}

/// `c (m × n) = a (m × k) · b (k × n) + beta · c`, strides as `(row, col)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    beta: f64,
) {
    assert!(a.len() >= (m.max(1) - 1) * rsa + (k.max(1) - 1) * csa + 1 || m * k == 0);
    assert!(b.len() >= (k.max(1) - 1) * rsb + (n.max(1) - 1) * csb + 1 || k * n == 0);
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: bounds of all three operands are asserted above for the given
    // strides; `c` is exclusively borrowed.
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
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
