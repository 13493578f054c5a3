use crate::error::{GradError, Result};
use crate::kernels::{attention_backward, attention_forward, gemm, ConvGeom};
use crate::params::ParamStore;
use crate::real::Real;
use crate::tensor::Tensor;

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Constant,
    Param(String),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    BiasLast {
        x: Var,
        b: Var,
    },
    BiasMid {
        x: Var,
        b: Var,
    },
    Silu(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Softmax(Var),
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
    },
    Upsample {
        x: Var,
    },
    Concat {
        a: Var,
        b: Var,
        axis: usize,
    },
    SwapLast2(Var),
    Reshape(Var),
    Attention {
        qkv: Var,
        heads: usize,
        probs: Vec<T>,
    },
    Sum(Var),
    Mean(Var),
    MeanAbsError {
        pred: Var,
        target: Tensor<T>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        target: Tensor<T>,
        probs: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Tape of forward operations, rebuilt for every step.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

fn gelu_parts<T: Real>(x: T) -> (T, T) {
    // tanh approximation; returns (value, derivative)
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let a = T::of(0.044715);
    let half = T::of(0.5);
    let x2 = x * x;
    let u = c * (x + a * x2 * x);
    let th = u.tanh();
    let value = half * x * (T::one() + th);
    let du = c * (T::one() + T::of(3.0) * a * x2);
    let deriv = half * (T::one() + th) + half * x * (T::one() - th * th) * du;
    (value, deriv)
}

fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(
        &mut self,
        op: &'static str,
        value: Tensor<T>,
        kind: Op<T>,
        inputs: &[Var],
    ) -> Result<Var> {
        if !value.is_finite() {
            return Err(GradError::NonFinite { op });
        }
        let needs_grad = match kind {
            Op::Constant => false,
            Op::Param(_) => true,
            _ => inputs.iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node {
            value,
            op: kind,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a value that receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push("constant", value, Op::Constant, &[])
    }

    /// Loads a named parameter; its gradient lands in `store` on backward.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        let value = store
            .get(name)
            .ok_or_else(|| GradError::UnknownParam(name.to_string()))?
            .clone();
        self.push("param", value, Op::Param(name.to_string()), &[])
    }

    /// Loads a named parameter as a constant (frozen weights).
    pub fn frozen(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        let value = store
            .get(name)
            .ok_or_else(|| GradError::UnknownParam(name.to_string()))?
            .clone();
        self.constant(value)
    }

    /// `x·w + b` over the last axis of `x`; `w` is in×out.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let Some(&fan_in) = xs.last() else {
            return Err(GradError::shape("linear", "scalar input"));
        };
        if ws.len() != 2 || ws[0] != fan_in {
            return Err(GradError::shape(
                "linear",
                format!("input {xs:?} vs weight {ws:?}"),
            ));
        }
        let out_dim = ws[1];
        if let Some(b) = b {
            if self.shape(b) != [out_dim] {
                return Err(GradError::shape(
                    "linear",
                    format!("bias {:?} vs out {out_dim}", self.shape(b)),
                ));
            }
        }
        let rows = self.value(x).len() / fan_in;
        let mut out = vec![T::zero(); rows * out_dim];
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in out.chunks_mut(out_dim) {
                row.copy_from_slice(bias);
            }
        }
        gemm(
            rows,
            fan_in,
            out_dim,
            self.value(x).data(),
            false,
            self.value(w).data(),
            false,
            &mut out,
            b.is_some(),
        );
        let mut shape = xs;
        *shape.last_mut().unwrap() = out_dim;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(
            "linear",
            Tensor::from_parts(shape, out),
            Op::Linear { x, w, b },
            &inputs,
        )
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(GradError::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let av = self.value(a);
        let data = av
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::from_parts(av.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip_map(a, b, |x, y| x + y);
        self.push("add", v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_map(a, b, |x, y| x - y);
        self.push("sub", v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_map(a, b, |x, y| x * y);
        self.push("mul", v, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Result<Var> {
        let av = self.value(a);
        let v = Tensor::from_parts(
            av.shape().to_vec(),
            av.data().iter().map(|&x| x * factor).collect(),
        );
        self.push("scale", v, Op::Scale(a, factor), &[a])
    }

    /// `x[b, c, l] + bias[b, c]` (per-row channel bias broadcast over the last axis).
    pub fn add_bias_last(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || self.shape(bias) != [xs[0], xs[1]] {
            return Err(GradError::shape(
                "add_bias_last",
                format!("{xs:?} vs {:?}", self.shape(bias)),
            ));
        }
        let len = xs[2];
        let bv = self.value(bias).data();
        let mut data = self.value(x).data().to_vec();
        for (row, &b) in data.chunks_mut(len).zip(bv) {
            row.iter_mut().for_each(|v| *v += b);
        }
        self.push(
            "add_bias_last",
            Tensor::from_parts(xs, data),
            Op::BiasLast { x, b: bias },
            &[x, bias],
        )
    }

    /// `x[b, n, h] + shared[b, h]` (broadcast over the middle axis).
    pub fn add_bias_mid(&mut self, x: Var, shared: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || self.shape(shared) != [xs[0], xs[2]] {
            return Err(GradError::shape(
                "add_bias_mid",
                format!("{xs:?} vs {:?}", self.shape(shared)),
            ));
        }
        let (n, h) = (xs[1], xs[2]);
        let sv = self.value(shared).data();
        let mut data = self.value(x).data().to_vec();
        for (bi, block) in data.chunks_mut(n * h).enumerate() {
            let s = &sv[bi * h..][..h];
            for row in block.chunks_mut(h) {
                row.iter_mut().zip(s).for_each(|(v, &b)| *v += b);
            }
        }
        self.push(
            "add_bias_mid",
            Tensor::from_parts(xs, data),
            Op::BiasMid { x, b: shared },
            &[x, shared],
        )
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| v * sigmoid(v)).collect();
        let t = Tensor::from_parts(xv.shape().to_vec(), data);
        self.push("silu", t, Op::Silu(x), &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| gelu_parts(v).0).collect();
        let t = Tensor::from_parts(xv.shape().to_vec(), data);
        self.push("gelu", t, Op::Gelu(x), &[x])
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let d = *xs
            .last()
            .ok_or_else(|| GradError::shape("layer_norm", "scalar input"))?;
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(GradError::shape("layer_norm", format!("feature width {d}")));
        }
        let eps = T::of(eps);
        let dn = T::of(d as f64);
        let xv = self.value(x).data();
        let g = self.value(gain).data();
        let bb = self.value(bias).data();
        let rows = xv.len() / d;
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..][..d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + bb[j];
            }
        }
        self.push(
            "layer_norm",
            Tensor::from_parts(xs, out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        )
    }

    /// Softmax over the last axis, stabilized by max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let k = *xv
            .shape()
            .last()
            .ok_or_else(|| GradError::shape("softmax", "scalar input"))?;
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(k) {
            softmax_in_place(row);
        }
        let t = Tensor::from_parts(xv.shape().to_vec(), data);
        self.push("softmax", t, Op::Softmax(x), &[x])
    }

    /// 1-D convolution: `x` is batch×c_in×len, `w` is c_out×c_in×kernel.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 3 || ws.len() != 3 || ws[1] != xs[1] || self.shape(b) != [ws[0]] {
            return Err(GradError::shape(
                "conv1d",
                format!("input {xs:?}, weight {ws:?}, bias {:?}", self.shape(b)),
            ));
        }
        let (batch, c_in, len) = (xs[0], xs[1], xs[2]);
        let (c_out, kernel) = (ws[0], ws[2]);
        let geom = ConvGeom::new(c_in, len, kernel, stride, pad)
            .ok_or_else(|| GradError::shape("conv1d", "kernel larger than padded input"))?;
        let lo = geom.len_out;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = self.value(b).data();
        let mut out = vec![T::zero(); batch * c_out * lo];
        let mut cols = vec![T::zero(); c_in * kernel * lo];
        for bi in 0..batch {
            geom.im2col(&xv[bi * c_in * len..][..c_in * len], &mut cols);
            let ob = &mut out[bi * c_out * lo..][..c_out * lo];
            for (co, row) in ob.chunks_mut(lo).enumerate() {
                row.iter_mut().for_each(|v| *v = bv[co]);
            }
            gemm(c_out, c_in * kernel, lo, wv, false, &cols, false, ob, true);
        }
        self.push(
            "conv1d",
            Tensor::from_parts(vec![batch, c_out, lo], out),
            Op::Conv1d { x, w, b, geom },
            &[x, w, b],
        )
    }

    /// Nearest-neighbour resampling of the last axis to `len_out`.
    pub fn upsample_nearest(&mut self, x: Var, len_out: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || len_out == 0 {
            return Err(GradError::shape("upsample", format!("{xs:?} -> {len_out}")));
        }
        let len_in = xs[2];
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(xs[0] * xs[1] * len_out);
        for row in xv.chunks(len_in) {
            out.extend((0..len_out).map(|o| row[o * len_in / len_out]));
        }
        self.push(
            "upsample",
            Tensor::from_parts(vec![xs[0], xs[1], len_out], out),
            Op::Upsample { x },
            &[x],
        )
    }

    /// Concatenates along `axis`; all other dims must agree.
    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let as_ = self.shape(a).to_vec();
        let bs = self.shape(b).to_vec();
        let compatible = as_.len() == bs.len()
            && axis < as_.len()
            && as_
                .iter()
                .zip(&bs)
                .enumerate()
                .all(|(i, (x, y))| i == axis || x == y);
        if !compatible {
            return Err(GradError::shape(
                "concat",
                format!("{as_:?} ++ {bs:?} on axis {axis}"),
            ));
        }
        let outer: usize = as_[..axis].iter().product();
        let inner: usize = as_[axis + 1..].iter().product();
        let (ca, cb) = (as_[axis] * inner, bs[axis] * inner);
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = Vec::with_capacity(av.len() + bv.len());
        for o in 0..outer {
            out.extend_from_slice(&av[o * ca..][..ca]);
            out.extend_from_slice(&bv[o * cb..][..cb]);
        }
        let mut shape = as_;
        shape[axis] += bs[axis];
        self.push(
            "concat",
            Tensor::from_parts(shape, out),
            Op::Concat { a, b, axis },
            &[a, b],
        )
    }

    /// Swaps the last two axes of a rank-3 tensor.
    pub fn swap_last2(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return Err(GradError::shape("swap_last2", format!("{xs:?}")));
        }
        let out = transpose_last2(self.value(x).data(), xs[0], xs[1], xs[2]);
        self.push(
            "swap_last2",
            Tensor::from_parts(vec![xs[0], xs[2], xs[1]], out),
            Op::SwapLast2(x),
            &[x],
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        self.push("reshape", t, Op::Reshape(x), &[x])
    }

    /// Multi-head self-attention core: `qkv` is batch×len×3c, output batch×len×c.
    pub fn attention(&mut self, qkv: Var, heads: usize) -> Result<Var> {
        let s = self.shape(qkv).to_vec();
        if s.len() != 3
            || !s[2].is_multiple_of(3)
            || heads == 0
            || !(s[2] / 3).is_multiple_of(heads)
        {
            return Err(GradError::shape(
                "attention",
                format!("qkv {s:?} with {heads} heads"),
            ));
        }
        let (batch, len, c) = (s[0], s[1], s[2] / 3);
        let qv = self.value(qkv).data();
        let mut out = vec![T::zero(); batch * len * c];
        let mut probs = vec![T::zero(); batch * heads * len * len];
        for bi in 0..batch {
            attention_forward(
                &qv[bi * len * 3 * c..][..len * 3 * c],
                len,
                c,
                heads,
                &mut out[bi * len * c..][..len * c],
                &mut probs[bi * heads * len * len..][..heads * len * len],
            );
        }
        self.push(
            "attention",
            Tensor::from_parts(vec![batch, len, c], out),
            Op::Attention { qkv, heads, probs },
            &[qkv],
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).data().iter().copied().sum::<T>();
        self.push("sum", Tensor::scalar(total), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let total = v.data().iter().copied().sum::<T>() / T::of(v.len() as f64);
        self.push("mean", Tensor::scalar(total), Op::Mean(x), &[x])
    }

    /// Mean absolute difference against a fixed target.
    pub fn mean_abs_error(&mut self, pred: Var, target: Tensor<T>) -> Result<Var> {
        if self.shape(pred) != target.shape() {
            return Err(GradError::shape(
                "mean_abs_error",
                format!("{:?} vs {:?}", self.shape(pred), target.shape()),
            ));
        }
        let pv = self.value(pred).data();
        let n = T::of(pv.len() as f64);
        let total = pv
            .iter()
            .zip(target.data())
            .map(|(&p, &t)| (p - t).abs())
            .sum::<T>()
            / n;
        self.push(
            "mean_abs_error",
            Tensor::scalar(total),
            Op::MeanAbsError { pred, target },
            &[pred],
        )
    }

    /// Listwise cross-entropy `−Σ g·log softmax(p)` averaged over rows.
    ///
    /// `logits` and `target` are rows×n; each target row is a distribution.
    pub fn softmax_cross_entropy(&mut self, logits: Var, target: Tensor<T>) -> Result<Var> {
        let ls = self.shape(logits).to_vec();
        if ls.len() != 2 || ls != target.shape() {
            return Err(GradError::shape(
                "softmax_cross_entropy",
                format!("{ls:?} vs {:?}", target.shape()),
            ));
        }
        let n = ls[1];
        let mut probs = self.value(logits).data().to_vec();
        let mut total = T::zero();
        for (row, (lrow, grow)) in probs.chunks_mut(n).zip(
            self.value(logits)
                .data()
                .chunks(n)
                .zip(target.data().chunks(n)),
        ) {
            let max = lrow.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + lrow.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            total -= grow
                .iter()
                .zip(lrow)
                .map(|(&g, &l)| g * (l - lse))
                .sum::<T>();
            softmax_in_place(row);
        }
        total /= T::of(ls[0] as f64);
        self.push(
            "softmax_cross_entropy",
            Tensor::scalar(total),
            Op::SoftmaxCrossEntropy {
                logits,
                target,
                probs,
            },
            &[logits],
        )
    }

    /// Reverse pass from a scalar `loss`, accumulating parameter gradients into `store`.
    pub fn backward(&self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        let loss_node = &self.nodes[loss.0];
        if loss_node.value.len() != 1 {
            return Err(GradError::NotScalar(loss_node.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(loss_node.value.shape(), T::one()));
        for i in (0..=loss.0).rev() {
            let Some(grad) = grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if let Op::Param(name) = &node.op {
                store.accumulate_grad(name, &grad)?;
                continue;
            }
            for (var, g) in self.local_grads(i, &grad) {
                match &mut grads[var.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
            }
        }
        store.mark_grads_ready();
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn local_grads(&self, i: usize, gy: &Tensor<T>) -> Vec<(Var, Tensor<T>)> {
        let node = &self.nodes[i];
        let dy = gy.data();
        let mut out = Vec::new();
        let like = |v: Var, data: Vec<T>| Tensor::from_parts(self.shape(v).to_vec(), data);
        match &node.op {
            Op::Constant | Op::Param(_) => {}
            Op::Linear { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (fan_in, out_dim) = (wv.shape()[0], wv.shape()[1]);
                let rows = xv.len() / fan_in;
                if self.wants(*x) {
                    let mut dx = vec![T::zero(); xv.len()];
                    gemm(
                        rows,
                        out_dim,
                        fan_in,
                        dy,
                        false,
                        wv.data(),
                        true,
                        &mut dx,
                        false,
                    );
                    out.push((*x, like(*x, dx)));
                }
                if self.wants(*w) {
                    let mut dw = vec![T::zero(); wv.len()];
                    gemm(
                        fan_in,
                        rows,
                        out_dim,
                        xv.data(),
                        true,
                        dy,
                        false,
                        &mut dw,
                        false,
                    );
                    out.push((*w, like(*w, dw)));
                }
                if let Some(b) = b.filter(|b| self.wants(*b)) {
                    let mut db = vec![T::zero(); out_dim];
                    for row in dy.chunks(out_dim) {
                        db.iter_mut().zip(row).for_each(|(a, &g)| *a += g);
                    }
                    out.push((b, like(b, db)));
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.wants(v) {
                        out.push((v, gy.clone()));
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    out.push((*a, gy.clone()));
                }
                if self.wants(*b) {
                    out.push((*b, like(*b, dy.iter().map(|&g| -g).collect())));
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let bv = self.value(*b).data();
                    out.push((
                        *a,
                        like(*a, dy.iter().zip(bv).map(|(&g, &y)| g * y).collect()),
                    ));
                }
                if self.wants(*b) {
                    let av = self.value(*a).data();
                    out.push((
                        *b,
                        like(*b, dy.iter().zip(av).map(|(&g, &x)| g * x).collect()),
                    ));
                }
            }
            Op::Scale(a, f) => {
                out.push((*a, like(*a, dy.iter().map(|&g| g * *f).collect())));
            }
            Op::BiasLast { x, b } => {
                if self.wants(*x) {
                    out.push((*x, gy.clone()));
                }
                if self.wants(*b) {
                    let len = self.shape(*x)[2];
                    let db = dy.chunks(len).map(|r| r.iter().copied().sum()).collect();
                    out.push((*b, like(*b, db)));
                }
            }
            Op::BiasMid { x, b } => {
                if self.wants(*x) {
                    out.push((*x, gy.clone()));
                }
                if self.wants(*b) {
                    let s = self.shape(*x);
                    let (n, h) = (s[1], s[2]);
                    let mut db = vec![T::zero(); s[0] * h];
                    for (bi, block) in dy.chunks(n * h).enumerate() {
                        let acc = &mut db[bi * h..][..h];
                        for row in block.chunks(h) {
                            acc.iter_mut().zip(row).for_each(|(a, &g)| *a += g);
                        }
                    }
                    out.push((*b, like(*b, db)));
                }
            }
            Op::Silu(x) => {
                let xv = self.value(*x).data();
                let dx = dy
                    .iter()
                    .zip(xv)
                    .map(|(&g, &v)| {
                        let s = sigmoid(v);
                        g * s * (T::one() + v * (T::one() - s))
                    })
                    .collect();
                out.push((*x, like(*x, dx)));
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                let dx = dy
                    .iter()
                    .zip(xv)
                    .map(|(&g, &v)| g * gelu_parts(v).1)
                    .collect();
                out.push((*x, like(*x, dx)));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = self.shape(*gain)[0];
                let gv = self.value(*gain).data();
                if self.wants(*x) {
                    let dn = T::of(d as f64);
                    let mut dx = vec![T::zero(); dy.len()];
                    for (r, &rs) in rstd.iter().enumerate() {
                        let dyr = &dy[r * d..][..d];
                        let xh = &xhat[r * d..][..d];
                        let mut sum_g = T::zero();
                        let mut sum_gx = T::zero();
                        for j in 0..d {
                            let gh = dyr[j] * gv[j];
                            sum_g += gh;
                            sum_gx += gh * xh[j];
                        }
                        for j in 0..d {
                            let gh = dyr[j] * gv[j];
                            dx[r * d + j] = rs / dn * (dn * gh - sum_g - xh[j] * sum_gx);
                        }
                    }
                    out.push((*x, like(*x, dx)));
                }
                if self.wants(*gain) {
                    let mut dg = vec![T::zero(); d];
                    for (row, xh) in dy.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            dg[j] += row[j] * xh[j];
                        }
                    }
                    out.push((*gain, like(*gain, dg)));
                }
                if self.wants(*bias) {
                    let mut db = vec![T::zero(); d];
                    for row in dy.chunks(d) {
                        db.iter_mut().zip(row).for_each(|(a, &g)| *a += g);
                    }
                    out.push((*bias, like(*bias, db)));
                }
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let k = *node.value.shape().last().unwrap();
                let mut dx = vec![T::zero(); y.len()];
                for ((dxr, yr), gr) in dx.chunks_mut(k).zip(y.chunks(k)).zip(dy.chunks(k)) {
                    let inner: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..k {
                        dxr[j] = yr[j] * (gr[j] - inner);
                    }
                }
                out.push((*x, like(*x, dx)));
            }
            Op::Conv1d { x, w, b, geom } => {
                let xs = self.shape(*x);
                let (batch, c_in, len) = (xs[0], xs[1], xs[2]);
                let c_out = self.shape(*w)[0];
                let ck = c_in * geom.kernel;
                let lo = geom.len_out;
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let mut cols = vec![T::zero(); ck * lo];
                let mut dx = self.wants(*x).then(|| vec![T::zero(); xv.len()]);
                let mut dw = self.wants(*w).then(|| vec![T::zero(); wv.len()]);
                for bi in 0..batch {
                    let gb = &dy[bi * c_out * lo..][..c_out * lo];
                    if let Some(dw) = dw.as_mut() {
                        geom.im2col(&xv[bi * c_in * len..][..c_in * len], &mut cols);
                        gemm(c_out, lo, ck, gb, false, &cols, true, dw, true);
                    }
                    if let Some(dx) = dx.as_mut() {
                        gemm(ck, c_out, lo, wv, true, gb, false, &mut cols, false);
                        geom.col2im(&cols, &mut dx[bi * c_in * len..][..c_in * len]);
                    }
                }
                if let Some(dx) = dx {
                    out.push((*x, like(*x, dx)));
                }
                if let Some(dw) = dw {
                    out.push((*w, like(*w, dw)));
                }
                if self.wants(*b) {
                    let mut db = vec![T::zero(); c_out];
                    for (r, row) in dy.chunks(lo).enumerate() {
                        db[r % c_out] += row.iter().copied().sum::<T>();
                    }
                    out.push((*b, like(*b, db)));
                }
            }
            Op::Upsample { x } => {
                let len_in = self.shape(*x)[2];
                let len_out = node.value.shape()[2];
                let mut dx = vec![T::zero(); self.value(*x).len()];
                for (dr, gr) in dx.chunks_mut(len_in).zip(dy.chunks(len_out)) {
                    for (o, &g) in gr.iter().enumerate() {
                        dr[o * len_in / len_out] += g;
                    }
                }
                out.push((*x, like(*x, dx)));
            }
            Op::Concat { a, b, axis } => {
                let as_ = self.shape(*a);
                let bs = self.shape(*b);
                let outer: usize = as_[..*axis].iter().product();
                let inner: usize = as_[*axis + 1..].iter().product();
                let (ca, cb) = (as_[*axis] * inner, bs[*axis] * inner);
                let mut da = Vec::with_capacity(outer * ca);
                let mut db = Vec::with_capacity(outer * cb);
                for chunk in dy.chunks(ca + cb) {
                    da.extend_from_slice(&chunk[..ca]);
                    db.extend_from_slice(&chunk[ca..]);
                }
                if self.wants(*a) {
                    out.push((*a, like(*a, da)));
                }
                if self.wants(*b) {
                    out.push((*b, like(*b, db)));
                }
            }
            Op::SwapLast2(x) => {
                let s = node.value.shape();
                out.push((*x, like(*x, transpose_last2(dy, s[0], s[1], s[2]))));
            }
            Op::Reshape(x) => {
                out.push((*x, like(*x, dy.to_vec())));
            }
            Op::Attention { qkv, heads, probs } => {
                let s = self.shape(*qkv);
                let (batch, len, c) = (s[0], s[1], s[2] / 3);
                let qv = self.value(*qkv).data();
                let mut dq = vec![T::zero(); qv.len()];
                let hl = heads * len * len;
                for bi in 0..batch {
                    attention_backward(
                        &qv[bi * len * 3 * c..][..len * 3 * c],
                        &probs[bi * hl..][..hl],
                        &dy[bi * len * c..][..len * c],
                        len,
                        c,
                        *heads,
                        &mut dq[bi * len * 3 * c..][..len * 3 * c],
                    );
                }
                out.push((*qkv, like(*qkv, dq)));
            }
            Op::Sum(x) => {
                out.push((*x, Tensor::full(self.shape(*x), dy[0])));
            }
            Op::Mean(x) => {
                let n = T::of(self.value(*x).len() as f64);
                out.push((*x, Tensor::full(self.shape(*x), dy[0] / n)));
            }
            Op::MeanAbsError { pred, target } => {
                let pv = self.value(*pred).data();
                let scale = dy[0] / T::of(pv.len() as f64);
                let dx = pv
                    .iter()
                    .zip(target.data())
                    .map(|(&p, &t)| {
                        let diff = p - t;
                        if diff > T::zero() {
                            scale
                        } else if diff < T::zero() {
                            -scale
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                out.push((*pred, like(*pred, dx)));
            }
            Op::SoftmaxCrossEntropy {
                logits,
                target,
                probs,
            } => {
                let rows = self.shape(*logits)[0];
                let scale = dy[0] / T::of(rows as f64);
                let dx = probs
                    .iter()
                    .zip(target.data())
                    .map(|(&h, &g)| (h - g) * scale)
                    .collect();
                out.push((*logits, like(*logits, dx)));
            }
        }
        out
    }
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

fn transpose_last2<T: Real>(data: &[T], batch: usize, rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); data.len()];
    for b in 0..batch {
        let src = &data[b * rows * cols..][..rows * cols];
        let dst = &mut out[b * rows * cols..][..rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                dst[c * rows + r] = src[r * cols + c];
            }
        }
    }
    out
}
