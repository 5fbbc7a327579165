//! Multi-head MLP `f(S; theta)` with reverse-mode gradients.
//!
//! [`Adam`] and the soft-updated [`TargetNet`] live here too.
//!
//! All parameters live in one flat vector. Layer `l` stores its weight matrix
//! `[fan_in x fan_out]` row-major followed by its bias `[fan_out]`. The output
//! layer has `heads * width` units where `width` is 1 for scalar heads and
//! `n_atoms` for categorical heads (softmax per head).

use ndarray::{Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("parameter layout mismatch: {expected} vs {got} values")]
    LayoutMismatch { expected: usize, got: usize },
    #[error("invalid network spec: {0}")]
    BadSpec(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative given the pre-activation `x` and activation `y`.
    #[inline]
    fn grad(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum HeadKind {
    Scalar,
    Categorical { n_atoms: usize },
}

impl HeadKind {
    pub fn width(&self) -> usize {
        match self {
            HeadKind::Scalar => 1,
            HeadKind::Categorical { n_atoms } => *n_atoms,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// He-uniform for relu, Xavier-uniform for tanh; zero biases.
    #[default]
    FanIn,
    Zero,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub heads: usize,
    pub head_kind: HeadKind,
}

#[derive(Debug, Clone, Copy)]
struct LayerSlot {
    fan_in: usize,
    fan_out: usize,
    w: usize,
    b: usize,
}

impl NetSpec {
    pub fn validate(&self) -> Result<(), NetError> {
        if self.input_dim == 0 || self.heads == 0 || self.head_kind.width() == 0 {
            return Err(NetError::BadSpec("zero-sized input or output".into()));
        }
        if self.hidden.contains(&0) {
            return Err(NetError::BadSpec(format!("hidden widths {:?}", self.hidden)));
        }
        if let HeadKind::Categorical { n_atoms } = self.head_kind {
            if n_atoms < 2 {
                return Err(NetError::BadSpec("categorical heads need >= 2 atoms".into()));
            }
        }
        Ok(())
    }

    pub fn output_dim(&self) -> usize {
        self.heads * self.head_kind.width()
    }

    fn layers(&self) -> Vec<LayerSlot> {
        let mut dims = vec![self.input_dim];
        dims.extend(&self.hidden);
        dims.push(self.output_dim());
        let mut off = 0;
        dims.windows(2)
            .map(|d| {
                let slot = LayerSlot {
                    fan_in: d[0],
                    fan_out: d[1],
                    w: off,
                    b: off + d[0] * d[1],
                };
                off = slot.b + d[1];
                slot
            })
            .collect()
    }

    pub fn n_params(&self) -> usize {
        self.layers().last().map(|l| l.b + l.fan_out).unwrap_or(0)
    }

    pub fn init<R: Rng + ?Sized>(&self, scheme: InitScheme, rng: &mut R) -> Params {
        let mut data = vec![0.0; self.n_params()];
        if scheme == InitScheme::FanIn {
            for l in self.layers() {
                let bound = match self.activation {
                    Activation::Relu => (6.0 / l.fan_in as f64).sqrt(),
                    Activation::Tanh => (6.0 / (l.fan_in + l.fan_out) as f64).sqrt(),
                };
                for w in &mut data[l.w..l.b] {
                    *w = rng.random_range(-bound..bound);
                }
            }
        }
        Params(data)
    }

    fn check_params(&self, params: &Params) -> Result<(), NetError> {
        let expected = self.n_params();
        if params.len() != expected {
            return Err(NetError::LayoutMismatch {
                expected,
                got: params.len(),
            });
        }
        Ok(())
    }

    /// Batched forward pass; `x` is `[batch x input_dim]`.
    pub fn forward(&self, params: &Params, x: ArrayView2<f64>) -> Result<ForwardCache, NetError> {
        self.check_params(params)?;
        if x.ncols() != self.input_dim {
            return Err(NetError::DimMismatch {
                expected: self.input_dim,
                got: x.ncols(),
            });
        }
        let layers = self.layers();
        let mut pre = Vec::with_capacity(layers.len());
        let mut acts = Vec::with_capacity(layers.len());
        let mut a = x.to_owned();
        for (k, l) in layers.iter().enumerate() {
            let (w, b) = params.layer(*l);
            let mut z = a.dot(&w);
            z += &b;
            acts.push(a);
            if k + 1 < layers.len() {
                let act = self.activation;
                let y = z.mapv(|v| act.apply(v));
                pre.push(z);
                a = y;
            } else {
                a = z;
            }
        }
        if let HeadKind::Categorical { n_atoms } = self.head_kind {
            for mut row in a.rows_mut() {
                for mut head in row.exact_chunks_mut(n_atoms) {
                    softmax_in_place(head.as_slice_mut().expect("contiguous"));
                }
            }
        }
        Ok(ForwardCache { pre, acts, output: a })
    }

    /// Forward pass for one feature vector; returns the flat output row.
    pub fn forward_one(&self, params: &Params, features: &[f64]) -> Result<Vec<f64>, NetError> {
        let x = ArrayView2::from_shape((1, features.len()), features).expect("row shape");
        Ok(self.forward(params, x)?.output.into_raw_vec_and_offset().0)
    }

    /// Gradient of `sum_{b,k} upstream[b,k] * output[b,k]` with respect to the
    /// parameters, where `output` is the post-softmax output for categorical heads.
    pub fn backward(
        &self,
        params: &Params,
        cache: &ForwardCache,
        upstream: ArrayView2<f64>,
    ) -> Result<Vec<f64>, NetError> {
        self.check_params(params)?;
        if upstream.dim() != cache.output.dim() {
            return Err(NetError::DimMismatch {
                expected: cache.output.len(),
                got: upstream.len(),
            });
        }
        let mut delta = upstream.to_owned();
        if let HeadKind::Categorical { n_atoms } = self.head_kind {
            // softmax Jacobian-vector product: p * (g - <p, g>)
            for (mut d, p) in delta.rows_mut().into_iter().zip(cache.output.rows()) {
                for (mut dh, ph) in d.exact_chunks_mut(n_atoms).into_iter().zip(p.exact_chunks(n_atoms)) {
                    let dot: f64 = dh.iter().zip(ph.iter()).map(|(g, p)| g * p).sum();
                    dh.zip_mut_with(&ph, |g, p| *g = p * (*g - dot));
                }
            }
        }
        let mut grad = vec![0.0; self.n_params()];
        let layers = self.layers();
        for (k, l) in layers.iter().enumerate().rev() {
            let a_in = &cache.acts[k];
            {
                let (gw, gb) = split_grad(&mut grad, *l);
                let mut gw = gw;
                gw.assign(&a_in.t().dot(&delta));
                let mut gb = gb;
                gb.assign(&delta.sum_axis(Axis(0)));
            }
            if k > 0 {
                let (w, _) = params.layer(*l);
                let mut back = delta.dot(&w.t());
                let act = self.activation;
                back.zip_mut_with(&cache.pre[k - 1], |d, z| *d *= act.grad(*z, act.apply(*z)));
                delta = back;
            }
        }
        Ok(grad)
    }

    /// Forward then backward in one call.
    pub fn gradient(&self, params: &Params, x: ArrayView2<f64>, upstream: ArrayView2<f64>) -> Result<Vec<f64>, NetError> {
        let cache = self.forward(params, x)?;
        self.backward(params, &cache, upstream)
    }
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pre: Vec<Array2<f64>>,
    acts: Vec<Array2<f64>>,
    pub output: Array2<f64>,
}

fn split_grad(grad: &mut [f64], l: LayerSlot) -> (ArrayViewMut2<'_, f64>, ArrayViewMut1<'_, f64>) {
    let (w, rest) = grad[l.w..l.b + l.fan_out].split_at_mut(l.fan_in * l.fan_out);
    (
        ArrayViewMut2::from_shape((l.fan_in, l.fan_out), w).expect("layer shape"),
        ArrayViewMut1::from(rest),
    )
}

/// Max-subtracted softmax.
pub fn softmax_in_place(x: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in x.iter_mut() {
        *v /= sum;
    }
}

/// Flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Params(pub Vec<f64>);

impl Params {
    pub fn zeros(spec: &NetSpec) -> Self {
        Params(vec![0.0; spec.n_params()])
    }

    pub fn unflatten(spec: &NetSpec, flat: Vec<f64>) -> Result<Self, NetError> {
        let p = Params(flat);
        spec.check_params(&p)?;
        Ok(p)
    }

    pub fn flatten(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    fn layer(&self, l: LayerSlot) -> (ArrayView2<'_, f64>, ArrayView1<'_, f64>) {
        (
            ArrayView2::from_shape((l.fan_in, l.fan_out), &self.0[l.w..l.b]).expect("layer shape"),
            ArrayView1::from(&self.0[l.b..l.b + l.fan_out]),
        )
    }

    pub fn l2_distance(&self, other: &Params) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

/// Adam with bias-corrected moment estimates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl Adam {
    pub fn new(n_params: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut Params, grads: &[f64], lr: f64) -> Result<(), NetError> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(NetError::LayoutMismatch {
                expected: params.len(),
                got: grads.len(),
            });
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (((p, g), m), v) in params.0.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Slowly tracking copy of the online parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetNet {
    pub params: Params,
    pub tau: f64,
}

impl TargetNet {
    pub fn new(online: &Params, tau: f64) -> Self {
        Self {
            params: online.clone(),
            tau,
        }
    }

    /// `target <- tau * online + (1 - tau) * target`.
    pub fn soft_update(&mut self, online: &Params) -> Result<(), NetError> {
        if online.len() != self.params.len() {
            return Err(NetError::LayoutMismatch {
                expected: self.params.len(),
                got: online.len(),
            });
        }
        let tau = self.tau;
        for (t, o) in self.params.0.iter_mut().zip(&online.0) {
            *t = tau * o + (1.0 - tau) * *t;
        }
        Ok(())
    }
}
