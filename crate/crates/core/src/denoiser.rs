//! The noise-prediction network: a small MLP over the concatenation of the
//! sample with a sinusoidal timestep embedding (plus an additive learned
//! condition embedding when conditional), with hand-written reverse-mode
//! gradients.
//!
//! Parameters are stored as f32 tensors; all arithmetic runs in f64 so that
//! gradient checks are limited by finite-difference truncation error rather
//! than storage precision. Distillation targets are passed through the f64
//! path, which makes "student equals teacher" an exact fixed point: the
//! residual is bitwise zero, so no gradient (and no optimizer drift) exists.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::diffusion::NoisePredictor;
use crate::error::{Error, Result};
use crate::rng::new_rng;
use crate::tensor::Tensor;

/// Architecture descriptor. Parameter names and shapes are a pure function
/// of this value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Arch {
    /// Data dimensionality d.
    pub input_dim: usize,
    /// Hidden layer widths.
    pub hidden: Vec<usize>,
    /// Sinusoidal timestep embedding width (even).
    pub embed_dim: usize,
    /// Condition-token count; None for an unconditional model.
    pub num_conditions: Option<u32>,
    /// Timestep count the embedding is scaled for.
    pub t_steps: usize,
}

impl Arch {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::InvalidArch("input_dim must be >= 1".into()));
        }
        if self.hidden.iter().any(|&h| h == 0) {
            return Err(Error::InvalidArch("hidden widths must be >= 1".into()));
        }
        if self.embed_dim == 0 || self.embed_dim % 2 != 0 {
            return Err(Error::InvalidArch(format!(
                "embed_dim must be even and positive, got {}",
                self.embed_dim
            )));
        }
        if self.num_conditions == Some(0) {
            return Err(Error::InvalidArch("num_conditions must be >= 1 when present".into()));
        }
        if self.t_steps == 0 {
            return Err(Error::InvalidArch("t_steps must be >= 1".into()));
        }
        Ok(())
    }

    /// (fan_in, fan_out) of every linear layer, output layer last.
    fn linear_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 1);
        let mut prev = self.input_dim + self.embed_dim;
        for &h in &self.hidden {
            dims.push((prev, h));
            prev = h;
        }
        dims.push((prev, self.input_dim));
        dims
    }

    fn layer_name(&self, idx: usize) -> String {
        if idx == self.hidden.len() {
            "out".to_string()
        } else {
            format!("l{idx}")
        }
    }

    /// Expected parameter shapes, keyed by name.
    pub fn param_shapes(&self) -> BTreeMap<String, Vec<usize>> {
        let mut shapes = BTreeMap::new();
        for (i, (fan_in, fan_out)) in self.linear_dims().into_iter().enumerate() {
            let name = self.layer_name(i);
            shapes.insert(format!("{name}.w"), vec![fan_out, fan_in]);
            shapes.insert(format!("{name}.b"), vec![fan_out]);
        }
        if let Some(k) = self.num_conditions {
            shapes.insert("cond.emb".to_string(), vec![k as usize, self.embed_dim]);
        }
        shapes
    }

    /// Total scalar parameter count.
    pub fn param_count(&self) -> usize {
        self.param_shapes()
            .values()
            .map(|s| s.iter().product::<usize>())
            .sum()
    }
}

/// Sinusoidal timestep features: `[sin(t w_k), cos(t w_k)]` over dim/2
/// frequencies geometrically spaced from 1 down to 1/(10 t_steps).
pub fn timestep_embedding(t: usize, dim: usize, t_steps: usize) -> Result<Tensor> {
    let v = temb64(t, dim, t_steps)?;
    Ok(Tensor::from_vec(v.into_iter().map(|x| x as f32).collect()))
}

pub(crate) fn temb64(t: usize, dim: usize, t_steps: usize) -> Result<Vec<f64>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::InvalidArch(format!("embedding dim must be even and positive, got {dim}")));
    }
    if t < 1 || t > t_steps {
        return Err(Error::TimestepOutOfRange { t, min: 1, max: t_steps });
    }
    let half = dim / 2;
    let scale = 10.0 * t_steps as f64;
    let mut out = Vec::with_capacity(dim);
    for k in 0..half {
        let omega = if half == 1 {
            1.0
        } else {
            scale.powf(-(k as f64) / (half as f64 - 1.0))
        };
        let arg = t as f64 * omega;
        out.push(arg.sin());
        out.push(arg.cos());
    }
    Ok(out)
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn silu(z: f64) -> f64 {
    z * sigmoid(z)
}

fn dsilu(z: f64) -> f64 {
    let s = sigmoid(z);
    s * (1.0 + z * (1.0 - s))
}

/// The denoiser: named parameter tensors plus the architecture realizing
/// `eps(x_t, t, c)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Denoiser {
    arch: Arch,
    params: BTreeMap<String, Tensor>,
}

impl Denoiser {
    /// Fresh model with scaled uniform fan-in weights and zero biases,
    /// deterministic given the seed.
    pub fn init(arch: Arch, seed: u64) -> Result<Denoiser> {
        arch.validate()?;
        let mut rng = new_rng(seed);
        let mut unif = |k: f64| -> f32 { ((rand::Rng::random::<f64>(&mut rng) * 2.0 - 1.0) * k) as f32 };
        let mut params = BTreeMap::new();
        for (i, (fan_in, fan_out)) in arch.linear_dims().into_iter().enumerate() {
            let name = arch.layer_name(i);
            let k = 1.0 / (fan_in as f64).sqrt();
            let w: Vec<f32> = (0..fan_in * fan_out).map(|_| unif(k)).collect();
            params.insert(format!("{name}.w"), Tensor::new(vec![fan_out, fan_in], w)?);
            params.insert(format!("{name}.b"), Tensor::zeros(vec![fan_out]));
        }
        if let Some(kt) = arch.num_conditions {
            let k = 1.0 / (arch.embed_dim as f64).sqrt();
            let e: Vec<f32> = (0..kt as usize * arch.embed_dim).map(|_| unif(k)).collect();
            params.insert("cond.emb".to_string(), Tensor::new(vec![kt as usize, arch.embed_dim], e)?);
        }
        Ok(Denoiser { arch, params })
    }

    /// Rebuild from explicit parameters (checkpoint load); the name set and
    /// every shape must match the architecture exactly.
    pub fn from_params(arch: Arch, params: BTreeMap<String, Tensor>) -> Result<Denoiser> {
        arch.validate()?;
        let expected = arch.param_shapes();
        if params.len() != expected.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, got {}",
                expected.len(),
                params.len()
            )));
        }
        for (name, shape) in &expected {
            match params.get(name) {
                None => return Err(Error::Checkpoint(format!("missing parameter {name}"))),
                Some(t) if t.shape() != &shape[..] => {
                    return Err(Error::Checkpoint(format!(
                        "parameter {name} has shape {:?}, arch wants {:?}",
                        t.shape(),
                        shape
                    )))
                }
                Some(_) => {}
            }
        }
        Ok(Denoiser { arch, params })
    }

    pub fn arch(&self) -> &Arch {
        &self.arch
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut BTreeMap<String, Tensor> {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(|t| t.len()).sum()
    }

    pub(crate) fn to_f64(&self) -> F64Net {
        let mut layers = Vec::with_capacity(self.arch.hidden.len() + 1);
        for (i, (fan_in, fan_out)) in self.arch.linear_dims().into_iter().enumerate() {
            let name = self.arch.layer_name(i);
            let w = self.params[&format!("{name}.w")].data().iter().map(|&v| v as f64).collect();
            let b = self.params[&format!("{name}.b")].data().iter().map(|&v| v as f64).collect();
            layers.push(Lin64 { w, b, rows: fan_out, cols: fan_in });
        }
        let cond = self.params.get("cond.emb").map(|t| {
            t.data()
                .chunks(self.arch.embed_dim)
                .map(|row| row.iter().map(|&v| v as f64).collect())
                .collect()
        });
        F64Net { arch: self.arch.clone(), layers, cond: cond.unwrap_or_default() }
    }

    /// Noise prediction for one sample; output shape equals input shape.
    pub fn forward(&self, x: &Tensor, t: usize, cond: Option<u32>) -> Result<Tensor> {
        let net = self.to_f64();
        let out = net.forward(x_as_f64(&self.arch, x)?.as_slice(), t, cond)?;
        Ok(Tensor::new(x.shape().to_vec(), out.into_iter().map(|v| v as f32).collect())?)
    }

    /// Squared-error loss, mean over the batch, and exact reverse-mode
    /// gradients for every parameter. Targets are constants (no gradient
    /// flows into them).
    pub fn loss_and_grads(
        &self,
        xs: &[Tensor],
        ts: &[usize],
        conds: &[Option<u32>],
        targets: &[Tensor],
    ) -> Result<(f64, BTreeMap<String, Tensor>)> {
        let xs64 = xs.iter().map(|x| x_as_f64(&self.arch, x)).collect::<Result<Vec<_>>>()?;
        let tg64 = targets.iter().map(|x| x_as_f64(&self.arch, x)).collect::<Result<Vec<_>>>()?;
        self.loss_and_grads64(&xs64, ts, conds, &tg64)
    }

    /// Same as `loss_and_grads` but with f64 targets, used where targets come
    /// from another model's f64 forward pass (distillation).
    pub(crate) fn loss_and_grads64(
        &self,
        xs: &[Vec<f64>],
        ts: &[usize],
        conds: &[Option<u32>],
        targets: &[Vec<f64>],
    ) -> Result<(f64, BTreeMap<String, Tensor>)> {
        let net = self.to_f64();
        let (loss, g64) = net.loss_and_grads(xs, ts, conds, targets)?;
        let shapes = self.arch.param_shapes();
        let mut grads = BTreeMap::new();
        for (name, g) in g64 {
            let shape = shapes[&name].clone();
            grads.insert(name, Tensor::new(shape, g.into_iter().map(|v| v as f32).collect())?);
        }
        Ok((loss, grads))
    }
}

fn x_as_f64(arch: &Arch, x: &Tensor) -> Result<Vec<f64>> {
    if x.len() != arch.input_dim {
        return Err(Error::ShapeMismatch {
            expected: vec![arch.input_dim],
            got: x.shape().to_vec(),
        });
    }
    Ok(x.data().iter().map(|&v| v as f64).collect())
}

impl NoisePredictor for Denoiser {
    fn predict(&self, x: &Tensor, t: usize, cond: Option<u32>) -> Result<Tensor> {
        self.forward(x, t, cond)
    }

    fn predict_batch(&self, xs: &[Tensor], t: usize, conds: &[Option<u32>]) -> Result<Vec<Tensor>> {
        if xs.len() != conds.len() {
            return Err(Error::ShapeMismatch { expected: vec![xs.len()], got: vec![conds.len()] });
        }
        let net = self.to_f64();
        xs.iter()
            .zip(conds)
            .map(|(x, &c)| {
                let out = net.forward(x_as_f64(&self.arch, x)?.as_slice(), t, c)?;
                Tensor::new(x.shape().to_vec(), out.into_iter().map(|v| v as f32).collect())
            })
            .collect()
    }
}

struct Lin64 {
    w: Vec<f64>,
    b: Vec<f64>,
    rows: usize,
    cols: usize,
}

impl Lin64 {
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.rows);
        for r in 0..self.rows {
            let row = &self.w[r * self.cols..(r + 1) * self.cols];
            let mut acc = self.b[r];
            for (wi, xi) in row.iter().zip(x) {
                acc += wi * xi;
            }
            out.push(acc);
        }
        out
    }

    /// x^T W^T row-combination: out[c] = sum_r delta[r] * w[r][c].
    fn back(&self, delta: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for (r, d) in delta.iter().enumerate() {
            let row = &self.w[r * self.cols..(r + 1) * self.cols];
            for (o, wi) in out.iter_mut().zip(row) {
                *o += d * wi;
            }
        }
        out
    }
}

/// f64 view of a denoiser used by every numeric path (forward, training,
/// attacks) and by the finite-difference oracle, which perturbs its
/// parameters directly to avoid f32 quantization noise.
pub(crate) struct F64Net {
    arch: Arch,
    layers: Vec<Lin64>,
    cond: Vec<Vec<f64>>,
}

struct Trace {
    input: Vec<f64>,
    // Pre-activations and activations per hidden layer.
    zs: Vec<Vec<f64>>,
    hs: Vec<Vec<f64>>,
    out: Vec<f64>,
}

impl F64Net {
    fn build_input(&self, x: &[f64], t: usize, cond: Option<u32>) -> Result<Vec<f64>> {
        if x.len() != self.arch.input_dim {
            return Err(Error::ShapeMismatch {
                expected: vec![self.arch.input_dim],
                got: vec![x.len()],
            });
        }
        let mut emb = temb64(t, self.arch.embed_dim, self.arch.t_steps)?;
        match (cond, self.arch.num_conditions) {
            (Some(c), Some(k)) => {
                if c >= k {
                    return Err(Error::UnknownCondition { token: c, vocab: k as usize });
                }
                for (e, v) in emb.iter_mut().zip(&self.cond[c as usize]) {
                    *e += v;
                }
            }
            (Some(_), None) => return Err(Error::UnexpectedCondition),
            (None, _) => {}
        }
        let mut input = Vec::with_capacity(self.arch.input_dim + self.arch.embed_dim);
        input.extend_from_slice(x);
        input.extend_from_slice(&emb);
        Ok(input)
    }

    fn traced(&self, x: &[f64], t: usize, cond: Option<u32>) -> Result<Trace> {
        let input = self.build_input(x, t, cond)?;
        let n_hidden = self.layers.len() - 1;
        let mut zs = Vec::with_capacity(n_hidden);
        let mut hs = Vec::with_capacity(n_hidden);
        let mut cur = input.clone();
        for layer in &self.layers[..n_hidden] {
            let z = layer.apply(&cur);
            let h: Vec<f64> = z.iter().map(|&v| silu(v)).collect();
            zs.push(z);
            cur = h.clone();
            hs.push(h);
        }
        let out = self.layers[n_hidden].apply(&cur);
        Ok(Trace { input, zs, hs, out })
    }

    pub(crate) fn forward(&self, x: &[f64], t: usize, cond: Option<u32>) -> Result<Vec<f64>> {
        Ok(self.traced(x, t, cond)?.out)
    }

    pub(crate) fn loss(
        &self,
        xs: &[Vec<f64>],
        ts: &[usize],
        conds: &[Option<u32>],
        targets: &[Vec<f64>],
    ) -> Result<f64> {
        check_batch(xs, ts, conds, targets)?;
        let mut total = 0.0;
        for (((x, &t), &c), tg) in xs.iter().zip(ts).zip(conds).zip(targets) {
            let out = self.forward(x, t, c)?;
            total += out.iter().zip(tg).map(|(o, g)| (o - g) * (o - g)).sum::<f64>();
        }
        Ok(total / xs.len() as f64)
    }

    pub(crate) fn loss_and_grads(
        &self,
        xs: &[Vec<f64>],
        ts: &[usize],
        conds: &[Option<u32>],
        targets: &[Vec<f64>],
    ) -> Result<(f64, BTreeMap<String, Vec<f64>>)> {
        check_batch(xs, ts, conds, targets)?;
        let b = xs.len() as f64;
        let n_hidden = self.layers.len() - 1;
        let mut grads: BTreeMap<String, Vec<f64>> = self
            .arch
            .param_shapes()
            .into_iter()
            .map(|(name, shape)| (name, vec![0.0; shape.iter().product()]))
            .collect();
        let mut total = 0.0;

        for (((x, &t), &c), tg) in xs.iter().zip(ts).zip(conds).zip(targets) {
            if tg.len() != self.arch.input_dim {
                return Err(Error::ShapeMismatch {
                    expected: vec![self.arch.input_dim],
                    got: vec![tg.len()],
                });
            }
            let trace = self.traced(x, t, c)?;
            let resid: Vec<f64> = trace.out.iter().zip(tg).map(|(o, g)| o - g).collect();
            total += resid.iter().map(|r| r * r).sum::<f64>();

            // dL/d out
            let mut delta: Vec<f64> = resid.iter().map(|r| 2.0 * r / b).collect();
            for li in (0..self.layers.len()).rev() {
                let name = self.arch.layer_name(li);
                let below: &[f64] = if li == 0 { &trace.input } else { &trace.hs[li - 1] };
                {
                    let gw = grads.get_mut(&format!("{name}.w")).unwrap();
                    let cols = self.layers[li].cols;
                    for (r, d) in delta.iter().enumerate() {
                        let row = &mut gw[r * cols..(r + 1) * cols];
                        for (g, xi) in row.iter_mut().zip(below) {
                            *g += d * xi;
                        }
                    }
                }
                {
                    let gb = grads.get_mut(&format!("{name}.b")).unwrap();
                    for (g, d) in gb.iter_mut().zip(&delta) {
                        *g += d;
                    }
                }
                if li == 0 {
                    if let Some(token) = c {
                        let dh = self.layers[0].back(&delta);
                        let ge = grads.get_mut("cond.emb").unwrap();
                        let e = self.arch.embed_dim;
                        let row = &mut ge[token as usize * e..(token as usize + 1) * e];
                        for (g, d) in row.iter_mut().zip(&dh[self.arch.input_dim..]) {
                            *g += d;
                        }
                    }
                } else {
                    let dh = self.layers[li].back(&delta);
                    delta = dh
                        .iter()
                        .zip(&trace.zs[li - 1])
                        .map(|(d, &z)| d * dsilu(z))
                        .collect();
                }
            }
            let _ = n_hidden;
        }
        Ok((total / b, grads))
    }

    /// Direct parameter access for the finite-difference oracle.
    pub(crate) fn param_mut(&mut self, name: &str) -> Option<&mut Vec<f64>> {
        if name == "cond.emb" {
            // Flat view is rebuilt on demand; cond is stored per-row.
            return None;
        }
        let (layer, field) = name.split_once('.')?;
        let idx = if layer == "out" {
            self.layers.len() - 1
        } else {
            layer.strip_prefix('l')?.parse::<usize>().ok()?
        };
        let lin = self.layers.get_mut(idx)?;
        match field {
            "w" => Some(&mut lin.w),
            "b" => Some(&mut lin.b),
            _ => None,
        }
    }

    pub(crate) fn cond_entry_mut(&mut self, token: usize, k: usize) -> Option<&mut f64> {
        self.cond.get_mut(token)?.get_mut(k)
    }
}

fn check_batch(
    xs: &[Vec<f64>],
    ts: &[usize],
    conds: &[Option<u32>],
    targets: &[Vec<f64>],
) -> Result<()> {
    if xs.is_empty() {
        return Err(Error::EmptyInput("loss batch".into()));
    }
    if ts.len() != xs.len() || conds.len() != xs.len() || targets.len() != xs.len() {
        return Err(Error::ShapeMismatch {
            expected: vec![xs.len()],
            got: vec![ts.len().min(conds.len()).min(targets.len())],
        });
    }
    Ok(())
}
