use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Init, ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;
const DYT_ALPHA_INIT: f64 = 0.5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum NormKind {
    #[default]
    #[serde(rename = "dyt")]
    DyT,
    #[serde(rename = "layernorm")]
    LayerNorm,
}

impl std::str::FromStr for NormKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dyt" => Ok(NormKind::DyT),
            "ln" | "layernorm" => Ok(NormKind::LayerNorm),
            other => Err(Error::Config(format!("unknown normalization {other:?}"))),
        }
    }
}

/// Scalar reference for `w·tanh(α·x) + b`.
pub fn dyt_reference(x: f64, alpha: f64, w: f64, b: f64) -> f64 {
    w * (alpha * x).tanh() + b
}

/// Dynamic Tanh: `w ⊙ tanh(α·x) + b` with per-channel `w`, `b` and a
/// shared scalar `α`.
#[derive(Clone, Debug)]
pub struct DyT {
    pub alpha: ParamId,
    pub weight: ParamId,
    pub bias: ParamId,
    pub dim: usize,
}

impl DyT {
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize) -> Self {
        DyT {
            alpha: store.register(format!("{prefix}.alpha"), Vec::<usize>::new(), Init::Const(DYT_ALPHA_INIT)),
            weight: store.register(format!("{prefix}.weight"), [dim], Init::Const(1.0)),
            bias: store.register(format!("{prefix}.bias"), [dim], Init::Zeros),
            dim,
        }
    }

    pub fn param_count(dim: usize) -> usize {
        2 * dim + 1
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Result<Var<'t>> {
        let alpha = tape.param(store, self.alpha);
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        dyt(x, alpha, w, b)
    }
}

/// `tanh` through a single `exp`; absolute error stays below 1e-15 and the
/// tails saturate to ±1 without overflow.
#[inline]
fn fast_tanh(z: f64) -> f64 {
    1.0 - 2.0 / ((2.0 * z).exp() + 1.0)
}

/// Fused DyT op over the trailing axis.
pub(crate) fn dyt<'t>(x: Var<'t>, alpha: Var<'t>, w: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    let xv = x.value();
    let av = alpha.value();
    let wv = w.value();
    let bv = b.value();
    let d = *xv.shape().last().unwrap_or(&0);
    if av.len() != 1 || wv.shape() != [d] || bv.shape() != [d] || d == 0 {
        return Err(Error::shape("dyt", xv.shape(), wv.shape()));
    }
    let a = av.data()[0];
    let th: Vec<f64> = xv.data().iter().map(|&x| fast_tanh(a * x)).collect();
    let mut y = vec![0.0; xv.len()];
    for (out, row) in y.chunks_exact_mut(d).zip(th.chunks_exact(d)) {
        for (o, (&t, (&w, &b))) in out.iter_mut().zip(row.iter().zip(wv.data().iter().zip(bv.data()))) {
            *o = w * t + b;
        }
    }
    let shape = xv.shape().to_vec();
    let tape = x.tape();
    Ok(tape.record(
        &[x, alpha, w, b],
        Tensor::new(shape.clone(), y)?,
        Box::new(move |g, _, needs| {
            let mut gx = vec![0.0; xv.len()];
            let mut ga = 0.0;
            let mut gw = vec![0.0; d];
            let mut gb = vec![0.0; d];
            for (r, row) in xv.data().chunks_exact(d).enumerate() {
                for (j, &x) in row.iter().enumerate() {
                    let i = r * d + j;
                    let t = th[i];
                    let sech2 = 1.0 - t * t;
                    let gi = g.data()[i];
                    let w = wv.data()[j];
                    gx[i] = gi * w * a * sech2;
                    ga += gi * w * x * sech2;
                    gw[j] += gi * t;
                    gb[j] += gi;
                }
            }
            vec![
                needs[0].then(|| Tensor::new(shape.clone(), gx).expect("x")),
                needs[1].then(|| Tensor::new(av.shape().to_vec(), vec![ga]).expect("alpha")),
                needs[2].then(|| Tensor::new([d], gw).expect("w")),
                needs[3].then(|| Tensor::new([d], gb).expect("b")),
            ]
        }),
    ))
}

/// Per-vector standardisation followed by a per-channel affine map.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: store.register(format!("{prefix}.gamma"), [dim], Init::Const(1.0)),
            beta: store.register(format!("{prefix}.beta"), [dim], Init::Zeros),
            dim,
        }
    }

    pub fn param_count(dim: usize) -> usize {
        2 * dim
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Result<Var<'t>> {
        layer_norm(x, tape.param(store, self.gamma), tape.param(store, self.beta))
    }
}

/// Fused layer normalisation over the trailing axis (biased variance).
pub(crate) fn layer_norm<'t>(x: Var<'t>, gamma: Var<'t>, beta: Var<'t>) -> Result<Var<'t>> {
    let xv = x.value();
    let gv = gamma.value();
    let bv = beta.value();
    let d = *xv.shape().last().unwrap_or(&0);
    if d == 0 || gv.shape() != [d] || bv.shape() != [d] {
        return Err(Error::shape("layer_norm", xv.shape(), gv.shape()));
    }
    let rows = xv.len() / d;
    let mut xhat = vec![0.0; xv.len()];
    let mut rstd = vec![0.0; rows];
    let mut y = vec![0.0; xv.len()];
    for r in 0..rows {
        let row = &xv.data()[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        rstd[r] = inv;
        for j in 0..d {
            let h = (row[j] - mean) * inv;
            xhat[r * d + j] = h;
            y[r * d + j] = gv.data()[j] * h + bv.data()[j];
        }
    }
    let shape = xv.shape().to_vec();
    let tape = x.tape();
    Ok(tape.record(
        &[x, gamma, beta],
        Tensor::new(shape.clone(), y)?,
        Box::new(move |g, _, needs| {
            let mut gx = vec![0.0; xhat.len()];
            let mut gg = vec![0.0; d];
            let mut gb = vec![0.0; d];
            for r in 0..rows {
                let mut mean_gh = 0.0;
                let mut mean_gh_h = 0.0;
                for j in 0..d {
                    let i = r * d + j;
                    let gh = g.data()[i] * gv.data()[j];
                    mean_gh += gh;
                    mean_gh_h += gh * xhat[i];
                    gg[j] += g.data()[i] * xhat[i];
                    gb[j] += g.data()[i];
                }
                mean_gh /= d as f64;
                mean_gh_h /= d as f64;
                for j in 0..d {
                    let i = r * d + j;
                    let gh = g.data()[i] * gv.data()[j];
                    gx[i] = rstd[r] * (gh - mean_gh - xhat[i] * mean_gh_h);
                }
            }
            vec![
                needs[0].then(|| Tensor::new(shape.clone(), gx).expect("x")),
                needs[1].then(|| Tensor::new([d], gg).expect("gamma")),
                needs[2].then(|| Tensor::new([d], gb).expect("beta")),
            ]
        }),
    ))
}

/// Normalisation selected by [`NormKind`].
#[derive(Clone, Debug)]
pub enum Norm {
    DyT(DyT),
    LayerNorm(LayerNorm),
}

impl Norm {
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize, kind: NormKind) -> Self {
        match kind {
            NormKind::DyT => Norm::DyT(DyT::new(store, prefix, dim)),
            NormKind::LayerNorm => Norm::LayerNorm(LayerNorm::new(store, prefix, dim)),
        }
    }

    pub fn param_count(dim: usize, kind: NormKind) -> usize {
        match kind {
            NormKind::DyT => DyT::param_count(dim),
            NormKind::LayerNorm => LayerNorm::param_count(dim),
        }
    }

    /// Normalises over the trailing (channel) axis.
    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Result<Var<'t>> {
        match self {
            Norm::DyT(n) => n.forward(tape, store, x),
            Norm::LayerNorm(n) => n.forward(tape, store, x),
        }
    }

    /// Normalises the channel axis of a `[B, C, D, H, W]` volume.
    pub fn forward_volume<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Result<Var<'t>> {
        let last = x.permute(&[0, 2, 3, 4, 1])?;
        self.forward(tape, store, last)?.permute(&[0, 4, 1, 2, 3])
    }
}
