//! Parameterised building blocks shared by the SSM, HoME and network layers.
//!
//! Layers hold [`ParamId`]s into a [`ParamStore`] and bind them to a tape at
//! forward time, so one set of weights can be evaluated on many tapes.

mod norm;

pub use norm::{dyt_reference, DyT, LayerNorm, Norm, NormKind, LAYER_NORM_EPS};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Init, ParamId, ParamStore};
use crate::tensor::{Conv3dSpec, Tape, Var};

/// Affine map `x·W + b` over the trailing dimension.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, prefix: &str, d_in: usize, d_out: usize) -> Self {
        let bound = 1.0 / (d_in as f64).sqrt();
        Linear {
            weight: store.register(format!("{prefix}.weight"), [d_in, d_out], Init::Uniform(bound)),
            bias: store.register(format!("{prefix}.bias"), [d_out], Init::Zeros),
            d_in,
            d_out,
        }
    }

    pub fn param_count(d_in: usize, d_out: usize) -> usize {
        d_in * d_out + d_out
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        if shape.last() != Some(&self.d_in) {
            return Err(Error::shape("linear", &shape, &[self.d_in, self.d_out]));
        }
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let rows = shape[..shape.len() - 1].iter().product::<usize>();
        let mut out_shape = shape.clone();
        *out_shape.last_mut().expect("rank >= 1") = self.d_out;
        x.reshape([rows, self.d_in])?
            .matmul(w)?
            .add(b)?
            .reshape(out_shape)
    }
}

/// Activation between the two projections of an [`ExpertFfn`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Gelu,
    /// Identity; used to build experts with analytically known outputs.
    Linear,
}

/// Width-preserving feed-forward expert: `d → r·d → d`.
#[derive(Clone, Debug)]
pub struct ExpertFfn {
    pub up: Linear,
    pub down: Linear,
    pub activation: Activation,
}

impl ExpertFfn {
    pub fn new(store: &mut ParamStore, prefix: &str, d: usize, ratio: usize, activation: Activation) -> Self {
        let hidden = (ratio * d).max(1);
        ExpertFfn {
            up: Linear::new(store, &format!("{prefix}.up"), d, hidden),
            down: Linear::new(store, &format!("{prefix}.down"), hidden, d),
            activation,
        }
    }

    pub fn param_count(d: usize, ratio: usize) -> usize {
        let hidden = (ratio * d).max(1);
        Linear::param_count(d, hidden) + Linear::param_count(hidden, d)
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Result<Var<'t>> {
        let h = self.up.forward(tape, store, x)?;
        let h = match self.activation {
            Activation::Gelu => h.gelu()?,
            Activation::Linear => h,
        };
        self.down.forward(tape, store, h)
    }
}

/// Gating network: a single linear layer producing one logit per expert.
#[derive(Clone, Debug)]
pub struct RouterMlp {
    pub proj: Linear,
}

impl RouterMlp {
    pub fn new(store: &mut ParamStore, prefix: &str, d: usize, experts: usize) -> Self {
        RouterMlp {
            proj: Linear::new(store, prefix, d, experts),
        }
    }

    pub fn experts(&self) -> usize {
        self.proj.d_out
    }

    /// Expert probabilities (softmax over the trailing axis).
    pub fn probs<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Result<Var<'t>> {
        let logits = self.proj.forward(tape, store, x)?;
        let axis = logits.shape().len() - 1;
        logits.softmax(axis)
    }
}

/// 3D convolution with cubic kernel and per-channel bias.
#[derive(Clone, Debug)]
pub struct Conv3d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub spec: Conv3dSpec,
    pub kernel: usize,
    pub c_in: usize,
    pub c_out: usize,
}

impl Conv3d {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        spec: Conv3dSpec,
    ) -> Self {
        let fan_in = c_in * kernel * kernel * kernel;
        let bound = 1.0 / (fan_in as f64).sqrt();
        Conv3d {
            weight: store.register(
                format!("{prefix}.weight"),
                [c_out, c_in, kernel, kernel, kernel],
                Init::Uniform(bound),
            ),
            bias: store.register(format!("{prefix}.bias"), [c_out], Init::Zeros),
            spec,
            kernel,
            c_in,
            c_out,
        }
    }

    /// `kernel`-sized, stride 1, "same" padding.
    pub fn same(store: &mut ParamStore, prefix: &str, c_in: usize, c_out: usize, kernel: usize) -> Self {
        Self::new(store, prefix, c_in, c_out, kernel, Conv3dSpec::new(1, kernel / 2))
    }

    pub fn param_count(c_in: usize, c_out: usize, kernel: usize) -> usize {
        c_out * c_in * kernel.pow(3) + c_out
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Result<Var<'t>> {
        x.conv3d(tape.param(store, self.weight), tape.param(store, self.bias), self.spec)
    }
}

/// Transposed 3D convolution without padding.
#[derive(Clone, Debug)]
pub struct ConvTranspose3d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub kernel: usize,
}

impl ConvTranspose3d {
    pub fn new(store: &mut ParamStore, prefix: &str, c_in: usize, c_out: usize, kernel: usize, stride: usize) -> Self {
        let fan_in = c_in * kernel * kernel * kernel;
        let bound = 1.0 / (fan_in as f64).sqrt();
        ConvTranspose3d {
            weight: store.register(
                format!("{prefix}.weight"),
                [c_in, c_out, kernel, kernel, kernel],
                Init::Uniform(bound),
            ),
            bias: store.register(format!("{prefix}.bias"), [c_out], Init::Zeros),
            stride,
            kernel,
        }
    }

    pub fn param_count(c_in: usize, c_out: usize, kernel: usize) -> usize {
        c_in * c_out * kernel.pow(3) + c_out
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Result<Var<'t>> {
        x.conv_transpose3d(tape.param(store, self.weight), tape.param(store, self.bias), self.stride)
    }
}

/// `[B, C, D, H, W] → [B, D·H·W, C]` in raster (depth-major) token order.
pub fn volume_to_tokens(x: Var<'_>) -> Result<Var<'_>> {
    let s = x.shape();
    if s.len() != 5 {
        return Err(Error::shape("volume_to_tokens", &s, &[5]));
    }
    x.reshape([s[0], s[1], s[2] * s[3] * s[4]])?.transpose(1, 2)
}

/// Inverse of [`volume_to_tokens`].
pub fn tokens_to_volume(x: Var<'_>, dims: [usize; 3]) -> Result<Var<'_>> {
    let s = x.shape();
    if s.len() != 3 || s[1] != dims.iter().product::<usize>() {
        return Err(Error::shape("tokens_to_volume", &s, &dims));
    }
    x.transpose(1, 2)?.reshape([s[0], s[2], dims[0], dims[1], dims[2]])
}
