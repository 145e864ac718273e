//! The per-stage encoder block.
//!
//! One layer maps a volume `x: [B, C, D, H, W]` to
//!
//! ```text
//! x̂  = GSC(x)
//! x̃  = Mamba(Norm(x̂)) + x̂           (on raster-ordered tokens)
//! out = Linear(HoME(Norm(x̃))) + x̃
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::home::{HomeLayer, HomeStageConfig};
use crate::nn::{tokens_to_volume, volume_to_tokens, Conv3d, Linear, Norm, NormKind};
use crate::params::ParamStore;
use crate::ssm::{MambaLayer, SsmConfig};
use crate::tensor::{Tape, Tensor, Var};

/// Gated spatial convolution: `out(main(x) ⊙ σ(gate(x))) + x`.
#[derive(Clone, Debug)]
pub struct Gsc {
    pub main: Conv3d,
    pub gate: Conv3d,
    pub out: Conv3d,
}

pub const GSC_KERNELS: [usize; 3] = [3, 1, 3];

impl Gsc {
    pub fn new(store: &mut ParamStore, prefix: &str, channels: usize) -> Self {
        let [km, kg, ko] = GSC_KERNELS;
        Gsc {
            main: Conv3d::same(store, &format!("{prefix}.main"), channels, channels, km),
            gate: Conv3d::same(store, &format!("{prefix}.gate"), channels, channels, kg),
            out: Conv3d::same(store, &format!("{prefix}.out"), channels, channels, ko),
        }
    }

    pub fn param_count(channels: usize) -> usize {
        GSC_KERNELS.iter().map(|&k| Conv3d::param_count(channels, channels, k)).sum()
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Result<Var<'t>> {
        let s = x.shape();
        if s.len() != 5 || s[1] != self.main.c_in {
            return Err(Error::shape("gsc", &s, &[self.main.c_in]));
        }
        let main = self.main.forward(tape, store, x)?;
        let gate = self.gate.forward(tape, store, x)?.sigmoid()?;
        self.out.forward(tape, store, main.mul(gate)?)?.add(x)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub channels: usize,
    pub layers: usize,
    pub home: HomeStageConfig,
    pub ssm: SsmConfig,
    pub norm: NormKind,
}

#[derive(Clone, Debug)]
pub struct BlockLayer {
    pub gsc: Gsc,
    pub norm1: Norm,
    pub mamba: MambaLayer,
    pub norm2: Norm,
    pub home: HomeLayer,
    pub proj: Linear,
}

impl BlockLayer {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: &BlockConfig) -> Self {
        let c = cfg.channels;
        BlockLayer {
            gsc: Gsc::new(store, &format!("{prefix}.gsc"), c),
            norm1: Norm::new(store, &format!("{prefix}.norm1"), c, cfg.norm),
            mamba: MambaLayer::new(store, &format!("{prefix}.mamba"), c, cfg.ssm),
            norm2: Norm::new(store, &format!("{prefix}.norm2"), c, cfg.norm),
            home: HomeLayer::new(store, &format!("{prefix}.home"), cfg.home),
            proj: Linear::new(store, &format!("{prefix}.proj"), c, c),
        }
    }

    pub fn param_count(cfg: &BlockConfig) -> usize {
        let c = cfg.channels;
        Gsc::param_count(c)
            + 2 * Norm::param_count(c, cfg.norm)
            + MambaLayer::param_count(c, cfg.ssm)
            + HomeLayer::param_count(&cfg.home)
            + Linear::param_count(c, c)
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Result<Var<'t>> {
        let s = x.shape();
        let x_hat = volume_to_tokens(self.gsc.forward(tape, store, x)?)?;
        let m = self.mamba.forward(tape, store, self.norm1.forward(tape, store, x_hat)?)?;
        let x_tilde = m.add(x_hat)?;
        let h = self.home.forward(tape, store, self.norm2.forward(tape, store, x_tilde)?, None)?;
        let out = self.proj.forward(tape, store, h)?.add(x_tilde)?;
        tokens_to_volume(out, [s[2], s[3], s[4]])
    }

    /// Zeroes the last projection of every residual branch, turning the
    /// layer into the identity map.
    pub fn zero_branches(&self, store: &mut ParamStore) -> Result<()> {
        let ids = [
            self.gsc.out.weight,
            self.gsc.out.bias,
            self.mamba.out_proj.weight,
            self.mamba.out_proj.bias,
            self.proj.weight,
            self.proj.bias,
        ];
        for id in ids {
            let shape = store.shape(id).to_vec();
            store.set(id, Tensor::zeros(shape))?;
        }
        Ok(())
    }
}

/// `layers` stacked [`BlockLayer`]s sharing one stage configuration.
#[derive(Clone, Debug)]
pub struct MambaHomeBlock {
    pub cfg: BlockConfig,
    pub layers: Vec<BlockLayer>,
}

impl MambaHomeBlock {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: BlockConfig) -> Self {
        MambaHomeBlock {
            cfg,
            layers: (0..cfg.layers)
                .map(|l| BlockLayer::new(store, &format!("{prefix}.layer{l}"), &cfg))
                .collect(),
        }
    }

    pub fn param_count(cfg: &BlockConfig) -> usize {
        cfg.layers * BlockLayer::param_count(cfg)
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Result<Var<'t>> {
        let s = x.shape();
        if s.len() != 5 || s[1] != self.cfg.channels {
            return Err(Error::shape("block", &s, &[self.cfg.channels]));
        }
        self.layers.iter().try_fold(x, |h, layer| layer.forward(tape, store, h))
    }

    pub fn zero_branches(&self, store: &mut ParamStore) -> Result<()> {
        self.layers.iter().try_for_each(|l| l.zero_branches(store))
    }
}
