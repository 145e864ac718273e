use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Activation;

/// Default ratio between consecutive stage group sizes.
pub const DEFAULT_RHO: f64 = 0.5;

/// Routing hyperparameters of one encoder stage.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HomeStageConfig {
    /// 1-based stage index.
    pub stage: usize,
    /// Tokens per group `K`.
    pub group: usize,
    /// First-level experts `E`.
    pub experts: usize,
    /// Second-level experts `E2`.
    pub experts2: usize,
    /// Slots per first-level expert `S`.
    pub slots: usize,
    /// Token width `d`.
    pub dim: usize,
    /// Hidden width multiplier of every expert FFN.
    pub ffn_ratio: usize,
    pub activation: Activation,
}

impl HomeStageConfig {
    pub fn new(stage: usize, group: usize, experts: usize, experts2: usize, slots: usize, dim: usize) -> Self {
        HomeStageConfig {
            stage,
            group,
            experts,
            experts2,
            slots,
            dim,
            ffn_ratio: 2,
            activation: Activation::Gelu,
        }
    }

    /// Total slots per group, `M = E·S`.
    pub fn slot_count(&self) -> usize {
        self.experts * self.slots
    }

    pub fn groups(&self, tokens: usize) -> usize {
        tokens.div_ceil(self.group)
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("group", self.group),
            ("experts", self.experts),
            ("experts2", self.experts2),
            ("slots", self.slots),
            ("dim", self.dim),
            ("ffn_ratio", self.ffn_ratio),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::Config(format!("stage {}: {name} must be at least 1", self.stage)));
            }
        }
        Ok(())
    }
}

/// `K_t = K_1·ρ^(t−1)` for `t = 1..=stages`, rounded to the nearest integer.
pub fn group_schedule(k1: usize, rho: f64, stages: usize) -> Result<Vec<usize>> {
    if !(rho > 0.0 && rho < 1.0) {
        return Err(Error::Config(format!("group ratio must lie in (0, 1), got {rho}")));
    }
    let ks: Vec<usize> = (0..stages)
        .map(|t| (k1 as f64 * rho.powi(t as i32)).round() as usize)
        .collect();
    if ks.iter().any(|&k| k == 0) {
        return Err(Error::Config(format!(
            "group schedule from K1={k1}, rho={rho} reaches zero within {stages} stages"
        )));
    }
    if ks.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::Config(format!(
            "group schedule {ks:?} is not strictly decreasing; increase K1"
        )));
    }
    Ok(ks)
}

/// Cross-stage invariants: experts strictly increase and group sizes
/// strictly decrease with depth.
pub fn validate_stages(stages: &[HomeStageConfig]) -> Result<()> {
    for s in stages {
        s.validate()?;
    }
    for w in stages.windows(2) {
        if w[1].experts <= w[0].experts {
            return Err(Error::Config(format!(
                "experts must increase with depth: stage {} has {}, stage {} has {}",
                w[0].stage, w[0].experts, w[1].stage, w[1].experts
            )));
        }
        if w[1].group >= w[0].group {
            return Err(Error::Config(format!(
                "group size must decrease with depth: stage {} has {}, stage {} has {}",
                w[0].stage, w[0].group, w[1].stage, w[1].group
            )));
        }
    }
    Ok(())
}
