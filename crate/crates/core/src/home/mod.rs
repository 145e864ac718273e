//! Hierarchical soft mixture-of-experts layer.
//!
//! Tokens `[B, N, d]` are cut into `G = ⌈N/K⌉` contiguous groups of `K`
//! (zero-padded to `N' = G·K`). Within a group every token is softly
//! dispatched over `M = E·S` learned slots, the slots go through a dense
//! group-level mixture of `E` experts, then a per-slot mixture of `E2`
//! experts, and finally each token reads back a convex combination of its
//! group's slot outputs using the same dispatch weights.

mod config;

pub use config::{group_schedule, validate_stages, HomeStageConfig, DEFAULT_RHO};

use crate::error::{Error, Result};
use crate::nn::{ExpertFfn, Linear, RouterMlp};
use crate::params::{Init, ParamId, ParamStore};
use crate::tensor::{Tape, Var};

/// Parameters of one HoME stage.
#[derive(Clone, Debug)]
pub struct HomeLayer {
    pub cfg: HomeStageConfig,
    /// Slot embeddings `[E, S, d]`.
    pub slots: ParamId,
    pub router1: RouterMlp,
    pub experts1: Vec<ExpertFfn>,
    pub router2: RouterMlp,
    pub experts2: Vec<ExpertFfn>,
}

/// Output of [`group_and_pad`].
pub struct Grouped<'t> {
    /// `[B, G, K, d]`
    pub tokens: Var<'t>,
    /// Validity of the `B·N'` padded positions.
    pub mask: Vec<bool>,
    pub len: usize,
}

/// Output of [`slot_assign`].
pub struct Assigned<'t> {
    /// Slot inputs `[B, G, M, d]` (`M = E·S`, slot index `e·S + s`).
    pub slots: Var<'t>,
    /// Dispatch weights `[B, G, K, M]`.
    pub dispatch: Var<'t>,
}

impl HomeLayer {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: HomeStageConfig) -> Self {
        let HomeStageConfig {
            dim: d,
            experts,
            experts2,
            slots,
            ffn_ratio,
            activation,
            ..
        } = cfg;
        let slot_bound = 1.0 / (d as f64).sqrt();
        HomeLayer {
            cfg,
            slots: store.register(format!("{prefix}.slots"), [experts, slots, d], Init::Uniform(slot_bound)),
            router1: RouterMlp::new(store, &format!("{prefix}.router1"), d, experts),
            experts1: (0..experts)
                .map(|e| ExpertFfn::new(store, &format!("{prefix}.expert1.{e}"), d, ffn_ratio, activation))
                .collect(),
            router2: RouterMlp::new(store, &format!("{prefix}.router2"), d, experts2),
            experts2: (0..experts2)
                .map(|e| ExpertFfn::new(store, &format!("{prefix}.expert2.{e}"), d, ffn_ratio, activation))
                .collect(),
        }
    }

    pub fn param_count(cfg: &HomeStageConfig) -> usize {
        let d = cfg.dim;
        cfg.experts * cfg.slots * d
            + Linear::param_count(d, cfg.experts)
            + Linear::param_count(d, cfg.experts2)
            + (cfg.experts + cfg.experts2) * ExpertFfn::param_count(d, cfg.ffn_ratio)
    }

    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        x: Var<'t>,
        mask: Option<&[bool]>,
    ) -> Result<Var<'t>> {
        home_forward(tape, store, self, x, mask)
    }
}

/// Splits `x: [B, N, d]` into `⌈N/K⌉` groups of `K` tokens.
///
/// Padding positions and positions whose `mask` entry is false carry zeros
/// (no gradient flows to masked inputs).
pub fn group_and_pad<'t>(x: Var<'t>, mask: Option<&[bool]>, k: usize) -> Result<Grouped<'t>> {
    let shape = x.shape();
    if shape.len() != 3 {
        return Err(Error::shape("group_and_pad", &shape, &[3]));
    }
    let (b, n, d) = (shape[0], shape[1], shape[2]);
    if n == 0 {
        return Err(Error::EmptySequence);
    }
    if k == 0 {
        return Err(Error::Config("group size must be at least 1".into()));
    }
    let mut x = x;
    let valid: Vec<bool> = match mask {
        Some(m) if m.len() != b * n => return Err(Error::shape("group_and_pad mask", &shape, &[m.len()])),
        Some(m) => {
            if m.iter().any(|&v| !v) {
                x = x.fill_rows(m, 0.0)?;
            }
            m.to_vec()
        }
        None => vec![true; b * n],
    };
    let g = n.div_ceil(k);
    let padded = g * k;
    if padded > n {
        x = x.pad(1, 0, padded - n)?;
    }
    let mut full = Vec::with_capacity(b * padded);
    for bi in 0..b {
        full.extend_from_slice(&valid[bi * n..(bi + 1) * n]);
        full.extend(std::iter::repeat_n(false, padded - n));
    }
    Ok(Grouped {
        tokens: x.reshape([b, g, k, d])?,
        mask: full,
        len: n,
    })
}

/// Inverse of [`group_and_pad`] on valid positions: `[B, G, K, d] → [B, N, d]`.
pub fn ungroup(x: Var<'_>, len: usize) -> Result<Var<'_>> {
    let s = x.shape();
    if s.len() != 4 || s[1] * s[2] < len {
        return Err(Error::shape("ungroup", &s, &[len]));
    }
    let y = x.reshape([s[0], s[1] * s[2], s[3]])?;
    if s[1] * s[2] == len {
        Ok(y)
    } else {
        y.slice(1, 0, len)
    }
}

/// Token-to-slot dispatch: masked softmax over the `M` slots of each token,
/// then every slot accumulates `Σ_k A[k, m]·x̂[k]` over its group.
///
/// Tokens with no valid entry get an all-zero dispatch row.
pub fn slot_assign<'t>(
    tape: &'t Tape,
    store: &ParamStore,
    layer: &HomeLayer,
    grouped: &Grouped<'t>,
) -> Result<Assigned<'t>> {
    let HomeStageConfig { experts, slots, dim, .. } = layer.cfg;
    let m = experts * slots;
    let bank = tape.param(store, layer.slots).reshape([m, dim])?.transpose(0, 1)?;
    let mut logits = grouped.tokens.matmul(bank)?;
    if grouped.mask.iter().any(|&v| !v) {
        logits = logits.fill_rows(&grouped.mask, f64::NEG_INFINITY)?;
    }
    let dispatch = logits.softmax_or_zero(3)?;
    let slots = dispatch.transpose(2, 3)?.matmul(grouped.tokens)?;
    Ok(Assigned { slots, dispatch })
}

/// Group-level mixture: one router decision per group from the mean slot,
/// applied to every expert's output on the group's slots.
pub fn level1_route<'t>(tape: &'t Tape, store: &ParamStore, layer: &HomeLayer, slots: Var<'t>) -> Result<Var<'t>> {
    let s = slots.shape();
    let (b, g, m, d) = (s[0], s[1], s[2], s[3]);
    let e = layer.experts1.len();
    let pooled = slots.mean_axis(2)?;
    let p = layer.router1.probs(tape, store, pooled)?.reshape([b, g, 1, e])?;
    let outs = layer
        .experts1
        .iter()
        .map(|f| f.forward(tape, store, slots)?.reshape([b, g, 1, m * d]))
        .collect::<Result<Vec<_>>>()?;
    let stacked = Var::concat(&outs, 2)?;
    p.matmul(stacked)?.reshape([b, g, m, d])
}

/// Slot-level mixture over `ỹ: [B, P, d]` with one router decision per
/// position.
pub fn level2_route<'t>(tape: &'t Tape, store: &ParamStore, layer: &HomeLayer, y: Var<'t>) -> Result<Var<'t>> {
    let s = y.shape();
    let (b, p_len, d) = (s[0], s[1], s[2]);
    let e2 = layer.experts2.len();
    let p = layer.router2.probs(tape, store, y)?.reshape([b, p_len, 1, e2])?;
    let outs = layer
        .experts2
        .iter()
        .map(|f| f.forward(tape, store, y)?.reshape([b, p_len, 1, d]))
        .collect::<Result<Vec<_>>>()?;
    let stacked = Var::concat(&outs, 2)?;
    p.matmul(stacked)?.reshape([b, p_len, d])
}

/// Reads slot outputs `[B, G, M, d]` back to tokens with the dispatch
/// weights `[B, G, K, M]` and drops padding, giving `[B, len, d]`.
pub fn combine<'t>(slot_out: Var<'t>, dispatch: Var<'t>, len: usize) -> Result<Var<'t>> {
    let ds = dispatch.shape();
    let ys = slot_out.shape();
    if ds.len() != 4 || ys.len() != 4 || ds[..2] != ys[..2] || ds[3] != ys[2] {
        return Err(Error::shape("combine", &ys, &ds));
    }
    if len > ds[1] * ds[2] || len + ds[2] <= ds[1] * ds[2] {
        return Err(Error::Contract(format!(
            "combine: length {len} inconsistent with {} groups of {}",
            ds[1], ds[2]
        )));
    }
    ungroup(dispatch.matmul(slot_out)?, len)
}

/// Full layer: group, dispatch, two routing levels, combine.
pub fn home_forward<'t>(
    tape: &'t Tape,
    store: &ParamStore,
    layer: &HomeLayer,
    x: Var<'t>,
    mask: Option<&[bool]>,
) -> Result<Var<'t>> {
    let shape = x.shape();
    if shape.len() != 3 || shape[2] != layer.cfg.dim {
        return Err(Error::shape("home_forward", &shape, &[layer.cfg.dim]));
    }
    let grouped = group_and_pad(x, mask, layer.cfg.group)?;
    let assigned = slot_assign(tape, store, layer, &grouped)?;
    let s = assigned.slots.shape();
    let y1 = level1_route(tape, store, layer, assigned.slots)?;
    let y2 = level2_route(tape, store, layer, y1.reshape([s[0], s[1] * s[2], s[3]])?)?;
    combine(y2.reshape(s)?, assigned.dispatch, grouped.len)
}

/// Multiply-adds of dispatch logits, slot aggregation and combine for
/// grouped routing of `n` tokens: `3·G·K·M·d`.
pub fn assignment_flops(n: usize, k: usize, m: usize, d: usize) -> u64 {
    let g = n.div_ceil(k) as u64;
    3 * g * k as u64 * m as u64 * d as u64
}

/// The same quantity for one global group holding all `G·M` slots of the
/// grouped layout (equal slot capacity).
pub fn global_assignment_flops(n: usize, k: usize, m: usize, d: usize) -> u64 {
    let g = n.div_ceil(k) as u64;
    3 * (g * k as u64) * (g * m as u64) * d as u64
}

/// Multiply-adds of both expert levels: every expert sees all `G·M` slots.
pub fn expert_flops(n: usize, cfg: &HomeStageConfig) -> u64 {
    let g = n.div_ceil(cfg.group) as u64;
    let m = (cfg.experts * cfg.slots) as u64;
    let d = cfg.dim as u64;
    let hidden = (cfg.ffn_ratio * cfg.dim).max(1) as u64;
    let per_slot = 2 * d * hidden;
    let routers = g * d * cfg.experts as u64 + g * m * d * cfg.experts2 as u64;
    g * m * (cfg.experts + cfg.experts2) as u64 * per_slot + routers
}
