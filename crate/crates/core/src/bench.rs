//! Wall-clock sweeps behind the scaling checks, the CLI `bench` command and
//! the criterion suite.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::home::{assignment_flops, expert_flops, global_assignment_flops, HomeLayer, HomeStageConfig};
use crate::network::{Network, NetworkConfig};
use crate::nn::{Norm, NormKind};
use crate::params::ParamStore;
use crate::ssm::{scan, ScanDims, ScanMode};
use crate::tensor::{Tape, Tensor};

/// Median wall time of `reps` calls to `f`, after one warm-up call.
pub fn median_ms<T>(reps: usize, mut f: impl FnMut() -> T) -> f64 {
    std::hint::black_box(f());
    let mut times: Vec<f64> = (0..reps.max(1))
        .map(|_| {
            let start = Instant::now();
            std::hint::black_box(f());
            start.elapsed().as_secs_f64() * 1e3
        })
        .collect();
    times.sort_by(f64::total_cmp);
    times[times.len() / 2]
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::Contract("slope fit needs at least two paired points".into()));
    }
    if xs.iter().chain(ys).any(|&v| !(v > 0.0) || !v.is_finite()) {
        return Err(Error::Contract("slope fit needs positive finite values".into()));
    }
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return Err(Error::Contract("slope fit needs distinct x values".into()));
    }
    Ok(sxy / sxx)
}

/// `2^lo, 2^(lo+1), …, 2^hi`.
pub fn powers_of_two(lo: u32, hi: u32) -> Vec<usize> {
    (lo..=hi).map(|p| 1usize << p).collect()
}

/// HoME layer shape used by the routing sweep.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RoutingBench {
    pub dim: usize,
    pub experts: usize,
    pub slots: usize,
    pub group: usize,
    pub batch: usize,
}

impl Default for RoutingBench {
    fn default() -> Self {
        RoutingBench {
            dim: 32,
            experts: 4,
            slots: 4,
            group: 256,
            batch: 1,
        }
    }
}

impl RoutingBench {
    fn stage(&self, group: usize, slots: usize) -> HomeStageConfig {
        HomeStageConfig::new(1, group, self.experts, 2 * self.experts, slots, self.dim)
    }
}

/// One row of the routing sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingRow {
    pub n: usize,
    pub k: usize,
    pub e: usize,
    pub s: usize,
    pub wall_ms: f64,
    /// Assignment plus expert multiply-adds of grouped routing.
    pub est_flops: u64,
    pub assign_flops: u64,
    /// Assignment cost of one global group with the same total slot count.
    pub global_assign_flops: u64,
    /// Wall time of that global layer, measured only up to the sweep's cap.
    pub global_ms: Option<f64>,
}

fn home_forward_ms(cfg: HomeStageConfig, batch: usize, n: usize, reps: usize, seed: u64) -> Result<f64> {
    let mut store = ParamStore::new(seed);
    let layer = HomeLayer::new(&mut store, "bench", cfg);
    let x = Tensor::uniform([batch, n, cfg.dim], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
    layer.forward(&Tape::inference(), &store, Tape::inference().constant(x.clone()), None)?;
    Ok(median_ms(reps, || {
        let tape = Tape::inference();
        let xv = tape.constant(x.clone());
        layer.forward(&tape, &store, xv, None).map(|_| ())
    }))
}

/// Times grouped HoME routing at fixed group size over `ns`, alongside a
/// global (single group, equal slot capacity) layer for `n <= global_cap`.
pub fn routing_sweep(cfg: &RoutingBench, ns: &[usize], global_cap: usize, reps: usize, seed: u64) -> Result<Vec<RoutingRow>> {
    let m = cfg.experts * cfg.slots;
    let grouped = cfg.stage(cfg.group, cfg.slots);
    // All grouped timings precede the global ones.
    let walls = ns
        .iter()
        .map(|&n| home_forward_ms(grouped, cfg.batch, n, reps, seed))
        .collect::<Result<Vec<_>>>()?;
    ns.iter()
        .zip(walls)
        .map(|(&n, wall_ms)| {
            let groups = n.div_ceil(cfg.group);
            let global_ms = if n <= global_cap {
                Some(home_forward_ms(cfg.stage(groups * cfg.group, groups * cfg.slots), cfg.batch, n, reps, seed)?)
            } else {
                None
            };
            let assign = assignment_flops(n, cfg.group, m, cfg.dim);
            Ok(RoutingRow {
                n,
                k: cfg.group,
                e: cfg.experts,
                s: cfg.slots,
                wall_ms,
                est_flops: cfg.batch as u64 * (assign + expert_flops(n, &grouped)),
                assign_flops: assign,
                global_assign_flops: global_assignment_flops(n, cfg.group, m, cfg.dim),
                global_ms,
            })
        })
        .collect()
}

/// Wall time of the raw selective scan over `ns` for both scan modes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanRow {
    pub n: usize,
    pub sequential_ms: f64,
    pub chunked_ms: f64,
}

pub fn scan_sweep(channels: usize, state: usize, ns: &[usize], reps: usize, seed: u64) -> Vec<ScanRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ns.iter()
        .map(|&n| {
            let dims = ScanDims {
                batch: 1,
                len: n,
                channels,
                state,
            };
            let len = channels * n * state;
            let decay = Tensor::uniform([len], 0.5, 0.99, &mut rng).into_data();
            let drive = Tensor::uniform([len], -1.0, 1.0, &mut rng).into_data();
            let readout = Tensor::uniform([n * state], -1.0, 1.0, &mut rng).into_data();
            let time = |mode| median_ms(reps, || scan(&decay, &drive, &readout, dims, mode));
            ScanRow {
                n,
                sequential_ms: time(ScanMode::Sequential),
                chunked_ms: time(ScanMode::default()),
            }
        })
        .collect()
}

/// Near-cubic extents with `D·H·W = n`, each a multiple of `divisor`.
/// `n` and `divisor` must be powers of two with `n >= divisor³`.
pub fn volume_for(n: usize, divisor: usize) -> Result<[usize; 3]> {
    if !n.is_power_of_two() || !divisor.is_power_of_two() || n < divisor.pow(3) {
        return Err(Error::Config(format!(
            "cannot shape {n} voxels into extents divisible by {divisor}"
        )));
    }
    let mut dims = [divisor; 3];
    let mut axis = 2;
    while dims.iter().product::<usize>() < n {
        dims[axis] *= 2;
        axis = if axis == 0 { 2 } else { axis - 1 };
    }
    Ok(dims)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkRow {
    pub n: usize,
    pub dims: [usize; 3],
    pub wall_ms: f64,
}

/// Forward wall time of `cfg` on single-channel volumes of `ns` voxels.
pub fn network_sweep(cfg: &NetworkConfig, ns: &[usize], reps: usize, seed: u64) -> Result<Vec<NetworkRow>> {
    let mut store = ParamStore::new(seed);
    let net = Network::new(&mut store, cfg.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ns.iter()
        .map(|&n| {
            let dims = volume_for(n, cfg.divisor())?;
            let x = Tensor::uniform([1, cfg.in_channels, dims[0], dims[1], dims[2]], 0.0, 1.0, &mut rng);
            net.forward(&Tape::inference(), &store, Tape::inference().constant(x.clone()))?;
            let wall_ms = median_ms(reps, || {
                let tape = Tape::inference();
                let xv = tape.constant(x.clone());
                net.forward(&tape, &store, xv).map(|_| ())
            });
            Ok(NetworkRow { n, dims, wall_ms })
        })
        .collect()
}

/// Paired DyT and LayerNorm forward times at one size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormRow {
    pub n: usize,
    pub dyt_ms: f64,
    pub ln_ms: f64,
}

fn interleaved(reps: usize, mut a: impl FnMut() -> f64, mut b: impl FnMut() -> f64) -> (f64, f64) {
    let (mut ta, mut tb) = (f64::INFINITY, f64::INFINITY);
    for rep in 0..reps.max(1) {
        if rep % 2 == 0 {
            ta = ta.min(a());
            tb = tb.min(b());
        } else {
            tb = tb.min(b());
            ta = ta.min(a());
        }
    }
    (ta, tb)
}

/// Normalisation layers alone on `[1, n, dim]` tokens, measured alternately.
pub fn norm_sweep(dim: usize, ns: &[usize], reps: usize, seed: u64) -> Vec<NormRow> {
    let mut store = ParamStore::new(seed);
    let dyt = Norm::new(&mut store, "dyt", dim, NormKind::DyT);
    let ln = Norm::new(&mut store, "ln", dim, NormKind::LayerNorm);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ns.iter()
        .map(|&n| {
            let x = Tensor::uniform([1, n, dim], -2.0, 2.0, &mut rng);
            let time = |norm: &Norm| {
                median_ms(1, || {
                    let tape = Tape::inference();
                    let xv = tape.constant(x.clone());
                    norm.forward(&tape, &store, xv).map(|_| ())
                })
            };
            let (dyt_ms, ln_ms) = interleaved(reps, || time(&dyt), || time(&ln));
            NormRow { n, dyt_ms, ln_ms }
        })
        .collect()
}

/// Whole-network forward with the encoder norm switched between DyT and
/// LayerNorm, measured alternately in both orders; each side keeps its best time.
pub fn network_norm_sweep(base: &NetworkConfig, ns: &[usize], reps: usize, seed: u64) -> Result<Vec<NormRow>> {
    let build = |norm| -> Result<(ParamStore, Network)> {
        let mut store = ParamStore::new(seed);
        let net = Network::new(&mut store, NetworkConfig { norm, ..base.clone() })?;
        Ok((store, net))
    };
    let (dyt_store, dyt) = build(NormKind::DyT)?;
    let (ln_store, ln) = build(NormKind::LayerNorm)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ns.iter()
        .map(|&n| {
            let dims = volume_for(n, base.divisor())?;
            let x = Tensor::uniform([1, base.in_channels, dims[0], dims[1], dims[2]], 0.0, 1.0, &mut rng);
            let time = |net: &Network, store: &ParamStore| {
                median_ms(1, || {
                    let tape = Tape::inference();
                    let xv = tape.constant(x.clone());
                    net.forward(&tape, store, xv).map(|_| ())
                })
            };
            let (dyt_ms, ln_ms) = interleaved(reps, || time(&dyt, &dyt_store), || time(&ln, &ln_store));
            Ok(NormRow { n, dyt_ms, ln_ms })
        })
        .collect()
}
