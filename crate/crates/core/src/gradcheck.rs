//! Central finite-difference gradient checks.
//!
//! Relative error per coordinate is `|a − n| / max(|a|, |n|, floor)`, where
//! `a` is the tape gradient and `n = (f(θ+h) − f(θ−h)) / 2h`. The floor keeps
//! coordinates whose true gradient is ~0 from turning round-off into a large
//! ratio.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug)]
pub struct GradcheckConfig {
    pub step: f64,
    pub tolerance: f64,
    pub floor: f64,
    /// Check at most this many coordinates, sampled uniformly without
    /// replacement over all selected parameters. `None` checks all.
    pub sample: Option<usize>,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-3,
            sample: None,
            seed: 0,
        }
    }
}

impl GradcheckConfig {
    pub fn with_tolerance(mut self, tolerance: f64) -> Self {
        self.tolerance = tolerance;
        self
    }

    pub fn with_sample(mut self, count: usize, seed: u64) -> Self {
        self.sample = Some(count);
        self.seed = seed;
        self
    }
}

#[derive(Clone, Debug)]
pub struct Probe {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub probes: Vec<Probe>,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.probes.iter().map(|p| p.rel_err).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&Probe> {
        self.probes
            .iter()
            .max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }

    pub fn passed(&self) -> bool {
        !self.probes.is_empty() && self.probes.iter().all(|p| p.rel_err < self.tolerance)
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(floor);
    (analytic - numeric).abs() / scale
}

fn pick(total: usize, cfg: &GradcheckConfig) -> Vec<usize> {
    match cfg.sample {
        Some(k) if k < total => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let mut picked = index::sample(&mut rng, total, k).into_vec();
            picked.sort_unstable();
            picked
        }
        _ => (0..total).collect(),
    }
}

fn scalar_loss(v: Var<'_>) -> Result<f64> {
    let value = v.value();
    if value.len() != 1 {
        return Err(Error::Contract(format!(
            "gradcheck loss must be scalar, got shape {:?}",
            value.shape()
        )));
    }
    Ok(value.data()[0])
}

/// Checks d loss / d θ for the parameters in `ids` (all parameters when
/// `ids` is empty). Parameter values are restored afterwards.
pub fn check_params<F>(
    store: &mut ParamStore,
    ids: &[ParamId],
    cfg: &GradcheckConfig,
    loss: F,
) -> Result<GradcheckReport>
where
    F: for<'t> Fn(&'t Tape, &ParamStore) -> Result<Var<'t>>,
{
    let ids: Vec<ParamId> = if ids.is_empty() { store.ids().collect() } else { ids.to_vec() };
    let tape = Tape::new();
    let out = loss(&tape, store)?;
    let grads = tape.backward(out)?;
    let mut coords = Vec::new();
    for &id in &ids {
        for i in 0..store.numel(id) {
            coords.push((id, i));
        }
    }
    let mut probes = Vec::new();
    for c in pick(coords.len(), cfg) {
        let (id, i) = coords[c];
        let analytic = grads.param(id).map_or(0.0, |g| g.data()[i]);
        let original = store.get(id).data()[i];
        let eval = |store: &mut ParamStore, v: f64| -> Result<f64> {
            store.get_mut(id).data_mut()[i] = v;
            let tape = Tape::inference();
            scalar_loss(loss(&tape, store)?)
        };
        let plus = eval(store, original + cfg.step);
        let minus = eval(store, original - cfg.step);
        store.get_mut(id).data_mut()[i] = original;
        let numeric = (plus? - minus?) / (2.0 * cfg.step);
        probes.push(Probe {
            name: store.name(id).to_string(),
            index: i,
            analytic,
            numeric,
            rel_err: relative_error(analytic, numeric, cfg.floor),
        });
    }
    Ok(GradcheckReport {
        probes,
        tolerance: cfg.tolerance,
    })
}

/// Checks the gradient of a scalar function of plain input tensors.
pub fn check_inputs<F>(inputs: &[Tensor], cfg: &GradcheckConfig, f: F) -> Result<GradcheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let out = f(&tape, &vars)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Option<Tensor>> = vars.iter().map(|v| grads.of(*v).cloned()).collect();

    let mut coords = Vec::new();
    for (k, x) in inputs.iter().enumerate() {
        for i in 0..x.len() {
            coords.push((k, i));
        }
    }
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut probes = Vec::new();
    for c in pick(coords.len(), cfg) {
        let (k, i) = coords[c];
        let original = work[k].data()[i];
        let mut eval = |v: f64| -> Result<f64> {
            work[k].data_mut()[i] = v;
            let tape = Tape::inference();
            let vars: Vec<Var> = work.iter().map(|x| tape.constant(x.clone())).collect();
            scalar_loss(f(&tape, &vars)?)
        };
        let plus = eval(original + cfg.step);
        let minus = eval(original - cfg.step);
        work[k].data_mut()[i] = original;
        let numeric = (plus? - minus?) / (2.0 * cfg.step);
        let a = analytic[k].as_ref().map_or(0.0, |g| g.data()[i]);
        probes.push(Probe {
            name: format!("input{k}"),
            index: i,
            analytic: a,
            numeric,
            rel_err: relative_error(a, numeric, cfg.floor),
        });
    }
    Ok(GradcheckReport {
        probes,
        tolerance: cfg.tolerance,
    })
}

/// Contracts an arbitrary output with fixed random weights so that every
/// output coordinate contributes to the checked scalar.
pub fn projection_loss<'t>(y: Var<'t>, seed: u64) -> Result<Var<'t>> {
    let shape = y.shape();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let w = Tensor::uniform(shape, -1.0, 1.0, &mut rng);
    y.mul(y.tape().constant(w))?.sum_all()
}

/// Modules covered by [`module_suite`], in run order.
pub const SUITE_MODULES: [&str; 5] = ["home", "gsc", "mamba", "block", "network"];

fn jitter(store: &mut ParamStore, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let noise = Tensor::uniform(store.shape(id).to_vec(), -0.2, 0.2, &mut rng);
        for (v, n) in store.get_mut(id).data_mut().iter_mut().zip(noise.data()) {
            *v += n;
        }
    }
}

/// Adds `Σθ²` as a constant, so finite differences see it and the tape
/// does not.
fn hidden_term<'t>(loss: Var<'t>, store: &ParamStore) -> Result<Var<'t>> {
    let total: f64 = store.ids().flat_map(|id| store.get(id).data().iter()).map(|v| v * v).sum();
    loss.add(loss.tape().constant(Tensor::full(loss.shape(), total)))
}

/// Finite-difference checks of each building block at tiny sizes, with
/// parameters jittered off their initial values. Naming a module in
/// `corrupt` hides part of its loss from the tape, which must make that
/// module fail.
pub fn module_suite(seed: u64, corrupt: Option<&str>) -> Result<Vec<(&'static str, GradcheckReport)>> {
    use crate::block::{BlockConfig, Gsc, MambaHomeBlock};
    use crate::home::{HomeLayer, HomeStageConfig};
    use crate::network::{Network, NetworkConfig};
    use crate::nn::NormKind;
    use crate::ssm::{MambaLayer, SsmConfig};
    use crate::train::{batch_loss, synth_volumes};

    if let Some(name) = corrupt {
        if !SUITE_MODULES.contains(&name) {
            return Err(Error::Config(format!("unknown module {name:?}, expected one of {SUITE_MODULES:?}")));
        }
    }
    let cfg = GradcheckConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut input = |shape: &[usize]| Tensor::uniform(shape.to_vec(), -1.0, 1.0, &mut rng);
    let mut reports = Vec::new();
    for name in SUITE_MODULES {
        let bad = corrupt == Some(name);
        let mut store = ParamStore::new(seed);
        let report = match name {
            "home" => {
                let layer = HomeLayer::new(&mut store, "home", HomeStageConfig::new(1, 4, 2, 4, 2, 4));
                jitter(&mut store, seed);
                let x = input(&[1, 6, 4]);
                check_params(&mut store, &[], &cfg, |tape, store| {
                    let loss = projection_loss(layer.forward(tape, store, tape.constant(x.clone()), None)?, seed)?;
                    if bad { hidden_term(loss, store) } else { Ok(loss) }
                })?
            }
            "gsc" => {
                let gsc = Gsc::new(&mut store, "gsc", 2);
                jitter(&mut store, seed);
                let x = input(&[1, 2, 3, 3, 3]);
                check_params(&mut store, &[], &cfg, |tape, store| {
                    let loss = projection_loss(gsc.forward(tape, store, tape.constant(x.clone()))?, seed)?;
                    if bad { hidden_term(loss, store) } else { Ok(loss) }
                })?
            }
            "mamba" => {
                let layer = MambaLayer::new(&mut store, "mamba", 4, SsmConfig { state: 3, expand: 1 });
                jitter(&mut store, seed);
                let x = input(&[1, 6, 4]);
                check_params(&mut store, &[], &cfg, |tape, store| {
                    let loss = projection_loss(layer.forward(tape, store, tape.constant(x.clone()))?, seed)?;
                    if bad { hidden_term(loss, store) } else { Ok(loss) }
                })?
            }
            "block" => {
                let block_cfg = BlockConfig {
                    channels: 4,
                    layers: 1,
                    home: HomeStageConfig::new(1, 4, 2, 4, 2, 4),
                    ssm: SsmConfig { state: 3, expand: 1 },
                    norm: NormKind::DyT,
                };
                let block = MambaHomeBlock::new(&mut store, "block", block_cfg);
                jitter(&mut store, seed);
                let x = input(&[1, 4, 2, 2, 2]);
                check_params(&mut store, &[], &cfg, |tape, store| {
                    let loss = projection_loss(block.forward(tape, store, tape.constant(x.clone()))?, seed)?;
                    if bad { hidden_term(loss, store) } else { Ok(loss) }
                })?
            }
            _ => {
                let net = Network::new(&mut store, NetworkConfig { classes: 2, ..NetworkConfig::tiny() })?;
                jitter(&mut store, seed);
                let data = synth_volumes(seed, 1, [8, 8, 8], 2)?;
                check_params(&mut store, &[], &cfg.clone().with_sample(50, seed), |tape, store| {
                    let loss = batch_loss(tape, &net, store, &[&data[0]])?.0;
                    if bad { hidden_term(loss, store) } else { Ok(loss) }
                })?
            }
        };
        reports.push((name, report));
    }
    Ok(reports)
}
