use std::path::{Path, PathBuf};

use mamba_home::bench::RoutingBench;
use mamba_home::network::NetworkConfig;
use mamba_home::train::TrainConfig;
use serde::Deserialize;

use crate::CliError;

pub const SEED_ENV: &str = "MAMBA_HOME_SEED";
pub const THREADS_ENV: &str = "MAMBA_HOME_THREADS";

/// Synthetic volumes used by `train`, `eval` and `synth`.
#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Training volumes.
    pub volumes: usize,
    /// Held-out volumes for `eval`.
    pub held_out: usize,
    pub extent: [usize; 3],
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            volumes: 4,
            held_out: 2,
            extent: [32, 32, 32],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub min_log2: u32,
    pub max_log2: u32,
    /// Largest N at which the global layer is also timed.
    pub global_cap: usize,
    pub reps: usize,
    /// HoME layer timed at each N.
    pub layer: RoutingBench,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            min_log2: 10,
            max_log2: 16,
            global_cap: 1 << 13,
            reps: 3,
            layer: RoutingBench::default(),
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Worker threads; 0 lets rayon decide.
    pub threads: usize,
    pub precision: String,
    /// Base network; fields under `[network]` override it.
    pub preset: String,
    pub network: Option<toml::Table>,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub bench: BenchConfig,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            threads: 0,
            precision: "f64".into(),
            preset: "desk".into(),
            network: None,
            train: TrainConfig::default(),
            data: DataConfig::default(),
            bench: BenchConfig::default(),
            out_dir: PathBuf::from("runs"),
        }
    }
}

/// Values given on the command line, applied last.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub preset: Option<String>,
    pub out_dir: Option<PathBuf>,
}

fn env_number<T: std::str::FromStr>(name: &str) -> Result<Option<T>, CliError> {
    match std::env::var(name) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| CliError::Validation(format!("{name}={v:?} is not a non-negative integer"))),
        Err(_) => Ok(None),
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Validation(format!("config: {e}")))
    }

    /// File (or defaults), then environment, then command-line overrides;
    /// the result is validated before it is returned.
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<Self, CliError> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Validation(format!("cannot read config {}: {e}", p.display())))?;
                Self::parse(&text)?
            }
            None => RunConfig::default(),
        };
        if let Some(seed) = env_number(SEED_ENV)? {
            cfg.seed = seed;
        }
        if let Some(threads) = env_number(THREADS_ENV)? {
            cfg.threads = threads;
        }
        if let Some(seed) = overrides.seed {
            cfg.seed = seed;
        }
        if let Some(threads) = overrides.threads {
            cfg.threads = threads;
        }
        if let Some(preset) = &overrides.preset {
            cfg.preset = preset.clone();
        }
        if let Some(dir) = &overrides.out_dir {
            cfg.out_dir = dir.clone();
        }
        cfg.train.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn network_config(&self) -> Result<NetworkConfig, CliError> {
        let base = NetworkConfig::preset(&self.preset)?;
        let Some(overrides) = &self.network else {
            return Ok(base);
        };
        let mut value = toml::Value::try_from(&base).map_err(|e| CliError::Runtime(e.to_string()))?;
        let table = value.as_table_mut().expect("config serializes to a table");
        for (k, v) in overrides {
            table.insert(k.clone(), v.clone());
        }
        value
            .try_into()
            .map_err(|e| CliError::Validation(format!("config [network]: {e}")))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.precision != "f64" {
            return Err(CliError::Validation(format!(
                "precision {:?} is not supported; only \"f64\" is",
                self.precision
            )));
        }
        let net = self.network_config()?;
        net.validate()?;
        self.train.validate()?;
        if self.data.volumes == 0 || self.data.held_out == 0 {
            return Err(CliError::Validation("[data] volumes and held_out must be positive".into()));
        }
        let div = net.divisor();
        if self.data.extent.iter().any(|&e| e == 0 || e % div != 0) {
            return Err(CliError::Validation(format!(
                "[data] extent {:?} must be positive multiples of {div} for this network",
                self.data.extent
            )));
        }
        let b = &self.bench;
        if b.min_log2 > b.max_log2 || b.max_log2 > 24 || b.reps == 0 {
            return Err(CliError::Validation("[bench] needs min_log2 <= max_log2 <= 24 and reps >= 1".into()));
        }
        let l = &b.layer;
        if [l.dim, l.experts, l.slots, l.group, l.batch].contains(&0) {
            return Err(CliError::Validation("[bench] layer sizes must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_the_default() {
        let cfg = RunConfig::parse("").unwrap();
        assert_eq!(cfg.preset, "desk");
        assert_eq!(cfg.network_config().unwrap(), NetworkConfig::desk());
        cfg.validate().unwrap();
    }

    #[test]
    fn network_table_overrides_the_preset() {
        let cfg = RunConfig::parse("preset = \"tiny\"\n[network]\nclasses = 2\nnorm = \"layernorm\"\n").unwrap();
        let net = cfg.network_config().unwrap();
        assert_eq!(net.classes, 2);
        assert_eq!(net.experts, NetworkConfig::tiny().experts);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::parse("sed = 1").is_err());
        assert!(RunConfig::parse("[train]\nlearning_rate = 1.0").is_err());
        assert!(RunConfig::parse("[bench.layer]\nwidth = 3").is_err());
        let cfg = RunConfig::parse("[network]\nexpert = [1]").unwrap();
        assert!(matches!(cfg.network_config(), Err(CliError::Validation(_))));
    }

    #[test]
    fn invalid_values_fail_validation() {
        for text in [
            "precision = \"f32\"",
            "[data]\nextent = [30, 32, 32]",
            "[train]\nlr = -1.0",
            "[network]\nexperts = [4, 3, 2, 1]",
            "[bench]\nmin_log2 = 12\nmax_log2 = 10",
        ] {
            let cfg = RunConfig::parse(text).unwrap();
            assert!(matches!(cfg.validate(), Err(CliError::Validation(_))), "{text}");
        }
    }
}
