//! U-shaped encoder/decoder built from [`MambaHomeBlock`]s.
//!
//! ```text
//! F_1     = Stem(x)                              (stride-2 conv)
//! s_i     = Norm_i(Block_i(F_i))
//! F_{i+1} = Down_i(s_i)                          (channels ×2, extent /2)
//! d_T     = s_T
//! d_i     = UpBlock_i(s_i ⊕ Up_i(d_{i+1}))
//! logits  = Out(UpBlock_0(Skip(x) ⊕ Up_0(d_1)))  (full-resolution head)
//! ```

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::block::{BlockConfig, MambaHomeBlock};
use crate::error::{Error, Result};
use crate::home::{validate_stages, HomeStageConfig};
use crate::nn::{Activation, Conv3d, ConvTranspose3d, Norm, NormKind};
use crate::params::ParamStore;
use crate::ssm::SsmConfig;
use crate::tensor::{Conv3dSpec, Tape, Var};

/// Stem: kernel 3, stride 2, padding 1.
pub const STEM_KERNEL: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub in_channels: usize,
    pub classes: usize,
    /// Channels of the stem output and of stage 1; stage `t` has
    /// `stem_channels·2^(t−1)`.
    pub stem_channels: usize,
    /// First-level experts per stage; its length is the stage count `T`.
    pub experts: Vec<usize>,
    /// Second-level experts per stage; `2·experts` when absent.
    pub experts2: Option<Vec<usize>>,
    /// Group size `K_t` per stage.
    pub groups: Vec<usize>,
    /// Slots per expert, shared by all stages.
    pub slots: usize,
    /// Block layers per stage.
    pub layers: Vec<usize>,
    pub ffn_ratio: usize,
    pub ssm: SsmConfig,
    /// Normalisation inside the encoder blocks and after each stage.
    pub norm: NormKind,
    /// Normalisation of the decoder's conv stacks.
    pub decoder_norm: NormKind,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl NetworkConfig {
    /// CPU-sized default.
    pub fn desk() -> Self {
        NetworkConfig {
            in_channels: 1,
            classes: 3,
            stem_channels: 8,
            experts: vec![2, 3, 4, 5],
            experts2: None,
            groups: vec![64, 32, 16, 8],
            slots: 2,
            layers: vec![1, 1, 1, 1],
            ffn_ratio: 2,
            ssm: SsmConfig::default(),
            norm: NormKind::DyT,
            decoder_norm: NormKind::LayerNorm,
        }
    }

    /// Full-size configuration; used for shape and parameter accounting.
    pub fn paper() -> Self {
        NetworkConfig {
            in_channels: 1,
            classes: 3,
            stem_channels: 48,
            experts: vec![4, 8, 12, 16],
            experts2: None,
            groups: vec![2048, 1024, 512, 256],
            slots: 4,
            layers: vec![2, 2, 2, 2],
            ffn_ratio: 2,
            ssm: SsmConfig::default(),
            norm: NormKind::DyT,
            decoder_norm: NormKind::LayerNorm,
        }
    }

    /// Three-stage network small enough for gradient checks and quick
    /// training runs.
    pub fn tiny() -> Self {
        NetworkConfig {
            in_channels: 1,
            classes: 3,
            stem_channels: 8,
            experts: vec![2, 3, 4],
            experts2: None,
            groups: vec![16, 8, 4],
            slots: 2,
            layers: vec![1, 1, 1],
            ffn_ratio: 2,
            ssm: SsmConfig { state: 4, expand: 1 },
            norm: NormKind::DyT,
            decoder_norm: NormKind::LayerNorm,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            "tiny" => Ok(Self::tiny()),
            other => Err(Error::Config(format!(
                "unknown preset `{other}` (expected desk, paper or tiny)"
            ))),
        }
    }

    pub fn stages(&self) -> usize {
        self.experts.len()
    }

    pub fn channels(&self, stage: usize) -> usize {
        self.stem_channels << stage
    }

    pub fn experts2(&self) -> Vec<usize> {
        self.experts2
            .clone()
            .unwrap_or_else(|| self.experts.iter().map(|e| 2 * e).collect())
    }

    /// Routing configuration of 0-based stage `i`.
    pub fn home_stage(&self, i: usize) -> HomeStageConfig {
        HomeStageConfig {
            stage: i + 1,
            group: self.groups[i],
            experts: self.experts[i],
            experts2: self.experts2()[i],
            slots: self.slots,
            dim: self.channels(i),
            ffn_ratio: self.ffn_ratio,
            activation: Activation::Gelu,
        }
    }

    pub fn block(&self, i: usize) -> BlockConfig {
        BlockConfig {
            channels: self.channels(i),
            layers: self.layers[i],
            home: self.home_stage(i),
            ssm: self.ssm,
            norm: self.norm,
        }
    }

    /// Total spatial down-sampling factor `2^T`.
    pub fn divisor(&self) -> usize {
        1 << self.stages()
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.stages();
        if t < 2 {
            return Err(Error::Config(format!("at least 2 stages are required, got {t}")));
        }
        let lists = [
            ("groups", self.groups.len()),
            ("layers", self.layers.len()),
            ("experts2", self.experts2().len()),
        ];
        for (name, len) in lists {
            if len != t {
                return Err(Error::Config(format!("{name} has {len} entries but experts has {t}")));
            }
        }
        for (name, v) in [
            ("in_channels", self.in_channels),
            ("classes", self.classes),
            ("stem_channels", self.stem_channels),
            ("ssm.state", self.ssm.state),
            ("ssm.expand", self.ssm.expand),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.classes < 2 {
            return Err(Error::Config("classes must be at least 2 (background + one structure)".into()));
        }
        if self.layers.contains(&0) {
            return Err(Error::Config("every stage needs at least one layer".into()));
        }
        let stages: Vec<HomeStageConfig> = (0..t).map(|i| self.home_stage(i)).collect();
        validate_stages(&stages)
    }

    /// Checks that `dims` survive `T` halvings exactly.
    pub fn check_input(&self, dims: [usize; 3]) -> Result<()> {
        let k = self.divisor();
        if dims.iter().any(|&e| e == 0 || e % k != 0) {
            return Err(Error::Config(format!(
                "input extents {dims:?} must be positive multiples of {k} for {} stages; pad the volumes",
                self.stages()
            )));
        }
        Ok(())
    }
}

/// Decoder stage: upsample, concatenate the skip, refine with two convs.
#[derive(Clone, Debug)]
pub struct UpBlock {
    pub up: ConvTranspose3d,
    pub conv1: Conv3d,
    pub norm1: Norm,
    pub conv2: Conv3d,
    pub norm2: Norm,
}

impl UpBlock {
    fn new(store: &mut ParamStore, prefix: &str, c_in: usize, c_out: usize, norm: NormKind) -> Self {
        UpBlock {
            up: ConvTranspose3d::new(store, &format!("{prefix}.up"), c_in, c_out, 2, 2),
            conv1: Conv3d::same(store, &format!("{prefix}.conv1"), 2 * c_out, c_out, 3),
            norm1: Norm::new(store, &format!("{prefix}.norm1"), c_out, norm),
            conv2: Conv3d::same(store, &format!("{prefix}.conv2"), c_out, c_out, 3),
            norm2: Norm::new(store, &format!("{prefix}.norm2"), c_out, norm),
        }
    }

    pub fn param_count(c_in: usize, c_out: usize, norm: NormKind) -> usize {
        ConvTranspose3d::param_count(c_in, c_out, 2)
            + Conv3d::param_count(2 * c_out, c_out, 3)
            + Conv3d::param_count(c_out, c_out, 3)
            + 2 * Norm::param_count(c_out, norm)
    }

    fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, deep: Var<'t>, skip: Var<'t>) -> Result<Var<'t>> {
        let up = self.up.forward(tape, store, deep)?;
        if up.shape() != skip.shape() {
            return Err(Error::shape("decoder skip", &up.shape(), &skip.shape()));
        }
        let h = Var::concat(&[skip, up], 1)?;
        let h = self.conv1.forward(tape, store, h)?;
        let h = self.norm1.forward_volume(tape, store, h)?.gelu()?;
        let h = self.conv2.forward(tape, store, h)?;
        self.norm2.forward_volume(tape, store, h)?.gelu()
    }
}

#[derive(Clone, Debug)]
pub struct Network {
    pub cfg: NetworkConfig,
    pub stem: Conv3d,
    pub blocks: Vec<MambaHomeBlock>,
    /// Normalisation of each stage output before it feeds the skip and the
    /// next stage.
    pub norms: Vec<Norm>,
    pub downs: Vec<Conv3d>,
    pub ups: Vec<UpBlock>,
    /// Full-resolution features of the raw input, concatenated in the head.
    pub head_skip: Conv3d,
    pub head: UpBlock,
    pub out: Conv3d,
}

impl Network {
    pub fn new(store: &mut ParamStore, cfg: NetworkConfig) -> Result<Self> {
        cfg.validate()?;
        let t = cfg.stages();
        let stem = Conv3d::new(
            store,
            "stem",
            cfg.in_channels,
            cfg.stem_channels,
            STEM_KERNEL,
            Conv3dSpec::new(2, STEM_KERNEL / 2),
        );
        let blocks = (0..t)
            .map(|i| MambaHomeBlock::new(store, &format!("enc{}", i + 1), cfg.block(i)))
            .collect();
        let norms = (0..t)
            .map(|i| Norm::new(store, &format!("enc{}.norm", i + 1), cfg.channels(i), cfg.norm))
            .collect();
        let downs = (0..t - 1)
            .map(|i| {
                let c = cfg.channels(i);
                Conv3d::new(store, &format!("down{}", i + 1), c, 2 * c, 2, Conv3dSpec::new(2, 0))
            })
            .collect();
        let ups = (0..t - 1)
            .map(|i| UpBlock::new(store, &format!("dec{}", i + 1), cfg.channels(i + 1), cfg.channels(i), cfg.decoder_norm))
            .collect();
        let c1 = cfg.stem_channels;
        Ok(Network {
            stem,
            blocks,
            norms,
            downs,
            ups,
            head_skip: Conv3d::same(store, "head.skip", cfg.in_channels, c1, 3),
            head: UpBlock::new(store, "head", c1, c1, cfg.decoder_norm),
            out: Conv3d::same(store, "head.out", c1, cfg.classes, 1),
            cfg,
        })
    }

    /// Parameter count from per-module closed forms.
    pub fn analytic_param_count(cfg: &NetworkConfig) -> usize {
        let t = cfg.stages();
        let c1 = cfg.stem_channels;
        let mut total = Conv3d::param_count(cfg.in_channels, c1, STEM_KERNEL);
        for i in 0..t {
            total += MambaHomeBlock::param_count(&cfg.block(i)) + Norm::param_count(cfg.channels(i), cfg.norm);
        }
        for i in 0..t - 1 {
            let c = cfg.channels(i);
            total += Conv3d::param_count(c, 2 * c, 2);
            total += UpBlock::param_count(2 * c, c, cfg.decoder_norm);
        }
        total
            + Conv3d::param_count(cfg.in_channels, c1, 3)
            + UpBlock::param_count(c1, c1, cfg.decoder_norm)
            + Conv3d::param_count(c1, cfg.classes, 1)
    }

    pub fn stem_forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Result<Var<'t>> {
        let s = x.shape();
        if s.len() != 5 || s[1] != self.cfg.in_channels {
            return Err(Error::shape("network input", &s, &[self.cfg.in_channels]));
        }
        if s[2..].iter().any(|&e| e == 0 || e % 2 != 0) {
            return Err(Error::Config(format!(
                "stem needs even spatial extents, got {:?}; pad the volumes",
                &s[2..]
            )));
        }
        self.stem.forward(tape, store, x)
    }

    /// Normalised block outputs of every stage (the skip features),
    /// shallowest first.
    pub fn encoder_forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Result<Vec<Var<'t>>> {
        let s = x.shape();
        if s.len() == 5 {
            self.cfg.check_input([s[2], s[3], s[4]])?;
        }
        let mut f = self.stem_forward(tape, store, x)?;
        let mut skips = Vec::with_capacity(self.blocks.len());
        for (i, block) in self.blocks.iter().enumerate() {
            let h = block.forward(tape, store, f)?;
            let h = self.norms[i].forward_volume(tape, store, h)?;
            skips.push(h);
            if let Some(down) = self.downs.get(i) {
                f = down.forward(tape, store, h)?;
            }
        }
        Ok(skips)
    }

    /// Decodes encoder `features` of input `x` into class logits.
    pub fn decoder_forward<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        x: Var<'t>,
        features: &[Var<'t>],
    ) -> Result<Var<'t>> {
        if features.len() != self.blocks.len() {
            return Err(Error::Contract(format!(
                "decoder expects {} feature maps, got {}",
                self.blocks.len(),
                features.len()
            )));
        }
        let mut d = *features.last().expect("at least two stages");
        for i in (0..self.ups.len()).rev() {
            d = self.ups[i].forward(tape, store, d, features[i])?;
        }
        let skip = self.head_skip.forward(tape, store, x)?.gelu()?;
        let d = self.head.forward(tape, store, d, skip)?;
        self.out.forward(tape, store, d)
    }

    /// Class logits `[B, classes, D, H, W]`.
    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Result<Var<'t>> {
        let features = self.encoder_forward(tape, store, x)?;
        self.decoder_forward(tape, store, x, &features)
    }
}

/// Per-stage row of [`describe`].
#[derive(Clone, Debug, Serialize)]
pub struct StageSummary {
    pub stage: usize,
    pub channels: usize,
    pub extent: [usize; 3],
    pub tokens: usize,
    pub group: usize,
    pub groups: usize,
    pub experts: usize,
    pub experts2: usize,
    pub slots: usize,
    pub layers: usize,
    pub params: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct NetworkSummary {
    pub input: [usize; 3],
    pub stem_channels: usize,
    pub stages: Vec<StageSummary>,
    pub total_params: usize,
}

impl NetworkSummary {
    pub fn schedule<T>(&self, f: impl Fn(&StageSummary) -> T) -> Vec<T> {
        self.stages.iter().map(f).collect()
    }
}

/// Stage shapes, routing schedules and parameter counts for an input of
/// extent `input`. Parameters are counted on a shape-only store, so large
/// configurations are cheap to describe.
pub fn describe(cfg: &NetworkConfig, input: [usize; 3]) -> Result<NetworkSummary> {
    cfg.validate()?;
    cfg.check_input(input)?;
    let mut store = ParamStore::meta();
    Network::new(&mut store, cfg.clone())?;
    let stages = (0..cfg.stages())
        .map(|i| {
            let extent = input.map(|e| e >> (i + 1));
            let tokens = extent.iter().product();
            let home = cfg.home_stage(i);
            StageSummary {
                stage: i + 1,
                channels: cfg.channels(i),
                extent,
                tokens,
                group: home.group,
                groups: home.groups(tokens),
                experts: home.experts,
                experts2: home.experts2,
                slots: home.slots,
                layers: cfg.layers[i],
                params: MambaHomeBlock::param_count(&cfg.block(i)),
            }
        })
        .collect();
    Ok(NetworkSummary {
        input,
        stem_channels: cfg.stem_channels,
        stages,
        total_params: store.total_numel(),
    })
}

impl fmt::Display for NetworkSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [d, h, w] = self.input;
        writeln!(f, "input {d}x{h}x{w}, stem channels {}", self.stem_channels)?;
        writeln!(
            f,
            "{:>5} {:>8} {:>12} {:>8} {:>6} {:>6} {:>4} {:>4} {:>3} {:>3} {:>12}",
            "stage", "channels", "extent", "tokens", "K", "G", "E", "E2", "S", "L", "params"
        )?;
        for s in &self.stages {
            let [a, b, c] = s.extent;
            writeln!(
                f,
                "{:>5} {:>8} {:>12} {:>8} {:>6} {:>6} {:>4} {:>4} {:>3} {:>3} {:>12}",
                s.stage,
                s.channels,
                format!("{a}x{b}x{c}"),
                s.tokens,
                s.group,
                s.groups,
                s.experts,
                s.experts2,
                s.slots,
                s.layers,
                s.params
            )?;
        }
        writeln!(f, "E  = {:?}", self.schedule(|s| s.experts))?;
        writeln!(f, "E2 = {:?}", self.schedule(|s| s.experts2))?;
        writeln!(f, "K  = {:?}", self.schedule(|s| s.group))?;
        writeln!(f, "S  = {}", self.stages.first().map_or(0, |s| s.slots))?;
        writeln!(f, "C  = {:?}", self.schedule(|s| s.channels))?;
        write!(f, "total parameters: {}", self.total_params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn presets_validate() {
        for cfg in [NetworkConfig::desk(), NetworkConfig::paper(), NetworkConfig::tiny()] {
            cfg.validate().unwrap();
        }
    }

    #[test]
    fn paper_schedule_and_channels() {
        let cfg = NetworkConfig::paper();
        assert_eq!(cfg.experts2(), vec![8, 16, 24, 32]);
        assert_eq!((0..4).map(|i| cfg.channels(i)).collect::<Vec<_>>(), vec![48, 96, 192, 384]);
    }

    #[test]
    fn decreasing_experts_fail_validation() {
        let mut cfg = NetworkConfig::desk();
        cfg.experts = vec![5, 4, 3, 2];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn indivisible_input_is_a_config_error() {
        let cfg = NetworkConfig::desk();
        assert!(matches!(cfg.check_input([16, 16, 12]), Err(Error::Config(_))));
        assert!(cfg.check_input([16, 32, 16]).is_ok());
    }

    #[test]
    fn stem_halves_and_sets_channels() {
        let mut store = ParamStore::new(0);
        let mut cfg = NetworkConfig::desk();
        cfg.stem_channels = 4;
        let net = Network::new(&mut store, cfg).unwrap();
        let tape = Tape::new();
        let y = net
            .stem_forward(&tape, &store, tape.constant(Tensor::ones([1, 1, 8, 8, 8])))
            .unwrap();
        assert_eq!(y.shape(), vec![1, 4, 4, 4, 4]);
        let odd = net.stem_forward(&tape, &store, tape.constant(Tensor::ones([1, 1, 8, 7, 8])));
        assert!(matches!(odd, Err(Error::Config(_))));
    }

    #[test]
    fn registry_matches_closed_form() {
        for cfg in [NetworkConfig::tiny(), NetworkConfig::desk(), NetworkConfig::paper()] {
            let mut store = ParamStore::meta();
            Network::new(&mut store, cfg.clone()).unwrap();
            assert_eq!(store.total_numel(), Network::analytic_param_count(&cfg));
        }
    }
}
