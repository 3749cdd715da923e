//! Generator pair with a shared bottleneck, the stacked domain discriminator
//! and the content discriminator.

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{self, lanczos2_upsample, ConvBlock, ConvBlockConfig, LEAKY_SLOPE};
use crate::error::{Error, Result};
use crate::losses::ProjectionHead;
use crate::params::{leaky_relu, Conv2d, ParamStore, VisitConvs};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    A,
    B,
}

impl Domain {
    pub fn other(self) -> Self {
        match self {
            Domain::A => Domain::B,
            Domain::B => Domain::A,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// Domain A to domain B.
    Ab,
    /// Domain B to domain A.
    Ba,
}

impl Direction {
    pub fn source(self) -> Domain {
        match self {
            Direction::Ab => Domain::A,
            Direction::Ba => Domain::B,
        }
    }

    pub fn target(self) -> Domain {
        self.source().other()
    }
}

impl std::str::FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ab" => Ok(Direction::Ab),
            "ba" => Ok(Direction::Ba),
            other => Err(Error::invalid_arg(format!("unknown direction `{other}` (expected ab or ba)"))),
        }
    }
}

/// Number of discriminator classes: real/fake, or real/fake/identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClassMode {
    TwoClass,
    ThreeClass,
}

impl ClassMode {
    /// Channels of the domain discriminator output.
    pub fn output_channels(self) -> usize {
        match self {
            ClassMode::TwoClass => 1,
            ClassMode::ThreeClass => 2,
        }
    }
}

impl std::str::FromStr for ClassMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "two-class" => Ok(ClassMode::TwoClass),
            "three-class" => Ok(ClassMode::ThreeClass),
            other => Err(Error::invalid_arg(format!("unknown mode `{other}` (expected two-class or three-class)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub channels_a: usize,
    pub channels_b: usize,
    pub base_width: usize,
    pub levels: usize,
    /// 1-based encoder levels carrying spatial-channel attention.
    pub attention_levels: Vec<usize>,
    pub inner_convs: usize,
    pub attention_reduction: usize,
    /// Width of the first domain-discriminator layer; later layers double it up
    /// to eight times this value.
    pub disc_width: usize,
    pub content_width: usize,
    pub projection_width: usize,
    pub mode: ClassMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels_a: 3,
            channels_b: 3,
            base_width: 64,
            levels: 3,
            attention_levels: vec![2, 3],
            inner_convs: 2,
            attention_reduction: 8,
            disc_width: 128,
            content_width: 512,
            projection_width: 256,
            mode: ClassMode::ThreeClass,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfiguration(m.to_string()));
        if self.channels_a == 0 || self.channels_b == 0 {
            return bad("channel counts must be positive");
        }
        if self.levels == 0 {
            return bad("levels must be at least 1");
        }
        if self.base_width == 0 || self.disc_width == 0 || self.content_width == 0 || self.projection_width == 0 {
            return bad("widths must be positive");
        }
        if self.inner_convs == 0 || self.attention_reduction == 0 {
            return bad("inner_convs and attention_reduction must be positive");
        }
        if self.attention_levels.iter().any(|&l| l == 0 || l > self.levels) {
            return bad("attention_levels must lie in 1..=levels");
        }
        if self.mode == ClassMode::ThreeClass && !self.identity_enabled() {
            return bad("three-class mode needs identity pairs, which require channels_a == channels_b");
        }
        Ok(())
    }

    pub fn channels(&self, d: Domain) -> usize {
        match d {
            Domain::A => self.channels_a,
            Domain::B => self.channels_b,
        }
    }

    /// Encoder feature width at 1-based level `l`.
    pub fn level_width(&self, l: usize) -> usize {
        self.base_width << (l - 1)
    }

    pub fn bottleneck_width(&self) -> usize {
        self.base_width << self.levels
    }

    pub fn divisor(&self) -> usize {
        1 << self.levels
    }

    pub fn identity_enabled(&self) -> bool {
        self.channels_a == self.channels_b
    }
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub blocks: Vec<ConvBlock>,
    pub downs: Vec<Conv2d>,
}

/// Bottleneck input and the skip features of every level, shallowest first.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub features: Tensor,
    pub skips: Vec<Tensor>,
}

impl Encoder {
    fn new<R: Rng>(store: &mut ParamStore, name: &str, in_channels: usize, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let mut blocks = Vec::new();
        let mut downs = Vec::new();
        for l in 1..=cfg.levels {
            let c = cfg.level_width(l);
            let cin = if l == 1 { in_channels } else { c };
            let mut bc = ConvBlockConfig::new(cin, c).residual(true).attention(cfg.attention_levels.contains(&l));
            bc.inner_convs = cfg.inner_convs;
            bc.attention_reduction = cfg.attention_reduction;
            blocks.push(ConvBlock::new(store, &format!("{name}.block{l}"), bc, rng)?);
            downs.push(Conv2d::new(store, &format!("{name}.down{l}"), c, 2 * c, 4, 2, 1, true, rng)?);
        }
        Ok(Self { blocks, downs })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Encoded> {
        let mut h = x.clone();
        let mut skips = Vec::with_capacity(self.blocks.len());
        for (block, down) in self.blocks.iter().zip(&self.downs) {
            h = block.forward(&h, None)?;
            skips.push(h.clone());
            h = leaky_relu(&down.forward(&h)?, LEAKY_SLOPE)?;
        }
        Ok(Encoded { features: h, skips })
    }
}

impl VisitConvs for Encoder {
    fn visit_convs(&self, f: &mut dyn FnMut(&Conv2d)) {
        for (b, d) in self.blocks.iter().zip(&self.downs) {
            b.visit_convs(f);
            f(d);
        }
    }
}

#[derive(Debug, Clone)]
pub struct Decoder {
    /// Deepest level first.
    pub blocks: Vec<ConvBlock>,
    /// Final layer of the generator; exempt from ABSN, followed by tanh.
    pub output: Conv2d,
}

impl Decoder {
    fn new<R: Rng>(store: &mut ParamStore, name: &str, out_channels: usize, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let mut blocks = Vec::new();
        for l in (1..=cfg.levels).rev() {
            let c = cfg.level_width(l);
            // upsampling keeps the 2c channels of the level below
            let mut bc = ConvBlockConfig::new(2 * c, c).skip(c).residual(true);
            bc.inner_convs = cfg.inner_convs;
            blocks.push(ConvBlock::new(store, &format!("{name}.block{l}"), bc, rng)?);
        }
        let c1 = cfg.level_width(1);
        let output = Conv2d::new(store, &format!("{name}.output"), c1, out_channels, 3, 1, 1, false, rng)?;
        Ok(Self { blocks, output })
    }

    pub fn forward(&self, z: &Tensor, skips: &[Tensor]) -> Result<Tensor> {
        let mut h = z.clone();
        for (block, skip) in self.blocks.iter().zip(skips.iter().rev()) {
            h = lanczos2_upsample(&h)?;
            h = block.forward(&h, Some(skip))?;
        }
        Ok(self.output.forward(&h)?.tanh()?)
    }
}

impl VisitConvs for Decoder {
    fn visit_convs(&self, f: &mut dyn FnMut(&Conv2d)) {
        self.blocks.iter().for_each(|b| b.visit_convs(f));
        f(&self.output);
    }
}

/// Two generators `G_AB = dec_B ∘ bottleneck ∘ enc_A` and
/// `G_BA = dec_A ∘ bottleneck ∘ enc_B`. The bottleneck block is a single set
/// of parameters used by both directions.
#[derive(Debug, Clone)]
pub struct GeneratorPair {
    pub cfg: ModelConfig,
    pub encoder_a: Encoder,
    pub encoder_b: Encoder,
    pub bottleneck: ConvBlock,
    pub decoder_a: Decoder,
    pub decoder_b: Decoder,
}

/// Generator output with the bottleneck features it passed through.
#[derive(Debug, Clone)]
pub struct Translation {
    pub image: Tensor,
    pub bottleneck: Tensor,
}

impl GeneratorPair {
    pub fn new<R: Rng>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let encoder_a = Encoder::new(store, "gen.enc_a", cfg.channels_a, cfg, rng)?;
        let encoder_b = Encoder::new(store, "gen.enc_b", cfg.channels_b, cfg, rng)?;
        let w = cfg.bottleneck_width();
        let mut bc = ConvBlockConfig::new(w, w);
        bc.inner_convs = cfg.inner_convs;
        let bottleneck = ConvBlock::new(store, "gen.bottleneck", bc, rng)?;
        let decoder_a = Decoder::new(store, "gen.dec_a", cfg.channels_a, cfg, rng)?;
        let decoder_b = Decoder::new(store, "gen.dec_b", cfg.channels_b, cfg, rng)?;
        Ok(Self { cfg: cfg.clone(), encoder_a, encoder_b, bottleneck, decoder_a, decoder_b })
    }

    pub fn encoder(&self, d: Domain) -> &Encoder {
        match d {
            Domain::A => &self.encoder_a,
            Domain::B => &self.encoder_b,
        }
    }

    pub fn decoder(&self, d: Domain) -> &Decoder {
        match d {
            Domain::A => &self.decoder_a,
            Domain::B => &self.decoder_b,
        }
    }

    fn check_input(&self, d: Domain, x: &Tensor) -> Result<()> {
        let (_, c, h, w) = x.dims4().map_err(|_| Error::invalid_arg(format!("expected (B, C, H, W), got {:?}", x.dims())))?;
        let want = self.cfg.channels(d);
        if c != want {
            return Err(Error::invalid_arg(format!("domain {d:?} images have {want} channels, got {c}")));
        }
        let k = self.cfg.divisor();
        if h % k != 0 || w % k != 0 || h == 0 || w == 0 {
            return Err(Error::invalid_arg(format!("spatial size {h}x{w} is not divisible by {k}; pad the input first")));
        }
        Ok(())
    }

    /// Encoder of domain `d` followed by the shared bottleneck. Returns the
    /// bottleneck map and the encoder skips.
    pub fn encode(&self, d: Domain, x: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        self.check_input(d, x)?;
        let enc = self.encoder(d).forward(x)?;
        let z = self.bottleneck.forward(&enc.features, None)?;
        Ok((z, enc.skips))
    }

    pub fn forward(&self, dir: Direction, x: &Tensor) -> Result<Translation> {
        let (z, skips) = self.encode(dir.source(), x)?;
        let image = self.decoder(dir.target()).forward(&z, &skips)?;
        Ok(Translation { image, bottleneck: z })
    }

    pub fn output_layers(&self) -> [&Conv2d; 2] {
        [&self.decoder_a.output, &self.decoder_b.output]
    }
}

impl VisitConvs for GeneratorPair {
    fn visit_convs(&self, f: &mut dyn FnMut(&Conv2d)) {
        self.encoder_a.visit_convs(f);
        self.encoder_b.visit_convs(f);
        self.bottleneck.visit_convs(f);
        self.decoder_a.visit_convs(f);
        self.decoder_b.visit_convs(f);
    }
}

pub fn generator_forward(g: &GeneratorPair, dir: Direction, x: &Tensor) -> Result<Translation> {
    g.forward(dir, x)
}

/// PatchGAN-style discriminator over channel-stacked `[A | B]` image pairs.
#[derive(Debug, Clone)]
pub struct DomainDiscriminator {
    pub in_channels: usize,
    pub layers: Vec<Conv2d>,
    pub classifier: Conv2d,
}

impl DomainDiscriminator {
    pub fn new<R: Rng>(store: &mut ParamStore, in_channels: usize, width: usize, mode: ClassMode, rng: &mut R) -> Result<Self> {
        let n = "disc.domain";
        let layers = vec![
            Conv2d::new(store, &format!("{n}.conv0"), in_channels, width, 8, 2, 3, true, rng)?,
            Conv2d::new(store, &format!("{n}.conv1"), width, 2 * width, 4, 2, 1, true, rng)?,
            Conv2d::new(store, &format!("{n}.conv2"), 2 * width, 4 * width, 4, 2, 1, true, rng)?,
            Conv2d::new(store, &format!("{n}.conv3"), 4 * width, 8 * width, 4, 1, 1, true, rng)?,
        ];
        let classifier = Conv2d::new(store, &format!("{n}.classifier"), 8 * width, mode.output_channels(), 4, 1, 1, true, rng)?;
        Ok(Self { in_channels, layers, classifier })
    }

    pub fn output_channels(&self) -> usize {
        self.classifier.out_channels()
    }

    pub fn forward(&self, pair: &Tensor) -> Result<Tensor> {
        let c = pair.dims().get(1).copied().unwrap_or(0);
        if pair.rank() != 4 || c != self.in_channels {
            return Err(Error::invalid_arg(format!(
                "domain discriminator expects {} stacked channels, got {:?}",
                self.in_channels,
                pair.dims()
            )));
        }
        let mut h = pair.clone();
        for l in &self.layers {
            h = leaky_relu(&l.forward(&h)?, LEAKY_SLOPE)?;
        }
        self.classifier.forward(&h)
    }
}

impl VisitConvs for DomainDiscriminator {
    fn visit_convs(&self, f: &mut dyn FnMut(&Conv2d)) {
        self.layers.iter().for_each(|l| f(l));
        f(&self.classifier);
    }
}

pub fn domain_disc_forward(d: &DomainDiscriminator, pair: &Tensor) -> Result<Tensor> {
    d.forward(pair)
}

/// Classifies which domain a bottleneck map came from.
#[derive(Debug, Clone)]
pub struct ContentDiscriminator {
    pub contract: Conv2d,
    pub classifier: Conv2d,
}

impl ContentDiscriminator {
    pub fn new<R: Rng>(store: &mut ParamStore, in_channels: usize, width: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            contract: Conv2d::new(store, "disc.content.contract", in_channels, width, 4, 2, 1, true, rng)?,
            classifier: Conv2d::new(store, "disc.content.classifier", width, 1, 3, 1, 1, true, rng)?,
        })
    }

    pub fn forward(&self, z: &Tensor) -> Result<Tensor> {
        let h = leaky_relu(&self.contract.forward(z)?, LEAKY_SLOPE)?;
        self.classifier.forward(&h)
    }
}

impl VisitConvs for ContentDiscriminator {
    fn visit_convs(&self, f: &mut dyn FnMut(&Conv2d)) {
        f(&self.contract);
        f(&self.classifier);
    }
}

pub fn content_disc_forward(d: &ContentDiscriminator, z: &Tensor) -> Result<Tensor> {
    d.forward(z)
}

/// Every network of the model. Generator and projection-head parameters live
/// in `gen_params`; both discriminators live in `disc_params`.
#[derive(Debug, Clone)]
pub struct Ui2iModel {
    pub cfg: ModelConfig,
    pub generators: GeneratorPair,
    pub projection: ProjectionHead,
    pub domain_disc: DomainDiscriminator,
    pub content_disc: ContentDiscriminator,
    pub gen_params: ParamStore,
    pub disc_params: ParamStore,
}

impl Ui2iModel {
    pub fn new(cfg: &ModelConfig, dtype: DType, device: &Device, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gen_params = ParamStore::new(dtype, device.clone());
        let generators = GeneratorPair::new(&mut gen_params, cfg, &mut rng)?;
        let projection = ProjectionHead::new(&mut gen_params, "proj", cfg.bottleneck_width(), cfg.projection_width, &mut rng)?;
        let mut disc_params = ParamStore::new(dtype, device.clone());
        let domain_disc =
            DomainDiscriminator::new(&mut disc_params, cfg.channels_a + cfg.channels_b, cfg.disc_width, cfg.mode, &mut rng)?;
        let content_disc = ContentDiscriminator::new(&mut disc_params, cfg.bottleneck_width(), cfg.content_width, &mut rng)?;
        Ok(Self { cfg: cfg.clone(), generators, projection, domain_disc, content_disc, gen_params, disc_params })
    }

    /// Full initialization; `medians_a`/`medians_b` are per-channel
    /// target-domain pixel medians for the two output layers.
    pub fn init(&self, seed: u64, medians_a: Option<&[f64]>, medians_b: Option<&[f64]>) -> Result<()> {
        blocks::init_parameters(
            &[&self.gen_params, &self.disc_params],
            &[(&self.generators.decoder_a.output, medians_a), (&self.generators.decoder_b.output, medians_b)],
            seed,
        )
    }

    pub fn num_parameters(&self) -> usize {
        self.gen_params.iter().chain(self.disc_params.iter()).map(|(_, p)| p.var.elem_count()).sum()
    }
}

impl VisitConvs for Ui2iModel {
    fn visit_convs(&self, f: &mut dyn FnMut(&Conv2d)) {
        self.generators.visit_convs(f);
        self.projection.visit_convs(f);
        self.domain_disc.visit_convs(f);
        self.content_disc.visit_convs(f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> ModelConfig {
        ModelConfig { base_width: 4, disc_width: 4, content_width: 8, projection_width: 8, ..Default::default() }
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let mut c = ModelConfig { channels_a: 2, channels_b: 1, ..Default::default() };
        assert!(c.validate().is_err());
        c.mode = ClassMode::TwoClass;
        assert!(c.validate().is_ok());
        assert!(ModelConfig { attention_levels: vec![4], ..Default::default() }.validate().is_err());
        assert!(ModelConfig { levels: 0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn indivisible_input_rejected() {
        let m = Ui2iModel::new(&small_cfg(), DType::F32, &Device::Cpu, 0).unwrap();
        let x = Tensor::zeros((1, 3, 20, 24), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(m.generators.forward(Direction::Ab, &x), Err(Error::InvalidArgument(_))));
        let x = Tensor::zeros((1, 2, 16, 16), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(m.generators.forward(Direction::Ab, &x), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn discriminator_channel_mismatch() {
        let m = Ui2iModel::new(&small_cfg(), DType::F32, &Device::Cpu, 0).unwrap();
        let x = Tensor::zeros((1, 5, 64, 64), DType::F32, &Device::Cpu).unwrap();
        assert!(m.domain_disc.forward(&x).is_err());
    }

    #[test]
    fn direction_parsing() {
        assert_eq!("ab".parse::<Direction>().unwrap(), Direction::Ab);
        assert_eq!("BA".parse::<Direction>().unwrap(), Direction::Ba);
        assert!("xy".parse::<Direction>().is_err());
        assert_eq!(Direction::Ba.target(), Domain::A);
    }
}
