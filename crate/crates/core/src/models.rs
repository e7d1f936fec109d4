//! SAE and Bin-DANN graph construction.
//!
//! The SAE is `depth` strided conv blocks, `depth` transposed-conv blocks
//! with additive skips from the matching encoder output, and a final
//! non-strided conv + sigmoid. Bin-DANN taps the activation entering the
//! last decoder block through a gradient-reversal node into a replica of
//! the SAE tail that predicts the domain per pixel.

use rand::Rng;
use rayon::prelude::*;

use crate::data::{split_patches, Page, ProbabilityMap};
use crate::error::{Error, Result};
use crate::graph::{Bindings, ForwardOptions, Graph, NodeId, Op};
use crate::layers::{ConvSpec, GrlSpec, Padding};
use crate::params::Parameters;
use crate::tensor::Tensor;

pub const IMAGE_INPUT: &str = "image";
pub const MASK_INPUT: &str = "mask";
pub const DOMAIN_INPUT: &str = "domain_target";

pub const PROBABILITY: &str = "probability";
pub const BIN_LOSS: &str = "bin_loss";
pub const DOMAIN: &str = "domain";
pub const DOMAIN_LOSS: &str = "domain_loss";
pub const TOTAL_LOSS: &str = "total_loss";

/// Name of the header record stored in model checkpoints.
pub const HEADER_RECORD: &str = "__model__";

/// Dropout stream used by the domain branch.
const DOMAIN_STREAM: u64 = 1 << 20;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SaeConfig {
    pub depth: usize,
    pub filters: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub dropout_rate: f64,
    pub patch: (usize, usize),
    pub channels: usize,
}

impl Default for SaeConfig {
    /// Desk scale: three blocks of 8 filters on 32×32 grayscale patches.
    fn default() -> Self {
        SaeConfig {
            depth: 3,
            filters: 8,
            kernel: (3, 3),
            stride: (2, 2),
            dropout_rate: 0.2,
            patch: (32, 32),
            channels: 1,
        }
    }
}

impl SaeConfig {
    /// Six blocks of 64 filters on 256×256 patches.
    pub fn full_scale() -> Self {
        SaeConfig {
            depth: 6,
            filters: 64,
            patch: (256, 256),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.depth == 0 {
            return bad("depth must be at least 1".into());
        }
        if self.filters == 0 || self.channels == 0 {
            return bad("filters and channels must be positive".into());
        }
        if self.kernel.0 == 0 || self.kernel.1 == 0 || self.stride.0 == 0 || self.stride.1 == 0 {
            return bad("kernel and stride must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout rate must be in [0, 1), got {}", self.dropout_rate));
        }
        let (fh, fw) = (
            self.stride.0.checked_pow(self.depth as u32),
            self.stride.1.checked_pow(self.depth as u32),
        );
        match (fh, fw) {
            (Some(fh), Some(fw)) if self.patch.0 % fh == 0 && self.patch.1 % fw == 0 && self.patch.0 > 0 && self.patch.1 > 0 => Ok(()),
            _ => bad(format!(
                "patch {}x{} is not divisible by stride^depth ({:?}^{})",
                self.patch.0, self.patch.1, self.stride, self.depth
            )),
        }
    }

    fn strided(&self, in_channels: usize) -> ConvSpec {
        ConvSpec {
            in_channels,
            out_channels: self.filters,
            kernel: self.kernel,
            stride: self.stride,
            padding: Padding::same_strided(self.kernel, self.stride),
        }
    }

    fn head(&self) -> ConvSpec {
        ConvSpec {
            in_channels: self.filters,
            out_channels: 1,
            kernel: self.kernel,
            stride: (1, 1),
            padding: Padding {
                top: (self.kernel.0 - 1) / 2,
                bottom: self.kernel.0 / 2,
                left: (self.kernel.1 - 1) / 2,
                right: self.kernel.1 / 2,
            },
        }
    }

    /// Spatial size after `depth` stride steps.
    pub fn bottleneck(&self) -> (usize, usize) {
        (
            self.patch.0 / self.stride.0.pow(self.depth as u32),
            self.patch.1 / self.stride.1.pow(self.depth as u32),
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BinDannConfig {
    pub sae: SaeConfig,
    pub lambda0: f64,
    pub lambda_increment: f64,
}

impl Default for BinDannConfig {
    fn default() -> Self {
        BinDannConfig {
            sae: SaeConfig::default(),
            lambda0: 0.1,
            lambda_increment: 0.01,
        }
    }
}

impl BinDannConfig {
    pub fn validate(&self) -> Result<()> {
        self.sae.validate()?;
        if !(self.lambda0 >= 0.0 && self.lambda_increment >= 0.0) {
            return Err(Error::InvalidArgument(
                "lambda0 and lambda increment must be non-negative".into(),
            ));
        }
        Ok(())
    }

    /// GRL coefficient for a zero-based epoch.
    pub fn lambda_at(&self, epoch: usize) -> f64 {
        self.lambda0 + self.lambda_increment * epoch as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Sae,
    BinDann,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub kind: ModelKind,
    pub graph: Graph,
    pub params: Parameters,
    pub config: BinDannConfig,
}

struct Init<'r, R: Rng + ?Sized> {
    rng: &'r mut R,
    params: Parameters,
}

impl<R: Rng + ?Sized> Init<'_, R> {
    /// He-uniform weights (fan-in = in_channels·kh·kw) and zero bias.
    fn add(&mut self, prefix: &str, weight_shape: [usize; 4], fan_in: usize, out_channels: usize) {
        let bound = (6.0 / fan_in as f64).sqrt();
        let n: usize = weight_shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(-bound..bound)).collect();
        self.params.insert(
            format!("{prefix}.weight"),
            Tensor::new(weight_shape.to_vec(), data).expect("shape"),
        );
        self.params.insert(format!("{prefix}.bias"), Tensor::zeros(&[out_channels]));
    }

    fn conv(&mut self, prefix: &str, spec: &ConvSpec) {
        self.add(prefix, spec.conv_weight_shape(), spec.in_channels * spec.kernel.0 * spec.kernel.1, spec.out_channels);
    }

    fn transpose(&mut self, prefix: &str, spec: &ConvSpec) {
        self.add(prefix, spec.transpose_weight_shape(), spec.in_channels * spec.kernel.0 * spec.kernel.1, spec.out_channels);
    }
}

/// Appends `layer -> relu -> dropout`.
fn block(g: &mut Graph, x: NodeId, spec: ConvSpec, prefix: &str, transposed: bool, rate: f64, stream: u64) -> Result<NodeId> {
    let h = if transposed {
        g.conv2d_transpose(x, spec, prefix)?
    } else {
        g.conv2d(x, spec, prefix)?
    };
    let h = g.unary(Op::Relu, h, format!("{prefix}.relu"))?;
    g.unary(Op::Dropout { rate, stream }, h, format!("{prefix}.dropout"))
}

struct Trunk {
    tap: NodeId,
    logits: NodeId,
    probability: NodeId,
}

fn build_trunk<R: Rng + ?Sized>(g: &mut Graph, cfg: &SaeConfig, init: &mut Init<'_, R>) -> Result<Trunk> {
    let x = g.input(IMAGE_INPUT);
    let mut skips = Vec::with_capacity(cfg.depth);
    let mut h = x;
    for k in 0..cfg.depth {
        let spec = cfg.strided(if k == 0 { cfg.channels } else { cfg.filters });
        let name = format!("enc{k}");
        init.conv(&name, &spec);
        h = block(g, h, spec, &name, false, cfg.dropout_rate, k as u64)?;
        skips.push(h);
    }
    let dec_spec = cfg.strided(cfg.filters);
    let mut tap = h;
    for k in 0..cfg.depth {
        if k == cfg.depth - 1 {
            tap = h;
        }
        let name = format!("dec{k}");
        init.transpose(&name, &dec_spec);
        h = block(g, h, dec_spec, &name, true, cfg.dropout_rate, (cfg.depth + k) as u64)?;
        if let Some(skip_idx) = (cfg.depth - 1).checked_sub(k + 1) {
            h = g.add_node(Op::Add, vec![h, skips[skip_idx]], format!("dec{k}.residual"))?;
        }
    }
    let head = cfg.head();
    init.conv("out", &head);
    let logits = g.conv2d(h, head, "out")?;
    let probability = g.unary(Op::Sigmoid, logits, "out.sigmoid")?;
    Ok(Trunk { tap, logits, probability })
}

fn attach_bin_loss(g: &mut Graph, logits: NodeId) -> Result<NodeId> {
    let mask = g.input(MASK_INPUT);
    g.add_node(Op::BceWithLogits, vec![logits, mask], BIN_LOSS)
}

pub fn build_sae<R: Rng + ?Sized>(config: &SaeConfig, rng: &mut R) -> Result<Model> {
    config.validate()?;
    let mut g = Graph::new();
    let mut init = Init { rng, params: Parameters::new() };
    let trunk = build_trunk(&mut g, config, &mut init)?;
    let loss = attach_bin_loss(&mut g, trunk.logits)?;
    g.set_output(PROBABILITY, trunk.probability);
    g.set_output(BIN_LOSS, loss);
    Ok(Model {
        kind: ModelKind::Sae,
        graph: g,
        params: init.params,
        config: BinDannConfig {
            sae: *config,
            lambda0: 0.0,
            lambda_increment: 0.0,
        },
    })
}

/// Builds Bin-DANN. Shared parameters are drawn from `rng` in the same order
/// as [`build_sae`], so both models start identical for the same seed.
pub fn build_bindann<R: Rng + ?Sized>(config: &BinDannConfig, rng: &mut R) -> Result<Model> {
    config.validate()?;
    let cfg = &config.sae;
    let mut g = Graph::new();
    let mut init = Init { rng, params: Parameters::new() };
    let trunk = build_trunk(&mut g, cfg, &mut init)?;
    let bin_loss = attach_bin_loss(&mut g, trunk.logits)?;

    let reversed = g.unary(Op::GradientReversal(GrlSpec::new(config.lambda0)?), trunk.tap, "grl")?;
    let dec_spec = cfg.strided(cfg.filters);
    init.transpose("domain.dec", &dec_spec);
    let h = block(&mut g, reversed, dec_spec, "domain.dec", true, cfg.dropout_rate, DOMAIN_STREAM)?;
    let head = cfg.head();
    init.conv("domain.out", &head);
    let logits = g.conv2d(h, head, "domain.out")?;
    let domain = g.unary(Op::Sigmoid, logits, "domain.sigmoid")?;
    let target = g.input(DOMAIN_INPUT);
    let domain_loss = g.add_node(Op::BceWithLogits, vec![logits, target], DOMAIN_LOSS)?;
    let total = g.add_node(Op::Add, vec![bin_loss, domain_loss], TOTAL_LOSS)?;

    g.set_output(PROBABILITY, trunk.probability);
    g.set_output(BIN_LOSS, bin_loss);
    g.set_output(DOMAIN, domain);
    g.set_output(DOMAIN_LOSS, domain_loss);
    g.set_output(TOTAL_LOSS, total);
    Ok(Model {
        kind: ModelKind::BinDann,
        graph: g,
        params: init.params,
        config: *config,
    })
}

impl Model {
    pub fn sae_config(&self) -> &SaeConfig {
        &self.config.sae
    }

    /// Parameters of the domain-classifier branch (Bin-DANN only).
    pub fn domain_branch_params(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().filter(|(n, _)| n.starts_with("domain."))
    }

    /// Parameters of the SAE tail that the domain branch mirrors.
    pub fn mirrored_tail_params(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        let last = format!("dec{}.", self.config.sae.depth - 1);
        self.params
            .iter()
            .filter(move |(n, _)| n.starts_with(&last) || n.starts_with("out."))
    }

    /// Parameters on the binarization path (everything but the domain branch).
    pub fn binarization_params(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().filter(|(n, _)| !n.starts_with("domain."))
    }

    /// Inference-mode probability map for one `[c, h, w]` patch.
    pub fn predict_patch(&self, patch: &Tensor) -> Result<Tensor> {
        let out = self.graph.output(PROBABILITY)?;
        let mut bindings = Bindings::new();
        bindings.insert(IMAGE_INPUT.to_string(), patch.clone());
        let eval = self.graph.evaluate(&self.params, &bindings, ForwardOptions::inference(), &[out])?;
        Ok(eval.value(out).expect("evaluated").clone())
    }

    /// Splits `page` into patches, predicts each and reassembles the map.
    pub fn predict_prob_map(&self, page: &Page) -> Result<ProbabilityMap> {
        let cfg = &self.config.sae;
        if page.channels != cfg.channels {
            return Err(Error::shape(
                "predict_prob_map",
                format!("page has {} channels, model expects {}", page.channels, cfg.channels),
            ));
        }
        let grid = split_patches(page, cfg.patch.0, cfg.patch.1);
        let maps = grid
            .patches
            .par_iter()
            .map(|p| self.predict_patch(p))
            .collect::<Result<Vec<_>>>()?;
        grid.with_patches(maps).assemble()
    }

    fn header(&self, threshold: Option<f64>) -> Tensor {
        let c = &self.config;
        let s = &c.sae;
        let kind = match self.kind {
            ModelKind::Sae => 0.0,
            ModelKind::BinDann => 1.0,
        };
        Tensor::from_vec(vec![
            kind,
            s.depth as f64,
            s.filters as f64,
            s.kernel.0 as f64,
            s.kernel.1 as f64,
            s.stride.0 as f64,
            s.stride.1 as f64,
            s.dropout_rate,
            s.patch.0 as f64,
            s.patch.1 as f64,
            s.channels as f64,
            c.lambda0,
            c.lambda_increment,
            threshold.unwrap_or(-1.0),
        ])
    }

    /// Checkpoint bytes: the parameters plus a [`HEADER_RECORD`] entry
    /// holding the architecture and the binarization threshold.
    pub fn to_checkpoint(&self, threshold: Option<f64>) -> Vec<u8> {
        let mut all = self.params.clone();
        all.insert(HEADER_RECORD, self.header(threshold));
        all.to_bytes()
    }

    pub fn from_checkpoint(bytes: &[u8]) -> Result<(Model, Option<f64>)> {
        let mut params = Parameters::from_bytes(bytes)?;
        let header = params
            .remove(HEADER_RECORD)
            .ok_or_else(|| Error::Checkpoint("missing model header record".into()))?;
        let h = header.data();
        if h.len() != 14 {
            return Err(Error::Checkpoint(format!("header has {} fields, expected 14", h.len())));
        }
        let u = |v: f64| v as usize;
        let sae = SaeConfig {
            depth: u(h[1]),
            filters: u(h[2]),
            kernel: (u(h[3]), u(h[4])),
            stride: (u(h[5]), u(h[6])),
            dropout_rate: h[7],
            patch: (u(h[8]), u(h[9])),
            channels: u(h[10]),
        };
        let config = BinDannConfig {
            sae,
            lambda0: h[11],
            lambda_increment: h[12],
        };
        // Rebuild the graph; the throwaway init is overwritten below.
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut model = if h[0] == 0.0 {
            build_sae(&sae, &mut rng)?
        } else {
            build_bindann(&config, &mut rng)?
        };
        for (name, t) in model.params.iter() {
            let loaded = params
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
            if loaded.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    loaded.shape(),
                    t.shape()
                )));
            }
        }
        if params.len() != model.params.len() {
            return Err(Error::Checkpoint("checkpoint has unexpected parameters".into()));
        }
        model.params = params;
        model.config = config;
        let threshold = (h[13] >= 0.0).then_some(h[13]);
        Ok((model, threshold))
    }
}
