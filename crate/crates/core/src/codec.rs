//! Miniature dual-pipeline semantic encoder and decoder.
//!
//! Encoder: a patch-embedding stem feeds the main pipeline, `S` stages of
//! residual blocks (depthwise 3x3 mixing, `tanh`, pointwise linear). After
//! every stage the auxiliary pipeline reads a tap of the main features,
//! its own previous mask and a constant SNR plane, and emits a mask in
//! `(0, 2)`. The last mask multiplies the final features elementwise before
//! a pointwise projection to channel symbols, which are power-normalized per
//! image.
//!
//! Decoder: an optional residual preprocessing stage that sees the received
//! symbols and the SNR, then the reverse main pipeline and a pixel-shuffle
//! head whose output is clipped to `[0, 1]`.
//!
//! Parameters in `enc.aux.*` and `dec.pre.*` form the personalized block;
//! everything else is shared.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::channel::SnrDistribution;
use crate::error::{Error, Result};
use crate::graph::{Conv2dSpec, Feed, Graph, NodeId};
use crate::losses;
use crate::math;
use crate::rng::RngStream;
use crate::tensor::{ParamMap, Tensor};

/// Channel symbols per source dimension, with the source image shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CompressionSpec {
    pub ratio_num: usize,
    pub ratio_den: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl CompressionSpec {
    pub fn new(
        ratio_num: usize,
        ratio_den: usize,
        height: usize,
        width: usize,
        channels: usize,
    ) -> Self {
        Self {
            ratio_num,
            ratio_den,
            height,
            width,
            channels,
        }
    }

    pub fn source_dims(&self) -> usize {
        self.height * self.width * self.channels
    }

    /// `floor(r * H * W * C)`; must be at least one.
    pub fn symbols(&self) -> Result<usize> {
        if self.ratio_den == 0 {
            return Err(Error::config("compression.ratio", "zero denominator"));
        }
        let k = self.ratio_num * self.source_dims() / self.ratio_den;
        if k == 0 {
            return Err(Error::config(
                "compression.ratio",
                format!(
                    "{}/{} of {} dimensions leaves no symbols",
                    self.ratio_num,
                    self.ratio_den,
                    self.source_dims()
                ),
            ));
        }
        Ok(k)
    }
}

/// Architecture and ablation switches of the codec.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CodecConfig {
    pub compression: CompressionSpec,
    /// Stem downsampling factor.
    pub patch: usize,
    /// Feature channels of both pipelines.
    pub width: usize,
    pub stages: usize,
    pub blocks_per_stage: usize,
    /// Auxiliary mask pipeline on; off means a mask of ones.
    pub dual_pipeline: bool,
    /// Decoder preprocessing on; off means `Emb_R' = Emb_R`.
    pub decoder_preprocess: bool,
    /// SNR range mapped onto `[0, 1]` for the channel-state planes.
    pub snr_min_db: f64,
    pub snr_max_db: f64,
}

impl CodecConfig {
    pub fn new(compression: CompressionSpec) -> Self {
        Self {
            compression,
            patch: 2,
            width: 16,
            stages: 2,
            blocks_per_stage: 2,
            dual_pipeline: true,
            decoder_preprocess: true,
            snr_min_db: SnrDistribution::DEFAULT_MIN_DB,
            snr_max_db: SnrDistribution::DEFAULT_MAX_DB,
        }
    }
}

/// Which block a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamRole {
    Stem,
    MainStage,
    Projection,
    AuxStage,
    Preprocess,
    DecoderInput,
    DecoderStage,
    Head,
}

impl ParamRole {
    /// Classifies a parameter by its name prefix.
    pub fn of(name: &str) -> Result<Self> {
        const TABLE: [(&str, ParamRole); 8] = [
            ("enc.stem.", ParamRole::Stem),
            ("enc.main.", ParamRole::MainStage),
            ("enc.proj.", ParamRole::Projection),
            ("enc.aux.", ParamRole::AuxStage),
            ("dec.pre.", ParamRole::Preprocess),
            ("dec.in.", ParamRole::DecoderInput),
            ("dec.main.", ParamRole::DecoderStage),
            ("dec.head.", ParamRole::Head),
        ];
        TABLE
            .iter()
            .find(|(prefix, _)| name.starts_with(prefix))
            .map(|&(_, role)| role)
            .ok_or_else(|| Error::UnclassifiedParameter(name.to_string()))
    }

    /// Auxiliary-pipeline and preprocessing parameters stay on the client.
    pub fn is_personal(self) -> bool {
        matches!(self, ParamRole::AuxStage | ParamRole::Preprocess)
    }
}

/// Codec with derived layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Codec {
    config: CodecConfig,
    symbols: usize,
    /// Feature-map height and width after the stem.
    grid: (usize, usize),
    /// Symbol planes produced by the projection.
    symbol_channels: usize,
}

/// Nodes of one encoder pass.
#[derive(Debug, Clone, Copy)]
pub struct EncoderNodes {
    /// Main-pipeline features after the last stage, before masking.
    pub features: NodeId,
    pub mask: Option<NodeId>,
    /// Projected symbols before power normalization, `[B, K]`.
    pub embedding: NodeId,
    /// Power-normalized symbols, `[B, K]`.
    pub transmitted: NodeId,
}

/// Training graph for one batch size, with handles to its loss nodes.
#[derive(Debug, Clone)]
pub struct TrainingGraph {
    pub graph: Graph,
    pub batch: usize,
    pub mse: NodeId,
    pub contrastive: Option<NodeId>,
    pub total: NodeId,
    pub reconstruction: NodeId,
}

/// Inference graph: image, SNR and noise in, reconstruction out.
#[derive(Debug, Clone)]
pub struct InferenceGraph {
    pub graph: Graph,
    pub batch: usize,
    pub reconstruction: NodeId,
}

/// Input names shared by the codec graphs.
pub mod inputs {
    pub const IMAGE: &str = "x";
    pub const SNR: &str = "snr";
    pub const SNR_POSITIVE: &str = "snr_positive";
    pub const NOISE: &str = "noise";
    pub const FADING_T: &str = "fading_t";
    pub const ZERO_FORCING_T: &str = "zero_forcing_t";
}

/// Loss settings of the training graph.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LossConfig {
    /// Weight of the contrastive term; 0 drops it from the graph.
    pub contrastive_weight: f64,
    pub temperature: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            contrastive_weight: 1.0,
            temperature: losses::DEFAULT_TEMPERATURE,
        }
    }
}

fn conv1x1() -> Conv2dSpec {
    Conv2dSpec::new(1, 0, 1)
}

fn depthwise3x3(channels: usize) -> Conv2dSpec {
    Conv2dSpec::new(1, 1, channels)
}

impl Codec {
    pub fn new(config: CodecConfig) -> Result<Self> {
        let c = &config.compression;
        if c.channels == 0 || c.height == 0 || c.width == 0 {
            return Err(Error::config(
                "compression.shape",
                "image dimensions must be positive",
            ));
        }
        if config.patch == 0
            || !c.height.is_multiple_of(config.patch)
            || !c.width.is_multiple_of(config.patch)
        {
            return Err(Error::config(
                "codec.patch",
                format!(
                    "{}x{} not divisible by patch {}",
                    c.height, c.width, config.patch
                ),
            ));
        }
        if config.width == 0 || config.stages == 0 || config.blocks_per_stage == 0 {
            return Err(Error::config(
                "codec",
                "width, stages and blocks must be positive",
            ));
        }
        if !(config.snr_max_db > config.snr_min_db) {
            return Err(Error::config("codec.snr_range", "max must exceed min"));
        }
        let symbols = c.symbols()?;
        let grid = (c.height / config.patch, c.width / config.patch);
        let cells = grid.0 * grid.1;
        let symbol_channels = symbols.div_ceil(cells);
        Ok(Self {
            config,
            symbols,
            grid,
            symbol_channels,
        })
    }

    pub fn config(&self) -> &CodecConfig {
        &self.config
    }

    pub fn symbols(&self) -> usize {
        self.symbols
    }

    /// `(height, width)` of feature maps and SNR planes.
    pub fn grid(&self) -> (usize, usize) {
        self.grid
    }

    pub fn image_shape(&self) -> [usize; 3] {
        let c = &self.config.compression;
        [c.channels, c.height, c.width]
    }

    /// Parameter names and shapes in creation order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let cfg = &self.config;
        let (c, p, ch) = (cfg.width, cfg.patch, cfg.compression.channels);
        let ks = self.symbol_channels;
        let mut out: Vec<(String, Vec<usize>)> = Vec::new();
        let mut add = |name: String, shape: &[usize]| out.push((name, shape.to_vec()));
        add("enc.stem.w".into(), &[c, ch, p, p]);
        add("enc.stem.b".into(), &[c]);
        let block = |add: &mut dyn FnMut(String, &[usize]), prefix: &str| {
            add(format!("{prefix}.dw.w"), &[c, 1, 3, 3]);
            add(format!("{prefix}.dw.b"), &[c]);
            add(format!("{prefix}.pw.w"), &[c, c, 1, 1]);
            add(format!("{prefix}.pw.b"), &[c]);
        };
        for s in 0..cfg.stages {
            for b in 0..cfg.blocks_per_stage {
                block(&mut add, &format!("enc.main.{s}.{b}"));
            }
            if cfg.dual_pipeline {
                add(format!("enc.aux.{s}.in.w"), &[c, 2 * c + 1, 1, 1]);
                add(format!("enc.aux.{s}.in.b"), &[c]);
                add(format!("enc.aux.{s}.dw.w"), &[c, 1, 3, 3]);
                add(format!("enc.aux.{s}.dw.b"), &[c]);
            }
        }
        add("enc.proj.w".into(), &[ks, c, 1, 1]);
        add("enc.proj.b".into(), &[ks]);
        if cfg.decoder_preprocess {
            add("dec.pre.in.w".into(), &[c, ks + 1, 1, 1]);
            add("dec.pre.in.b".into(), &[c]);
            add("dec.pre.dw.w".into(), &[c, 1, 3, 3]);
            add("dec.pre.dw.b".into(), &[c]);
            add("dec.pre.out.w".into(), &[ks, c, 1, 1]);
            add("dec.pre.out.b".into(), &[ks]);
        }
        add("dec.in.w".into(), &[c, ks, 1, 1]);
        add("dec.in.b".into(), &[c]);
        for s in 0..cfg.stages {
            for b in 0..cfg.blocks_per_stage {
                block(&mut add, &format!("dec.main.{s}.{b}"));
            }
        }
        add("dec.head.w".into(), &[ch * p * p, c, 1, 1]);
        add("dec.head.b".into(), &[ch * p * p]);
        out
    }

    /// Random initial parameters: weights `N(0, gain^2 / fan_in)`, biases
    /// zero, head bias mid-gray.
    pub fn init_params(&self, rng: &mut RngStream) -> ParamMap {
        let mut params = ParamMap::new();
        for (name, shape) in self.layout() {
            let t = if name.ends_with(".b") {
                let fill = if name == "dec.head.b" { 0.5 } else { 0.0 };
                Tensor::full(&shape, fill)
            } else {
                let fan_in: usize = shape[1..].iter().product();
                let gain = match name.as_str() {
                    "dec.head.w" => 0.1,
                    "dec.pre.out.w" => 0.5,
                    n if n.ends_with(".pw.w") => 0.5,
                    _ => 1.0,
                };
                let std = gain / math::sqrt(fan_in as f64);
                let n: usize = shape.iter().product();
                Tensor::new(&shape, (0..n).map(|_| std * rng.normal()).collect())
                    .expect("layout shape")
            };
            params.insert(name, t);
        }
        params
    }

    /// Channel-state value fed to the auxiliary and preprocessing stages.
    pub fn snr_feature(&self, snr_db: f64) -> f64 {
        let (lo, hi) = (self.config.snr_min_db, self.config.snr_max_db);
        ((snr_db - lo) / (hi - lo)).clamp(0.0, 1.0)
    }

    /// `[B, 1, h, w]` planes holding each image's SNR feature.
    pub fn snr_planes(&self, snr_db: &[f64]) -> Tensor {
        let (h, w) = self.grid;
        let mut data = Vec::with_capacity(snr_db.len() * h * w);
        for &s in snr_db {
            data.extend(core::iter::repeat_n(self.snr_feature(s), h * w));
        }
        Tensor::new(&[snr_db.len(), 1, h, w], data).expect("plane shape")
    }

    fn register(&self, g: &mut Graph, params: &ParamMap) -> Result<BTreeMap<String, NodeId>> {
        let mut nodes = BTreeMap::new();
        for (name, shape) in self.layout() {
            let value = params
                .get(&name)
                .ok_or_else(|| Error::UnknownName(format!("missing parameter {name}")))?;
            if value.shape() != shape.as_slice() {
                return Err(Error::shape(
                    name.as_str(),
                    format!("expected {shape:?}, got {:?}", value.shape()),
                ));
            }
            nodes.insert(name.clone(), g.param(&name, value.clone())?);
        }
        if let Some(extra) = params.keys().find(|k| !nodes.contains_key(*k)) {
            return Err(Error::UnknownName(format!(
                "parameter {extra} not in codec layout"
            )));
        }
        Ok(nodes)
    }

    fn block(
        &self,
        g: &mut Graph,
        p: &BTreeMap<String, NodeId>,
        prefix: &str,
        f: NodeId,
    ) -> Result<NodeId> {
        let c = self.config.width;
        let z = g.conv2d(
            f,
            p[&format!("{prefix}.dw.w")],
            Some(p[&format!("{prefix}.dw.b")]),
            depthwise3x3(c),
        )?;
        let a = g.tanh(z);
        let y = g.conv2d(
            a,
            p[&format!("{prefix}.pw.w")],
            Some(p[&format!("{prefix}.pw.b")]),
            conv1x1(),
        )?;
        g.add(f, y)
    }

    /// One auxiliary stage: `2 * sigmoid(dw(tanh(pw([prev, tap, snr]))))`.
    pub fn aux_stage_node(
        &self,
        g: &mut Graph,
        p: &BTreeMap<String, NodeId>,
        stage: usize,
        prev_mask: NodeId,
        tap: NodeId,
        snr_plane: NodeId,
    ) -> Result<NodeId> {
        let c = self.config.width;
        let x = g.concat(&[prev_mask, tap, snr_plane], 1)?;
        let h = g.conv2d(
            x,
            p[&format!("enc.aux.{stage}.in.w")],
            Some(p[&format!("enc.aux.{stage}.in.b")]),
            conv1x1(),
        )?;
        let h = g.tanh(h);
        let z = g.conv2d(
            h,
            p[&format!("enc.aux.{stage}.dw.w")],
            Some(p[&format!("enc.aux.{stage}.dw.b")]),
            depthwise3x3(c),
        )?;
        let s = g.sigmoid(z);
        Ok(g.scale(s, 2.0))
    }

    /// Per-row `e / rms(e)` for `[B, K]` symbols.
    pub fn power_normalize_node(g: &mut Graph, e: NodeId) -> Result<NodeId> {
        let shape = g.shape(e).to_vec();
        let sq = g.square(e);
        let ss = g.sum_last(sq)?;
        let ms = g.scale(ss, 1.0 / shape[1] as f64);
        let rms = g.sqrt(ms);
        let rms = g.reshape(rms, &[shape[0], 1])?;
        let rms = g.broadcast(rms, &shape)?;
        g.div(e, rms)
    }

    /// Encoder pass over `x: [B, C, H, W]` with SNR planes `[B, 1, h, w]`.
    pub fn encoder_node(
        &self,
        g: &mut Graph,
        p: &BTreeMap<String, NodeId>,
        x: NodeId,
        snr_plane: NodeId,
    ) -> Result<EncoderNodes> {
        let cfg = &self.config;
        let batch = g.shape(x)[0];
        let (h, w) = self.grid;
        let mut f = g.conv2d(
            x,
            p["enc.stem.w"],
            Some(p["enc.stem.b"]),
            Conv2dSpec::new(cfg.patch, 0, 1),
        )?;
        let mut mask = if cfg.dual_pipeline {
            Some(g.constant(Tensor::ones(&[batch, cfg.width, h, w])))
        } else {
            None
        };
        for s in 0..cfg.stages {
            for b in 0..cfg.blocks_per_stage {
                f = self.block(g, p, &format!("enc.main.{s}.{b}"), f)?;
            }
            if let Some(prev) = mask {
                mask = Some(self.aux_stage_node(g, p, s, prev, f, snr_plane)?);
            }
        }
        let masked = match mask {
            Some(m) => g.mul(f, m)?,
            None => f,
        };
        let proj = g.conv2d(masked, p["enc.proj.w"], Some(p["enc.proj.b"]), conv1x1())?;
        let flat = g.reshape(proj, &[batch, self.symbol_channels * h * w])?;
        let embedding = if self.symbol_channels * h * w == self.symbols {
            flat
        } else {
            g.slice(flat, 1, 0, self.symbols)?
        };
        let transmitted = Self::power_normalize_node(g, embedding)?;
        Ok(EncoderNodes {
            features: f,
            mask,
            embedding,
            transmitted,
        })
    }

    fn to_planes(&self, g: &mut Graph, e: NodeId) -> Result<NodeId> {
        let batch = g.shape(e)[0];
        let (h, w) = self.grid;
        let full = self.symbol_channels * h * w;
        let padded = if full == self.symbols {
            e
        } else {
            g.pad(e, 1, 0, full - self.symbols)?
        };
        g.reshape(padded, &[batch, self.symbol_channels, h, w])
    }

    fn symbols_from_planes(&self, g: &mut Graph, planes: NodeId) -> Result<NodeId> {
        let batch = g.shape(planes)[0];
        let (h, w) = self.grid;
        let flat = g.reshape(planes, &[batch, self.symbol_channels * h * w])?;
        if self.symbol_channels * h * w == self.symbols {
            Ok(flat)
        } else {
            g.slice(flat, 1, 0, self.symbols)
        }
    }

    /// Residual denoising of received symbols `[B, K]`; identity when
    /// preprocessing is disabled.
    pub fn preprocess_node(
        &self,
        g: &mut Graph,
        p: &BTreeMap<String, NodeId>,
        received: NodeId,
        snr_plane: NodeId,
    ) -> Result<NodeId> {
        if !self.config.decoder_preprocess {
            return Ok(received);
        }
        let planes = self.to_planes(g, received)?;
        let x = g.concat(&[planes, snr_plane], 1)?;
        let hdn = g.conv2d(x, p["dec.pre.in.w"], Some(p["dec.pre.in.b"]), conv1x1())?;
        let hdn = g.tanh(hdn);
        let hdn = g.conv2d(
            hdn,
            p["dec.pre.dw.w"],
            Some(p["dec.pre.dw.b"]),
            depthwise3x3(self.config.width),
        )?;
        let corr = g.conv2d(hdn, p["dec.pre.out.w"], Some(p["dec.pre.out.b"]), conv1x1())?;
        let corr = self.symbols_from_planes(g, corr)?;
        g.add(received, corr)
    }

    /// Decoder pass from received symbols `[B, K]` to images `[B, C, H, W]`.
    pub fn decoder_node(
        &self,
        g: &mut Graph,
        p: &BTreeMap<String, NodeId>,
        received: NodeId,
        snr_plane: NodeId,
    ) -> Result<NodeId> {
        let cfg = &self.config;
        let batch = g.shape(received)[0];
        let (h, w) = self.grid;
        let (ch, pt) = (cfg.compression.channels, cfg.patch);
        let refined = self.preprocess_node(g, p, received, snr_plane)?;
        let planes = self.to_planes(g, refined)?;
        let mut f = g.conv2d(planes, p["dec.in.w"], Some(p["dec.in.b"]), conv1x1())?;
        for s in 0..cfg.stages {
            for b in 0..cfg.blocks_per_stage {
                f = self.block(g, p, &format!("dec.main.{s}.{b}"), f)?;
            }
        }
        let head = g.conv2d(f, p["dec.head.w"], Some(p["dec.head.b"]), conv1x1())?;
        let shuffled = g.reshape(head, &[batch, ch, pt, pt, h, w])?;
        let shuffled = g.permute(shuffled, &[0, 1, 4, 2, 5, 3])?;
        let image = g.reshape(shuffled, &[batch, ch, h * pt, w * pt])?;
        Ok(g.clamp(image, 0.0, 1.0))
    }

    /// Adds the channel between `transmitted` and the receiver: optional
    /// fading `Y = S H^T`, additive noise input, zero-forcing `Y W^T`.
    fn channel_node(&self, g: &mut Graph, transmitted: NodeId, fading: bool) -> Result<NodeId> {
        let batch = g.shape(transmitted)[0];
        let k = self.symbols;
        let noise = g.input(inputs::NOISE, &[batch, k])?;
        if fading {
            let ht = g.input(inputs::FADING_T, &[k, k])?;
            let zt = g.input(inputs::ZERO_FORCING_T, &[k, k])?;
            let faded = g.matmul(transmitted, ht)?;
            let y = g.add(faded, noise)?;
            g.matmul(y, zt)
        } else {
            g.add(transmitted, noise)
        }
    }

    /// Full training objective for a batch: encode, channel, decode, MSE,
    /// plus InfoNCE between the anchor embedding and a re-encoding of the same
    /// images under an independent SNR draw.
    pub fn training_graph(
        &self,
        params: &ParamMap,
        batch: usize,
        loss: LossConfig,
        fading: bool,
    ) -> Result<TrainingGraph> {
        let [c, hh, ww] = self.image_shape();
        let (h, w) = self.grid;
        let mut g = Graph::new();
        let p = self.register(&mut g, params)?;
        let x = g.input(inputs::IMAGE, &[batch, c, hh, ww])?;
        let snr = g.input(inputs::SNR, &[batch, 1, h, w])?;
        let enc = self.encoder_node(&mut g, &p, x, snr)?;
        let received = self.channel_node(&mut g, enc.transmitted, fading)?;
        let x_hat = self.decoder_node(&mut g, &p, received, snr)?;
        let mse = losses::mse_node(&mut g, x_hat, x)?;
        let (contrastive, total) = if loss.contrastive_weight != 0.0 {
            let snr_pos = g.input(inputs::SNR_POSITIVE, &[batch, 1, h, w])?;
            let pos = self.encoder_node(&mut g, &p, x, snr_pos)?;
            let cl =
                losses::infonce_node(&mut g, enc.embedding, pos.embedding, loss.temperature, true)?;
            let weighted = g.scale(cl, loss.contrastive_weight);
            (Some(cl), g.add(mse, weighted)?)
        } else {
            (None, mse)
        };
        g.set_output(total);
        Ok(TrainingGraph {
            graph: g,
            batch,
            mse,
            contrastive,
            total,
            reconstruction: x_hat,
        })
    }

    /// Encode, channel and decode without losses.
    pub fn inference_graph(
        &self,
        params: &ParamMap,
        batch: usize,
        fading: bool,
    ) -> Result<InferenceGraph> {
        let [c, hh, ww] = self.image_shape();
        let (h, w) = self.grid;
        let mut g = Graph::new();
        let p = self.register(&mut g, params)?;
        let x = g.input(inputs::IMAGE, &[batch, c, hh, ww])?;
        let snr = g.input(inputs::SNR, &[batch, 1, h, w])?;
        let enc = self.encoder_node(&mut g, &p, x, snr)?;
        let received = self.channel_node(&mut g, enc.transmitted, fading)?;
        let x_hat = self.decoder_node(&mut g, &p, received, snr)?;
        g.set_output(x_hat);
        Ok(InferenceGraph {
            graph: g,
            batch,
            reconstruction: x_hat,
        })
    }

    fn batched(&self, x: &Tensor) -> Result<Tensor> {
        let shape = self.image_shape();
        if x.shape() == shape.as_slice() {
            let mut s = Vec::with_capacity(4);
            s.push(1);
            s.extend_from_slice(&shape);
            return x.clone().reshape(&s);
        }
        if x.shape().len() == 4 && x.shape()[1..] == shape {
            return Ok(x.clone());
        }
        Err(Error::shape(
            "codec input",
            format!(
                "expected [B, {}, {}, {}], got {:?}",
                shape[0],
                shape[1],
                shape[2],
                x.shape()
            ),
        ))
    }

    fn check_stage(&self, what: &str, t: &Tensor) -> Result<()> {
        if t.all_finite() {
            Ok(())
        } else {
            Err(Error::numeric(what.to_string()))
        }
    }

    /// Power-normalized symbols `[B, K]` for images `[C, H, W]` or
    /// `[B, C, H, W]`, all sent at `snr_db`.
    pub fn encode(&self, params: &ParamMap, x: &Tensor, snr_db: f64) -> Result<Tensor> {
        Ok(self.encode_detailed(params, x, snr_db)?.transmitted)
    }

    /// Encoder intermediates: features, mask, raw embedding, transmitted.
    pub fn encode_detailed(
        &self,
        params: &ParamMap,
        x: &Tensor,
        snr_db: f64,
    ) -> Result<EncodeOutput> {
        if !snr_db.is_finite() {
            return Err(Error::config("snr_db", "must be finite"));
        }
        let x = self.batched(x)?;
        let batch = x.shape()[0];
        let (h, w) = self.grid;
        let mut g = Graph::new();
        let p = self.register(&mut g, params)?;
        let xi = g.input(inputs::IMAGE, x.shape())?;
        let snr = g.input(inputs::SNR, &[batch, 1, h, w])?;
        let enc = self.encoder_node(&mut g, &p, xi, snr)?;
        g.set_output(enc.transmitted);
        let mut feed = Feed::new();
        feed.insert(inputs::IMAGE.into(), x);
        feed.insert(
            inputs::SNR.into(),
            self.snr_planes(&alloc::vec![snr_db; batch]),
        );
        let transmitted = g.forward(&feed).map_err(|e| match e {
            Error::Numeric { context } => Error::numeric(format!("encoder: {context}")),
            other => other,
        })?;
        let features = g.value(enc.features).expect("evaluated").clone();
        let mask = enc.mask.map(|m| g.value(m).expect("evaluated").clone());
        let embedding = g.value(enc.embedding).expect("evaluated").clone();
        self.check_stage("encoder embedding", &embedding)?;
        Ok(EncodeOutput {
            features,
            mask,
            embedding,
            transmitted,
        })
    }

    /// Mask of auxiliary stage `stage` given the main tap `[B, C, h, w]`,
    /// the previous mask state of the same shape, and the SNR.
    pub fn aux_mask(
        &self,
        params: &ParamMap,
        stage: usize,
        tap: &Tensor,
        prev_mask: &Tensor,
        snr_db: f64,
    ) -> Result<Tensor> {
        if !self.config.dual_pipeline || stage >= self.config.stages {
            return Err(Error::config("aux_mask", "no such auxiliary stage"));
        }
        let (h, w) = self.grid;
        let batch = tap.shape().first().copied().unwrap_or(0);
        let mut g = Graph::new();
        let mut p = BTreeMap::new();
        for suffix in ["in.w", "in.b", "dw.w", "dw.b"] {
            let name = format!("enc.aux.{stage}.{suffix}");
            let v = params
                .get(&name)
                .ok_or_else(|| Error::UnknownName(name.clone()))?;
            p.insert(name.clone(), g.param(&name, v.clone())?);
        }
        let t = g.input("tap", tap.shape())?;
        let m = g.input("prev", prev_mask.shape())?;
        let s = g.input(inputs::SNR, &[batch, 1, h, w])?;
        let out = self.aux_stage_node(&mut g, &p, stage, m, t, s)?;
        g.set_output(out);
        let mut feed = Feed::new();
        feed.insert("tap".into(), tap.clone());
        feed.insert("prev".into(), prev_mask.clone());
        feed.insert(
            inputs::SNR.into(),
            self.snr_planes(&alloc::vec![snr_db; batch]),
        );
        g.forward(&feed)
    }

    /// Refined symbols `Emb_R'` for received symbols `[B, K]`.
    pub fn preprocess(&self, params: &ParamMap, received: &Tensor, snr_db: f64) -> Result<Tensor> {
        self.receiver(params, received, snr_db, true)
    }

    /// Reconstruction `[B, C, H, W]` in `[0, 1]` from received symbols.
    pub fn decode(&self, params: &ParamMap, received: &Tensor, snr_db: f64) -> Result<Tensor> {
        self.receiver(params, received, snr_db, false)
    }

    fn receiver(
        &self,
        params: &ParamMap,
        received: &Tensor,
        snr_db: f64,
        only_pre: bool,
    ) -> Result<Tensor> {
        if received.shape().len() != 2 || received.shape()[1] != self.symbols {
            return Err(Error::shape(
                "decoder input",
                format!("expected [B, {}], got {:?}", self.symbols, received.shape()),
            ));
        }
        let batch = received.shape()[0];
        let (h, w) = self.grid;
        let mut g = Graph::new();
        let p = self.register(&mut g, params)?;
        let r = g.input("received", received.shape())?;
        let s = g.input(inputs::SNR, &[batch, 1, h, w])?;
        let out = if only_pre {
            self.preprocess_node(&mut g, &p, r, s)?
        } else {
            self.decoder_node(&mut g, &p, r, s)?
        };
        g.set_output(out);
        let mut feed = Feed::new();
        feed.insert("received".into(), received.clone());
        feed.insert(
            inputs::SNR.into(),
            self.snr_planes(&alloc::vec![snr_db; batch]),
        );
        g.forward(&feed)
    }
}

/// Intermediate tensors of [`Codec::encode_detailed`].
#[derive(Debug, Clone, PartialEq)]
pub struct EncodeOutput {
    pub features: Tensor,
    pub mask: Option<Tensor>,
    pub embedding: Tensor,
    pub transmitted: Tensor,
}

/// Elementwise `features * mask`.
pub fn apply_mask(features: &Tensor, mask: &Tensor) -> Result<Tensor> {
    features.zip_map(mask, |f, m| f * m).map_err(|_| {
        Error::shape(
            "apply_mask",
            format!("{:?} vs {:?}", features.shape(), mask.shape()),
        )
    })
}

/// Splits codec parameters into the shared (`u`) and personalized (`v`)
/// blocks. With `personalized = false` every parameter is shared.
pub fn partition_params(params: &ParamMap, personalized: bool) -> Result<(ParamMap, ParamMap)> {
    let mut u = ParamMap::new();
    let mut v = ParamMap::new();
    for (name, t) in params {
        let role = ParamRole::of(name)?;
        if personalized && role.is_personal() {
            v.insert(name.clone(), t.clone());
        } else {
            u.insert(name.clone(), t.clone());
        }
    }
    Ok((u, v))
}
