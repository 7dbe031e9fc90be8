//! The saliency network: an inflated depthwise-separable encoder with four
//! feature taps feeding three decoders of different shape (per-tap map
//! heads, U-Net-style progressive upsampling, deep-to-shallow stream
//! aggregation), whose six maps a learned 1x1 convolution fuses into the
//! final prediction.
//!
//! Every emitted map is softmax-normalized over its spatial plane, shaped
//! [N, 1, H, W] in single-output mode and [N, T, H, W] in multi-output
//! mode.

use std::rc::Rc;

use crate::graph::{concat, Parameter, Tape, Var};
use crate::nn::{
    softmax_hw, temporal_mean, upsample, Activation, BatchNorm3d, Conv3dLayer, ConvBnAct,
    InvertedResidualBlock, NormMode, ResizeMode,
};
use crate::tensor::Tensor;
use crate::{Error, Result};

use rand_chacha::ChaCha8Rng;

/// Uniform channel scaling. Counts round up and never drop below 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Width {
    Full,
    Half,
    Quarter,
}

impl Width {
    pub fn divisor(self) -> usize {
        match self {
            Width::Full => 1,
            Width::Half => 2,
            Width::Quarter => 4,
        }
    }

    /// One halving step down, if any remains.
    pub fn narrower(self) -> Option<Width> {
        match self {
            Width::Full => Some(Width::Half),
            Width::Half => Some(Width::Quarter),
            Width::Quarter => None,
        }
    }

    pub fn scale(self, channels: usize) -> usize {
        channels.div_ceil(self.divisor()).max(1)
    }

    pub fn label(self) -> &'static str {
        match self {
            Width::Full => "full",
            Width::Half => "half",
            Width::Quarter => "quarter",
        }
    }

    /// Accepts both the label and the numeric form (1, 0.5, 0.25).
    pub fn parse(s: &str) -> Option<Width> {
        match s {
            "full" | "1" | "1.0" => Some(Width::Full),
            "half" | "0.5" => Some(Width::Half),
            "quarter" | "0.25" => Some(Width::Quarter),
            _ => None,
        }
    }
}

/// Temporal output contract: one pooled map per clip, or one map per frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Miso,
    Mimo,
}

impl Mode {
    pub fn label(self) -> &'static str {
        match self {
            Mode::Miso => "miso",
            Mode::Mimo => "mimo",
        }
    }

    pub fn parse(s: &str) -> Option<Mode> {
        match s {
            "miso" => Some(Mode::Miso),
            "mimo" => Some(Mode::Mimo),
            _ => None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ModelConfig {
    pub width: Width,
    pub mode: Mode,
    pub t_clip: usize,
    pub spatial: (usize, usize),
    pub stem_channels: usize,
    pub tap_channels: [usize; 4],
    pub blocks: [usize; 4],
    pub expansion: usize,
    pub temporal_kernel: usize,
    pub d1_hidden: usize,
    pub d2_channels: [usize; 3],
    pub d3_channels: [usize; 3],
}

impl ModelConfig {
    /// Small stack sized for single-core training runs.
    pub fn desk() -> Self {
        ModelConfig {
            width: Width::Full,
            mode: Mode::Mimo,
            t_clip: 16,
            spatial: (48, 64),
            stem_channels: 8,
            tap_channels: [12, 24, 64, 192],
            blocks: [1, 2, 1, 1],
            expansion: 3,
            temporal_kernel: 3,
            d1_hidden: 8,
            d2_channels: [40, 20, 12],
            d3_channels: [32, 16, 12],
        }
    }

    /// Full-scale configuration; profiled but not trained here.
    pub fn paper() -> Self {
        ModelConfig {
            width: Width::Full,
            mode: Mode::Mimo,
            t_clip: 16,
            spatial: (192, 256),
            stem_channels: 16,
            tap_channels: [24, 32, 96, 320],
            blocks: [2, 3, 4, 3],
            expansion: 6,
            temporal_kernel: 3,
            d1_hidden: 32,
            d2_channels: [128, 64, 32],
            d3_channels: [96, 48, 32],
        }
    }

    /// Number of intermediate per-tap maps; fixed by the architecture.
    /// Smallest legal geometry; handy for smoke tests and gradient checks.
    pub fn tiny() -> ModelConfig {
        ModelConfig {
            t_clip: 4,
            spatial: (16, 16),
            stem_channels: 4,
            tap_channels: [4, 6, 8, 12],
            blocks: [1, 1, 1, 1],
            expansion: 2,
            d1_hidden: 4,
            d2_channels: [8, 6, 4],
            d3_channels: [8, 6, 4],
            ..ModelConfig::desk()
        }
    }

    pub const N_INTERMEDIATE: usize = 4;

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.spatial;
        // Five spatial halvings round up, so anything from 16 keeps every
        // tap extent at least 1; sizes need not divide evenly.
        if h < 16 || w < 16 {
            return Err(Error::Geometry(format!(
                "spatial size {h}x{w} must be at least 16x16"
            )));
        }
        if self.t_clip < 1 {
            return Err(Error::Config("clip length must be at least 1".into()));
        }
        if self.expansion < 1 {
            return Err(Error::Config("expansion ratio must be at least 1".into()));
        }
        if self.temporal_kernel % 2 == 0 {
            return Err(Error::Config("temporal kernel must be odd".into()));
        }
        for &b in &self.blocks {
            if b < 1 {
                return Err(Error::Config("every stage needs at least one block".into()));
            }
        }
        for &c in self
            .tap_channels
            .iter()
            .chain(self.d2_channels.iter())
            .chain(self.d3_channels.iter())
            .chain([&self.stem_channels, &self.d1_hidden])
        {
            if c < 1 {
                return Err(Error::Config("channel counts must be positive".into()));
            }
        }
        Ok(())
    }

    /// Tap channel counts after width scaling.
    pub fn scaled_taps(&self) -> [usize; 4] {
        self.tap_channels.map(|c| self.width.scale(c))
    }

    /// Temporal extent of emitted maps.
    pub fn t_out(&self) -> usize {
        match self.mode {
            Mode::Miso => 1,
            Mode::Mimo => self.t_clip,
        }
    }

    /// The same stack one halving step narrower.
    pub fn narrowed(&self) -> Option<ModelConfig> {
        let mut c = self.clone();
        c.width = self.width.narrower()?;
        Some(c)
    }
}

/// One per-tap map head: pointwise reduction, pointwise logit.
pub(crate) struct D1Head {
    pub(crate) reduce: ConvBnAct,
    pub(crate) logit: Conv3dLayer,
}

/// U-Net-style merge: concatenate, pointwise mix, depthwise refine.
pub(crate) struct D2Merge {
    pub(crate) pw: ConvBnAct,
    pub(crate) dw: ConvBnAct,
}

/// Aggregation merge: linear pointwise projection of the concatenation,
/// depthwise refinement, plus a pointwise residual shortcut; the
/// activation fires only after the streams join.
pub(crate) struct D3Merge {
    pub(crate) pw: ConvBnAct,
    pub(crate) dw: ConvBnAct,
    pub(crate) shortcut: Conv3dLayer,
}

pub struct SaliencyNet {
    pub config: ModelConfig,
    pub(crate) stem_dw: ConvBnAct,
    pub(crate) stem_pw: ConvBnAct,
    pub(crate) stages: Vec<Vec<InvertedResidualBlock>>,
    pub(crate) d1: Vec<D1Head>,
    pub(crate) d2_merges: Vec<D2Merge>,
    pub(crate) d2_logit: Conv3dLayer,
    pub(crate) d3_merges: Vec<D3Merge>,
    pub(crate) d3_logit: Conv3dLayer,
    pub(crate) fusion: Conv3dLayer,
}

/// The six decoder maps plus their fusion, as graph variables. Shapes are
/// [N, 1, H, W] or [N, T, H, W] depending on mode.
pub struct MapSetVar {
    pub intermediate: Vec<Var>,
    pub d2: Var,
    pub d3: Var,
    pub fused: Var,
}

impl MapSetVar {
    /// The six pre-fusion maps, D1 first.
    pub fn streams(&self) -> Vec<&Var> {
        let mut v: Vec<&Var> = self.intermediate.iter().collect();
        v.push(&self.d2);
        v.push(&self.d3);
        v
    }

    pub fn values(&self) -> SaliencyMaps {
        SaliencyMaps {
            intermediate: self.intermediate.iter().map(|v| v.value()).collect(),
            d2: self.d2.value(),
            d3: self.d3.value(),
            fused: self.fused.value(),
        }
    }
}

/// Plain-tensor snapshot of a map set.
pub struct SaliencyMaps {
    pub intermediate: Vec<Tensor>,
    pub d2: Tensor,
    pub d3: Tensor,
    pub fused: Tensor,
}

impl SaliencyNet {
    pub fn new(config: ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let w = config.width;
        let kt = config.temporal_kernel;
        let stem_c = w.scale(config.stem_channels);
        let taps = config.scaled_taps();

        // Separable stem, spatial stride 2.
        let stem_dw = ConvBnAct::new(
            "stem.dw",
            rng,
            3,
            3,
            (kt, 3, 3),
            (1, 2, 2),
            3,
            Activation::Relu6,
        )?;
        let stem_pw = ConvBnAct::new(
            "stem.pw",
            rng,
            3,
            stem_c,
            (1, 1, 1),
            (1, 1, 1),
            1,
            Activation::Relu6,
        )?;

        let mut stages = Vec::new();
        let mut c_prev = stem_c;
        // Hidden counts scale from the full-width product, not from the
        // scaled input, so every width step halves them exactly.
        let mut c_prev_full = config.stem_channels;
        for (si, (&c_tap, &n_blocks)) in taps.iter().zip(&config.blocks).enumerate() {
            let mut blocks = Vec::new();
            for bi in 0..n_blocks {
                let stride = if bi == 0 { (1, 2, 2) } else { (1, 1, 1) };
                let c_in = if bi == 0 { c_prev } else { c_tap };
                let c_in_full = if bi == 0 { c_prev_full } else { config.tap_channels[si] };
                let hidden = (config.expansion > 1)
                    .then(|| w.scale(c_in_full * config.expansion));
                blocks.push(InvertedResidualBlock::new(
                    &format!("enc.s{si}.b{bi}"),
                    rng,
                    c_in,
                    c_tap,
                    hidden,
                    (kt, 3, 3),
                    stride,
                )?);
            }
            stages.push(blocks);
            c_prev = c_tap;
            c_prev_full = config.tap_channels[si];
        }

        let d1_hidden = w.scale(config.d1_hidden);
        let mut d1 = Vec::new();
        for (k, &c_tap) in taps.iter().enumerate() {
            d1.push(D1Head {
                reduce: ConvBnAct::new(
                    &format!("d1.h{k}.reduce"),
                    rng,
                    c_tap,
                    d1_hidden,
                    (1, 1, 1),
                    (1, 1, 1),
                    1,
                    Activation::Relu6,
                )?,
                logit: Conv3dLayer::new(
                    &format!("d1.h{k}.logit"),
                    rng,
                    d1_hidden,
                    1,
                    (1, 1, 1),
                    (1, 1, 1),
                    1,
                    true,
                )?,
            });
        }

        // D2 walks tap4 up through taps 3, 2, 1.
        let d2c = config.d2_channels.map(|c| w.scale(c));
        let mut d2_merges = Vec::new();
        let mut c_stream = taps[3];
        for (i, &c_out) in d2c.iter().enumerate() {
            let c_skip = taps[2 - i];
            d2_merges.push(D2Merge {
                pw: ConvBnAct::new(
                    &format!("d2.m{i}.pw"),
                    rng,
                    c_stream + c_skip,
                    c_out,
                    (1, 1, 1),
                    (1, 1, 1),
                    1,
                    Activation::Relu6,
                )?,
                dw: ConvBnAct::new(
                    &format!("d2.m{i}.dw"),
                    rng,
                    c_out,
                    c_out,
                    (kt, 3, 3),
                    (1, 1, 1),
                    c_out,
                    Activation::Relu6,
                )?,
            });
            c_stream = c_out;
        }
        let d2_logit =
            Conv3dLayer::new("d2.logit", rng, c_stream, 1, (1, 1, 1), (1, 1, 1), 1, true)?;

        let d3c = config.d3_channels.map(|c| w.scale(c));
        let mut d3_merges = Vec::new();
        let mut c_stream = taps[3];
        for (i, &c_out) in d3c.iter().enumerate() {
            let c_cat = c_stream + taps[2 - i];
            d3_merges.push(D3Merge {
                pw: ConvBnAct::new(
                    &format!("d3.m{i}.pw"),
                    rng,
                    c_cat,
                    c_out,
                    (1, 1, 1),
                    (1, 1, 1),
                    1,
                    Activation::Linear,
                )?,
                dw: ConvBnAct::new(
                    &format!("d3.m{i}.dw"),
                    rng,
                    c_out,
                    c_out,
                    (kt, 3, 3),
                    (1, 1, 1),
                    c_out,
                    Activation::Linear,
                )?,
                shortcut: Conv3dLayer::new(
                    &format!("d3.m{i}.shortcut"),
                    rng,
                    c_cat,
                    c_out,
                    (1, 1, 1),
                    (1, 1, 1),
                    1,
                    false,
                )?,
            });
            c_stream = c_out;
        }
        let d3_logit =
            Conv3dLayer::new("d3.logit", rng, c_stream, 1, (1, 1, 1), (1, 1, 1), 1, true)?;

        // Learned mixing of the six maps, starting from a uniform average.
        let fusion = Conv3dLayer::from_parts(
            "fusion",
            Tensor::full(&[1, 6, 1, 1, 1], 1.0 / 6.0),
            Some(Tensor::zeros(&[1])),
            (1, 1, 1),
            (0, 0, 0),
            1,
        )?;

        Ok(SaliencyNet {
            config,
            stem_dw,
            stem_pw,
            stages,
            d1,
            d2_merges,
            d2_logit,
            d3_merges,
            d3_logit,
            fusion,
        })
    }

    fn check_clip(&self, clip: &Var) -> Result<()> {
        let shape = clip.shape();
        let (h, w) = self.config.spatial;
        let want = [shape[0], 3, self.config.t_clip, h, w];
        if shape.len() != 5 || shape[1..] != want[1..] {
            return Err(Error::Shape(format!(
                "clip shape {:?} does not match config [N, 3, {}, {}, {}]",
                shape, self.config.t_clip, h, w
            )));
        }
        Ok(())
    }

    /// Runs the encoder, returning the four feature taps at strides
    /// 4, 8, 16, 32.
    pub fn encode(&self, tape: &Tape, clip: &Var, mode: NormMode) -> Result<Vec<Var>> {
        self.check_clip(clip)?;
        let mut x = self.stem_dw.forward(tape, clip, mode)?;
        x = self.stem_pw.forward(tape, &x, mode)?;
        let mut taps = Vec::with_capacity(4);
        for stage in &self.stages {
            for block in stage {
                x = block.forward(tape, &x, mode)?;
            }
            taps.push(x.clone());
        }
        Ok(taps)
    }

    /// Pools the temporal axis in single-output mode; passes through in
    /// multi-output mode.
    fn head_input(&self, x: &Var) -> Result<Var> {
        match self.config.mode {
            Mode::Miso => temporal_mean(x),
            Mode::Mimo => Ok(x.clone()),
        }
    }

    /// Logit map -> full-resolution normalized map [N, t_out, H, W].
    fn finish_map(&self, logit: &Var) -> Result<Var> {
        let (h, w) = self.config.spatial;
        let t_out = self.config.t_out();
        let up = upsample(logit, (t_out, h, w), ResizeMode::Trilinear)?;
        let n = up.shape()[0];
        softmax_hw(&up)?.reshape(&[n, t_out, h, w])
    }

    /// Four per-tap maps. Tap k feeds head k only.
    pub fn decode_d1(&self, tape: &Tape, taps: &[Var], mode: NormMode) -> Result<Vec<Var>> {
        if taps.len() != ModelConfig::N_INTERMEDIATE {
            return Err(Error::Shape(format!("expected 4 taps, got {}", taps.len())));
        }
        let mut maps = Vec::with_capacity(4);
        for (head, tap) in self.d1.iter().zip(taps) {
            let x = self.head_input(tap)?;
            let x = head.reduce.forward(tape, &x, mode)?;
            let logit = head.logit.forward(tape, &x)?;
            maps.push(self.finish_map(&logit)?);
        }
        Ok(maps)
    }

    /// U-Net-style decoding: the deepest tap is upsampled step by step and
    /// merged with each shallower tap.
    pub fn decode_d2(&self, tape: &Tape, taps: &[Var], mode: NormMode) -> Result<Var> {
        let mut y = taps[3].clone();
        for (i, merge) in self.d2_merges.iter().enumerate() {
            let skip = &taps[2 - i];
            let s = skip.shape();
            y = upsample(&y, (s[2], s[3], s[4]), ResizeMode::Trilinear)?;
            let cat = concat(&[&y, skip], 1)?;
            let m = merge.pw.forward(tape, &cat, mode)?;
            y = merge.dw.forward(tape, &m, mode)?;
        }
        let pooled = self.head_input(&y)?;
        let logit = self.d2_logit.forward(tape, &pooled)?;
        self.finish_map(&logit)
    }

    /// Deep-to-shallow aggregation with the merge outputs exposed for
    /// reachability tests.
    pub fn decode_d3_stages(
        &self,
        tape: &Tape,
        taps: &[Var],
        mode: NormMode,
    ) -> Result<(Vec<Var>, Var)> {
        let mut y = taps[3].clone();
        let mut stages = Vec::with_capacity(3);
        for (i, merge) in self.d3_merges.iter().enumerate() {
            let skip = &taps[2 - i];
            let s = skip.shape();
            y = upsample(&y, (s[2], s[3], s[4]), ResizeMode::Trilinear)?;
            let cat = concat(&[&y, skip], 1)?;
            let main = merge.pw.forward(tape, &cat, mode)?;
            let main = merge.dw.forward(tape, &main, mode)?;
            let res = merge.shortcut.forward(tape, &cat)?;
            y = main.add(&res)?.relu6();
            stages.push(y.clone());
        }
        let pooled = self.head_input(&y)?;
        let logit = self.d3_logit.forward(tape, &pooled)?;
        Ok((stages, self.finish_map(&logit)?))
    }

    pub fn decode_d3(&self, tape: &Tape, taps: &[Var], mode: NormMode) -> Result<Var> {
        Ok(self.decode_d3_stages(tape, taps, mode)?.1)
    }

    /// Mixes six same-shaped maps with the learned 1x1 convolution and
    /// renormalizes.
    pub fn fuse(&self, tape: &Tape, maps: &[&Var]) -> Result<Var> {
        if maps.len() != 6 {
            return Err(Error::Shape(format!("fusion takes 6 maps, got {}", maps.len())));
        }
        let first = maps[0].shape();
        for m in maps {
            if m.shape() != first {
                return Err(Error::Shape(format!(
                    "fusion maps disagree: {:?} vs {:?}",
                    first,
                    m.shape()
                )));
            }
        }
        let (n, t, h, w) = (first[0], first[1], first[2], first[3]);
        let lifted: Vec<Var> = maps
            .iter()
            .map(|m| m.reshape(&[n, 1, t, h, w]))
            .collect::<Result<_>>()?;
        let refs: Vec<&Var> = lifted.iter().collect();
        let stacked = concat(&refs, 1)?;
        let mixed = self.fusion.forward(tape, &stacked)?;
        softmax_hw(&mixed)?.reshape(&[n, t, h, w])
    }

    /// Full forward pass: encoder, three decoders, fusion.
    pub fn forward(&self, tape: &Tape, clip: &Var, mode: NormMode) -> Result<MapSetVar> {
        let taps = self.encode(tape, clip, mode)?;
        let intermediate = self.decode_d1(tape, &taps, mode)?;
        let d2 = self.decode_d2(tape, &taps, mode)?;
        let d3 = self.decode_d3(tape, &taps, mode)?;
        let fused = {
            let mut streams: Vec<&Var> = intermediate.iter().collect();
            streams.push(&d2);
            streams.push(&d3);
            self.fuse(tape, &streams)?
        };
        Ok(MapSetVar {
            intermediate,
            d2,
            d3,
            fused,
        })
    }

    /// Trainable parameters in deterministic structural order.
    pub fn params(&self) -> Vec<Rc<Parameter>> {
        let mut out = Vec::new();
        self.stem_dw.params(&mut out);
        self.stem_pw.params(&mut out);
        for stage in &self.stages {
            for block in stage {
                block.params(&mut out);
            }
        }
        for head in &self.d1 {
            head.reduce.params(&mut out);
            head.logit.params(&mut out);
        }
        for m in &self.d2_merges {
            m.pw.params(&mut out);
            m.dw.params(&mut out);
        }
        self.d2_logit.params(&mut out);
        for m in &self.d3_merges {
            m.pw.params(&mut out);
            m.dw.params(&mut out);
            m.shortcut.params(&mut out);
        }
        self.d3_logit.params(&mut out);
        self.fusion.params(&mut out);
        out
    }

    /// Normalization layers in the same structural order as [`params`].
    pub fn norms(&self) -> Vec<&BatchNorm3d> {
        let mut out: Vec<&BatchNorm3d> = vec![&self.stem_dw.bn, &self.stem_pw.bn];
        for stage in &self.stages {
            for block in stage {
                if let Some(e) = &block.expand {
                    out.push(&e.bn);
                }
                out.push(&block.depthwise.bn);
                out.push(&block.project.bn);
            }
        }
        for head in &self.d1 {
            out.push(&head.reduce.bn);
        }
        for m in &self.d2_merges {
            out.push(&m.pw.bn);
            out.push(&m.dw.bn);
        }
        for m in &self.d3_merges {
            out.push(&m.pw.bn);
            out.push(&m.dw.bn);
        }
        out
    }

    /// Named tensors for checkpointing: every parameter, then every
    /// normalization layer's running statistics.
    pub fn state(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = self
            .params()
            .iter()
            .map(|p| (p.name().to_string(), p.value().clone()))
            .collect();
        for bn in self.norms() {
            out.push((format!("{}.running_mean", bn.name()), bn.running_mean()));
            out.push((format!("{}.running_var", bn.name()), bn.running_var()));
        }
        out
    }

    /// Restores state captured by [`state`]. Every entry must match an
    /// existing tensor by name and shape, and every tensor must be covered.
    pub fn load_state(&self, entries: &[(String, Tensor)]) -> Result<()> {
        use std::collections::HashMap;
        let mut by_name: HashMap<&str, &Tensor> =
            entries.iter().map(|(n, t)| (n.as_str(), t)).collect();
        if by_name.len() != entries.len() {
            return Err(Error::Data("duplicate names in state".into()));
        }
        for p in self.params() {
            let t = by_name.remove(p.name()).ok_or_else(|| {
                Error::Data(format!("state is missing parameter {}", p.name()))
            })?;
            if t.shape() != p.shape() {
                return Err(Error::Shape(format!(
                    "state tensor {} has shape {:?}, expected {:?}",
                    p.name(),
                    t.shape(),
                    p.shape()
                )));
            }
            p.set_value(t.clone());
        }
        for bn in self.norms() {
            let mean_name = format!("{}.running_mean", bn.name());
            let var_name = format!("{}.running_var", bn.name());
            let m = by_name
                .remove(mean_name.as_str())
                .ok_or_else(|| Error::Data(format!("state is missing {mean_name}")))?;
            let v = by_name
                .remove(var_name.as_str())
                .ok_or_else(|| Error::Data(format!("state is missing {var_name}")))?;
            bn.set_running(m.clone(), v.clone())?;
        }
        if let Some((name, _)) = by_name.into_iter().next() {
            return Err(Error::Data(format!("state has unknown tensor {name}")));
        }
        Ok(())
    }

    pub fn n_params(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }

    /// Read-only access for the profiler and reduction: encoder stages.
    pub fn encoder_stages(&self) -> &[Vec<InvertedResidualBlock>] {
        &self.stages
    }

    pub fn stem(&self) -> (&ConvBnAct, &ConvBnAct) {
        (&self.stem_dw, &self.stem_pw)
    }

    pub fn fusion_layer(&self) -> &Conv3dLayer {
        &self.fusion
    }

    pub fn d3_merge_count(&self) -> usize {
        self.d3_merges.len()
    }
}
