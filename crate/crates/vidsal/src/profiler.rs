//! Analytic multiply-accumulate and parameter accounting.
//!
//! Counts are exact and per batch item. One MAC is one multiply plus one
//! add; a convolution output element costs (C_in/groups)·kT·kH·kW MACs
//! regardless of padding overlap, because padded positions still occupy a
//! slot in the kernel loop. Normalization and activation rows are listed
//! with zero MACs so the table accounts for every layer the forward pass
//! touches; trilinear interpolation costs 7 MACs per output element (the
//! lerp tree over 8 corners), nearest costs none.

use crate::model::{Mode, SaliencyNet};
use crate::nn::{Activation, BatchNorm3d, Conv3dLayer, ConvBnAct, InvertedResidualBlock, Triple};
use crate::{Error, Result};

/// Per-item feature shape as it flows through the network: [C, T, H, W].
pub type FeatShape = [usize; 4];

/// One row of the cost table.
#[derive(Debug, Clone)]
pub struct LayerCost {
    pub name: String,
    pub output_shape: FeatShape,
    pub macs: u64,
    pub params: u64,
}

/// Full cost accounting for one configured model.
#[derive(Debug, Clone)]
pub struct CostReport {
    pub mode: Mode,
    pub layers: Vec<LayerCost>,
    /// MACs for a single forward pass, per batch item.
    pub total_macs: u64,
    pub total_params: u64,
    /// Saliency frames produced by one pass (1 single-output, T otherwise).
    pub maps_per_forward: usize,
    /// MACs to produce 16 maps under this model's own mode.
    pub cost_16: u64,
    /// The same figure for both modes of this config, for comparison.
    pub cost_16_single: u64,
    pub cost_16_multi: u64,
}

fn out_extent(d: usize, k: usize, s: usize, p: usize) -> Result<usize> {
    let padded = d + 2 * p;
    if padded < k {
        return Err(Error::Geometry(format!(
            "input extent {d} with padding {p} is smaller than kernel {k}"
        )));
    }
    Ok((padded - k) / s + 1)
}

/// Output shape of a convolution applied to a [C, T, H, W] feature map.
pub fn conv_output_shape(layer: &Conv3dLayer, input: FeatShape) -> Result<FeatShape> {
    if input[0] != layer.c_in() {
        return Err(Error::Shape(format!(
            "layer expects {} input channels, feature map has {}",
            layer.c_in(),
            input[0]
        )));
    }
    let (kt, kh, kw) = layer.kernel();
    let (st, sh, sw) = layer.stride;
    let (pt, ph, pw) = layer.padding;
    Ok([
        layer.c_out(),
        out_extent(input[1], kt, st, pt)?,
        out_extent(input[2], kh, sh, ph)?,
        out_extent(input[3], kw, sw, pw)?,
    ])
}

/// Exact MAC and parameter count for one convolution layer on the given
/// per-item input shape.
pub fn count_layer(layer: &Conv3dLayer, input: FeatShape) -> Result<(u64, u64)> {
    let out = conv_output_shape(layer, input)?;
    let (kt, kh, kw) = layer.kernel();
    let cpg = layer.c_in() / layer.groups;
    let macs = layer.c_out() as u64
        * cpg as u64
        * (kt * kh * kw) as u64
        * (out[1] * out[2] * out[3]) as u64;
    let mut params = layer.weight.numel() as u64;
    if let Some(b) = &layer.bias {
        params += b.numel() as u64;
    }
    Ok((macs, params))
}

/// Walks a model mirroring its forward pass, accumulating rows.
struct Walker {
    rows: Vec<LayerCost>,
}

impl Walker {
    fn new() -> Self {
        Walker { rows: Vec::new() }
    }

    fn conv(&mut self, name: &str, layer: &Conv3dLayer, input: FeatShape) -> Result<FeatShape> {
        let out = conv_output_shape(layer, input)?;
        let (macs, params) = count_layer(layer, input)?;
        self.rows.push(LayerCost {
            name: name.to_string(),
            output_shape: out,
            macs,
            params,
        });
        Ok(out)
    }

    fn norm(&mut self, name: &str, bn: &BatchNorm3d, shape: FeatShape) {
        self.rows.push(LayerCost {
            name: format!("{name}.bn"),
            output_shape: shape,
            macs: 0,
            params: 2 * bn.channels() as u64,
        });
    }

    fn zero(&mut self, name: String, shape: FeatShape) {
        self.rows.push(LayerCost {
            name,
            output_shape: shape,
            macs: 0,
            params: 0,
        });
    }

    fn cba(&mut self, name: &str, layer: &ConvBnAct, input: FeatShape) -> Result<FeatShape> {
        let out = self.conv(&format!("{name}.conv"), &layer.conv, input)?;
        self.norm(name, &layer.bn, out);
        if matches!(layer.act, Activation::Relu6) {
            self.zero(format!("{name}.relu6"), out);
        }
        Ok(out)
    }

    fn block(
        &mut self,
        name: &str,
        block: &InvertedResidualBlock,
        input: FeatShape,
    ) -> Result<FeatShape> {
        let mut x = input;
        if let Some(expand) = &block.expand {
            x = self.cba(&format!("{name}.expand"), expand, x)?;
        }
        x = self.cba(&format!("{name}.depthwise"), &block.depthwise, x)?;
        self.cba(&format!("{name}.project"), &block.project, x)
    }

    /// Trilinear resize row: 7 MACs per output element.
    fn upsample(&mut self, name: String, channels: usize, target: Triple) -> FeatShape {
        let out = [channels, target.0, target.1, target.2];
        let macs = 7 * (channels * target.0 * target.1 * target.2) as u64;
        self.rows.push(LayerCost {
            name,
            output_shape: out,
            macs,
            params: 0,
        });
        out
    }
}

/// Counts a full forward pass of the model under the given mode. The
/// layer set does not depend on the mode, only the temporal extents seen
/// by the prediction heads do.
fn walk(net: &SaliencyNet, mode: Mode) -> Result<(Vec<LayerCost>, u64, u64)> {
    let cfg = &net.config;
    let (h, w) = cfg.spatial;
    let t = cfg.t_clip;
    let t_head = match mode {
        Mode::Miso => 1,
        Mode::Mimo => t,
    };
    let mut wk = Walker::new();

    let mut x = wk.cba("stem.dw", &net.stem_dw, [3, t, h, w])?;
    x = wk.cba("stem.pw", &net.stem_pw, x)?;
    let mut taps = Vec::with_capacity(4);
    for (si, stage) in net.stages.iter().enumerate() {
        for (bi, block) in stage.iter().enumerate() {
            x = wk.block(&format!("enc.s{si}.b{bi}"), block, x)?;
        }
        taps.push(x);
    }

    // Per-tap heads: optional pool, reduce, logit, resize, renormalize.
    let full = (t_head, h, w);
    for (k, head) in net.d1.iter().enumerate() {
        let mut hx = taps[k];
        if matches!(mode, Mode::Miso) {
            hx = [hx[0], 1, hx[2], hx[3]];
            wk.zero(format!("d1.h{k}.pool"), hx);
        }
        hx = wk.cba(&format!("d1.h{k}.reduce"), &head.reduce, hx)?;
        let logit = wk.conv(&format!("d1.h{k}.logit"), &head.logit, hx)?;
        let up = wk.upsample(format!("d1.h{k}.upsample"), logit[0], full);
        wk.zero(format!("d1.h{k}.softmax"), up);
    }

    // U-Net stream: deep tap upsampled and merged against each skip.
    let mut y = taps[3];
    for (i, merge) in net.d2_merges.iter().enumerate() {
        let skip = taps[2 - i];
        y = wk.upsample(format!("d2.m{i}.upsample"), y[0], (skip[1], skip[2], skip[3]));
        let cat = [y[0] + skip[0], skip[1], skip[2], skip[3]];
        y = wk.cba(&format!("d2.m{i}.pw"), &merge.pw, cat)?;
        y = wk.cba(&format!("d2.m{i}.dw"), &merge.dw, y)?;
    }
    if matches!(mode, Mode::Miso) {
        y = [y[0], 1, y[2], y[3]];
        wk.zero("d2.pool".to_string(), y);
    }
    let logit = wk.conv("d2.logit", &net.d2_logit, y)?;
    let up = wk.upsample("d2.upsample".to_string(), logit[0], full);
    wk.zero("d2.softmax".to_string(), up);

    // Aggregation stream: projection, refinement, residual shortcut.
    let mut y = taps[3];
    for (i, merge) in net.d3_merges.iter().enumerate() {
        let skip = taps[2 - i];
        y = wk.upsample(format!("d3.m{i}.upsample"), y[0], (skip[1], skip[2], skip[3]));
        let cat = [y[0] + skip[0], skip[1], skip[2], skip[3]];
        let main = wk.cba(&format!("d3.m{i}.pw"), &merge.pw, cat)?;
        let main = wk.cba(&format!("d3.m{i}.dw"), &merge.dw, main)?;
        let res = wk.conv(&format!("d3.m{i}.shortcut"), &merge.shortcut, cat)?;
        if main != res {
            return Err(Error::Shape(format!(
                "merge branches disagree: {main:?} vs {res:?}"
            )));
        }
        wk.zero(format!("d3.m{i}.relu6"), main);
        y = main;
    }
    if matches!(mode, Mode::Miso) {
        y = [y[0], 1, y[2], y[3]];
        wk.zero("d3.pool".to_string(), y);
    }
    let logit = wk.conv("d3.logit", &net.d3_logit, y)?;
    let up = wk.upsample("d3.upsample".to_string(), logit[0], full);
    wk.zero("d3.softmax".to_string(), up);

    let mixed = wk.conv("fusion", &net.fusion, [6, t_head, h, w])?;
    wk.zero("fusion.softmax".to_string(), mixed);

    let total_macs = wk.rows.iter().map(|r| r.macs).sum();
    let total_params = wk.rows.iter().map(|r| r.params).sum();
    Ok((wk.rows, total_macs, total_params))
}

fn cost_for_16(total: u64, maps_per_forward: usize) -> u64 {
    total * 16usize.div_ceil(maps_per_forward) as u64
}

/// Full cost report for the model under its configured mode.
pub fn count_model(net: &SaliencyNet) -> Result<CostReport> {
    let mode = net.config.mode;
    let (layers, total_macs, total_params) = walk(net, mode)?;
    let (_, single_macs, _) = walk(net, Mode::Miso)?;
    let (_, multi_macs, _) = walk(net, Mode::Mimo)?;
    let maps_per_forward = match mode {
        Mode::Miso => 1,
        Mode::Mimo => net.config.t_clip,
    };
    Ok(CostReport {
        mode,
        layers,
        total_macs,
        total_params,
        maps_per_forward,
        cost_16: cost_for_16(total_macs, maps_per_forward),
        cost_16_single: cost_for_16(single_macs, 1),
        cost_16_multi: cost_for_16(multi_macs, net.config.t_clip),
    })
}

fn shape_label(s: FeatShape) -> String {
    format!("{}x{}x{}x{}", s[0], s[1], s[2], s[3])
}

impl CostReport {
    /// CSV with header; one row per layer plus a trailing total row.
    pub fn csv(&self) -> String {
        let mut out = String::from("layer,output_shape,macs,params\n");
        for r in &self.layers {
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.name,
                shape_label(r.output_shape),
                r.macs,
                r.params
            ));
        }
        out.push_str(&format!(
            "total,,{},{}\n",
            self.total_macs, self.total_params
        ));
        out
    }

    /// Fixed-width text table with totals and the 16-map costs appended.
    pub fn table(&self) -> String {
        let name_w = self
            .layers
            .iter()
            .map(|r| r.name.len())
            .max()
            .unwrap_or(5)
            .max(5);
        let mut out = format!(
            "{:<name_w$}  {:>14}  {:>12}  {:>10}\n",
            "layer", "output", "macs", "params"
        );
        for r in &self.layers {
            out.push_str(&format!(
                "{:<name_w$}  {:>14}  {:>12}  {:>10}\n",
                r.name,
                shape_label(r.output_shape),
                r.macs,
                r.params
            ));
        }
        out.push_str(&format!(
            "{:<name_w$}  {:>14}  {:>12}  {:>10}\n",
            "total", "", self.total_macs, self.total_params
        ));
        out.push_str(&format!(
            "mode {}: {} map(s) per pass, {} MACs for 16 maps\n",
            self.mode.label(),
            self.maps_per_forward,
            self.cost_16
        ));
        out.push_str(&format!(
            "16-map cost: single-output {} / multi-output {}\n",
            self.cost_16_single, self.cost_16_multi
        ));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, Width};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    /// Naive loop-structure counter: one increment per kernel slot visited,
    /// padding positions included. Mirrors the convolution loops without
    /// touching data, so it cannot share an arithmetic mistake with the
    /// closed-form count.
    fn instrumented_macs(
        c_in: usize,
        c_out: usize,
        groups: usize,
        kernel: Triple,
        stride: Triple,
        padding: Triple,
        input: (usize, usize, usize),
    ) -> u64 {
        let cpg = c_in / groups;
        let opg = c_out / groups;
        let ext = |d: usize, k: usize, s: usize, p: usize| (d + 2 * p - k) / s + 1;
        let ot = ext(input.0, kernel.0, stride.0, padding.0);
        let oh = ext(input.1, kernel.1, stride.1, padding.1);
        let ow = ext(input.2, kernel.2, stride.2, padding.2);
        let mut n = 0u64;
        for _g in 0..groups {
            for _oc in 0..opg {
                for _t in 0..ot {
                    for _h in 0..oh {
                        for _w in 0..ow {
                            for _ic in 0..cpg {
                                for _kt in 0..kernel.0 {
                                    for _kh in 0..kernel.1 {
                                        for _kw in 0..kernel.2 {
                                            n += 1;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        n
    }

    #[test]
    fn pointwise_example() {
        let layer = Conv3dLayer::new("pw", &mut rng(), 8, 16, (1, 1, 1), (1, 1, 1), 1, true)
            .unwrap();
        let (macs, params) = count_layer(&layer, [8, 4, 4, 4]).unwrap();
        assert_eq!(macs, 8192);
        assert_eq!(params, 128 + 16);
        assert_eq!(
            macs,
            instrumented_macs(8, 16, 1, (1, 1, 1), (1, 1, 1), (0, 0, 0), (4, 4, 4))
        );
    }

    #[test]
    fn depthwise_example() {
        let layer = Conv3dLayer::new("dw", &mut rng(), 8, 8, (3, 3, 3), (1, 1, 1), 8, true)
            .unwrap();
        let (macs, params) = count_layer(&layer, [8, 4, 4, 4]).unwrap();
        assert_eq!(macs, 13824);
        assert_eq!(params, 216 + 8);
        assert_eq!(
            macs,
            instrumented_macs(8, 8, 8, (3, 3, 3), (1, 1, 1), (1, 1, 1), (4, 4, 4))
        );
    }

    #[test]
    fn unit_conv_is_one_mac() {
        let layer = Conv3dLayer::new("unit", &mut rng(), 1, 1, (1, 1, 1), (1, 1, 1), 1, false)
            .unwrap();
        let (macs, params) = count_layer(&layer, [1, 1, 1, 1]).unwrap();
        assert_eq!(macs, 1);
        assert_eq!(params, 1);
    }

    #[test]
    fn analytic_matches_instrumented_on_random_configs() {
        use rand::Rng;
        let mut r = rng();
        for _ in 0..20 {
            let groups_pick = r.gen_range(0..3usize);
            let (c_in, c_out, groups) = match groups_pick {
                0 => (r.gen_range(1..6), r.gen_range(1..8), 1),
                1 => {
                    let g = r.gen_range(2..4usize);
                    (g * r.gen_range(1..3usize), g * r.gen_range(1..3usize), g)
                }
                _ => {
                    let c = r.gen_range(1..6);
                    (c, c, c)
                }
            };
            let k = (
                [1, 3][r.gen_range(0..2usize)],
                [1, 3][r.gen_range(0..2usize)],
                [1, 3][r.gen_range(0..2usize)],
            );
            let s = (
                r.gen_range(1..3usize),
                r.gen_range(1..3usize),
                r.gen_range(1..3usize),
            );
            let p = if r.gen_bool(0.5) {
                (k.0 / 2, k.1 / 2, k.2 / 2)
            } else {
                (0, 0, 0)
            };
            let input = (r.gen_range(3..7), r.gen_range(3..7), r.gen_range(3..7));
            let layer = Conv3dLayer::with_padding(
                "probe", &mut r, c_in, c_out, k, s, p, groups, false,
            )
            .unwrap();
            let (macs, _) = count_layer(&layer, [c_in, input.0, input.1, input.2]).unwrap();
            let naive = instrumented_macs(c_in, c_out, groups, k, s, p, input);
            assert_eq!(macs, naive, "c{c_in}->{c_out} g{groups} k{k:?} s{s:?} p{p:?}");
        }
    }

    #[test]
    fn report_totals_are_row_sums() {
        let net = SaliencyNet::new(ModelConfig::desk(), &mut rng()).unwrap();
        let report = count_model(&net).unwrap();
        let macs: u64 = report.layers.iter().map(|r| r.macs).sum();
        let params: u64 = report.layers.iter().map(|r| r.params).sum();
        assert_eq!(report.total_macs, macs);
        assert_eq!(report.total_params, params);
        assert_eq!(report.total_params, net.n_params() as u64);
    }

    #[test]
    fn single_output_16_maps_is_16_passes() {
        let mut cfg = ModelConfig::desk();
        cfg.mode = Mode::Miso;
        let net = SaliencyNet::new(cfg, &mut rng()).unwrap();
        let report = count_model(&net).unwrap();
        assert_eq!(report.maps_per_forward, 1);
        assert_eq!(report.cost_16, 16 * report.total_macs);
        assert_eq!(report.cost_16, report.cost_16_single);
    }

    #[test]
    fn mode_cost_relations_hold() {
        let net = SaliencyNet::new(ModelConfig::desk(), &mut rng()).unwrap();
        let report = count_model(&net).unwrap();
        // One multi-output pass beats two single-output passes.
        let single_pass = report.cost_16_single / 16;
        assert!(report.cost_16_multi < 2 * single_pass);
        // Producing 16 maps one at a time costs over 8x more.
        assert!(report.cost_16_single > 8 * report.cost_16_multi);
    }

    #[test]
    fn params_do_not_depend_on_mode() {
        let mut cfg = ModelConfig::desk();
        let multi = SaliencyNet::new(cfg.clone(), &mut rng()).unwrap();
        cfg.mode = Mode::Miso;
        let single = SaliencyNet::new(cfg, &mut rng()).unwrap();
        let a = count_model(&multi).unwrap().total_params;
        let b = count_model(&single).unwrap().total_params;
        assert_eq!(a, b);
    }

    #[test]
    fn half_width_quarters_hidden_pointwise_macs() {
        let full_cfg = ModelConfig::desk();
        let mut half_cfg = full_cfg.clone();
        half_cfg.width = Width::Half;
        let full = count_model(&SaliencyNet::new(full_cfg, &mut rng()).unwrap()).unwrap();
        let half = count_model(&SaliencyNet::new(half_cfg, &mut rng()).unwrap()).unwrap();
        // Pointwise layers with both channel axes scaled must cost exactly
        // a quarter. The stem pointwise (3 fixed input channels), the logit
        // convs (1 fixed output) and fusion (6 -> 1 fixed) scale one axis
        // at most and are excluded.
        let hidden_pw = |r: &LayerCost| {
            r.name.ends_with(".conv")
                && !r.name.starts_with("stem.")
                && (r.name.contains(".expand")
                    || r.name.contains(".project")
                    || r.name.contains(".reduce")
                    || r.name.contains(".pw"))
        };
        let mut checked = 0;
        for (f, h) in full.layers.iter().zip(&half.layers) {
            assert_eq!(f.name, h.name);
            if hidden_pw(f) {
                assert_eq!(4 * h.macs, f.macs, "{}", f.name);
                checked += 1;
            }
        }
        assert!(checked >= 10, "only {checked} pointwise layers compared");
    }

    #[test]
    fn toy_two_layer_params_hand_summed() {
        let mut r = rng();
        let a = Conv3dLayer::new("a", &mut r, 3, 5, (1, 1, 1), (1, 1, 1), 1, true).unwrap();
        let b = Conv3dLayer::new("b", &mut r, 5, 2, (3, 3, 3), (1, 1, 1), 1, false).unwrap();
        let (_, pa) = count_layer(&a, [3, 2, 4, 4]).unwrap();
        let (_, pb) = count_layer(&b, [5, 2, 4, 4]).unwrap();
        // a: 5*3 weights + 5 bias = 20; b: 2*5*27 = 270.
        assert_eq!(pa, 20);
        assert_eq!(pb, 270);
        assert_eq!(pa + pb, 290);
    }

    #[test]
    fn report_renders_csv_and_table() {
        let net = SaliencyNet::new(ModelConfig::desk(), &mut rng()).unwrap();
        let report = count_model(&net).unwrap();
        let csv = report.csv();
        assert!(csv.starts_with("layer,output_shape,macs,params\n"));
        assert_eq!(csv.lines().count(), report.layers.len() + 2);
        let table = report.table();
        assert!(table.contains("fusion"));
        assert!(table.contains("16 maps"));
    }

    #[test]
    fn geometry_error_propagates() {
        let layer = Conv3dLayer::with_padding(
            "bad",
            &mut rng(),
            2,
            2,
            (3, 3, 3),
            (1, 1, 1),
            (0, 0, 0),
            1,
            false,
        )
        .unwrap();
        assert!(count_layer(&layer, [2, 1, 4, 4]).is_err());
        assert!(count_layer(&layer, [3, 4, 4, 4]).is_err());
    }
}
