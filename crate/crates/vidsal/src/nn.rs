//! Neural building blocks: grouped/depthwise 3D convolution, 2D->3D kernel
//! inflation, resampling, batch normalization, spatial softmax, and the
//! composite conv/norm/activation blocks the model assembles.
//!
//! Tensors are laid out [N, C, T, H, W]. Convolution weights are laid out
//! [C_out, C_in/groups, kT, kH, kW] and convolution is cross-correlation
//! (no kernel flip), output dims by d' = (d + 2p - k)/s + 1.

use std::rc::Rc;

use crate::graph::{Parameter, Tape, Var};
use crate::tensor::Tensor;
use crate::{Error, Result};

use rand_chacha::ChaCha8Rng;

/// (T, H, W) extents for strides, paddings and kernel sizes.
pub type Triple = (usize, usize, usize);

/// "Same" padding for odd kernels: k/2 per axis.
pub fn same_padding(kernel: Triple) -> Triple {
    (kernel.0 / 2, kernel.1 / 2, kernel.2 / 2)
}

fn dims5(t: &Tensor, what: &str) -> Result<(usize, usize, usize, usize, usize)> {
    let s = t.shape();
    if s.len() != 5 {
        return Err(Error::Shape(format!("{what} must be rank 5, got {:?}", s)));
    }
    Ok((s[0], s[1], s[2], s[3], s[4]))
}

fn out_dim(d: usize, k: usize, p: usize, s: usize, axis: &str) -> Result<usize> {
    let padded = d + 2 * p;
    if padded < k {
        return Err(Error::Geometry(format!(
            "{axis} extent {d} with padding {p} is smaller than kernel {k}"
        )));
    }
    Ok((padded - k) / s + 1)
}

struct ConvDims {
    n: usize,
    c_in: usize,
    c_out: usize,
    cpg: usize,
    ocpg: usize,
    t: usize,
    h: usize,
    w: usize,
    kt: usize,
    kh: usize,
    kw: usize,
    t_o: usize,
    h_o: usize,
    w_o: usize,
}

fn conv_dims(
    x: &Tensor,
    weight: &Tensor,
    stride: Triple,
    padding: Triple,
    groups: usize,
) -> Result<ConvDims> {
    let (n, c_in, t, h, w) = dims5(x, "conv input")?;
    let (c_out, cpg, kt, kh, kw) = dims5(weight, "conv weight")?;
    if groups == 0 || stride.0 == 0 || stride.1 == 0 || stride.2 == 0 {
        return Err(Error::Param("conv stride/groups must be positive".into()));
    }
    if c_in % groups != 0 || c_out % groups != 0 {
        return Err(Error::Shape(format!(
            "channels in {c_in} / out {c_out} not divisible by groups {groups}"
        )));
    }
    if cpg != c_in / groups {
        return Err(Error::Shape(format!(
            "weight expects {cpg} channels per group, input supplies {}",
            c_in / groups
        )));
    }
    Ok(ConvDims {
        n,
        c_in,
        c_out,
        cpg,
        ocpg: c_out / groups,
        t,
        h,
        w,
        kt,
        kh,
        kw,
        t_o: out_dim(t, kt, padding.0, stride.0, "temporal")?,
        h_o: out_dim(h, kh, padding.1, stride.1, "height")?,
        w_o: out_dim(w, kw, padding.2, stride.2, "width")?,
    })
}

fn is_pointwise(d: &ConvDims, stride: Triple, padding: Triple) -> bool {
    (d.kt, d.kh, d.kw) == (1, 1, 1) && stride == (1, 1, 1) && padding == (0, 0, 0)
}

fn is_depthwise(d: &ConvDims, groups: usize) -> bool {
    groups == d.c_in && d.c_in == d.c_out && d.cpg == 1
}

fn conv3d_forward(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: Triple,
    padding: Triple,
    groups: usize,
) -> Result<Tensor> {
    let d = conv_dims(x, weight, stride, padding, groups)?;
    if let Some(b) = bias {
        if b.shape() != [d.c_out] {
            return Err(Error::Shape(format!(
                "bias shape {:?} does not match {} output channels",
                b.shape(),
                d.c_out
            )));
        }
    }
    let xd = x.data();
    let wd = weight.data();
    let bd = bias.map(|b| b.data());
    let mut out = vec![0.0f32; d.n * d.c_out * d.t_o * d.h_o * d.w_o];

    if is_pointwise(&d, stride, padding) {
        let sp = d.t * d.h * d.w;
        for ni in 0..d.n {
            for oc in 0..d.c_out {
                let g = oc / d.ocpg;
                let orow = &mut out[(ni * d.c_out + oc) * sp..][..sp];
                if let Some(b) = &bd {
                    orow.fill(b[oc]);
                }
                for icpg in 0..d.cpg {
                    let wv = wd[oc * d.cpg + icpg];
                    let xrow = &xd[(ni * d.c_in + g * d.cpg + icpg) * sp..][..sp];
                    for (o, &xv) in orow.iter_mut().zip(xrow) {
                        *o += wv * xv;
                    }
                }
            }
        }
        return Tensor::new(&[d.n, d.c_out, d.t, d.h, d.w], out);
    }

    if is_depthwise(&d, groups) {
        let isp = d.t * d.h * d.w;
        let osp = d.t_o * d.h_o * d.w_o;
        let ksz = d.kt * d.kh * d.kw;
        for ni in 0..d.n {
            for c in 0..d.c_in {
                let xch = &xd[(ni * d.c_in + c) * isp..][..isp];
                let wch = &wd[c * ksz..][..ksz];
                let och = &mut out[(ni * d.c_out + c) * osp..][..osp];
                let b = bd.as_ref().map_or(0.0, |b| b[c]);
                let mut oi = 0;
                for ot in 0..d.t_o {
                    let it0 = (ot * stride.0) as isize - padding.0 as isize;
                    for oh in 0..d.h_o {
                        let ih0 = (oh * stride.1) as isize - padding.1 as isize;
                        for ow in 0..d.w_o {
                            let iw0 = (ow * stride.2) as isize - padding.2 as isize;
                            let mut acc = b;
                            for dt in 0..d.kt {
                                let it = it0 + dt as isize;
                                if it < 0 || it >= d.t as isize {
                                    continue;
                                }
                                for dh in 0..d.kh {
                                    let ih = ih0 + dh as isize;
                                    if ih < 0 || ih >= d.h as isize {
                                        continue;
                                    }
                                    let xr = (it as usize * d.h + ih as usize) * d.w;
                                    let wr = (dt * d.kh + dh) * d.kw;
                                    for dw in 0..d.kw {
                                        let iw = iw0 + dw as isize;
                                        if iw < 0 || iw >= d.w as isize {
                                            continue;
                                        }
                                        acc += xch[xr + iw as usize] * wch[wr + dw];
                                    }
                                }
                            }
                            och[oi] = acc;
                            oi += 1;
                        }
                    }
                }
            }
        }
        return Tensor::new(&[d.n, d.c_out, d.t_o, d.h_o, d.w_o], out);
    }

    // General grouped path.
    let isp = d.t * d.h * d.w;
    let ksz = d.cpg * d.kt * d.kh * d.kw;
    let mut out_general = Vec::with_capacity(d.n * d.c_out * d.t_o * d.h_o * d.w_o);
    for ni in 0..d.n {
        for oc in 0..d.c_out {
            let g = oc / d.ocpg;
            let wch = &wd[oc * ksz..][..ksz];
            let b = bd.as_ref().map_or(0.0, |b| b[oc]);
            for ot in 0..d.t_o {
                let it0 = (ot * stride.0) as isize - padding.0 as isize;
                for oh in 0..d.h_o {
                    let ih0 = (oh * stride.1) as isize - padding.1 as isize;
                    for ow in 0..d.w_o {
                        let iw0 = (ow * stride.2) as isize - padding.2 as isize;
                        let mut acc = b;
                        for icpg in 0..d.cpg {
                            let xch = &xd[(ni * d.c_in + g * d.cpg + icpg) * isp..][..isp];
                            let wk = &wch[icpg * d.kt * d.kh * d.kw..];
                            for dt in 0..d.kt {
                                let it = it0 + dt as isize;
                                if it < 0 || it >= d.t as isize {
                                    continue;
                                }
                                for dh in 0..d.kh {
                                    let ih = ih0 + dh as isize;
                                    if ih < 0 || ih >= d.h as isize {
                                        continue;
                                    }
                                    let xr = (it as usize * d.h + ih as usize) * d.w;
                                    let wr = (dt * d.kh + dh) * d.kw;
                                    for dw in 0..d.kw {
                                        let iw = iw0 + dw as isize;
                                        if iw < 0 || iw >= d.w as isize {
                                            continue;
                                        }
                                        acc += xch[xr + iw as usize] * wk[wr + dw];
                                    }
                                }
                            }
                        }
                        out_general.push(acc);
                    }
                }
            }
        }
    }
    Tensor::new(&[d.n, d.c_out, d.t_o, d.h_o, d.w_o], out_general)
}

/// One fused traversal computing whichever of (grad input, grad weight,
/// grad bias) the tape asked for. Weight gradients accumulate in f64 so
/// many small per-position contributions do not drift.
fn conv3d_backward(
    grad_out: &Tensor,
    x: &Tensor,
    weight: &Tensor,
    stride: Triple,
    padding: Triple,
    groups: usize,
    needs: (bool, bool, bool),
) -> (Option<Tensor>, Option<Tensor>, Option<Tensor>) {
    let d = conv_dims(x, weight, stride, padding, groups).expect("checked in forward");
    let xd = x.data();
    let wd = weight.data();
    let gd = grad_out.data();

    let gb = needs.2.then(|| {
        let osp = d.t_o * d.h_o * d.w_o;
        let mut acc = vec![0.0f64; d.c_out];
        for ni in 0..d.n {
            for oc in 0..d.c_out {
                let row = &gd[(ni * d.c_out + oc) * osp..][..osp];
                acc[oc] += row.iter().map(|&v| v as f64).sum::<f64>();
            }
        }
        Tensor::new(&[d.c_out], acc.into_iter().map(|v| v as f32).collect()).unwrap()
    });

    if !needs.0 && !needs.1 {
        return (None, None, gb);
    }

    if is_pointwise(&d, stride, padding) {
        let sp = d.t * d.h * d.w;
        let gin = needs.0.then(|| {
            let mut gi = vec![0.0f32; xd.len()];
            for ni in 0..d.n {
                for oc in 0..d.c_out {
                    let g = oc / d.ocpg;
                    let grow = &gd[(ni * d.c_out + oc) * sp..][..sp];
                    for icpg in 0..d.cpg {
                        let wv = wd[oc * d.cpg + icpg];
                        let irow = &mut gi[(ni * d.c_in + g * d.cpg + icpg) * sp..][..sp];
                        for (i, &gv) in irow.iter_mut().zip(grow) {
                            *i += wv * gv;
                        }
                    }
                }
            }
            Tensor::new(x.shape(), gi).unwrap()
        });
        let gw = needs.1.then(|| {
            let mut acc = vec![0.0f64; wd.len()];
            for ni in 0..d.n {
                for oc in 0..d.c_out {
                    let g = oc / d.ocpg;
                    let grow = &gd[(ni * d.c_out + oc) * sp..][..sp];
                    for icpg in 0..d.cpg {
                        let xrow = &xd[(ni * d.c_in + g * d.cpg + icpg) * sp..][..sp];
                        let mut dot = 0.0f64;
                        for (&gv, &xv) in grow.iter().zip(xrow) {
                            dot += gv as f64 * xv as f64;
                        }
                        acc[oc * d.cpg + icpg] += dot;
                    }
                }
            }
            Tensor::new(weight.shape(), acc.into_iter().map(|v| v as f32).collect()).unwrap()
        });
        return (gin, gw, gb);
    }

    // General scatter mirroring the forward traversal.
    let isp = d.t * d.h * d.w;
    let osp = d.t_o * d.h_o * d.w_o;
    let ksz = d.cpg * d.kt * d.kh * d.kw;
    let mut gi = needs.0.then(|| vec![0.0f32; xd.len()]);
    let mut gw_acc = needs.1.then(|| vec![0.0f64; wd.len()]);
    for ni in 0..d.n {
        for oc in 0..d.c_out {
            let g = oc / d.ocpg;
            let go_ch = &gd[(ni * d.c_out + oc) * osp..][..osp];
            let mut oi = 0;
            for ot in 0..d.t_o {
                let it0 = (ot * stride.0) as isize - padding.0 as isize;
                for oh in 0..d.h_o {
                    let ih0 = (oh * stride.1) as isize - padding.1 as isize;
                    for ow in 0..d.w_o {
                        let iw0 = (ow * stride.2) as isize - padding.2 as isize;
                        let go = go_ch[oi];
                        oi += 1;
                        if go == 0.0 {
                            continue;
                        }
                        for icpg in 0..d.cpg {
                            let ic = g * d.cpg + icpg;
                            let xbase = (ni * d.c_in + ic) * isp;
                            let wbase = oc * ksz + icpg * d.kt * d.kh * d.kw;
                            for dt in 0..d.kt {
                                let it = it0 + dt as isize;
                                if it < 0 || it >= d.t as isize {
                                    continue;
                                }
                                for dh in 0..d.kh {
                                    let ih = ih0 + dh as isize;
                                    if ih < 0 || ih >= d.h as isize {
                                        continue;
                                    }
                                    let xr = xbase + (it as usize * d.h + ih as usize) * d.w;
                                    let wr = wbase + (dt * d.kh + dh) * d.kw;
                                    for dw in 0..d.kw {
                                        let iw = iw0 + dw as isize;
                                        if iw < 0 || iw >= d.w as isize {
                                            continue;
                                        }
                                        if let Some(gi) = &mut gi {
                                            gi[xr + iw as usize] += wd[wr + dw] * go;
                                        }
                                        if let Some(gw) = &mut gw_acc {
                                            gw[wr + dw] +=
                                                go as f64 * xd[xr + iw as usize] as f64;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (
        gi.map(|v| Tensor::new(x.shape(), v).unwrap()),
        gw_acc.map(|v| {
            Tensor::new(weight.shape(), v.into_iter().map(|a| a as f32).collect()).unwrap()
        }),
        gb,
    )
}

/// Differentiable convolution over explicit weight/bias variables. The
/// layer-based [`conv3d`] wraps this; tests drive it directly.
pub fn conv3d_custom(
    x: &Var,
    weight: &Var,
    bias: Option<&Var>,
    stride: Triple,
    padding: Triple,
    groups: usize,
) -> Result<Var> {
    let value = x.with_value(|xv| {
        weight.with_value(|wv| match bias {
            Some(b) => b.with_value(|bv| {
                conv3d_forward(xv, wv, Some(bv), stride, padding, groups)
            }),
            None => conv3d_forward(xv, wv, None, stride, padding, groups),
        })
    })?;
    let mut inputs: Vec<&Var> = vec![x, weight];
    if let Some(b) = bias {
        inputs.push(b);
    }
    let has_bias = bias.is_some();
    Ok(x.tape().custom(&inputs, value, move |args| {
        let (gin, gw, gb) = conv3d_backward(
            args.grad,
            args.inputs[0],
            args.inputs[1],
            stride,
            padding,
            groups,
            (
                args.needs[0],
                args.needs[1],
                has_bias && args.needs[2],
            ),
        );
        let mut grads = vec![gin, gw];
        if has_bias {
            grads.push(gb);
        }
        grads
    }))
}

/// A convolution layer owning its parameters.
pub struct Conv3dLayer {
    pub weight: Rc<Parameter>,
    pub bias: Option<Rc<Parameter>>,
    pub stride: Triple,
    pub padding: Triple,
    pub groups: usize,
}

impl Conv3dLayer {
    /// He-normal initialised layer with "same" padding.
    pub fn new(
        name: &str,
        rng: &mut ChaCha8Rng,
        c_in: usize,
        c_out: usize,
        kernel: Triple,
        stride: Triple,
        groups: usize,
        bias: bool,
    ) -> Result<Self> {
        Self::with_padding(
            name,
            rng,
            c_in,
            c_out,
            kernel,
            stride,
            same_padding(kernel),
            groups,
            bias,
        )
    }

    #[allow(clippy::too_many_arguments)]
    pub fn with_padding(
        name: &str,
        rng: &mut ChaCha8Rng,
        c_in: usize,
        c_out: usize,
        kernel: Triple,
        stride: Triple,
        padding: Triple,
        groups: usize,
        bias: bool,
    ) -> Result<Self> {
        if groups == 0 || c_in % groups != 0 || c_out % groups != 0 {
            return Err(Error::Config(format!(
                "conv {name}: channels {c_in}->{c_out} not divisible by groups {groups}"
            )));
        }
        let cpg = c_in / groups;
        let fan_in = (cpg * kernel.0 * kernel.1 * kernel.2) as f32;
        let std = (2.0 / fan_in).sqrt();
        let weight = Tensor::randn(&[c_out, cpg, kernel.0, kernel.1, kernel.2], std, rng);
        Ok(Conv3dLayer {
            weight: Parameter::new(format!("{name}.weight"), weight),
            bias: bias
                .then(|| Parameter::new(format!("{name}.bias"), Tensor::zeros(&[c_out]))),
            stride,
            padding,
            groups,
        })
    }

    /// Wraps existing tensors; used by inflation, reduction and tests.
    pub fn from_parts(
        name: &str,
        weight: Tensor,
        bias: Option<Tensor>,
        stride: Triple,
        padding: Triple,
        groups: usize,
    ) -> Result<Self> {
        if weight.rank() != 5 {
            return Err(Error::Shape(format!(
                "conv {name}: weight must be rank 5, got {:?}",
                weight.shape()
            )));
        }
        Ok(Conv3dLayer {
            weight: Parameter::new(format!("{name}.weight"), weight),
            bias: bias.map(|b| Parameter::new(format!("{name}.bias"), b)),
            stride,
            padding,
            groups,
        })
    }

    pub fn c_out(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn c_in(&self) -> usize {
        self.weight.shape()[1] * self.groups
    }

    pub fn kernel(&self) -> Triple {
        let s = self.weight.shape();
        (s[2], s[3], s[4])
    }

    pub fn forward(&self, tape: &Tape, x: &Var) -> Result<Var> {
        conv3d(x, tape, self)
    }

    pub fn params(&self, out: &mut Vec<Rc<Parameter>>) {
        out.push(Rc::clone(&self.weight));
        if let Some(b) = &self.bias {
            out.push(Rc::clone(b));
        }
    }
}

/// Applies `layer` to `x`, leasing the layer parameters onto the tape.
pub fn conv3d(x: &Var, tape: &Tape, layer: &Conv3dLayer) -> Result<Var> {
    let w = tape.param(&layer.weight);
    let b = layer.bias.as_ref().map(|p| tape.param(p));
    conv3d_custom(x, &w, b.as_ref(), layer.stride, layer.padding, layer.groups)
}

/// How inflated temporal slices are scaled.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScaleMode {
    Replicate,
    /// Each slice is scaled by 1/T so a temporally constant input produces
    /// the original 2D response.
    ReplicateNormalized,
}

/// Stretches a 2D kernel [C_out, C_in, H, W] along a new temporal axis.
pub fn inflate_kernel(weight2d: &Tensor, t: usize, mode: ScaleMode) -> Result<Tensor> {
    if t < 1 {
        return Err(Error::Param("temporal extent must be at least 1".into()));
    }
    let s = weight2d.shape();
    if s.len() != 4 {
        return Err(Error::Shape(format!(
            "inflate_kernel expects rank 4, got {:?}",
            s
        )));
    }
    let (c_out, c_in, kh, kw) = (s[0], s[1], s[2], s[3]);
    let scale = match mode {
        ScaleMode::Replicate => 1.0,
        ScaleMode::ReplicateNormalized => 1.0 / t as f32,
    };
    let src = weight2d.data();
    let plane = kh * kw;
    let mut out = Vec::with_capacity(src.len() * t);
    for oc in 0..c_out * c_in {
        let sl = &src[oc * plane..][..plane];
        for _ in 0..t {
            out.extend(sl.iter().map(|&v| v * scale));
        }
    }
    Tensor::new(&[c_out, c_in, t, kh, kw], out)
}

/// Resampling mode. Trilinear uses half-pixel sample centers (corner
/// alignment disabled); nearest picks the source cell that contains the
/// half-pixel center.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ResizeMode {
    Nearest,
    Trilinear,
}

struct AxisMap {
    lo: Vec<usize>,
    hi: Vec<usize>,
    frac: Vec<f32>,
}

fn axis_map(src: usize, dst: usize) -> AxisMap {
    let scale = src as f64 / dst as f64;
    let mut lo = Vec::with_capacity(dst);
    let mut hi = Vec::with_capacity(dst);
    let mut frac = Vec::with_capacity(dst);
    for o in 0..dst {
        let c = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
        let i0 = c.floor() as usize;
        lo.push(i0);
        hi.push((i0 + 1).min(src - 1));
        frac.push((c - i0 as f64) as f32);
    }
    AxisMap { lo, hi, frac }
}

fn nearest_map(src: usize, dst: usize) -> Vec<usize> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| (((o as f64 + 0.5) * scale).floor() as usize).min(src - 1))
        .collect()
}

fn upsample_forward(x: &Tensor, target: Triple, mode: ResizeMode) -> Result<Tensor> {
    let (n, c, t, h, w) = dims5(x, "upsample input")?;
    let (t2, h2, w2) = target;
    if t2 == 0 || h2 == 0 || w2 == 0 {
        return Err(Error::Param("upsample target dims must be positive".into()));
    }
    let xd = x.data();
    let mut out = Vec::with_capacity(n * c * t2 * h2 * w2);
    match mode {
        ResizeMode::Nearest => {
            let mt = nearest_map(t, t2);
            let mh = nearest_map(h, h2);
            let mw = nearest_map(w, w2);
            for nc in 0..n * c {
                let ch = &xd[nc * t * h * w..][..t * h * w];
                for &it in &mt {
                    for &ih in &mh {
                        let row = (it * h + ih) * w;
                        for &iw in &mw {
                            out.push(ch[row + iw]);
                        }
                    }
                }
            }
        }
        ResizeMode::Trilinear => {
            let mt = axis_map(t, t2);
            let mh = axis_map(h, h2);
            let mw = axis_map(w, w2);
            for nc in 0..n * c {
                let ch = &xd[nc * t * h * w..][..t * h * w];
                for ot in 0..t2 {
                    let (t0, t1, ft) = (mt.lo[ot], mt.hi[ot], mt.frac[ot]);
                    for oh in 0..h2 {
                        let (h0, h1, fh) = (mh.lo[oh], mh.hi[oh], mh.frac[oh]);
                        for ow in 0..w2 {
                            let (w0, w1, fw) = (mw.lo[ow], mw.hi[ow], mw.frac[ow]);
                            let at = |ti: usize, hi: usize, wi: usize| ch[(ti * h + hi) * w + wi];
                            let c00 = at(t0, h0, w0) * (1.0 - fw) + at(t0, h0, w1) * fw;
                            let c01 = at(t0, h1, w0) * (1.0 - fw) + at(t0, h1, w1) * fw;
                            let c10 = at(t1, h0, w0) * (1.0 - fw) + at(t1, h0, w1) * fw;
                            let c11 = at(t1, h1, w0) * (1.0 - fw) + at(t1, h1, w1) * fw;
                            let c0 = c00 * (1.0 - fh) + c01 * fh;
                            let c1 = c10 * (1.0 - fh) + c11 * fh;
                            out.push(c0 * (1.0 - ft) + c1 * ft);
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[n, c, t2, h2, w2], out)
}

fn upsample_backward(grad: &Tensor, src_shape: &[usize], mode: ResizeMode) -> Tensor {
    let (n, c, t2, h2, w2) = dims5(grad, "upsample grad").expect("shape set in forward");
    let (t, h, w) = (src_shape[2], src_shape[3], src_shape[4]);
    let gd = grad.data();
    let mut gi = vec![0.0f32; src_shape.iter().product()];
    match mode {
        ResizeMode::Nearest => {
            let mt = nearest_map(t, t2);
            let mh = nearest_map(h, h2);
            let mw = nearest_map(w, w2);
            let mut idx = 0;
            for nc in 0..n * c {
                let ch = &mut gi[nc * t * h * w..][..t * h * w];
                for &it in &mt {
                    for &ih in &mh {
                        let row = (it * h + ih) * w;
                        for &iw in &mw {
                            ch[row + iw] += gd[idx];
                            idx += 1;
                        }
                    }
                }
            }
        }
        ResizeMode::Trilinear => {
            let mt = axis_map(t, t2);
            let mh = axis_map(h, h2);
            let mw = axis_map(w, w2);
            let mut idx = 0;
            for nc in 0..n * c {
                let ch = &mut gi[nc * t * h * w..][..t * h * w];
                for ot in 0..t2 {
                    let (t0, t1, ft) = (mt.lo[ot], mt.hi[ot], mt.frac[ot]);
                    for oh in 0..h2 {
                        let (h0, h1, fh) = (mh.lo[oh], mh.hi[oh], mh.frac[oh]);
                        for ow in 0..w2 {
                            let (w0, w1, fw) = (mw.lo[ow], mw.hi[ow], mw.frac[ow]);
                            let g = gd[idx];
                            idx += 1;
                            let mut put = |ti: usize, hi: usize, wi: usize, wt: f32| {
                                ch[(ti * h + hi) * w + wi] += g * wt;
                            };
                            put(t0, h0, w0, (1.0 - ft) * (1.0 - fh) * (1.0 - fw));
                            put(t0, h0, w1, (1.0 - ft) * (1.0 - fh) * fw);
                            put(t0, h1, w0, (1.0 - ft) * fh * (1.0 - fw));
                            put(t0, h1, w1, (1.0 - ft) * fh * fw);
                            put(t1, h0, w0, ft * (1.0 - fh) * (1.0 - fw));
                            put(t1, h0, w1, ft * (1.0 - fh) * fw);
                            put(t1, h1, w0, ft * fh * (1.0 - fw));
                            put(t1, h1, w1, ft * fh * fw);
                        }
                    }
                }
            }
        }
    }
    Tensor::new(src_shape, gi).unwrap()
}

/// Resizes [N, C, T, H, W] to the target (T', H', W').
pub fn upsample(x: &Var, target: Triple, mode: ResizeMode) -> Result<Var> {
    let value = x.with_value(|v| upsample_forward(v, target, mode))?;
    Ok(x.tape().custom(&[x], value, move |args| {
        vec![Some(upsample_backward(
            args.grad,
            args.inputs[0].shape(),
            mode,
        ))]
    }))
}

/// Whether a normalization layer consumes batch statistics (updating its
/// running estimates) or replays the stored ones.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Eval,
}

/// Batch normalization over (N, T, H, W) per channel. Statistics are
/// accumulated in f64; running estimates use momentum 0.1 and the same
/// biased variance that normalization uses.
pub struct BatchNorm3d {
    name: String,
    pub gamma: Rc<Parameter>,
    pub beta: Rc<Parameter>,
    running_mean: std::cell::RefCell<Tensor>,
    running_var: std::cell::RefCell<Tensor>,
    pub momentum: f32,
    pub eps: f32,
}

impl BatchNorm3d {
    pub fn new(name: &str, channels: usize) -> Self {
        BatchNorm3d {
            name: name.to_string(),
            gamma: Parameter::new(format!("{name}.weight"), Tensor::full(&[channels], 1.0)),
            beta: Parameter::new(format!("{name}.bias"), Tensor::zeros(&[channels])),
            running_mean: std::cell::RefCell::new(Tensor::zeros(&[channels])),
            running_var: std::cell::RefCell::new(Tensor::full(&[channels], 1.0)),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn channels(&self) -> usize {
        self.gamma.shape()[0]
    }

    pub fn running_mean(&self) -> Tensor {
        self.running_mean.borrow().clone()
    }

    pub fn running_var(&self) -> Tensor {
        self.running_var.borrow().clone()
    }

    pub fn set_running(&self, mean: Tensor, var: Tensor) -> Result<()> {
        let c = self.channels();
        if mean.shape() != [c] || var.shape() != [c] {
            return Err(Error::Shape(format!(
                "running stats for {} must be [{}], got {:?}/{:?}",
                self.name,
                c,
                mean.shape(),
                var.shape()
            )));
        }
        *self.running_mean.borrow_mut() = mean;
        *self.running_var.borrow_mut() = var;
        Ok(())
    }

    pub fn params(&self, out: &mut Vec<Rc<Parameter>>) {
        out.push(Rc::clone(&self.gamma));
        out.push(Rc::clone(&self.beta));
    }

    pub fn forward(&self, tape: &Tape, x: &Var, mode: NormMode) -> Result<Var> {
        let gamma = tape.param(&self.gamma);
        let beta = tape.param(&self.beta);
        let (mean, var) = match mode {
            NormMode::Train => {
                let (mean, var) = x.with_value(|v| batch_stats(v, self.channels()))?;
                let m = self.momentum;
                let update = |run: &mut Tensor, new: &Tensor| {
                    for (r, &v) in run.data_mut().iter_mut().zip(new.data()) {
                        *r = (1.0 - m) * *r + m * v;
                    }
                };
                update(&mut self.running_mean.borrow_mut(), &mean);
                update(&mut self.running_var.borrow_mut(), &var);
                (mean, var)
            }
            NormMode::Eval => (self.running_mean(), self.running_var()),
        };
        batchnorm3d_custom(x, &gamma, &beta, &mean, &var, self.eps, mode)
    }
}

fn batch_stats(x: &Tensor, channels: usize) -> Result<(Tensor, Tensor)> {
    let (n, c, t, h, w) = dims5(x, "batchnorm input")?;
    if c != channels {
        return Err(Error::Shape(format!(
            "batchnorm expects {channels} channels, got {c}"
        )));
    }
    let m = n * t * h * w;
    if m == 0 {
        return Err(Error::Shape("batchnorm reduction set is empty".into()));
    }
    let sp = t * h * w;
    let xd = x.data();
    let mut mean = vec![0.0f64; c];
    let mut var = vec![0.0f64; c];
    for ni in 0..n {
        for ci in 0..c {
            let row = &xd[(ni * c + ci) * sp..][..sp];
            mean[ci] += row.iter().map(|&v| v as f64).sum::<f64>();
        }
    }
    for v in &mut mean {
        *v /= m as f64;
    }
    for ni in 0..n {
        for ci in 0..c {
            let row = &xd[(ni * c + ci) * sp..][..sp];
            let mu = mean[ci];
            var[ci] += row.iter().map(|&v| (v as f64 - mu).powi(2)).sum::<f64>();
        }
    }
    for v in &mut var {
        *v /= m as f64;
    }
    Ok((
        Tensor::new(&[c], mean.into_iter().map(|v| v as f32).collect())?,
        Tensor::new(&[c], var.into_iter().map(|v| v as f32).collect())?,
    ))
}

/// Normalization against explicit statistics. In train mode the statistics
/// are treated as functions of x (full batch-norm backward); in eval mode
/// they are constants.
pub fn batchnorm3d_custom(
    x: &Var,
    gamma: &Var,
    beta: &Var,
    mean: &Tensor,
    var: &Tensor,
    eps: f32,
    mode: NormMode,
) -> Result<Var> {
    let (n, c, t, h, w) = x.with_value(|v| dims5(v, "batchnorm input"))?;
    if gamma.shape() != [c] || beta.shape() != [c] || mean.shape() != [c] || var.shape() != [c] {
        return Err(Error::Shape(format!(
            "batchnorm parameter shapes must be [{c}]"
        )));
    }
    let inv: Vec<f32> = var
        .data()
        .iter()
        .map(|&v| 1.0 / (v as f64 + eps as f64).sqrt() as f32)
        .collect();
    let mu = mean.data().to_vec();
    let sp = t * h * w;
    let value = x.with_value(|xv| {
        let gd = gamma.value();
        let bd = beta.value();
        let mut out = Vec::with_capacity(xv.numel());
        let xd = xv.data();
        for ni in 0..n {
            for ci in 0..c {
                let row = &xd[(ni * c + ci) * sp..][..sp];
                let (g, b, m, iv) = (gd.data()[ci], bd.data()[ci], mu[ci], inv[ci]);
                out.extend(row.iter().map(|&v| (v - m) * iv * g + b));
            }
        }
        Tensor::new(xv.shape(), out)
    })?;

    let inv_b = inv.clone();
    let mu_b = mu.clone();
    Ok(x.tape().custom(&[x, gamma, beta], value, move |args| {
        let xd = args.inputs[0].data();
        let gd = args.inputs[1].data();
        let grad = args.grad.data();
        let m_count = (n * sp) as f64;
        // Per-channel reductions, f64.
        let mut sum_g = vec![0.0f64; c];
        let mut sum_gx = vec![0.0f64; c];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * sp;
                let (mu_c, inv_c) = (mu_b[ci] as f64, inv_b[ci] as f64);
                let mut sg = 0.0f64;
                let mut sgx = 0.0f64;
                for j in 0..sp {
                    let g = grad[base + j] as f64;
                    sg += g;
                    sgx += g * (xd[base + j] as f64 - mu_c) * inv_c;
                }
                sum_g[ci] += sg;
                sum_gx[ci] += sgx;
            }
        }
        let gx = args.needs[0].then(|| {
            let mut gi = vec![0.0f32; xd.len()];
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * sp;
                    let (mu_c, inv_c) = (mu_b[ci] as f64, inv_b[ci] as f64);
                    let scale = gd[ci] as f64 * inv_c;
                    match mode {
                        NormMode::Eval => {
                            for j in 0..sp {
                                gi[base + j] = (grad[base + j] as f64 * scale) as f32;
                            }
                        }
                        NormMode::Train => {
                            let (sg, sgx) = (sum_g[ci], sum_gx[ci]);
                            for j in 0..sp {
                                let xhat = (xd[base + j] as f64 - mu_c) * inv_c;
                                let v = scale
                                    * (grad[base + j] as f64 - sg / m_count
                                        - xhat * sgx / m_count);
                                gi[base + j] = v as f32;
                            }
                        }
                    }
                }
            }
            Tensor::new(args.inputs[0].shape(), gi).unwrap()
        });
        let ggamma = args.needs[1].then(|| {
            Tensor::new(&[c], sum_gx.iter().map(|&v| v as f32).collect()).unwrap()
        });
        let gbeta = args.needs[2].then(|| {
            Tensor::new(&[c], sum_g.iter().map(|&v| v as f32).collect()).unwrap()
        });
        vec![gx, ggamma, gbeta]
    }))
}

/// Softmax over the two trailing axes, one distribution per leading index.
/// Sums accumulate in f64.
pub fn softmax_hw(x: &Var) -> Result<Var> {
    let shape = x.shape();
    if shape.len() < 2 {
        return Err(Error::Shape(format!(
            "softmax needs at least 2 axes, got {:?}",
            shape
        )));
    }
    let plane: usize = shape[shape.len() - 2..].iter().product();
    let slices = x.numel() / plane;
    let value = x.with_value(|v| {
        let xd = v.data();
        let mut out = Vec::with_capacity(xd.len());
        for s in 0..slices {
            let row = &xd[s * plane..][..plane];
            let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let exps: Vec<f32> = row.iter().map(|&v| (v - max).exp()).collect();
            let total: f64 = exps.iter().map(|&v| v as f64).sum();
            out.extend(exps.iter().map(|&e| (e as f64 / total) as f32));
        }
        Tensor::new(v.shape(), out).unwrap()
    });
    Ok(x.tape().custom(&[x], value, move |args| {
        let y = args.output.data();
        let g = args.grad.data();
        let mut gi = vec![0.0f32; y.len()];
        for s in 0..slices {
            let base = s * plane;
            let mut dot = 0.0f64;
            for j in 0..plane {
                dot += g[base + j] as f64 * y[base + j] as f64;
            }
            for j in 0..plane {
                gi[base + j] = y[base + j] * (g[base + j] - dot as f32);
            }
        }
        vec![Some(Tensor::new(args.inputs[0].shape(), gi).unwrap())]
    }))
}

/// Mean over the temporal axis: [N, C, T, H, W] -> [N, C, 1, H, W].
pub fn temporal_mean(x: &Var) -> Result<Var> {
    let (n, c, t, h, w) = x.with_value(|v| dims5(v, "temporal_mean input"))?;
    let value = x.with_value(|v| {
        let xd = v.data();
        let sp = h * w;
        let mut out = vec![0.0f32; n * c * sp];
        for nc in 0..n * c {
            let ch = &xd[nc * t * sp..][..t * sp];
            let orow = &mut out[nc * sp..][..sp];
            for (j, o) in orow.iter_mut().enumerate() {
                let mut acc = 0.0f64;
                for ti in 0..t {
                    acc += ch[ti * sp + j] as f64;
                }
                *o = (acc / t as f64) as f32;
            }
        }
        Tensor::new(&[n, c, 1, h, w], out).unwrap()
    });
    Ok(x.tape().custom(&[x], value, move |args| {
        let g = args.grad.data();
        let sp = h * w;
        let mut gi = vec![0.0f32; n * c * t * sp];
        let inv = 1.0 / t as f32;
        for nc in 0..n * c {
            let grow = &g[nc * sp..][..sp];
            let gch = &mut gi[nc * t * sp..][..t * sp];
            for ti in 0..t {
                for j in 0..sp {
                    gch[ti * sp + j] = grow[j] * inv;
                }
            }
        }
        vec![Some(Tensor::new(args.inputs[0].shape(), gi).unwrap())]
    }))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Linear,
    Relu6,
}

/// Convolution, normalization, activation.
pub struct ConvBnAct {
    pub conv: Conv3dLayer,
    pub bn: BatchNorm3d,
    pub act: Activation,
}

impl ConvBnAct {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: &str,
        rng: &mut ChaCha8Rng,
        c_in: usize,
        c_out: usize,
        kernel: Triple,
        stride: Triple,
        groups: usize,
        act: Activation,
    ) -> Result<Self> {
        Ok(ConvBnAct {
            // Normalization makes a conv bias redundant.
            conv: Conv3dLayer::new(
                &format!("{name}.conv"),
                rng,
                c_in,
                c_out,
                kernel,
                stride,
                groups,
                false,
            )?,
            bn: BatchNorm3d::new(&format!("{name}.bn"), c_out),
            act,
        })
    }

    pub fn forward(&self, tape: &Tape, x: &Var, mode: NormMode) -> Result<Var> {
        let y = self.conv.forward(tape, x)?;
        let y = self.bn.forward(tape, &y, mode)?;
        Ok(match self.act {
            Activation::Linear => y,
            Activation::Relu6 => y.relu6(),
        })
    }

    pub fn params(&self, out: &mut Vec<Rc<Parameter>>) {
        self.conv.params(out);
        self.bn.params(out);
    }
}

/// Pointwise expansion, depthwise spatial/temporal mixing, linear pointwise
/// projection, with a skip connection when geometry allows.
pub struct InvertedResidualBlock {
    pub expand: Option<ConvBnAct>,
    pub depthwise: ConvBnAct,
    pub project: ConvBnAct,
    pub use_residual: bool,
}

impl InvertedResidualBlock {
    /// `hidden` is the expanded channel count; `None` skips the expansion
    /// convolution and runs the depthwise stage on `c_in` directly. The
    /// caller passes the hidden count explicitly so width-scaled variants
    /// can keep exact channel-halving relationships.
    pub fn new(
        name: &str,
        rng: &mut ChaCha8Rng,
        c_in: usize,
        c_out: usize,
        hidden: Option<usize>,
        kernel: Triple,
        stride: Triple,
    ) -> Result<Self> {
        if hidden == Some(0) {
            return Err(Error::Config(format!(
                "block {name}: hidden channel count must be positive"
            )));
        }
        let expand_to = hidden;
        let hidden = hidden.unwrap_or(c_in);
        let expand = expand_to
            .map(|_| {
                ConvBnAct::new(
                    &format!("{name}.expand"),
                    rng,
                    c_in,
                    hidden,
                    (1, 1, 1),
                    (1, 1, 1),
                    1,
                    Activation::Relu6,
                )
            })
            .transpose()?;
        let depthwise = ConvBnAct::new(
            &format!("{name}.depthwise"),
            rng,
            hidden,
            hidden,
            kernel,
            stride,
            hidden,
            Activation::Relu6,
        )?;
        let project = ConvBnAct::new(
            &format!("{name}.project"),
            rng,
            hidden,
            c_out,
            (1, 1, 1),
            (1, 1, 1),
            1,
            Activation::Linear,
        )?;
        Ok(InvertedResidualBlock {
            expand,
            depthwise,
            project,
            use_residual: stride == (1, 1, 1) && c_in == c_out,
        })
    }

    pub fn forward(&self, tape: &Tape, x: &Var, mode: NormMode) -> Result<Var> {
        let mut y = match &self.expand {
            Some(e) => e.forward(tape, x, mode)?,
            None => x.clone(),
        };
        y = self.depthwise.forward(tape, &y, mode)?;
        y = self.project.forward(tape, &y, mode)?;
        if self.use_residual {
            y = y.add(x)?;
        }
        Ok(y)
    }

    pub fn params(&self, out: &mut Vec<Rc<Parameter>>) {
        if let Some(e) = &self.expand {
            e.params(out);
        }
        self.depthwise.params(out);
        self.project.params(out);
    }
}
