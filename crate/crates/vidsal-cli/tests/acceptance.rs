//! The acceptance gate: eleven numbered criteria, one test each. Every
//! numeric claim is checked against an oracle computed independently in
//! this file, the stated tolerances are asserted literally, and the two
//! long-running criteria assert their own wall-clock budgets.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

use vidsal::data::{generate_synthetic, load_model, save_checkpoint, ClipData, SyntheticSceneSpec};
use vidsal::distill::{
    align_temporal, combined_loss, distillation_loss, eval_loss, kl_divergence, reduce_channels,
    train, FrozenTeacher, Regime, Schedule, Teacher, TeacherOutputs, TrainSample,
    KL_FLOOR,
};
use vidsal::graph::{backward, Parameter, Tape};
use vidsal::metrics;
use vidsal::model::{Mode, ModelConfig, SaliencyNet, Width};
use vidsal::nn::{conv3d_custom, inflate_kernel, Conv3dLayer, NormMode, ScaleMode, Triple};
use vidsal::profiler::{count_layer, count_model};
use vidsal::tensor::Tensor;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn tiny_scene(seed: u64) -> SyntheticSceneSpec {
    SyntheticSceneSpec {
        seed,
        n_blobs: 1,
        sigma_range: (1.5, 3.0),
        velocity_range: (0.5, 1.5),
        texture_amplitude: 0.2,
        t_frames: 4,
        spatial: (16, 16),
        fixations_per_frame: 4,
    }
}

/// Adds a leading batch axis of one.
fn batch_one(t: &Tensor) -> Tensor {
    let mut shape = vec![1];
    shape.extend_from_slice(t.shape());
    Tensor::new(shape, t.data().to_vec()).unwrap()
}

/// One [H, W] slice of a rank-3 [T, H, W] tensor.
fn frame(t: &Tensor, f: usize) -> Tensor {
    let s = t.shape();
    let hw = s[1] * s[2];
    Tensor::new([s[1], s[2]], t.data()[f * hw..(f + 1) * hw].to_vec()).unwrap()
}

/// Teacher maps served from memory by clip id: the synthetic scene's own
/// blurred hierarchy acting as a frozen teacher.
struct MapTeacher {
    maps: HashMap<String, TeacherOutputs>,
}

impl MapTeacher {
    fn new() -> Self {
        MapTeacher { maps: HashMap::new() }
    }

    fn insert(&mut self, id: &str, clip: &ClipData, t_out: usize) {
        let maps = clip
            .teacher
            .maps
            .iter()
            .map(|m| align_temporal(m, t_out).unwrap())
            .collect();
        self.maps.insert(id.to_string(), TeacherOutputs { maps });
    }
}

impl Teacher for MapTeacher {
    fn predict(&self, clip_id: &str, _clip: &Tensor) -> vidsal::Result<TeacherOutputs> {
        self.maps
            .get(clip_id)
            .cloned()
            .ok_or_else(|| vidsal::Error::Data(format!("no teacher maps for {clip_id}")))
    }
}

/// Renders `n` desk clips with consecutive seeds and registers their
/// synthetic teacher maps.
fn desk_set(
    n: usize,
    seed0: u64,
    prefix: &str,
    teacher: &mut MapTeacher,
) -> Vec<TrainSample> {
    (0..n)
        .map(|k| {
            let clip = generate_synthetic(&SyntheticSceneSpec::desk(seed0 + k as u64)).unwrap();
            let id = format!("{prefix}{k:04}");
            teacher.insert(&id, &clip, 16);
            TrainSample { id, clip: clip.frames.clone(), gt: clip.gt }
        })
        .collect()
}

/// Eval-mode fused prediction for one clip, batch axis stripped.
fn fused_maps(net: &SaliencyNet, frames: &Tensor) -> Tensor {
    let tape = Tape::new();
    let x = tape.leaf(batch_one(frames), false);
    let maps = net.forward(&tape, &x, NormMode::Eval).unwrap();
    let t = maps.fused.value();
    let s = t.shape().to_vec();
    Tensor::new(&s[1..], t.data().to_vec()).unwrap()
}

/// Mean per-frame Pearson correlation against the ground-truth density.
fn mean_cc(net: &SaliencyNet, samples: &[TrainSample]) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for s in samples {
        let pred = fused_maps(net, &s.clip);
        let gt = align_temporal(&s.gt.density, pred.shape()[0]).unwrap();
        for f in 0..pred.shape()[0] {
            sum += metrics::cc(&frame(&pred, f), &frame(&gt, f)).unwrap().value;
            n += 1;
        }
    }
    sum / n as f64
}

fn poke(p: &Parameter, idx: usize, v: f32) {
    let mut t = p.value().clone();
    t.data_mut()[idx] = v;
    p.set_value(t);
}

#[test]
fn c01_full_model_gradients_match_finite_differences() {
    let start = Instant::now();
    let net = SaliencyNet::new(ModelConfig::desk(), &mut rng(7)).unwrap();
    let scene = generate_synthetic(&SyntheticSceneSpec::desk(99)).unwrap();
    let clip = batch_one(&scene.frames);
    let teacher = TeacherOutputs::stack(&[&scene.teacher]).unwrap();
    let gt = batch_one(&scene.gt.density);

    let loss_value = |net: &SaliencyNet| -> f64 {
        let tape = Tape::new();
        let x = tape.leaf(clip.clone(), false);
        let maps = net.forward(&tape, &x, NormMode::Train).unwrap();
        distillation_loss(&maps, &teacher, Some(&gt)).unwrap().1.total
    };

    let tape = Tape::new();
    let x = tape.leaf(clip.clone(), false);
    let maps = net.forward(&tape, &x, NormMode::Train).unwrap();
    let (loss, _) = distillation_loss(&maps, &teacher, Some(&gt)).unwrap();
    backward(&loss).unwrap();

    // Snapshot the gradients at the nominal point before any re-probing
    // overwrites them.
    let params = net.params();
    let snap: Vec<Tensor> = params
        .iter()
        .map(|p| p.grad().unwrap_or_else(|| panic!("no gradient for {}", p.name())))
        .collect();

    // Analytic gradient of one coordinate with the parameter moved to v.
    // Gradients accumulate across backward calls, so clear them first.
    let grad_at = |p: &Parameter, idx: usize, v: f32| -> f64 {
        poke(p, idx, v);
        for q in &params {
            q.zero_grad();
        }
        let tape = Tape::new();
        let x = tape.leaf(clip.clone(), false);
        let maps = net.forward(&tape, &x, NormMode::Train).unwrap();
        let (loss, _) = distillation_loss(&maps, &teacher, Some(&gt)).unwrap();
        backward(&loss).unwrap();
        p.grad().unwrap().data()[idx] as f64
    };

    // Central difference of the loss along one parameter coordinate.
    // The step is re-derived from the actually stored perturbed f32 values.
    let central = |p: &Parameter, idx: usize, v0: f32, h: f32| -> f64 {
        let (vp, vm) = (v0 + h, v0 - h);
        poke(p, idx, vp);
        let lp = loss_value(&net);
        poke(p, idx, vm);
        let lm = loss_value(&net);
        poke(p, idx, v0);
        (lp - lm) / (vp as f64 - vm as f64)
    };

    // The clamped activations make the loss piecewise smooth, and with a
    // few million units the pieces are narrow: along an early-layer
    // coordinate the derivative genuinely wiggles at every usable step
    // size, and a central difference measures the interval average of
    // that wiggle rather than the derivative at the point. The two agree
    // exactly where the derivative is locally constant, so each window is
    // screened by sampling the analytic gradient across it and keeping it
    // only if the samples are flat. The screen cannot protect a broken
    // backward pass: a gradient that is constant along the line but wrong
    // still fails against the forward-only difference quotient, and one
    // that is wrong and wiggly runs the attempt budget dry.
    let mut r = rng(41);
    let mut worst = 0.0f64;
    let mut compared = 0usize;
    let mut attempts = 0usize;
    while compared < 30 {
        attempts += 1;
        assert!(
            attempts <= 1000,
            "only {compared} of 30 parameters admitted a well-conditioned probe"
        );
        let which = r.gen_range(0..params.len());
        let p = &params[which];
        // Probe each drawn parameter at its strongest coordinate, where
        // the quotient clears the f32 rounding noise.
        let grad = &snap[which];
        let idx = (0..grad.numel())
            .max_by(|&a, &b| grad.data()[a].abs().total_cmp(&grad.data()[b].abs()))
            .unwrap();
        let g = grad.data()[idx] as f64;
        let v0 = p.value().data()[idx];
        let scale = v0.abs().max(0.05);
        if g.abs() <= 1e-8 {
            // Zero gradient across the whole tensor: a saturated branch for
            // this draw of weights and input. The forward decides whether
            // that is honest; a live branch wrongly zeroed out would move
            // the loss here.
            let fd = central(p, idx, v0, scale * 4e-3);
            assert!(
                fd.abs() <= 1e-4,
                "{}[{idx}] has zero analytic gradient but the loss moves ({fd})",
                p.name()
            );
            continue;
        }
        let mut measured = None;
        for factor in [4e-3f32, 1e-2, 2.5e-2, 6.4e-2] {
            let h = scale * factor;
            // The loss is evaluated to roughly 1e-8, so the quotient only
            // resolves the target precision once the swing h*|g| clears
            // that floor with margin. Wider windows trade noise for kink
            // exposure, which the flatness screen arbitrates.
            if (h as f64) * g.abs() < 5e-5 {
                continue;
            }
            let flat = [-1.0f32, -0.5, 0.5, 1.0]
                .iter()
                .all(|&side| (grad_at(p, idx, v0 + side * h) - g).abs() <= 4e-4 * g.abs());
            poke(p, idx, v0);
            if flat {
                measured = Some(central(p, idx, v0, h));
                break;
            }
        }
        let Some(fd) = measured else { continue };
        let rel = (g - fd).abs() / g.abs().max(fd.abs());
        assert!(
            rel <= 1e-3,
            "pick {compared}: {}[{idx}] analytic {g} disagrees with finite \
             differences {fd} (relative error {rel})",
            p.name()
        );
        worst = worst.max(rel);
        compared += 1;
    }
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs() < 300, "gradient check took {elapsed:?}");
    println!(
        "criterion 1 PASS: 30 finite-difference probes on the desk model \
         ({attempts} drawn), worst relative error {worst:.2e}, {elapsed:?}"
    );
}

/// Zero-padded 2D convolution, straight from the definition.
fn conv2d_ref(frame: &[f32], c_in: usize, h: usize, w: usize, weight: &Tensor) -> Vec<f64> {
    let s = weight.shape();
    let (c_out, kh, kw) = (s[0], s[2], s[3]);
    let (ph, pw) = (kh / 2, kw / 2);
    let wd = weight.data();
    let mut out = vec![0.0f64; c_out * h * w];
    for oc in 0..c_out {
        for oy in 0..h {
            for ox in 0..w {
                let mut acc = 0.0f64;
                for ic in 0..c_in {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = oy + ky;
                            let ix = ox + kx;
                            if iy < ph || ix < pw || iy - ph >= h || ix - pw >= w {
                                continue;
                            }
                            let xv = frame[(ic * h + iy - ph) * w + ix - pw] as f64;
                            let wv = wd[((oc * c_in + ic) * kh + ky) * kw + kx] as f64;
                            acc += xv * wv;
                        }
                    }
                }
                out[(oc * h + oy) * w + ox] = acc;
            }
        }
    }
    out
}

#[test]
fn c02_normalized_inflation_reproduces_2d_conv_on_static_video() {
    let mut r = rng(77);
    let (h, w, t_video) = (8usize, 9usize, 6usize);
    for case in 0..20 {
        let c_in = r.gen_range(1..4);
        let c_out = r.gen_range(1..4);
        let kh = [1, 3][r.gen_range(0..2usize)];
        let kw = [1, 3][r.gen_range(0..2usize)];
        let kt = r.gen_range(2..5);
        let w2d = Tensor::randn(&[c_out, c_in, kh, kw], 0.5, &mut r);
        let w3d = inflate_kernel(&w2d, kt, ScaleMode::ReplicateNormalized).unwrap();

        let still: Vec<f32> = (0..c_in * h * w).map(|_| r.gen_range(-1.0..1.0)).collect();
        let mut video = Vec::with_capacity(c_in * t_video * h * w);
        for ic in 0..c_in {
            for _ in 0..t_video {
                video.extend_from_slice(&still[ic * h * w..(ic + 1) * h * w]);
            }
        }
        let x = Tensor::new([1, c_in, t_video, h, w], video).unwrap();

        // Temporal padding stays 0 so every output frame sees kt full
        // copies of the still image.
        let tape = Tape::new();
        let xv = tape.leaf(x, false);
        let wv = tape.leaf(w3d, false);
        let y = conv3d_custom(&xv, &wv, None, (1, 1, 1), (0, kh / 2, kw / 2), 1).unwrap();
        let yt = y.value();
        let t_out = yt.shape()[2];
        assert_eq!(t_out, t_video - kt + 1);

        let want = conv2d_ref(&still, c_in, h, w, &w2d);
        let yd = yt.data();
        for oc in 0..c_out {
            for f in 0..t_out {
                for px in 0..h * w {
                    let got = yd[((oc * t_out) + f) * h * w + px] as f64;
                    let diff = (got - want[oc * h * w + px]).abs();
                    assert!(
                        diff <= 1e-5,
                        "case {case}: channel {oc} frame {f} pixel {px} off by {diff}"
                    );
                }
            }
        }
    }
    println!("criterion 2 PASS: 20 inflated kernels equal their 2D responses within 1e-5");
}

fn random_distribution(r: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    let raw: Vec<f64> = (0..n).map(|_| r.gen_range(0.1..1.0)).collect();
    let sum: f64 = raw.iter().sum();
    raw.iter().map(|v| (v / sum) as f32).collect()
}

#[test]
fn c03_kl_matches_direct_summation_and_stays_nonnegative() {
    let mut r = rng(3);
    let (h, w) = (5usize, 7usize);
    for case in 0..100 {
        let xd = random_distribution(&mut r, h * w);
        let yd = random_distribution(&mut r, h * w);
        let y = Tensor::new([h, w], yd.clone()).unwrap();
        let tape = Tape::new();
        let xv = tape.leaf(Tensor::new([h, w], xd.clone()).unwrap(), false);
        let kl = kl_divergence(&xv, &y).unwrap().value_f64();

        let oracle: f64 = xd
            .iter()
            .zip(&yd)
            .filter(|(_, &yv)| yv > 0.0)
            .map(|(&xv, &yv)| yv as f64 * (yv as f64 / xv.max(KL_FLOOR) as f64).ln())
            .sum();
        assert!(
            (kl - oracle).abs() < 1e-9,
            "case {case}: kl {kl} vs direct sum {oracle}"
        );
        assert!(kl > 0.0, "case {case}: kl {kl} not positive on distinct inputs");

        // Gibbs: the divergence of a distribution against itself is its
        // minimum, zero up to normalization rounding.
        let xt = Tensor::new([h, w], xd.clone()).unwrap();
        let self_kl = kl_divergence(&tape.leaf(xt.clone(), false), &xt)
            .unwrap()
            .value_f64();
        assert!(self_kl.abs() <= 1e-6, "case {case}: self-kl {self_kl}");
        assert!(kl >= self_kl, "case {case}: minimum not at equality");
    }
    println!("criterion 3 PASS: 100 divergences equal direct summation within 1e-9");
}

#[test]
fn c04_loss_totals_are_sums_of_their_terms() {
    let cfg = ModelConfig::tiny();
    let net = SaliencyNet::new(cfg.clone(), &mut rng(1)).unwrap();
    let teacher_net =
        FrozenTeacher::from_model(&SaliencyNet::new(cfg.clone(), &mut rng(2)).unwrap()).unwrap();

    let clips: Vec<ClipData> = (0..2)
        .map(|k| generate_synthetic(&tiny_scene(500 + k)).unwrap())
        .collect();
    let batch = {
        let mut data = Vec::new();
        for c in &clips {
            data.extend_from_slice(c.frames.data());
        }
        Tensor::new([2, 3, 4, 16, 16], data).unwrap()
    };
    let gt = {
        let mut data = Vec::new();
        for c in &clips {
            data.extend_from_slice(c.gt.density.data());
        }
        Tensor::new([2, 4, 16, 16], data).unwrap()
    };
    let teacher_outs: Vec<TeacherOutputs> = clips
        .iter()
        .enumerate()
        .map(|(k, c)| teacher_net.predict(&format!("c{k}"), &c.frames).unwrap())
        .collect();
    let teacher = TeacherOutputs::stack(&teacher_outs.iter().collect::<Vec<_>>()).unwrap();

    let tape = Tape::new();
    let x = tape.leaf(batch, false);
    let maps = net.forward(&tape, &x, NormMode::Train).unwrap();

    let (var, bd) = distillation_loss(&maps, &teacher, Some(&gt)).unwrap();
    let terms = bd.terms();
    assert_eq!(terms.len(), 6, "five teacher slots plus the ground truth");
    let sum: f64 = terms.iter().sum();
    assert!(
        (bd.total - sum).abs() <= 1e-6,
        "total {} vs term sum {sum}",
        bd.total
    );
    assert!((var.value_f64() - bd.total).abs() <= 1e-9);

    // The auxiliary arm adds exactly five more KL terms.
    let aux_clip = generate_synthetic(&tiny_scene(700)).unwrap();
    let aux_maps = net
        .forward(&tape, &tape.leaf(batch_one(&aux_clip.frames), false), NormMode::Train)
        .unwrap();
    let aux_teacher = TeacherOutputs::stack(&[&teacher_net
        .predict("aux", &aux_clip.frames)
        .unwrap()])
    .unwrap();
    let (var2, bd2) = combined_loss(&maps, &teacher, &gt, Some((&aux_maps, &aux_teacher))).unwrap();
    let terms2 = bd2.terms();
    assert_eq!(terms2.len(), 11, "six base terms plus five auxiliary ones");
    assert_eq!(&terms2[..6], &terms[..], "base terms unchanged by the aux arm");
    let sum2: f64 = terms2.iter().sum();
    assert!(
        (bd2.total - sum2).abs() <= 1e-6,
        "combined total {} vs term sum {sum2}",
        bd2.total
    );
    assert!((var2.value_f64() - bd2.total).abs() <= 1e-9);
    println!("criterion 4 PASS: loss totals are exact term sums, aux adds five terms");
}

#[test]
fn c05_distillation_reduces_loss_and_beats_supervised_cc() {
    let start = Instant::now();
    let mut teacher = MapTeacher::new();
    let train_set = desk_set(50, 100, "tr", &mut teacher);
    let eval_set = desk_set(10, 900, "ev", &mut teacher);
    let aux_set = desk_set(20, 2000, "ax", &mut teacher);
    let schedule = Schedule::desk();

    let mut reductions = Vec::new();
    let mut cc_distill = Vec::new();
    let mut cc_supervised = Vec::new();
    for s in 0..5u64 {
        let net = SaliencyNet::new(ModelConfig::desk(), &mut rng(1000 + s)).unwrap();
        let t: &dyn Teacher = &teacher;
        let (init, _) = eval_loss(&net, &eval_set, Some(t), Regime::Distill, 4).unwrap();
        train(
            &net,
            &train_set,
            Some(&aux_set[..]),
            Some(t),
            &schedule,
            Regime::DistillAux,
            500 + s,
        )
        .unwrap();
        let (fin, _) = eval_loss(&net, &eval_set, Some(t), Regime::Distill, 4).unwrap();
        reductions.push((init - fin) / init);
        cc_distill.push(mean_cc(&net, &eval_set));

        let sup = SaliencyNet::new(ModelConfig::desk(), &mut rng(1000 + s)).unwrap();
        train(&sup, &train_set, None, None, &schedule, Regime::Supervised, 500 + s).unwrap();
        cc_supervised.push(mean_cc(&sup, &eval_set));
        eprintln!(
            "seed {s}: eval loss {init:.4} -> {fin:.4}, cc distill {:.4} vs supervised {:.4}",
            cc_distill[s as usize], cc_supervised[s as usize]
        );
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (mr, md, ms) = (mean(&reductions), mean(&cc_distill), mean(&cc_supervised));
    assert!(mr >= 0.5, "mean eval-loss reduction {mr:.3} below one half");
    assert!(md > 0.5, "mean distilled eval CC {md:.3} not above 0.5");
    assert!(
        md >= ms,
        "distillation with auxiliary data lost to supervised training: {md:.4} < {ms:.4}"
    );
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs() < 1800, "efficacy run took {elapsed:?}");
    println!(
        "criterion 5 PASS: mean loss reduction {:.0}%, eval CC {md:.3} (supervised {ms:.3}), \
         {elapsed:?}",
        mr * 100.0
    );
}

/// Copies pair slice 2i onto slice 2i+1 along the leading axis.
fn duplicate_pairs_axis0(t: &mut Tensor) {
    let shape = t.shape().to_vec();
    let n = shape[0];
    let inner: usize = shape[1..].iter().product();
    let d = t.data_mut();
    let mut i = 0;
    while i + 1 < n {
        let (head, tail) = d.split_at_mut((i + 1) * inner);
        tail[..inner].copy_from_slice(&head[i * inner..]);
        i += 2;
    }
}

#[test]
fn c06_channel_reduction_preserves_duplicates_and_shrinks_params() {
    // A model whose consecutive channel pairs are exact duplicates loses
    // nothing when the pairs are merged: averaged outputs reproduce the
    // shared value, summed input kernels absorb the duplicated features.
    let net = SaliencyNet::new(ModelConfig::tiny(), &mut rng(5)).unwrap();
    let mut r = rng(55);
    let mut state = net.state();
    for (name, t) in state.iter_mut() {
        if t.rank() == 1 {
            // Perturb the per-channel vectors so normalization layers do
            // real work in the comparison.
            for v in t.data_mut().iter_mut() {
                *v = if name.ends_with(".running_var") {
                    r.gen_range(0.6..1.5)
                } else {
                    *v + r.gen_range(-0.2..0.2)
                };
            }
        }
        duplicate_pairs_axis0(t);
    }
    net.load_state(&state).unwrap();

    let clip = generate_synthetic(&tiny_scene(60)).unwrap();
    let full_out = fused_maps(&net, &clip.frames);
    let half = reduce_channels(&net, Width::Half).unwrap();
    let half_out = fused_maps(&half, &clip.frames);
    assert_eq!(full_out.shape(), half_out.shape());
    let mut worst = 0.0f32;
    for (&a, &b) in full_out.data().iter().zip(half_out.data()) {
        worst = worst.max((a - b).abs());
    }
    assert!(worst <= 1e-5, "duplicate-pair reduction moved outputs by {worst}");

    // Parameter counts drop strictly at every stage.
    let full = SaliencyNet::new(ModelConfig::desk(), &mut rng(6)).unwrap();
    let halfd = reduce_channels(&full, Width::Half).unwrap();
    let quarter = reduce_channels(&halfd, Width::Quarter).unwrap();
    let n_full = count_model(&full).unwrap().total_params;
    let n_half = count_model(&halfd).unwrap().total_params;
    let n_quarter = count_model(&quarter).unwrap().total_params;
    assert!(
        n_full > n_half && n_half > n_quarter,
        "params not strictly decreasing: {n_full} -> {n_half} -> {n_quarter}"
    );

    // Pointwise kernels shrink in both channel axes: a quarter of the
    // parameters at one halving, a sixteenth at two.
    let numel = |net: &SaliencyNet, name: &str| -> usize {
        net.state()
            .into_iter()
            .find(|(n, _)| n == name)
            .unwrap_or_else(|| panic!("no parameter named {name}"))
            .1
            .numel()
    };
    for name in ["enc.s1.b0.expand.conv.weight", "enc.s0.b0.project.conv.weight"] {
        let nf = numel(&full, name);
        assert_eq!(numel(&halfd, name) * 4, nf, "{name} not a quarter at half width");
        assert_eq!(numel(&quarter, name) * 16, nf, "{name} not a sixteenth at quarter width");
    }
    println!(
        "criterion 6 PASS: duplicate merge within {worst:.1e}, params {n_full} > {n_half} > \
         {n_quarter}, pointwise ratios 4 and 16"
    );
}

#[test]
fn c07_teacher_assistant_beats_direct_distillation_at_half_width() {
    let start = Instant::now();
    let mut teacher = MapTeacher::new();
    let train_set = desk_set(50, 100, "tr", &mut teacher);
    let eval_set = desk_set(10, 900, "ev", &mut teacher);
    let schedule = Schedule {
        epochs: 6,
        milestones: vec![4],
        base_lr: 0.01,
        gamma: 0.1,
        momentum: 0.9,
        batch_size: 4,
    };

    let synth: &dyn Teacher = &teacher;
    let mut wins = 0usize;
    for s in 0..5u64 {
        let full = SaliencyNet::new(ModelConfig::desk(), &mut rng(3000 + s)).unwrap();
        train(&full, &train_set, None, Some(synth), &schedule, Regime::Distill, 600 + s).unwrap();
        let assistant = FrozenTeacher::from_model(&full).unwrap();

        // Both arms start from the same kernel-merged initialization;
        // reduction is deterministic so two calls agree exactly.
        let ta_student = reduce_channels(&full, Width::Half).unwrap();
        let direct_student = reduce_channels(&full, Width::Half).unwrap();
        train(
            &ta_student,
            &train_set,
            None,
            Some(&assistant as &dyn Teacher),
            &schedule,
            Regime::Distill,
            700 + s,
        )
        .unwrap();
        train(
            &direct_student,
            &train_set,
            None,
            Some(synth),
            &schedule,
            Regime::Distill,
            700 + s,
        )
        .unwrap();

        // Both students are judged against the same reference: the
        // original teacher maps plus the ground truth.
        let (ta, _) = eval_loss(&ta_student, &eval_set, Some(synth), Regime::Distill, 4).unwrap();
        let (direct, _) =
            eval_loss(&direct_student, &eval_set, Some(synth), Regime::Distill, 4).unwrap();
        eprintln!("seed {s}: assistant {ta:.4} vs direct {direct:.4}");
        if ta <= direct {
            wins += 1;
        }
    }
    assert!(wins >= 3, "teacher assistant won only {wins} of 5 seeds");
    println!(
        "criterion 7 PASS: assistant-distilled half-width student won {wins}/5 seeds, {:?}",
        start.elapsed()
    );
}

/// Counts multiply-accumulates by walking the convolution loop structure
/// one visit at a time, sharing nothing with the closed-form count.
fn naive_macs(
    c_in: usize,
    c_out: usize,
    groups: usize,
    kernel: Triple,
    stride: Triple,
    padding: Triple,
    input: (usize, usize, usize),
) -> u64 {
    let ext = |d: usize, k: usize, s: usize, p: usize| (d + 2 * p - k) / s + 1;
    let out = (
        ext(input.0, kernel.0, stride.0, padding.0),
        ext(input.1, kernel.1, stride.1, padding.1),
        ext(input.2, kernel.2, stride.2, padding.2),
    );
    let mut n = 0u64;
    for _g in 0..groups {
        for _oc in 0..c_out / groups {
            for _t in 0..out.0 {
                for _y in 0..out.1 {
                    for _x in 0..out.2 {
                        for _ic in 0..c_in / groups {
                            for _kt in 0..kernel.0 {
                                for _ky in 0..kernel.1 {
                                    for _kx in 0..kernel.2 {
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
fn c08_mac_accounting_matches_instrumented_loops() {
    let mut r = rng(88);
    for case in 0..50 {
        let (c_in, c_out, groups) = match r.gen_range(0..3usize) {
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
        let s = (r.gen_range(1..3), r.gen_range(1..3), r.gen_range(1..3));
        let p = if r.gen_bool(0.5) { (k.0 / 2, k.1 / 2, k.2 / 2) } else { (0, 0, 0) };
        let input = (r.gen_range(3..7), r.gen_range(3..7), r.gen_range(3..7));
        let layer =
            Conv3dLayer::with_padding("probe", &mut r, c_in, c_out, k, s, p, groups, false)
                .unwrap();
        let (macs, _) = count_layer(&layer, [c_in, input.0, input.1, input.2]).unwrap();
        let naive = naive_macs(c_in, c_out, groups, k, s, p, input);
        assert_eq!(macs, naive, "case {case}: c{c_in}->{c_out} g{groups} k{k:?} s{s:?} p{p:?}");
    }

    // Single-output decoding pays one full pass per map.
    let mut miso_cfg = ModelConfig::desk();
    miso_cfg.mode = Mode::Miso;
    let miso = count_model(&SaliencyNet::new(miso_cfg, &mut rng(8)).unwrap()).unwrap();
    assert_eq!(miso.maps_per_forward, 1);
    assert_eq!(miso.cost_16, 16 * miso.total_macs);

    let mimo = count_model(&SaliencyNet::new(ModelConfig::desk(), &mut rng(8)).unwrap()).unwrap();
    assert_eq!(mimo.maps_per_forward, 16);
    assert_eq!(mimo.cost_16, mimo.total_macs);
    let ratio = mimo.cost_16_single as f64 / mimo.cost_16_multi as f64;
    assert!(ratio > 8.0, "single/multi cost ratio {ratio:.2} not above 8");
    println!(
        "criterion 8 PASS: 50 layer counts match instrumented loops, 16-map cost ratio {ratio:.2}"
    );
}

/// ROC area recomputed the slow way: re-count both populations at every
/// fixated value, duplicates included.
fn judd_brute(map: &Tensor, fix: &Tensor) -> Option<f64> {
    let (pd, fd) = (map.data(), fix.data());
    let pos: Vec<f32> = pd.iter().zip(fd).filter(|(_, &f)| f > 0.5).map(|(&v, _)| v).collect();
    let neg: Vec<f32> = pd.iter().zip(fd).filter(|(_, &f)| f <= 0.5).map(|(&v, _)| v).collect();
    if pos.is_empty() || neg.is_empty() {
        return None;
    }
    let (n_fix, n_neg) = (pos.len() as u64, neg.len() as u64);
    let mut pts = vec![(0u64, 0u64), (n_neg, n_fix)];
    for tau in &pos {
        let tp = pos.iter().filter(|v| *v >= tau).count() as u64;
        let fp = neg.iter().filter(|v| *v >= tau).count() as u64;
        pts.push((fp, tp));
    }
    pts.sort_unstable();
    let mut num = 0u64;
    for w in pts.windows(2) {
        num += (w[1].0 - w[0].0) * (w[0].1 + w[1].1);
    }
    Some(num as f64 / (2 * n_neg * n_fix) as f64)
}

#[test]
fn c09_metric_oracles_and_edge_conventions() {
    let mut r = rng(9);
    let (h, w) = (8usize, 8usize);
    let mut checked = 0;
    while checked < 100 {
        // Coarse quantization forces heavy value ties, the hard case for
        // threshold handling.
        let map = Tensor::from_fn(&[h, w], |_| r.gen_range(0..6) as f32 / 5.0);
        let fix = Tensor::from_fn(&[h, w], |_| if r.gen_bool(0.25) { 1.0 } else { 0.0 });
        let n_fix = fix.data().iter().filter(|&&v| v > 0.5).count();
        if n_fix == 0 || n_fix == h * w {
            continue;
        }
        let got = metrics::auc_judd(&map, &fix).unwrap();
        assert_eq!(got, judd_brute(&map, &fix), "case {checked}");
        checked += 1;
    }

    // Direct-formula oracles for the distribution metrics.
    for case in 0..50 {
        let p = Tensor::from_fn(&[12, 12], |_| r.gen_range(0.0..1.0f32));
        let q = Tensor::from_fn(&[12, 12], |_| r.gen_range(0.0..1.0f32));
        let (pd, qd) = (p.data(), q.data());
        let n = pd.len() as f64;

        let mp = pd.iter().map(|&v| v as f64).sum::<f64>() / n;
        let mq = qd.iter().map(|&v| v as f64).sum::<f64>() / n;
        let cov: f64 = pd.iter().zip(qd).map(|(&a, &b)| (a as f64 - mp) * (b as f64 - mq)).sum();
        let vp: f64 = pd.iter().map(|&a| (a as f64 - mp).powi(2)).sum();
        let vq: f64 = qd.iter().map(|&b| (b as f64 - mq).powi(2)).sum();
        let cc_want = cov / (vp.sqrt() * vq.sqrt());
        assert!((metrics::cc(&p, &q).unwrap().value - cc_want).abs() < 1e-9, "cc case {case}");

        let sp: f64 = pd.iter().map(|&v| v as f64).sum();
        let sq: f64 = qd.iter().map(|&v| v as f64).sum();
        let sim_want: f64 =
            pd.iter().zip(qd).map(|(&a, &b)| (a as f64 / sp).min(b as f64 / sq)).sum();
        assert!((metrics::sim(&p, &q).unwrap().value - sim_want).abs() < 1e-9, "sim case {case}");

        let fix = Tensor::from_fn(&[12, 12], |_| if r.gen_bool(0.1) { 1.0 } else { 0.0 });
        if fix.data().iter().any(|&v| v > 0.5) {
            let sigma = (vp / n).sqrt();
            let nss_want: f64 = pd
                .iter()
                .zip(fix.data())
                .filter(|(_, &f)| f > 0.5)
                .map(|(&v, _)| (v as f64 - mp) / sigma)
                .sum::<f64>()
                / fix.data().iter().filter(|&&f| f > 0.5).count() as f64;
            let got = metrics::nss(&p, &fix).unwrap().unwrap().value;
            assert!((got - nss_want).abs() < 1e-9, "nss case {case}");
        }
    }

    // Degenerate conventions: a constant map carries no ranking
    // information, so the ROC areas sit at chance and the z-score is 0.
    let flat = Tensor::from_fn(&[h, w], |_| 0.25);
    let fix = Tensor::from_fn(&[h, w], |ix| if (ix[0] + ix[1]) % 5 == 0 { 1.0 } else { 0.0 });
    assert_eq!(metrics::auc_judd(&flat, &fix).unwrap(), Some(0.5));
    assert_eq!(metrics::auc_borji(&flat, &fix, 100, 17).unwrap(), Some(0.5));
    let z = metrics::nss(&flat, &fix).unwrap().unwrap();
    assert_eq!(z.value, 0.0);
    assert!(z.flagged);
    let c = metrics::cc(&flat, &fix).unwrap();
    assert_eq!(c.value, 0.0);
    assert!(c.flagged);
    println!("criterion 9 PASS: AUC equals brute force on 100 tied maps, oracles within 1e-9");
}

#[test]
fn c10_agreement_matrix_is_symmetric_with_unit_diagonal() {
    let dir = TempDir::new().unwrap();
    let clips: Vec<ClipData> =
        (0..2).map(|k| generate_synthetic(&tiny_scene(80 + k)).unwrap()).collect();

    let mut models = Vec::new();
    for (k, seed) in [21u64, 22, 23].iter().enumerate() {
        let net = SaliencyNet::new(ModelConfig::tiny(), &mut rng(*seed)).unwrap();
        let ckpt = dir.path().join(format!("m{k}"));
        save_checkpoint(&ckpt, &net).unwrap();
        let loaded = load_model(&ckpt).unwrap();
        let mut data = Vec::new();
        for c in &clips {
            data.extend_from_slice(fused_maps(&loaded, &c.frames).data());
        }
        models.push((format!("m{k}"), Tensor::new([8, 16, 16], data).unwrap()));
    }

    let m = metrics::agreement(&models).unwrap();
    for i in 0..3 {
        assert_eq!(m.cc[i][i], 100.0, "cc diagonal at {i}");
        assert_eq!(m.sim[i][i], 100.0, "sim diagonal at {i}");
        for j in 0..3 {
            assert!(
                (m.cc[i][j] - m.cc[j][i]).abs() <= 1e-9,
                "cc not symmetric at ({i}, {j})"
            );
            assert!(
                (m.sim[i][j] - m.sim[j][i]).abs() <= 1e-9,
                "sim not symmetric at ({i}, {j})"
            );
            if i != j {
                assert!(
                    m.cc[i][j] < 100.0,
                    "distinct checkpoints reached full cc agreement at ({i}, {j})"
                );
            }
        }
    }
    println!("criterion 10 PASS: agreement matrix symmetric, diagonal 100, off-diagonal below");
}

const TINY_CONFIG: &str = "\
seed = 11

[model]
preset = \"tiny\"

[schedule]
epochs = 1
milestones = []
batch_size = 2

[dataset]
clips = 3
t_frames = 4
spatial = [16, 16]
blobs = 1
fixations = 4
";

fn run_cli(args: &[&str], cwd: &Path) {
    let out = Command::new(env!("CARGO_BIN_EXE_vidsal"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("spawn vidsal");
    assert!(
        out.status.success(),
        "vidsal {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn collect_tree(root: &Path, base: &Path, out: &mut Vec<(String, Vec<u8>)>) {
    for entry in fs::read_dir(root).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            collect_tree(&path, base, out);
        } else {
            let rel = path.strip_prefix(base).unwrap().to_string_lossy().into_owned();
            out.push((rel, fs::read(&path).unwrap()));
        }
    }
}

fn assert_trees_identical(a: &Path, b: &Path, what: &str) {
    let mut ta = Vec::new();
    let mut tb = Vec::new();
    collect_tree(a, a, &mut ta);
    collect_tree(b, b, &mut tb);
    ta.sort();
    tb.sort();
    let names = |t: &[(String, Vec<u8>)]| t.iter().map(|(n, _)| n.clone()).collect::<Vec<_>>();
    assert_eq!(names(&ta), names(&tb), "{what}: file sets differ");
    for ((name, da), (_, db)) in ta.iter().zip(&tb) {
        assert_eq!(da, db, "{what}: {name} differs between reruns");
    }
    assert!(!ta.is_empty(), "{what}: no files produced");
}

#[test]
fn c11_every_command_reruns_bit_identically() {
    let dir = TempDir::new().unwrap();
    let cwd = dir.path();
    fs::write(cwd.join("tiny.toml"), TINY_CONFIG).unwrap();

    // The dataset renders twice into separate trees; every downstream
    // command reads data_a so both of its reruns see identical inputs.
    run_cli(&["synth-data", "--config", "tiny.toml", "--out", "data_a"], cwd);
    run_cli(&["synth-data", "--config", "tiny.toml", "--out", "data_b"], cwd);
    assert_trees_identical(&cwd.join("data_a"), &cwd.join("data_b"), "synth-data");

    let pairs: &[(&str, &[&str])] = &[
        ("train", &["train", "--config", "tiny.toml", "--out"]),
        ("distill", &["distill", "--config", "tiny.toml", "--teacher", "file:data_a", "--out"]),
        ("reduce", &["reduce", "--config", "tiny.toml", "--teacher", "file:data_a", "--out"]),
        ("eval", &["eval", "--config", "tiny.toml", "--out"]),
        ("profile", &["profile", "--config", "tiny.toml", "--out"]),
        ("agree", &["agree", "--config", "tiny.toml", "--out"]),
    ];
    for (name, head) in pairs {
        for suffix in ["a", "b"] {
            let out = format!("{name}_{suffix}");
            let mut args: Vec<&str> = head.to_vec();
            args.push(&out);
            match *name {
                "profile" => {}
                "eval" => args.extend(["train_a/checkpoint", "data_a"]),
                "agree" => {
                    args.extend(["data_a", "train_a/checkpoint", "distill_a/checkpoint"])
                }
                _ => args.push("data_a"),
            }
            run_cli(&args, cwd);
        }
    }
    for name in ["train", "distill", "reduce", "eval", "profile", "agree"] {
        assert_trees_identical(
            &cwd.join(format!("{name}_a")),
            &cwd.join(format!("{name}_b")),
            name,
        );
    }
    println!("criterion 11 PASS: all seven commands rerun bit-identically");
}
