//! The seven operator commands. Each writes its artifacts under the
//! output directory plus a `run.txt` manifest recording the command,
//! the seed, and every resolved setting, so identical invocations can
//! be checked for bit-identical outputs.

use std::fs;
use std::path::{Path, PathBuf};

use vidsal::data::{
    config_tokens, generate_synthetic, load_dataset, load_model, save_checkpoint, write_clip,
    write_tensor, SyntheticSceneSpec,
};
use vidsal::distill::{
    history_csv, teacher_assistant_pipeline, train, Regime, Schedule, TrainSample,
};
use vidsal::graph::Tape;
use vidsal::metrics::{agreement, combine_reports, evaluate_sequence, MetricReport, DEFAULT_SPLITS};
use vidsal::model::SaliencyNet;
use vidsal::nn::NormMode;
use vidsal::tensor::Tensor;
use vidsal::{Error, Result};

use crate::config::Experiment;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io { path: path.display().to_string(), source }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

/// `run.txt`: one `key value` line per setting, no timestamps, so a
/// rerun with the same inputs reproduces the file byte for byte.
fn write_manifest(out: &Path, lines: &[(&str, String)]) -> Result<()> {
    let mut text = String::new();
    for (key, value) in lines {
        text.push_str(&format!("{key} {value}\n"));
    }
    write_text(&out.join("run.txt"), &text)
}

fn schedule_tokens(s: &Schedule) -> String {
    let milestones = s
        .milestones
        .iter()
        .map(|m| m.to_string())
        .collect::<Vec<_>>()
        .join(",");
    format!(
        "epochs={} milestones={} base_lr={} gamma={} momentum={} batch_size={}",
        s.epochs,
        if milestones.is_empty() { "-".to_string() } else { milestones },
        s.base_lr,
        s.gamma,
        s.momentum,
        s.batch_size
    )
}

pub fn synth_data(exp: &Experiment) -> Result<()> {
    let seed = exp.seed()?;
    let out = exp.out()?;
    let (base, clips) = exp.dataset(seed)?;
    ensure_dir(&out)?;
    for k in 0..clips {
        let spec = SyntheticSceneSpec { seed: seed.wrapping_add(k as u64), ..base.clone() };
        let clip = generate_synthetic(&spec)?;
        let dir = out.join(format!("clip{k:04}"));
        ensure_dir(&dir)?;
        write_clip(&dir, &clip)?;
    }
    write_manifest(
        &out,
        &[
            ("command", "synth-data".to_string()),
            ("seed", seed.to_string()),
            ("clips", clips.to_string()),
            (
                "scene",
                format!(
                    "t_frames={} spatial={}x{} blobs={} sigma={},{} velocity={},{} texture={} \
                     fixations={}",
                    base.t_frames,
                    base.spatial.0,
                    base.spatial.1,
                    base.n_blobs,
                    base.sigma_range.0,
                    base.sigma_range.1,
                    base.velocity_range.0,
                    base.velocity_range.1,
                    base.texture_amplitude,
                    base.fixations_per_frame
                ),
            ),
        ],
    )?;
    println!("wrote {clips} clips to {}", out.display());
    Ok(())
}

/// Shared body of `train`, `distill`, and `reduce`: data, model, and
/// schedule resolution plus artifact writing.
struct TrainingRun {
    seed: u64,
    out: PathBuf,
    data: PathBuf,
    labeled: Vec<TrainSample>,
    aux: Option<Vec<TrainSample>>,
    schedule: Schedule,
    regime: Regime,
}

fn prepare(exp: &Experiment, with_teacher: bool) -> Result<TrainingRun> {
    let seed = exp.seed()?;
    let out = exp.out()?;
    let data = exp.data()?;
    let labeled = load_dataset(&data)?;
    let aux = match exp.aux() {
        Some(dir) => Some(load_dataset(&dir)?),
        None => None,
    };
    let regime = match (with_teacher, aux.is_some()) {
        (false, _) => Regime::Supervised,
        (true, false) => Regime::Distill,
        (true, true) => Regime::DistillAux,
    };
    Ok(TrainingRun { seed, out, data, labeled, aux, schedule: exp.schedule()?, regime })
}

fn finish_training(
    run: &TrainingRun,
    exp: &Experiment,
    net: &SaliencyNet,
    history_text: String,
    command: &str,
    extra: Vec<(&str, String)>,
) -> Result<()> {
    ensure_dir(&run.out)?;
    save_checkpoint(&run.out.join("checkpoint"), net)?;
    write_text(&run.out.join("history.csv"), &history_text)?;
    let mut lines = vec![
        ("command", command.to_string()),
        ("seed", run.seed.to_string()),
        ("model", config_tokens(&net.config)),
        ("schedule", schedule_tokens(&run.schedule)),
        ("regime", run.regime.label().to_string()),
        ("data", run.data.display().to_string()),
    ];
    if let Some(dir) = exp.aux() {
        lines.push(("aux", dir.display().to_string()));
    }
    lines.extend(extra);
    write_manifest(&run.out, &lines)
}

pub fn train_supervised(exp: &Experiment) -> Result<()> {
    let run = prepare(exp, false)?;
    let cfg = exp.model()?;
    let mut rng = ChaCha8Rng::seed_from_u64(run.seed);
    let net = SaliencyNet::new(cfg, &mut rng)?;
    let history = train(
        &net,
        &run.labeled,
        None,
        None,
        &run.schedule,
        run.regime,
        run.seed,
    )?;
    finish_training(&run, exp, &net, history_csv(&history), "train", vec![])?;
    println!(
        "trained {} epochs on {} clips; checkpoint in {}",
        run.schedule.epochs,
        run.labeled.len(),
        run.out.display()
    );
    Ok(())
}

pub fn distill(exp: &Experiment) -> Result<()> {
    let run = prepare(exp, true)?;
    let cfg = exp.model()?;
    let spec = exp.teacher()?;
    let teacher = spec.build(cfg.t_out())?;
    let mut rng = ChaCha8Rng::seed_from_u64(run.seed);
    let net = SaliencyNet::new(cfg, &mut rng)?;
    let history = train(
        &net,
        &run.labeled,
        run.aux.as_deref(),
        Some(teacher.as_ref()),
        &run.schedule,
        run.regime,
        run.seed,
    )?;
    finish_training(
        &run,
        exp,
        &net,
        history_csv(&history),
        "distill",
        vec![("teacher", spec.describe())],
    )?;
    println!(
        "distilled {} epochs on {} clips; checkpoint in {}",
        run.schedule.epochs,
        run.labeled.len(),
        run.out.display()
    );
    Ok(())
}

pub fn reduce(exp: &Experiment) -> Result<()> {
    let run = prepare(exp, true)?;
    let cfg = exp.model()?;
    let plan = exp.reduction()?;
    let spec = exp.teacher()?;
    let teacher = spec.build(cfg.t_out())?;
    let mut rng = ChaCha8Rng::seed_from_u64(run.seed);
    let base = SaliencyNet::new(cfg, &mut rng)?;
    let outcomes = teacher_assistant_pipeline(
        base,
        &plan,
        &run.labeled,
        run.aux.as_deref(),
        teacher.as_ref(),
        &run.schedule,
        run.regime,
        run.seed,
    )?;
    ensure_dir(&run.out)?;
    let mut stage_lines = Vec::new();
    for (k, outcome) in outcomes.iter().enumerate() {
        let dir = run.out.join(format!("stage{k}_{}", outcome.width.label()));
        ensure_dir(&dir)?;
        save_checkpoint(&dir.join("checkpoint"), &outcome.net)?;
        write_text(&dir.join("history.csv"), &history_csv(&outcome.history))?;
        stage_lines.push(format!(
            "{} params={}",
            outcome.width.label(),
            outcome.net.n_params()
        ));
    }
    finish_training(
        &run,
        exp,
        &outcomes[0].net,
        history_csv(&outcomes[0].history),
        "reduce",
        vec![
            ("teacher", spec.describe()),
            ("assistant", plan.use_teacher_assistant.to_string()),
            ("stages", stage_lines.join("; ")),
        ],
    )?;
    println!(
        "reduction finished: {}",
        outcomes
            .iter()
            .map(|o| format!("{} ({} params)", o.width.label(), o.net.n_params()))
            .collect::<Vec<_>>()
            .join(" -> ")
    );
    Ok(())
}

/// Forward pass in evaluation mode; returns the fused map as [T, H, W].
pub fn predict_sequence(net: &SaliencyNet, clip: &Tensor) -> Result<Tensor> {
    let (h, w) = net.config.spatial;
    let want = [3, net.config.t_clip, h, w];
    if clip.shape() != want {
        return Err(Error::Shape(format!(
            "clip shape {:?} does not match the checkpoint's {:?}",
            clip.shape(),
            want
        )));
    }
    let tape = Tape::new();
    let batched = Tensor::new(vec![1, 3, net.config.t_clip, h, w], clip.data().to_vec())?;
    let input = tape.leaf(batched, false);
    let maps = net.forward(&tape, &input, NormMode::Eval)?;
    // Fused maps come out as [N, T, H, W] with N = 1.
    let fused = maps.fused.value();
    let s = fused.shape().to_vec();
    Tensor::new(vec![s[1], s[2], s[3]], fused.data().to_vec())
}

/// Per-clip shuffled-AUC pools: a pixel is in clip i's pool when some
/// other clip fixates it in the same frame. Within-clip pooling is the
/// fallback for single-clip datasets.
fn cross_clip_pools(fixations: &[Tensor]) -> Option<Vec<Tensor>> {
    if fixations.len() < 2 {
        return None;
    }
    let shape = fixations[0].shape().to_vec();
    let n = shape.iter().product::<usize>();
    let mut counts = vec![0u32; n];
    for fix in fixations {
        for (c, &v) in counts.iter_mut().zip(fix.data()) {
            if v > 0.5 {
                *c += 1;
            }
        }
    }
    Some(
        fixations
            .iter()
            .map(|fix| {
                let data = counts
                    .iter()
                    .zip(fix.data())
                    .map(|(&c, &v)| {
                        let own = if v > 0.5 { 1 } else { 0 };
                        if c > own {
                            1.0
                        } else {
                            0.0
                        }
                    })
                    .collect();
                Tensor::new(shape.clone(), data).unwrap()
            })
            .collect(),
    )
}

fn evaluate_checkpoint(
    net: &SaliencyNet,
    samples: &[TrainSample],
    seed: u64,
    maps_out: Option<&Path>,
) -> Result<MetricReport> {
    let t_out = net.config.t_out();
    let mut preds = Vec::with_capacity(samples.len());
    let mut gts = Vec::with_capacity(samples.len());
    let mut fixes = Vec::with_capacity(samples.len());
    for sample in samples {
        let pred = predict_sequence(net, &sample.clip)?;
        if let Some(dir) = maps_out {
            write_tensor(&dir.join(format!("{}.nst", sample.id)), &pred)?;
        }
        gts.push(vidsal::distill::align_temporal(&sample.gt.density, t_out)?);
        fixes.push(vidsal::distill::align_temporal(&sample.gt.fixations, t_out)?);
        preds.push(pred);
    }
    let pools = cross_clip_pools(&fixes);
    let mut reports = Vec::with_capacity(samples.len());
    for (i, pred) in preds.iter().enumerate() {
        let pool = pools.as_ref().map(|p| &p[i]);
        reports.push(evaluate_sequence(
            pred,
            &gts[i],
            &fixes[i],
            pool,
            DEFAULT_SPLITS,
            seed.wrapping_add(i as u64),
        )?);
    }
    combine_reports(&reports)
}

pub fn eval(exp: &Experiment, ckpt: &Path) -> Result<()> {
    let seed = exp.seed()?;
    let out = exp.out()?;
    let data = exp.data()?;
    let net = load_model(ckpt)?;
    let samples = load_dataset(&data)?;
    let maps_dir = out.join("maps");
    ensure_dir(&maps_dir)?;
    let report = evaluate_checkpoint(&net, &samples, seed, Some(&maps_dir))?;
    write_text(&out.join("report.csv"), &report.csv())?;
    write_text(&out.join("summary.txt"), &report.table())?;
    write_manifest(
        &out,
        &[
            ("command", "eval".to_string()),
            ("seed", seed.to_string()),
            ("checkpoint", ckpt.display().to_string()),
            ("data", data.display().to_string()),
            ("splits", DEFAULT_SPLITS.to_string()),
            ("model", config_tokens(&net.config)),
        ],
    )?;
    print!("{}", report.table());
    Ok(())
}

pub fn profile(exp: &Experiment, out: Option<&Path>) -> Result<()> {
    let cfg = exp.model()?;
    // Weights are irrelevant to the counts; a fixed seed keeps the
    // construction deterministic.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let net = SaliencyNet::new(cfg, &mut rng)?;
    let report = vidsal::profiler::count_model(&net)?;
    if let Some(dir) = out {
        ensure_dir(dir)?;
        write_text(&dir.join("profile.csv"), &report.csv())?;
        write_manifest(
            dir,
            &[
                ("command", "profile".to_string()),
                ("model", config_tokens(&net.config)),
            ],
        )?;
    }
    print!("{}", report.table());
    Ok(())
}

pub fn agree(exp: &Experiment, data: &Path, ckpts: &[PathBuf]) -> Result<()> {
    let out = exp.out()?;
    let samples = load_dataset(data)?;
    let mut models = Vec::with_capacity(ckpts.len());
    for ckpt in ckpts {
        let net = load_model(ckpt)?;
        let mut frames = Vec::new();
        let mut shape: Option<Vec<usize>> = None;
        for sample in &samples {
            let pred = predict_sequence(&net, &sample.clip)?;
            shape.get_or_insert_with(|| pred.shape().to_vec());
            frames.extend_from_slice(pred.data());
        }
        let s = shape.unwrap();
        let total = vec![samples.len() * s[0], s[1], s[2]];
        models.push((ckpt.display().to_string(), Tensor::new(total, frames)?));
    }
    let matrix = agreement(&models)?;
    ensure_dir(&out)?;
    write_text(&out.join("agreement.csv"), &matrix.csv())?;
    write_text(&out.join("agreement.txt"), &matrix.grid())?;
    write_manifest(
        &out,
        &[
            ("command", "agree".to_string()),
            ("data", data.display().to_string()),
            (
                "checkpoints",
                ckpts
                    .iter()
                    .map(|c| c.display().to_string())
                    .collect::<Vec<_>>()
                    .join("; "),
            ),
        ],
    )?;
    print!("{}", matrix.grid());
    Ok(())
}
