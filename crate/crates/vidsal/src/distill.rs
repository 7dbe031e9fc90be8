//! Distillation losses, teacher abstractions, the training loop, and
//! channel reduction.
//!
//! The loss is a plain unweighted sum of KL terms: one per intermediate
//! student map against the matching teacher map, one for the fused map
//! against the teacher's final map, and one for the fused map against the
//! ground truth. An auxiliary (unlabeled) batch contributes the five
//! teacher terms only. The U-Net and aggregation streams receive no
//! direct term; they learn through the fused output.
//!
//! Channel reduction halves every hidden width by merging consecutive
//! kernel pairs: output-channel pairs are averaged, input-channel pairs
//! are summed. The asymmetry is what makes the duplicate-channel identity
//! hold: a model built by duplicating each channel of a narrow model
//! (halving its input weights) reduces back to exactly the narrow model,
//! and both compute the same function.

use std::cell::RefCell;
use std::collections::HashMap;
use std::path::PathBuf;
use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::graph::{backward, sgd_step, Parameter, Tape, Var};
use crate::model::{MapSetVar, ModelConfig, SaliencyNet, Width};
use crate::nn::NormMode;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Predictions are floored here before the log; targets use the
/// 0 log 0 = 0 convention and are never floored.
pub const KL_FLOOR: f32 = 1e-7;

/// KL(target || pred) summed over each spatial slice (the trailing two
/// axes) and averaged over the leading slices. Differentiable in `pred`;
/// the target is a constant. Accumulated in 64-bit floats.
pub fn kl_divergence(pred: &Var, target: &Tensor) -> Result<Var> {
    let shape = pred.shape();
    if shape != target.shape() {
        return Err(Error::Shape(format!(
            "kl shapes disagree: pred {:?} vs target {:?}",
            shape,
            target.shape()
        )));
    }
    if shape.len() < 2 {
        return Err(Error::Shape(format!(
            "kl needs at least a 2-d spatial slice, got {shape:?}"
        )));
    }
    let hw = shape[shape.len() - 2] * shape[shape.len() - 1];
    let slices = (pred.numel() / hw.max(1)).max(1);
    let value = pred.value();
    let mut total = 0.0f64;
    for (&x, &y) in value.data().iter().zip(target.data()) {
        if y > 0.0 {
            // max() would swallow a NaN prediction; keep it visible so
            // the divergence guard can fire.
            let xf = if x.is_finite() { x.max(KL_FLOOR) as f64 } else { x as f64 };
            total += y as f64 * (y as f64 / xf).ln();
        }
    }
    let mean = total / slices as f64;
    let target = target.clone();
    let out = pred.tape().custom(
        &[pred],
        Tensor::scalar(mean as f32),
        move |args| {
            if !args.needs[0] {
                return vec![None];
            }
            let x = args.inputs[0];
            let scale = args.grad.data()[0] / slices as f32;
            let mut g = Tensor::zeros(x.shape());
            for ((gi, &xi), &yi) in
                g.data_mut().iter_mut().zip(x.data()).zip(target.data())
            {
                if yi > 0.0 && xi >= KL_FLOOR {
                    *gi = -scale * yi / xi;
                }
            }
            vec![Some(g)]
        },
    );
    Ok(out.with_precise(mean))
}

/// The five teacher maps aligned to the student slots: four per-tap maps
/// and the final one. Per-clip maps are [T, H, W]; stacked batches add a
/// leading batch axis.
#[derive(Debug, Clone)]
pub struct TeacherOutputs {
    pub maps: Vec<Tensor>,
}

impl TeacherOutputs {
    pub const N_MAPS: usize = 5;

    pub fn validate(&self) -> Result<()> {
        if self.maps.len() != Self::N_MAPS {
            return Err(Error::Config(format!(
                "teacher must provide {} maps, got {}",
                Self::N_MAPS,
                self.maps.len()
            )));
        }
        for (k, map) in self.maps.iter().enumerate() {
            check_distribution(map, &format!("teacher map {k}"))?;
        }
        Ok(())
    }

    pub fn flipped(&self) -> TeacherOutputs {
        TeacherOutputs { maps: self.maps.iter().map(flip_last_axis).collect() }
    }

    /// Stacks per-clip outputs into batched maps with a leading N axis.
    pub fn stack(batch: &[&TeacherOutputs]) -> Result<TeacherOutputs> {
        if batch.is_empty() {
            return Err(Error::Config("empty teacher batch".into()));
        }
        let mut maps = Vec::with_capacity(Self::N_MAPS);
        for k in 0..Self::N_MAPS {
            let slot: Vec<&Tensor> = batch
                .iter()
                .map(|t| {
                    t.maps.get(k).ok_or_else(|| {
                        Error::Config(format!("teacher outputs missing slot {k}"))
                    })
                })
                .collect::<Result<_>>()?;
            maps.push(stack(&slot)?);
        }
        Ok(TeacherOutputs { maps })
    }
}

/// Per-clip supervision: a density sequence and binary fixations of the
/// same shape.
#[derive(Debug, Clone)]
pub struct GroundTruthMap {
    pub density: Tensor,
    pub fixations: Tensor,
}

impl GroundTruthMap {
    pub fn validate(&self) -> Result<()> {
        if self.density.shape() != self.fixations.shape() {
            return Err(Error::Shape(format!(
                "density {:?} and fixations {:?} disagree",
                self.density.shape(),
                self.fixations.shape()
            )));
        }
        check_distribution(&self.density, "ground-truth density")?;
        let shape = self.fixations.shape();
        let hw = shape[shape.len() - 2] * shape[shape.len() - 1];
        for (s, slice) in self.fixations.data().chunks(hw).enumerate() {
            let mut any = false;
            for &v in slice {
                if v != 0.0 && v != 1.0 {
                    return Err(Error::Data(format!(
                        "fixation slice {s} holds non-binary value {v}"
                    )));
                }
                any |= v == 1.0;
            }
            if !any {
                return Err(Error::Data(format!("fixation slice {s} is empty")));
            }
        }
        Ok(())
    }
}

fn check_distribution(map: &Tensor, what: &str) -> Result<()> {
    let shape = map.shape();
    if shape.len() < 2 {
        return Err(Error::Shape(format!("{what}: rank {} too low", shape.len())));
    }
    let hw = shape[shape.len() - 2] * shape[shape.len() - 1];
    for (s, slice) in map.data().chunks(hw).enumerate() {
        let sum: f64 = slice.iter().map(|&v| v as f64).sum();
        if (sum - 1.0).abs() > 1e-4 {
            return Err(Error::Data(format!(
                "{what}: slice {s} sums to {sum}, expected 1"
            )));
        }
    }
    Ok(())
}

/// Reverses the last axis; horizontal flip for [.., H, W] layouts.
pub fn flip_last_axis(t: &Tensor) -> Tensor {
    let shape = t.shape().to_vec();
    let w = *shape.last().expect("flip needs rank >= 1");
    let src = t.data();
    let mut out = vec![0.0f32; src.len()];
    for (row_o, row_s) in out.chunks_mut(w).zip(src.chunks(w)) {
        for (o, s) in row_o.iter_mut().zip(row_s.iter().rev()) {
            *o = *s;
        }
    }
    Tensor::new(shape, out).unwrap()
}

/// Aligns a per-clip [T, H, W] (or [H, W]) map to the model's output
/// length: full sequence for multi-output, the last frame for
/// single-output.
pub fn align_temporal(map: &Tensor, t_out: usize) -> Result<Tensor> {
    let shape = map.shape();
    match shape.len() {
        2 if t_out == 1 => Tensor::new(vec![1, shape[0], shape[1]], map.data().to_vec()),
        3 if shape[0] == t_out => Ok(map.clone()),
        3 if t_out == 1 => {
            let hw = shape[1] * shape[2];
            let last = &map.data()[(shape[0] - 1) * hw..];
            Tensor::new(vec![1, shape[1], shape[2]], last.to_vec())
        }
        _ => Err(Error::Data(format!(
            "cannot align map of shape {shape:?} to {t_out} output frames"
        ))),
    }
}

/// Stacks same-shaped tensors along a new leading axis.
pub fn stack(tensors: &[&Tensor]) -> Result<Tensor> {
    let first = tensors
        .first()
        .ok_or_else(|| Error::Shape("cannot stack zero tensors".into()))?;
    let mut data = Vec::with_capacity(first.numel() * tensors.len());
    for t in tensors {
        if t.shape() != first.shape() {
            return Err(Error::Shape(format!(
                "stack shapes disagree: {:?} vs {:?}",
                first.shape(),
                t.shape()
            )));
        }
        data.extend_from_slice(t.data());
    }
    let mut shape = vec![tensors.len()];
    shape.extend_from_slice(first.shape());
    Tensor::new(shape, data)
}

/// Per-term loss values in 64-bit floats. `teacher` holds the five
/// labeled-batch distillation terms, `aux_teacher` the five auxiliary
/// ones when an unlabeled batch participates.
#[derive(Debug, Clone, Default)]
pub struct LossBreakdown {
    pub teacher: Option<[f64; 5]>,
    pub gt: Option<f64>,
    pub aux_teacher: Option<[f64; 5]>,
    pub total: f64,
}

impl LossBreakdown {
    /// Every present term, in slot order.
    pub fn terms(&self) -> Vec<f64> {
        let mut out = Vec::new();
        if let Some(t) = &self.teacher {
            out.extend_from_slice(t);
        }
        if let Some(g) = self.gt {
            out.push(g);
        }
        if let Some(t) = &self.aux_teacher {
            out.extend_from_slice(t);
        }
        out
    }

    /// The fixed CSV columns: five teacher terms (auxiliary folded in)
    /// and the ground-truth term.
    pub fn six_columns(&self) -> [f64; 6] {
        let mut cols = [0.0; 6];
        if let Some(t) = &self.teacher {
            cols[..5].copy_from_slice(t);
        }
        if let Some(t) = &self.aux_teacher {
            for (c, v) in cols[..5].iter_mut().zip(t) {
                *c += v;
            }
        }
        cols[5] = self.gt.unwrap_or(0.0);
        cols
    }
}

fn add_terms(terms: &[Var]) -> Result<Var> {
    let mut it = terms.iter();
    let first = it.next().expect("at least one loss term").clone();
    it.try_fold(first, |acc, t| acc.add(t))
}

/// The distillation objective: KL between each of the five student slots
/// and its teacher map, plus KL between the fused map and the ground
/// truth when present. Returns the scalar loss and the term breakdown.
pub fn distillation_loss(
    student: &MapSetVar,
    teacher: &TeacherOutputs,
    gt: Option<&Tensor>,
) -> Result<(Var, LossBreakdown)> {
    if teacher.maps.len() != TeacherOutputs::N_MAPS {
        return Err(Error::Config(format!(
            "teacher provides {} maps, need {}",
            teacher.maps.len(),
            TeacherOutputs::N_MAPS
        )));
    }
    let mut terms = Vec::with_capacity(6);
    let mut teacher_vals = [0.0f64; 5];
    for (k, slot) in student.intermediate.iter().enumerate() {
        let term = kl_divergence(slot, &teacher.maps[k])?;
        teacher_vals[k] = term.value_f64();
        terms.push(term);
    }
    let fin = kl_divergence(&student.fused, &teacher.maps[4])?;
    teacher_vals[4] = fin.value_f64();
    terms.push(fin);
    let mut gt_val = None;
    if let Some(density) = gt {
        let term = kl_divergence(&student.fused, density)?;
        gt_val = Some(term.value_f64());
        terms.push(term);
    }
    let total = add_terms(&terms)?;
    let breakdown = LossBreakdown {
        teacher: Some(teacher_vals),
        gt: gt_val,
        aux_teacher: None,
        total: total.value_f64(),
    };
    Ok((total, breakdown))
}

/// Supervised-only objective: KL between the fused map and the ground
/// truth.
pub fn supervised_loss(student: &MapSetVar, gt: &Tensor) -> Result<(Var, LossBreakdown)> {
    let term = kl_divergence(&student.fused, gt)?;
    let breakdown = LossBreakdown {
        teacher: None,
        gt: Some(term.value_f64()),
        aux_teacher: None,
        total: term.value_f64(),
    };
    Ok((term, breakdown))
}

/// Distillation objective over a labeled batch plus, optionally, the five
/// teacher terms over an auxiliary batch. With no auxiliary batch this is
/// exactly `distillation_loss`.
pub fn combined_loss(
    student_v: &MapSetVar,
    teacher_v: &TeacherOutputs,
    gt_v: &Tensor,
    aux: Option<(&MapSetVar, &TeacherOutputs)>,
) -> Result<(Var, LossBreakdown)> {
    let (mut total, mut breakdown) = distillation_loss(student_v, teacher_v, Some(gt_v))?;
    if let Some((student_w, teacher_w)) = aux {
        if teacher_w.maps.len() != TeacherOutputs::N_MAPS {
            return Err(Error::Config(format!(
                "auxiliary teacher provides {} maps, need {}",
                teacher_w.maps.len(),
                TeacherOutputs::N_MAPS
            )));
        }
        let mut aux_vals = [0.0f64; 5];
        for (k, slot) in student_w.intermediate.iter().enumerate() {
            let term = kl_divergence(slot, &teacher_w.maps[k])?;
            aux_vals[k] = term.value_f64();
            total = total.add(&term)?;
        }
        let fin = kl_divergence(&student_w.fused, &teacher_w.maps[4])?;
        aux_vals[4] = fin.value_f64();
        total = total.add(&fin)?;
        breakdown.aux_teacher = Some(aux_vals);
        breakdown.total = total.value_f64();
    }
    Ok((total, breakdown))
}

/// A source of the five per-clip teacher maps.
pub trait Teacher {
    fn predict(&self, clip_id: &str, clip: &Tensor) -> Result<TeacherOutputs>;
}

/// Teacher maps stored on disk, one file per slot under
/// `<root>/<clip_id>/teacher_<k>.nst`. Maps are renormalized per slice on
/// load and cached.
pub struct FileBackedTeacher {
    root: PathBuf,
    t_out: usize,
    cache: RefCell<HashMap<String, TeacherOutputs>>,
}

impl FileBackedTeacher {
    pub fn new(root: impl Into<PathBuf>, t_out: usize) -> Self {
        FileBackedTeacher {
            root: root.into(),
            t_out,
            cache: RefCell::new(HashMap::new()),
        }
    }
}

impl Teacher for FileBackedTeacher {
    fn predict(&self, clip_id: &str, _clip: &Tensor) -> Result<TeacherOutputs> {
        if let Some(hit) = self.cache.borrow().get(clip_id) {
            return Ok(hit.clone());
        }
        let mut maps = Vec::with_capacity(TeacherOutputs::N_MAPS);
        for k in 0..TeacherOutputs::N_MAPS {
            let path = self.root.join(clip_id).join(format!("teacher_{k}.nst"));
            let raw = crate::data::read_tensor(&path).map_err(|e| {
                Error::Data(format!("teacher slot {k} for clip {clip_id}: {e}"))
            })?;
            let aligned = align_temporal(&raw, self.t_out)?;
            maps.push(renormalize_slices(&aligned, clip_id, k)?);
        }
        let out = TeacherOutputs { maps };
        out.validate()?;
        self.cache.borrow_mut().insert(clip_id.to_string(), out.clone());
        Ok(out)
    }
}

fn renormalize_slices(map: &Tensor, clip_id: &str, slot: usize) -> Result<Tensor> {
    let shape = map.shape();
    let hw = shape[shape.len() - 2] * shape[shape.len() - 1];
    let mut data = map.data().to_vec();
    for (s, slice) in data.chunks_mut(hw).enumerate() {
        let mut sum = 0.0f64;
        for &v in slice.iter() {
            if v < 0.0 {
                return Err(Error::Data(format!(
                    "teacher slot {slot} for clip {clip_id}: negative mass in slice {s}"
                )));
            }
            sum += v as f64;
        }
        if sum <= 0.0 {
            return Err(Error::Data(format!(
                "teacher slot {slot} for clip {clip_id}: slice {s} has no mass"
            )));
        }
        for v in slice.iter_mut() {
            *v = (*v as f64 / sum) as f32;
        }
    }
    Tensor::new(shape.to_vec(), data)
}

/// A frozen model serving its own per-tap and fused maps as teacher
/// targets. Used both for hierarchy-matched external teachers and for
/// the full-capacity student acting as a teacher assistant.
pub struct FrozenTeacher {
    net: SaliencyNet,
}

impl FrozenTeacher {
    pub fn new(net: SaliencyNet) -> Self {
        for p in net.params() {
            p.set_trainable(false);
        }
        FrozenTeacher { net }
    }

    /// Deep-copies a model's weights and running statistics into a fresh
    /// frozen instance.
    pub fn from_model(src: &SaliencyNet) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = SaliencyNet::new(src.config.clone(), &mut rng)?;
        net.load_state(&src.state())?;
        Ok(FrozenTeacher::new(net))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.net.config
    }
}

impl Teacher for FrozenTeacher {
    fn predict(&self, _clip_id: &str, clip: &Tensor) -> Result<TeacherOutputs> {
        let (h, w) = self.net.config.spatial;
        let want = [3, self.net.config.t_clip, h, w];
        if clip.shape() != want {
            return Err(Error::Shape(format!(
                "teacher clip shape {:?}, expected {:?}",
                clip.shape(),
                want
            )));
        }
        let tape = Tape::new();
        let batched = Tensor::new(
            vec![1, 3, self.net.config.t_clip, h, w],
            clip.data().to_vec(),
        )?;
        let input = tape.leaf(batched, false);
        let maps = self.net.forward(&tape, &input, NormMode::Eval)?;
        let mut out = Vec::with_capacity(TeacherOutputs::N_MAPS);
        for v in maps.intermediate.iter().chain([&maps.fused]) {
            let t = v.value();
            let s = t.shape().to_vec();
            out.push(Tensor::new(s[1..].to_vec(), t.data().to_vec())?);
        }
        Ok(TeacherOutputs { maps: out })
    }
}

/// Epochs, milestones, and optimizer constants. The desk preset shrinks
/// the reference schedule (200 epochs, milestones 100/150/180, batch 12)
/// by a factor of ten.
#[derive(Debug, Clone)]
pub struct Schedule {
    pub epochs: usize,
    pub milestones: Vec<usize>,
    pub base_lr: f32,
    pub gamma: f32,
    pub momentum: f32,
    pub batch_size: usize,
}

impl Schedule {
    pub fn desk() -> Schedule {
        Schedule {
            epochs: 20,
            milestones: vec![10, 15, 18],
            base_lr: 0.01,
            gamma: 0.1,
            momentum: 0.9,
            batch_size: 4,
        }
    }

    pub fn paper_scale() -> Schedule {
        Schedule {
            epochs: 200,
            milestones: vec![100, 150, 180],
            base_lr: 0.01,
            gamma: 0.1,
            momentum: 0.9,
            batch_size: 12,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_lr <= 0.0 || self.gamma <= 0.0 || self.batch_size == 0 {
            return Err(Error::Config("schedule constants must be positive".into()));
        }
        if !self.milestones.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Config("milestones must be strictly increasing".into()));
        }
        if self.milestones.first().is_some_and(|&m| m == 0) {
            return Err(Error::Config("milestones must be positive".into()));
        }
        Ok(())
    }

    /// Learning rate during the given 1-based epoch.
    pub fn lr_at(&self, epoch: usize) -> f32 {
        let drops = self.milestones.iter().filter(|&&m| m <= epoch).count();
        self.base_lr * self.gamma.powi(drops as i32)
    }
}

/// What the loss is built from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    /// Ground truth only.
    Supervised,
    /// Teacher maps plus ground truth.
    Distill,
    /// Distillation plus an auxiliary unlabeled batch each step.
    DistillAux,
}

impl Regime {
    pub fn label(self) -> &'static str {
        match self {
            Regime::Supervised => "supervised",
            Regime::Distill => "distill",
            Regime::DistillAux => "distill+aux",
        }
    }

    pub fn needs_teacher(self) -> bool {
        !matches!(self, Regime::Supervised)
    }
}

/// One clip with its supervision.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub id: String,
    pub clip: Tensor,
    pub gt: GroundTruthMap,
}

/// One loss-history row; the six term columns are the five teacher KL
/// terms (auxiliary contributions folded in) and the ground-truth term.
#[derive(Debug, Clone)]
pub struct EpochRow {
    pub epoch: usize,
    pub lr: f32,
    pub total: f64,
    pub terms: [f64; 6],
}

/// Renders loss history as CSV, one row per epoch.
pub fn history_csv(rows: &[EpochRow]) -> String {
    let mut out = String::from("epoch,lr,total,kl_t1,kl_t2,kl_t3,kl_t4,kl_t5,kl_gt\n");
    for r in rows {
        out.push_str(&format!("{},{},{}", r.epoch, r.lr, r.total));
        for t in r.terms {
            out.push_str(&format!(",{t}"));
        }
        out.push('\n');
    }
    out
}

struct BatchTensors {
    clip: Tensor,
    teacher: Option<TeacherOutputs>,
    gt: Option<Tensor>,
}

/// Flips, aligns, and stacks a batch. Teacher maps are predicted on the
/// unflipped clip and flipped together with it, keeping the supervision
/// geometrically consistent.
fn assemble(
    samples: &[&TrainSample],
    flips: &[bool],
    teacher: Option<&dyn Teacher>,
    t_out: usize,
    with_gt: bool,
) -> Result<BatchTensors> {
    let mut clips = Vec::with_capacity(samples.len());
    let mut gts = Vec::with_capacity(samples.len());
    let mut teachers = Vec::with_capacity(samples.len());
    for (sample, &flip) in samples.iter().zip(flips) {
        let clip = if flip { flip_last_axis(&sample.clip) } else { sample.clip.clone() };
        clips.push(clip);
        if with_gt {
            let aligned = align_temporal(&sample.gt.density, t_out)?;
            gts.push(if flip { flip_last_axis(&aligned) } else { aligned });
        }
        if let Some(t) = teacher {
            let maps = t.predict(&sample.id, &sample.clip)?;
            teachers.push(if flip { maps.flipped() } else { maps });
        }
    }
    let clip = stack(&clips.iter().collect::<Vec<_>>())?;
    let gt = if with_gt {
        Some(stack(&gts.iter().collect::<Vec<_>>())?)
    } else {
        None
    };
    let teacher = if teachers.is_empty() {
        None
    } else {
        Some(TeacherOutputs::stack(&teachers.iter().collect::<Vec<_>>())?)
    };
    Ok(BatchTensors { clip, teacher, gt })
}

fn step_loss(
    net: &SaliencyNet,
    tape: &Tape,
    batch: &BatchTensors,
    aux: Option<&BatchTensors>,
    norm: NormMode,
) -> Result<(Var, LossBreakdown)> {
    let clip = tape.leaf(batch.clip.clone(), false);
    let maps = net.forward(tape, &clip, norm)?;
    match (&batch.teacher, aux) {
        (None, None) => {
            let gt = batch
                .gt
                .as_ref()
                .ok_or_else(|| Error::Config("supervised step without ground truth".into()))?;
            supervised_loss(&maps, gt)
        }
        (Some(teacher), None) => distillation_loss(&maps, teacher, batch.gt.as_ref()),
        (Some(teacher), Some(aux)) => {
            let gt = batch
                .gt
                .as_ref()
                .ok_or_else(|| Error::Config("labeled batch lost its ground truth".into()))?;
            let aux_teacher = aux.teacher.as_ref().ok_or_else(|| {
                Error::Config("auxiliary batch requires a teacher".into())
            })?;
            let aux_clip = tape.leaf(aux.clip.clone(), false);
            let aux_maps = net.forward(tape, &aux_clip, norm)?;
            combined_loss(&maps, teacher, gt, Some((&aux_maps, aux_teacher)))
        }
        (None, Some(_)) => Err(Error::Config(
            "auxiliary batch requires a teacher".into(),
        )),
    }
}

/// Momentum-SGD training over the combined loss. Returns per-epoch
/// history; the model is updated in place through its shared parameters.
pub fn train(
    net: &SaliencyNet,
    labeled: &[TrainSample],
    aux: Option<&[TrainSample]>,
    teacher: Option<&dyn Teacher>,
    schedule: &Schedule,
    regime: Regime,
    seed: u64,
) -> Result<Vec<EpochRow>> {
    schedule.validate()?;
    if labeled.is_empty() {
        return Err(Error::Config("no labeled samples".into()));
    }
    if regime.needs_teacher() && teacher.is_none() {
        return Err(Error::Config(format!(
            "regime {} requires a teacher",
            regime.label()
        )));
    }
    let aux_pool: &[TrainSample] = match (regime, aux) {
        (Regime::DistillAux, Some(a)) if !a.is_empty() => a,
        (Regime::DistillAux, _) => {
            return Err(Error::Config("distill+aux requires auxiliary clips".into()))
        }
        _ => &[],
    };
    let params: Vec<Rc<Parameter>> = net.params();
    let t_out = net.config.t_out();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut history = Vec::with_capacity(schedule.epochs);
    let mut aux_order: Vec<usize> = Vec::new();
    let mut aux_cursor = 0usize;
    for epoch in 1..=schedule.epochs {
        let lr = schedule.lr_at(epoch);
        let mut order: Vec<usize> = (0..labeled.len()).collect();
        order.shuffle(&mut rng);
        let mut sum_total = 0.0f64;
        let mut sum_terms = [0.0f64; 6];
        let mut seen = 0usize;
        for (step, chunk) in order.chunks(schedule.batch_size).enumerate() {
            let samples: Vec<&TrainSample> = chunk.iter().map(|&i| &labeled[i]).collect();
            let flips: Vec<bool> = samples.iter().map(|_| rng.gen_bool(0.5)).collect();
            let step_teacher = if regime.needs_teacher() { teacher } else { None };
            let batch = assemble(&samples, &flips, step_teacher, t_out, true)?;
            let aux_batch = if regime == Regime::DistillAux {
                let mut picks = Vec::with_capacity(chunk.len());
                for _ in 0..chunk.len() {
                    if aux_cursor >= aux_order.len() {
                        aux_order = (0..aux_pool.len()).collect();
                        aux_order.shuffle(&mut rng);
                        aux_cursor = 0;
                    }
                    picks.push(&aux_pool[aux_order[aux_cursor]]);
                    aux_cursor += 1;
                }
                let aux_flips: Vec<bool> = picks.iter().map(|_| rng.gen_bool(0.5)).collect();
                Some(assemble(&picks, &aux_flips, step_teacher, t_out, false)?)
            } else {
                None
            };
            let tape = Tape::new();
            let (loss, bd) = step_loss(net, &tape, &batch, aux_batch.as_ref(), NormMode::Train)?;
            if !bd.total.is_finite() {
                return Err(Error::Divergence(format!(
                    "epoch {epoch} step {step} lr {lr}: loss {} with terms {:?}",
                    bd.total,
                    bd.terms()
                )));
            }
            backward(&loss)?;
            sgd_step(&params, lr, schedule.momentum)?;
            let weight = chunk.len() as f64;
            sum_total += bd.total * weight;
            for (acc, v) in sum_terms.iter_mut().zip(bd.six_columns()) {
                *acc += v * weight;
            }
            seen += chunk.len();
        }
        let inv = 1.0 / seen as f64;
        history.push(EpochRow {
            epoch,
            lr,
            total: sum_total * inv,
            terms: sum_terms.map(|v| v * inv),
        });
    }
    Ok(history)
}

/// Mean loss over a dataset without augmentation, using running
/// normalization statistics. Auxiliary terms never participate here.
pub fn eval_loss(
    net: &SaliencyNet,
    samples: &[TrainSample],
    teacher: Option<&dyn Teacher>,
    regime: Regime,
    batch_size: usize,
) -> Result<(f64, LossBreakdown)> {
    if samples.is_empty() {
        return Err(Error::Config("no evaluation samples".into()));
    }
    if regime.needs_teacher() && teacher.is_none() {
        return Err(Error::Config(format!(
            "regime {} requires a teacher",
            regime.label()
        )));
    }
    let t_out = net.config.t_out();
    let mut sum_total = 0.0f64;
    let mut sum_teacher = [0.0f64; 5];
    let mut sum_gt = 0.0f64;
    let mut seen = 0usize;
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&TrainSample> = chunk.iter().collect();
        let flips = vec![false; refs.len()];
        let step_teacher = if regime.needs_teacher() { teacher } else { None };
        let batch = assemble(&refs, &flips, step_teacher, t_out, true)?;
        let tape = Tape::new();
        let (_, bd) = step_loss(net, &tape, &batch, None, NormMode::Eval)?;
        let weight = chunk.len() as f64;
        sum_total += bd.total * weight;
        if let Some(t) = &bd.teacher {
            for (acc, v) in sum_teacher.iter_mut().zip(t) {
                *acc += v * weight;
            }
        }
        sum_gt += bd.gt.unwrap_or(0.0) * weight;
        seen += chunk.len();
    }
    let inv = 1.0 / seen as f64;
    let breakdown = LossBreakdown {
        teacher: regime.needs_teacher().then(|| sum_teacher.map(|v| v * inv)),
        gt: Some(sum_gt * inv),
        aux_teacher: None,
        total: sum_total * inv,
    };
    Ok((breakdown.total, breakdown))
}

/// Merges consecutive pairs along one axis: averaged when `average`,
/// summed otherwise. An odd trailing element is kept as is.
fn reduce_axis(t: &Tensor, axis: usize, average: bool) -> Tensor {
    let shape = t.shape();
    let len = shape[axis];
    let new_len = len.div_ceil(2);
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut new_shape = shape.to_vec();
    new_shape[axis] = new_len;
    let src = t.data();
    let mut out = vec![0.0f32; outer * new_len * inner];
    let scale = if average { 0.5 } else { 1.0 };
    for o in 0..outer {
        for j in 0..new_len {
            let a = 2 * j;
            let b = 2 * j + 1;
            for i in 0..inner {
                let dst = (o * new_len + j) * inner + i;
                out[dst] = if b < len {
                    scale * (src[(o * len + a) * inner + i] + src[(o * len + b) * inner + i])
                } else {
                    src[(o * len + a) * inner + i]
                };
            }
        }
    }
    Tensor::new(new_shape, out).unwrap()
}

/// Shrinks a parameter tensor onto a halved-channel shape. Axes that
/// already match are kept; a halved leading axis averages kernel pairs;
/// a halved second axis of a convolution weight sums the pairs, so that
/// duplicated parent features keep their pre-activation magnitude.
pub fn reduce_tensor(old: &Tensor, new_shape: &[usize]) -> Result<Tensor> {
    if old.shape().len() != new_shape.len() {
        return Err(Error::Param(format!(
            "rank mismatch: {:?} vs {:?}",
            old.shape(),
            new_shape
        )));
    }
    let mut t = old.clone();
    for axis in 0..new_shape.len() {
        let cur = t.shape()[axis];
        let want = new_shape[axis];
        if cur == want {
            continue;
        }
        if want != cur.div_ceil(2) {
            return Err(Error::Param(format!(
                "axis {axis} cannot shrink {cur} -> {want}; only halving is supported"
            )));
        }
        let average = !(axis == 1 && new_shape.len() == 5);
        t = reduce_axis(&t, axis, average);
    }
    Ok(t)
}

/// Builds the next-narrower model and fills it by pairwise kernel
/// merging from the source model. The target width must be exactly half
/// the current one.
pub fn reduce_channels(net: &SaliencyNet, target: Width) -> Result<SaliencyNet> {
    let next = net.config.width.narrower().ok_or_else(|| {
        Error::Config("model is already at the narrowest width".into())
    })?;
    if target != next {
        return Err(Error::Config(format!(
            "reduction stage must halve the width: current {}, requested {}",
            net.config.width.label(),
            target.label()
        )));
    }
    let cfg = net.config.narrowed().expect("narrower width exists");
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let reduced = SaliencyNet::new(cfg, &mut rng)?;
    let old: HashMap<String, Tensor> = net.state().into_iter().collect();
    let mut entries = Vec::new();
    for (name, fresh) in reduced.state() {
        let src = old
            .get(&name)
            .ok_or_else(|| Error::Param(format!("source model lacks {name}")))?;
        entries.push((name, reduce_tensor(src, fresh.shape())?));
    }
    reduced.load_state(&entries)?;
    Ok(reduced)
}

/// Width stages for compression, widest first.
#[derive(Debug, Clone)]
pub struct ReductionPlan {
    pub stages: Vec<Width>,
    pub use_teacher_assistant: bool,
}

impl ReductionPlan {
    pub fn full(use_teacher_assistant: bool) -> ReductionPlan {
        ReductionPlan {
            stages: vec![Width::Full, Width::Half, Width::Quarter],
            use_teacher_assistant,
        }
    }

    pub fn validate(&self, start: Width) -> Result<()> {
        let first = *self
            .stages
            .first()
            .ok_or_else(|| Error::Config("empty reduction plan".into()))?;
        if first != start {
            return Err(Error::Config(format!(
                "plan starts at width {}, model is {}",
                first.label(),
                start.label()
            )));
        }
        for pair in self.stages.windows(2) {
            if pair[0].narrower() != Some(pair[1]) {
                return Err(Error::Config(format!(
                    "plan stage {} does not halve {}",
                    pair[1].label(),
                    pair[0].label()
                )));
            }
        }
        Ok(())
    }
}

/// One trained compression stage.
pub struct StageOutcome {
    pub width: Width,
    pub net: SaliencyNet,
    pub history: Vec<EpochRow>,
}

/// Trains the base model, then walks the reduction plan: each narrower
/// stage is initialized by kernel merging from the previous stage and
/// distilled either against the external teacher or, with the teacher
/// assistant enabled, against the trained full-capacity student.
#[allow(clippy::too_many_arguments)]
pub fn teacher_assistant_pipeline(
    base: SaliencyNet,
    plan: &ReductionPlan,
    labeled: &[TrainSample],
    aux: Option<&[TrainSample]>,
    teacher: &dyn Teacher,
    schedule: &Schedule,
    regime: Regime,
    seed: u64,
) -> Result<Vec<StageOutcome>> {
    plan.validate(base.config.width)?;
    let mut outcomes = Vec::with_capacity(plan.stages.len());
    let history = train(&base, labeled, aux, Some(teacher), schedule, regime, seed)?;
    outcomes.push(StageOutcome { width: base.config.width, net: base, history });
    let assistant = if plan.use_teacher_assistant && plan.stages.len() > 1 {
        Some(FrozenTeacher::from_model(&outcomes[0].net)?)
    } else {
        None
    };
    for (k, &width) in plan.stages.iter().enumerate().skip(1) {
        let reduced = reduce_channels(&outcomes[k - 1].net, width)?;
        let stage_teacher: &dyn Teacher = match &assistant {
            Some(a) => a,
            None => teacher,
        };
        let history = train(
            &reduced,
            labeled,
            aux,
            Some(stage_teacher),
            schedule,
            regime,
            seed + k as u64,
        )?;
        outcomes.push(StageOutcome { width, net: reduced, history });
    }
    Ok(outcomes)
}
