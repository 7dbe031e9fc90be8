//! Saliency evaluation metrics and pairwise model-agreement matrices.
//!
//! Conventions follow the common saliency-benchmark definitions, with
//! the tie and degenerate rules spelled out per function: population
//! standard deviation, >= thresholding, ties credited 0.5, constant
//! maps scored 0 (correlation, scanpath saliency) or 0.5 (ROC areas).
//! Everything is computed in 64-bit floats; ROC areas accumulate
//! integer counts so results are exact for a given threshold set.
//!
//! Frame-level values are averaged arithmetically over the frames where
//! a metric is defined; agreement matrices average per-frame values
//! rather than scoring concatenated maps.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;
use crate::{Error, Result};

/// Splits used by the sampled ROC areas.
pub const DEFAULT_SPLITS: usize = 100;

const SIGMA_FLOOR: f64 = 1e-8;

/// A metric value plus a flag marking degenerate or renormalized input.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scored {
    pub value: f64,
    pub flagged: bool,
}

fn check_same_shape(p: &Tensor, q: &Tensor, what: &str) -> Result<()> {
    if p.shape() != q.shape() {
        return Err(Error::Shape(format!(
            "{what}: shapes {:?} and {:?} disagree",
            p.shape(),
            q.shape()
        )));
    }
    Ok(())
}

fn mean(v: &[f32]) -> f64 {
    v.iter().map(|&x| x as f64).sum::<f64>() / v.len() as f64
}

/// Pearson correlation over flattened pixels, in [-1, 1]. A constant
/// argument makes the correlation undefined; the value is 0 with the
/// flag set.
pub fn cc(p: &Tensor, q: &Tensor) -> Result<Scored> {
    check_same_shape(p, q, "cc")?;
    let (pd, qd) = (p.data(), q.data());
    let (mp, mq) = (mean(pd), mean(qd));
    let mut cov = 0.0f64;
    let mut vp = 0.0f64;
    let mut vq = 0.0f64;
    for (&a, &b) in pd.iter().zip(qd) {
        let da = a as f64 - mp;
        let db = b as f64 - mq;
        cov += da * db;
        vp += da * da;
        vq += db * db;
    }
    if vp <= 0.0 || vq <= 0.0 {
        return Ok(Scored { value: 0.0, flagged: true });
    }
    Ok(Scored { value: cov / (vp.sqrt() * vq.sqrt()), flagged: false })
}

/// Histogram intersection of two distributions, in [0, 1]. Inputs that
/// do not sum to 1 are renormalized and flagged.
pub fn sim(p: &Tensor, q: &Tensor) -> Result<Scored> {
    check_same_shape(p, q, "sim")?;
    let mut flagged = false;
    let mut norm = |d: &[f32]| -> Result<Vec<f64>> {
        let mut sum = 0.0f64;
        for &v in d {
            if v < 0.0 {
                return Err(Error::Data(format!(
                    "sim input holds negative mass {v}"
                )));
            }
            sum += v as f64;
        }
        if sum <= 0.0 {
            return Err(Error::Data("sim input has no mass".into()));
        }
        if (sum - 1.0).abs() > 1e-4 {
            flagged = true;
        }
        Ok(d.iter().map(|&v| v as f64 / sum).collect())
    };
    let pn = norm(p.data())?;
    let qn = norm(q.data())?;
    let value = pn.iter().zip(&qn).map(|(a, b)| a.min(*b)).sum();
    Ok(Scored { value, flagged })
}

fn fixated_indices(fix: &Tensor) -> Vec<usize> {
    fix.data()
        .iter()
        .enumerate()
        .filter(|(_, &v)| v > 0.5)
        .map(|(i, _)| i)
        .collect()
}

/// Mean z-scored saliency at the fixated pixels (population standard
/// deviation). A constant map scores 0 with the flag set; a frame with
/// no fixations is skipped (None).
pub fn nss(p: &Tensor, fix: &Tensor) -> Result<Option<Scored>> {
    check_same_shape(p, fix, "nss")?;
    let fixated = fixated_indices(fix);
    if fixated.is_empty() {
        return Ok(None);
    }
    let pd = p.data();
    let m = mean(pd);
    let var = pd.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / pd.len() as f64;
    let sigma = var.sqrt();
    if sigma < SIGMA_FLOOR {
        return Ok(Some(Scored { value: 0.0, flagged: true }));
    }
    let z = fixated
        .iter()
        .map(|&i| (pd[i] as f64 - m) / sigma)
        .sum::<f64>()
        / fixated.len() as f64;
    Ok(Some(Scored { value: z, flagged: false }))
}

/// Trapezoidal area under ROC points accumulated as integer counts:
/// `points` are (false positives, true positives) per threshold plus
/// the (0, 0) and (n_neg, n_fix) endpoints, sorted ascending.
fn roc_area(points: &[(u64, u64)], n_neg: u64, n_fix: u64) -> f64 {
    let mut num = 0u64;
    for pair in points.windows(2) {
        let (fp0, tp0) = pair[0];
        let (fp1, tp1) = pair[1];
        num += (fp1 - fp0) * (tp0 + tp1);
    }
    num as f64 / (2 * n_neg * n_fix) as f64
}

/// ROC area with thresholds at the saliency values of all fixated
/// pixels; >= counts as above threshold. Frames without both a fixated
/// and a non-fixated pixel are skipped.
pub fn auc_judd(p: &Tensor, fix: &Tensor) -> Result<Option<f64>> {
    check_same_shape(p, fix, "auc_judd")?;
    let pd = p.data();
    let fixated = fixated_indices(fix);
    let n_fix = fixated.len();
    let n_neg = pd.len() - n_fix;
    if n_fix == 0 || n_neg == 0 {
        return Ok(None);
    }
    let negatives: Vec<f32> = fix
        .data()
        .iter()
        .zip(pd)
        .filter(|(&f, _)| f <= 0.5)
        .map(|(_, &v)| v)
        .collect();
    let positives: Vec<f32> = fixated.iter().map(|&i| pd[i]).collect();
    let mut thresholds = positives.clone();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let mut points = vec![(0u64, 0u64)];
    for theta in thresholds {
        let tp = positives.iter().filter(|&&v| v >= theta).count() as u64;
        let fp = negatives.iter().filter(|&&v| v >= theta).count() as u64;
        points.push((fp, tp));
    }
    points.push((n_neg as u64, n_fix as u64));
    points.sort_unstable();
    Ok(Some(roc_area(&points, n_neg as u64, n_fix as u64)))
}

/// Mann-Whitney area for one positive/negative sample pair set; ties
/// credit 0.5. Equivalent to the threshold-sweep ROC area.
fn pairwise_area(pos: &[f32], neg: &[f32]) -> f64 {
    let mut num = 0.0f64;
    for &a in pos {
        for &b in neg {
            num += match a.total_cmp(&b) {
                std::cmp::Ordering::Greater => 1.0,
                std::cmp::Ordering::Equal => 0.5,
                std::cmp::Ordering::Less => 0.0,
            };
        }
    }
    num / (pos.len() * neg.len()) as f64
}

/// Sampled ROC area: per split, negatives are uniform draws from the
/// non-fixated pixels (as many as there are fixations); the result is
/// the mean area over splits. Seeded and reproducible.
pub fn auc_borji(p: &Tensor, fix: &Tensor, n_splits: usize, seed: u64) -> Result<Option<f64>> {
    check_same_shape(p, fix, "auc_borji")?;
    if n_splits == 0 {
        return Err(Error::Param("need at least one split".into()));
    }
    let pd = p.data();
    let fixated = fixated_indices(fix);
    let negatives: Vec<f32> = fix
        .data()
        .iter()
        .zip(pd)
        .filter(|(&f, _)| f <= 0.5)
        .map(|(_, &v)| v)
        .collect();
    if fixated.is_empty() || negatives.is_empty() {
        return Ok(None);
    }
    let positives: Vec<f32> = fixated.iter().map(|&i| pd[i]).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0f64;
    for _ in 0..n_splits {
        let sample: Vec<f32> = (0..positives.len())
            .map(|_| negatives[rng.gen_range(0..negatives.len())])
            .collect();
        total += pairwise_area(&positives, &sample);
    }
    Ok(Some(total / n_splits as f64))
}

/// Shuffled sampled ROC area: negatives are drawn from a pool of
/// fixation locations from other frames, excluding pixels fixated in
/// the current frame. An empty pool after exclusion skips the frame.
pub fn sauc(
    p: &Tensor,
    fix: &Tensor,
    pool: &Tensor,
    n_splits: usize,
    seed: u64,
) -> Result<Option<f64>> {
    check_same_shape(p, fix, "sauc")?;
    check_same_shape(p, pool, "sauc pool")?;
    if n_splits == 0 {
        return Err(Error::Param("need at least one split".into()));
    }
    let pd = p.data();
    let fixated = fixated_indices(fix);
    if fixated.is_empty() {
        return Ok(None);
    }
    let fd = fix.data();
    let pool_values: Vec<f32> = pool
        .data()
        .iter()
        .enumerate()
        .filter(|(i, &v)| v > 0.5 && fd[*i] <= 0.5)
        .map(|(i, _)| pd[i])
        .collect();
    if pool_values.is_empty() {
        return Ok(None);
    }
    let positives: Vec<f32> = fixated.iter().map(|&i| pd[i]).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0f64;
    for _ in 0..n_splits {
        let sample: Vec<f32> = (0..positives.len())
            .map(|_| pool_values[rng.gen_range(0..pool_values.len())])
            .collect();
        total += pairwise_area(&positives, &sample);
    }
    Ok(Some(total / n_splits as f64))
}

/// Per-frame metric values; fixation-based entries are None where the
/// frame was skipped for that metric.
#[derive(Debug, Clone)]
pub struct FrameScores {
    pub frame: usize,
    pub auc_judd: Option<f64>,
    pub auc_borji: Option<f64>,
    pub sauc: Option<f64>,
    pub cc: f64,
    pub nss: Option<f64>,
    pub sim: f64,
}

/// Means over the frames where each metric is defined; NaN when a
/// metric never produced a value.
#[derive(Debug, Clone, Copy)]
pub struct Aggregates {
    pub auc_judd: f64,
    pub auc_borji: f64,
    pub sauc: f64,
    pub cc: f64,
    pub nss: f64,
    pub sim: f64,
}

/// Frame scores plus aggregates for one evaluation run.
#[derive(Debug, Clone)]
pub struct MetricReport {
    pub frames: Vec<FrameScores>,
    /// Frames with no fixations (all fixation metrics skipped there).
    pub skipped_no_fixations: usize,
    /// Some prediction or reference slice needed renormalizing for SIM.
    pub renormalized: bool,
    pub aggregates: Aggregates,
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> f64 {
    let mut sum = 0.0f64;
    let mut n = 0usize;
    for v in values.flatten() {
        sum += v;
        n += 1;
    }
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

fn aggregate(frames: &[FrameScores]) -> Aggregates {
    Aggregates {
        auc_judd: mean_defined(frames.iter().map(|f| f.auc_judd)),
        auc_borji: mean_defined(frames.iter().map(|f| f.auc_borji)),
        sauc: mean_defined(frames.iter().map(|f| f.sauc)),
        cc: mean_defined(frames.iter().map(|f| Some(f.cc))),
        nss: mean_defined(frames.iter().map(|f| f.nss)),
        sim: mean_defined(frames.iter().map(|f| Some(f.sim))),
    }
}

fn frame_slice(t: &Tensor, f: usize) -> Tensor {
    let shape = t.shape();
    let hw = shape[1] * shape[2];
    Tensor::new(vec![shape[1], shape[2]], t.data()[f * hw..(f + 1) * hw].to_vec()).unwrap()
}

fn check_rank3(t: &Tensor, what: &str) -> Result<()> {
    if t.shape().len() != 3 {
        return Err(Error::Shape(format!(
            "{what} must be [T, H, W], got {:?}",
            t.shape()
        )));
    }
    Ok(())
}

/// Scores a predicted map sequence against a density sequence and its
/// fixations, frame by frame. The shuffled-AUC negative pool defaults
/// to the union of all other frames' fixations; `pool` overrides it.
pub fn evaluate_sequence(
    pred: &Tensor,
    gt_density: &Tensor,
    fixations: &Tensor,
    pool: Option<&Tensor>,
    n_splits: usize,
    seed: u64,
) -> Result<MetricReport> {
    check_rank3(pred, "prediction")?;
    check_same_shape(pred, gt_density, "evaluate")?;
    check_same_shape(pred, fixations, "evaluate")?;
    let t = pred.shape()[0];
    let union = match pool {
        Some(p) => {
            check_same_shape(pred, p, "evaluate pool")?;
            p.clone()
        }
        None => {
            let shape = fixations.shape().to_vec();
            let hw = shape[1] * shape[2];
            let fd = fixations.data();
            let mut u = vec![0.0f32; fd.len()];
            // Each frame's pool: fixations of every other frame.
            for f in 0..t {
                for (i, slot) in u[f * hw..(f + 1) * hw].iter_mut().enumerate() {
                    for g in 0..t {
                        if g != f && fd[g * hw + i] > 0.5 {
                            *slot = 1.0;
                            break;
                        }
                    }
                }
            }
            Tensor::new(shape, u).unwrap()
        }
    };
    let mut frames = Vec::with_capacity(t);
    let mut skipped = 0usize;
    let mut renormalized = false;
    for f in 0..t {
        let p = frame_slice(pred, f);
        let g = frame_slice(gt_density, f);
        let fx = frame_slice(fixations, f);
        let px = frame_slice(&union, f);
        let frame_seed = seed.wrapping_add((f as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let cc_v = cc(&p, &g)?;
        let sim_v = sim(&p, &g)?;
        renormalized |= sim_v.flagged;
        let nss_v = nss(&p, &fx)?;
        if nss_v.is_none() {
            skipped += 1;
        }
        frames.push(FrameScores {
            frame: f,
            auc_judd: auc_judd(&p, &fx)?,
            auc_borji: auc_borji(&p, &fx, n_splits, frame_seed)?,
            sauc: sauc(&p, &fx, &px, n_splits, frame_seed)?,
            cc: cc_v.value,
            nss: nss_v.map(|s| s.value),
            sim: sim_v.value,
        });
    }
    let aggregates = aggregate(&frames);
    Ok(MetricReport { frames, skipped_no_fixations: skipped, renormalized, aggregates })
}

/// Concatenates per-clip reports into one, re-deriving the aggregates
/// so they stay the mean over all non-skipped frames.
pub fn combine_reports(reports: &[MetricReport]) -> Result<MetricReport> {
    if reports.is_empty() {
        return Err(Error::Config("no reports to combine".into()));
    }
    let mut frames = Vec::new();
    let mut skipped = 0;
    let mut renormalized = false;
    for r in reports {
        for f in &r.frames {
            let mut f = f.clone();
            f.frame = frames.len();
            frames.push(f);
        }
        skipped += r.skipped_no_fixations;
        renormalized |= r.renormalized;
    }
    let aggregates = aggregate(&frames);
    Ok(MetricReport { frames, skipped_no_fixations: skipped, renormalized, aggregates })
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x}"),
        None => "skipped".to_string(),
    }
}

impl MetricReport {
    /// One CSV row per frame.
    pub fn csv(&self) -> String {
        let mut out = String::from("frame,auc_judd,auc_borji,sauc,cc,nss,sim\n");
        for f in &self.frames {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                f.frame,
                fmt_opt(f.auc_judd),
                fmt_opt(f.auc_borji),
                fmt_opt(f.sauc),
                f.cc,
                fmt_opt(f.nss),
                f.sim,
            ));
        }
        out
    }

    /// Aggregate summary as a small text table.
    pub fn table(&self) -> String {
        let a = &self.aggregates;
        let mut out = String::new();
        out.push_str("metric      mean over frames\n");
        out.push_str(&format!("auc-judd    {:.6}\n", a.auc_judd));
        out.push_str(&format!("auc-borji   {:.6}\n", a.auc_borji));
        out.push_str(&format!("sauc        {:.6}\n", a.sauc));
        out.push_str(&format!("cc          {:.6}\n", a.cc));
        out.push_str(&format!("nss         {:.6}\n", a.nss));
        out.push_str(&format!("sim         {:.6}\n", a.sim));
        out.push_str(&format!(
            "frames      {} scored, {} without fixations\n",
            self.frames.len(),
            self.skipped_no_fixations
        ));
        if self.renormalized {
            out.push_str("note        some maps were renormalized for sim\n");
        }
        out
    }
}

/// Pairwise prediction-similarity percentages between models.
#[derive(Debug, Clone)]
pub struct AgreementMatrix {
    pub names: Vec<String>,
    pub cc: Vec<Vec<f64>>,
    pub sim: Vec<Vec<f64>>,
}

/// Frame-averaged pairwise CC and SIM between the models' predicted
/// map sequences, as percentages. Off-diagonal cells are symmetrized
/// by averaging the two orders; the diagonal is 100 by definition.
pub fn agreement(models: &[(String, Tensor)]) -> Result<AgreementMatrix> {
    if models.len() < 2 {
        return Err(Error::Config("agreement needs at least two models".into()));
    }
    let t = models[0].1.shape().to_vec();
    for (name, maps) in models {
        check_rank3(maps, "agreement maps")?;
        if maps.shape() != t {
            return Err(Error::Data(format!(
                "model {name} maps {:?} misaligned with {:?}",
                maps.shape(),
                t
            )));
        }
    }
    let n = models.len();
    let frames = t[0];
    let mut cc_m = vec![vec![100.0f64; n]; n];
    let mut sim_m = vec![vec![100.0f64; n]; n];
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let mut cc_sum = 0.0f64;
            let mut sim_sum = 0.0f64;
            for f in 0..frames {
                let a = frame_slice(&models[i].1, f);
                let b = frame_slice(&models[j].1, f);
                cc_sum += cc(&a, &b)?.value;
                sim_sum += sim(&a, &b)?.value;
            }
            cc_m[i][j] = 100.0 * cc_sum / frames as f64;
            sim_m[i][j] = 100.0 * sim_sum / frames as f64;
        }
    }
    for i in 0..n {
        for j in (i + 1)..n {
            let c = 0.5 * (cc_m[i][j] + cc_m[j][i]);
            cc_m[i][j] = c;
            cc_m[j][i] = c;
            let s = 0.5 * (sim_m[i][j] + sim_m[j][i]);
            sim_m[i][j] = s;
            sim_m[j][i] = s;
        }
    }
    Ok(AgreementMatrix {
        names: models.iter().map(|(n, _)| n.clone()).collect(),
        cc: cc_m,
        sim: sim_m,
    })
}

fn render_grid(names: &[String], m: &[Vec<f64>]) -> String {
    let w = names.iter().map(|n| n.len()).max().unwrap_or(0).max(6);
    let mut out = format!("{:w$}", "", w = w + 1);
    for n in names {
        out.push_str(&format!("{n:>w$} ", w = w));
    }
    out.push('\n');
    for (name, row) in names.iter().zip(m) {
        out.push_str(&format!("{name:<w$} ", w = w));
        for v in row {
            out.push_str(&format!("{v:>w$.1} ", w = w));
        }
        out.push('\n');
    }
    out
}

impl AgreementMatrix {
    pub fn csv(&self) -> String {
        let mut out = String::from("metric,model");
        for n in &self.names {
            out.push(',');
            out.push_str(n);
        }
        out.push('\n');
        for (label, m) in [("cc", &self.cc), ("sim", &self.sim)] {
            for (name, row) in self.names.iter().zip(m) {
                out.push_str(&format!("{label},{name}"));
                for v in row {
                    out.push_str(&format!(",{v}"));
                }
                out.push('\n');
            }
        }
        out
    }

    /// Two labeled grids, CC then SIM, percentages to one decimal.
    pub fn grid(&self) -> String {
        format!(
            "pairwise cc (%)\n{}\npairwise sim (%)\n{}",
            render_grid(&self.names, &self.cc),
            render_grid(&self.names, &self.sim)
        )
    }
}
