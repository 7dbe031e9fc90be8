//! Experiment configuration: an optional TOML file plus flag overrides.
//! Flags always win. Unknown keys anywhere in the file are rejected, and
//! nothing falls back to wall-clock state: runs without an explicit seed
//! fail instead of improvising one.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use vidsal::data::SyntheticSceneSpec;
use vidsal::distill::{FileBackedTeacher, FrozenTeacher, ReductionPlan, Schedule, Teacher};
use vidsal::model::{Mode, ModelConfig, Width};
use vidsal::{Error, Result};

fn one_line(s: &str) -> String {
    s.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .collect::<Vec<_>>()
        .join("; ")
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub aux: Option<PathBuf>,
    pub teacher: Option<String>,
    pub model: Option<ModelSection>,
    pub schedule: Option<ScheduleSection>,
    pub reduction: Option<ReductionSection>,
    pub dataset: Option<DatasetSection>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    /// Starting point the overrides below are applied to: desk (default),
    /// paper, or tiny.
    pub preset: Option<String>,
    pub mode: Option<String>,
    pub width: Option<String>,
    pub t_clip: Option<usize>,
    pub spatial: Option<[usize; 2]>,
    pub stem: Option<usize>,
    pub taps: Option<[usize; 4]>,
    pub blocks: Option<[usize; 4]>,
    pub expansion: Option<usize>,
    pub temporal_kernel: Option<usize>,
    pub d1_hidden: Option<usize>,
    pub d2: Option<[usize; 3]>,
    pub d3: Option<[usize; 3]>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSection {
    pub epochs: Option<usize>,
    pub milestones: Option<Vec<usize>>,
    pub base_lr: Option<f32>,
    pub gamma: Option<f32>,
    pub momentum: Option<f32>,
    pub batch_size: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReductionSection {
    /// Width labels, widest first, e.g. ["full", "half", "quarter"].
    pub stages: Option<Vec<String>>,
    pub teacher_assistant: Option<bool>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub clips: Option<usize>,
    pub t_frames: Option<usize>,
    pub spatial: Option<[usize; 2]>,
    pub blobs: Option<usize>,
    pub sigma: Option<[f32; 2]>,
    pub velocity: Option<[f32; 2]>,
    pub texture: Option<f32>,
    pub fixations: Option<usize>,
}

/// Flag values that shadow the config file.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub aux: Option<PathBuf>,
    pub teacher: Option<String>,
    pub mode: Option<String>,
    pub width: Option<String>,
    pub epochs: Option<usize>,
}

/// Where distillation targets come from: stored map files or a frozen
/// checkpointed model.
pub enum TeacherSpec {
    File(PathBuf),
    Frozen(PathBuf),
}

impl TeacherSpec {
    pub fn parse(s: &str) -> Result<TeacherSpec> {
        if let Some(dir) = s.strip_prefix("file:") {
            Ok(TeacherSpec::File(PathBuf::from(dir)))
        } else if let Some(ckpt) = s.strip_prefix("frozen:") {
            Ok(TeacherSpec::Frozen(PathBuf::from(ckpt)))
        } else {
            Err(Error::Config(format!(
                "teacher {s} must be file:<dataset-dir> or frozen:<checkpoint-dir>"
            )))
        }
    }

    pub fn build(&self, t_out: usize) -> Result<Box<dyn Teacher>> {
        match self {
            TeacherSpec::File(dir) => Ok(Box::new(FileBackedTeacher::new(dir.clone(), t_out))),
            TeacherSpec::Frozen(ckpt) => {
                let net = vidsal::data::load_model(ckpt)?;
                Ok(Box::new(FrozenTeacher::new(net)))
            }
        }
    }

    pub fn describe(&self) -> String {
        match self {
            TeacherSpec::File(dir) => format!("file:{}", dir.display()),
            TeacherSpec::Frozen(ckpt) => format!("frozen:{}", ckpt.display()),
        }
    }
}

/// A loaded config file merged with command-line overrides.
pub struct Experiment {
    file: FileConfig,
    over: Overrides,
}

impl Experiment {
    pub fn load(config: Option<&Path>, over: Overrides) -> Result<Experiment> {
        let file = match config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .map_err(|e| Error::Io { path: path.display().to_string(), source: e })?;
                toml::from_str(&text).map_err(|e| {
                    Error::Config(format!("{}: {}", path.display(), one_line(&e.to_string())))
                })?
            }
            None => FileConfig::default(),
        };
        Ok(Experiment { file, over })
    }

    pub fn seed(&self) -> Result<u64> {
        self.over.seed.or(self.file.seed).ok_or_else(|| {
            Error::Config("no seed given; pass --seed or set seed in the config".into())
        })
    }

    pub fn out(&self) -> Result<PathBuf> {
        self.over
            .out
            .clone()
            .or_else(|| self.file.out.clone())
            .ok_or_else(|| {
                Error::Config("no output directory; pass --out or set out in the config".into())
            })
    }

    pub fn data(&self) -> Result<PathBuf> {
        self.over
            .data
            .clone()
            .or_else(|| self.file.data.clone())
            .ok_or_else(|| {
                Error::Config(
                    "no dataset directory; pass it as an argument or set data in the config"
                        .into(),
                )
            })
    }

    pub fn aux(&self) -> Option<PathBuf> {
        self.over.aux.clone().or_else(|| self.file.aux.clone())
    }

    pub fn teacher(&self) -> Result<TeacherSpec> {
        let spec = self
            .over
            .teacher
            .clone()
            .or_else(|| self.file.teacher.clone())
            .ok_or_else(|| {
                Error::Config(
                    "no teacher; pass --teacher file:<dir> or frozen:<ckpt>, or set teacher in \
                     the config"
                        .into(),
                )
            })?;
        TeacherSpec::parse(&spec)
    }

    pub fn model(&self) -> Result<ModelConfig> {
        let sec = self.file.model.as_ref();
        let mut cfg = match sec.and_then(|m| m.preset.as_deref()).unwrap_or("desk") {
            "desk" => ModelConfig::desk(),
            "paper" => ModelConfig::paper(),
            "tiny" => ModelConfig::tiny(),
            other => {
                return Err(Error::Config(format!(
                    "unknown model preset {other}; expected desk, paper, or tiny"
                )))
            }
        };
        if let Some(m) = sec {
            if let Some(mode) = &m.mode {
                cfg.mode = parse_mode(mode)?;
            }
            if let Some(width) = &m.width {
                cfg.width = parse_width(width)?;
            }
            if let Some(t) = m.t_clip {
                cfg.t_clip = t;
            }
            if let Some([h, w]) = m.spatial {
                cfg.spatial = (h, w);
            }
            if let Some(s) = m.stem {
                cfg.stem_channels = s;
            }
            if let Some(t) = m.taps {
                cfg.tap_channels = t;
            }
            if let Some(b) = m.blocks {
                cfg.blocks = b;
            }
            if let Some(e) = m.expansion {
                cfg.expansion = e;
            }
            if let Some(k) = m.temporal_kernel {
                cfg.temporal_kernel = k;
            }
            if let Some(d) = m.d1_hidden {
                cfg.d1_hidden = d;
            }
            if let Some(d) = m.d2 {
                cfg.d2_channels = d;
            }
            if let Some(d) = m.d3 {
                cfg.d3_channels = d;
            }
        }
        if let Some(mode) = &self.over.mode {
            cfg.mode = parse_mode(mode)?;
        }
        if let Some(width) = &self.over.width {
            cfg.width = parse_width(width)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn schedule(&self) -> Result<Schedule> {
        let mut s = Schedule::desk();
        if let Some(sec) = &self.file.schedule {
            if let Some(e) = sec.epochs {
                s.epochs = e;
            }
            if let Some(m) = &sec.milestones {
                s.milestones = m.clone();
            }
            if let Some(lr) = sec.base_lr {
                s.base_lr = lr;
            }
            if let Some(g) = sec.gamma {
                s.gamma = g;
            }
            if let Some(m) = sec.momentum {
                s.momentum = m;
            }
            if let Some(b) = sec.batch_size {
                s.batch_size = b;
            }
        }
        if let Some(e) = self.over.epochs {
            s.epochs = e;
        }
        s.validate()?;
        Ok(s)
    }

    pub fn reduction(&self) -> Result<ReductionPlan> {
        let mut plan = ReductionPlan::full(true);
        if let Some(sec) = &self.file.reduction {
            if let Some(stages) = &sec.stages {
                plan.stages = stages
                    .iter()
                    .map(|s| parse_width(s))
                    .collect::<Result<Vec<_>>>()?;
            }
            if let Some(ta) = sec.teacher_assistant {
                plan.use_teacher_assistant = ta;
            }
        }
        Ok(plan)
    }

    /// Synthetic scene parameters plus how many clips to render.
    pub fn dataset(&self, seed: u64) -> Result<(SyntheticSceneSpec, usize)> {
        let mut spec = SyntheticSceneSpec::desk(seed);
        let mut clips = 8usize;
        if let Some(sec) = &self.file.dataset {
            if let Some(c) = sec.clips {
                clips = c;
            }
            if let Some(t) = sec.t_frames {
                spec.t_frames = t;
            }
            if let Some([h, w]) = sec.spatial {
                spec.spatial = (h, w);
            }
            if let Some(b) = sec.blobs {
                spec.n_blobs = b;
            }
            if let Some([lo, hi]) = sec.sigma {
                spec.sigma_range = (lo, hi);
            }
            if let Some([lo, hi]) = sec.velocity {
                spec.velocity_range = (lo, hi);
            }
            if let Some(a) = sec.texture {
                spec.texture_amplitude = a;
            }
            if let Some(f) = sec.fixations {
                spec.fixations_per_frame = f;
            }
        }
        if clips == 0 || clips > 9999 {
            return Err(Error::Config(format!("clip count {clips} outside 1..=9999")));
        }
        spec.validate()?;
        Ok((spec, clips))
    }
}

fn parse_mode(s: &str) -> Result<Mode> {
    Mode::parse(s).ok_or_else(|| Error::Config(format!("mode {s} must be miso or mimo")))
}

fn parse_width(s: &str) -> Result<Width> {
    Width::parse(s).ok_or_else(|| {
        Error::Config(format!("width {s} must be 1, 0.5, 0.25, full, half, or quarter"))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn exp(toml: &str, over: Overrides) -> Result<Experiment> {
        let file = toml::from_str(toml).map_err(|e| Error::Config(e.to_string()))?;
        Ok(Experiment { file, over })
    }

    #[test]
    fn flags_shadow_file_values() {
        let e = exp(
            "seed = 3\nout = \"a\"\n[model]\nmode = \"miso\"\n",
            Overrides { seed: Some(9), mode: Some("mimo".into()), ..Overrides::default() },
        )
        .unwrap();
        assert_eq!(e.seed().unwrap(), 9);
        assert_eq!(e.out().unwrap(), PathBuf::from("a"));
        assert_eq!(e.model().unwrap().mode, Mode::Mimo);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(exp("sede = 3\n", Overrides::default()).is_err());
        assert!(exp("[model]\nwidht = \"full\"\n", Overrides::default()).is_err());
        assert!(exp("[schedule]\nlr = 0.1\n", Overrides::default()).is_err());
    }

    #[test]
    fn missing_seed_is_an_error_not_a_default() {
        let e = exp("out = \"x\"\n", Overrides::default()).unwrap();
        assert!(matches!(e.seed(), Err(Error::Config(_))));
    }

    #[test]
    fn model_section_overrides_preset() {
        let e = exp(
            "[model]\npreset = \"tiny\"\nstem = 6\nspatial = [16, 17]\n",
            Overrides::default(),
        )
        .unwrap();
        let cfg = e.model().unwrap();
        assert_eq!(cfg.stem_channels, 6);
        assert_eq!(cfg.spatial, (16, 17));
        assert_eq!(cfg.t_clip, ModelConfig::tiny().t_clip);
    }

    #[test]
    fn teacher_spec_forms() {
        assert!(matches!(TeacherSpec::parse("file:x/y"), Ok(TeacherSpec::File(_))));
        assert!(matches!(TeacherSpec::parse("frozen:z"), Ok(TeacherSpec::Frozen(_))));
        assert!(TeacherSpec::parse("x/y").is_err());
    }

    #[test]
    fn reduction_stages_parse_as_widths() {
        let e = exp(
            "[reduction]\nstages = [\"full\", \"0.5\"]\nteacher_assistant = false\n",
            Overrides::default(),
        )
        .unwrap();
        let plan = e.reduction().unwrap();
        assert_eq!(plan.stages, vec![Width::Full, Width::Half]);
        assert!(!plan.use_teacher_assistant);
    }

    #[test]
    fn bad_schedule_is_a_config_error() {
        let e = exp("[schedule]\nbase_lr = 0.0\n", Overrides::default()).unwrap();
        assert!(matches!(e.schedule(), Err(Error::Config(_))));
    }
}
