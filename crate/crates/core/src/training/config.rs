use std::fmt::Write as _;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use super::distill::KlDirection;
use super::grpo::{DEFAULT_CLIP_EPS, DEFAULT_KL_COEF};
use super::optim::AdamWConfig;
use crate::error::{Error, Result};
use crate::model::parse_key_values;

/// Settings of a training run, stored as `key=value` lines. Missing keys keep
/// their defaults; unknown keys are rejected.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub optim: AdamWConfig,
    pub seed: u64,
    /// Generation length for rollouts and distillation samples.
    pub max_new_tokens: usize,
    pub group_size: usize,
    pub clip_eps: f64,
    pub kl_coef: f64,
    pub kl_direction: KlDirection,
    /// Off-policy SFT steps run before on-policy distillation.
    pub offpolicy_steps: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            batch_size: 4,
            optim: AdamWConfig::default(),
            seed: 0,
            max_new_tokens: 24,
            group_size: 8,
            clip_eps: DEFAULT_CLIP_EPS,
            kl_coef: DEFAULT_KL_COEF,
            kl_direction: KlDirection::TeacherToStudent,
            offpolicy_steps: 100,
        }
    }
}

impl RunConfig {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let o = &self.optim;
        let dir = match self.kl_direction {
            KlDirection::TeacherToStudent => "teacher_student",
            KlDirection::StudentToTeacher => "student_teacher",
        };
        let _ = write!(
            s,
            "steps={}\nbatch_size={}\nlr={}\nbeta1={}\nbeta2={}\neps={}\nweight_decay={}\nseed={}\n\
             max_new_tokens={}\ngroup_size={}\nclip_eps={}\nkl_coef={}\nkl_direction={dir}\noffpolicy_steps={}\n",
            self.steps,
            self.batch_size,
            o.lr,
            o.beta1,
            o.beta2,
            o.eps,
            o.weight_decay,
            self.seed,
            self.max_new_tokens,
            self.group_size,
            self.clip_eps,
            self.kl_coef,
            self.offpolicy_steps
        );
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        for (k, v) in parse_key_values(text)? {
            let bad = || Error::Format(format!("run config {k}={v} is invalid"));
            let u = || v.parse::<usize>().map_err(|_| bad());
            let f = || v.parse::<f64>().map_err(|_| bad());
            match k.as_str() {
                "steps" => c.steps = u()?,
                "batch_size" => c.batch_size = u()?,
                "lr" => c.optim.lr = f()?,
                "beta1" => c.optim.beta1 = f()?,
                "beta2" => c.optim.beta2 = f()?,
                "eps" => c.optim.eps = f()?,
                "weight_decay" => c.optim.weight_decay = f()?,
                "seed" => c.seed = v.parse().map_err(|_| bad())?,
                "max_new_tokens" => c.max_new_tokens = u()?,
                "group_size" => c.group_size = u()?,
                "clip_eps" => c.clip_eps = f()?,
                "kl_coef" => c.kl_coef = f()?,
                "kl_direction" => {
                    c.kl_direction = match v.as_str() {
                        "teacher_student" => KlDirection::TeacherToStudent,
                        "student_teacher" => KlDirection::StudentToTeacher,
                        _ => return Err(bad()),
                    }
                }
                "offpolicy_steps" => c.offpolicy_steps = u()?,
                _ => return Err(Error::Format(format!("unknown run config key {k}"))),
            }
        }
        c.optim.validate()?;
        if c.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

/// One metrics row; absent values are written as empty fields.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub loss: Option<f64>,
    pub kl: Option<f64>,
    pub entropy: Option<f64>,
    pub balance_loss: Option<f64>,
}

pub const METRICS_HEADER: &str = "step,loss,kl,entropy,balance_loss";

/// Append-only CSV sink. The header is written only when the file is new or
/// empty.
pub struct MetricsWriter {
    out: BufWriter<File>,
}

impl MetricsWriter {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        let fresh = file.metadata()?.len() == 0;
        let mut out = BufWriter::new(file);
        if fresh {
            writeln!(out, "{METRICS_HEADER}")?;
        }
        Ok(Self { out })
    }

    pub fn write(&mut self, row: &MetricsRow) -> Result<()> {
        let cell = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        writeln!(
            self.out,
            "{},{},{},{},{}",
            row.step,
            cell(row.loss),
            cell(row.kl),
            cell(row.entropy),
            cell(row.balance_loss)
        )?;
        self.out.flush()?;
        Ok(())
    }
}
