//! Run specifications in the line-oriented `section.key = value` format.
//!
//! ```text
//! # noisy-label comparison
//! run.kind = compare
//! run.seeds = 1,2,3
//! data.generator = gaussian
//! data.noise_rate = 0.2
//! arch.backbone = mlp 256,256
//! cf.weight = 0.1
//! compare.methods = baseline,cf
//! ```
//!
//! Blank lines and lines starting with `#` are ignored. Every key is optional;
//! unknown keys are errors.

use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::cf::CFConfig;
use crate::error::{Error, Result};
use crate::optim::OptimHyper;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExperimentKind {
    Train,
    Memtest,
    Sweep,
    Compare,
    Gradcheck,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Generator {
    Gaussian,
    Patterns,
    Csv,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataSpec {
    pub generator: Generator,
    pub classes: usize,
    /// Input width of gaussian samples.
    pub dim: usize,
    /// Side length of pattern images.
    pub hw: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub sep: f64,
    /// Applied to the training split only.
    pub noise_rate: f64,
    pub randomize_labels: bool,
    pub seed: u64,
    pub path: Option<PathBuf>,
    pub val_path: Option<PathBuf>,
}

impl Default for DataSpec {
    fn default() -> Self {
        DataSpec {
            generator: Generator::Gaussian,
            classes: 4,
            dim: 32,
            hw: 8,
            n_train: 500,
            n_val: 1000,
            sep: 6.0,
            noise_rate: 0.0,
            randomize_labels: false,
            seed: 100,
            path: None,
            val_path: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Backbone {
    /// Hidden widths; the last is the feature width.
    Mlp(Vec<usize>),
    /// Conv channels, then the dense feature width.
    Cnn { channels: Vec<usize>, features: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArchSpec {
    pub backbone: Backbone,
    /// Hidden widths of the task head; empty means a single dense layer.
    pub task_head: Vec<usize>,
}

impl Default for ArchSpec {
    fn default() -> Self {
        ArchSpec {
            backbone: Backbone::Mlp(vec![128, 64]),
            task_head: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainSpec {
    pub epochs: usize,
    pub batch_size: usize,
    pub optim: OptimHyper,
    pub label_smoothing: f64,
    pub dropout: f64,
    pub eval_every: usize,
}

impl Default for TrainSpec {
    fn default() -> Self {
        TrainSpec {
            epochs: 30,
            batch_size: 32,
            optim: OptimHyper::default(),
            label_smoothing: 0.0,
            dropout: 0.0,
            eval_every: 1,
        }
    }
}

/// A schedule boundary given either in optimizer steps or in epochs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepCount {
    Steps(u64),
    Epochs(u64),
}

impl StepCount {
    pub fn resolve(self, steps_per_epoch: u64) -> u64 {
        match self {
            StepCount::Steps(s) => s,
            StepCount::Epochs(e) => e.saturating_mul(steps_per_epoch),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CfSpec {
    pub enabled: bool,
    /// Carries every field except the schedule, which lives in `warm_up`
    /// and `shut_off` until the batches per epoch are known.
    pub config: CFConfig,
    pub warm_up: StepCount,
    pub shut_off: Option<StepCount>,
}

impl Default for CfSpec {
    fn default() -> Self {
        let config = CFConfig::default();
        CfSpec {
            enabled: false,
            config,
            warm_up: StepCount::Steps(config.warm_up),
            shut_off: None,
        }
    }
}

impl CfSpec {
    pub fn resolve(&self, steps_per_epoch: u64) -> CFConfig {
        CFConfig {
            warm_up: self.warm_up.resolve(steps_per_epoch),
            shut_off: self.shut_off.map(|s| s.resolve(steps_per_epoch)),
            ..self.config
        }
    }
}

/// One-at-a-time grid around the base CF config.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SweepGrid {
    pub p: Vec<f64>,
    pub weight: Vec<f64>,
    pub history_len: Vec<usize>,
    pub desc_channel: Vec<usize>,
    pub warm_up: Vec<u64>,
    pub baseline: bool,
}

impl SweepGrid {
    pub fn is_empty(&self) -> bool {
        self.p.is_empty()
            && self.weight.is_empty()
            && self.history_len.is_empty()
            && self.desc_channel.is_empty()
            && self.warm_up.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Baseline,
    Cf,
    WeightDecay,
    LabelSmoothing,
    Dropout,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompareSpec {
    pub methods: Vec<Method>,
    pub weight_decay: f64,
    pub label_smoothing: f64,
    pub dropout: f64,
}

impl Default for CompareSpec {
    fn default() -> Self {
        CompareSpec {
            methods: vec![Method::Baseline, Method::Cf],
            weight_decay: 1e-4,
            label_smoothing: 0.1,
            dropout: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSpec {
    pub kind: ExperimentKind,
    pub seeds: Vec<u64>,
    pub out: Option<PathBuf>,
    pub data: DataSpec,
    pub arch: ArchSpec,
    pub train: TrainSpec,
    pub cf: CfSpec,
    pub sweep: SweepGrid,
    pub compare: CompareSpec,
}

impl Default for RunSpec {
    fn default() -> Self {
        RunSpec {
            kind: ExperimentKind::Train,
            seeds: vec![1],
            out: None,
            data: DataSpec::default(),
            arch: ArchSpec::default(),
            train: TrainSpec::default(),
            cf: CfSpec::default(),
            sweep: SweepGrid::default(),
            compare: CompareSpec::default(),
        }
    }
}

macro_rules! named_enum {
    ($ty:ident, $what:literal, { $($v:ident => $s:literal),* $(,)? }) => {
        impl $ty {
            pub fn name(self) -> &'static str {
                match self { $($ty::$v => $s),* }
            }
        }
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($s => Ok($ty::$v),)*
                    _ => Err(Error::Config(format!(concat!("unknown ", $what, " {:?}"), s))),
                }
            }
        }
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }
    };
}

named_enum!(ExperimentKind, "experiment kind", {
    Train => "train", Memtest => "memtest", Sweep => "sweep", Compare => "compare", Gradcheck => "gradcheck",
});
named_enum!(Generator, "generator", { Gaussian => "gaussian", Patterns => "patterns", Csv => "csv" });
named_enum!(Method, "method", {
    Baseline => "baseline", Cf => "cf", WeightDecay => "weight_decay",
    LabelSmoothing => "label_smoothing", Dropout => "dropout",
});

fn parse_scalar<T: FromStr>(v: &str) -> std::result::Result<T, String>
where
    T::Err: fmt::Display,
{
    v.parse::<T>().map_err(|e| format!("{v:?}: {e}"))
}

fn parse_list<T: FromStr>(v: &str) -> std::result::Result<Vec<T>, String>
where
    T::Err: fmt::Display,
{
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|s| parse_scalar(s.trim())).collect()
}

fn parse_bool(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("{v:?}: expected true or false")),
    }
}

fn join<T: fmt::Display>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn parse_backbone(v: &str) -> std::result::Result<Backbone, String> {
    let tokens: Vec<&str> = v.split_whitespace().collect();
    match tokens.as_slice() {
        ["mlp", widths] => {
            let w: Vec<usize> = parse_list(widths)?;
            if w.is_empty() {
                return Err("mlp needs at least one hidden width".into());
            }
            Ok(Backbone::Mlp(w))
        }
        ["cnn", channels, features] => {
            let c: Vec<usize> = parse_list(channels)?;
            if c.is_empty() {
                return Err("cnn needs at least one conv layer".into());
            }
            Ok(Backbone::Cnn {
                channels: c,
                features: parse_scalar(features)?,
            })
        }
        _ => Err(format!(
            "{v:?}: expected `mlp <w1,w2,..>` or `cnn <c1,c2,..> <features>`"
        )),
    }
}

impl fmt::Display for Backbone {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Backbone::Mlp(w) => write!(f, "mlp {}", join(w)),
            Backbone::Cnn { channels, features } => write!(f, "cnn {} {features}", join(channels)),
        }
    }
}

fn parse_path(v: &str) -> Option<PathBuf> {
    (!v.is_empty() && v != "none").then(|| PathBuf::from(v))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref()
        .map_or_else(|| "none".to_string(), |p| p.display().to_string())
}

impl RunSpec {
    pub fn parse(text: &str) -> Result<Self> {
        let mut spec = RunSpec::default();
        let mut seen: Vec<(String, usize)> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split_once('#').map_or(raw, |(before, _)| before).trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {line_no}: expected `section.key = value`, got {line:?}"
                )));
            };
            let (key, value) = (key.trim(), value.trim());
            if let Some((_, first)) = seen.iter().find(|(k, _)| k == key) {
                return Err(Error::Config(format!(
                    "line {line_no}: key `{key}` already set on line {first}"
                )));
            }
            seen.push((key.to_string(), line_no));
            spec.set(key, value).map_err(|why| {
                Error::Config(format!("line {line_no}: key `{key}`: {why}"))
            })?;
        }
        let has = |k: &str| seen.iter().any(|(s, _)| s == k);
        for (a, b) in [("cf.warm_up", "cf.warm_up_epochs"), ("cf.shut_off", "cf.shut_off_epochs")] {
            if has(a) && has(b) {
                return Err(Error::Config(format!("`{a}` and `{b}` are mutually exclusive")));
            }
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunSpec::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        let d = &mut self.data;
        let t = &mut self.train;
        let c = &mut self.cf;
        match key {
            "run.kind" => self.kind = v.parse().map_err(|e: Error| e.to_string())?,
            "run.seeds" => self.seeds = parse_list(v)?,
            "run.out" => self.out = parse_path(v),

            "data.generator" => d.generator = v.parse().map_err(|e: Error| e.to_string())?,
            "data.classes" => d.classes = parse_scalar(v)?,
            "data.dim" => d.dim = parse_scalar(v)?,
            "data.hw" => d.hw = parse_scalar(v)?,
            "data.n_train" => d.n_train = parse_scalar(v)?,
            "data.n_val" => d.n_val = parse_scalar(v)?,
            "data.sep" => d.sep = parse_scalar(v)?,
            "data.noise_rate" => d.noise_rate = parse_scalar(v)?,
            "data.randomize_labels" => d.randomize_labels = parse_bool(v)?,
            "data.seed" => d.seed = parse_scalar(v)?,
            "data.path" => d.path = parse_path(v),
            "data.val_path" => d.val_path = parse_path(v),

            "arch.backbone" => self.arch.backbone = parse_backbone(v)?,
            "arch.task_head" => {
                self.arch.task_head = if v == "linear" { Vec::new() } else { parse_list(v)? }
            }

            "train.epochs" => t.epochs = parse_scalar(v)?,
            "train.batch_size" => t.batch_size = parse_scalar(v)?,
            "train.lr" => t.optim.lr = parse_scalar(v)?,
            "train.beta1" => t.optim.beta1 = parse_scalar(v)?,
            "train.beta2" => t.optim.beta2 = parse_scalar(v)?,
            "train.eps" => t.optim.eps = parse_scalar(v)?,
            "train.weight_decay" => t.optim.weight_decay = parse_scalar(v)?,
            "train.label_smoothing" => t.label_smoothing = parse_scalar(v)?,
            "train.dropout" => t.dropout = parse_scalar(v)?,
            "train.eval_every" => t.eval_every = parse_scalar(v)?,

            "cf.enabled" => c.enabled = parse_bool(v)?,
            "cf.p" => c.config.p = parse_scalar(v)?,
            "cf.weight" => c.config.weight = parse_scalar(v)?,
            "cf.history_len" => c.config.history_len = parse_scalar(v)?,
            "cf.desc_channel" => c.config.desc_channel = parse_scalar(v)?,
            "cf.warm_up" => c.warm_up = StepCount::Steps(parse_scalar(v)?),
            "cf.warm_up_epochs" => c.warm_up = StepCount::Epochs(parse_scalar(v)?),
            "cf.shut_off" => {
                c.shut_off = if v == "none" { None } else { Some(StepCount::Steps(parse_scalar(v)?)) }
            }
            "cf.shut_off_epochs" => c.shut_off = Some(StepCount::Epochs(parse_scalar(v)?)),
            "cf.literal_eq6_sign" => c.config.literal_eq6_sign = parse_bool(v)?,

            "sweep.p" => self.sweep.p = parse_list(v)?,
            "sweep.weight" => self.sweep.weight = parse_list(v)?,
            "sweep.history_len" => self.sweep.history_len = parse_list(v)?,
            "sweep.desc_channel" => self.sweep.desc_channel = parse_list(v)?,
            "sweep.warm_up" => self.sweep.warm_up = parse_list(v)?,
            "sweep.baseline" => self.sweep.baseline = parse_bool(v)?,

            "compare.methods" => {
                self.compare.methods = v
                    .split(',')
                    .map(|s| s.trim().parse::<Method>().map_err(|e| e.to_string()))
                    .collect::<std::result::Result<_, _>>()?
            }
            "compare.weight_decay" => self.compare.weight_decay = parse_scalar(v)?,
            "compare.label_smoothing" => self.compare.label_smoothing = parse_scalar(v)?,
            "compare.dropout" => self.compare.dropout = parse_scalar(v)?,

            _ => return Err("unknown key".into()),
        }
        Ok(())
    }

    /// Structural checks that do not depend on the data.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.seeds.is_empty() {
            return bad("run.seeds must list at least one seed".into());
        }
        let d = &self.data;
        if d.classes < 2 {
            return bad(format!("data.classes must be >= 2, got {}", d.classes));
        }
        if d.generator != Generator::Csv && (d.n_train == 0 || d.n_val == 0) {
            return bad("data.n_train and data.n_val must be >= 1".into());
        }
        if d.generator == Generator::Csv && (d.path.is_none() || d.val_path.is_none()) {
            return bad("csv data needs data.path and data.val_path".into());
        }
        if !(0.0..=1.0).contains(&d.noise_rate) {
            return bad(format!("data.noise_rate {} outside [0,1]", d.noise_rate));
        }
        if self.compare.methods.is_empty() {
            return bad("compare.methods must not be empty".into());
        }
        if self.kind == ExperimentKind::Sweep && self.sweep.is_empty() {
            return bad("sweep needs at least one non-empty sweep.* grid".into());
        }
        self.train_config(0, 1).validate()?;
        Ok(())
    }

    /// Training config for one replicate of the configured method. CF is
    /// included only when `cf.enabled`.
    pub fn train_config(&self, seed: u64, n_train: usize) -> crate::trainer::TrainConfig {
        use crate::trainer::{Regularizers, TrainConfig};
        let t = &self.train;
        let steps = (n_train as u64).div_ceil(t.batch_size.max(1) as u64);
        TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            seed,
            optim: t.optim,
            regularizers: Regularizers {
                cf: self.cf.enabled.then(|| self.cf.resolve(steps)),
                weight_decay: 0.0,
                label_smoothing: t.label_smoothing,
                dropout: t.dropout,
            },
            eval_every: t.eval_every,
        }
    }

    /// Canonical text form; parses back to an identical spec.
    pub fn serialize(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("run.kind", self.kind.to_string());
        kv("run.seeds", join(&self.seeds));
        kv("run.out", show_path(&self.out));

        let d = &self.data;
        kv("data.generator", d.generator.to_string());
        kv("data.classes", d.classes.to_string());
        kv("data.dim", d.dim.to_string());
        kv("data.hw", d.hw.to_string());
        kv("data.n_train", d.n_train.to_string());
        kv("data.n_val", d.n_val.to_string());
        kv("data.sep", d.sep.to_string());
        kv("data.noise_rate", d.noise_rate.to_string());
        kv("data.randomize_labels", d.randomize_labels.to_string());
        kv("data.seed", d.seed.to_string());
        kv("data.path", show_path(&d.path));
        kv("data.val_path", show_path(&d.val_path));

        kv("arch.backbone", self.arch.backbone.to_string());
        kv(
            "arch.task_head",
            if self.arch.task_head.is_empty() {
                "linear".into()
            } else {
                join(&self.arch.task_head)
            },
        );

        let t = &self.train;
        kv("train.epochs", t.epochs.to_string());
        kv("train.batch_size", t.batch_size.to_string());
        kv("train.lr", t.optim.lr.to_string());
        kv("train.beta1", t.optim.beta1.to_string());
        kv("train.beta2", t.optim.beta2.to_string());
        kv("train.eps", t.optim.eps.to_string());
        kv("train.weight_decay", t.optim.weight_decay.to_string());
        kv("train.label_smoothing", t.label_smoothing.to_string());
        kv("train.dropout", t.dropout.to_string());
        kv("train.eval_every", t.eval_every.to_string());

        let c = &self.cf;
        kv("cf.enabled", c.enabled.to_string());
        kv("cf.p", c.config.p.to_string());
        kv("cf.weight", c.config.weight.to_string());
        kv("cf.history_len", c.config.history_len.to_string());
        kv("cf.desc_channel", c.config.desc_channel.to_string());
        match c.warm_up {
            StepCount::Steps(n) => kv("cf.warm_up", n.to_string()),
            StepCount::Epochs(n) => kv("cf.warm_up_epochs", n.to_string()),
        }
        match c.shut_off {
            None => kv("cf.shut_off", "none".into()),
            Some(StepCount::Steps(n)) => kv("cf.shut_off", n.to_string()),
            Some(StepCount::Epochs(n)) => kv("cf.shut_off_epochs", n.to_string()),
        }
        kv("cf.literal_eq6_sign", c.config.literal_eq6_sign.to_string());

        let g = &self.sweep;
        kv("sweep.p", join(&g.p));
        kv("sweep.weight", join(&g.weight));
        kv("sweep.history_len", join(&g.history_len));
        kv("sweep.desc_channel", join(&g.desc_channel));
        kv("sweep.warm_up", join(&g.warm_up));
        kv("sweep.baseline", g.baseline.to_string());

        let m = &self.compare;
        kv("compare.methods", join(&m.methods));
        kv("compare.weight_decay", m.weight_decay.to_string());
        kv("compare.label_smoothing", m.label_smoothing.to_string());
        kv("compare.dropout", m.dropout.to_string());
        s
    }
}
