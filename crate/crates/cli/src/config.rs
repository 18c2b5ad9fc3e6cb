//! Run configuration as flat `key = value` text with dotted section prefixes.

use std::fmt::Write as _;
use std::path::PathBuf;

use csanet::data::{AugmentConfig, Difficulty};
use csanet::model::{HeadKind, ModelConfig};
use csanet::tensor::AdamConfig;

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq)]
pub struct OptimConfig {
    pub lr: f64,
    /// Epochs at which the learning rate is multiplied by `decay`.
    pub milestones: Vec<usize>,
    pub decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub adam: AdamConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub train_size: usize,
    pub val_size: usize,
    pub seed: u64,
    pub difficulty: Difficulty,
    /// Online augmentation of training crops; `None` trains on the plain crops.
    pub augment: Option<AugmentConfig>,
    /// Load the training set from a `gen-data` directory instead of generating it.
    pub train_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub flip_test: bool,
    /// Validate every this many epochs; 0 validates after the last epoch only.
    pub interval: usize,
    pub batch_size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IoConfig {
    pub out: PathBuf,
    /// Keep a numbered checkpoint every this many epochs; 0 keeps only the final one.
    pub checkpoint_interval: usize,
    /// Log every this many steps.
    pub log_interval: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Seeds parameter initialization, shuffling and online augmentation.
    pub seed: u64,
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
    pub io: IoConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            model: ModelConfig::desk(),
            optim: OptimConfig {
                lr: 1e-3,
                milestones: vec![20, 26],
                decay: 0.1,
                batch_size: 8,
                epochs: 30,
                adam: AdamConfig::default(),
            },
            data: DataConfig {
                train_size: 200,
                val_size: 50,
                seed: 0,
                difficulty: Difficulty::Easy,
                augment: Some(AugmentConfig::default()),
                train_dir: None,
            },
            eval: EvalConfig {
                flip_test: false,
                interval: 5,
                batch_size: 16,
            },
            io: IoConfig {
                out: PathBuf::from("runs/default"),
                checkpoint_interval: 5,
                log_interval: 1,
            },
        }
    }
}

/// Shipped configurations, selectable by name wherever a config path is accepted.
pub const PRESETS: [(&str, &str); 14] = [
    ("desk", include_str!("../../../configs/desk.cfg")),
    ("overfit", include_str!("../../../configs/overfit.cfg")),
    (
        "baseline-sbn",
        include_str!("../../../configs/baseline-sbn.cfg"),
    ),
    ("cap-only", include_str!("../../../configs/cap-only.cfg")),
    ("cap+sap", include_str!("../../../configs/cap+sap.cfg")),
    (
        "cap+sap+hhp",
        include_str!("../../../configs/cap+sap+hhp.cfg"),
    ),
    ("hhp-n0", include_str!("../../../configs/hhp-n0.cfg")),
    ("hhp-n1", include_str!("../../../configs/hhp-n1.cfg")),
    ("hhp-n2", include_str!("../../../configs/hhp-n2.cfg")),
    ("hhp-n3", include_str!("../../../configs/hhp-n3.cfg")),
    ("hhp-n4", include_str!("../../../configs/hhp-n4.cfg")),
    ("hhp-n5", include_str!("../../../configs/hhp-n5.cfg")),
    ("hhp-n6", include_str!("../../../configs/hhp-n6.cfg")),
    (
        "conv2gp-off",
        include_str!("../../../configs/conv2gp-off.cfg"),
    ),
];

pub fn preset(name: &str) -> Option<&'static str> {
    PRESETS.iter().find(|(n, _)| *n == name).map(|(_, t)| *t)
}

fn parse_bool(v: &str) -> Result<bool, String> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("expected true or false, got `{v}`")),
    }
}

fn parse_num<T: std::str::FromStr>(v: &str) -> Result<T, String> {
    v.parse().map_err(|_| format!("cannot parse `{v}`"))
}

fn parse_list<T: std::str::FromStr>(v: &str) -> Result<Vec<T>, String> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|s| parse_num(s.trim())).collect()
}

fn parse_array<const N: usize>(v: &str) -> Result<[usize; N], String> {
    let list = parse_list::<usize>(v)?;
    list.try_into()
        .map_err(|l: Vec<usize>| format!("expected {N} values, got {}", l.len()))
}

fn join<T: std::fmt::Display>(v: &[T]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn difficulty_name(d: Difficulty) -> &'static str {
    match d {
        Difficulty::Easy => "easy",
        Difficulty::Occluded => "occluded",
    }
}

pub fn parse_difficulty(v: &str) -> Result<Difficulty, String> {
    match v {
        "easy" => Ok(Difficulty::Easy),
        "occluded" => Ok(Difficulty::Occluded),
        _ => Err(format!("expected easy or occluded, got `{v}`")),
    }
}

impl RunConfig {
    /// Defaults overridden by every `key = value` line of `text`. Blank lines and lines
    /// starting with `#` are ignored. All problems are reported together.
    pub fn parse(text: &str) -> CliResult<RunConfig> {
        let mut cfg = RunConfig::default();
        let mut errs = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                errs.push(format!("line {}: expected `key = value`", lineno + 1));
                continue;
            };
            if let Err(e) = cfg.set(key.trim(), value.trim()) {
                errs.push(format!("line {}: {}: {e}", lineno + 1, key.trim()));
            }
        }
        if !errs.is_empty() {
            return Err(CliError::Config(errs));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses a preset name or reads a config file.
    pub fn load(path_or_preset: &str) -> CliResult<RunConfig> {
        match preset(path_or_preset) {
            Some(text) => RunConfig::parse(text),
            None => {
                let text = std::fs::read_to_string(path_or_preset).map_err(|e| {
                    CliError::Usage(format!("cannot read config `{path_or_preset}`: {e}"))
                })?;
                RunConfig::parse(&text)
            }
        }
    }

    /// Sets one key; fields are left unchanged on error.
    pub fn set(&mut self, key: &str, v: &str) -> Result<(), String> {
        let m = &mut self.model;
        match key {
            "seed" => self.seed = parse_num(v)?,
            "model.head" => {
                m.head = match v {
                    "sbn" => HeadKind::Sbn,
                    "csanet" => HeadKind::Csanet,
                    _ => return Err(format!("expected sbn or csanet, got `{v}`")),
                }
            }
            "model.stage_channels" => m.stage_channels = parse_array(v)?,
            "model.blocks_per_stage" => m.blocks_per_stage = parse_array(v)?,
            "model.feature_width" => m.feature_width = parse_num(v)?,
            "model.aspp_rates" => m.aspp_rates = parse_list(v)?,
            "model.use_aspp" => m.use_aspp = parse_bool(v)?,
            "model.use_sap" => m.use_sap = parse_bool(v)?,
            "model.sap_conv3" => m.sap_conv3 = parse_bool(v)?,
            "model.sap_conv2gp" => m.sap_conv2gp = parse_bool(v)?,
            "model.hhp_depth" => m.hhp_depth = parse_num(v)?,
            "model.input_size" => {
                let (h, w) = v
                    .split_once('x')
                    .ok_or_else(|| format!("expected HxW, got `{v}`"))?;
                m.input_size = (parse_num(h)?, parse_num(w)?);
            }
            "model.sigma" => m.sigma = parse_num(v)?,
            "model.bn_momentum" => m.bn_momentum = parse_num(v)?,
            "model.bn_eps" => m.bn_eps = parse_num(v)?,
            "loss.alpha" => m.loss_weights.0 = parse_num(v)?,
            "loss.beta" => m.loss_weights.1 = parse_num(v)?,
            "loss.gamma" => m.loss_weights.2 = parse_num(v)?,
            "optim.lr" => self.optim.lr = parse_num(v)?,
            "optim.milestones" => self.optim.milestones = parse_list(v)?,
            "optim.decay" => self.optim.decay = parse_num(v)?,
            "optim.batch_size" => self.optim.batch_size = parse_num(v)?,
            "optim.epochs" => self.optim.epochs = parse_num(v)?,
            "optim.adam_beta1" => self.optim.adam.beta1 = parse_num(v)?,
            "optim.adam_beta2" => self.optim.adam.beta2 = parse_num(v)?,
            "optim.adam_eps" => self.optim.adam.eps = parse_num(v)?,
            "data.train_size" => self.data.train_size = parse_num(v)?,
            "data.val_size" => self.data.val_size = parse_num(v)?,
            "data.seed" => self.data.seed = parse_num(v)?,
            "data.difficulty" => self.data.difficulty = parse_difficulty(v)?,
            "data.augment" => {
                self.data.augment = if parse_bool(v)? {
                    Some(self.data.augment.clone().unwrap_or_default())
                } else {
                    None
                }
            }
            "data.flip_p" | "data.rotation_deg" | "data.scale_min" | "data.scale_max" => {
                let x: f64 = parse_num(v)?;
                let Some(a) = self.data.augment.as_mut() else {
                    return Err("set after `data.augment = false`".into());
                };
                match key {
                    "data.flip_p" => a.flip_p = x,
                    "data.rotation_deg" => a.rotation_deg = x,
                    "data.scale_min" => a.scale_range.0 = x,
                    _ => a.scale_range.1 = x,
                }
            }
            "data.train_dir" => {
                self.data.train_dir = (!v.is_empty()).then(|| PathBuf::from(v));
            }
            "eval.flip_test" => self.eval.flip_test = parse_bool(v)?,
            "eval.interval" => self.eval.interval = parse_num(v)?,
            "eval.batch_size" => self.eval.batch_size = parse_num(v)?,
            "io.out" => self.io.out = PathBuf::from(v),
            "io.checkpoint_interval" => self.io.checkpoint_interval = parse_num(v)?,
            "io.log_interval" => self.io.log_interval = parse_num(v)?,
            _ => return Err("unknown key".into()),
        }
        Ok(())
    }

    /// Every violated constraint across all sections.
    pub fn validate(&self) -> CliResult<()> {
        let mut errs = match self.model.validate() {
            Ok(()) => Vec::new(),
            Err(csanet::Error::Config(e)) => e,
            Err(e) => vec![e.to_string()],
        };
        let o = &self.optim;
        if !(o.lr > 0.0 && o.lr.is_finite()) {
            errs.push(format!("optim.lr must be positive, got {}", o.lr));
        }
        if !(o.decay > 0.0 && o.decay <= 1.0) {
            errs.push(format!("optim.decay must be in (0, 1], got {}", o.decay));
        }
        if o.batch_size == 0 {
            errs.push("optim.batch_size must be >= 1".into());
        }
        if o.epochs == 0 {
            errs.push("optim.epochs must be >= 1".into());
        }
        if o.milestones.windows(2).any(|w| w[0] >= w[1]) {
            errs.push(format!(
                "optim.milestones must be strictly increasing, got {}",
                join(&o.milestones)
            ));
        }
        if o.milestones.iter().any(|&m| m >= o.epochs) {
            errs.push(format!(
                "optim.milestones must be < optim.epochs ({}), got {}",
                o.epochs,
                join(&o.milestones)
            ));
        }
        if !(0.0..1.0).contains(&o.adam.beta1) || !(0.0..1.0).contains(&o.adam.beta2) {
            errs.push("optim.adam_beta1 and optim.adam_beta2 must be in [0, 1)".into());
        }
        if !(o.adam.eps > 0.0) {
            errs.push("optim.adam_eps must be positive".into());
        }
        if self.data.train_size == 0 && self.data.train_dir.is_none() {
            errs.push("data.train_size must be >= 1".into());
        }
        if let Some(a) = &self.data.augment {
            if !(0.0..=1.0).contains(&a.flip_p) {
                errs.push(format!("data.flip_p must be in [0, 1], got {}", a.flip_p));
            }
            if !(a.rotation_deg >= 0.0 && a.rotation_deg.is_finite()) {
                errs.push("data.rotation_deg must be >= 0".into());
            }
            let (lo, hi) = a.scale_range;
            if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
                errs.push(format!(
                    "data.scale_min/scale_max must satisfy 0 < min <= max, got {lo}, {hi}"
                ));
            }
        }
        if self.eval.batch_size == 0 {
            errs.push("eval.batch_size must be >= 1".into());
        }
        if self.io.log_interval == 0 {
            errs.push("io.log_interval must be >= 1".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(CliError::Config(errs))
        }
    }

    /// Canonical text listing every key; `parse(to_text())` reproduces the config.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let o = &self.optim;
        let d = &self.data;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("seed", self.seed.to_string());
        kv(
            "model.head",
            match m.head {
                HeadKind::Sbn => "sbn",
                HeadKind::Csanet => "csanet",
            }
            .into(),
        );
        kv("model.stage_channels", join(&m.stage_channels));
        kv("model.blocks_per_stage", join(&m.blocks_per_stage));
        kv("model.feature_width", m.feature_width.to_string());
        kv("model.aspp_rates", join(&m.aspp_rates));
        kv("model.use_aspp", m.use_aspp.to_string());
        kv("model.use_sap", m.use_sap.to_string());
        kv("model.sap_conv3", m.sap_conv3.to_string());
        kv("model.sap_conv2gp", m.sap_conv2gp.to_string());
        kv("model.hhp_depth", m.hhp_depth.to_string());
        kv(
            "model.input_size",
            format!("{}x{}", m.input_size.0, m.input_size.1),
        );
        kv("model.sigma", m.sigma.to_string());
        kv("model.bn_momentum", m.bn_momentum.to_string());
        kv("model.bn_eps", m.bn_eps.to_string());
        kv("loss.alpha", m.loss_weights.0.to_string());
        kv("loss.beta", m.loss_weights.1.to_string());
        kv("loss.gamma", m.loss_weights.2.to_string());
        kv("optim.lr", o.lr.to_string());
        kv("optim.milestones", join(&o.milestones));
        kv("optim.decay", o.decay.to_string());
        kv("optim.batch_size", o.batch_size.to_string());
        kv("optim.epochs", o.epochs.to_string());
        kv("optim.adam_beta1", o.adam.beta1.to_string());
        kv("optim.adam_beta2", o.adam.beta2.to_string());
        kv("optim.adam_eps", o.adam.eps.to_string());
        kv("data.train_size", d.train_size.to_string());
        kv("data.val_size", d.val_size.to_string());
        kv("data.seed", d.seed.to_string());
        kv("data.difficulty", difficulty_name(d.difficulty).into());
        kv("data.augment", d.augment.is_some().to_string());
        if let Some(a) = &d.augment {
            kv("data.flip_p", a.flip_p.to_string());
            kv("data.rotation_deg", a.rotation_deg.to_string());
            kv("data.scale_min", a.scale_range.0.to_string());
            kv("data.scale_max", a.scale_range.1.to_string());
        }
        kv(
            "data.train_dir",
            d.train_dir
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default(),
        );
        kv("eval.flip_test", self.eval.flip_test.to_string());
        kv("eval.interval", self.eval.interval.to_string());
        kv("eval.batch_size", self.eval.batch_size.to_string());
        kv("io.out", self.io.out.display().to_string());
        kv(
            "io.checkpoint_interval",
            self.io.checkpoint_interval.to_string(),
        );
        kv("io.log_interval", self.io.log_interval.to_string());
        s
    }

    /// Learning rate in effect during `epoch`: one multiplication by `decay` per milestone passed.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.optim
            .milestones
            .iter()
            .filter(|&&m| epoch >= m)
            .fold(self.optim.lr, |lr, _| lr * self.optim.decay)
    }
}

/// `(key, ours, theirs)` for every key of `a` and `b` accepted by `keep` that differs.
pub fn diff_keys(a: &str, b: &str, keep: impl Fn(&str) -> bool) -> Vec<(String, String, String)> {
    let parse = |t: &str| -> Vec<(String, String)> {
        t.lines()
            .filter_map(|l| l.split_once('='))
            .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
            .filter(|(k, _)| keep(k))
            .collect()
    };
    let (pa, pb) = (parse(a), parse(b));
    let mut keys: Vec<&String> = pa.iter().chain(&pb).map(|(k, _)| k).collect();
    keys.sort();
    keys.dedup();
    let get = |p: &[(String, String)], k: &str| {
        p.iter()
            .find(|(key, _)| key == k)
            .map(|(_, v)| v.clone())
            .unwrap_or_else(|| "<absent>".into())
    };
    keys.into_iter()
        .filter_map(|k| {
            let (x, y) = (get(&pa, k), get(&pb, k));
            (x != y).then(|| (k.clone(), x, y))
        })
        .collect()
}
