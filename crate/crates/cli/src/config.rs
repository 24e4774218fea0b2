//! Flat `key = value` run configuration with a fixed schema.
//!
//! Sources are layered: built-in defaults, then the config file, then
//! command-line flags. Every key is checked against [`SCHEMA`] and parsed
//! eagerly so a bad value fails before any work starts.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use dwsmil::backbone::BackboneConfig;
use dwsmil::objective::{LossWeights, Objective};
use dwsmil::superpixel::SlicParams;
use dwsmil::synth::SynthSpec;
use dwsmil::train::{BatchMode, Plateau, TrainConfig};

pub const SNAPSHOT: &str = "resolved_config.txt";

/// Invalid key or value; maps to its own exit code.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct SchemaError(pub String);

#[derive(Clone, Copy, Debug)]
enum Kind {
    Usize,
    U64,
    Real,
    RealList,
    Stages,
    Text,
    Choice(&'static [&'static str]),
}

struct Key {
    name: &'static str,
    default: &'static str,
    kind: Kind,
}

const fn key(name: &'static str, default: &'static str, kind: Kind) -> Key {
    Key { name, default, kind }
}

const SCHEMA: &[Key] = &[
    // backbone
    key("stages", "2x16,2x32,3x64", Kind::Stages),
    key("kernel_size", "3", Kind::Usize),
    key("input_channels", "3", Kind::Usize),
    key("fusion_weights", "0.2,0.35,0.45", Kind::RealList),
    // objective
    key("r", "4", Kind::Real),
    key("eta_side", "2.5,5,10", Kind::RealList),
    key("eta_fuse", "10", Kind::Real),
    // optimizer
    key("learning_rate", "0.001", Kind::Real),
    key("side_lr_scale", "0.01", Kind::Real),
    key("beta1", "0.9", Kind::Real),
    key("beta2", "0.999", Kind::Real),
    key("epsilon", "1e-8", Kind::Real),
    key("weight_decay", "0.0005", Kind::Real),
    key("iterations", "1000", Kind::Usize),
    key("batch_size", "0", Kind::Usize),
    key("plateau_window", "50", Kind::Usize),
    key("plateau_tolerance", "1e-5", Kind::Real),
    key("log_every", "10", Kind::Usize),
    // instances
    key("instances", "pixel", Kind::Choice(&["pixel", "superpixel"])),
    // train: regions are the MIL instances; predict: pixels during training,
    // region means only when scoring or rendering
    key("superpixel_mode", "train", Kind::Choice(&["train", "predict"])),
    key("superpixel_k", "256", Kind::Usize),
    key("superpixel_compactness", "10", Kind::Real),
    key("superpixel_iterations", "10", Kind::Usize),
    // synthetic data
    key("image_size", "64", Kind::Usize),
    key("positive_count", "40", Kind::Usize),
    key("negative_count", "80", Kind::Usize),
    key("area_min", "0.1", Kind::Real),
    key("area_max", "0.4", Kind::Real),
    key("area_step", "0.05", Kind::Real),
    // evaluation and sweeps
    key("threshold", "0.5", Kind::Real),
    key("ac_grid", "0,0,0,0;2.5,5,10,10", Kind::Text),
    key("gradcheck_samples", "10", Kind::Usize),
    // run
    key("seed", "0", Kind::U64),
    key("threads", "0", Kind::Usize),
    key("data", "", Kind::Text),
    key("eval_data", "", Kind::Text),
    key("checkpoint", "", Kind::Text),
    key("out", "", Kind::Text),
];

fn schema(name: &str) -> Option<&'static Key> {
    SCHEMA.iter().find(|k| k.name == name)
}

fn check(key: &Key, value: &str) -> Result<(), SchemaError> {
    let bad = |why: String| SchemaError(format!("invalid value {value:?} for {}: {why}", key.name));
    match key.kind {
        Kind::Usize => value.parse::<usize>().map(drop).map_err(|e| bad(e.to_string())),
        Kind::U64 => value.parse::<u64>().map(drop).map_err(|e| bad(e.to_string())),
        Kind::Real => match value.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(()),
            Ok(_) => Err(bad("not finite".into())),
            Err(e) => Err(bad(e.to_string())),
        },
        Kind::RealList => parse_reals(value).map(drop).map_err(bad),
        Kind::Stages => BackboneConfig::parse_stages(value).map(drop).map_err(|e| bad(e.to_string())),
        Kind::Text => Ok(()),
        Kind::Choice(options) if options.contains(&value) => Ok(()),
        Kind::Choice(options) => Err(bad(format!("expected one of {}", options.join(", ")))),
    }
}

fn parse_reals(text: &str) -> Result<Vec<f64>, String> {
    text.split(',')
        .map(|s| match s.trim().parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(v),
            _ => Err(format!("{s:?} is not a finite number")),
        })
        .collect()
}

/// Fully resolved settings; every schema key is present.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            values: SCHEMA.iter().map(|k| (k.name.to_string(), k.default.to_string())).collect(),
        }
    }
}

impl RunConfig {
    /// Defaults, overlaid with `file` (if any), overlaid with `overrides`.
    #[cfg(test)]
    pub fn resolve(file: Option<&Path>, overrides: &[(String, String)]) -> anyhow::Result<Self> {
        Self::resolve_layers(&[], file, overrides)
    }

    /// Like [`RunConfig::resolve`], with `base` applied before the file
    /// (environment-provided defaults).
    pub fn resolve_layers(
        base: &[(String, String)],
        file: Option<&Path>,
        overrides: &[(String, String)],
    ) -> anyhow::Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in base {
            cfg.set(k, v)?;
        }
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| dwsmil::Error::Io {
                path: path.into(),
                source: e,
            })?;
            for (k, v) in parse_file(&text).map_err(|e| SchemaError(format!("{}: {}", path.display(), e.0)))? {
                cfg.set(&k, &v)?;
            }
        }
        for (k, v) in overrides {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, name: &str, value: &str) -> Result<(), SchemaError> {
        let key = schema(name).ok_or_else(|| SchemaError(format!("unknown config key {name:?}")))?;
        let value = value.trim();
        check(key, value)?;
        self.values.insert(name.to_string(), value.to_string());
        Ok(())
    }

    pub fn get(&self, name: &str) -> &str {
        self.values.get(name).map(String::as_str).expect("schema key")
    }

    fn usize(&self, name: &str) -> usize {
        self.get(name).parse().expect("validated")
    }

    fn real(&self, name: &str) -> f64 {
        self.get(name).parse().expect("validated")
    }

    fn reals(&self, name: &str) -> Vec<f64> {
        parse_reals(self.get(name)).expect("validated")
    }

    pub fn seed(&self) -> u64 {
        self.get("seed").parse().expect("validated")
    }

    pub fn threads(&self) -> Option<usize> {
        Some(self.usize("threads")).filter(|&n| n > 0)
    }

    pub fn threshold(&self) -> f64 {
        self.real("threshold")
    }

    pub fn log_every(&self) -> usize {
        self.usize("log_every")
    }

    pub fn gradcheck_samples(&self) -> usize {
        self.usize("gradcheck_samples")
    }

    /// A path-valued key, or `None` when unset.
    pub fn path(&self, name: &str) -> Option<PathBuf> {
        Some(self.get(name)).filter(|s| !s.is_empty()).map(PathBuf::from)
    }

    pub fn require_path(&self, name: &str) -> Result<PathBuf, SchemaError> {
        self.path(name)
            .ok_or_else(|| SchemaError(format!("missing required setting {name:?} (use --{name} or --set {name}=...)")))
    }

    pub fn backbone(&self) -> BackboneConfig {
        BackboneConfig {
            stages: BackboneConfig::parse_stages(self.get("stages")).expect("validated"),
            kernel_size: self.usize("kernel_size"),
            input_channels: self.usize("input_channels"),
            fusion_weights: self.reals("fusion_weights"),
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            eta_side: self.reals("eta_side"),
            eta_fuse: self.real("eta_fuse"),
        }
    }

    pub fn train(&self) -> TrainConfig {
        let batch = self.usize("batch_size");
        let window = self.usize("plateau_window");
        TrainConfig {
            learning_rate: self.real("learning_rate"),
            side_lr_scale: self.real("side_lr_scale"),
            beta1: self.real("beta1"),
            beta2: self.real("beta2"),
            epsilon: self.real("epsilon"),
            weight_decay: self.real("weight_decay"),
            iterations: self.usize("iterations"),
            batch_mode: if batch == 0 { BatchMode::Full } else { BatchMode::Minibatch(batch) },
            objective: Objective {
                r: self.real("r"),
                weights: self.loss_weights(),
            },
            plateau: (window > 0).then(|| Plateau {
                window,
                tolerance: self.real("plateau_tolerance"),
            }),
            seed: self.seed(),
            threads: None,
        }
    }

    pub fn synth(&self) -> SynthSpec {
        SynthSpec {
            image_size: self.usize("image_size"),
            positive_count: self.usize("positive_count"),
            negative_count: self.usize("negative_count"),
            area_range: (self.real("area_min"), self.real("area_max")),
            area_step: self.real("area_step"),
            seed: self.seed(),
            ..SynthSpec::default()
        }
    }

    /// SLIC settings when superpixel instances are selected.
    pub fn superpixels(&self) -> Option<SlicParams> {
        (self.get("instances") == "superpixel").then(|| SlicParams {
            k: self.usize("superpixel_k"),
            compactness: self.real("superpixel_compactness"),
            iterations: self.usize("superpixel_iterations"),
        })
    }

    /// SLIC settings for data fed to the trainer; `None` in predict mode.
    pub fn training_superpixels(&self) -> Option<SlicParams> {
        self.superpixels().filter(|_| self.get("superpixel_mode") == "train")
    }

    /// Loss-weight settings of an area-constraint sweep, one per `;` entry.
    pub fn ac_grid(&self) -> Result<Vec<LossWeights>, SchemaError> {
        let sides = self.backbone().side_count();
        self.get("ac_grid")
            .split(';')
            .map(|entry| {
                let v = parse_reals(entry).map_err(|e| SchemaError(format!("ac_grid: {e}")))?;
                if v.len() != sides + 1 {
                    return Err(SchemaError(format!(
                        "ac_grid entry {entry:?} needs {} values (one per side output, then fused)",
                        sides + 1
                    )));
                }
                let w = LossWeights {
                    eta_side: v[..sides].to_vec(),
                    eta_fuse: v[sides],
                };
                w.validate().map_err(|e| SchemaError(format!("ac_grid: {e}")))?;
                Ok(w)
            })
            .collect()
    }

    /// Cross-key checks.
    pub fn validate(&self) -> Result<(), SchemaError> {
        let wrap = |e: dwsmil::Error| SchemaError(e.to_string());
        self.backbone().validate().map_err(wrap)?;
        let sides = self.backbone().side_count();
        if self.reals("eta_side").len() != sides {
            return Err(SchemaError(format!("eta_side needs {sides} values, one per side output")));
        }
        self.train().validate().map_err(wrap)?;
        let t = self.threshold();
        if !(t > 0.0 && t < 1.0) {
            return Err(SchemaError(format!("threshold {t} outside (0, 1)")));
        }
        if self.usize("superpixel_k") == 0 {
            return Err(SchemaError("superpixel_k must be positive".into()));
        }
        self.ac_grid()?;
        Ok(())
    }

    /// Every key in schema order, as a loadable config file.
    pub fn to_text(&self) -> String {
        let mut s = String::from("# resolved configuration; pass back with --config to repeat the run\n");
        for k in SCHEMA {
            let _ = writeln!(s, "{} = {}", k.name, self.get(k.name));
        }
        s
    }

    pub fn write_snapshot(&self, dir: &Path) -> anyhow::Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| dwsmil::Error::Io {
            path: dir.into(),
            source: e,
        })?;
        let path = dir.join(SNAPSHOT);
        std::fs::write(&path, self.to_text()).map_err(|e| dwsmil::Error::Io {
            path: path.clone(),
            source: e,
        })?;
        Ok(path)
    }
}

/// `key = value` lines; `#` starts a comment line. Duplicate keys are rejected.
pub fn parse_file(text: &str) -> Result<Vec<(String, String)>, SchemaError> {
    let mut seen = BTreeMap::new();
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| SchemaError(format!("line {}: expected key = value", i + 1)))?;
        let k = k.trim().to_string();
        if schema(&k).is_none() {
            return Err(SchemaError(format!("line {}: unknown config key {k:?}", i + 1)));
        }
        if let Some(prev) = seen.insert(k.clone(), i + 1) {
            return Err(SchemaError(format!("line {}: {k:?} already set on line {prev}", i + 1)));
        }
        out.push((k, v.trim().to_string()));
    }
    Ok(out)
}

/// Splits a `key=value` command-line assignment.
pub fn parse_assignment(s: &str) -> Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| format!("expected key=value, got {s:?}"))
}
