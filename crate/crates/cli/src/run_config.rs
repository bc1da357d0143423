//! Sectioned run configuration: `[network]`, `[train]`, `[augment]` and
//! `[paths]`. Flags override file values; the effective configuration is
//! written back in the same format, so a run log can be replayed as-is.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use boxdet::cfgfile::{parse_sections, Section};
use boxdet::data::AugmentationConfig;
use boxdet::network::region::LossWeights;
use boxdet::train::{LrSpike, TrainingConfig};
use boxdet::{Error, Result};

const NETWORK_KEYS: &[&str] = &["description", "weights", "init_seed"];
const TRAIN_KEYS: &[&str] = &[
    "batch_size",
    "max_iterations",
    "learning_rate",
    "momentum",
    "weight_decay",
    "loss_stop_threshold",
    "stop_on_loss",
    "warmup_iterations",
    "ema_factor",
    "checkpoints",
    "divergence_ratio",
    "lr_backoff_factor",
    "max_backoffs",
    "snapshot_interval",
    "hard_negative_cap",
    "multiscale_interval",
    "lr_spike",
    "lr_steps",
    "coord_weight",
    "object_weight",
    "noobject_weight",
    "class_weight",
    "seed",
];
const AUGMENT_KEYS: &[&str] = &[
    "scale_jitter",
    "hflip_prob",
    "hue_delta",
    "sat_exposure_factor",
    "annotation_jitter",
    "annotation_retention",
    "seed",
];
const PATH_KEYS: &[&str] = &["manifest", "out"];

#[derive(Clone, Debug, PartialEq)]
#[derive(Default)]
pub struct RunConfig {
    /// Network description file.
    pub description: Option<PathBuf>,
    /// Initial weights (e.g. a surgery result); fresh init otherwise.
    pub weights: Option<PathBuf>,
    pub init_seed: u64,
    pub training: TrainingConfig,
    pub manifest: Option<PathBuf>,
    pub out: Option<PathBuf>,
}


fn parse_spike(v: &str) -> Option<LrSpike> {
    let parts: Vec<&str> = v.split(':').map(str::trim).collect();
    match parts.as_slice() {
        [s, d, f] => Some(LrSpike {
            start: s.parse().ok()?,
            duration: d.parse().ok()?,
            factor: f.parse().ok()?,
        }),
        _ => None,
    }
}

fn parse_steps(v: &str) -> Option<Vec<(usize, f64)>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty() && *s != "none")
        .map(|s| {
            let (i, f) = s.split_once(':')?;
            Some((i.trim().parse().ok()?, f.trim().parse().ok()?))
        })
        .collect()
}

fn parse_list(v: &str) -> Option<Vec<usize>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().ok())
        .collect()
}

fn bad(section: &str, key: &str, value: &str) -> Error {
    Error::Config(format!("[{section}] cannot parse `{key}={value}`"))
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut cfg = RunConfig::default();
        for section in parse_sections(&text)? {
            cfg.apply_section(&section, base)?;
        }
        Ok(cfg)
    }

    fn apply_section(&mut self, section: &Section, base: &Path) -> Result<()> {
        let allowed = match section.name.as_str() {
            "network" => NETWORK_KEYS,
            "train" => TRAIN_KEYS,
            "augment" => AUGMENT_KEYS,
            "paths" => PATH_KEYS,
            other => {
                return Err(Error::Config(format!(
                    "line {}: unknown section [{other}]",
                    section.line
                )))
            }
        };
        section.check_keys(allowed)?;
        for e in &section.entries {
            let v = e.value.as_str();
            let v = if matches!(e.key.as_str(), "description" | "weights" | "manifest" | "out") {
                let p = Path::new(v);
                if v.is_empty() || p.is_absolute() {
                    v.to_string()
                } else {
                    base.join(p).to_string_lossy().into_owned()
                }
            } else {
                v.to_string()
            };
            self.set(&section.name, &e.key, &v)?;
        }
        Ok(())
    }

    /// Applies `section.key=value`.
    pub fn set_dotted(&mut self, assignment: &str) -> Result<()> {
        let (lhs, value) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` is not section.key=value")))?;
        let (section, key) = lhs
            .trim()
            .split_once('.')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` is not section.key=value")))?;
        let allowed = match section {
            "network" => NETWORK_KEYS,
            "train" => TRAIN_KEYS,
            "augment" => AUGMENT_KEYS,
            "paths" => PATH_KEYS,
            _ => return Err(Error::Config(format!("unknown section `{section}`"))),
        };
        if !allowed.contains(&key) {
            return Err(Error::Config(format!("unknown key `{section}.{key}`")));
        }
        self.set(section, key, value.trim())
    }

    fn set(&mut self, section: &str, key: &str, v: &str) -> Result<()> {
        macro_rules! num {
            ($field:expr) => {
                $field = v.parse().map_err(|_| bad(section, key, v))?
            };
        }
        let t = &mut self.training;
        let a = &mut t.augmentation;
        let w: &mut LossWeights = &mut t.loss_weights;
        match (section, key) {
            ("network", "description") => self.description = Some(PathBuf::from(v)),
            ("network", "weights") => self.weights = (!v.is_empty()).then(|| PathBuf::from(v)),
            ("network", "init_seed") => num!(self.init_seed),
            ("paths", "manifest") => self.manifest = Some(PathBuf::from(v)),
            ("paths", "out") => self.out = Some(PathBuf::from(v)),
            ("train", "batch_size") => num!(t.batch_size),
            ("train", "max_iterations") => num!(t.max_iterations),
            ("train", "learning_rate") => num!(t.learning_rate),
            ("train", "momentum") => num!(t.momentum),
            ("train", "weight_decay") => num!(t.weight_decay),
            ("train", "loss_stop_threshold") => num!(t.loss_stop_threshold),
            ("train", "stop_on_loss") => num!(t.stop_on_loss),
            ("train", "warmup_iterations") => num!(t.warmup_iterations),
            ("train", "ema_factor") => num!(t.ema_factor),
            ("train", "checkpoints") => t.checkpoint_iterations = parse_list(v).ok_or_else(|| bad(section, key, v))?,
            ("train", "divergence_ratio") => num!(t.divergence_ratio),
            ("train", "lr_backoff_factor") => num!(t.lr_backoff_factor),
            ("train", "max_backoffs") => num!(t.max_backoffs),
            ("train", "snapshot_interval") => num!(t.snapshot_interval),
            ("train", "hard_negative_cap") => num!(t.hard_negative_cap),
            ("train", "multiscale_interval") => num!(t.multiscale_interval),
            ("train", "lr_spike") => {
                t.lr_spike = if v.is_empty() || v == "none" {
                    None
                } else {
                    Some(parse_spike(v).ok_or_else(|| bad(section, key, v))?)
                }
            }
            ("train", "lr_steps") => t.lr_steps = parse_steps(v).ok_or_else(|| bad(section, key, v))?,
            ("train", "coord_weight") => num!(w.coord),
            ("train", "object_weight") => num!(w.object),
            ("train", "noobject_weight") => num!(w.noobject),
            ("train", "class_weight") => num!(w.class),
            ("train", "seed") => num!(t.seed),
            ("augment", "scale_jitter") => num!(a.scale_jitter),
            ("augment", "hflip_prob") => num!(a.hflip_prob),
            ("augment", "hue_delta") => num!(a.hue_delta),
            ("augment", "sat_exposure_factor") => num!(a.sat_exposure_factor),
            ("augment", "annotation_jitter") => num!(a.annotation_jitter),
            ("augment", "annotation_retention") => num!(a.annotation_retention),
            ("augment", "seed") => num!(a.seed),
            _ => return Err(Error::Config(format!("unknown key `{section}.{key}`"))),
        }
        Ok(())
    }

    /// Every effective value, in loadable form.
    pub fn to_text(&self) -> String {
        let t = &self.training;
        let a: &AugmentationConfig = &t.augmentation;
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let mut s = String::new();
        let _ = writeln!(s, "[network]");
        if self.description.is_some() {
            let _ = writeln!(s, "description = {}", path(&self.description));
        }
        let _ = writeln!(s, "weights = {}", path(&self.weights));
        let _ = writeln!(s, "init_seed = {}", self.init_seed);
        let _ = writeln!(s, "\n[train]");
        let checkpoints: Vec<String> = t.checkpoint_iterations.iter().map(ToString::to_string).collect();
        let spike = t
            .lr_spike
            .map(|sp| format!("{}:{}:{}", sp.start, sp.duration, sp.factor))
            .unwrap_or_else(|| "none".into());
        let steps: Vec<String> = t.lr_steps.iter().map(|(i, f)| format!("{i}:{f}")).collect();
        let steps = if steps.is_empty() { "none".into() } else { steps.join(",") };
        for (k, v) in [
            ("batch_size", t.batch_size.to_string()),
            ("max_iterations", t.max_iterations.to_string()),
            ("learning_rate", t.learning_rate.to_string()),
            ("momentum", t.momentum.to_string()),
            ("weight_decay", t.weight_decay.to_string()),
            ("loss_stop_threshold", t.loss_stop_threshold.to_string()),
            ("stop_on_loss", t.stop_on_loss.to_string()),
            ("warmup_iterations", t.warmup_iterations.to_string()),
            ("ema_factor", t.ema_factor.to_string()),
            ("checkpoints", checkpoints.join(",")),
            ("divergence_ratio", t.divergence_ratio.to_string()),
            ("lr_backoff_factor", t.lr_backoff_factor.to_string()),
            ("max_backoffs", t.max_backoffs.to_string()),
            ("snapshot_interval", t.snapshot_interval.to_string()),
            ("hard_negative_cap", t.hard_negative_cap.to_string()),
            ("multiscale_interval", t.multiscale_interval.to_string()),
            ("lr_spike", spike),
            ("lr_steps", steps),
            ("coord_weight", t.loss_weights.coord.to_string()),
            ("object_weight", t.loss_weights.object.to_string()),
            ("noobject_weight", t.loss_weights.noobject.to_string()),
            ("class_weight", t.loss_weights.class.to_string()),
            ("seed", t.seed.to_string()),
        ] {
            let _ = writeln!(s, "{k} = {v}");
        }
        let _ = writeln!(s, "\n[augment]");
        for (k, v) in [
            ("scale_jitter", a.scale_jitter),
            ("hflip_prob", a.hflip_prob),
            ("hue_delta", a.hue_delta),
            ("sat_exposure_factor", a.sat_exposure_factor),
            ("annotation_jitter", a.annotation_jitter),
            ("annotation_retention", a.annotation_retention),
        ] {
            let _ = writeln!(s, "{k} = {v}");
        }
        let _ = writeln!(s, "seed = {}", a.seed);
        let _ = writeln!(s, "\n[paths]");
        if self.manifest.is_some() {
            let _ = writeln!(s, "manifest = {}", path(&self.manifest));
        }
        if self.out.is_some() {
            let _ = writeln!(s, "out = {}", path(&self.out));
        }
        s
    }
}
