//! Flat `key = value` run configuration with dotted section names.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::dataset::DEFAULT_FRACTIONS;
use crate::ensemble::DEFAULT_THRESHOLD;
use crate::error::{Error, Result};
use crate::explain::OverlayOptions;
use crate::fsutil::read_to_string;
use crate::taxonomy::ViewKind;
use crate::trainer::TrainConfig;

pub const DEFAULT_SUPPORT_THRESHOLD: usize = 200;
pub const DEFAULT_EXPLAIN_SAMPLES: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSettings {
    pub count: usize,
    pub side: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Directory relative paths are resolved against.
    pub base_dir: PathBuf,
    pub profile: Profile,
    pub manifest: Option<String>,
    pub taxonomy: Option<String>,
    /// Base directory of image and mask paths inside the manifest.
    pub data_root: Option<String>,
    pub boxes: Option<String>,
    pub output: Option<String>,
    pub seed: Option<u64>,
    pub view: ViewKind,
    pub support_threshold: usize,
    pub split: [f64; 3],
    pub train: TrainConfig,
    pub threshold: f64,
    pub overlay: OverlayOptions,
    pub explain_samples: usize,
    pub synth: Option<SynthSettings>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Profile {
    /// Full-size defaults: 224 px inputs, 512-unit head.
    Paper,
    /// 64 px inputs and a 32-unit head.
    Desk,
}

impl Profile {
    fn as_str(self) -> &'static str {
        match self {
            Profile::Paper => "paper",
            Profile::Desk => "desk",
        }
    }
}

impl RunConfig {
    pub fn new(base_dir: PathBuf, profile: Profile) -> Self {
        let train = match profile {
            Profile::Paper => TrainConfig::default(),
            Profile::Desk => TrainConfig::desk(),
        };
        Self {
            base_dir,
            profile,
            manifest: None,
            taxonomy: None,
            data_root: None,
            boxes: None,
            output: None,
            seed: None,
            view: ViewKind::Specific,
            support_threshold: match profile {
                Profile::Paper => DEFAULT_SUPPORT_THRESHOLD,
                Profile::Desk => 20,
            },
            split: DEFAULT_FRACTIONS,
            train,
            threshold: DEFAULT_THRESHOLD,
            overlay: OverlayOptions::default(),
            explain_samples: DEFAULT_EXPLAIN_SAMPLES,
            synth: None,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = read_to_string(path)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, base, &path.display().to_string())
    }

    pub fn parse(text: &str, base_dir: PathBuf, source_name: &str) -> Result<Self> {
        let err = |line: usize, message: String| Error::Parse {
            source_name: source_name.to_string(),
            line,
            message,
        };
        let mut pairs: BTreeMap<String, (usize, String)> = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(i + 1, format!("expected 'key = value', found '{line}'")))?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(err(i + 1, "empty key".into()));
            }
            if let Some((first, _)) = pairs.insert(k.to_string(), (i + 1, v.to_string())) {
                return Err(err(i + 1, format!("key '{k}' already set on line {first}")));
            }
        }
        let profile = match pairs.remove("profile") {
            None => Profile::Desk,
            Some((line, v)) => match v.as_str() {
                "paper" => Profile::Paper,
                "desk" => Profile::Desk,
                other => return Err(err(line, format!("unknown profile '{other}'"))),
            },
        };
        let mut cfg = Self::new(base_dir, profile);
        let mut synth_count = None;
        let mut synth_side = 128;
        for (key, (line, value)) in pairs {
            let bad = |e: String| err(line, format!("{key}: {e}"));
            fn num<T: std::str::FromStr>(v: &str) -> std::result::Result<T, String>
            where
                T::Err: std::fmt::Display,
            {
                v.parse::<T>().map_err(|e| format!("'{v}': {e}"))
            }
            let t = &mut cfg.train;
            let a = &mut t.augment;
            match key.as_str() {
                "data.manifest" => cfg.manifest = Some(value),
                "data.taxonomy" => cfg.taxonomy = Some(value),
                "data.root" => cfg.data_root = Some(value),
                "data.boxes" => cfg.boxes = Some(value),
                "output" => cfg.output = Some(value),
                "seed" => cfg.seed = Some(num(&value).map_err(bad)?),
                "view" => cfg.view = value.parse().map_err(|e: Error| bad(e.to_string()))?,
                "support_threshold" => cfg.support_threshold = num(&value).map_err(bad)?,
                "split.train" => cfg.split[0] = num(&value).map_err(bad)?,
                "split.val" => cfg.split[1] = num(&value).map_err(bad)?,
                "split.test" => cfg.split[2] = num(&value).map_err(bad)?,
                "train.max_epochs" => t.max_epochs = num(&value).map_err(bad)?,
                "train.batch_size" => t.batch_size = num(&value).map_err(bad)?,
                "train.lr" => t.lr = num(&value).map_err(bad)?,
                "train.patience" => t.patience = num(&value).map_err(bad)?,
                "train.min_delta" => t.min_delta = num(&value).map_err(bad)?,
                "train.side" => t.side = num(&value).map_err(bad)?,
                "train.hidden" => t.hidden = num(&value).map_err(bad)?,
                "train.dropout" => t.dropout = num(&value).map_err(bad)?,
                "augment.rotation_deg" => a.rotation_deg = num(&value).map_err(bad)?,
                "augment.shear_rad" => a.shear_rad = num(&value).map_err(bad)?,
                "augment.zoom_min" => a.zoom.0 = num(&value).map_err(bad)?,
                "augment.zoom_max" => a.zoom.1 = num(&value).map_err(bad)?,
                "augment.width_shift" => a.width_shift = num(&value).map_err(bad)?,
                "augment.height_shift" => a.height_shift = num(&value).map_err(bad)?,
                "augment.flip_prob" => a.flip_prob = num(&value).map_err(bad)?,
                "augment.brightness_min" => a.brightness.0 = num(&value).map_err(bad)?,
                "augment.brightness_max" => a.brightness.1 = num(&value).map_err(bad)?,
                "augment.intensity_shift" => a.intensity_shift = num(&value).map_err(bad)?,
                "ensemble.threshold" => cfg.threshold = num(&value).map_err(bad)?,
                "explain.alpha" => cfg.overlay.alpha = num(&value).map_err(bad)?,
                "explain.min_heat" => cfg.overlay.min_heat = num(&value).map_err(bad)?,
                "explain.samples" => cfg.explain_samples = num(&value).map_err(bad)?,
                "synth.count" => synth_count = Some(num(&value).map_err(bad)?),
                "synth.side" => synth_side = num(&value).map_err(bad)?,
                _ => return Err(err(line, format!("unknown key '{key}'"))),
            }
        }
        cfg.synth = synth_count.map(|count| SynthSettings { count, side: synth_side });
        Ok(cfg)
    }

    /// Canonical text: every setting, sorted by key. Parsing it yields the same config.
    pub fn to_text(&self) -> String {
        let mut kv: BTreeMap<&str, String> = BTreeMap::new();
        let t = &self.train;
        let a = &t.augment;
        kv.insert("profile", self.profile.as_str().into());
        for (k, v) in [
            ("data.manifest", &self.manifest),
            ("data.taxonomy", &self.taxonomy),
            ("data.root", &self.data_root),
            ("data.boxes", &self.boxes),
            ("output", &self.output),
        ] {
            if let Some(v) = v {
                kv.insert(k, v.clone());
            }
        }
        if let Some(s) = self.seed {
            kv.insert("seed", s.to_string());
        }
        kv.insert("view", self.view.to_string());
        kv.insert("support_threshold", self.support_threshold.to_string());
        kv.insert("split.train", self.split[0].to_string());
        kv.insert("split.val", self.split[1].to_string());
        kv.insert("split.test", self.split[2].to_string());
        kv.insert("train.max_epochs", t.max_epochs.to_string());
        kv.insert("train.batch_size", t.batch_size.to_string());
        kv.insert("train.lr", t.lr.to_string());
        kv.insert("train.patience", t.patience.to_string());
        kv.insert("train.min_delta", t.min_delta.to_string());
        kv.insert("train.side", t.side.to_string());
        kv.insert("train.hidden", t.hidden.to_string());
        kv.insert("train.dropout", t.dropout.to_string());
        kv.insert("augment.rotation_deg", a.rotation_deg.to_string());
        kv.insert("augment.shear_rad", a.shear_rad.to_string());
        kv.insert("augment.zoom_min", a.zoom.0.to_string());
        kv.insert("augment.zoom_max", a.zoom.1.to_string());
        kv.insert("augment.width_shift", a.width_shift.to_string());
        kv.insert("augment.height_shift", a.height_shift.to_string());
        kv.insert("augment.flip_prob", a.flip_prob.to_string());
        kv.insert("augment.brightness_min", a.brightness.0.to_string());
        kv.insert("augment.brightness_max", a.brightness.1.to_string());
        kv.insert("augment.intensity_shift", a.intensity_shift.to_string());
        kv.insert("ensemble.threshold", self.threshold.to_string());
        kv.insert("explain.alpha", self.overlay.alpha.to_string());
        kv.insert("explain.min_heat", self.overlay.min_heat.to_string());
        kv.insert("explain.samples", self.explain_samples.to_string());
        if let Some(s) = &self.synth {
            kv.insert("synth.count", s.count.to_string());
            kv.insert("synth.side", s.side.to_string());
        }
        kv.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        let p = Path::new(rel);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn seed(&self) -> Result<u64> {
        self.seed
            .ok_or_else(|| Error::invalid("a seed is required (config 'seed' or --seed)"))
    }

    pub fn output_dir(&self) -> Result<PathBuf> {
        self.output
            .as_deref()
            .map(|o| self.resolve(o))
            .ok_or_else(|| Error::invalid("an output directory is required (config 'output' or --out)"))
    }

    /// Checks value ranges and that referenced input files exist.
    pub fn validate(&self) -> Result<()> {
        self.seed()?;
        self.train.validate()?;
        if self.support_threshold == 0 {
            return Err(Error::invalid("support_threshold must be >= 1"));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::invalid(format!("threshold {} must lie in (0,1)", self.threshold)));
        }
        if !(0.0..=1.0).contains(&self.overlay.alpha) || !(0.0..=1.0).contains(&self.overlay.min_heat) {
            return Err(Error::invalid("explain.alpha and explain.min_heat must lie in [0,1]"));
        }
        if self.synth.is_none() {
            for (key, v) in [("data.manifest", &self.manifest), ("data.taxonomy", &self.taxonomy)] {
                let v = v
                    .as_deref()
                    .ok_or_else(|| Error::invalid(format!("'{key}' is required unless synth.count is set")))?;
                let p = self.resolve(v);
                if !p.exists() {
                    return Err(Error::MissingFile(p));
                }
            }
        }
        Ok(())
    }
}
