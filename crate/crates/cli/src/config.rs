//! Flat `key = value` run configuration. Blank lines and `#` comments are
//! ignored; unknown keys are rejected so typos do not pass silently.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use anyhow::{Context, Result};

use stn_icnn::data::Split;
use stn_icnn::pipeline::{PipelineConfig, RoughEncoding};
use stn_icnn::train::{Phase, TargetWindow, TrainConfig};

use crate::{Failure, TrainArgs};

pub const KEYS: [&str; 16] = [
    "epochs",
    "batch_size",
    "lr_new",
    "lr_pretrained",
    "momentum",
    "seed",
    "augment",
    "loc_occlusion_prob",
    "freeze_stn",
    "targets",
    "eval_every",
    "eval_split",
    "preset",
    "encoding",
    "window",
    "threads",
];

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

impl Settings {
    pub fn parse(text: &str) -> Result<Self> {
        let mut s = Settings::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Failure::Usage(format!("config line {}: expected key = value", n + 1)))?;
            s.set(k.trim(), v.trim())?;
        }
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn set(&mut self, key: &str, value: impl ToString) -> Result<()> {
        if !KEYS.contains(&key) {
            return Err(Failure::Usage(format!("unknown config key {key:?}")).into());
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    /// File values (if any) overridden by the flags that were given.
    pub fn from_args(a: &TrainArgs) -> Result<Self> {
        let mut s = match &a.config {
            Some(p) => Self::load(p)?,
            None => Settings::default(),
        };
        let opt = |s: &mut Settings, k: &str, v: Option<String>| match v {
            Some(v) => s.set(k, v),
            None => Ok(()),
        };
        opt(&mut s, "epochs", a.epochs.map(|v| v.to_string()))?;
        opt(&mut s, "batch_size", a.batch_size.map(|v| v.to_string()))?;
        opt(&mut s, "lr_new", a.lr_new.map(|v| v.to_string()))?;
        opt(&mut s, "lr_pretrained", a.lr_pretrained.map(|v| v.to_string()))?;
        opt(&mut s, "momentum", a.momentum.map(|v| v.to_string()))?;
        opt(&mut s, "seed", a.seed.map(|v| v.to_string()))?;
        opt(&mut s, "loc_occlusion_prob", a.loc_occlusion_prob.map(|v| v.to_string()))?;
        opt(&mut s, "targets", a.targets.clone())?;
        opt(&mut s, "eval_every", a.eval_every.map(|v| v.to_string()))?;
        opt(&mut s, "eval_split", a.eval_split.clone())?;
        opt(&mut s, "preset", a.preset.clone())?;
        opt(&mut s, "encoding", a.encoding.clone())?;
        opt(&mut s, "window", a.window.map(|v| v.to_string()))?;
        opt(&mut s, "threads", a.threads.map(|v| v.to_string()))?;
        if a.augment {
            s.set("augment", "true")?;
        }
        if a.freeze_stn {
            s.set("freeze_stn", "true")?;
        }
        Ok(s)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.values.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| Failure::Usage(format!("bad value {v:?} for {key}")).into()),
        }
    }

    pub fn has(&self, key: &str) -> bool {
        self.values.contains_key(key)
    }

    fn flag(&self, key: &str, default: bool) -> Result<bool> {
        match self.values.get(key).map(String::as_str) {
            None => Ok(default),
            Some("true" | "1" | "yes") => Ok(true),
            Some("false" | "0" | "no") => Ok(false),
            Some(v) => Err(Failure::Usage(format!("bad boolean {v:?} for {key}")).into()),
        }
    }

    pub fn train_config(&self, phase: Phase) -> Result<TrainConfig> {
        let d = TrainConfig::for_phase(phase);
        let c = TrainConfig {
            phase,
            epochs: self.get("epochs")?.unwrap_or(d.epochs),
            batch_size: self.get("batch_size")?.unwrap_or(d.batch_size),
            lr_new: self.get("lr_new")?.unwrap_or(d.lr_new),
            lr_pretrained: self.get("lr_pretrained")?.unwrap_or(d.lr_pretrained),
            momentum: self.get("momentum")?.unwrap_or(d.momentum),
            seed: self.get("seed")?.unwrap_or(d.seed),
            augment: self.flag("augment", d.augment)?,
            loc_occlusion_prob: self.get("loc_occlusion_prob")?.unwrap_or(d.loc_occlusion_prob),
            freeze_stn: self.flag("freeze_stn", d.freeze_stn)?,
            eval_every: self.get("eval_every")?.unwrap_or(d.eval_every),
            targets: match self.values.get("targets") {
                None => d.targets,
                Some(v) => TargetWindow::parse(v).ok_or_else(|| Failure::Usage(format!("unknown targets {v:?}")))?,
            },
        };
        if c.freeze_stn && phase != Phase::EndToEnd {
            return Err(Failure::Usage("freeze_stn applies to the joint phase only".into()).into());
        }
        c.validate()?;
        Ok(c)
    }

    /// Architecture for a freshly initialized model set.
    pub fn pipeline_config(&self) -> Result<PipelineConfig> {
        let mut c = match self.values.get("preset").map(String::as_str) {
            None | Some("desk") => PipelineConfig::desk(),
            Some("full") => PipelineConfig::default(),
            Some(v) => return Err(Failure::Usage(format!("unknown preset {v:?}")).into()),
        };
        if let Some(e) = self.values.get("encoding") {
            c.encoding = RoughEncoding::parse(e).ok_or_else(|| Failure::Usage(format!("unknown encoding {e:?}")))?;
        }
        if let Some(w) = self.get::<usize>("window")? {
            c.window = (w, w);
            for f in &mut c.fine {
                f.input_size = w;
            }
        }
        c.validate()?;
        Ok(c)
    }

    /// Held-out split for periodic scores (`None` disables them).
    pub fn eval_split(&self) -> Result<Option<Split>> {
        match self.values.get("eval_split").map(String::as_str) {
            None => Ok(Some(Split::Tuning)),
            Some("none") => Ok(None),
            Some(v) => Split::parse(v)
                .map(Some)
                .ok_or_else(|| Failure::Usage(format!("unknown split {v:?}")).into()),
        }
    }

    /// Every key, resolved against the defaults of `train`, for the manifest.
    pub fn resolved(&self, train: &TrainConfig, pipeline: &PipelineConfig) -> Vec<(String, String)> {
        let mut out = vec![
            ("epochs".to_string(), train.epochs.to_string()),
            ("batch_size".into(), train.batch_size.to_string()),
            ("lr_new".into(), train.lr_new.to_string()),
            ("lr_pretrained".into(), train.lr_pretrained.to_string()),
            ("momentum".into(), train.momentum.to_string()),
            ("seed".into(), train.seed.to_string()),
            ("augment".into(), train.augment.to_string()),
            ("loc_occlusion_prob".into(), train.loc_occlusion_prob.to_string()),
            ("freeze_stn".into(), train.freeze_stn.to_string()),
            ("targets".into(), train.targets.name().into()),
            ("eval_every".into(), train.eval_every.to_string()),
            ("encoding".into(), pipeline.encoding.name().to_string()),
            ("window".into(), pipeline.window.0.to_string()),
        ];
        for k in ["eval_split", "preset", "threads"] {
            out.push((k.to_string(), self.values.get(k).cloned().unwrap_or_else(|| "default".into())));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_overrides() {
        let mut s = Settings::parse("# run\nepochs = 3\n\nlr_new=0.5 # fast\n").unwrap();
        assert_eq!(s.get::<usize>("epochs").unwrap(), Some(3));
        s.set("epochs", 7).unwrap();
        let c = s.train_config(Phase::Coarse).unwrap();
        assert_eq!((c.epochs, c.lr_new), (7, 0.5));
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(Settings::parse("epoch = 3").is_err());
        assert!(Settings::parse("epochs").is_err());
        let s = Settings::parse("epochs = many").unwrap();
        assert!(s.train_config(Phase::Coarse).is_err());
    }

    #[test]
    fn freeze_only_in_joint_phase() {
        let s = Settings::parse("freeze_stn = true").unwrap();
        assert!(s.train_config(Phase::Locnet).is_err());
        assert!(s.train_config(Phase::EndToEnd).unwrap().freeze_stn);
    }
}
