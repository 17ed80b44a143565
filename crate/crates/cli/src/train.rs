use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;

use anyhow::{Context, Result};

use stn_icnn::data::{load_helen, preprocess, split_ids, Preprocessed, Split};
use stn_icnn::train::{
    prepare, pretrain_coarse, pretrain_locnet, train_end_to_end, Checkpoint, EpochLog, Phase, TrainState,
};

use crate::config::Settings;
use crate::manifest::Manifest;
use crate::{Failure, TrainArgs};

pub const CHECKPOINT: &str = "model.ckpt";
pub const LOG: &str = "train.log";

fn command_name(phase: Phase) -> &'static str {
    match phase {
        Phase::Coarse => "pretrain-coarse",
        Phase::Locnet => "pretrain-loc",
        Phase::EndToEnd => "train-e2e",
    }
}

fn load_state(path: &Path) -> Result<TrainState> {
    let ckpt = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    Ok(TrainState::from_checkpoint(&ckpt)?)
}

/// Held-out samples for periodic scores; an absent or empty split disables them.
fn held_out(data: &Path, split: Option<Split>) -> Result<Option<Vec<Preprocessed>>> {
    let Some(split) = split else { return Ok(None) };
    match split_ids(data, split) {
        Ok(ids) if !ids.is_empty() => {}
        _ => return Ok(None),
    }
    let samples = load_helen(data, split)?;
    Ok(Some(samples.iter().map(preprocess).collect::<stn_icnn::Result<_>>()?))
}

pub fn run(phase: Phase, a: &TrainArgs) -> Result<()> {
    let settings = Settings::from_args(a)?;
    crate::init_threads(settings.get("threads")?)?;
    let mut cfg = settings.train_config(phase)?;

    let mut state = match (&a.resume, &a.from) {
        (Some(_), Some(_)) => return Err(Failure::Usage("pass either --resume or --from, not both".into()).into()),
        (Some(p), None) => {
            let s = load_state(p)?;
            if s.phase != phase {
                return Err(Failure::Usage(format!(
                    "{} holds a {} checkpoint; --resume continues the same phase",
                    p.display(),
                    s.phase.name()
                ))
                .into());
            }
            if !settings.has("seed") {
                cfg.seed = s.seed;
            }
            s
        }
        (None, Some(p)) => {
            let mut s = load_state(p)?;
            s.epoch = 0;
            s
        }
        (None, None) => match phase {
            Phase::Coarse => TrainState::new(settings.pipeline_config()?, &cfg)?,
            Phase::Locnet => return Err(Failure::Usage("coarse checkpoint required (pass --from)".into()).into()),
            Phase::EndToEnd => {
                return Err(Failure::Usage("coarse and locnet checkpoints required (pass --from)".into()).into())
            }
        },
    };
    state.begin(&cfg).map_err(|e| match e {
        stn_icnn::Error::Config(m) => anyhow::Error::from(Failure::Usage(m)),
        e => e.into(),
    })?;

    let mut m = Manifest::new(command_name(phase));
    m.set("data", a.data.display()).set("out", a.out.display());
    if let Some(p) = &a.resume {
        m.set("resume", p.display());
    }
    if let Some(p) = &a.from {
        m.set("from", p.display());
    }
    if let Some(p) = &a.config {
        m.set("config", p.display());
    }
    m.extend(settings.resolved(&cfg, &state.models.config));
    m.write(&a.out)?;

    let samples = load_helen(&a.data, Split::Train)?;
    if samples.is_empty() {
        return Err(Failure::Data(format!("no training samples under {}", a.data.display())).into());
    }
    let train = prepare(&samples, cfg.augment, cfg.seed)?;
    let eval = if cfg.eval_every > 0 { held_out(&a.data, settings.eval_split()?)? } else { None };

    let log_path = a.out.join(LOG);
    let mut log: File = if a.resume.is_some() {
        OpenOptions::new().create(true).append(true).open(&log_path)
    } else {
        File::create(&log_path)
    }
    .with_context(|| format!("opening {}", log_path.display()))?;
    let ckpt_path = a.out.join(CHECKPOINT);
    let mut observe = |rec: &EpochLog, s: &TrainState| -> stn_icnn::Result<()> {
        let line = rec.to_string();
        println!("{line}");
        writeln!(log, "{line}").map_err(|e| stn_icnn::Error::Io {
            path: log_path.clone(),
            source: e,
        })?;
        s.to_checkpoint().save(&ckpt_path)
    };

    let ev = eval.as_deref();
    let done = match phase {
        Phase::Coarse => pretrain_coarse(&mut state, &cfg, &train, ev, &mut observe)?,
        Phase::Locnet => pretrain_locnet(&mut state, &cfg, &train, ev, &mut observe)?,
        Phase::EndToEnd => train_end_to_end(&mut state, &cfg, &train, ev, &mut observe)?,
    };
    if done.is_empty() {
        // nothing left to run; still leave a checkpoint behind
        state.to_checkpoint().save(&ckpt_path)?;
    }
    Ok(())
}
