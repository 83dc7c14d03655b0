//! Flat `key = value` run configuration.
//!
//! Lines starting with `#` are comments. Later assignments win, so command
//! line overrides are applied with [`Config::set`] after loading the file.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{DyeError, Result};
use crate::inference::InferenceConfig;
use crate::metrics::DEFAULT_BOUNDARY_TOL;
use crate::trainer::TrainConfig;

/// Every recognised key with a one-line description, in documentation order.
pub const KEYS: &[(&str, &str)] = &[
    ("feat.width", "backbone channel width"),
    ("feat.depth", "dilated blocks after the stride-8 stem"),
    ("proposals.mode", "frame-diff | gt-jitter | exhaustive-grid"),
    ("proposals.diff_threshold", "frame-diff change threshold on [0,1] pixels"),
    ("proposals.jitter_scale", "gt-jitter edge noise as a fraction of box size"),
    ("proposals.anchor_sizes", "exhaustive-grid anchor sides, comma separated"),
    ("proposals.anchor_stride", "exhaustive-grid anchor step in pixels"),
    ("proposals.seed", "gt-jitter noise seed"),
    ("reid.rho", "cosine threshold for a template match"),
    ("reid.embed_dim", "embedding width"),
    ("reid.roi_m", "roi grid side shared by all heads"),
    ("reid.tau", "OIM temperature"),
    ("reid.mu", "OIM table momentum"),
    ("remp.theta_abort", "abort fraction of the starting mask area"),
    ("remp.box_margin", "propagation box growth per side, fraction of the diagonal"),
    ("remp.hidden_dim", "recurrent state width"),
    ("remp.attention", "on | off"),
    ("link.theta_skip", "IoU above which a starting point is already covered"),
    ("link.theta_agree", "IoU below which two masks on a frame contradict"),
    ("infer.rho_expand", "similarity needed to add a template"),
    ("infer.max_iters", "upper bound on re-identification passes"),
    ("infer.reid", "on | off (off = propagation only)"),
    ("flow.mode", "ground-truth | block-match | zero"),
    ("train.lambda", "weight of the mask and propagation losses"),
    ("train.lr", "initial learning rate"),
    ("train.lr_drop", "learning-rate divisor at each drop"),
    ("train.drop_every", "steps between drops, or `auto` for thirds"),
    ("train.momentum", "SGD momentum"),
    ("train.weight_decay", "SGD weight decay"),
    ("train.iterations", "optimizer steps"),
    ("train.videos_per_batch", "clips per batch"),
    ("train.frames_per_video", "consecutive frames per clip"),
    ("train.unroll", "propagation steps per chain, 1 to 3"),
    ("train.frozen", "parameter keys excluded from updates, comma separated"),
    ("train.seed", "initialization and sampling seed"),
    ("train.jitter", "training box noise as a fraction of box size"),
    ("train.clip", "gradient norm cap, or `none`"),
    ("train.lut_warmup", "steps before the OIM table tracks embeddings"),
    ("eval.boundary_tol", "boundary match radius in pixels"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub infer: InferenceConfig,
    pub train: TrainConfig,
    pub boundary_tol: usize,
}

impl Default for Config {
    fn default() -> Self {
        let train = TrainConfig::desk();
        let infer = InferenceConfig { remp: train.remp, ..InferenceConfig::default() };
        Config { infer, train, boundary_tol: DEFAULT_BOUNDARY_TOL }
    }
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| DyeError::Config(format!("{key}: cannot parse `{v}`")))
}

fn switch(key: &str, v: &str) -> Result<bool> {
    match v {
        "on" | "true" | "1" => Ok(true),
        "off" | "false" | "0" => Ok(false),
        _ => Err(DyeError::Config(format!("{key}: expected on or off, got `{v}`"))),
    }
}

fn on_off(b: bool) -> &'static str {
    if b {
        "on"
    } else {
        "off"
    }
}

fn list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(|s| num(key, s)).collect()
}

impl Config {
    pub fn parse(text: &str) -> Result<Config> {
        let mut c = Config::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| DyeError::Config(format!("line {}: expected key = value", n + 1)))?;
            c.set(k.trim(), v.trim())?;
        }
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| DyeError::Load { path: path.to_path_buf(), msg: e.to_string() })?;
        Config::parse(&text)
    }

    /// Applies one assignment; `remp.*` and `reid.roi_m` reach both training and inference.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let t = &mut self.train;
        let i = &mut self.infer;
        match key {
            "feat.width" => t.dims.feat_width = num(key, v)?,
            "feat.depth" => t.dims.feat_depth = num(key, v)?,
            "proposals.mode" => i.proposals.mode = v.parse()?,
            "proposals.diff_threshold" => i.proposals.diff_threshold = num(key, v)?,
            "proposals.jitter_scale" => i.proposals.jitter_scale = num(key, v)?,
            "proposals.anchor_sizes" => i.proposals.anchor_sizes = list(key, v)?,
            "proposals.anchor_stride" => i.proposals.anchor_stride = num(key, v)?,
            "proposals.seed" => i.proposals.seed = num(key, v)?,
            "reid.rho" => i.rho_reid = num(key, v)?,
            "reid.embed_dim" => t.dims.embed_dim = num(key, v)?,
            "reid.roi_m" => {
                t.remp.roi_m = num(key, v)?;
                i.remp.roi_m = t.remp.roi_m;
            }
            "reid.tau" => t.tau = num(key, v)?,
            "reid.mu" => t.mu = num(key, v)?,
            "remp.theta_abort" => {
                t.remp.theta_abort = num(key, v)?;
                i.remp.theta_abort = t.remp.theta_abort;
            }
            "remp.box_margin" => {
                t.remp.box_margin = num(key, v)?;
                i.remp.box_margin = t.remp.box_margin;
            }
            "remp.hidden_dim" => t.dims.hidden_dim = num(key, v)?,
            "remp.attention" => {
                t.remp.attention = switch(key, v)?;
                i.remp.attention = t.remp.attention;
            }
            "link.theta_skip" => i.theta_skip = num(key, v)?,
            "link.theta_agree" => i.theta_agree = num(key, v)?,
            "infer.rho_expand" => i.rho_expand = num(key, v)?,
            "infer.max_iters" => i.max_iters = num(key, v)?,
            "infer.reid" => i.reid = switch(key, v)?,
            "flow.mode" => i.flow_mode = v.parse()?,
            "train.lambda" => t.lambda = num(key, v)?,
            "train.lr" => t.lr = num(key, v)?,
            "train.lr_drop" => t.lr_drop = num(key, v)?,
            "train.drop_every" => t.drop_every = if v == "auto" { None } else { Some(num(key, v)?) },
            "train.momentum" => t.momentum = num(key, v)?,
            "train.weight_decay" => t.weight_decay = num(key, v)?,
            "train.iterations" => t.iterations = num(key, v)?,
            "train.videos_per_batch" => t.videos_per_batch = num(key, v)?,
            "train.frames_per_video" => t.frames_per_video = num(key, v)?,
            "train.unroll" => t.unroll = num(key, v)?,
            "train.frozen" => t.frozen = list(key, v)?,
            "train.seed" => t.seed = num(key, v)?,
            "train.jitter" => t.jitter = num(key, v)?,
            "train.clip" => t.clip = if v == "none" { None } else { Some(num(key, v)?) },
            "train.lut_warmup" => t.lut_warmup = num(key, v)?,
            "eval.boundary_tol" => self.boundary_tol = num(key, v)?,
            _ => return Err(DyeError::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Current value of a key, formatted so that `set(key, get(key))` is a no-op.
    pub fn get(&self, key: &str) -> Result<String> {
        let t = &self.train;
        let i = &self.infer;
        let join = |v: &[String]| v.join(",");
        Ok(match key {
            "feat.width" => t.dims.feat_width.to_string(),
            "feat.depth" => t.dims.feat_depth.to_string(),
            "proposals.mode" => i.proposals.mode.name().to_string(),
            "proposals.diff_threshold" => i.proposals.diff_threshold.to_string(),
            "proposals.jitter_scale" => i.proposals.jitter_scale.to_string(),
            "proposals.anchor_sizes" => {
                join(&i.proposals.anchor_sizes.iter().map(|a| a.to_string()).collect::<Vec<_>>())
            }
            "proposals.anchor_stride" => i.proposals.anchor_stride.to_string(),
            "proposals.seed" => i.proposals.seed.to_string(),
            "reid.rho" => i.rho_reid.to_string(),
            "reid.embed_dim" => t.dims.embed_dim.to_string(),
            "reid.roi_m" => t.remp.roi_m.to_string(),
            "reid.tau" => t.tau.to_string(),
            "reid.mu" => t.mu.to_string(),
            "remp.theta_abort" => t.remp.theta_abort.to_string(),
            "remp.box_margin" => t.remp.box_margin.to_string(),
            "remp.hidden_dim" => t.dims.hidden_dim.to_string(),
            "remp.attention" => on_off(t.remp.attention).to_string(),
            "link.theta_skip" => i.theta_skip.to_string(),
            "link.theta_agree" => i.theta_agree.to_string(),
            "infer.rho_expand" => i.rho_expand.to_string(),
            "infer.max_iters" => i.max_iters.to_string(),
            "infer.reid" => on_off(i.reid).to_string(),
            "flow.mode" => i.flow_mode.name().to_string(),
            "train.lambda" => t.lambda.to_string(),
            "train.lr" => t.lr.to_string(),
            "train.lr_drop" => t.lr_drop.to_string(),
            "train.drop_every" => t.drop_every.map_or("auto".to_string(), |d| d.to_string()),
            "train.momentum" => t.momentum.to_string(),
            "train.weight_decay" => t.weight_decay.to_string(),
            "train.iterations" => t.iterations.to_string(),
            "train.videos_per_batch" => t.videos_per_batch.to_string(),
            "train.frames_per_video" => t.frames_per_video.to_string(),
            "train.unroll" => t.unroll.to_string(),
            "train.frozen" => join(&t.frozen),
            "train.seed" => t.seed.to_string(),
            "train.jitter" => t.jitter.to_string(),
            "train.clip" => t.clip.map_or("none".to_string(), |c| c.to_string()),
            "train.lut_warmup" => t.lut_warmup.to_string(),
            "eval.boundary_tol" => self.boundary_tol.to_string(),
            _ => return Err(DyeError::Config(format!("unknown key `{key}`"))),
        })
    }

    /// Full configuration in file syntax.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, doc) in KEYS {
            let _ = writeln!(s, "# {doc}");
            let _ = writeln!(s, "{k} = {}", self.get(k).expect("listed key"));
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.infer.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dump_parses_back_to_itself() {
        let mut c = Config::default();
        c.set("train.clip", "none").unwrap();
        c.set("train.frozen", "feat.c1.w, feat.c1.b").unwrap();
        c.set("remp.attention", "off").unwrap();
        assert_eq!(Config::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn every_key_is_settable() {
        let mut c = Config::default();
        for (k, _) in KEYS {
            let v = c.get(k).unwrap();
            c.set(k, &v).unwrap();
        }
        assert_eq!(c, Config::default());
    }

    #[test]
    fn shared_keys_reach_inference() {
        let c = Config::parse("remp.box_margin = 0.3\nreid.roi_m=10\n# comment\n").unwrap();
        assert_eq!(c.infer.remp.box_margin, 0.3);
        assert_eq!(c.infer.remp.roi_m, 10);
        assert_eq!(c.train.remp.roi_m, 10);
    }

    #[test]
    fn bad_input_is_a_config_error() {
        assert!(matches!(Config::parse("nope = 1"), Err(DyeError::Config(_))));
        assert!(matches!(Config::parse("train.lr"), Err(DyeError::Config(_))));
        assert!(matches!(Config::parse("train.lr = fast"), Err(DyeError::Config(_))));
        assert!(matches!(Config::parse("remp.attention = maybe"), Err(DyeError::Config(_))));
    }
}
