//! Joint training of the feature net, both heads and the propagation cell.
//!
//! `L = L_reid + lambda * (L_mask + L_remp)`, where `L_reid` is the OIM
//! loss of proposal embeddings, `L_mask` the pixel BCE of the mask head on
//! proposal boxes and `L_remp` the pixel BCE of teacher-forced propagation
//! steps into the next frame.

use std::fmt::Write as _;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{DyeError, Result};
use crate::features::feature_forward;
use crate::flow::{get_flow, warp_mask, FlowField, FlowMode};
use crate::kernels::Real;
use crate::mask::BBox;
use crate::model::{init_params, ModelDims};
use crate::reid::{embed_head_forward, mask_head_logits, roi_align_var, OimTable};
use crate::remp::{init_hidden_var, propagation_box, step_graph, RempConfig};
use crate::sequence::Sequence;
use crate::synth::{generate, random_spec, NUM_CLASSES};
use crate::tape::{ParamSource, Tape, Var};
use crate::tensor::{sgd_momentum_step, ParamStore, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lambda: f64,
    pub lr: f64,
    /// The learning rate is divided by this factor at every drop.
    pub lr_drop: f64,
    /// Steps between drops; `None` drops every third of the run.
    pub drop_every: Option<usize>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub iterations: usize,
    pub videos_per_batch: usize,
    pub frames_per_video: usize,
    /// Propagation steps per chain in `L_remp` (1..=3).
    pub unroll: usize,
    pub frozen: Vec<String>,
    pub seed: u64,
    pub tau: f64,
    pub mu: f64,
    /// Steps before the OIM table starts tracking embeddings.
    pub lut_warmup: usize,
    /// Proposal box jitter as a fraction of the box size.
    pub jitter: f32,
    /// Global gradient-norm cap; `None` disables clipping.
    pub clip: Option<f64>,
    pub dims: ModelDims,
    pub remp: RempConfig,
}

impl TrainConfig {
    /// Optimizer settings of the original large-scale recipe.
    pub fn full_scale() -> Self {
        TrainConfig {
            lambda: 1.0,
            lr: 1e-3,
            lr_drop: 10.0,
            drop_every: None,
            momentum: 0.9,
            weight_decay: 5e-4,
            iterations: 24_000,
            videos_per_batch: 8,
            frames_per_video: 4,
            unroll: 1,
            frozen: Vec::new(),
            seed: 0,
            tau: 0.1,
            mu: 0.5,
            lut_warmup: 0,
            jitter: 0.1,
            clip: None,
            dims: ModelDims::default(),
            remp: RempConfig::default(),
        }
    }

    /// Small-scale settings used on synthetic clips.
    pub fn desk() -> Self {
        TrainConfig {
            lr: 0.02,
            iterations: 2000,
            videos_per_batch: 2,
            frames_per_video: 4,
            unroll: 3,
            clip: Some(5.0),
            lut_warmup: 200,
            dims: ModelDims { feat_width: 32, feat_depth: 1, embed_dim: 32, hidden_dim: 32 },
            ..TrainConfig::full_scale()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(DyeError::Config(m.to_string()));
        if self.lambda < 0.0 || self.lr <= 0.0 || self.momentum < 0.0 || self.weight_decay < 0.0 {
            return bad("train.lambda, train.lr, train.momentum and train.weight_decay must be non-negative (lr positive)");
        }
        if self.lr_drop <= 1.0 {
            return bad("train.lr_drop must exceed 1");
        }
        if self.iterations == 0 || self.videos_per_batch == 0 {
            return bad("train.iterations and train.videos_per_batch must be positive");
        }
        if !(1..=3).contains(&self.unroll) {
            return bad("train.unroll must be 1, 2 or 3");
        }
        if self.frames_per_video < self.unroll + 1 {
            return bad("train.frames_per_video must exceed train.unroll");
        }
        if self.tau <= 0.0 || !(0.0..=1.0).contains(&self.mu) {
            return bad("reid.tau must be positive and reid.mu in [0, 1]");
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        let every = self.drop_every.unwrap_or_else(|| self.iterations.div_ceil(3)).max(1);
        self.lr / self.lr_drop.powi((step / every) as i32)
    }
}

/// Supervised box on a batch frame.
#[derive(Debug, Clone)]
pub struct RoiSample {
    pub frame: usize,
    pub bbox: BBox,
    pub target: Arc<Vec<f64>>,
    pub label: usize,
}

#[derive(Debug, Clone)]
pub struct PropStep {
    pub frame: usize,
    pub prev_box: BBox,
    pub cur_box: BBox,
    pub flow_reverse: FlowField,
    pub target: Arc<Vec<f64>>,
}

/// Teacher-forced propagation from a ground-truth mask.
#[derive(Debug, Clone)]
pub struct PropChain {
    pub frame: usize,
    pub init_box: BBox,
    pub init_mask: crate::mask::Mask,
    pub steps: Vec<PropStep>,
}

#[derive(Debug, Clone)]
pub struct TrainBatch {
    pub frames: Vec<Tensor>,
    pub rois: Vec<RoiSample>,
    pub chains: Vec<PropChain>,
}

fn jitter_box(b: &BBox, scale: f32, rng: &mut impl Rng, w: usize, h: usize) -> Option<BBox> {
    if scale == 0.0 {
        return Some(*b);
    }
    let mut j = |len: f32| rng.gen_range(-1.0f32..=1.0) * scale * len;
    let (bw, bh) = (b.width(), b.height());
    BBox::new(b.x0 + j(bw), b.y0 + j(bh), b.x1 + j(bw), b.y1 + j(bh)).clip(w, h)
}

/// Samples `videos_per_batch` windows of `frames_per_video` frames.
pub fn build_batch(dataset: &[Sequence], rng: &mut impl Rng, cfg: &TrainConfig) -> Result<TrainBatch> {
    if dataset.is_empty() {
        return Err(DyeError::contract("empty training set"));
    }
    let m = cfg.remp.roi_m;
    for _attempt in 0..64 {
        let mut batch = TrainBatch { frames: Vec::new(), rois: Vec::new(), chains: Vec::new() };
        for _ in 0..cfg.videos_per_batch {
            let seq = &dataset[rng.gen_range(0..dataset.len())];
            let classes = seq
                .classes
                .as_ref()
                .ok_or_else(|| DyeError::contract(format!("`{}` has no class labels", seq.name)))?;
            if seq.gt.is_none() {
                return Err(DyeError::contract(format!("`{}` has no masks", seq.name)));
            }
            let f = cfg.frames_per_video.min(seq.len());
            let s = rng.gen_range(1..=seq.len() - f + 1);
            let base = batch.frames.len();
            let (w, h) = (seq.width(), seq.height());
            for j in s..s + f {
                batch.frames.push(seq.frame(j)?.pixels.clone());
                for id in 1..=seq.num_instances() as u32 {
                    let g = seq.gt_mask(j, id).expect("gt present");
                    let Some(b) = g.bbox() else { continue };
                    let Some(b) = jitter_box(&b, cfg.jitter, rng, w, h) else { continue };
                    let label = *classes.get(id as usize - 1).ok_or_else(|| DyeError::contract("missing class"))?;
                    batch.rois.push(RoiSample {
                        frame: base + j - s,
                        bbox: b,
                        target: Arc::new(g.roi_target(&b, m)),
                        label,
                    });
                }
            }
            for id in 1..=seq.num_instances() as u32 {
                let g0 = seq.gt_mask(s, id).expect("gt present");
                let Some(init_box) = propagation_box(&g0, cfg.remp.box_margin) else { continue };
                let mut steps = Vec::new();
                let (mut prev_mask, mut prev_box) = (g0.clone(), init_box);
                for j in s + 1..=(s + cfg.unroll).min(s + f - 1) {
                    let flow = get_flow(seq, j, j - 1, FlowMode::GroundTruth)?;
                    let warped = warp_mask(&prev_mask, &flow)?;
                    let Some(cur_box) = propagation_box(&warped, cfg.remp.box_margin) else { break };
                    let g = seq.gt_mask(j, id).expect("gt present");
                    steps.push(PropStep {
                        frame: base + j - s,
                        prev_box,
                        cur_box,
                        flow_reverse: flow,
                        target: Arc::new(g.roi_target(&cur_box, m)),
                    });
                    if g.is_empty() {
                        break;
                    }
                    prev_mask = g;
                    prev_box = cur_box;
                }
                if !steps.is_empty() {
                    batch.chains.push(PropChain { frame: base, init_box, init_mask: g0, steps });
                }
            }
        }
        if !batch.rois.is_empty() && !batch.chains.is_empty() {
            return Ok(batch);
        }
    }
    Err(DyeError::contract("could not sample a batch with every supervision channel"))
}

/// Loss nodes of one batch.
#[derive(Debug, Clone)]
pub struct JointVars {
    pub total: Var,
    pub reid: Var,
    pub mask: Var,
    pub remp: Var,
    /// Proposal embeddings with their labels, for the table update.
    pub embeddings: Vec<(Var, usize)>,
}

pub fn joint_loss_graph<T: Real>(
    tape: &mut Tape<T>,
    batch: &TrainBatch,
    p: &(impl ParamSource + ?Sized),
    lut: &OimTable,
    cfg: &TrainConfig,
) -> Result<JointVars> {
    if batch.rois.is_empty() || batch.chains.is_empty() {
        return Err(DyeError::contract("batch lacks proposal or propagation supervision"));
    }
    let m = cfg.remp.roi_m;
    let lut_flat = lut.flat();
    let mut feats = Vec::with_capacity(batch.frames.len());
    for f in &batch.frames {
        let x = tape.leaf_tensor(f);
        feats.push(feature_forward(tape, x, p)?);
    }
    let mut reid_terms = Vec::new();
    let mut mask_terms = Vec::new();
    let mut embeddings = Vec::new();
    for r in &batch.rois {
        let roi = roi_align_var(tape, feats[r.frame], &r.bbox, m)?;
        let logits = mask_head_logits(tape, roi, p)?;
        mask_terms.push(tape.bce_with_logits(logits, Arc::clone(&r.target))?);
        let (e, _norm) = embed_head_forward(tape, roi, p)?;
        reid_terms.push(tape.oim(e, Arc::clone(&lut_flat), r.label, cfg.tau)?);
        embeddings.push((e, r.label));
    }
    let hidden = crate::remp::hidden_dim(p)?;
    let mut remp_terms = Vec::new();
    for c in &batch.chains {
        let mut h = init_hidden_var(tape, feats[c.frame], &c.init_box, &c.init_mask, m, hidden, p)?;
        for s in &c.steps {
            let g = step_graph(tape, feats[s.frame], h, &s.prev_box, &s.cur_box, &s.flow_reverse, p, &cfg.remp)?;
            remp_terms.push(tape.bce_with_logits(g.logits, Arc::clone(&s.target))?);
            h = g.h;
        }
    }
    let reid = tape.mean_of(&reid_terms)?;
    let mask = tape.mean_of(&mask_terms)?;
    let remp = tape.mean_of(&remp_terms)?;
    let supervised = tape.add(mask, remp)?;
    let weighted = tape.scale(supervised, cfg.lambda);
    let total = tape.add(reid, weighted)?;
    Ok(JointVars { total, reid, mask, remp, embeddings })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JointLoss {
    pub total: f64,
    pub reid: f64,
    pub mask: f64,
    pub remp: f64,
}

/// `reid + lambda * (mask + remp)`.
pub fn combine(reid: f64, mask: f64, remp: f64, lambda: f64) -> f64 {
    reid + lambda * (mask + remp)
}

pub fn compute_joint_loss(
    batch: &TrainBatch,
    params: &ParamStore,
    lut: &OimTable,
    cfg: &TrainConfig,
) -> Result<JointLoss> {
    let mut tape = Tape::<f32>::new();
    let v = joint_loss_graph(&mut tape, batch, params, lut, cfg)?;
    Ok(JointLoss {
        total: tape.scalar(v.total),
        reid: tape.scalar(v.reid),
        mask: tape.scalar(v.mask),
        remp: tape.scalar(v.remp),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub loss: JointLoss,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub params: ParamStore,
    pub curve: Vec<LossRecord>,
    pub lut: OimTable,
}

/// Loss curve as `step,L,L_reid,L_mask,L_remp`.
pub fn curve_csv(curve: &[LossRecord]) -> String {
    let mut s = String::from("step,L,L_reid,L_mask,L_remp\n");
    for r in curve {
        let l = r.loss;
        let _ = writeln!(s, "{},{:.6},{:.6},{:.6},{:.6}", r.step, l.total, l.reid, l.mask, l.remp);
    }
    s
}

pub fn clip_grads(store: &mut ParamStore, max_norm: f64) -> Result<()> {
    let norm = store
        .iter()
        .filter_map(|(_, t)| t.grad())
        .flat_map(|g| g.iter())
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let k = (max_norm / norm) as f32;
        let keys: Vec<String> = store.keys().map(str::to_string).collect();
        for key in keys {
            if let Some(g) = store.get_mut(&key)?.grad_mut() {
                g.iter_mut().for_each(|v| *v *= k);
            }
        }
    }
    Ok(())
}

/// One optimization step; returns the batch losses.
pub fn train_step(
    params: &mut ParamStore,
    lut: &mut OimTable,
    batch: &TrainBatch,
    cfg: &TrainConfig,
    step: usize,
) -> Result<JointLoss> {
    let mut tape = Tape::<f32>::new();
    let v = joint_loss_graph(&mut tape, batch, params, lut, cfg)?;
    let loss = JointLoss {
        total: tape.scalar(v.total),
        reid: tape.scalar(v.reid),
        mask: tape.scalar(v.mask),
        remp: tape.scalar(v.remp),
    };
    if !loss.total.is_finite() {
        return Err(DyeError::TrainingDiverged { step });
    }
    let grads = tape.backward(v.total);
    params.zero_grads();
    tape.accumulate_into(&grads, params)?;
    if let Some(c) = cfg.clip {
        clip_grads(params, c)?;
    }
    sgd_momentum_step(params, cfg.lr_at(step) as f32, cfg.momentum as f32, cfg.weight_decay as f32)?;
    if params.iter().any(|(_, t)| !t.all_finite()) {
        return Err(DyeError::TrainingDiverged { step });
    }
    for (e, label) in v.embeddings.iter().filter(|_| step >= cfg.lut_warmup) {
        let ev: Vec<f64> = tape.value(*e).iter().map(|x| x.as_f64()).collect();
        lut.update(*label, &ev, cfg.mu)?;
    }
    Ok(loss)
}

/// Runs `cfg.iterations` steps from freshly initialized weights.
pub fn train(dataset: &[Sequence], cfg: &TrainConfig) -> Result<TrainOutput> {
    train_with(dataset, cfg, init_params(cfg.dims, cfg.seed), |_| {})
}

/// Like [`train`] from given weights, reporting each step to `progress`.
pub fn train_with(
    dataset: &[Sequence],
    cfg: &TrainConfig,
    mut params: ParamStore,
    mut progress: impl FnMut(&LossRecord),
) -> Result<TrainOutput> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(DyeError::contract("empty training set"));
    }
    for k in &cfg.frozen {
        if !params.contains(k) {
            return Err(DyeError::Config(format!("cannot freeze unknown parameter `{k}`")));
        }
        params.freeze(k);
    }
    let rows = dataset
        .iter()
        .filter_map(|s| s.classes.as_ref())
        .flat_map(|c| c.iter().copied())
        .max()
        .map_or(NUM_CLASSES, |m| (m + 1).max(NUM_CLASSES));
    let dim = params.get("embed.fc.w")?.shape()[0];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7a11);
    let mut lut = OimTable::new(rows, dim, (0..rows * dim).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
    let mut curve = Vec::with_capacity(cfg.iterations);
    for step in 0..cfg.iterations {
        let batch = build_batch(dataset, &mut rng, cfg)?;
        let loss = train_step(&mut params, &mut lut, &batch, cfg, step)?;
        let rec = LossRecord { step, loss };
        progress(&rec);
        curve.push(rec);
    }
    Ok(TrainOutput { params, curve, lut })
}

/// Random synthetic clips for training.
pub fn synthetic_training_set(seed: u64, videos: usize, frames: usize, size: usize) -> Result<Vec<Sequence>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..videos)
        .map(|i| {
            let mut spec = random_spec(&mut rng, size, size, frames);
            spec.name = format!("train{i:03}");
            generate(&spec)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            iterations: 3,
            dims: ModelDims { feat_width: 6, feat_depth: 1, embed_dim: 8, hidden_dim: 4 },
            remp: RempConfig { roi_m: 7, ..RempConfig::default() },
            ..TrainConfig::desk()
        }
    }

    #[test]
    fn combine_formula() {
        assert_eq!(combine(1.0, 2.0, 3.0, 1.0), 6.0);
        assert_eq!(combine(1.5, 2.0, 3.0, 0.0), 1.5);
    }

    #[test]
    fn schedule_drops_every_third() {
        let c = TrainConfig { iterations: 9, ..TrainConfig::full_scale() };
        assert_eq!(c.lr_at(0), 1e-3);
        assert!((c.lr_at(3) - 1e-4).abs() < 1e-15);
        assert!((c.lr_at(8) - 1e-5).abs() < 1e-15);
    }

    #[test]
    fn same_seed_same_curve() {
        let data = synthetic_training_set(4, 3, 4, 32).unwrap();
        let cfg = tiny_cfg();
        let a = train(&data, &cfg).unwrap();
        let b = train(&data, &cfg).unwrap();
        assert_eq!(a.curve, b.curve);
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn frozen_keys_survive_training() {
        let data = synthetic_training_set(5, 2, 3, 32).unwrap();
        let cfg = TrainConfig { frozen: vec!["feat.conv1.w".into()], ..tiny_cfg() };
        let before = init_params(cfg.dims, cfg.seed);
        let out = train(&data, &cfg).unwrap();
        assert_eq!(out.params.get("feat.conv1.w").unwrap().data(), before.get("feat.conv1.w").unwrap().data());
        assert_ne!(out.params.get("feat.conv2.w").unwrap().data(), before.get("feat.conv2.w").unwrap().data());
    }

    #[test]
    fn divergence_is_reported() {
        let data = synthetic_training_set(6, 2, 3, 32).unwrap();
        let cfg = TrainConfig { lr: 1e30, clip: None, ..tiny_cfg() };
        assert!(matches!(train(&data, &cfg), Err(DyeError::TrainingDiverged { .. })));
    }

    #[test]
    fn missing_supervision_is_contract_error() {
        let cfg = tiny_cfg();
        let batch = TrainBatch { frames: vec![], rois: vec![], chains: vec![] };
        let p = init_params(cfg.dims, 0);
        let lut = OimTable::new(8, 8, vec![0.0; 64]).unwrap();
        assert!(compute_joint_loss(&batch, &p, &lut, &cfg).unwrap_err().is_contract());
    }
}
