//! The iterative re-identification / propagation loop.

use crate::error::{DyeError, Result};
use crate::features::FeatureCache;
use crate::flow::{FlowMode, FlowProvider};
use crate::linker::{link_tracklets, sort_starting_points, MaskTube, DEFAULT_THETA_AGREE, DEFAULT_THETA_SKIP};
use crate::mask::{paste_back, BBox, Mask};
use crate::proposals::{propose, ProposalConfig};
use crate::reid::{
    embed_head, identity_similarity, mask_head, match_templates, roi_align, Embedding, Provenance, StartingPoint,
    Template, TemplateSet, DEFAULT_RHO_REID,
};
use crate::remp::{PropagationContext, PropagationStats, RempConfig, Tracklet};
use crate::sequence::{LabelMap, Sequence};
use crate::tape::ParamSource;

#[derive(Debug, Clone, PartialEq)]
pub struct InferenceConfig {
    pub rho_reid: f32,
    pub rho_expand: f32,
    pub max_iters: usize,
    pub proposals: ProposalConfig,
    pub remp: RempConfig,
    pub theta_skip: f32,
    pub theta_agree: f32,
    pub flow_mode: FlowMode,
    /// Off: propagate the first-frame masks only (propagation-only ablation).
    pub reid: bool,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            rho_reid: DEFAULT_RHO_REID,
            rho_expand: DEFAULT_RHO_REID,
            max_iters: 4,
            proposals: ProposalConfig::default(),
            remp: RempConfig::default(),
            theta_skip: DEFAULT_THETA_SKIP,
            theta_agree: DEFAULT_THETA_AGREE,
            flow_mode: FlowMode::GroundTruth,
            reid: true,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho_reid > 0.0 && self.rho_reid < 1.0) {
            return Err(DyeError::Config(format!("reid.rho must lie in (0, 1), got {}", self.rho_reid)));
        }
        if self.max_iters == 0 {
            return Err(DyeError::Config("infer.max_iters must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationReport {
    pub iteration: usize,
    /// Proposals accepted by re-identification, before deduplication.
    pub matches: usize,
    /// Starting points actually propagated this iteration.
    pub new_starting_points: usize,
    pub tracklets: usize,
    pub templates: usize,
    /// Matches whose mask overlaps the ground truth of the assigned identity
    /// by IoU >= 0.5; `None` without ground truth.
    pub correct: Option<usize>,
    pub precision: Option<f64>,
    /// Fraction of visible ground-truth (frame, identity) pairs retrieved by
    /// a correct match in this or any earlier iteration.
    pub recall: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct InferenceOutput {
    pub tubes: Vec<MaskTube>,
    pub tracklets: Vec<Tracklet>,
    pub iterations: Vec<IterationReport>,
    pub templates: TemplateSet,
    pub stats: PropagationStats,
}

/// Proposal with its predicted mask and embedding.
#[derive(Debug, Clone)]
struct Candidate {
    frame: usize,
    mask: Mask,
    embedding: Embedding,
}

fn embed_mask(
    seq: &Sequence,
    cache: &FeatureCache,
    params: &(impl ParamSource + ?Sized),
    frame: usize,
    b: &BBox,
    m: usize,
) -> Result<Embedding> {
    let f = cache.get_or_compute(seq.frame(frame)?, params)?;
    embed_head(&roi_align(&f, b, m)?, params)
}

fn candidates(
    seq: &Sequence,
    cache: &FeatureCache,
    params: &(impl ParamSource + ?Sized),
    cfg: &InferenceConfig,
) -> Result<Vec<Candidate>> {
    let (w, h) = (seq.width(), seq.height());
    let m = cfg.remp.roi_m;
    let mut out = Vec::new();
    for j in 1..=seq.len() {
        let frame = seq.frame(j)?;
        let prev = if j > 1 { Some(seq.frame(j - 1)?) } else { None };
        let boxes = propose(frame, prev, seq.gt_frame(j), &cfg.proposals)?;
        if boxes.is_empty() {
            continue;
        }
        let f = cache.get_or_compute(frame, params)?;
        for b in boxes {
            let roi = roi_align(&f, &b, m)?;
            let logits = mask_head(&roi, params)?;
            let probs: Vec<f32> = logits.data().iter().map(|&v| crate::kernels::sigmoid(v as f64) as f32).collect();
            let mask = paste_back(&probs, m, &b, w, h);
            if mask.is_empty() {
                continue;
            }
            match embed_head(&roi, params) {
                Ok(embedding) => out.push(Candidate { frame: j, mask, embedding }),
                Err(DyeError::DegenerateEmbedding { .. }) => continue,
                Err(e) => return Err(e),
            }
        }
    }
    Ok(out)
}

/// Runs the full loop. `first_masks[k - 1]` is identity `k` on frame 1.
pub fn run_dyenet(
    seq: &Sequence,
    first_masks: &[Mask],
    params: &(impl ParamSource + ?Sized),
    cfg: &InferenceConfig,
) -> Result<InferenceOutput> {
    cfg.validate()?;
    seq.validate()?;
    if first_masks.is_empty() {
        return Err(DyeError::contract("no first-frame masks"));
    }
    for (i, a) in first_masks.iter().enumerate() {
        if a.width() != seq.width() || a.height() != seq.height() {
            return Err(DyeError::contract(format!("first-frame mask {} has the wrong size", i + 1)));
        }
        if a.is_empty() {
            return Err(DyeError::contract(format!("first-frame mask {} is empty", i + 1)));
        }
        if first_masks[..i].iter().any(|b| b.intersection(a) > 0) {
            return Err(DyeError::contract(format!("first-frame mask {} overlaps an earlier one", i + 1)));
        }
    }
    let k = first_masks.len() as u32;
    let m = cfg.remp.roi_m;
    let cache = FeatureCache::new();
    let flows = FlowProvider::new(cfg.flow_mode);

    let mut templates = TemplateSet::new((1..=k).collect());
    for (i, mask) in first_masks.iter().enumerate() {
        let b = mask.bbox().expect("non-empty");
        templates.add(Template {
            embedding: embed_mask(seq, &cache, params, 1, &b, m)?,
            identity: i as u32 + 1,
            provenance: Provenance::FirstFrame,
            frame: 1,
        })?;
    }

    let pool = if cfg.reid { candidates(seq, &cache, params, cfg)? } else { Vec::new() };
    let gt_visible: Option<Vec<(usize, u32, Mask)>> = seq.gt.as_ref().map(|_| {
        (1..=seq.len())
            .flat_map(|j| (1..=k).map(move |id| (j, id)))
            .filter_map(|(j, id)| seq.gt_mask(j, id).filter(|g| !g.is_empty()).map(|g| (j, id, g)))
            .collect()
    });
    let mut retrieved = vec![false; gt_visible.as_ref().map_or(0, Vec::len)];

    let mut ctx = PropagationContext {
        seq,
        features: &cache,
        flows: &flows,
        params,
        cfg: cfg.remp,
        stats: PropagationStats::default(),
    };
    let mut tracklets: Vec<Tracklet> = Vec::new();
    let mut tubes = Vec::new();
    let mut iterations = Vec::new();

    for iteration in 1..=cfg.max_iters {
        let mut starts: Vec<StartingPoint> = Vec::new();
        if iteration == 1 {
            starts.extend(first_masks.iter().enumerate().map(|(i, mask)| StartingPoint {
                mask: mask.clone(),
                frame: 1,
                identity: i as u32 + 1,
                similarity: 1.0,
            }));
        }
        let matched: Vec<StartingPoint> = pool
            .iter()
            .filter_map(|c| {
                match_templates(&c.embedding, &templates, cfg.rho_reid).map(|(identity, similarity)| StartingPoint {
                    mask: c.mask.clone(),
                    frame: c.frame,
                    identity,
                    similarity,
                })
            })
            .collect();

        let mut correct = None;
        if let Some(gt) = &gt_visible {
            let mut n = 0;
            for s in &matched {
                let Some(g) = seq.gt_mask(s.frame, s.identity) else { continue };
                if !g.is_empty() && s.mask.iou(&g) >= 0.5 {
                    n += 1;
                    if let Some(pos) = gt.iter().position(|(j, id, _)| *j == s.frame && *id == s.identity) {
                        retrieved[pos] = true;
                    }
                }
            }
            correct = Some(n);
        }
        let matches = matched.len();
        starts.extend(matched);
        sort_starting_points(&mut starts);

        let mut new_starts = 0;
        for s in starts {
            let covered = tracklets
                .iter()
                .filter_map(|t| t.mask_at(s.frame))
                .any(|mm| mm.iou(&s.mask) >= cfg.theta_skip);
            if covered {
                continue;
            }
            tracklets.push(ctx.propagate_bidirectional(&s)?);
            new_starts += 1;
        }

        if new_starts > 0 {
            tubes = link_tracklets(&tracklets, &templates, cfg.theta_agree)?;
            for tube in &tubes {
                for (&frame, mask) in &tube.masks {
                    if templates.contains(tube.identity, frame) {
                        continue;
                    }
                    let Some(b) = mask.bbox() else { continue };
                    let emb = match embed_mask(seq, &cache, params, frame, &b, m) {
                        Ok(e) => e,
                        Err(DyeError::DegenerateEmbedding { .. }) => continue,
                        Err(e) => return Err(e),
                    };
                    let sim = identity_similarity(&emb, &templates, tube.identity).unwrap_or(f32::NEG_INFINITY);
                    if sim >= cfg.rho_expand {
                        templates.add(Template {
                            embedding: emb,
                            identity: tube.identity,
                            provenance: Provenance::Expanded { iteration },
                            frame,
                        })?;
                    }
                }
            }
        }

        iterations.push(IterationReport {
            iteration,
            matches,
            new_starting_points: new_starts,
            tracklets: tracklets.len(),
            templates: templates.len(),
            correct,
            precision: correct.map(|c| if matches == 0 { 1.0 } else { c as f64 / matches as f64 }),
            recall: gt_visible.as_ref().map(|g| {
                if g.is_empty() {
                    1.0
                } else {
                    retrieved.iter().filter(|&&r| r).count() as f64 / g.len() as f64
                }
            }),
        });
        if new_starts == 0 || !cfg.reid {
            break;
        }
    }
    let stats = ctx.stats.clone();
    Ok(InferenceOutput { tubes, tracklets, iterations, templates, stats })
}

/// Per-frame label maps; where tubes overlap the lower identity wins.
pub fn tubes_to_labels(tubes: &[MaskTube], len: usize, width: usize, height: usize) -> Vec<LabelMap> {
    let mut out = vec![LabelMap::empty(width, height); len];
    let mut sorted: Vec<&MaskTube> = tubes.iter().collect();
    sorted.sort_by_key(|t| t.identity);
    for t in sorted.into_iter().rev() {
        for (&f, m) in &t.masks {
            let Some(l) = f.checked_sub(1).and_then(|i| out.get_mut(i)) else { continue };
            for y in 0..height.min(m.height()) {
                for x in 0..width.min(m.width()) {
                    if m.get(x, y) {
                        l.set(x, y, t.identity as u8);
                    }
                }
            }
        }
    }
    out
}

/// Splits per-frame label maps back into one tube per identity.
pub fn labels_to_tubes(labels: &[LabelMap]) -> Vec<MaskTube> {
    let k = labels.iter().map(|l| l.max_id()).max().unwrap_or(0);
    (1..=k)
        .map(|id| MaskTube {
            identity: id as u32,
            masks: labels
                .iter()
                .enumerate()
                .map(|(i, l)| (i + 1, l.mask(id)))
                .filter(|(_, m)| !m.is_empty())
                .collect(),
            tracklets: Vec::new(),
        })
        .collect()
}

/// Ground-truth masks of every instance on frame 1.
pub fn first_frame_masks(seq: &Sequence) -> Result<Vec<Mask>> {
    let gt = seq.gt_frame(1).ok_or_else(|| DyeError::MissingData(format!("`{}` has no masks", seq.name)))?;
    let k = seq.num_instances();
    Ok((1..=k as u8).map(|id| gt.mask(id)).collect())
}
