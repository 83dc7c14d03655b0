//! Starting-point deduplication and greedy tracklet linking.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use crate::error::{DyeError, Result};
use crate::mask::Mask;
use crate::reid::{StartingPoint, TemplateSet};
use crate::remp::Tracklet;

pub const DEFAULT_THETA_SKIP: f32 = 0.8;
pub const DEFAULT_THETA_AGREE: f32 = 0.5;

/// Per-identity mask sequence over the whole video.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskTube {
    pub identity: u32,
    /// Frame (1-based) to mask; absent frames are uncovered.
    pub masks: BTreeMap<usize, Mask>,
    /// Indices into the linked tracklet list, in merge order.
    pub tracklets: Vec<usize>,
}

impl MaskTube {
    pub fn mask_at(&self, frame: usize) -> Option<&Mask> {
        self.masks.get(&frame)
    }
}

fn by_similarity(a_sim: f32, a_frame: usize, a_id: u32, b_sim: f32, b_frame: usize, b_id: u32) -> Ordering {
    b_sim
        .partial_cmp(&a_sim)
        .unwrap_or(Ordering::Equal)
        .then(a_frame.cmp(&b_frame))
        .then(a_id.cmp(&b_id))
}

/// Similarity descending; ties by lower frame, then lower identity.
pub fn sort_starting_points(starts: &mut [StartingPoint]) {
    starts.sort_by(|a, b| by_similarity(a.similarity, a.frame, a.identity, b.similarity, b.frame, b.identity));
}

/// Sorted starts minus those overlapping an existing same-frame mask by `theta_skip` or more.
pub fn dedup_starting_points(
    mut starts: Vec<StartingPoint>,
    existing: &[Tracklet],
    theta_skip: f32,
) -> Vec<StartingPoint> {
    sort_starting_points(&mut starts);
    starts.retain(|s| {
        !existing
            .iter()
            .filter_map(|t| t.mask_at(s.frame))
            .any(|m| m.iou(&s.mask) >= theta_skip)
    });
    starts
}

/// Visiting order used by the linker.
pub fn tracklet_order(tracklets: &[Tracklet]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..tracklets.len()).collect();
    order.sort_by(|&a, &b| {
        let (ta, tb) = (&tracklets[a], &tracklets[b]);
        by_similarity(
            ta.similarity(),
            ta.origin.frame,
            ta.identity,
            tb.similarity(),
            tb.origin.frame,
            tb.identity,
        )
        .then(a.cmp(&b))
    });
    order
}

/// True when the tracklet disagrees with the tube on some frame both cover.
pub fn contradicts(tube: &BTreeMap<usize, Mask>, t: &Tracklet, theta_agree: f32) -> bool {
    t.frames().any(|f| match (tube.get(&f), t.mask_at(f)) {
        (Some(a), Some(b)) => a.iou(b) < theta_agree,
        _ => false,
    })
}

/// Greedy linking: the best tracklet per identity seeds its tube, later
/// ones merge only without contradiction, the rest are discarded.
pub fn link_tracklets(tracklets: &[Tracklet], templates: &TemplateSet, theta_agree: f32) -> Result<Vec<MaskTube>> {
    if templates.is_empty() {
        return Err(DyeError::contract("linking needs a non-empty template set"));
    }
    let mut tubes: BTreeMap<u32, MaskTube> = BTreeMap::new();
    for i in tracklet_order(tracklets) {
        let t = &tracklets[i];
        if !templates.identities().contains(&t.identity) {
            continue;
        }
        let tube = tubes.entry(t.identity).or_insert_with(|| MaskTube {
            identity: t.identity,
            masks: BTreeMap::new(),
            tracklets: Vec::new(),
        });
        if contradicts(&tube.masks, t, theta_agree) {
            continue;
        }
        for f in t.frames() {
            tube.masks.entry(f).or_insert_with(|| t.masks[f - t.first].clone());
        }
        tube.tracklets.push(i);
    }
    Ok(tubes.into_values().collect())
}

/// Replays the contradiction rule: every contributing tracklet must agree
/// with the tube on all of its frames.
pub fn tube_is_consistent(tube: &MaskTube, tracklets: &[Tracklet], theta_agree: f32) -> bool {
    tube.tracklets.iter().all(|&i| {
        let t = &tracklets[i];
        t.identity == tube.identity && !contradicts(&tube.masks, t, theta_agree) && t.frames().all(|f| tube.masks.contains_key(&f))
    })
}
