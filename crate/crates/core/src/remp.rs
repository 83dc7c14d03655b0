//! Recurrent mask propagation with region attention.
//!
//! One step carries a mask and a hidden state from frame `j-1` to frame `j`:
//!
//! 1. warp the previous mask with the reverse flow and take its box, grown
//!    by a margin;
//! 2. RoIAlign the frame features `x_j` over that box;
//! 3. warp the previous hidden state into the new box grid;
//! 4. `h_j = N_R(concat(h_warped, x_j))`;
//! 5. attention `a_j = softmax(conv(h_warped))` gates `h_j` channel-wise;
//! 6. `y_j = N_O(gated h_j)`, pasted back at frame resolution.
//!
//! Propagation stops when the warped or predicted mask falls below a
//! fraction of the starting mask's area.

use std::sync::Arc;

use crate::error::{DyeError, Result};
use crate::features::{FeatureCache, FeatureMap};
use crate::flow::{roi_warp_points, FlowField, FlowProvider};
use crate::kernels::{ConvGeom, Real};
use crate::mask::{paste_back, BBox, Mask};
use crate::reid::{conv_plain, conv_relu, roi_align_var, StartingPoint};
use crate::sequence::Sequence;
use crate::tape::{ParamSource, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RempConfig {
    /// Abort when an area drops below this fraction of the starting mask.
    pub theta_abort: f32,
    /// Box growth per side as a fraction of the box diagonal.
    pub box_margin: f32,
    /// Region attention on or off (ablation).
    pub attention: bool,
    pub roi_m: usize,
}

impl Default for RempConfig {
    fn default() -> Self {
        RempConfig { theta_abort: 0.1, box_margin: 0.2, attention: true, roi_m: 14 }
    }
}

/// Recurrent memory of one instance, living on the roi grid of `bbox`.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenState {
    pub tensor: Tensor,
    pub identity: u32,
    pub frame: usize,
    pub bbox: BBox,
}

/// Contiguous run of masks grown from one starting point.
#[derive(Debug, Clone, PartialEq)]
pub struct Tracklet {
    pub identity: u32,
    /// First covered frame (1-based).
    pub first: usize,
    pub masks: Vec<Mask>,
    pub origin: StartingPoint,
}

impl Tracklet {
    pub fn last(&self) -> usize {
        self.first + self.masks.len() - 1
    }

    pub fn covers(&self, frame: usize) -> bool {
        frame >= self.first && frame <= self.last()
    }

    pub fn mask_at(&self, frame: usize) -> Option<&Mask> {
        self.covers(frame).then(|| &self.masks[frame - self.first])
    }

    pub fn similarity(&self) -> f32 {
        self.origin.similarity
    }

    pub fn frames(&self) -> std::ops::RangeInclusive<usize> {
        self.first..=self.last()
    }
}

const SAME3: ConvGeom = ConvGeom::same(3);

/// Recurrent function `N_R`: two 3x3 layers with ReLU over the channel
/// concatenation of the warped state and the box features.
pub fn recurrent_cell<T: Real>(
    tape: &mut Tape<T>,
    h_warped: Var,
    x: Var,
    p: &(impl ParamSource + ?Sized),
) -> Result<Var> {
    let z = tape.concat(&[h_warped, x])?;
    let z = conv_relu(tape, z, p, "remp.nr1", SAME3)?;
    conv_relu(tape, z, p, "remp.nr2", SAME3)
}

/// Attention distribution from the warped state and the gated current state.
pub fn attention_gate_var<T: Real>(
    tape: &mut Tape<T>,
    h_warped: Var,
    h_current: Var,
    p: &(impl ParamSource + ?Sized),
) -> Result<(Var, Var)> {
    if tape.shape(h_warped)[1..] != tape.shape(h_current)[1..] {
        return Err(DyeError::contract("attention inputs differ in spatial size"));
    }
    let logits = conv_plain(tape, h_warped, p, "remp.att", SAME3)?;
    let a = tape.softmax(logits);
    let gated = tape.gate(h_current, a)?;
    Ok((a, gated))
}

pub fn attention_gate(
    h_warped: &HiddenState,
    h_current: &HiddenState,
    params: &(impl ParamSource + ?Sized),
) -> Result<(Tensor, HiddenState)> {
    let mut tape = Tape::<f32>::new();
    let hw = tape.leaf_tensor(&h_warped.tensor);
    let hc = tape.leaf_tensor(&h_current.tensor);
    let (a, g) = attention_gate_var(&mut tape, hw, hc, params)?;
    Ok((tape.tensor(a), HiddenState { tensor: tape.tensor(g), ..h_current.clone() }))
}

/// Output function `N_O`: three 3x3 layers producing mask logits.
///
/// With attention on, the gated state is rescaled by the number of roi
/// cells first, so a uniform attention map passes the state through
/// unchanged in magnitude.
pub fn output_logits<T: Real>(
    tape: &mut Tape<T>,
    h: Var,
    p: &(impl ParamSource + ?Sized),
    attention: bool,
) -> Result<Var> {
    let [_, mh, mw] = tape.shape(h)[..] else { return Err(DyeError::contract("hidden state must be 3-D")) };
    let z = if attention { tape.scale(h, (mh * mw) as f64) } else { h };
    let z = conv_relu(tape, z, p, "remp.no1", SAME3)?;
    let z = conv_relu(tape, z, p, "remp.no2", SAME3)?;
    conv_plain(tape, z, p, "remp.no3", SAME3)
}

/// Initial state at a starting frame: `N_R` applied to a zero prior state
/// and the box features masked by the starting mask.
pub fn init_hidden_var<T: Real>(
    tape: &mut Tape<T>,
    features: Var,
    bbox: &BBox,
    mask: &Mask,
    m: usize,
    hidden_dim: usize,
    p: &(impl ParamSource + ?Sized),
) -> Result<Var> {
    let x = roi_align_var(tape, features, bbox, m)?;
    let x = tape.mul_const(x, Arc::new(mask.roi_target(bbox, m)))?;
    let zero = tape.leaf(&[hidden_dim, m, m], vec![T::zero(); hidden_dim * m * m])?;
    recurrent_cell(tape, zero, x, p)
}

/// Nodes of one recorded propagation step.
#[derive(Debug, Clone, Copy)]
pub struct StepGraph {
    pub h_warped: Var,
    pub x: Var,
    pub h: Var,
    pub attention: Option<Var>,
    pub logits: Var,
}

/// Records one propagation step on a tape for a known target box.
#[allow(clippy::too_many_arguments)]
pub fn step_graph<T: Real>(
    tape: &mut Tape<T>,
    features: Var,
    h_prev: Var,
    prev_box: &BBox,
    cur_box: &BBox,
    flow_reverse: &FlowField,
    p: &(impl ParamSource + ?Sized),
    cfg: &RempConfig,
) -> Result<StepGraph> {
    let m = cfg.roi_m;
    let x = roi_align_var(tape, features, cur_box, m)?;
    let pts = Arc::new(roi_warp_points(flow_reverse, cur_box, prev_box, m));
    let h_warped = tape.sample(h_prev, pts, m, m)?;
    let h = recurrent_cell(tape, h_warped, x, p)?;
    let (attention, gated) = if cfg.attention {
        let (a, g) = attention_gate_var(tape, h_warped, h, p)?;
        (Some(a), g)
    } else {
        (None, h)
    };
    let logits = output_logits(tape, gated, p, cfg.attention)?;
    Ok(StepGraph { h_warped, x, h, attention, logits })
}

/// Box used for a mask at propagation time.
pub fn propagation_box(mask: &Mask, margin: f32) -> Option<BBox> {
    mask.bbox()?.dilate(margin).clip(mask.width(), mask.height())
}

/// Hidden width of a parameter set.
pub fn hidden_dim(params: &(impl ParamSource + ?Sized)) -> Result<usize> {
    match params.fetch("remp.nr2.w")? {
        crate::tape::ParamRef::F32(s, _) | crate::tape::ParamRef::F64(s, _) => Ok(s[0]),
    }
}

pub fn init_state(
    start: &StartingPoint,
    features: &FeatureMap,
    params: &(impl ParamSource + ?Sized),
    cfg: &RempConfig,
) -> Result<HiddenState> {
    let bbox = propagation_box(&start.mask, cfg.box_margin)
        .ok_or_else(|| DyeError::contract("starting point mask is empty"))?;
    let mut tape = Tape::<f32>::new();
    let f = tape.leaf_tensor(&features.tensor);
    let h = init_hidden_var(&mut tape, f, &bbox, &start.mask, cfg.roi_m, hidden_dim(params)?, params)?;
    Ok(HiddenState { tensor: tape.tensor(h), identity: start.identity, frame: start.frame, bbox })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AbortReason {
    WarpedTooSmall,
    PredictedTooSmall,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub mask: Mask,
    pub hidden: HiddenState,
    pub bbox: BBox,
    pub attention: Option<Tensor>,
    /// Roi-grid probabilities before thresholding.
    pub probs: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub enum StepOutcome {
    Continue(Box<StepOutput>),
    Abort(AbortReason),
}

/// One propagation step into the frame of `features`.
///
/// `flow_reverse` maps the target frame back to the previous one.
pub fn propagate_step(
    prev_mask: &Mask,
    h_prev: &HiddenState,
    features: &FeatureMap,
    flow_reverse: &FlowField,
    start_area: usize,
    params: &(impl ParamSource + ?Sized),
    cfg: &RempConfig,
) -> Result<StepOutcome> {
    if prev_mask.is_empty() {
        return Err(DyeError::contract("cannot propagate an empty mask"));
    }
    let min_area = cfg.theta_abort * start_area as f32;
    let warped = crate::flow::warp_mask(prev_mask, flow_reverse)?;
    if warped.is_empty() || (warped.area() as f32) < min_area {
        return Ok(StepOutcome::Abort(AbortReason::WarpedTooSmall));
    }
    let Some(bbox) = propagation_box(&warped, cfg.box_margin) else {
        return Ok(StepOutcome::Abort(AbortReason::WarpedTooSmall));
    };
    let mut tape = Tape::<f32>::new();
    let f = tape.leaf_tensor(&features.tensor);
    let hp = tape.leaf_tensor(&h_prev.tensor);
    let g = step_graph(&mut tape, f, hp, &h_prev.bbox, &bbox, flow_reverse, params, cfg)?;
    let probs_var = tape.sigmoid(g.logits);
    let probs = tape.tensor(probs_var);
    let mask = paste_back(probs.data(), cfg.roi_m, &bbox, prev_mask.width(), prev_mask.height());
    if mask.is_empty() || (mask.area() as f32) < min_area {
        return Ok(StepOutcome::Abort(AbortReason::PredictedTooSmall));
    }
    let hidden = HiddenState {
        tensor: tape.tensor(g.h),
        identity: h_prev.identity,
        frame: features.frame_index,
        bbox,
    };
    Ok(StepOutcome::Continue(Box::new(StepOutput {
        mask,
        hidden,
        bbox,
        attention: g.attention.map(|a| tape.tensor(a)),
        probs,
    })))
}

/// Counters gathered while propagating.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PropagationStats {
    pub steps: usize,
    pub aborts: usize,
    /// Largest `|sum(a) - 1|` over all attention maps seen.
    pub max_attention_error: f64,
}

/// Everything propagation needs from a sequence.
pub struct PropagationContext<'a, P: ParamSource + ?Sized> {
    pub seq: &'a Sequence,
    pub features: &'a FeatureCache,
    pub flows: &'a FlowProvider,
    pub params: &'a P,
    pub cfg: RempConfig,
    pub stats: PropagationStats,
}

impl<P: ParamSource + ?Sized> PropagationContext<'_, P> {
    fn run_direction(&mut self, start: &StartingPoint, init: &HiddenState, forward: bool) -> Result<Vec<Mask>> {
        let n = self.seq.len();
        let mut out = Vec::new();
        let mut prev_mask = start.mask.clone();
        let mut hidden = init.clone();
        let start_area = start.mask.area();
        let mut j = start.frame;
        loop {
            let next = if forward { j + 1 } else { j - 1 };
            if next == 0 || next > n {
                break;
            }
            let flow = self.flows.get(self.seq, next, j)?;
            let features = self.features.get_or_compute(self.seq.frame(next)?, self.params)?;
            match propagate_step(&prev_mask, &hidden, &features, &flow, start_area, self.params, &self.cfg)? {
                StepOutcome::Abort(_) => {
                    self.stats.aborts += 1;
                    break;
                }
                StepOutcome::Continue(step) => {
                    self.stats.steps += 1;
                    if let Some(a) = &step.attention {
                        let s: f64 = a.data().iter().map(|&v| v as f64).sum();
                        self.stats.max_attention_error = self.stats.max_attention_error.max((s - 1.0).abs());
                    }
                    prev_mask = step.mask.clone();
                    hidden = step.hidden;
                    out.push(step.mask);
                }
            }
            j = next;
        }
        Ok(out)
    }

    /// Grows a starting point forwards and backwards into a tracklet.
    pub fn propagate_bidirectional(&mut self, start: &StartingPoint) -> Result<Tracklet> {
        if start.mask.is_empty() {
            return Err(DyeError::contract("starting point mask is empty"));
        }
        let features = self.features.get_or_compute(self.seq.frame(start.frame)?, self.params)?;
        let init = init_state(start, &features, self.params, &self.cfg)?;
        let after = self.run_direction(start, &init, true)?;
        let mut before = self.run_direction(start, &init, false)?;
        before.reverse();
        let first = start.frame - before.len();
        let mut masks = before;
        masks.push(start.mask.clone());
        masks.extend(after);
        Ok(Tracklet { identity: start.identity, first, masks, origin: start.clone() })
    }
}
