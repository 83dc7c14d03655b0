//! In-memory video sequences with optional ground truth.

use crate::error::{DyeError, Result};
use crate::features::Frame;
use crate::flow::FlowField;
use crate::mask::Mask;

/// Per-pixel instance ids, 0 for background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    width: usize,
    height: usize,
    ids: Vec<u8>,
}

impl LabelMap {
    pub fn new(width: usize, height: usize, ids: Vec<u8>) -> Result<Self> {
        if ids.len() != width * height {
            return Err(DyeError::contract("label map size mismatch"));
        }
        Ok(LabelMap { width, height, ids })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        LabelMap { width, height, ids: vec![0; width * height] }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn ids(&self) -> &[u8] {
        &self.ids
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.ids[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, id: u8) {
        self.ids[y * self.width + x] = id;
    }

    pub fn mask(&self, id: u8) -> Mask {
        Mask::from_bits(self.width, self.height, self.ids.iter().map(|&v| (v == id) as u8).collect())
            .expect("same size")
    }

    pub fn max_id(&self) -> u8 {
        self.ids.iter().copied().max().unwrap_or(0)
    }

    /// Sorted distinct non-zero ids.
    pub fn present_ids(&self) -> Vec<u8> {
        let mut seen = [false; 256];
        for &v in &self.ids {
            seen[v as usize] = true;
        }
        (1..=255u8).filter(|&i| seen[i as usize]).collect()
    }

    /// Grows to `w x h` with background.
    pub fn padded(&self, w: usize, h: usize) -> LabelMap {
        let mut out = LabelMap::empty(w, h);
        for y in 0..self.height.min(h) {
            for x in 0..self.width.min(w) {
                out.set(x, y, self.get(x, y));
            }
        }
        out
    }

    pub fn crop(&self, w: usize, h: usize) -> LabelMap {
        self.padded(w.min(self.width), h.min(self.height))
    }
}

/// Ordered frames of one video plus optional annotations and flows.
///
/// Frames are stored padded to multiples of 8; `original_size` keeps the
/// size before padding so metrics and outputs can be cropped back.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub name: String,
    pub frames: Vec<Frame>,
    pub gt: Option<Vec<LabelMap>>,
    /// `fw[i]` is the flow from frame `i` to `i + 1` (0-based), `None` for the last frame.
    pub flow_fw: Option<Vec<Option<FlowField>>>,
    /// `bw[i]` is the flow from frame `i` to `i - 1` (0-based), `None` for the first frame.
    pub flow_bw: Option<Vec<Option<FlowField>>>,
    pub original_size: (usize, usize),
    /// Appearance class of each instance id (entry `k - 1` for id `k`).
    pub classes: Option<Vec<usize>>,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn width(&self) -> usize {
        self.frames[0].width()
    }

    pub fn height(&self) -> usize {
        self.frames[0].height()
    }

    /// Frame by 1-based index.
    pub fn frame(&self, index: usize) -> Result<&Frame> {
        index
            .checked_sub(1)
            .and_then(|i| self.frames.get(i))
            .ok_or_else(|| DyeError::contract(format!("frame {index} outside 1..={}", self.len())))
    }

    /// Ground-truth label map of a 1-based frame.
    pub fn gt_frame(&self, index: usize) -> Option<&LabelMap> {
        self.gt.as_ref().and_then(|g| g.get(index.checked_sub(1)?))
    }

    /// Ground-truth mask of one instance on a 1-based frame.
    pub fn gt_mask(&self, index: usize, id: u32) -> Option<Mask> {
        self.gt_frame(index).map(|l| l.mask(id as u8))
    }

    /// Number of annotated instances (largest id over all frames).
    pub fn num_instances(&self) -> usize {
        self.gt
            .as_ref()
            .map(|g| g.iter().map(|l| l.max_id() as usize).max().unwrap_or(0))
            .unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames.is_empty() {
            return Err(DyeError::contract("sequence has no frames"));
        }
        let (w, h) = (self.width(), self.height());
        if self.frames.iter().any(|f| f.width() != w || f.height() != h) {
            return Err(DyeError::contract("frames differ in size"));
        }
        if let Some(gt) = &self.gt {
            if gt.len() != self.len() || gt.iter().any(|l| l.width() != w || l.height() != h) {
                return Err(DyeError::contract("ground truth does not match frames"));
            }
            let k = self.num_instances();
            let mut seen = vec![false; k + 1];
            for l in gt {
                for id in l.present_ids() {
                    seen[id as usize] = true;
                }
            }
            if let Some(gap) = (1..=k).find(|&i| !seen[i]) {
                return Err(DyeError::contract(format!(
                    "instance ids must be contiguous 1..={k}; id {gap} never appears"
                )));
            }
        }
        Ok(())
    }
}
