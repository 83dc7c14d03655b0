//! Re-identification: RoIAlign, the mask and embedding heads, template
//! matching, and the OIM embedding loss.

use std::sync::Arc;

use crate::error::{DyeError, Result};
use crate::features::{FeatureMap, FEATURE_STRIDE};
use crate::kernels::{ConvGeom, Real};
use crate::mask::{BBox, Mask};
use crate::tape::{ParamSource, Tape, Var};
use crate::tensor::Tensor;

/// Default cosine threshold for accepting a proposal.
pub const DEFAULT_RHO_REID: f32 = 0.7;

/// Fixed-size feature crop of one box.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiFeature {
    pub tensor: Tensor,
    pub source: BBox,
    pub frame_index: usize,
}

/// Sampling points (feature index coordinates) of an `m x m` RoIAlign grid:
/// cell centres of `b`, divided by the feature stride, with pixel centres at
/// integer positions.
pub fn roi_points(b: &BBox, m: usize) -> Vec<(f64, f64)> {
    let s = FEATURE_STRIDE as f64;
    b.cell_centers(m).into_iter().map(|(x, y)| (x / s - 0.5, y / s - 0.5)).collect()
}

/// Records RoIAlign of `features` (a CxHxW node) on a tape.
pub fn roi_align_var<T: Real>(tape: &mut Tape<T>, features: Var, b: &BBox, m: usize) -> Result<Var> {
    tape.sample(features, Arc::new(roi_points(b, m)), m, m)
}

pub fn roi_align(feature: &FeatureMap, b: &BBox, m: usize) -> Result<RoiFeature> {
    if m < 2 {
        return Err(DyeError::contract("roi resolution must be at least 2"));
    }
    if !b.is_valid() {
        return Err(DyeError::contract(format!("invalid box {b:?}")));
    }
    let mut tape = Tape::<f32>::new();
    let f = tape.leaf_tensor(&feature.tensor);
    let r = roi_align_var(&mut tape, f, b, m)?;
    Ok(RoiFeature { tensor: tape.tensor(r), source: *b, frame_index: feature.frame_index })
}

fn conv<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    p: &(impl ParamSource + ?Sized),
    name: &str,
    geom: ConvGeom,
) -> Result<Var> {
    let w = tape.param(p, &format!("{name}.w"))?;
    let b = tape.param(p, &format!("{name}.b"))?;
    tape.conv2d(x, w, b, geom)
}

pub(crate) fn conv_relu<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    p: &(impl ParamSource + ?Sized),
    name: &str,
    geom: ConvGeom,
) -> Result<Var> {
    let y = conv(tape, x, p, name, geom)?;
    Ok(tape.relu(y))
}

pub(crate) fn conv_plain<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    p: &(impl ParamSource + ?Sized),
    name: &str,
    geom: ConvGeom,
) -> Result<Var> {
    conv(tape, x, p, name, geom)
}

const SAME3: ConvGeom = ConvGeom::same(3);

/// Mask sub-network: two stride-1 3x3 layers and a 1x1 output, as logits.
pub fn mask_head_logits<T: Real>(tape: &mut Tape<T>, roi: Var, p: &(impl ParamSource + ?Sized)) -> Result<Var> {
    let x = conv_relu(tape, roi, p, "mask.conv1", SAME3)?;
    let x = conv_relu(tape, x, p, "mask.conv2", SAME3)?;
    conv(tape, x, p, "mask.out", ConvGeom::same(1))
}

/// Per-cell foreground probabilities, `1 x m x m`.
pub fn mask_head(roi: &RoiFeature, params: &(impl ParamSource + ?Sized)) -> Result<Tensor> {
    let mut tape = Tape::<f32>::new();
    let x = tape.leaf_tensor(&roi.tensor);
    let l = mask_head_logits(&mut tape, x, params)?;
    let p = tape.sigmoid(l);
    Ok(tape.tensor(p))
}

/// Embedding sub-network: a stride-2 and a stride-1 3x3 layer, global
/// average pooling, a fully connected projection and L2 normalization.
/// Returns the unit embedding and its pre-normalization norm.
pub fn embed_head_forward<T: Real>(
    tape: &mut Tape<T>,
    roi: Var,
    p: &(impl ParamSource + ?Sized),
) -> Result<(Var, f64)> {
    let x = conv_relu(tape, roi, p, "embed.conv1", ConvGeom { stride: 2, dilation: 1, padding: 1 })?;
    let x = conv_relu(tape, x, p, "embed.conv2", SAME3)?;
    let pooled = tape.gap(x)?;
    let w = tape.param(p, "embed.fc.w")?;
    let b = tape.param(p, "embed.fc.b")?;
    let z = tape.linear(pooled, w, b)?;
    Ok(tape.l2_normalize(z))
}

/// Pre-normalization norms below this are rejected.
pub const MIN_EMBED_NORM: f64 = 1e-8;

/// Unit-norm identity embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(Vec<f32>);

impl Embedding {
    /// Normalizes `v`; fails when its norm is below [`MIN_EMBED_NORM`].
    pub fn normalized(v: Vec<f32>) -> Result<Self> {
        let norm = v.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        if norm < MIN_EMBED_NORM {
            return Err(DyeError::DegenerateEmbedding { norm });
        }
        Ok(Embedding(v.into_iter().map(|x| (x as f64 / norm) as f32).collect()))
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn cosine(&self, other: &Embedding) -> f32 {
        let dot: f64 = self.0.iter().zip(&other.0).map(|(a, b)| *a as f64 * *b as f64).sum();
        dot.clamp(-1.0, 1.0) as f32
    }
}

pub fn embed_head(roi: &RoiFeature, params: &(impl ParamSource + ?Sized)) -> Result<Embedding> {
    let mut tape = Tape::<f32>::new();
    let x = tape.leaf_tensor(&roi.tensor);
    let (e, norm) = embed_head_forward(&mut tape, x, params)?;
    if norm < MIN_EMBED_NORM {
        return Err(DyeError::DegenerateEmbedding { norm });
    }
    Ok(Embedding(tape.value(e).to_vec()))
}

/// Where a template came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    FirstFrame,
    Expanded { iteration: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Template {
    pub embedding: Embedding,
    pub identity: u32,
    pub provenance: Provenance,
    /// Frame the template was taken from.
    pub frame: usize,
}

/// Templates restricted to the identities declared by the first frame.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TemplateSet {
    identities: Vec<u32>,
    templates: Vec<Template>,
}

impl TemplateSet {
    pub fn new(mut identities: Vec<u32>) -> Self {
        identities.sort_unstable();
        identities.dedup();
        TemplateSet { identities, templates: Vec::new() }
    }

    pub fn identities(&self) -> &[u32] {
        &self.identities
    }

    pub fn add(&mut self, t: Template) -> Result<()> {
        if !self.identities.contains(&t.identity) {
            return Err(DyeError::contract(format!("template identity {} was not declared", t.identity)));
        }
        self.templates.push(t);
        Ok(())
    }

    pub fn contains(&self, identity: u32, frame: usize) -> bool {
        self.templates.iter().any(|t| t.identity == identity && t.frame == frame)
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Template> {
        self.templates.iter()
    }
}

/// Best template by cosine similarity, ties to the earliest template.
/// Accepted only when the best similarity exceeds `rho`.
pub fn match_templates(embedding: &Embedding, templates: &TemplateSet, rho: f32) -> Option<(u32, f32)> {
    let (id, sim) = best_match(embedding, templates)?;
    (sim > rho).then_some((id, sim))
}

/// Best template regardless of threshold.
pub fn best_match(embedding: &Embedding, templates: &TemplateSet) -> Option<(u32, f32)> {
    let mut best: Option<(u32, f32)> = None;
    for t in templates.iter() {
        let s = embedding.cosine(&t.embedding);
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((t.identity, s));
        }
    }
    best
}

/// Best similarity against templates of one identity.
pub fn identity_similarity(embedding: &Embedding, templates: &TemplateSet, identity: u32) -> Option<f32> {
    templates
        .iter()
        .filter(|t| t.identity == identity)
        .map(|t| embedding.cosine(&t.embedding))
        .fold(None, |acc: Option<f32>, s| Some(acc.map_or(s, |a| a.max(s))))
}

/// A proposal mask accepted as a seed for propagation.
#[derive(Debug, Clone, PartialEq)]
pub struct StartingPoint {
    pub mask: Mask,
    pub frame: usize,
    pub identity: u32,
    pub similarity: f32,
}

/// Per-identity running-mean embedding table of the OIM loss.
#[derive(Debug, Clone, PartialEq)]
pub struct OimTable {
    dim: usize,
    rows: Vec<f64>,
}

impl OimTable {
    pub fn new(rows: usize, dim: usize, rows_data: Vec<f64>) -> Result<Self> {
        if rows_data.len() != rows * dim {
            return Err(DyeError::contract("OIM table size mismatch"));
        }
        let mut t = OimTable { dim, rows: rows_data };
        for r in 0..rows {
            t.normalize_row(r);
        }
        Ok(t)
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let [r, d] = t.shape()[..] else { return Err(DyeError::contract("OIM table must be 2-D")) };
        OimTable::new(r, d, t.data().iter().map(|&v| v as f64).collect())
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[self.num_rows(), self.dim], self.rows.iter().map(|&v| v as f32).collect())
            .expect("consistent table")
    }

    pub fn num_rows(&self) -> usize {
        self.rows.len() / self.dim
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.rows[r * self.dim..(r + 1) * self.dim]
    }

    pub fn flat(&self) -> Arc<Vec<f64>> {
        Arc::new(self.rows.clone())
    }

    fn normalize_row(&mut self, r: usize) {
        let row = &mut self.rows[r * self.dim..(r + 1) * self.dim];
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.0 {
            row.iter_mut().for_each(|v| *v /= n);
        }
    }

    /// `row <- normalize(mu * row + (1 - mu) * embedding)`.
    pub fn update(&mut self, label: usize, embedding: &[f64], mu: f64) -> Result<()> {
        if label >= self.num_rows() {
            return Err(DyeError::contract(format!("unknown identity label {label}")));
        }
        let d = self.dim;
        for (v, e) in self.rows[label * d..(label + 1) * d].iter_mut().zip(embedding) {
            *v = mu * *v + (1.0 - mu) * e;
        }
        self.normalize_row(label);
        Ok(())
    }
}

/// Mean OIM loss of a batch of embeddings, followed by the momentum update
/// of each labelled row in sample order.
pub fn oim_loss(
    embeddings: &[Embedding],
    labels: &[usize],
    lut: &mut OimTable,
    tau: f64,
    mu: f64,
) -> Result<f64> {
    if embeddings.len() != labels.len() || embeddings.is_empty() {
        return Err(DyeError::contract("OIM needs one label per embedding"));
    }
    if tau <= 0.0 || !(0.0..1.0).contains(&mu) && mu != 1.0 {
        return Err(DyeError::contract("OIM needs tau > 0 and mu in [0, 1]"));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= lut.num_rows()) {
        return Err(DyeError::contract(format!("unknown identity label {l}")));
    }
    let flat = lut.flat();
    let mut total = 0.0;
    for (e, &l) in embeddings.iter().zip(labels) {
        let mut tape = Tape::<f64>::new();
        let v = tape.leaf_f32(&[e.dim()], e.as_slice())?;
        let loss = tape.oim(v, Arc::clone(&flat), l, tau)?;
        total += tape.scalar(loss);
    }
    for (e, &l) in embeddings.iter().zip(labels) {
        let ev: Vec<f64> = e.as_slice().iter().map(|&v| v as f64).collect();
        lut.update(l, &ev, mu)?;
    }
    Ok(total / embeddings.len() as f64)
}
