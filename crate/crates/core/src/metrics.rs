//! Region and boundary measures.

use std::fmt::Write as _;

use crate::error::{DyeError, Result};
use crate::mask::Mask;
use crate::sequence::LabelMap;

pub const DEFAULT_BOUNDARY_TOL: usize = 1;

fn same_dims(a: &Mask, b: &Mask) -> Result<()> {
    if a.same_dims(b) {
        Ok(())
    } else {
        Err(DyeError::contract(format!(
            "mask sizes differ: {}x{} vs {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )))
    }
}

/// Intersection over union; two empty masks score 1.
pub fn jaccard(pred: &Mask, gt: &Mask) -> Result<f64> {
    same_dims(pred, gt)?;
    let inter = pred.intersection(gt);
    let union = pred.area() + gt.area() - inter;
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Mask pixels with a 4-neighbour outside the mask (frame edge counts as outside).
pub fn boundary(m: &Mask) -> Mask {
    Mask::from_fn(m.width(), m.height(), |x, y| {
        let (x, y) = (x as isize, y as isize);
        m.get_signed(x, y)
            && !(m.get_signed(x - 1, y) && m.get_signed(x + 1, y) && m.get_signed(x, y - 1) && m.get_signed(x, y + 1))
    })
}

/// Square (Chebyshev) dilation by `r` pixels.
pub fn dilate(m: &Mask, r: usize) -> Mask {
    let r = r as isize;
    Mask::from_fn(m.width(), m.height(), |x, y| {
        (-r..=r).any(|dy| (-r..=r).any(|dx| m.get_signed(x as isize + dx, y as isize + dy)))
    })
}

/// Boundary F-measure with a `tol`-pixel match radius.
pub fn boundary_f(pred: &Mask, gt: &Mask, tol: usize) -> Result<f64> {
    same_dims(pred, gt)?;
    let (bp, bg) = (boundary(pred), boundary(gt));
    let (np, ng) = (bp.area(), bg.area());
    if np == 0 && ng == 0 {
        return Ok(1.0);
    }
    if np == 0 || ng == 0 {
        return Ok(0.0);
    }
    let precision = bp.intersection(&dilate(&bg, tol)) as f64 / np as f64;
    let recall = bg.intersection(&dilate(&bp, tol)) as f64 / ng as f64;
    Ok(if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) })
}

pub fn g_mean(j: f64, f: f64) -> f64 {
    (j + f) / 2.0
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstanceScore {
    pub identity: u32,
    pub j: f64,
    pub f: f64,
    pub g: f64,
    /// Absent from the ground truth on some evaluated frame.
    pub occluded: bool,
    /// Mean visible area under 5% of the frame.
    pub small: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub instances: Vec<InstanceScore>,
    pub mean_j: f64,
    pub mean_f: f64,
    pub mean_g: f64,
    /// Mean IoU over every (instance, frame) pair.
    pub miou: f64,
    /// (attribute, instance count, mean G)
    pub attributes: Vec<(String, usize, f64)>,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Scores predictions against ground truth over frames 2..=N.
///
/// Both lists hold one label map per frame and are cropped to `size`
/// first. Missing prediction frames count as empty.
pub fn evaluate(gt: &[LabelMap], pred: &[LabelMap], size: (usize, usize), tol: usize) -> Result<EvalReport> {
    if gt.is_empty() {
        return Err(DyeError::contract("no ground-truth frames"));
    }
    let (w, h) = size;
    let gt: Vec<LabelMap> = gt.iter().map(|l| l.crop(w, h)).collect();
    let pred: Vec<LabelMap> = (0..gt.len())
        .map(|i| pred.get(i).map(|l| l.crop(w, h)).unwrap_or_else(|| LabelMap::empty(w, h)))
        .collect();
    if pred.iter().any(|l| l.width() != w || l.height() != h) {
        return Err(DyeError::contract("prediction smaller than evaluation size"));
    }
    let k = gt.iter().map(|l| l.max_id()).max().unwrap_or(0);
    let frames: Vec<usize> = if gt.len() > 1 { (1..gt.len()).collect() } else { vec![0] };
    let mut instances = Vec::new();
    let mut all_iou = Vec::new();
    for id in 1..=k {
        let mut js = Vec::new();
        let mut fs = Vec::new();
        let mut occluded = false;
        let mut area = 0usize;
        for &i in &frames {
            let g = gt[i].mask(id);
            let p = pred[i].mask(id);
            occluded |= g.is_empty();
            area += g.area();
            js.push(jaccard(&p, &g)?);
            fs.push(boundary_f(&p, &g, tol)?);
        }
        all_iou.extend(js.iter().copied());
        let (j, f) = (mean(js.into_iter()), mean(fs.into_iter()));
        let small = (area as f64 / frames.len() as f64) < 0.05 * (w * h) as f64;
        instances.push(InstanceScore { identity: id as u32, j, f, g: g_mean(j, f), occluded, small });
    }
    let mut attributes = Vec::new();
    for (name, pick) in [("occluded", true), ("small", false)] {
        let sel: Vec<&InstanceScore> =
            instances.iter().filter(|s| if pick { s.occluded } else { s.small }).collect();
        attributes.push((name.to_string(), sel.len(), mean(sel.iter().map(|s| s.g))));
    }
    Ok(EvalReport {
        mean_j: mean(instances.iter().map(|s| s.j)),
        mean_f: mean(instances.iter().map(|s| s.f)),
        mean_g: mean(instances.iter().map(|s| s.g)),
        miou: mean(all_iou.into_iter()),
        instances,
        attributes,
    })
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("instance,J,F,G,occluded,small\n");
        for i in &self.instances {
            let _ = writeln!(s, "{},{:.6},{:.6},{:.6},{},{}", i.identity, i.j, i.f, i.g, i.occluded as u8, i.small as u8);
        }
        let _ = writeln!(s, "mean,{:.6},{:.6},{:.6},,", self.mean_j, self.mean_f, self.mean_g);
        let _ = writeln!(s, "miou,{:.6},,,,", self.miou);
        for (name, n, g) in &self.attributes {
            let _ = writeln!(s, "attr:{name},,,{g:.6},{n},");
        }
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = format!("{:<10}{:>8}{:>8}{:>8}\n", "instance", "J", "F", "G");
        for i in &self.instances {
            let mut tag = String::new();
            if i.occluded {
                tag.push_str(" occluded");
            }
            if i.small {
                tag.push_str(" small");
            }
            let _ = writeln!(s, "{:<10}{:>8.3}{:>8.3}{:>8.3}{tag}", i.identity, i.j, i.f, i.g);
        }
        let _ = writeln!(s, "{:<10}{:>8.3}{:>8.3}{:>8.3}", "mean", self.mean_j, self.mean_f, self.mean_g);
        let _ = writeln!(s, "mIoU {:.3}", self.miou);
        s
    }
}
