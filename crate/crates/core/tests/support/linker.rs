//! Brute-force reference for tracklet linking.

use std::collections::BTreeMap;

use dyenet_core::linker::link_tracklets;
use dyenet_core::reid::{Embedding, Provenance, Template};
use dyenet_core::{Mask, StartingPoint, TemplateSet, Tracklet};
use rand::Rng;

const W: usize = 24;
const H: usize = 6;

fn bar(x: usize, len: usize) -> Mask {
    Mask::from_fn(W, H, |px, py| (x..x + len).contains(&px) && (1..5).contains(&py))
}

fn iou(a: &Mask, b: &Mask) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &q) in a.bits().iter().zip(b.bits()) {
        inter += (p != 0 && q != 0) as usize;
        union += (p != 0 || q != 0) as usize;
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Up to `max_n` tracklets over identities 1 and 2 on frames 1..=8. Bars
/// drift by a few pixels so some overlaps fall on each side of 0.5, and
/// similarities come from a coarse set so ties occur.
pub fn random_instance(rng: &mut impl Rng, max_n: usize) -> Vec<Tracklet> {
    let n = rng.gen_range(1..=max_n);
    (0..n)
        .map(|_| {
            let identity = rng.gen_range(1..=2u32);
            let first = rng.gen_range(1..=6usize);
            let len = rng.gen_range(1..=3usize);
            let x0 = rng.gen_range(0..8usize);
            let masks: Vec<Mask> = (0..len).map(|_| bar(x0 + rng.gen_range(0..6), 8)).collect();
            let similarity = [0.6f32, 0.7, 0.8, 0.9][rng.gen_range(0..4)];
            let origin = StartingPoint { mask: masks[0].clone(), frame: first, identity, similarity };
            Tracklet { identity, first, masks, origin }
        })
        .collect()
}

pub fn templates() -> TemplateSet {
    let mut t = TemplateSet::new(vec![1, 2]);
    for identity in [1, 2] {
        let v = if identity == 1 { vec![1.0, 0.0] } else { vec![0.0, 1.0] };
        t.add(Template {
            embedding: Embedding::normalized(v).unwrap(),
            identity,
            provenance: Provenance::FirstFrame,
            frame: 1,
        })
        .unwrap();
    }
    t
}

/// Priority order: similarity descending, then start frame, identity and
/// input position ascending.
fn ranked(tracklets: &[Tracklet], members: &[usize]) -> Vec<usize> {
    let mut order = members.to_vec();
    order.sort_by(|&a, &b| {
        let (ta, tb) = (&tracklets[a], &tracklets[b]);
        tb.origin
            .similarity
            .total_cmp(&ta.origin.similarity)
            .then(ta.origin.frame.cmp(&tb.origin.frame))
            .then(ta.identity.cmp(&tb.identity))
            .then(a.cmp(&b))
    });
    order
}

/// Tube built from `members`, the highest-priority member owning each frame.
pub fn build_tube(tracklets: &[Tracklet], members: &[usize]) -> BTreeMap<usize, Mask> {
    let mut tube = BTreeMap::new();
    for i in ranked(tracklets, members) {
        let t = &tracklets[i];
        for (k, m) in t.masks.iter().enumerate() {
            tube.entry(t.first + k).or_insert_with(|| m.clone());
        }
    }
    tube
}

/// A member set is valid when every member agrees with the merged tube on
/// each of its frames.
pub fn is_valid(tracklets: &[Tracklet], members: &[usize], theta: f64) -> bool {
    let tube = build_tube(tracklets, members);
    members.iter().all(|&i| {
        let t = &tracklets[i];
        t.masks.iter().enumerate().all(|(k, m)| iou(&tube[&(t.first + k)], m) >= theta)
    })
}

#[derive(Debug, Default, Clone, Copy)]
pub struct Verdict {
    pub identities: usize,
    /// Identities where greedy reached the best valid total similarity.
    pub optimal: usize,
}

/// Runs the linker on one instance and checks it against exhaustive
/// enumeration of member subsets per identity.
pub fn check_instance(tracklets: &[Tracklet], theta: f32) -> Result<Verdict, String> {
    let templates = templates();
    let tubes = link_tracklets(tracklets, &templates, theta).map_err(|e| e.to_string())?;
    let again = link_tracklets(tracklets, &templates, theta).map_err(|e| e.to_string())?;
    if tubes != again {
        return Err("linker is not deterministic".into());
    }
    let theta = theta as f64;
    let mut verdict = Verdict::default();
    for identity in [1u32, 2] {
        let own: Vec<usize> = (0..tracklets.len()).filter(|&i| tracklets[i].identity == identity).collect();
        let tube = tubes.iter().find(|t| t.identity == identity);
        if own.is_empty() {
            if tube.is_some_and(|t| !t.masks.is_empty()) {
                return Err(format!("identity {identity} has a tube but no tracklets"));
            }
            continue;
        }
        let tube = tube.ok_or_else(|| format!("identity {identity} lost its tube"))?;
        let mut chosen = tube.tracklets.clone();
        chosen.sort_unstable();
        if !is_valid(tracklets, &chosen, theta) {
            return Err(format!("identity {identity}: greedy set {chosen:?} contradicts itself"));
        }
        if build_tube(tracklets, &chosen) != tube.masks {
            return Err(format!("identity {identity}: tube masks differ from the replayed merge"));
        }
        for &i in &own {
            if chosen.contains(&i) {
                continue;
            }
            let mut with = chosen.clone();
            with.push(i);
            if is_valid(tracklets, &with, theta) {
                return Err(format!("identity {identity}: tracklet {i} was dropped without a contradiction"));
            }
        }
        let total = |s: &[usize]| s.iter().map(|&i| tracklets[i].origin.similarity as f64).sum::<f64>();
        let mut best = f64::NEG_INFINITY;
        for bits in 1u32..(1 << own.len()) {
            let subset: Vec<usize> = own.iter().enumerate().filter(|(k, _)| bits >> k & 1 == 1).map(|(_, &i)| i).collect();
            if is_valid(tracklets, &subset, theta) {
                best = best.max(total(&subset));
            }
        }
        let greedy = total(&chosen);
        if greedy > best + 1e-9 {
            return Err(format!("identity {identity}: greedy total {greedy} beats the enumerator's {best}"));
        }
        verdict.identities += 1;
        verdict.optimal += ((best - greedy).abs() < 1e-9) as usize;
    }
    Ok(verdict)
}
