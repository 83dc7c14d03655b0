//! Set-enumeration reference for the boundary measure.

use std::collections::BTreeSet;

use dyenet_core::Mask;

type Pixels = BTreeSet<(isize, isize)>;

fn pixels(m: &Mask) -> Pixels {
    let mut s = Pixels::new();
    for y in 0..m.height() {
        for x in 0..m.width() {
            if m.get(x, y) {
                s.insert((x as isize, y as isize));
            }
        }
    }
    s
}

/// Foreground pixels with at least one 4-neighbour outside the set.
fn boundary_set(m: &Mask) -> Pixels {
    let fg = pixels(m);
    fg.iter()
        .filter(|&&(x, y)| [(x - 1, y), (x + 1, y), (x, y - 1), (x, y + 1)].iter().any(|p| !fg.contains(p)))
        .copied()
        .collect()
}

fn matched(from: &Pixels, to: &Pixels, tol: isize) -> usize {
    from.iter()
        .filter(|&&(x, y)| to.iter().any(|&(u, v)| (x - u).abs().max((y - v).abs()) <= tol))
        .count()
}

/// Boundary F by explicit enumeration of both boundary sets.
pub fn boundary_f_oracle(pred: &Mask, gt: &Mask, tol: usize) -> f64 {
    let (bp, bg) = (boundary_set(pred), boundary_set(gt));
    match (bp.is_empty(), bg.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let tol = tol as isize;
    let p = matched(&bp, &bg, tol) as f64 / bp.len() as f64;
    let r = matched(&bg, &bp, tol) as f64 / bg.len() as f64;
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

pub fn square(size: usize, x0: usize, y0: usize, side: usize) -> Mask {
    Mask::from_fn(size, size, |x, y| (x0..x0 + side).contains(&x) && (y0..y0 + side).contains(&y))
}
