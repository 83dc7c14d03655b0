//! Coloured mask overlays.

use std::fs;
use std::path::Path;

use crate::error::{DyeError, Result};
use crate::io::pnm::encode_ppm;
use crate::io::seqdir::frame_to_rgb;
use crate::linker::MaskTube;
use crate::sequence::Sequence;

pub const OVERLAY_ALPHA: f32 = 0.5;

/// Identity `k` uses entry `(k - 1) % 8`; identity 1 is always (230, 25, 75).
pub const OVERLAY_PALETTE: [[u8; 3]; 8] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
];

pub fn identity_color(identity: u32) -> [u8; 3] {
    OVERLAY_PALETTE[(identity.max(1) as usize - 1) % OVERLAY_PALETTE.len()]
}

/// Blended RGB bytes per frame at the sequence's original size.
pub fn overlay_frames(seq: &Sequence, tubes: &[MaskTube]) -> Result<Vec<Vec<u8>>> {
    let n = seq.len();
    for t in tubes {
        if let Some((&f, _)) = t.masks.iter().find(|(&f, _)| f == 0 || f > n) {
            return Err(DyeError::contract(format!("tube {} has frame {f} outside 1..={n}", t.identity)));
        }
    }
    let (w, h) = seq.original_size;
    let mut out = Vec::with_capacity(n);
    for (i, frame) in seq.frames.iter().enumerate() {
        let mut rgb = frame_to_rgb(frame, w, h);
        for t in tubes {
            let Some(m) = t.mask_at(i + 1) else { continue };
            let c = identity_color(t.identity);
            for y in 0..h {
                for x in 0..w {
                    if m.get(x, y) {
                        let p = &mut rgb[(y * w + x) * 3..(y * w + x) * 3 + 3];
                        for k in 0..3 {
                            p[k] = ((1.0 - OVERLAY_ALPHA) * p[k] as f32 + OVERLAY_ALPHA * c[k] as f32).round() as u8;
                        }
                    }
                }
            }
        }
        out.push(rgb);
    }
    Ok(out)
}

/// Writes `<dir>/00001.ppm ...`.
pub fn render_overlay(seq: &Sequence, tubes: &[MaskTube], dir: &Path) -> Result<()> {
    let frames = overlay_frames(seq, tubes)?;
    fs::create_dir_all(dir)?;
    let (w, h) = seq.original_size;
    for (i, rgb) in frames.iter().enumerate() {
        fs::write(dir.join(format!("{:05}.ppm", i + 1)), encode_ppm(w, h, rgb))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::Mask;
    use crate::synth::{generate, easy_clip};
    use std::collections::BTreeMap;

    #[test]
    fn empty_tubes_leave_frames_unchanged() {
        let seq = generate(&easy_clip(1, 3)).unwrap();
        let out = overlay_frames(&seq, &[]).unwrap();
        for (i, rgb) in out.iter().enumerate() {
            assert_eq!(rgb, &frame_to_rgb(&seq.frames[i], 64, 64));
        }
    }

    #[test]
    fn blends_fixed_colour() {
        let seq = generate(&easy_clip(1, 2)).unwrap();
        let mut masks = BTreeMap::new();
        masks.insert(1, Mask::from_fn(64, 64, |x, y| x == 0 && y == 0));
        let tube = MaskTube { identity: 1, masks, tracklets: vec![] };
        let out = overlay_frames(&seq, std::slice::from_ref(&tube)).unwrap();
        let base = frame_to_rgb(&seq.frames[0], 64, 64);
        assert_eq!(identity_color(1), [230, 25, 75]);
        assert_eq!(out[0][0], ((base[0] as f32 + 230.0) / 2.0).round() as u8);
        assert_eq!(out[0].len(), 64 * 64 * 3);
        let mut bad = tube;
        bad.masks.insert(9, Mask::empty(64, 64));
        assert!(overlay_frames(&seq, &[bad]).unwrap_err().is_contract());
    }
}
