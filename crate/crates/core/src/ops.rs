//! Forward-only tensor operations for callers outside a tape.

use crate::error::{DyeError, Result};
use crate::kernels::{self, ConvDims, ConvGeom};
use crate::tensor::Tensor;

/// Cross-correlation of a CxHxW input with OxCxKxK weights plus bias.
pub fn conv2d(
    input: &Tensor,
    weights: &Tensor,
    bias: &Tensor,
    stride: usize,
    dilation: usize,
    padding: usize,
) -> Result<Tensor> {
    let (c, h, w) = input.chw()?;
    let [o, wc, k, k2] = weights.shape()[..] else {
        return Err(DyeError::contract("conv weights must be OxCxKxK"));
    };
    if wc != c {
        return Err(DyeError::contract(format!("input has {c} channels, weights expect {wc}")));
    }
    if k != k2 || k % 2 == 0 {
        return Err(DyeError::contract("kernel must be square with odd size"));
    }
    if bias.shape() != [o] {
        return Err(DyeError::contract("bias length differs from output channels"));
    }
    if stride == 0 || dilation == 0 {
        return Err(DyeError::contract("stride and dilation must be positive"));
    }
    let geom = ConvGeom { stride, dilation, padding };
    let (Some(oh), Some(ow)) = (geom.out_len(h, k), geom.out_len(w, k)) else {
        return Err(DyeError::contract("convolution output would be empty"));
    };
    let dims = ConvDims { c, h, w, o, k, oh, ow };
    let out = kernels::conv2d_forward(input.data(), weights.data(), bias.data(), dims, geom);
    Tensor::new(&[o, oh, ow], out)
}

/// Bilinear samples of a CxHxW map at `(x, y)` index coordinates, zero
/// outside the map. Returns `C x points.len()`.
pub fn bilinear_sample(map: &Tensor, points: &[(f32, f32)]) -> Result<Tensor> {
    let (c, h, w) = map.chw()?;
    let pts: Vec<(f64, f64)> = points.iter().map(|&(x, y)| (x as f64, y as f64)).collect();
    let out = kernels::sample_forward(map.data(), c, h, w, &pts);
    Tensor::new(&[c, points.len()], out)
}

/// Softmax over all positions of a 1xMxM logit map.
pub fn spatial_softmax(logits: &Tensor) -> Result<Tensor> {
    if logits.shape().len() != 3 || logits.shape()[0] != 1 {
        return Err(DyeError::contract("spatial softmax expects a 1xHxW map"));
    }
    Tensor::new(logits.shape(), kernels::softmax_forward(logits.data()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_conv() {
        let x = Tensor::new(&[1, 1, 1], vec![2.0]).unwrap();
        let w = Tensor::new(&[1, 1, 1, 1], vec![3.0]).unwrap();
        let b = Tensor::new(&[1], vec![0.5]).unwrap();
        let y = conv2d(&x, &w, &b, 1, 1, 0).unwrap();
        assert_eq!(y.data(), &[6.5]);
    }

    #[test]
    fn identity_kernel() {
        let x = Tensor::from_fn(&[2, 5, 4], |i| (i as f32 * 0.37).sin());
        let mut w = Tensor::zeros(&[2, 2, 3, 3]);
        w.data_mut()[4] = 1.0; // o=0,c=0 centre
        w.data_mut()[9 * 3 + 4] = 1.0; // o=1,c=1 centre
        let b = Tensor::zeros(&[2]);
        let y = conv2d(&x, &w, &b, 1, 1, 1).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn channel_mismatch_is_contract_error() {
        let x = Tensor::zeros(&[2, 4, 4]);
        let w = Tensor::zeros(&[1, 3, 3, 3]);
        let b = Tensor::zeros(&[1]);
        assert!(matches!(conv2d(&x, &w, &b, 1, 1, 1), Err(DyeError::Contract(_))));
    }

    #[test]
    fn sample_grid_point_linear_and_outside() {
        let map = Tensor::from_fn(&[2, 4, 4], |i| i as f32);
        let s = bilinear_sample(&map, &[(1.0, 2.0)]).unwrap();
        assert_eq!(s.data(), &[map.at3(0, 2, 1), map.at3(1, 2, 1)]);

        let lin = Tensor::from_fn(&[1, 4, 4], |i| 2.0 * (i % 4) as f32 + 3.0 * (i / 4) as f32);
        let s = bilinear_sample(&lin, &[(0.5, 0.5)]).unwrap();
        assert!((s.data()[0] - 2.5).abs() < 1e-6);

        let s = bilinear_sample(&map, &[(-5.0, -5.0)]).unwrap();
        assert_eq!(s.data(), &[0.0, 0.0]);
    }

    #[test]
    fn softmax_cases() {
        let u = spatial_softmax(&Tensor::filled(&[1, 2, 2], 3.0)).unwrap();
        assert!(u.data().iter().all(|&v| (v - 0.25).abs() < 1e-7));
        let p = spatial_softmax(&Tensor::new(&[1, 1, 2], vec![0.0, 3f32.ln()]).unwrap()).unwrap();
        assert!((p.data()[0] - 0.25).abs() < 1e-6 && (p.data()[1] - 0.75).abs() < 1e-6);
        let logits = Tensor::from_fn(&[1, 3, 3], |i| (i as f32).cos());
        let shifted = Tensor::from_fn(&[1, 3, 3], |i| (i as f32).cos() + 7.5);
        let a = spatial_softmax(&logits).unwrap();
        let b = spatial_softmax(&shifted).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-7);
        }
        let sum: f64 = a.data().iter().map(|&v| v as f64).sum();
        assert!((sum - 1.0).abs() < 1e-6);
    }
}
