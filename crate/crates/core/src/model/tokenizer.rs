//! Spatial tokenizer: non-overlapping p×p patches, flattened and projected.

use crate::error::{GemtError, Result};
use crate::tensor::{Scalar, Tape, Var};

fn check_divisible(h: usize, w: usize, p: usize) -> Result<()> {
    if p == 0 || !h.is_multiple_of(p) || !w.is_multiple_of(p) {
        return Err(GemtError::Config(format!(
            "frame {h}x{w} is not divisible by patch size {p}"
        )));
    }
    Ok(())
}

/// Splits an H×W frame into HW/p² patches, row-major over the patch grid
/// (top-left first). Output is `[HW/p², p·p]`, each patch flattened row-major.
pub fn patchify<T: Copy>(frame: &[T], h: usize, w: usize, p: usize) -> Result<Vec<T>> {
    check_divisible(h, w, p)?;
    if frame.len() != h * w {
        return Err(GemtError::shape("patchify", &[frame.len()], &[h, w]));
    }
    let mut out = Vec::with_capacity(frame.len());
    for gi in 0..h / p {
        for gj in 0..w / p {
            for y in gi * p..(gi + 1) * p {
                out.extend_from_slice(&frame[y * w + gj * p..y * w + (gj + 1) * p]);
            }
        }
    }
    Ok(out)
}

/// Inverse of [`patchify`].
pub fn stitch<T: Copy + Default>(patches: &[T], h: usize, w: usize, p: usize) -> Result<Vec<T>> {
    check_divisible(h, w, p)?;
    if patches.len() != h * w {
        return Err(GemtError::shape("stitch", &[patches.len()], &[h, w]));
    }
    let mut frame = vec![T::default(); h * w];
    let cols = w / p;
    for (idx, patch) in patches.chunks_exact(p * p).enumerate() {
        let (gi, gj) = (idx / cols, idx % cols);
        for (r, row) in patch.chunks_exact(p).enumerate() {
            let y = gi * p + r;
            frame[y * w + gj * p..y * w + (gj + 1) * p].copy_from_slice(row);
        }
    }
    Ok(frame)
}

/// Projects flattened patches `[..., p²]` to tokens `[..., d]`.
pub fn tokenize<F: Scalar>(tape: &mut Tape<F>, patches: Var, weight: Var, bias: Var) -> Result<Var> {
    tape.linear(patches, weight, Some(bias))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn four_by_four_into_two_by_two() {
        let frame: Vec<u32> = (0..16).collect();
        let p = patchify(&frame, 4, 4, 2).unwrap();
        assert_eq!(p.len() / 4, 4);
        assert_eq!(&p[..4], &[0, 1, 4, 5]);
        assert_eq!(&p[12..], &[10, 11, 14, 15]);
    }

    #[test]
    fn standard_vit_grid() {
        let frame = vec![0u8; 224 * 224];
        assert_eq!(patchify(&frame, 224, 224, 16).unwrap().len() / 256, 196);
    }

    #[test]
    fn stitch_inverts_patchify() {
        let frame: Vec<f32> = (0..48).map(|i| i as f32 * 0.5).collect();
        let p = patchify(&frame, 6, 8, 2).unwrap();
        assert_eq!(stitch(&p, 6, 8, 2).unwrap(), frame);
    }

    #[test]
    fn indivisible_is_config_error() {
        let err = patchify(&[0u8; 30], 5, 6, 2).unwrap_err();
        assert!(matches!(err, GemtError::Config(_)));
    }

    #[test]
    fn tokenize_properties() {
        let mut t = Tape::<f64>::new();
        let w = t.constant(Tensor::from_f64(&[4, 2], &[1., 2., 3., 4., 5., 6., 7., 8.]).unwrap());
        let zb = t.constant(Tensor::zeros(&[2]));
        let zero = t.constant(Tensor::zeros(&[1, 4]));
        let y = tokenize(&mut t, zero, w, zb).unwrap();
        assert_eq!(t.value(y).data(), &[0.0, 0.0]);

        let b = t.constant(Tensor::from_f64(&[2], &[0.5, -0.5]).unwrap());
        let same = t.constant(Tensor::from_f64(&[2, 4], &[0.1, 0.2, 0.3, 0.4, 0.1, 0.2, 0.3, 0.4]).unwrap());
        let y = tokenize(&mut t, same, w, b).unwrap();
        let d = t.value(y).data();
        assert_eq!(d[..2], d[2..]);

        // one-hot at position 2 selects row 2 of the [p², d] weight plus bias
        let hot = t.constant(Tensor::from_f64(&[1, 4], &[0., 0., 1., 0.]).unwrap());
        let y = tokenize(&mut t, hot, w, b).unwrap();
        assert_eq!(t.value(y).data(), &[5.5, 5.5]);
    }
}
