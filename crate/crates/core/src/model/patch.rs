//! Frame ↔ `[-1, 1]` pixel arrays ↔ raw patch vectors.
//!
//! Patches are ordered row-major over the patch grid; inside a patch the
//! layout is `(row, column, channel)`.

use crate::error::{Result, XvwmError};
use crate::sim::Frame;

/// Pixels scaled to `[-1, 1]`, `size x size x 3` row-major.
pub fn frame_to_unit(frame: &Frame) -> Vec<f32> {
    frame
        .pixels()
        .iter()
        .map(|&p| p as f32 / 127.5 - 1.0)
        .collect()
}

/// Inverse of [`frame_to_unit`] after clamping to `[-1, 1]`.
pub fn unit_to_frame(data: &[f32], size: usize) -> Result<Frame> {
    let pixels = data
        .iter()
        .map(|&x| {
            let x = if x.is_nan() { 0.0 } else { x.clamp(-1.0, 1.0) };
            ((x + 1.0) * 127.5).round() as u8
        })
        .collect();
    Frame::new(size, size, pixels)
}

fn check(len: usize, size: usize, patch: usize) -> Result<()> {
    if patch == 0 || size % patch != 0 {
        return Err(XvwmError::Usage(format!(
            "image size {size} not divisible by patch size {patch}"
        )));
    }
    if len != size * size * 3 {
        return Err(XvwmError::Usage(format!(
            "expected {} values for a {size}x{size} image, got {len}",
            size * size * 3
        )));
    }
    Ok(())
}

/// `[size, size, 3] -> [(size/patch)^2, patch*patch*3]`.
pub fn patchify_raw<T: Copy>(img: &[T], size: usize, patch: usize) -> Result<Vec<T>> {
    check(img.len(), size, patch)?;
    let g = size / patch;
    let mut out = Vec::with_capacity(img.len());
    for py in 0..g {
        for px in 0..g {
            for dy in 0..patch {
                let row = (py * patch + dy) * size + px * patch;
                out.extend_from_slice(&img[row * 3..(row + patch) * 3]);
            }
        }
    }
    Ok(out)
}

pub fn unpatchify_raw<T: Copy + Default>(tokens: &[T], size: usize, patch: usize) -> Result<Vec<T>> {
    check(tokens.len(), size, patch)?;
    let g = size / patch;
    let mut out = vec![T::default(); tokens.len()];
    let pd = patch * patch * 3;
    for py in 0..g {
        for px in 0..g {
            let tok = &tokens[(py * g + px) * pd..(py * g + px + 1) * pd];
            for dy in 0..patch {
                let row = (py * patch + dy) * size + px * patch;
                out[row * 3..(row + patch) * 3].copy_from_slice(&tok[dy * patch * 3..(dy + 1) * patch * 3]);
            }
        }
    }
    Ok(out)
}

/// Frame straight to raw patch vectors in `[-1, 1]`.
pub fn frame_to_patches(frame: &Frame, patch: usize) -> Result<Vec<f32>> {
    patchify_raw(&frame_to_unit(frame), frame.size(), patch)
}

pub fn patches_to_frame(tokens: &[f32], size: usize, patch: usize) -> Result<Frame> {
    unit_to_frame(&unpatchify_raw(tokens, size, patch)?, size)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn token_count_and_round_trip() {
        let img: Vec<u32> = (0..64 * 64 * 3).collect();
        let p = patchify_raw(&img, 64, 8).unwrap();
        assert_eq!(p.len() / 192, 64);
        assert_eq!(unpatchify_raw(&p, 64, 8).unwrap(), img);
        // First patch starts with pixel (0,0) then (0,1); its second row is image row 1.
        assert_eq!(&p[..6], &[0, 1, 2, 3, 4, 5]);
        assert_eq!(p[24], 64 * 3);
    }

    #[test]
    fn constant_image_gives_identical_patches() {
        let f = Frame::filled(32, [10, 200, 30]);
        let p = frame_to_patches(&f, 8).unwrap();
        let first = &p[..192];
        assert!(p.chunks(192).all(|c| c == first));
    }

    #[test]
    fn frame_unit_round_trip() {
        let px: Vec<u8> = (0..16 * 16 * 3).map(|i| (i * 7 % 256) as u8).collect();
        let f = Frame::new(16, 16, px).unwrap();
        assert_eq!(patches_to_frame(&frame_to_patches(&f, 4).unwrap(), 16, 4).unwrap(), f);
    }

    #[test]
    fn size_mismatch_is_usage_error() {
        assert!(matches!(patchify_raw(&[0u8; 10], 4, 2), Err(XvwmError::Usage(_))));
        assert!(patchify_raw(&[0u8; 75], 5, 2).is_err());
    }
}
