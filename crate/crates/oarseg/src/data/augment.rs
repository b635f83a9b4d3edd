//! Spatial augmentation of 2D slices (rotation, isotropic scale,
//! horizontal flip) and foreground-aware patch sampling.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::PatientCase;

/// Which transform families are enabled.
#[derive(Copy, Clone, Debug)]
pub struct AugmentPolicy {
    pub rotate: bool,
    pub scale: bool,
    pub flip: bool,
}

impl AugmentPolicy {
    pub fn none() -> Self {
        AugmentPolicy {
            rotate: false,
            scale: false,
            flip: false,
        }
    }
}

pub const ROTATE_DEGREES: f64 = 15.0;
pub const SCALE_RANGE: (f64, f64) = (0.85, 1.15);
pub const TRANSFORM_PROB: f64 = 0.5;

/// Apply the sampled transforms to an image slice [C,H,W] and its mask
/// [H,W]. Image samples bilinearly, the mask by nearest neighbor; both
/// share one affine map so they stay aligned. Out-of-bounds samples are
/// zero (background for the mask).
pub fn augment(
    image: &[f32],
    mask: &[u8],
    channels: usize,
    h: usize,
    w: usize,
    policy: AugmentPolicy,
    rng: &mut ChaCha8Rng,
) -> (Vec<f32>, Vec<u8>) {
    let rotate = policy.rotate && rng.random_range(0.0..1.0) < TRANSFORM_PROB;
    let angle = if rotate {
        rng.random_range(-ROTATE_DEGREES..ROTATE_DEGREES).to_radians()
    } else {
        0.0
    };
    let scale_on = policy.scale && rng.random_range(0.0..1.0) < TRANSFORM_PROB;
    let scale = if scale_on {
        rng.random_range(SCALE_RANGE.0..SCALE_RANGE.1)
    } else {
        1.0
    };
    let flip = policy.flip && rng.random_range(0.0..1.0) < TRANSFORM_PROB;
    apply_affine(image, mask, channels, h, w, angle, scale, flip)
}

/// Deterministic core shared with tests: rotate by `angle`, scale
/// isotropically, then flip horizontally.
pub fn apply_affine(
    image: &[f32],
    mask: &[u8],
    channels: usize,
    h: usize,
    w: usize,
    angle: f64,
    scale: f64,
    flip: bool,
) -> (Vec<f32>, Vec<u8>) {
    if angle == 0.0 && scale == 1.0 && !flip {
        return (image.to_vec(), mask.to_vec());
    }
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    // inverse map: output pixel -> input coordinates
    let (sin, cos) = angle.sin_cos();
    let inv_scale = 1.0 / scale;
    let mut out_img = vec![0.0f32; image.len()];
    let mut out_mask = vec![0u8; mask.len()];
    for i in 0..h {
        for j in 0..w {
            let jj = if flip { w - 1 - j } else { j };
            let dy = i as f64 - cy;
            let dx = jj as f64 - cx;
            // inverse rotation (by -angle) and inverse scale
            let sy = (cos * dy + sin * dx) * inv_scale + cy;
            let sx = (-sin * dy + cos * dx) * inv_scale + cx;
            // nearest neighbor for the mask
            let ny = sy.round() as isize;
            let nx = sx.round() as isize;
            if ny >= 0 && ny < h as isize && nx >= 0 && nx < w as isize {
                out_mask[i * w + j] = mask[ny as usize * w + nx as usize];
            }
            // bilinear for the image
            let y0 = sy.floor();
            let x0 = sx.floor();
            let fy = sy - y0;
            let fx = sx - x0;
            for m in 0..channels {
                let plane = &image[m * h * w..(m + 1) * h * w];
                let mut acc = 0.0f64;
                for (oy, wy) in [(0isize, 1.0 - fy), (1, fy)] {
                    for (ox, wx) in [(0isize, 1.0 - fx), (1, fx)] {
                        let yy = y0 as isize + oy;
                        let xx = x0 as isize + ox;
                        if yy >= 0 && yy < h as isize && xx >= 0 && xx < w as isize {
                            acc += wy * wx * plane[yy as usize * w + xx as usize] as f64;
                        }
                    }
                }
                out_img[m * h * w + i * w + j] = acc as f32;
            }
        }
    }
    (out_img, out_mask)
}

/// Random patch from a random slice. With probability `fg_fraction` the
/// crop is centered on a uniformly chosen foreground voxel of the case.
/// Slices smaller than the patch are padded symmetrically with zeros
/// (background labels for the mask).
pub fn sample_patch(
    case: &PatientCase,
    patch: (usize, usize),
    rng: &mut ChaCha8Rng,
    fg_fraction: f64,
) -> (Vec<f32>, Vec<u8>) {
    let fg_voxels: Vec<usize> = case
        .mask
        .iter()
        .enumerate()
        .filter(|(_, &v)| v > 0)
        .map(|(i, _)| i)
        .collect();
    sample_patch_cached(case, &fg_voxels, patch, rng, fg_fraction)
}

/// [`sample_patch`] with a precomputed foreground index list.
pub fn sample_patch_cached(
    case: &PatientCase,
    fg_voxels: &[usize],
    (ph, pw): (usize, usize),
    rng: &mut ChaCha8Rng,
    fg_fraction: f64,
) -> (Vec<f32>, Vec<u8>) {
    let [d, h, w] = case.shape;
    let force_fg = !fg_voxels.is_empty() && rng.random_range(0.0..1.0) < fg_fraction;
    let (z, cy, cx) = if force_fg {
        let v = fg_voxels[rng.random_range(0..fg_voxels.len())];
        (v / (h * w), (v / w) % h, v % w)
    } else {
        (
            rng.random_range(0..d),
            rng.random_range(0..h),
            rng.random_range(0..w),
        )
    };
    let (img_slice, mask_slice) = case.slice(z);

    // crop origin clamped so the window stays in bounds where possible
    let origin = |center: usize, extent: usize, patch: usize| -> isize {
        if extent >= patch {
            (center as isize - (patch / 2) as isize).clamp(0, (extent - patch) as isize)
        } else {
            // symmetric padding for undersized slices
            -(((patch - extent) / 2) as isize)
        }
    };
    let oy = origin(cy, h, ph);
    let ox = origin(cx, w, pw);

    let mut img = vec![0.0f32; case.channels * ph * pw];
    let mut mask = vec![0u8; ph * pw];
    for i in 0..ph {
        let sy = oy + i as isize;
        if sy < 0 || sy >= h as isize {
            continue;
        }
        for j in 0..pw {
            let sx = ox + j as isize;
            if sx < 0 || sx >= w as isize {
                continue;
            }
            let src = sy as usize * w + sx as usize;
            mask[i * pw + j] = mask_slice[src];
            for m in 0..case.channels {
                img[m * ph * pw + i * pw + j] = img_slice[m * h * w + src];
            }
        }
    }
    (img, mask)
}
