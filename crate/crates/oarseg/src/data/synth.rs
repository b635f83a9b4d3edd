//! Deterministic synthetic multi-organ phantoms.
//!
//! Each case carries a soft-tissue body ellipsoid (nonzero intensities,
//! zero outside), one bladder-like ellipsoidal blob and up to three
//! tubular/branched structures with touching boundaries, randomized
//! per-class intensity contrast, a smooth gradient and Gaussian noise.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::PatientCase;
use crate::error::{Error, Result};

const ORGAN_NAMES: [&str; 4] = ["bladder", "bowel", "rectum", "sigmoid"];

/// Generate `n_patients` phantoms with `classes` foreground structures.
/// Deterministic per seed.
pub fn synth_generate(
    n_patients: usize,
    classes: usize,
    extent: (usize, usize, usize),
    seed: u64,
) -> Result<Vec<PatientCase>> {
    if classes < 2 {
        return Err(Error::config("synth needs at least 2 foreground classes"));
    }
    if classes > 8 {
        return Err(Error::config("synth supports at most 8 foreground classes"));
    }
    let (d, h, w) = extent;
    if d < 6 || h < 24 || w < 24 {
        return Err(Error::config(format!(
            "extent {extent:?} too small to place all structures"
        )));
    }
    (0..n_patients)
        .map(|i| synth_case(i, classes, extent, seed))
        .collect()
}

fn class_names(classes: usize) -> Vec<String> {
    (0..classes)
        .map(|i| {
            if i < ORGAN_NAMES.len() {
                ORGAN_NAMES[i].to_string()
            } else {
                format!("organ_{}", i + 1)
            }
        })
        .collect()
}

struct Geometry {
    d: usize,
    h: usize,
    w: usize,
}

impl Geometry {
    /// Normalized coordinates in [0,1] per axis for a voxel.
    fn norm(&self, z: usize, y: usize, x: usize) -> (f64, f64, f64) {
        (
            (z as f64 + 0.5) / self.d as f64,
            (y as f64 + 0.5) / self.h as f64,
            (x as f64 + 0.5) / self.w as f64,
        )
    }
}

fn synth_case(
    index: usize,
    classes: usize,
    (d, h, w): (usize, usize, usize),
    seed: u64,
) -> Result<PatientCase> {
    let mut rng =
        ChaCha8Rng::seed_from_u64(seed ^ (index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let geo = Geometry { d, h, w };
    let n = d * h * w;
    let mut mask = vec![0u8; n];

    // anisotropic spacing in [1, 3] mm
    let spacing = [
        rng.random_range(1.0..3.0),
        rng.random_range(1.0..3.0),
        rng.random_range(1.0..3.0),
    ];

    // body ellipsoid occupying most of the volume
    let body_c = (0.5, 0.5, 0.5);
    let body_r = (
        rng.random_range(0.44..0.49),
        rng.random_range(0.40..0.47),
        rng.random_range(0.40..0.47),
    );
    let inside_body = |z: f64, y: f64, x: f64| -> bool {
        let dz = (z - body_c.0) / body_r.0;
        let dy = (y - body_c.1) / body_r.1;
        let dx = (x - body_c.2) / body_r.2;
        dz * dz + dy * dy + dx * dx <= 1.0
    };

    // class 1: bladder-like ellipsoid, anterior-center
    let bl_c = (
        rng.random_range(0.42..0.58),
        rng.random_range(0.52..0.62),
        rng.random_range(0.40..0.52),
    );
    let bl_r = (
        rng.random_range(0.16..0.24),
        rng.random_range(0.14..0.20),
        rng.random_range(0.14..0.20),
    );
    paint_ellipsoid(&geo, &mut mask, 1, bl_c, bl_r);

    // class 3 (rectum): near-vertical tube, posterior, bottom to middle
    let rect_x = rng.random_range(0.44..0.56);
    let rect_y = rng.random_range(0.22..0.30);
    let rect_r = rng.random_range(0.050..0.070);
    let rect_top = rng.random_range(0.55..0.70);
    let rectum_path: Vec<(f64, f64, f64)> = (0..=8)
        .map(|i| {
            let t = i as f64 / 8.0;
            let z = 0.12 + t * (rect_top - 0.12);
            (
                z,
                rect_y + 0.03 * (t * std::f64::consts::PI).sin(),
                rect_x + 0.02 * (2.0 * t * std::f64::consts::PI).sin(),
            )
        })
        .collect();

    // class 4 (sigmoid): S-curve continuing from the rectum top
    let sig_end = (
        (rect_top + 0.18).min(0.9),
        rng.random_range(0.38..0.48),
        rng.random_range(0.30..0.44),
    );
    let sig_start = *rectum_path.last().expect("non-empty path");
    let sigmoid_path: Vec<(f64, f64, f64)> = (0..=10)
        .map(|i| {
            let t = i as f64 / 10.0;
            let wob = 0.06 * (2.5 * t * std::f64::consts::PI).sin();
            (
                sig_start.0 + t * (sig_end.0 - sig_start.0),
                sig_start.1 + t * (sig_end.1 - sig_start.1) + wob,
                sig_start.2 + t * (sig_end.2 - sig_start.2) + wob * 0.7,
            )
        })
        .collect();

    // class 2 (bowel): branched tube cluster in the upper region,
    // one branch reaching toward the sigmoid end so boundaries touch
    let mut bowel_paths: Vec<Vec<(f64, f64, f64)>> = Vec::new();
    let bowel_anchor = (
        (sig_end.0 + 0.05).min(0.92),
        rng.random_range(0.45..0.60),
        rng.random_range(0.45..0.60),
    );
    let n_branches = 2 + (rng.random_range(0..2u8) as usize);
    for b in 0..n_branches {
        let mut path = Vec::new();
        let mut p = if b == 0 { sig_end } else { bowel_anchor };
        let mut dir: (f64, f64, f64) = (
            rng.random_range(-0.05..0.05),
            rng.random_range(-0.08..0.08),
            rng.random_range(-0.08..0.08),
        );
        for _ in 0..10 {
            path.push(p);
            dir = (
                (dir.0 + rng.random_range(-0.03..0.03)).clamp(-0.08, 0.08),
                (dir.1 + rng.random_range(-0.05..0.05)).clamp(-0.12, 0.12),
                (dir.2 + rng.random_range(-0.05..0.05)).clamp(-0.12, 0.12),
            );
            p = (
                (p.0 + dir.0).clamp(0.55, 0.92),
                (p.1 + dir.1).clamp(0.25, 0.78),
                (p.2 + dir.2).clamp(0.22, 0.78),
            );
        }
        bowel_paths.push(path);
    }
    let bowel_r = rng.random_range(0.055..0.080);

    // paint order: bowel, then rectum and sigmoid overwrite at contacts
    if classes >= 2 {
        for path in &bowel_paths {
            paint_tube(&geo, &mut mask, 2, path, bowel_r);
        }
    }
    if classes >= 3 {
        paint_tube(&geo, &mut mask, 3, &rectum_path, rect_r);
    }
    if classes >= 4 {
        paint_tube(&geo, &mut mask, 4, &sigmoid_path, rng.random_range(0.045..0.065));
    }
    // extra blob organs beyond the standard roster
    for extra in 5..=classes {
        let c = (
            rng.random_range(0.25..0.75),
            rng.random_range(0.25..0.75),
            rng.random_range(0.25..0.75),
        );
        let r = (
            rng.random_range(0.08..0.13),
            rng.random_range(0.08..0.13),
            rng.random_range(0.08..0.13),
        );
        paint_ellipsoid(&geo, &mut mask, extra as u8, c, r);
    }

    // clamp foreground to the body and synthesize intensities
    let base = rng.random_range(0.35..0.55);
    let mut deltas = vec![0.0f64; classes + 1];
    for (i, delta) in deltas.iter_mut().enumerate().skip(1) {
        // alternating bright/dark contrast, magnitude at least 0.12
        let mag = rng.random_range(0.12..0.35);
        *delta = if i % 2 == 1 { mag } else { -mag };
    }
    let grad = (
        rng.random_range(-0.1..0.1),
        rng.random_range(-0.1..0.1),
        rng.random_range(-0.1..0.1),
    );
    let sigma = rng.random_range(0.02..0.05);
    let noise = Normal::new(0.0, sigma).expect("sigma > 0");

    let mut image = vec![0.0f32; n];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let idx = (z * h + y) * w + x;
                let (nz, ny, nx) = geo.norm(z, y, x);
                if !inside_body(nz, ny, nx) {
                    mask[idx] = 0;
                    continue;
                }
                let c = mask[idx] as usize;
                let v = base
                    + deltas[c]
                    + grad.0 * nz
                    + grad.1 * ny
                    + grad.2 * nx
                    + noise.sample(&mut rng);
                // body voxels stay strictly positive so the nonzero crop
                // targets the body
                image[idx] = v.max(0.05) as f32;
            }
        }
    }

    let case = PatientCase {
        id: format!("case_{index:03}"),
        image,
        channels: 1,
        shape: [d, h, w],
        spacing_mm: spacing,
        mask,
        class_names: class_names(classes),
        crop_offset: None,
    };
    case.validate()?;
    Ok(case)
}

fn paint_ellipsoid(
    geo: &Geometry,
    mask: &mut [u8],
    label: u8,
    c: (f64, f64, f64),
    r: (f64, f64, f64),
) {
    for z in 0..geo.d {
        for y in 0..geo.h {
            for x in 0..geo.w {
                let (nz, ny, nx) = geo.norm(z, y, x);
                let dz = (nz - c.0) / r.0;
                let dy = (ny - c.1) / r.1;
                let dx = (nx - c.2) / r.2;
                if dz * dz + dy * dy + dx * dx <= 1.0 {
                    mask[(z * geo.h + y) * geo.w + x] = label;
                }
            }
        }
    }
}

fn paint_tube(geo: &Geometry, mask: &mut [u8], label: u8, path: &[(f64, f64, f64)], radius: f64) {
    for pair in path.windows(2) {
        paint_segment(geo, mask, label, pair[0], pair[1], radius);
    }
}

fn paint_segment(
    geo: &Geometry,
    mask: &mut [u8],
    label: u8,
    a: (f64, f64, f64),
    b: (f64, f64, f64),
    radius: f64,
) {
    // bounding box in voxel coordinates, padded by the radius
    let lo = |v: f64, n: usize| (((v - radius) * n as f64).floor().max(0.0)) as usize;
    let hi = |v: f64, n: usize| (((v + radius) * n as f64).ceil().min(n as f64 - 1.0)) as usize;
    let (z0, z1) = (lo(a.0.min(b.0), geo.d), hi(a.0.max(b.0), geo.d));
    let (y0, y1) = (lo(a.1.min(b.1), geo.h), hi(a.1.max(b.1), geo.h));
    let (x0, x1) = (lo(a.2.min(b.2), geo.w), hi(a.2.max(b.2), geo.w));
    let ab = (b.0 - a.0, b.1 - a.1, b.2 - a.2);
    let len2 = ab.0 * ab.0 + ab.1 * ab.1 + ab.2 * ab.2;
    for z in z0..=z1 {
        for y in y0..=y1 {
            for x in x0..=x1 {
                let (nz, ny, nx) = geo.norm(z, y, x);
                let ap = (nz - a.0, ny - a.1, nx - a.2);
                let t = if len2 > 0.0 {
                    ((ap.0 * ab.0 + ap.1 * ab.1 + ap.2 * ab.2) / len2).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                let q = (a.0 + t * ab.0, a.1 + t * ab.1, a.2 + t * ab.2);
                let dz = nz - q.0;
                let dy = ny - q.1;
                let dx = nx - q.2;
                if dz * dz + dy * dy + dx * dx <= radius * radius {
                    mask[(z * geo.h + y) * geo.w + x] = label;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        let a = synth_generate(3, 4, (10, 48, 48), 7).unwrap();
        let b = synth_generate(3, 4, (10, 48, 48), 7).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.image, y.image);
            assert_eq!(x.mask, y.mask);
            assert_eq!(x.spacing_mm, y.spacing_mm);
        }
        let c = synth_generate(3, 4, (10, 48, 48), 8).unwrap();
        assert!(a[0].image != c[0].image);
    }

    #[test]
    fn extent_too_small_is_error() {
        assert!(synth_generate(1, 4, (2, 8, 8), 0).is_err());
    }

    #[test]
    fn class_coverage_self_audit() {
        // every class occupies >= 0.1% of voxels in >= 80% of cases
        let cases = synth_generate(194, 4, (10, 48, 48), 42).unwrap();
        assert_eq!(cases.len(), 194);
        let mut ok_counts = vec![0usize; 4];
        for case in &cases {
            let n = case.voxels() as f64;
            for cls in 1..=4u8 {
                let count = case.mask.iter().filter(|&&v| v == cls).count() as f64;
                if count / n >= 0.001 {
                    ok_counts[cls as usize - 1] += 1;
                }
            }
        }
        for (cls, &ok) in ok_counts.iter().enumerate() {
            assert!(
                ok >= 155,
                "class {} present in only {ok}/194 cases",
                cls + 1
            );
        }
    }
}
