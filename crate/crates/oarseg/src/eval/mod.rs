//! Segmentation metrics: per-class Dice overlap and the 95th-percentile
//! Hausdorff boundary distance in millimetres, plus the metrics table
//! they populate.

pub mod aggregate;
pub mod wilcoxon;

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Overlap 2|P∩R|/(|P|+|R|) for voxels labeled `class`.
///
/// Conventions: both masks empty -> absent; only the reference empty ->
/// absent; only the prediction empty -> 0.
pub fn dice(pred: &[u8], reference: &[u8], class: u8) -> Result<Option<f64>> {
    if pred.len() != reference.len() {
        return Err(Error::shape("dice", "misaligned grids"));
    }
    let mut p = 0u64;
    let mut r = 0u64;
    let mut i = 0u64;
    for (&a, &b) in pred.iter().zip(reference) {
        let pa = a == class;
        let rb = b == class;
        p += pa as u64;
        r += rb as u64;
        i += (pa && rb) as u64;
    }
    Ok(match (p, r) {
        (0, 0) => None,
        (_, 0) => None,
        (0, _) => Some(0.0),
        _ => Some(2.0 * i as f64 / (p + r) as f64),
    })
}

/// Boundary voxels of `class`: labeled voxels with a face neighbor (6 in
/// 3D, 4 when an axis is flat) outside the class; the volume border
/// counts as outside.
fn boundary_voxels(mask: &[u8], class: u8, shape: [usize; 3]) -> Vec<[usize; 3]> {
    let [d, h, w] = shape;
    let mut out = Vec::new();
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if mask[(z * h + y) * w + x] != class {
                    continue;
                }
                let mut is_boundary = false;
                let mut check = |zz: isize, yy: isize, xx: isize| {
                    if zz < 0 || zz >= d as isize || yy < 0 || yy >= h as isize || xx < 0
                        || xx >= w as isize
                    {
                        is_boundary = true;
                    } else if mask[((zz as usize) * h + yy as usize) * w + xx as usize] != class {
                        is_boundary = true;
                    }
                };
                let (zi, yi, xi) = (z as isize, y as isize, x as isize);
                if d > 1 {
                    check(zi - 1, yi, xi);
                    check(zi + 1, yi, xi);
                }
                check(zi, yi - 1, xi);
                check(zi, yi + 1, xi);
                check(zi, yi, xi - 1);
                check(zi, yi, xi + 1);
                if is_boundary {
                    out.push([z, y, x]);
                }
            }
        }
    }
    out
}

/// Linear-interpolation percentile (inclusive) of a sorted slice.
pub fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let frac = pos - lo as f64;
    if lo + 1 < sorted.len() {
        sorted[lo] + (sorted[lo + 1] - sorted[lo]) * frac
    } else {
        sorted[lo]
    }
}

fn directed_distances(from: &[[usize; 3]], to: &[[usize; 3]], spacing: [f64; 3]) -> Vec<f64> {
    from.par_iter()
        .map(|p| {
            let mut best = f64::INFINITY;
            for q in to {
                let dz = (p[0] as f64 - q[0] as f64) * spacing[0];
                let dy = (p[1] as f64 - q[1] as f64) * spacing[1];
                let dx = (p[2] as f64 - q[2] as f64) * spacing[2];
                let d2 = dz * dz + dy * dy + dx * dx;
                if d2 < best {
                    best = d2;
                }
            }
            best.sqrt()
        })
        .collect()
}

/// 95th percentile of boundary-to-boundary distances in millimetres:
/// max of the two directed 95th percentiles.
///
/// Conventions: both masks empty -> absent; exactly one empty -> the
/// image diagonal length in mm (documented penalty).
pub fn hd95(
    pred: &[u8],
    reference: &[u8],
    class: u8,
    spacing: [f64; 3],
    shape: [usize; 3],
) -> Result<Option<f64>> {
    let n: usize = shape.iter().product();
    if pred.len() != n || reference.len() != n {
        return Err(Error::shape("hd95", "misaligned grids"));
    }
    let bp = boundary_voxels(pred, class, shape);
    let br = boundary_voxels(reference, class, shape);
    match (bp.is_empty(), br.is_empty()) {
        (true, true) => Ok(None),
        (true, false) | (false, true) => {
            let dz = shape[0] as f64 * spacing[0];
            let dy = shape[1] as f64 * spacing[1];
            let dx = shape[2] as f64 * spacing[2];
            Ok(Some((dz * dz + dy * dy + dx * dx).sqrt()))
        }
        (false, false) => {
            let mut d_pr = directed_distances(&bp, &br, spacing);
            let mut d_rp = directed_distances(&br, &bp, spacing);
            d_pr.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
            d_rp.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
            let p95 = percentile_sorted(&d_pr, 0.95).max(percentile_sorted(&d_rp, 0.95));
            Ok(Some(p95))
        }
    }
}

/// One metrics row keyed (model, fold, patient, class).
#[derive(Clone, Debug, PartialEq)]
pub struct MetricEntry {
    pub model: String,
    pub fold: usize,
    pub patient: String,
    pub class_name: String,
    pub dice: Option<f64>,
    pub hd95_mm: Option<f64>,
}

/// Entry collection plus derived aggregates (always recomputed, never
/// cached).
#[derive(Clone, Debug, Default)]
pub struct MetricsTable {
    pub entries: Vec<MetricEntry>,
}

impl MetricsTable {
    pub fn push(&mut self, e: MetricEntry) {
        self.entries.push(e);
    }

    pub fn models(&self) -> Vec<String> {
        let mut v: Vec<String> = self.entries.iter().map(|e| e.model.clone()).collect();
        v.sort();
        v.dedup();
        v
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("model,fold,patient,class,dice,hd95_mm\n");
        for e in &self.entries {
            let dice = e.dice.map(|v| format!("{v:.6}")).unwrap_or_default();
            let hd = e.hd95_mm.map(|v| format!("{v:.6}")).unwrap_or_default();
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                e.model, e.fold, e.patient, e.class_name, dice, hd
            ));
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if i == 0 || line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 6 {
                return Err(Error::data(format!(
                    "metrics.csv line {}: want 6 fields, got {}",
                    i + 1,
                    parts.len()
                )));
            }
            let parse_opt = |s: &str| -> Result<Option<f64>> {
                if s.is_empty() {
                    Ok(None)
                } else {
                    s.parse::<f64>()
                        .map(Some)
                        .map_err(|e| Error::data(format!("metrics.csv line {}: {e}", i + 1)))
                }
            };
            entries.push(MetricEntry {
                model: parts[0].to_string(),
                fold: parts[1]
                    .parse()
                    .map_err(|e| Error::data(format!("metrics.csv line {}: {e}", i + 1)))?,
                patient: parts[2].to_string(),
                class_name: parts[3].to_string(),
                dice: parse_opt(parts[4])?,
                hd95_mm: parse_opt(parts[5])?,
            });
        }
        Ok(MetricsTable { entries })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dice_basic_rules() {
        // pred == ref, class present
        let m = vec![0u8, 1, 1, 0];
        assert_eq!(dice(&m, &m, 1).unwrap(), Some(1.0));
        // ref {(0,0),(0,1)}, pred {(0,1),(1,1)} on a 2x2 grid
        let reference = vec![1u8, 1, 0, 0];
        let pred = vec![0u8, 1, 0, 1];
        assert_eq!(dice(&pred, &reference, 1).unwrap(), Some(0.5));
        // both empty -> absent
        let z = vec![0u8; 4];
        assert_eq!(dice(&z, &z, 1).unwrap(), None);
        // only prediction empty -> 0
        assert_eq!(dice(&z, &reference, 1).unwrap(), Some(0.0));
        // only reference empty -> absent
        assert_eq!(dice(&reference, &z, 1).unwrap(), None);
    }

    #[test]
    fn dice_is_symmetric() {
        let a = vec![0u8, 1, 2, 1, 0, 2, 1, 1];
        let b = vec![1u8, 1, 2, 0, 0, 2, 0, 1];
        for c in 1..=2u8 {
            assert_eq!(dice(&a, &b, c).unwrap(), dice(&b, &a, c).unwrap());
        }
    }

    #[test]
    fn hd95_identical_masks_zero() {
        let mut m = vec![0u8; 27];
        m[13] = 1;
        m[14] = 1;
        let out = hd95(&m, &m, 1, [1.0; 3], [3, 3, 3]).unwrap();
        assert_eq!(out, Some(0.0));
    }

    #[test]
    fn hd95_single_voxels_pythagorean() {
        // single voxels at (0,0) and (3,4) on one slice, unit spacing
        let (h, w) = (5, 6);
        let mut a = vec![0u8; h * w];
        let mut b = vec![0u8; h * w];
        a[0] = 1;
        b[3 * w + 4] = 1;
        let out = hd95(&a, &b, 1, [1.0; 3], [1, h, w]).unwrap();
        assert_eq!(out, Some(5.0));
    }

    #[test]
    fn hd95_empty_conventions() {
        let z = vec![0u8; 1000];
        let mut m = vec![0u8; 1000];
        m[555] = 1;
        assert_eq!(hd95(&z, &z, 1, [1.0; 3], [10, 10, 10]).unwrap(), None);
        let expect = (300.0f64).sqrt();
        let got = hd95(&z, &m, 1, [1.0; 3], [10, 10, 10]).unwrap().unwrap();
        assert!((got - expect).abs() < 1e-12);
    }

    #[test]
    fn hd95_spacing_scales_linearly() {
        let mut a = vec![0u8; 64];
        let mut b = vec![0u8; 64];
        a[0] = 1;
        a[9] = 1;
        b[27] = 1;
        b[63] = 1;
        let one = hd95(&a, &b, 1, [1.0; 3], [4, 4, 4]).unwrap().unwrap();
        let two = hd95(&a, &b, 1, [2.0; 3], [4, 4, 4]).unwrap().unwrap();
        assert!((two - 2.0 * one).abs() < 1e-12);
    }

    #[test]
    fn hd95_symmetric_and_ignores_other_labels() {
        let mut a = vec![0u8; 100];
        let mut b = vec![0u8; 100];
        a[12] = 1;
        a[13] = 2;
        b[87] = 1;
        b[55] = 3;
        let ab = hd95(&a, &b, 1, [1.0; 3], [1, 10, 10]).unwrap();
        let ba = hd95(&b, &a, 1, [1.0; 3], [1, 10, 10]).unwrap();
        assert_eq!(ab, ba);
        // relabeling other classes does not change class-1 distances
        let mut b2 = b.clone();
        b2[55] = 2;
        assert_eq!(hd95(&a, &b2, 1, [1.0; 3], [1, 10, 10]).unwrap(), ab);
    }

    #[test]
    fn metrics_csv_roundtrip() {
        let mut t = MetricsTable::default();
        t.push(MetricEntry {
            model: "unet".into(),
            fold: 2,
            patient: "case_001".into(),
            class_name: "bladder".into(),
            dice: Some(0.8125),
            hd95_mm: None,
        });
        t.push(MetricEntry {
            model: "cunet".into(),
            fold: 0,
            patient: "case_002".into(),
            class_name: "rectum".into(),
            dice: None,
            hd95_mm: Some(17.25),
        });
        let csv = t.to_csv();
        let back = MetricsTable::from_csv(&csv).unwrap();
        assert_eq!(back.entries.len(), 2);
        assert_eq!(back.entries[0].dice, Some(0.8125));
        assert_eq!(back.entries[0].hd95_mm, None);
        assert_eq!(back.entries[1].hd95_mm, Some(17.25));
    }
}
