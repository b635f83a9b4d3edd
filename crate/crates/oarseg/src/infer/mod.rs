//! Sliding-window slice inference and probability-averaging ensembles.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::arch::Model;
use crate::data::PatientCase;
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Per-class probability map aligned to a preprocessed case grid.
#[derive(Clone, Debug)]
pub struct ProbabilityVolume {
    pub case_id: String,
    pub class_names: Vec<String>,
    /// [D, H, W]
    pub shape: [usize; 3],
    /// [C, D, H, W] row-major.
    pub probs: Vec<f32>,
    /// Producer tags used by evaluation grouping.
    pub model: String,
    pub fold: usize,
}

impl ProbabilityVolume {
    pub fn classes(&self) -> usize {
        self.class_names.len() + 1
    }

    pub fn voxels(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.voxels();
        let c = self.classes();
        if self.probs.len() != c * n {
            return Err(Error::data(format!(
                "probability volume {}: {} values for {c} classes x {n} voxels",
                self.case_id,
                self.probs.len()
            )));
        }
        for v in 0..n {
            let sum: f32 = (0..c).map(|cl| self.probs[cl * n + v]).sum();
            if (sum - 1.0).abs() > 1e-5 {
                return Err(Error::data(format!(
                    "probability volume {}: voxel {v} sums to {sum}",
                    self.case_id
                )));
            }
        }
        Ok(())
    }
}

/// Window origins along one axis: stride ceil(patch*(1-overlap)), the
/// last origin clamped so the final window flushes the border; every
/// pixel is covered at least once.
pub fn window_layout(extent: usize, patch: usize, overlap: f64) -> Vec<usize> {
    assert!((0.0..1.0).contains(&overlap), "overlap in [0,1)");
    if extent <= patch {
        return vec![0];
    }
    let stride = ((patch as f64 * (1.0 - overlap)).ceil() as usize).max(1);
    let last = extent - patch;
    let mut origins = Vec::new();
    let mut x = 0usize;
    loop {
        origins.push(x);
        if x + patch >= extent {
            break;
        }
        x = (x + stride).min(last);
    }
    origins
}

/// Sliding-window inference over every slice of a preprocessed case:
/// per-window probabilities accumulate with a coverage count and are
/// divided out (uniform blending), preserving the per-voxel simplex.
pub fn predict_volume<T: Element>(
    model: &Model<T>,
    case: &PatientCase,
    patch: (usize, usize),
    overlap: f64,
) -> Result<ProbabilityVolume> {
    let [d, h, w] = case.shape;
    let (ph, pw) = patch;
    let classes = model.spec.num_classes;
    let eff_h = h.max(ph);
    let eff_w = w.max(pw);
    let oys = window_layout(eff_h, ph, overlap);
    let oxs = window_layout(eff_w, pw, overlap);
    let channels = case.channels;
    let mut probs = vec![0.0f32; classes * d * h * w];

    for z in 0..d {
        let (slice_img, _) = case.slice(z);
        // pad undersized slices to the window extent
        let padded: Vec<f32> = if eff_h != h || eff_w != w {
            let mut p = vec![0.0f32; channels * eff_h * eff_w];
            for m in 0..channels {
                for y in 0..h {
                    let src = m * h * w + y * w;
                    let dst = m * eff_h * eff_w + y * eff_w;
                    p[dst..dst + w].copy_from_slice(&slice_img[src..src + w]);
                }
            }
            p
        } else {
            slice_img
        };

        let mut acc = vec![0.0f64; classes * eff_h * eff_w];
        let mut count = vec![0u32; eff_h * eff_w];
        for &oy in &oys {
            for &ox in &oxs {
                let mut win = vec![T::ZERO; channels * ph * pw];
                for m in 0..channels {
                    for y in 0..ph {
                        for x in 0..pw {
                            win[(m * ph + y) * pw + x] = T::from_f64(
                                padded[m * eff_h * eff_w + (oy + y) * eff_w + (ox + x)] as f64,
                            );
                        }
                    }
                }
                let wt = Tensor::from_vec(&[1, channels, ph, pw], win)?;
                let wp = model.forward_probs(&wt)?;
                let wv = wp.values();
                for c in 0..classes {
                    for y in 0..ph {
                        for x in 0..pw {
                            acc[(c * eff_h + oy + y) * eff_w + ox + x] +=
                                wv[(c * ph + y) * pw + x].to_f64();
                        }
                    }
                }
                for y in 0..ph {
                    for x in 0..pw {
                        count[(oy + y) * eff_w + ox + x] += 1;
                    }
                }
            }
        }
        for c in 0..classes {
            for y in 0..h {
                for x in 0..w {
                    let n = count[y * eff_w + x] as f64;
                    probs[((c * d) + z) * h * w + y * w + x] =
                        (acc[(c * eff_h + y) * eff_w + x] / n) as f32;
                }
            }
        }
    }

    let vol = ProbabilityVolume {
        case_id: case.id.clone(),
        class_names: case.class_names.clone(),
        shape: case.shape,
        probs,
        model: model.spec.arch.name().to_string(),
        fold: 0,
    };
    vol.validate()?;
    Ok(vol)
}

/// Per-voxel convex combination of aligned probability volumes.
pub fn ensemble_average(volumes: &[ProbabilityVolume], weights: Option<&[f64]>) -> Result<ProbabilityVolume> {
    let first = volumes
        .first()
        .ok_or_else(|| Error::config("ensemble needs at least one member"))?;
    let w: Vec<f64> = match weights {
        Some(w) => {
            if w.len() != volumes.len() {
                return Err(Error::config(format!(
                    "{} weights for {} members",
                    w.len(),
                    volumes.len()
                )));
            }
            if w.iter().any(|&x| x <= 0.0) {
                return Err(Error::config("ensemble weights must be positive"));
            }
            let total: f64 = w.iter().sum();
            w.iter().map(|&x| x / total).collect()
        }
        None => vec![1.0 / volumes.len() as f64; volumes.len()],
    };
    for v in volumes {
        if v.shape != first.shape || v.class_names != first.class_names {
            return Err(Error::data(format!(
                "ensemble member {} misaligned with {}",
                v.case_id, first.case_id
            )));
        }
    }
    let mut probs = vec![0.0f32; first.probs.len()];
    for (vol, &wi) in volumes.iter().zip(&w) {
        for (acc, &p) in probs.iter_mut().zip(&vol.probs) {
            *acc += (wi * p as f64) as f32;
        }
    }
    let out = ProbabilityVolume {
        case_id: first.case_id.clone(),
        class_names: first.class_names.clone(),
        shape: first.shape,
        probs,
        model: "ensemble".to_string(),
        fold: first.fold,
    };
    out.validate()?;
    Ok(out)
}

/// All index subsets of {0..n} with size >= min_size, in lexicographic
/// order.
pub fn enumerate_subsets(n: usize, min_size: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    // lexicographic: iterate sizes? spec wants deterministic lexicographic
    // enumeration of subsets; generate by binary counting ordered by the
    // member list.
    fn rec(start: usize, n: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>, min: usize) {
        if cur.len() >= min {
            out.push(cur.clone());
        }
        for i in start..n {
            cur.push(i);
            rec(i + 1, n, cur, out, min);
            cur.pop();
        }
    }
    let mut cur = Vec::new();
    rec(0, n, &mut cur, &mut out, min_size.max(1));
    out
}

/// Per-voxel argmax; ties break toward the lowest class index.
pub fn hard_labels(vol: &ProbabilityVolume) -> Vec<u8> {
    let n = vol.voxels();
    let c = vol.classes();
    (0..n)
        .map(|v| {
            let mut best = 0usize;
            let mut best_p = vol.probs[v];
            for cl in 1..c {
                let p = vol.probs[cl * n + v];
                if p > best_p {
                    best_p = p;
                    best = cl;
                }
            }
            best as u8
        })
        .collect()
}

// ---- persistence ----

#[derive(Serialize, Deserialize)]
struct ProbsHeader {
    case_id: String,
    shape: [usize; 3],
    classes: Vec<String>,
    dtype: String,
    model: String,
    fold: usize,
}

/// Persist as `probs.json` + `probs.raw` (f32le, C-order [C,D,H,W]).
pub fn write_probs(vol: &ProbabilityVolume, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), &e))?;
    let header = ProbsHeader {
        case_id: vol.case_id.clone(),
        shape: vol.shape,
        classes: vol.class_names.clone(),
        dtype: "f32le".into(),
        model: vol.model.clone(),
        fold: vol.fold,
    };
    let json = serde_json::to_string_pretty(&header)
        .map_err(|e| Error::data(format!("serialize probs.json: {e}")))?;
    fs::write(dir.join("probs.json"), json)
        .map_err(|e| Error::io(dir.display().to_string(), &e))?;
    let mut bytes = Vec::with_capacity(vol.probs.len() * 4);
    for v in &vol.probs {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(dir.join("probs.raw"), bytes).map_err(|e| Error::io(dir.display().to_string(), &e))
}

pub fn read_probs(dir: &Path) -> Result<ProbabilityVolume> {
    let path = dir.join("probs.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(path.display().to_string(), &e))?;
    let header: ProbsHeader =
        serde_json::from_str(&text).map_err(|e| Error::data(format!("parse probs.json: {e}")))?;
    if header.dtype != "f32le" {
        return Err(Error::data(format!("unknown dtype {}", header.dtype)));
    }
    let raw_path = dir.join("probs.raw");
    let bytes = fs::read(&raw_path).map_err(|e| Error::io(raw_path.display().to_string(), &e))?;
    let n: usize = header.shape.iter().product();
    let c = header.classes.len() + 1;
    if bytes.len() != c * n * 4 {
        return Err(Error::data(format!(
            "probs.raw size mismatch: expected {} bytes, got {}",
            c * n * 4,
            bytes.len()
        )));
    }
    let probs: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let vol = ProbabilityVolume {
        case_id: header.case_id,
        class_names: header.classes,
        shape: header.shape,
        probs,
        model: header.model,
        fold: header.fold,
    };
    vol.validate()?;
    Ok(vol)
}

/// Ensemble manifest: member checkpoints and weights.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EnsembleSpec {
    pub members: Vec<String>,
    pub weights: Option<Vec<f64>>,
}
