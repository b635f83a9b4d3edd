//! Volume ingestion and the dataset directory format.
//!
//! A case directory holds `case.json`, `image.raw` (f32le, C-order,
//! channel-major when multi-channel) and `mask.raw` (u8 labels). A
//! dataset root holds one sub-directory per case plus `dataset.json`.

pub mod augment;
pub mod folds;
pub mod preprocess;
pub mod synth;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One patient volume: image voxels, spacing, labels, names.
#[derive(Clone, Debug)]
pub struct PatientCase {
    pub id: String,
    /// Channel-major voxels [M, D, H, W]; M = 1 for single-channel.
    pub image: Vec<f32>,
    pub channels: usize,
    /// [D, H, W]
    pub shape: [usize; 3],
    /// (sz, sy, sx) in millimetres.
    pub spacing_mm: [f64; 3],
    /// Integer labels [D, H, W], 0 = background, 1..=C foreground.
    pub mask: Vec<u8>,
    pub class_names: Vec<String>,
    /// Offset of this volume inside its original grid (set by cropping).
    pub crop_offset: Option<[usize; 3]>,
}

impl PatientCase {
    pub fn voxels(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.voxels();
        if self.image.len() != n * self.channels {
            return Err(Error::data(format!(
                "case {}: image has {} values, shape {:?} x{} wants {}",
                self.id,
                self.image.len(),
                self.shape,
                self.channels,
                n * self.channels
            )));
        }
        if self.mask.len() != n {
            return Err(Error::data(format!(
                "case {}: mask has {} values, shape wants {n}",
                self.id,
                self.mask.len()
            )));
        }
        if self.spacing_mm.iter().any(|&s| s <= 0.0) {
            return Err(Error::data(format!(
                "case {}: non-positive spacing {:?}",
                self.id, self.spacing_mm
            )));
        }
        let c = self.num_classes() as u8;
        if let Some(&bad) = self.mask.iter().find(|&&l| l > c) {
            return Err(Error::data(format!(
                "case {}: label {bad} exceeds class count {c}",
                self.id
            )));
        }
        Ok(())
    }

    /// One 2D slice of image (channel-major) and mask.
    pub fn slice(&self, z: usize) -> (Vec<f32>, &[u8]) {
        let [d, h, w] = self.shape;
        debug_assert!(z < d);
        let plane = h * w;
        let mut img = Vec::with_capacity(self.channels * plane);
        for m in 0..self.channels {
            let base = (m * d + z) * plane;
            img.extend_from_slice(&self.image[base..base + plane]);
        }
        (img, &self.mask[z * plane..(z + 1) * plane])
    }
}

#[derive(Serialize, Deserialize)]
struct CaseHeader {
    id: String,
    shape: [usize; 3],
    channels: usize,
    spacing_mm: [f64; 3],
    classes: Vec<String>,
    image_dtype: String,
    mask_dtype: String,
}

#[derive(Serialize, Deserialize)]
struct DatasetHeader {
    cases: Vec<String>,
    classes: Vec<String>,
}

/// Lossless round-trip write of one case directory.
pub fn write_case(case: &PatientCase, dir: &Path) -> Result<()> {
    case.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), &e))?;
    let header = CaseHeader {
        id: case.id.clone(),
        shape: case.shape,
        channels: case.channels,
        spacing_mm: case.spacing_mm,
        classes: case.class_names.clone(),
        image_dtype: "f32le".into(),
        mask_dtype: "u8".into(),
    };
    let json = serde_json::to_string_pretty(&header)
        .map_err(|e| Error::data(format!("serialize case.json: {e}")))?;
    write_file(&dir.join("case.json"), json.as_bytes())?;
    let mut img_bytes = Vec::with_capacity(case.image.len() * 4);
    for v in &case.image {
        img_bytes.extend_from_slice(&v.to_le_bytes());
    }
    write_file(&dir.join("image.raw"), &img_bytes)?;
    write_file(&dir.join("mask.raw"), &case.mask)?;
    Ok(())
}

pub fn read_case(dir: &Path) -> Result<PatientCase> {
    let json_path = dir.join("case.json");
    let text =
        fs::read_to_string(&json_path).map_err(|e| Error::io(json_path.display().to_string(), &e))?;
    let header: CaseHeader =
        serde_json::from_str(&text).map_err(|e| Error::data(format!("parse case.json: {e}")))?;
    if header.image_dtype != "f32le" {
        return Err(Error::data(format!(
            "unknown image dtype {}",
            header.image_dtype
        )));
    }
    if header.mask_dtype != "u8" {
        return Err(Error::data(format!("unknown mask dtype {}", header.mask_dtype)));
    }
    let n: usize = header.shape.iter().product();
    let img_path = dir.join("image.raw");
    let img_bytes = fs::read(&img_path).map_err(|e| Error::io(img_path.display().to_string(), &e))?;
    let expect = n * header.channels * 4;
    if img_bytes.len() != expect {
        return Err(Error::data(format!(
            "image.raw size mismatch: expected {expect} bytes, got {}",
            img_bytes.len()
        )));
    }
    let image: Vec<f32> = img_bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let mask_path = dir.join("mask.raw");
    let mask = fs::read(&mask_path).map_err(|e| Error::io(mask_path.display().to_string(), &e))?;
    if mask.len() != n {
        return Err(Error::data(format!(
            "mask.raw size mismatch: expected {n} bytes, got {}",
            mask.len()
        )));
    }
    let case = PatientCase {
        id: header.id,
        image,
        channels: header.channels,
        shape: header.shape,
        spacing_mm: header.spacing_mm,
        mask,
        class_names: header.classes,
        crop_offset: None,
    };
    case.validate()?;
    Ok(case)
}

/// Write a dataset root: one directory per case plus `dataset.json`.
pub fn write_dataset(cases: &[PatientCase], root: &Path) -> Result<()> {
    fs::create_dir_all(root).map_err(|e| Error::io(root.display().to_string(), &e))?;
    let classes = cases
        .first()
        .map(|c| c.class_names.clone())
        .unwrap_or_default();
    for case in cases {
        write_case(case, &root.join(&case.id))?;
    }
    let header = DatasetHeader {
        cases: cases.iter().map(|c| c.id.clone()).collect(),
        classes,
    };
    let json = serde_json::to_string_pretty(&header)
        .map_err(|e| Error::data(format!("serialize dataset.json: {e}")))?;
    write_file(&root.join("dataset.json"), json.as_bytes())
}

/// Case ids and class names listed by a dataset root.
pub fn read_dataset_header(root: &Path) -> Result<(Vec<String>, Vec<String>)> {
    let path = root.join("dataset.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(path.display().to_string(), &e))?;
    let header: DatasetHeader =
        serde_json::from_str(&text).map_err(|e| Error::data(format!("parse dataset.json: {e}")))?;
    Ok((header.cases, header.classes))
}

pub fn read_dataset(root: &Path) -> Result<Vec<PatientCase>> {
    let (ids, _) = read_dataset_header(root)?;
    ids.iter().map(|id| read_case(&root.join(id))).collect()
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), &e))
}
