//! The seven segmentation networks: spec-driven construction, forward
//! probability maps, parameter counting and checkpoint I/O.

pub mod checkpoint;
pub mod decoder;
pub mod encoders;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::blocks::{ParamBuilder, ParamId, Session};
use crate::error::{Error, Result};
use crate::tensor::graph::Var;
use crate::tensor::{Element, Tensor};
use decoder::{Decoder, DecoderStyle};
use encoders::{
    ArchConfig, CunetEncoder, DecepticonvEncoder, EncoderOut, MsunetrEncoder, SwinUnetrEncoder,
    SwinconvnetEncoder, UnetEncoder, UnetrEncoder,
};

/// The investigated architectures.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchKind {
    Unet,
    Cunet,
    Unetr,
    SwinUnetr,
    Msunetr,
    Decepticonv,
    Swinconvnet,
}

impl ArchKind {
    pub const ALL: [ArchKind; 7] = [
        ArchKind::Unet,
        ArchKind::Cunet,
        ArchKind::Unetr,
        ArchKind::SwinUnetr,
        ArchKind::Msunetr,
        ArchKind::Decepticonv,
        ArchKind::Swinconvnet,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ArchKind::Unet => "unet",
            ArchKind::Cunet => "cunet",
            ArchKind::Unetr => "unetr",
            ArchKind::SwinUnetr => "swin_unetr",
            ArchKind::Msunetr => "msunetr",
            ArchKind::Decepticonv => "decepticonv",
            ArchKind::Swinconvnet => "swinconvnet",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::config(format!("unknown architecture '{s}'")))
    }

    /// Published full-scale parameter counts used as report anchors.
    pub fn reference_param_count(&self) -> usize {
        match self {
            ArchKind::Unet => 10_188_773,
            ArchKind::Cunet => 14_605_301,
            ArchKind::Unetr => 87_118_837,
            ArchKind::SwinUnetr => 25_122_917,
            ArchKind::Msunetr => 7_979_765,
            ArchKind::Decepticonv => 27_782_549,
            ArchKind::Swinconvnet => 27_106_037,
        }
    }
}

/// Width/depth scale: full published scale or a CPU-sized configuration
/// that preserves every wiring feature.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalePreset {
    Paper,
    Desk,
}

/// Architecture identifier plus hyperparameters; fully determines a
/// parameter set together with a seed.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub arch: ArchKind,
    pub in_channels: usize,
    pub num_classes: usize,
    pub width_base: usize,
    pub levels: usize,
    pub scale_preset: ScalePreset,
}

impl ModelSpec {
    pub fn paper(arch: ArchKind, in_channels: usize, num_classes: usize) -> Self {
        ModelSpec {
            arch,
            in_channels,
            num_classes,
            width_base: 48,
            levels: 4,
            scale_preset: ScalePreset::Paper,
        }
    }

    pub fn desk(arch: ArchKind, in_channels: usize, num_classes: usize) -> Self {
        ModelSpec {
            arch,
            in_channels,
            num_classes,
            width_base: 16,
            levels: 3,
            scale_preset: ScalePreset::Desk,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width_base < 8 {
            return Err(Error::config("width_base must be >= 8"));
        }
        if self.levels < 2 {
            return Err(Error::config("levels must be >= 2"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("num_classes must be >= 2"));
        }
        if self.in_channels == 0 {
            return Err(Error::config("in_channels must be >= 1"));
        }
        Ok(())
    }

    fn arch_config(&self) -> ArchConfig {
        let (nominal, vit_layers, vit_embed, performer_features) = match self.scale_preset {
            ScalePreset::Paper => (320, 12, 768, 256),
            ScalePreset::Desk => (96, 6, 96, 128),
        };
        ArchConfig {
            in_channels: self.in_channels,
            width: self.width_base,
            levels: self.levels,
            nominal,
            vit_layers,
            vit_embed,
            performer_features,
            window: 4,
            se_reduction: 8,
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

enum Network {
    Unet(UnetEncoder),
    Cunet(CunetEncoder),
    Unetr(UnetrEncoder),
    SwinUnetr(SwinUnetrEncoder),
    Msunetr(MsunetrEncoder),
    Decepticonv(DecepticonvEncoder),
    Swinconvnet(SwinconvnetEncoder),
}

/// A built network: spec, seeded parameters, mode.
pub struct Model<T: Element> {
    pub spec: ModelSpec,
    pub seed: u64,
    pub params: crate::blocks::ParamSet<T>,
    net: Network,
    dec: Decoder,
    pub mode: Mode,
}

/// Construct a model with seeded initialization. Two builds with the
/// same spec and seed produce byte-identical parameter buffers.
pub fn build_model<T: Element>(spec: &ModelSpec, seed: u64) -> Result<Model<T>> {
    spec.validate()?;
    let cfg = spec.arch_config();
    let mut pb = ParamBuilder::<T>::new(seed);
    let ch: Vec<usize> = (1..=cfg.levels).map(|l| cfg.ch(l)).collect();
    let deep = cfg.ch(cfg.levels);
    // skip channel layout per family (index 0 = full resolution)
    let classic_skips = ch.clone();
    let stem_skips: Vec<usize> = std::iter::once(cfg.ch(1))
        .chain(ch[..cfg.levels - 1].iter().copied())
        .collect();
    let (net, dec) = match spec.arch {
        ArchKind::Unet => {
            let enc = UnetEncoder::new(&mut pb, &cfg);
            let dec = Decoder::new(
                &mut pb,
                DecoderStyle::DoubleConv,
                cfg.width,
                &classic_skips,
                deep,
                spec.num_classes,
            );
            (Network::Unet(enc), dec)
        }
        ArchKind::Cunet => {
            let enc = CunetEncoder::new(&mut pb, &cfg);
            let dec = Decoder::new(
                &mut pb,
                DecoderStyle::Residual,
                cfg.width,
                &classic_skips,
                deep,
                spec.num_classes,
            );
            (Network::Cunet(enc), dec)
        }
        ArchKind::Unetr => {
            let enc = UnetrEncoder::new(&mut pb, &cfg);
            let dec = Decoder::new(
                &mut pb,
                DecoderStyle::Residual,
                cfg.width,
                &classic_skips,
                deep,
                spec.num_classes,
            );
            (Network::Unetr(enc), dec)
        }
        ArchKind::SwinUnetr => {
            let enc = SwinUnetrEncoder::new(&mut pb, &cfg);
            let dec = Decoder::new(
                &mut pb,
                DecoderStyle::Residual,
                cfg.width,
                &stem_skips,
                deep,
                spec.num_classes,
            );
            (Network::SwinUnetr(enc), dec)
        }
        ArchKind::Msunetr => {
            let enc = MsunetrEncoder::new(&mut pb, &cfg);
            let dec = Decoder::new(
                &mut pb,
                DecoderStyle::Residual,
                cfg.width,
                &stem_skips,
                deep,
                spec.num_classes,
            );
            (Network::Msunetr(enc), dec)
        }
        ArchKind::Decepticonv => {
            let enc = DecepticonvEncoder::new(&mut pb, &cfg)?;
            let dec = Decoder::new(
                &mut pb,
                DecoderStyle::Residual,
                cfg.width,
                &stem_skips,
                deep,
                spec.num_classes,
            );
            (Network::Decepticonv(enc), dec)
        }
        ArchKind::Swinconvnet => {
            let enc = SwinconvnetEncoder::new(&mut pb, &cfg)?;
            let dec = Decoder::new(
                &mut pb,
                DecoderStyle::Residual,
                cfg.width,
                &stem_skips,
                deep,
                spec.num_classes,
            );
            (Network::Swinconvnet(enc), dec)
        }
    };
    Ok(Model {
        spec: spec.clone(),
        seed,
        params: pb.finish(),
        net,
        dec,
        mode: Mode::Eval,
    })
}

impl<T: Element> Model<T> {
    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    /// Forward pass producing per-pixel class probabilities, exposing the
    /// session so callers can attach a loss and run backward.
    ///
    /// The input is zero-padded to divisibility by 2^levels internally
    /// and the output is cropped back.
    pub fn forward_session(&self, image: &Tensor<T>, seed: u64) -> Result<(Session<'_, T>, Var)> {
        let sh = image.shape().to_vec();
        if sh.len() != 4 || sh[1] != self.spec.in_channels {
            return Err(Error::shape(
                "forward",
                format!(
                    "want [N,{},H,W], got {sh:?}",
                    self.spec.in_channels
                ),
            ));
        }
        let div = 1usize << self.spec.levels;
        let (h, w) = (sh[2], sh[3]);
        if h < div || w < div {
            return Err(Error::shape(
                "forward",
                format!("extent {h}x{w} below minimum {div}"),
            ));
        }
        let training = self.mode == Mode::Train;
        let mut s = Session::new(&self.params, training, seed);
        let mut x = s.g.leaf(image.clone(), false)?;
        let pad_h = h.div_ceil(div) * div - h;
        let pad_w = w.div_ceil(div) * div - w;
        if pad_h > 0 || pad_w > 0 {
            x = s.g.pad2d(x, [0, pad_h, 0, pad_w])?;
        }
        let arch = self.spec.arch.name();
        let EncoderOut { skips, bottleneck } = self
            .net
            .forward(&mut s, x)
            .map_err(|e| annotate(e, arch, "encoder"))?;
        let logits = self
            .dec
            .forward(&mut s, bottleneck, &skips)
            .map_err(|e| annotate(e, arch, "decoder"))?;
        let mut probs = s.g.softmax(logits, 1)?;
        if pad_h > 0 || pad_w > 0 {
            probs = s.g.crop2d(probs, [0, pad_h, 0, pad_w])?;
        }
        Ok((s, probs))
    }

    /// Per-pixel class probabilities (eval convenience; deterministic
    /// given parameters and the model seed).
    pub fn forward_probs(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let (s, probs) = self.forward_session(image, self.seed)?;
        Ok(s.g.value(probs).clone())
    }

    /// Exact trainable scalar count plus a per-module breakdown.
    pub fn count_params(&self) -> (usize, BTreeMap<String, usize>) {
        let mut by_module: BTreeMap<String, usize> = BTreeMap::new();
        for e in self.params.entries() {
            if !e.trainable {
                continue;
            }
            let prefix = e.name.split('.').next().unwrap_or("").to_string();
            *by_module.entry(prefix).or_default() += e.tensor.numel();
        }
        (self.params.count_trainable(), by_module)
    }

    /// Apply collected running-statistic updates (training thread only).
    pub fn apply_buffer_updates(&mut self, updates: Vec<(ParamId, Tensor<T>)>) {
        for (id, t) in updates {
            self.params.set_tensor(id, t);
        }
    }
}

impl Network {
    fn forward<T: Element>(&self, s: &mut Session<T>, x: Var) -> Result<EncoderOut> {
        match self {
            Network::Unet(e) => e.forward(s, x),
            Network::Cunet(e) => e.forward(s, x),
            Network::Unetr(e) => e.forward(s, x),
            Network::SwinUnetr(e) => e.forward(s, x),
            Network::Msunetr(e) => e.forward(s, x),
            Network::Decepticonv(e) => e.forward(s, x),
            Network::Swinconvnet(e) => e.forward(s, x),
        }
    }
}

fn annotate(e: Error, arch: &str, stage: &str) -> Error {
    match e {
        Error::NonFinite { context } => Error::NonFinite {
            context: format!("{arch}/{stage}/{context}"),
        },
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_builds_identical_parameters() {
        let spec = ModelSpec::desk(ArchKind::Cunet, 1, 5);
        let a = build_model::<f32>(&spec, 11).unwrap();
        let b = build_model::<f32>(&spec, 11).unwrap();
        for (ea, eb) in a.params.entries().iter().zip(b.params.entries()) {
            assert_eq!(ea.name, eb.name);
            assert_eq!(ea.tensor.values(), eb.tensor.values());
        }
        let c = build_model::<f32>(&spec, 12).unwrap();
        let differs = a
            .params
            .entries()
            .iter()
            .zip(c.params.entries())
            .any(|(x, y)| x.tensor.values() != y.tensor.values());
        assert!(differs);
    }

    #[test]
    fn unet_paper_parameter_count_matches_reference_exactly() {
        let spec = ModelSpec::paper(ArchKind::Unet, 1, 5);
        let model = build_model::<f32>(&spec, 0).unwrap();
        let (total, _) = model.count_params();
        assert_eq!(total, 10_188_773);
    }

    #[test]
    fn unet_width_scaling_is_roughly_quadratic() {
        let mut spec = ModelSpec::paper(ArchKind::Unet, 1, 5);
        spec.width_base = 24;
        let half = build_model::<f32>(&spec, 0).unwrap().count_params().0;
        let full = build_model::<f32>(&ModelSpec::paper(ArchKind::Unet, 1, 5), 0)
            .unwrap()
            .count_params()
            .0;
        let ratio = half as f64 / full as f64;
        assert!(ratio > 0.24 && ratio < 0.26, "ratio {ratio}");
    }

    #[test]
    fn desk_models_forward_96px() {
        for arch in ArchKind::ALL {
            let spec = ModelSpec::desk(arch, 1, 5);
            let model = build_model::<f32>(&spec, 3).unwrap();
            let x = crate::tensor::Tensor::full(&[1, 1, 96, 96], 0.25f32);
            let probs = model.forward_probs(&x).unwrap();
            assert_eq!(probs.shape(), &[1, 5, 96, 96], "{arch:?}");
            // per-pixel class sums = 1
            let v = probs.values();
            for pix in 0..96 * 96 {
                let s: f32 = (0..5).map(|c| v[c * 96 * 96 + pix]).sum();
                assert!((s - 1.0).abs() < 1e-5, "{arch:?} sum {s}");
            }
        }
    }

    #[test]
    fn msunetr_desk_small_extent_smoke() {
        let mut spec = ModelSpec::desk(ArchKind::Msunetr, 1, 3);
        spec.width_base = 16;
        let model = build_model::<f32>(&spec, 1).unwrap();
        let x = crate::tensor::Tensor::full(&[1, 1, 64, 64], 0.1f32);
        let probs = model.forward_probs(&x).unwrap();
        assert_eq!(probs.shape(), &[1, 3, 64, 64]);
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let spec = ModelSpec::desk(ArchKind::Msunetr, 1, 4);
        let model = build_model::<f32>(&spec, 5).unwrap();
        let x = crate::tensor::gradcheck::seeded_uniform(&[1, 1, 64, 64], 9);
        let xf: crate::tensor::Tensor<f32> =
            crate::tensor::Tensor::from_f64_slice(x.shape(), &x.to_f64_vec()).unwrap();
        let a = model.forward_probs(&xf).unwrap();
        let b = model.forward_probs(&xf).unwrap();
        assert_eq!(a.values(), b.values());
    }
}
