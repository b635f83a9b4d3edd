//! The optimization loop: combined Dice/cross-entropy objective, AdamW,
//! plateau schedule, per-fold training with deterministic sampling.

pub mod adamw;
pub mod scheduler;

use std::sync::Arc;
use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arch::{build_model, Mode, Model, ModelSpec};
use crate::blocks::ParamSet;
use crate::data::augment::{augment, sample_patch_cached, AugmentPolicy};
use crate::data::folds::FoldSplit;
use crate::data::PatientCase;
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};
use adamw::OptimizerState;
use scheduler::PlateauScheduler;

/// Training protocol presets.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// patch 320, 100 epochs, no flips
    Cervix,
    /// patch 128, 50 epochs, flips on
    Brain,
    /// CPU-sized: patch 64, 5 epochs, no flips
    Desk,
}

impl Preset {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "cervix" => Ok(Preset::Cervix),
            "brain" => Ok(Preset::Brain),
            "desk" => Ok(Preset::Desk),
            other => Err(Error::config(format!("unknown preset '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Preset::Cervix => "cervix",
            Preset::Brain => "brain",
            Preset::Desk => "desk",
        }
    }
}

/// Full training configuration; every field is recorded in run metadata.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub epochs: usize,
    pub patience: usize,
    pub lr_factor: f64,
    pub lr_min: f64,
    pub patch: (usize, usize),
    pub loss_weights: (f64, f64),
    pub seed: u64,
    /// 0 = one nominal pass: ceil(training slices / batch).
    pub iterations_per_epoch: usize,
    pub augment: AugmentPolicyConfig,
    pub fg_fraction: f64,
}

#[derive(Copy, Clone, Debug, Serialize, Deserialize)]
pub struct AugmentPolicyConfig {
    pub rotate: bool,
    pub scale: bool,
    pub flip: bool,
}

impl From<AugmentPolicyConfig> for AugmentPolicy {
    fn from(c: AugmentPolicyConfig) -> Self {
        AugmentPolicy {
            rotate: c.rotate,
            scale: c.scale,
            flip: c.flip,
        }
    }
}

impl TrainConfig {
    pub fn for_preset(preset: Preset, seed: u64) -> Self {
        let (patch, epochs, flip, batch) = match preset {
            Preset::Cervix => (320, 100, false, 16),
            Preset::Brain => (128, 50, true, 16),
            Preset::Desk => (64, 5, false, 8),
        };
        TrainConfig {
            lr: 3e-4,
            weight_decay: 0.05,
            batch,
            epochs,
            patience: 3,
            lr_factor: 0.5,
            lr_min: 1e-5,
            patch: (patch, patch),
            loss_weights: (1.0, 1.0),
            seed,
            iterations_per_epoch: 0,
            augment: AugmentPolicyConfig {
                rotate: true,
                scale: true,
                flip,
            },
            fg_fraction: 1.0 / 3.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr_factor > 0.0 && self.lr_factor < 1.0) {
            return Err(Error::config("lr_factor must be in (0,1)"));
        }
        if self.lr_min > self.lr {
            return Err(Error::config("lr_min must not exceed lr"));
        }
        if self.batch == 0 {
            return Err(Error::config("batch must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.fg_fraction) {
            return Err(Error::config("fg_fraction must be in [0,1]"));
        }
        Ok(())
    }
}

/// One row of the training log.
#[derive(Clone, Debug, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub train_loss: f64,
    pub val_soft_dice: f64,
    pub wall_seconds: f64,
}

pub struct TrainOutcome<T: Element> {
    pub model: Model<T>,
    pub log: Vec<EpochLog>,
    /// Parameter snapshot with the best validation soft-Dice.
    pub best_params: ParamSet<T>,
    pub best_val_soft_dice: f64,
}

/// Mean foreground soft-Dice between predicted probabilities [N,C,H,W]
/// and integer labels, batch-aggregated per class.
pub fn soft_dice<T: Element>(probs: &Tensor<T>, labels: &[u8]) -> f64 {
    let s = probs.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let hw = h * w;
    debug_assert_eq!(labels.len(), n * hw);
    let pv = probs.values();
    let smooth = 1e-5;
    let mut total = 0.0;
    for cls in 1..c {
        let (mut sp, mut sg, mut si) = (0.0f64, 0.0f64, 0.0f64);
        for ni in 0..n {
            for pix in 0..hw {
                let p = pv[(ni * c + cls) * hw + pix].to_f64();
                let g = (labels[ni * hw + pix] as usize == cls) as u8 as f64;
                sp += p;
                sg += g;
                si += p * g;
            }
        }
        total += (2.0 * si + smooth) / (sp + sg + smooth);
    }
    total / (c - 1).max(1) as f64
}

fn mix_seed(seed: u64, step: u64) -> u64 {
    // splitmix-style stirring keeps per-step feature draws independent
    let mut z = seed ^ step.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Train one cross-validation fold on preprocessed cases. Fully
/// deterministic given the config seed.
pub fn train_fold<T: Element>(
    spec: &ModelSpec,
    cases: &[PatientCase],
    split: &FoldSplit,
    fold: usize,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if fold >= split.k {
        return Err(Error::config(format!(
            "fold {fold} out of range (k={})",
            split.k
        )));
    }
    let train_cases: Vec<&PatientCase> = cases
        .iter()
        .filter(|c| split.assignments.get(&c.id) != Some(&fold))
        .collect();
    let val_cases: Vec<&PatientCase> = cases
        .iter()
        .filter(|c| split.assignments.get(&c.id) == Some(&fold))
        .collect();
    if train_cases.is_empty() {
        return Err(Error::config("empty training partition"));
    }

    let mut model = build_model::<T>(spec, cfg.seed)?;
    model.set_mode(Mode::Train);
    let mut opt = OptimizerState::new(&model.params);
    let mut sched = PlateauScheduler::new(cfg.lr, cfg.lr_factor, cfg.patience, cfg.lr_min);

    let total_slices: usize = train_cases.iter().map(|c| c.shape[0]).sum();
    let iters = if cfg.iterations_per_epoch > 0 {
        cfg.iterations_per_epoch
    } else {
        total_slices.div_ceil(cfg.batch)
    };

    let fg_lists: Vec<Vec<usize>> = train_cases
        .iter()
        .map(|c| {
            c.mask
                .iter()
                .enumerate()
                .filter(|(_, &v)| v > 0)
                .map(|(i, _)| i)
                .collect()
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0xda7a));
    let policy: AugmentPolicy = cfg.augment.into();
    let channels = train_cases[0].channels;
    let (ph, pw) = cfg.patch;
    let num_classes = spec.num_classes;

    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best_val = f64::NEG_INFINITY;
    let mut best_params = model.params.clone();
    let mut lr = cfg.lr;
    let started = Instant::now();

    for epoch in 0..cfg.epochs {
        let mut epoch_loss = 0.0;
        for it in 0..iters {
            let mut images = Vec::with_capacity(cfg.batch * channels * ph * pw);
            let mut labels = Vec::with_capacity(cfg.batch * ph * pw);
            for _ in 0..cfg.batch {
                let ci = rng.random_range(0..train_cases.len());
                let (img, mask) =
                    sample_patch_cached(train_cases[ci], &fg_lists[ci], (ph, pw), &mut rng, cfg.fg_fraction);
                let (img, mask) = augment(&img, &mask, channels, ph, pw, policy, &mut rng);
                images.extend_from_slice(&img);
                labels.extend_from_slice(&mask);
            }
            let batch_t = Tensor::<T>::from_vec(
                &[cfg.batch, channels, ph, pw],
                images.into_iter().map(|v| T::from_f64(v as f64)).collect(),
            )?;
            if let Some(&bad) = labels.iter().find(|&&l| l as usize >= num_classes) {
                return Err(Error::data(format!(
                    "label {bad} exceeds num_classes {num_classes}"
                )));
            }
            let step_seed = mix_seed(cfg.seed, opt.step + 1);
            let step_result = (|| -> Result<f64> {
                let (mut session, probs) = model.forward_session(&batch_t, step_seed)?;
                let loss = session.g.dice_ce(
                    probs,
                    Arc::new(labels),
                    cfg.loss_weights.0,
                    cfg.loss_weights.1,
                )?;
                let loss_val = session.g.value(loss).item().to_f64();
                let grads = session.grads(loss)?;
                let updates = std::mem::take(&mut session.buffer_updates);
                drop(session);
                opt.step(&mut model.params, &grads, lr, cfg.weight_decay)?;
                model.apply_buffer_updates(updates);
                Ok(loss_val)
            })();
            let loss_val = step_result.map_err(|e| match e {
                Error::NonFinite { context } => Error::NonFinite {
                    context: format!("epoch {epoch} iteration {it}: {context}"),
                },
                other => other,
            })?;
            epoch_loss += loss_val;
        }
        let mean_loss = epoch_loss / iters as f64;

        // validation diagnostic: mean soft-Dice over full validation slices
        model.set_mode(Mode::Eval);
        let mut val_dice = f64::NAN;
        if !val_cases.is_empty() {
            let mut acc = 0.0;
            let mut count = 0usize;
            for case in &val_cases {
                let [d, h, w] = case.shape;
                for z in 0..d {
                    let (img, mask) = case.slice(z);
                    let t = Tensor::<T>::from_vec(
                        &[1, channels, h, w],
                        img.into_iter().map(|v| T::from_f64(v as f64)).collect(),
                    )?;
                    let probs = model.forward_probs(&t)?;
                    acc += soft_dice(&probs, mask);
                    count += 1;
                }
            }
            val_dice = acc / count.max(1) as f64;
            if val_dice > best_val {
                best_val = val_dice;
                best_params = model.params.clone();
            }
        }
        model.set_mode(Mode::Train);

        log.push(EpochLog {
            epoch,
            step: opt.step,
            lr,
            train_loss: mean_loss,
            val_soft_dice: val_dice,
            wall_seconds: started.elapsed().as_secs_f64(),
        });
        lr = sched.step(mean_loss);
    }

    model.set_mode(Mode::Eval);
    Ok(TrainOutcome {
        model,
        log,
        best_params,
        best_val_soft_dice: best_val,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::ArchKind;
    use crate::data::folds::make_folds;
    use crate::data::synth::synth_generate;
    use crate::tensor::graph::Graph;

    #[test]
    fn dice_ce_perfect_prediction_is_near_zero() {
        let mut g = Graph::<f64>::new();
        // 2 classes, 2x2, prediction exactly one-hot of target
        let labels: Vec<u8> = vec![0, 1, 1, 0];
        let mut probs = vec![0.0; 2 * 4];
        for (pix, &l) in labels.iter().enumerate() {
            probs[l as usize * 4 + pix] = 1.0;
        }
        let p = g
            .leaf(Tensor::from_vec(&[1, 2, 2, 2], probs).unwrap(), false)
            .unwrap();
        let loss = g.dice_ce(p, Arc::new(labels), 1.0, 1.0).unwrap();
        assert!(g.value(loss).item() <= 1e-4);
    }

    #[test]
    fn dice_ce_uniform_balanced_is_ln2_plus_dice() {
        let mut g = Graph::<f64>::new();
        let labels: Vec<u8> = vec![0, 1, 0, 1];
        let probs = vec![0.5; 2 * 4];
        let p = g
            .leaf(Tensor::from_vec(&[1, 2, 2, 2], probs).unwrap(), false)
            .unwrap();
        // ce weight 1, dice weight 0 isolates the cross-entropy term
        let loss = g.dice_ce(p, Arc::new(labels), 0.0, 1.0).unwrap();
        assert!((g.value(loss).item() - std::f64::consts::LN_2).abs() < 1e-6);
    }

    #[test]
    fn dice_ce_matches_scalar_oracle() {
        // random 2x2, C=3 instance vs a direct per-pixel computation
        let labels: Vec<u8> = vec![2, 0, 1, 1];
        let raw = [
            0.2, 0.5, 0.1, 0.6, 0.3, 0.3, 0.3, 0.1, 0.5, 0.2, 0.6, 0.3,
        ];
        let mut g = Graph::<f64>::new();
        let p = g
            .leaf(Tensor::from_vec(&[1, 3, 2, 2], raw.to_vec()).unwrap(), false)
            .unwrap();
        let (wd, wc) = (0.7, 1.3);
        let loss = g.dice_ce(p, Arc::new(labels.clone()), wd, wc).unwrap();

        let at = |c: usize, pix: usize| raw[c * 4 + pix];
        let mut ce = 0.0;
        for pix in 0..4 {
            ce -= at(labels[pix] as usize, pix).ln();
        }
        ce /= 4.0;
        let mut dice_sum = 0.0;
        for c in 1..3 {
            let (mut sp, mut sg, mut si) = (0.0, 0.0, 0.0);
            for pix in 0..4 {
                let p = at(c, pix);
                let gt = (labels[pix] as usize == c) as u8 as f64;
                sp += p;
                sg += gt;
                si += p * gt;
            }
            dice_sum += (2.0 * si + 1e-5) / (sp + sg + 1e-5);
        }
        let expect = wc * ce + wd * (1.0 - dice_sum / 2.0);
        assert!((g.value(loss).item() - expect).abs() < 1e-10);
    }

    #[test]
    fn dice_ce_label_out_of_range_errors() {
        let mut g = Graph::<f64>::new();
        let p = g
            .leaf(Tensor::full(&[1, 2, 1, 1], 0.5), false)
            .unwrap();
        assert!(g.dice_ce(p, Arc::new(vec![2u8]), 1.0, 1.0).is_err());
    }

    #[test]
    fn tiny_training_descends_and_is_deterministic() {
        let cases = synth_generate(4, 2, (6, 32, 32), 5).unwrap();
        let ids: Vec<String> = cases.iter().map(|c| c.id.clone()).collect();
        let split = make_folds(&ids, 2, 0).unwrap();
        let spec = ModelSpec {
            width_base: 8,
            levels: 2,
            ..ModelSpec::desk(ArchKind::Unet, 1, 3)
        };
        let mut cfg = TrainConfig::for_preset(Preset::Desk, 3);
        cfg.patch = (32, 32);
        cfg.batch = 4;
        cfg.epochs = 3;
        cfg.iterations_per_epoch = 6;
        let out1 = train_fold::<f32>(&spec, &cases, &split, 0, &cfg).unwrap();
        assert!(
            out1.log.last().unwrap().train_loss < out1.log[0].train_loss,
            "loss did not descend: {:?}",
            out1.log.iter().map(|l| l.train_loss).collect::<Vec<_>>()
        );
        let out2 = train_fold::<f32>(&spec, &cases, &split, 0, &cfg).unwrap();
        for (a, b) in out1
            .model
            .params
            .entries()
            .iter()
            .zip(out2.model.params.entries())
        {
            assert_eq!(a.tensor.values(), b.tensor.values(), "{}", a.name);
        }
    }
}
