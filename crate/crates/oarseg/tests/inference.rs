//! Sliding-window inference against per-window oracles, using real
//! desk-scale models.

use oarseg::arch::{build_model, ArchKind, ModelSpec};
use oarseg::data::synth::synth_generate;
use oarseg::data::PatientCase;
use oarseg::infer::{ensemble_average, hard_labels, predict_volume, window_layout};
use oarseg::tensor::Tensor;

fn tiny_model(seed: u64) -> oarseg::arch::Model<f32> {
    let spec = ModelSpec {
        width_base: 8,
        levels: 2,
        ..ModelSpec::desk(ArchKind::Unet, 1, 3)
    };
    build_model::<f32>(&spec, seed).unwrap()
}

fn tiny_case() -> PatientCase {
    let mut cases = synth_generate(1, 2, (6, 24, 24), 11).unwrap();
    cases.pop().unwrap()
}

#[test]
fn patch_sized_slice_equals_single_forward() {
    let model = tiny_model(3);
    let case = tiny_case();
    let [_, h, w] = case.shape;
    let vol = predict_volume(&model, &case, (h, w), 0.5).unwrap();

    // direct forward on slice 0
    let (img, _) = case.slice(0);
    let t = Tensor::<f32>::from_vec(&[1, 1, h, w], img).unwrap();
    let direct = model.forward_probs(&t).unwrap();
    let n = h * w;
    let d = case.shape[0];
    for c in 0..3 {
        for pix in 0..n {
            let got = vol.probs[(c * d) * n + pix];
            let want = direct.values()[c * n + pix];
            assert_eq!(got, want, "class {c} pixel {pix}");
        }
    }
}

#[test]
fn constant_model_output_is_constant_for_any_overlap() {
    // a zero-built model: zero head weights give uniform probabilities
    let mut model = tiny_model(0);
    for id in model.params.ids().collect::<Vec<_>>() {
        let e = model.params.get(id);
        if e.trainable {
            let shape = e.tensor.shape().to_vec();
            model.params.set_tensor(id, Tensor::zeros(&shape));
        }
    }
    let case = tiny_case();
    for overlap in [0.0, 0.25, 0.5] {
        let vol = predict_volume(&model, &case, (12, 12), overlap).unwrap();
        for v in &vol.probs {
            assert!((v - 1.0 / 3.0).abs() < 1e-5, "{v}");
        }
    }
}

#[test]
fn overlap_regions_match_accumulation_oracle() {
    let model = tiny_model(5);
    let case = tiny_case();
    let [d, h, w] = case.shape;
    let (ph, pw) = (12, 12);
    let vol = predict_volume(&model, &case, (ph, pw), 0.5).unwrap();

    // oracle: accumulate per-window forward outputs per pixel
    let oys = window_layout(h, ph, 0.5);
    let oxs = window_layout(w, pw, 0.5);
    for z in 0..d.min(2) {
        let (img, _) = case.slice(z);
        let mut acc = vec![0.0f64; 3 * h * w];
        let mut count = vec![0u32; h * w];
        for &oy in &oys {
            for &ox in &oxs {
                let mut win = vec![0.0f32; ph * pw];
                for y in 0..ph {
                    for x in 0..pw {
                        win[y * pw + x] = img[(oy + y) * w + ox + x];
                    }
                }
                let t = Tensor::<f32>::from_vec(&[1, 1, ph, pw], win).unwrap();
                let probs = model.forward_probs(&t).unwrap();
                for c in 0..3 {
                    for y in 0..ph {
                        for x in 0..pw {
                            acc[c * h * w + (oy + y) * w + ox + x] +=
                                probs.values()[(c * ph + y) * pw + x] as f64;
                        }
                    }
                }
                for y in 0..ph {
                    for x in 0..pw {
                        count[(oy + y) * w + ox + x] += 1;
                    }
                }
            }
        }
        for c in 0..3 {
            for pix in 0..h * w {
                // the volume stores f32; the oracle rounds the same way
                let want = (acc[c * h * w + pix] / count[pix] as f64) as f32;
                let got = vol.probs[(c * d + z) * h * w + pix];
                assert!(
                    (want - got).abs() < 1e-10,
                    "slice {z} class {c} pixel {pix}: {got} vs {want}"
                );
            }
        }
    }
}

#[test]
fn ensemble_permutation_invariance_and_fixed_point() {
    let case = tiny_case();
    let vols: Vec<_> = (0..3)
        .map(|seed| predict_volume(&tiny_model(seed), &case, (12, 12), 0.5).unwrap())
        .collect();
    let a = ensemble_average(&vols, None).unwrap();
    let rev: Vec<_> = vols.iter().rev().cloned().collect();
    let b = ensemble_average(&rev, None).unwrap();
    for (x, y) in a.probs.iter().zip(&b.probs) {
        assert!((x - y).abs() < 1e-6);
    }

    // hard labels of an all-identical ensemble equal the member's
    let same = vec![vols[0].clone(), vols[0].clone(), vols[0].clone()];
    let avg = ensemble_average(&same, None).unwrap();
    assert_eq!(hard_labels(&avg), hard_labels(&vols[0]));
}
