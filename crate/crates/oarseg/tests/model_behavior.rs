//! Cross-architecture behavioral invariants on small instances.

use oarseg::arch::{build_model, ArchKind, Mode, ModelSpec};
use oarseg::tensor::gradcheck::seeded_uniform;
use oarseg::tensor::Tensor;

fn to_f32(t: &Tensor<f64>) -> Tensor<f32> {
    Tensor::from_f64_slice(t.shape(), &t.to_f64_vec()).unwrap()
}

#[test]
fn batch_order_equivariance_eval_mode() {
    for arch in ArchKind::ALL {
        let spec = ModelSpec::desk(arch, 1, 4);
        let model = build_model::<f32>(&spec, 21).unwrap();
        let a = to_f32(&seeded_uniform(&[1, 1, 32, 32], 1));
        let b = to_f32(&seeded_uniform(&[1, 1, 32, 32], 2));
        let mut ab = a.values().to_vec();
        ab.extend_from_slice(b.values());
        let mut ba = b.values().to_vec();
        ba.extend_from_slice(a.values());
        let batch_ab = Tensor::from_vec(&[2, 1, 32, 32], ab).unwrap();
        let batch_ba = Tensor::from_vec(&[2, 1, 32, 32], ba).unwrap();
        let out_ab = model.forward_probs(&batch_ab).unwrap();
        let out_ba = model.forward_probs(&batch_ba).unwrap();
        let n = 4 * 32 * 32;
        assert_eq!(
            &out_ab.values()[..n],
            &out_ba.values()[n..],
            "{arch:?}: sample A differs between batch positions"
        );
        assert_eq!(
            &out_ab.values()[n..],
            &out_ba.values()[..n],
            "{arch:?}: sample B differs between batch positions"
        );
    }
}

#[test]
fn gradients_reach_nearly_all_parameters() {
    // spot check two architectures here; the acceptance suite covers all
    for arch in [ArchKind::Cunet, ArchKind::Msunetr] {
        let spec = ModelSpec::desk(arch, 1, 4);
        let mut model = build_model::<f32>(&spec, 9).unwrap();
        model.set_mode(Mode::Train);
        let x = to_f32(&seeded_uniform(&[2, 1, 64, 64], 3));
        let (mut s, probs) = model.forward_session(&x, 77).unwrap();
        let w = s
            .g
            .constant(to_f32(&seeded_uniform(&[2, 4, 64, 64], 4)))
            .unwrap();
        let prod = s.g.mul(probs, w).unwrap();
        let loss = s.g.sum_all(prod).unwrap();
        let grads = s.grads(loss).unwrap();
        let mut zero_scalars = 0usize;
        let mut total_scalars = 0usize;
        let got: std::collections::BTreeMap<usize, &Tensor<f32>> =
            grads.iter().map(|(id, t)| (id.index(), t)).collect();
        for (idx, entry) in model.params.entries().iter().enumerate() {
            if !entry.trainable {
                continue;
            }
            total_scalars += entry.tensor.numel();
            match got.get(&idx) {
                None => zero_scalars += entry.tensor.numel(),
                Some(g) => zero_scalars += g.values().iter().filter(|&&v| v == 0.0).count(),
            }
        }
        let frac = zero_scalars as f64 / total_scalars as f64;
        assert!(
            frac < 0.05,
            "{arch:?}: {zero_scalars}/{total_scalars} dead parameters"
        );
    }
}
