use std::sync::Arc;
use std::time::Instant;
use oarseg::arch::{build_model, ArchKind, Mode, ModelSpec};
use oarseg::data::synth::synth_generate;
use oarseg::data::preprocess::zscore;
use oarseg::tensor::Tensor;
use oarseg::train::adamw::OptimizerState;
use oarseg::train::soft_dice;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let arch = ArchKind::parse(&args[1]).unwrap();
    let steps: u64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(100);
    let cases = synth_generate(2, 4, (6, 48, 48), 42).unwrap();
    let cases: Vec<_> = cases.iter().map(zscore).collect();
    // 8 slices
    let mut images = Vec::new();
    let mut labels: Vec<u8> = Vec::new();
    for c in &cases {
        for z in 1..5 {
            let (img, m) = c.slice(z);
            images.extend(img);
            labels.extend_from_slice(m);
        }
    }
    let batch = Tensor::<f32>::from_vec(&[8, 1, 48, 48], images).unwrap();
    let labels = Arc::new(labels);
    let spec = ModelSpec::desk(arch, 1, 5);
    let mut model = build_model::<f32>(&spec, 7).unwrap();
    model.set_mode(Mode::Train);
    let mut opt = OptimizerState::new(&model.params);
    let t0 = Instant::now();
    let mut last_loss = 0.0;
    for step in 0..steps {
        let (mut s, probs) = model.forward_session(&batch, step).unwrap();
        let loss = s.g.dice_ce(probs, labels.clone(), 1.0, 1.0).unwrap();
        last_loss = s.g.value(loss).item() as f64;
        if step % 50 == 0 { eprintln!("  step {step}: loss {last_loss:.4}"); }
        let grads = s.grads(loss).unwrap();
        let updates = std::mem::take(&mut s.buffer_updates);
        drop(s);
        opt.step(&mut model.params, &grads, 1e-3, 0.0).unwrap();
        model.apply_buffer_updates(updates);
    }
    let elapsed = t0.elapsed().as_secs_f64();
    model.set_mode(Mode::Eval);
    let probs = model.forward_probs(&batch).unwrap();
    let dice = soft_dice(&probs, &labels);
    println!("{}: {steps} steps in {elapsed:.1}s ({:.0}ms/step), loss {last_loss:.4}, eval soft-dice {dice:.4}",
             arch.name(), 1000.0*elapsed/steps as f64);
}
