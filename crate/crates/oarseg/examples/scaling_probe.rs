use std::time::Instant;
use oarseg::blocks::attention::{attention_exact, attention_performer};
use oarseg::tensor::gradcheck::seeded_uniform;
use oarseg::tensor::graph::Graph;
use oarseg::tensor::Tensor;

fn unit_qkv(t: usize, d: usize) -> [Tensor<f64>; 3] {
    [1u64, 2, 3].map(|s| {
        let mut x = seeded_uniform(&[1, 1, t, d], s);
        let vals = x.values_mut();
        for row in vals.chunks_mut(d) {
            let n: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            for v in row.iter_mut() { *v /= n; }
        }
        x
    })
}

fn time_attention(t: usize, d: usize, m: Option<usize>, reps: usize) -> f64 {
    let qkv = unit_qkv(t, d);
    let mut best = f64::INFINITY;
    for _ in 0..reps {
        let mut g = Graph::<f64>::new();
        let vars: Vec<_> = qkv.iter().map(|x| g.leaf(x.clone(), false).unwrap()).collect();
        let t0 = Instant::now();
        let _out = match m {
            Some(m) => attention_performer(&mut g, vars[0], vars[1], vars[2], m, 5).unwrap(),
            None => attention_exact(&mut g, vars[0], vars[1], vars[2]).unwrap(),
        };
        let dt = t0.elapsed().as_secs_f64();
        if dt < best { best = dt; }
    }
    best
}

fn main() {
    let d = 64; let m = 256; let reps = 5;
    let p1 = time_attention(1024, d, Some(m), reps);
    let p2 = time_attention(2048, d, Some(m), reps);
    let e1 = time_attention(1024, d, None, reps);
    let e2 = time_attention(2048, d, None, reps);
    println!("performer: {:.1}ms -> {:.1}ms  ratio {:.2}", p1*1e3, p2*1e3, p2/p1);
    println!("exact:     {:.1}ms -> {:.1}ms  ratio {:.2}", e1*1e3, e2*1e3, e2/e1);
}
