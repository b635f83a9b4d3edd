//! Attention variants: exact softmax attention, linear-time positive
//! random-feature estimation, and shifted-window local attention.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::graph::{Graph, Var};
use crate::tensor::{Element, Tensor};

/// softmax(q k^T / sqrt(d)) v on [B, heads, T, d].
pub fn attention_exact<T: Element>(g: &mut Graph<T>, q: Var, k: Var, v: Var) -> Result<Var> {
    let s = g.shape(q).to_vec();
    if s.len() != 4 || g.shape(k) != s.as_slice() || g.shape(v) != s.as_slice() {
        return Err(Error::shape(
            "attention_exact",
            format!("q/k/v must share [B,heads,T,d]; got {s:?}"),
        ));
    }
    let (b, h, t, d) = (s[0], s[1], s[2], s[3]);
    let q = g.reshape(q, &[b * h, t, d])?;
    let k = g.reshape(k, &[b * h, t, d])?;
    let v = g.reshape(v, &[b * h, t, d])?;
    let out = attention_exact_flat(g, q, k, v, None)?;
    g.reshape(out, &[b, h, t, d])
}

/// Exact attention over [N, T, d] with an optional additive score mask.
pub fn attention_exact_flat<T: Element>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    mask: Option<Var>,
) -> Result<Var> {
    let d = *g.shape(q).last().expect("rank 3");
    let scale = T::from_f64(1.0 / (d as f64).sqrt());
    let scores = g.matmul(q, k, false, true)?;
    let scores = g.mul_scalar(scores, scale)?;
    let scores = match mask {
        Some(m) => g.add(scores, m)?,
        None => scores,
    };
    let ndim = g.shape(scores).len();
    let attn = g.softmax(scores, ndim - 1)?;
    g.matmul(attn, v, false, false)
}

/// FAVOR+ feature matrix: `m` rows, orthogonalized per d-sized group via
/// QR and rescaled to chi-distributed norms so the softmax-kernel
/// estimate stays unbiased.
pub fn performer_features<T: Element>(m: usize, d: usize, seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = StandardNormal;
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(m);
    while rows.len() < m {
        let take = (m - rows.len()).min(d);
        // draw a d x d gaussian block and orthogonalize it
        let mut block: Vec<Vec<f64>> = (0..d)
            .map(|_| (0..d).map(|_| normal.sample(&mut rng)).collect())
            .collect();
        gram_schmidt(&mut block);
        for brow in block.into_iter().take(take) {
            // rescale to the norm of an independent gaussian row
            let norm: f64 = (0..d)
                .map(|_| {
                    let x: f64 = normal.sample(&mut rng);
                    x * x
                })
                .sum::<f64>()
                .sqrt();
            rows.push(brow.iter().map(|&v| v * norm).collect());
        }
    }
    let data: Vec<T> = rows
        .into_iter()
        .flatten()
        .map(T::from_f64)
        .collect();
    Tensor::from_vec(&[m, d], data).expect("m*d elements")
}

fn gram_schmidt(rows: &mut [Vec<f64>]) {
    let d = rows[0].len();
    for i in 0..rows.len() {
        for j in 0..i {
            let dot: f64 = (0..d).map(|c| rows[i][c] * rows[j][c]).sum();
            for c in 0..d {
                rows[i][c] -= dot * rows[j][c];
            }
        }
        let norm: f64 = rows[i].iter().map(|v| v * v).sum::<f64>().sqrt();
        let inv = if norm > 1e-12 { 1.0 / norm } else { 0.0 };
        for c in 0..d {
            rows[i][c] *= inv;
        }
    }
}

/// Linear-attention estimate of softmax attention on [B, heads, T, d]:
/// phi(x) = exp(w^T x - |x|^2/2)/sqrt(m) with q,k pre-scaled by d^(-1/4);
/// output rows are normalized by the matching phi(q)(phi(k)^T 1) sums.
/// Cost is O(T·m·d); no TxT matrix is ever formed.
pub fn attention_performer<T: Element>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    random_features: usize,
    seed: u64,
) -> Result<Var> {
    if random_features == 0 {
        return Err(Error::config("performer needs random_features >= 1"));
    }
    let s = g.shape(q).to_vec();
    if s.len() != 4 || g.shape(k) != s.as_slice() || g.shape(v) != s.as_slice() {
        return Err(Error::shape(
            "attention_performer",
            format!("q/k/v must share [B,heads,T,d]; got {s:?}"),
        ));
    }
    let (b, h, t, d) = (s[0], s[1], s[2], s[3]);
    if t == 1 {
        // the estimate reduces to v identically: one key carries all mass
        return Ok(v);
    }
    let n = b * h;
    let q = g.reshape(q, &[n, t, d])?;
    let k = g.reshape(k, &[n, t, d])?;
    let v = g.reshape(v, &[n, t, d])?;

    let w = g.constant(performer_features::<T>(random_features, d, seed))?;
    let scale = T::from_f64(1.0 / (d as f64).powf(0.25));
    let qs = g.mul_scalar(q, scale)?;
    let ks = g.mul_scalar(k, scale)?;

    let phi_q = feature_map(g, qs, w, Stabilizer::PerRow)?;
    let phi_k = feature_map(g, ks, w, Stabilizer::Global)?;
    let inv_sqrt_m = T::from_f64(1.0 / (random_features as f64).sqrt());
    let phi_q = g.mul_scalar(phi_q, inv_sqrt_m)?;
    let phi_k = g.mul_scalar(phi_k, inv_sqrt_m)?;

    // row normalizer D = phi(q) (sum_t phi(k))^T
    let k_sum = g.reduce_sum(phi_k, 1)?;
    let denom = g.matmul(phi_q, k_sum, false, true)?;
    let dv = g.value(denom).values();
    if dv.iter().any(|v| !v.is_finite() || *v <= T::ZERO) {
        return Err(Error::non_finite("performer normalizer"));
    }
    let kv = g.matmul(phi_k, v, true, false)?;
    let num = g.matmul(phi_q, kv, false, false)?;
    let out = g.div(num, denom)?;
    g.reshape(out, &[b, h, t, d])
}

enum Stabilizer {
    /// Per-row max over features: cancels exactly in the output ratio.
    PerRow,
    /// One global max: keeps cross-row weighting intact for keys.
    Global,
}

/// exp(x W^T - |x|^2/2 - stabilizer) for x [N,T,d], W [m,d].
fn feature_map<T: Element>(
    g: &mut Graph<T>,
    x: Var,
    w: Var,
    stab: Stabilizer,
) -> Result<Var> {
    let proj = g.matmul(x, w, false, true)?;
    let x2 = g.mul(x, x)?;
    let ndim = g.shape(x2).len();
    let ssq = g.reduce_sum(x2, ndim - 1)?;
    let half_ssq = g.mul_scalar(ssq, T::from_f64(0.5))?;
    let logits = g.sub(proj, half_ssq)?;
    // stabilizers are detached constants; both choices cancel exactly
    // in the normalized output, so gradients stay exact
    let shifted = match stab {
        Stabilizer::PerRow => {
            let s = g.shape(logits).to_vec();
            let (rows, m) = (s[0] * s[1], s[2]);
            let lv = g.value(logits).values();
            let maxes: Vec<T> = (0..rows)
                .map(|r| {
                    let row = &lv[r * m..(r + 1) * m];
                    row.iter().fold(row[0], |a, &b| a.max_val(b))
                })
                .collect();
            let mt = g.constant(Tensor::from_vec(&[s[0], s[1], 1], maxes)?)?;
            g.sub(logits, mt)?
        }
        Stabilizer::Global => {
            let lv = g.value(logits).values();
            let m0 = lv.iter().fold(lv[0], |a, &b| a.max_val(b));
            let mt = g.constant(Tensor::scalar(m0))?;
            g.sub(logits, mt)?
        }
    };
    g.exp(shifted)
}

/// Additive mask for one shifted-window layout.
///
/// Region ids follow the three-band partition along each axis on the
/// padded canvas; padded cells get a separate id so real tokens never
/// attend into padding. Pairs from different regions get -1e9.
fn window_mask_regions(
    h: usize,
    w: usize,
    hp: usize,
    wp: usize,
    window: usize,
    shift: usize,
) -> Vec<i32> {
    let band = |pos: usize, real: usize, padded: usize| -> i32 {
        if pos >= real {
            return 3; // padding band
        }
        if shift == 0 {
            return 0;
        }
        // bands [0, padded-window), [padded-window, padded-shift), [padded-shift, padded)
        if pos < padded.saturating_sub(window) {
            0
        } else if pos < padded.saturating_sub(shift) {
            1
        } else {
            2
        }
    };
    let mut ids = vec![0i32; hp * wp];
    for i in 0..hp {
        for j in 0..wp {
            ids[i * wp + j] = band(i, h, hp) * 4 + band(j, w, wp);
        }
    }
    ids
}

/// Shifted-window self-attention over a [B, H, W, C] feature map.
///
/// Partitions the (padded) map into `window`-sized tiles, runs exact
/// attention with `heads` heads inside each tile, and merges back.
/// `shift > 0` cyclically shifts before partitioning and masks pairs
/// that cross original tile boundaries.
pub fn window_attention<T: Element>(
    g: &mut Graph<T>,
    x: Var,
    window: usize,
    shift: usize,
    heads: usize,
) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 4 {
        return Err(Error::shape("window_attention", format!("{s:?}")));
    }
    let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
    if window == 0 || c % heads != 0 {
        return Err(Error::shape(
            "window_attention",
            format!("window {window}, C {c}, heads {heads}"),
        ));
    }
    let hp = h.div_ceil(window) * window;
    let wp = w.div_ceil(window) * window;
    if shift >= window {
        return Err(Error::shape("window_attention", "shift must be < window"));
    }

    // pad spatially (via NCHW), then cyclic shift
    let mut y = x;
    if hp != h || wp != w {
        let xc = g.permute(y, &[0, 3, 1, 2])?;
        let xc = g.pad2d(xc, [0, hp - h, 0, wp - w])?;
        y = g.permute(xc, &[0, 2, 3, 1])?;
    }
    if shift > 0 {
        y = g.roll2d(y, -(shift as isize), -(shift as isize))?;
    }

    // partition into [B*nW, window*window, C]
    let (nh, nw) = (hp / window, wp / window);
    let t = window * window;
    let y4 = g.reshape(y, &[b, nh, window, nw, window, c])?;
    let y5 = g.permute(y4, &[0, 1, 3, 2, 4, 5])?;
    let tokens = g.reshape(y5, &[b * nh * nw, t, c])?;

    let mask = shift_mask::<T>(g, b, h, w, hp, wp, window, shift, heads)?;

    let q = super::split_heads(g, tokens, heads)?;
    let out = attention_exact_flat(g, q, q, q, mask)?;
    let merged = super::merge_heads(g, out, heads)?;

    // merge windows, un-shift, un-pad
    let m5 = g.reshape(merged, &[b, nh, nw, window, window, c])?;
    let m4 = g.permute(m5, &[0, 1, 3, 2, 4, 5])?;
    let mut z = g.reshape(m4, &[b, hp, wp, c])?;
    if shift > 0 {
        z = g.roll2d(z, shift as isize, shift as isize)?;
    }
    if hp != h || wp != w {
        let zc = g.permute(z, &[0, 3, 1, 2])?;
        let zc = g.crop2d(zc, [0, hp - h, 0, wp - w])?;
        z = g.permute(zc, &[0, 2, 3, 1])?;
    }
    Ok(z)
}

/// Builds the additive attention mask for a (possibly padded, possibly
/// shifted) window partition, repeated over batch and heads. `None`
/// when no masking is needed.
#[allow(clippy::too_many_arguments)]
pub(crate) fn shift_mask<T: Element>(
    g: &mut Graph<T>,
    b: usize,
    h: usize,
    w: usize,
    hp: usize,
    wp: usize,
    window: usize,
    shift: usize,
    heads: usize,
) -> Result<Option<Var>> {
    if shift == 0 && hp == h && wp == w {
        return Ok(None);
    }
    let (nh, nw) = (hp / window, wp / window);
    let t = window * window;
    let mut ids = window_mask_regions(h, w, hp, wp, window, shift);
    if shift > 0 {
        ids = roll_ids(&ids, hp, wp, -(shift as isize));
    }
    let neg = T::from_f64(-1e9);
    let mut mask_data = vec![T::ZERO; b * nh * nw * heads * t * t];
    for wi in 0..nh * nw {
        let (wy, wx) = (wi / nw, wi % nw);
        let mut win_ids = Vec::with_capacity(t);
        for ii in 0..window {
            for jj in 0..window {
                win_ids.push(ids[(wy * window + ii) * wp + wx * window + jj]);
            }
        }
        let mut tile = vec![T::ZERO; t * t];
        for a in 0..t {
            for bb in 0..t {
                if win_ids[a] != win_ids[bb] {
                    tile[a * t + bb] = neg;
                }
            }
        }
        for bi in 0..b {
            for hd in 0..heads {
                let base = (((bi * nh * nw) + wi) * heads + hd) * t * t;
                mask_data[base..base + t * t].copy_from_slice(&tile);
            }
        }
    }
    Ok(Some(g.constant(Tensor::from_vec(
        &[b * nh * nw * heads, t, t],
        mask_data,
    )?)?))
}

fn roll_ids(ids: &[i32], h: usize, w: usize, shift: isize) -> Vec<i32> {
    let mut out = vec![0i32; ids.len()];
    let sh = shift.rem_euclid(h as isize) as usize;
    let sw = shift.rem_euclid(w as isize) as usize;
    for i in 0..h {
        for j in 0..w {
            let ti = (i + sh) % h;
            let tj = (j + sw) % w;
            out[ti * w + tj] = ids[i * w + j];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::seeded_uniform;

    fn leaf(g: &mut Graph<f64>, t: Tensor<f64>) -> Var {
        g.leaf(t, false).unwrap()
    }

    /// Naive O(T^2 d) oracle for exact attention.
    fn attention_oracle(q: &[f64], k: &[f64], v: &[f64], t: usize, d: usize) -> Vec<f64> {
        let mut out = vec![0.0; t * d];
        for i in 0..t {
            let mut scores = vec![0.0; t];
            for j in 0..t {
                let mut s = 0.0;
                for c in 0..d {
                    s += q[i * d + c] * k[j * d + c];
                }
                scores[j] = s / (d as f64).sqrt();
            }
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = exps.iter().sum();
            for j in 0..t {
                let wgt = exps[j] / z;
                for c in 0..d {
                    out[i * d + c] += wgt * v[j * d + c];
                }
            }
        }
        out
    }

    #[test]
    fn exact_t1_is_v() {
        let mut g = Graph::new();
        let q = leaf(&mut g, seeded_uniform(&[1, 1, 1, 4], 1));
        let k = leaf(&mut g, seeded_uniform(&[1, 1, 1, 4], 2));
        let v = leaf(&mut g, seeded_uniform(&[1, 1, 1, 4], 3));
        let y = attention_exact(&mut g, q, k, v).unwrap();
        assert_eq!(g.value(y).values(), g.value(v).values());
    }

    #[test]
    fn exact_zero_scores_average_v() {
        let mut g = Graph::new();
        let q = leaf(&mut g, Tensor::zeros(&[1, 1, 3, 2]));
        let k = leaf(&mut g, seeded_uniform(&[1, 1, 3, 2], 5));
        let v = leaf(&mut g, seeded_uniform(&[1, 1, 3, 2], 6));
        let y = attention_exact(&mut g, q, k, v).unwrap();
        let vv = g.value(v).values();
        let avg: Vec<f64> = (0..2)
            .map(|c| (vv[c] + vv[2 + c] + vv[4 + c]) / 3.0)
            .collect();
        for row in 0..3 {
            for c in 0..2 {
                assert!((g.value(y).values()[row * 2 + c] - avg[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn exact_matches_triple_loop_oracle() {
        let (t, d) = (4, 8);
        let q = seeded_uniform(&[1, 1, t, d], 11);
        let k = seeded_uniform(&[1, 1, t, d], 12);
        let v = seeded_uniform(&[1, 1, t, d], 13);
        let expect = attention_oracle(q.values(), k.values(), v.values(), t, d);
        let mut g = Graph::new();
        let (qv, kv, vv) = (leaf(&mut g, q), leaf(&mut g, k), leaf(&mut g, v));
        let y = attention_exact(&mut g, qv, kv, vv).unwrap();
        for (a, b) in g.value(y).values().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn exact_rows_are_convex_combinations() {
        let (t, d) = (5, 3);
        let q = seeded_uniform(&[1, 1, t, d], 21);
        let k = seeded_uniform(&[1, 1, t, d], 22);
        let v = seeded_uniform(&[1, 1, t, d], 23);
        let mut g = Graph::new();
        let (qv, kv, vv) = (leaf(&mut g, q), leaf(&mut g, k), leaf(&mut g, v.clone()));
        let y = attention_exact(&mut g, qv, kv, vv).unwrap();
        for c in 0..d {
            let col: Vec<f64> = (0..t).map(|r| v.values()[r * d + c]).collect();
            let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for r in 0..t {
                let val = g.value(y).values()[r * d + c];
                assert!(val >= lo - 1e-12 && val <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn performer_t1_equals_v() {
        let mut g = Graph::new();
        let q = leaf(&mut g, seeded_uniform(&[1, 1, 1, 4], 31));
        let k = leaf(&mut g, seeded_uniform(&[1, 1, 1, 4], 32));
        let v = leaf(&mut g, seeded_uniform(&[1, 1, 1, 4], 33));
        let y = attention_performer(&mut g, q, k, v, 16, 9).unwrap();
        // normalizer cancels exactly for a single token
        assert_eq!(g.value(y).values(), g.value(v).values());
    }

    fn unit_rows(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut t = seeded_uniform(shape, seed);
        let d = *shape.last().unwrap();
        let vals = t.values_mut();
        for row in vals.chunks_mut(d) {
            let n: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 0.0 {
                for v in row {
                    *v /= n;
                }
            }
        }
        t
    }

    fn performer_rel_err(m: usize, seed: u64) -> f64 {
        let (t, d) = (16, 8);
        let q = unit_rows(&[1, 1, t, d], 101);
        let k = unit_rows(&[1, 1, t, d], 102);
        let v = unit_rows(&[1, 1, t, d], 103);
        let mut g = Graph::new();
        let (qv, kv, vv) = (
            g.leaf(q.clone(), false).unwrap(),
            g.leaf(k.clone(), false).unwrap(),
            g.leaf(v.clone(), false).unwrap(),
        );
        let exact = attention_exact(&mut g, qv, kv, vv).unwrap();
        let approx = attention_performer(&mut g, qv, kv, vv, m, seed).unwrap();
        let ev = g.value(exact).values();
        let av = g.value(approx).values();
        let num: f64 = ev.iter().zip(av).map(|(a, b)| (a - b) * (a - b)).sum();
        let den: f64 = ev.iter().map(|a| a * a).sum();
        (num / den).sqrt()
    }

    #[test]
    fn performer_fidelity_and_variance_decay() {
        let mut errs256: Vec<f64> = (0..20).map(|s| performer_rel_err(256, s)).collect();
        errs256.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median256 = errs256[10];
        assert!(median256 < 0.1, "median rel err {median256}");

        let mut errs32: Vec<f64> = (0..20).map(|s| performer_rel_err(32, s)).collect();
        let mut errs512: Vec<f64> = (0..20).map(|s| performer_rel_err(512, s)).collect();
        errs32.sort_by(|a, b| a.partial_cmp(b).unwrap());
        errs512.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!(errs512[10] <= errs32[10]);
    }

    #[test]
    fn window_equals_exact_for_global_window() {
        let (h, w, c) = (4, 4, 8);
        let x = seeded_uniform(&[1, h, w, c], 41);
        let mut g = Graph::new();
        let xv = g.leaf(x.clone(), false).unwrap();
        let win = window_attention(&mut g, xv, 4, 0, 2).unwrap();

        let tokens = g.reshape(xv, &[1, h * w, c]).unwrap();
        let heads = crate::blocks::split_heads(&mut g, tokens, 2).unwrap();
        let s = g.shape(heads).to_vec();
        let q4 = g.reshape(heads, &[1, 2, s[1], s[2]]).unwrap();
        let ex = attention_exact(&mut g, q4, q4, q4).unwrap();
        let ex = g.reshape(ex, &[2, h * w, c / 2]).unwrap();
        let ex = crate::blocks::merge_heads(&mut g, ex, 2).unwrap();
        let ex = g.reshape(ex, &[1, h, w, c]).unwrap();
        let (a, b) = (g.value(win).values(), g.value(ex).values());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn window_locality_without_shift() {
        let (h, w, c) = (8, 8, 4);
        let base = seeded_uniform(&[1, h, w, c], 51);
        let mut pert = base.clone();
        pert.values_mut()[2 * w * c] += 0.5; // pixel inside tile (0,0)

        let run = |x: Tensor<f64>| {
            let mut g = Graph::new();
            let xv = g.leaf(x, false).unwrap();
            let y = window_attention(&mut g, xv, 4, 0, 1).unwrap();
            g.value(y).values().to_vec()
        };
        let (a, b) = (run(base), run(pert));
        // tile (1,1) spans rows 4.., cols 4..: bit-identical output there
        for i in 4..8 {
            for j in 4..8 {
                for ch in 0..c {
                    let idx = (i * w + j) * c + ch;
                    assert_eq!(a[idx], b[idx]);
                }
            }
        }
        assert_ne!(a, b);
    }

    #[test]
    fn shift_creates_cross_tile_interaction() {
        let (h, w, c) = (8, 8, 4);
        let x = seeded_uniform(&[1, h, w, c], 61);
        let run = |shift: usize| {
            let mut g = Graph::new();
            let xv = g.leaf(x.clone(), false).unwrap();
            let y = window_attention(&mut g, xv, 4, shift, 1).unwrap();
            g.value(y).values().to_vec()
        };
        assert_ne!(run(0), run(2));
    }
}
