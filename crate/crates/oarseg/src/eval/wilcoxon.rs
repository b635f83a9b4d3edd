//! Wilcoxon signed-rank test: exact tail enumeration for small samples,
//! tie-corrected normal approximation otherwise. Zero differences are
//! dropped (Wilcoxon's original rule); ties take mid-ranks.

use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum WilcoxonMode {
    Exact,
    Approx,
}

#[derive(Clone, Debug, Serialize)]
pub struct WilcoxonResult {
    pub statistic_w: f64,
    pub p_two_sided: f64,
    /// Pairs remaining after zero differences were dropped.
    pub n_effective: usize,
    /// All differences were zero; p is 1 by convention.
    pub degenerate: bool,
}

/// Mid-ranks of |d| (1-based), doubled so ties stay integral.
fn doubled_midranks(abs_d: &[f64]) -> Vec<u64> {
    let n = abs_d.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| abs_d[a].partial_cmp(&abs_d[b]).expect("finite differences"));
    let mut doubled = vec![0u64; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && abs_d[order[j + 1]] == abs_d[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share the mid-rank; doubled sum = (i+j+2)
        let doubled_rank = (i + j + 2) as u64;
        for &idx in &order[i..=j] {
            doubled[idx] = doubled_rank;
        }
        i = j + 1;
    }
    doubled
}

/// Two Wilcoxon paired samples; returns W = min(W+, W-) and the
/// two-sided p value.
pub fn wilcoxon_signed_rank(x: &[f64], y: &[f64], mode: WilcoxonMode) -> Result<WilcoxonResult> {
    if x.len() != y.len() {
        return Err(Error::config(format!(
            "paired samples differ in length: {} vs {}",
            x.len(),
            y.len()
        )));
    }
    let d: Vec<f64> = x
        .iter()
        .zip(y)
        .map(|(a, b)| a - b)
        .filter(|&v| v != 0.0)
        .collect();
    if d.is_empty() {
        return Ok(WilcoxonResult {
            statistic_w: 0.0,
            p_two_sided: 1.0,
            n_effective: 0,
            degenerate: true,
        });
    }
    let n = d.len();
    let abs_d: Vec<f64> = d.iter().map(|v| v.abs()).collect();
    let doubled = doubled_midranks(&abs_d);
    let total_doubled: u64 = doubled.iter().sum();
    let w_plus_doubled: u64 = d
        .iter()
        .zip(&doubled)
        .filter(|(v, _)| **v > 0.0)
        .map(|(_, &r)| r)
        .sum();
    let w_minus_doubled = total_doubled - w_plus_doubled;
    let w_doubled = w_plus_doubled.min(w_minus_doubled);
    let w = w_doubled as f64 / 2.0;

    let p = match mode {
        WilcoxonMode::Exact => {
            if n > 25 {
                return Err(Error::config(format!(
                    "exact mode supports n <= 25, got {n}"
                )));
            }
            exact_two_sided(&doubled, w_doubled)
        }
        WilcoxonMode::Approx => {
            let nn = n as f64;
            let mu = nn * (nn + 1.0) / 4.0;
            // tie correction over groups of equal |d|
            let mut tie_sum = 0.0;
            let mut sorted = abs_d.clone();
            sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
            let mut i = 0;
            while i < n {
                let mut j = i;
                while j + 1 < n && sorted[j + 1] == sorted[i] {
                    j += 1;
                }
                let t = (j - i + 1) as f64;
                tie_sum += t * t * t - t;
                i = j + 1;
            }
            let var = nn * (nn + 1.0) * (2.0 * nn + 1.0) / 24.0 - tie_sum / 48.0;
            if var <= 0.0 {
                1.0
            } else {
                // continuity correction toward the mean
                let z = (w - mu + 0.5) / var.sqrt();
                (2.0 * normal_cdf(z)).min(1.0)
            }
        }
    };
    Ok(WilcoxonResult {
        statistic_w: w,
        p_two_sided: p,
        n_effective: n,
        degenerate: false,
    })
}

/// P(min(W+, W-) <= w) by counting sign assignments: distribution of
/// the doubled W+ over all 2^n assignments via subset-sum counting.
fn exact_two_sided(doubled_ranks: &[u64], w_doubled: u64) -> f64 {
    let total: u64 = doubled_ranks.iter().sum();
    let mut ways = vec![0u64; total as usize + 1];
    ways[0] = 1;
    for &r in doubled_ranks {
        let r = r as usize;
        for s in (r..ways.len()).rev() {
            ways[s] += ways[s - r];
        }
    }
    let n = doubled_ranks.len() as u32;
    let denom = 2f64.powi(n as i32);
    let hi_threshold = total - w_doubled;
    let mut count = 0u64;
    for (s, &c) in ways.iter().enumerate() {
        let s = s as u64;
        if s <= w_doubled || s >= hi_threshold {
            count += c;
        }
    }
    (count as f64 / denom).min(1.0)
}

fn normal_cdf(z: f64) -> f64 {
    0.5 * (1.0 + libm::erf(z / std::f64::consts::SQRT_2))
}

/// Brute-force oracle enumerating every sign assignment; test-grade,
/// n <= 20.
pub fn exact_oracle(x: &[f64], y: &[f64]) -> Result<WilcoxonResult> {
    let d: Vec<f64> = x
        .iter()
        .zip(y)
        .map(|(a, b)| a - b)
        .filter(|&v| v != 0.0)
        .collect();
    if d.is_empty() {
        return Ok(WilcoxonResult {
            statistic_w: 0.0,
            p_two_sided: 1.0,
            n_effective: 0,
            degenerate: true,
        });
    }
    let n = d.len();
    assert!(n <= 20, "oracle supports n <= 20");
    let abs_d: Vec<f64> = d.iter().map(|v| v.abs()).collect();
    let doubled = doubled_midranks(&abs_d);
    let total: u64 = doubled.iter().sum();
    let w_plus: u64 = d
        .iter()
        .zip(&doubled)
        .filter(|(v, _)| **v > 0.0)
        .map(|(_, &r)| r)
        .sum();
    let w_obs = w_plus.min(total - w_plus);
    let mut count = 0u64;
    for bits in 0..(1u64 << n) {
        let mut wp = 0u64;
        for (i, &r) in doubled.iter().enumerate() {
            if bits >> i & 1 == 1 {
                wp += r;
            }
        }
        if wp.min(total - wp) <= w_obs {
            count += 1;
        }
    }
    Ok(WilcoxonResult {
        statistic_w: w_obs as f64 / 2.0,
        p_two_sided: count as f64 / (1u64 << n) as f64,
        n_effective: n,
        degenerate: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn all_positive_differences() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        let y = [0.0; 5];
        let r = wilcoxon_signed_rank(&x, &y, WilcoxonMode::Exact).unwrap();
        assert_eq!(r.statistic_w, 0.0);
        assert!((r.p_two_sided - 2.0 / 32.0).abs() < 1e-12);
    }

    #[test]
    fn identical_samples_degenerate() {
        let x = [0.3, 0.5, 0.9];
        let r = wilcoxon_signed_rank(&x, &x, WilcoxonMode::Exact).unwrap();
        assert!(r.degenerate);
        assert_eq!(r.p_two_sided, 1.0);
    }

    #[test]
    fn exact_matches_enumeration_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for trial in 0..100 {
            let n = rng.random_range(3..=12);
            let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let y: Vec<f64> = (0..n)
                .map(|i| {
                    if rng.random_range(0..4) == 0 {
                        x[i] // inject exact zero differences
                    } else {
                        rng.random_range(-1.0..1.0)
                    }
                })
                .collect();
            let fast = wilcoxon_signed_rank(&x, &y, WilcoxonMode::Exact).unwrap();
            let slow = exact_oracle(&x, &y).unwrap();
            assert_eq!(fast.statistic_w, slow.statistic_w, "trial {trial}");
            assert!(
                (fast.p_two_sided - slow.p_two_sided).abs() < 1e-12,
                "trial {trial}: {} vs {}",
                fast.p_two_sided,
                slow.p_two_sided
            );
        }
    }

    #[test]
    fn approx_close_to_exact_at_n20() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let x: Vec<f64> = (0..200).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..200)
            .map(|i| x[i] + rng.random_range(-0.6..0.5))
            .collect();
        let ex = wilcoxon_signed_rank(&x[..20], &y[..20], WilcoxonMode::Exact).unwrap();
        let ap = wilcoxon_signed_rank(&x[..20], &y[..20], WilcoxonMode::Approx).unwrap();
        assert!(
            (ex.p_two_sided - ap.p_two_sided).abs() < 0.01,
            "exact {} vs approx {}",
            ex.p_two_sided,
            ap.p_two_sided
        );
    }

    #[test]
    fn ties_get_midranks() {
        // |d| = [1,1,2]: midranks 1.5, 1.5, 3
        let x = [1.0, -1.0, 2.0];
        let y = [0.0, 0.0, 0.0];
        let r = wilcoxon_signed_rank(&x, &y, WilcoxonMode::Exact).unwrap();
        // W+ = 1.5 + 3 = 4.5, W- = 1.5
        assert_eq!(r.statistic_w, 1.5);
    }
}
