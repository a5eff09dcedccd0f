//! Convergence diagnostics and quantiles: split-R-hat, bulk effective sample
//! size (Geyer initial monotone sequence), and type-7 interpolated quantiles.

/// Linear-interpolation quantile of an ascending-sorted slice.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty());
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = h - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

pub fn median(sorted: &[f64]) -> f64 {
    quantile(sorted, 0.5)
}

/// Split each chain in half; sequences shorter than two elements are
/// unusable for variance decompositions.
fn split(chains: &[Vec<f64>]) -> Vec<&[f64]> {
    let mut seqs = Vec::with_capacity(chains.len() * 2);
    for c in chains {
        let n = c.len();
        let half = n / 2;
        seqs.push(&c[..half]);
        seqs.push(&c[n - half..]);
    }
    seqs
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn sample_var(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() as f64 - 1.0)
}

fn bitwise_constant(chains: &[Vec<f64>]) -> bool {
    let first = chains.iter().flatten().next();
    match first {
        Some(&v) => chains.iter().flatten().all(|&x| x == v),
        None => true,
    }
}

/// Split-R-hat over chains of one scalar. Returns 1.0 for degenerate
/// (constant) samples.
pub fn split_rhat(chains: &[Vec<f64>]) -> f64 {
    if bitwise_constant(chains) {
        return 1.0;
    }
    let seqs = split(chains);
    let n = seqs.iter().map(|s| s.len()).min().unwrap_or(0);
    if n < 2 {
        return f64::NAN;
    }
    let seqs: Vec<&[f64]> = seqs.iter().map(|s| &s[..n]).collect();
    let w = mean(&seqs.iter().map(|s| sample_var(s)).collect::<Vec<_>>());
    let means: Vec<f64> = seqs.iter().map(|s| mean(s)).collect();
    let b_over_n = sample_var(&means);
    if w <= 0.0 {
        return if b_over_n <= 0.0 { 1.0 } else { f64::INFINITY };
    }
    let var_plus = (n as f64 - 1.0) / n as f64 * w + b_over_n;
    (var_plus / w).sqrt()
}

/// Bulk effective sample size across chains of one scalar, following the
/// combined-chain autocorrelation estimator with Geyer's initial monotone
/// positive sequence.
pub fn bulk_ess(chains: &[Vec<f64>]) -> f64 {
    if bitwise_constant(chains) {
        return chains.iter().map(Vec::len).sum::<usize>() as f64;
    }
    let seqs = split(chains);
    let n = seqs.iter().map(|s| s.len()).min().unwrap_or(0);
    let m = seqs.len();
    if n < 4 {
        return f64::NAN;
    }
    let seqs: Vec<&[f64]> = seqs.iter().map(|s| &s[..n]).collect();
    let total = (m * n) as f64;

    let w = mean(&seqs.iter().map(|s| sample_var(s)).collect::<Vec<_>>());
    let means: Vec<f64> = seqs.iter().map(|s| mean(s)).collect();
    let b_over_n = sample_var(&means);
    let var_plus = (n as f64 - 1.0) / n as f64 * w + b_over_n;
    if var_plus <= 0.0 {
        // Constant in every sequence.
        return total;
    }

    // Mean autocovariance at lag t across sequences (biased 1/n scaling).
    let seq_means: Vec<f64> = seqs.iter().map(|s| mean(s)).collect();
    let acov = |t: usize| -> f64 {
        let mut acc = 0.0;
        for (s, &mu) in seqs.iter().zip(&seq_means) {
            let mut a = 0.0;
            for i in 0..n - t {
                a += (s[i] - mu) * (s[i + t] - mu);
            }
            acc += a / n as f64;
        }
        acc / m as f64
    };

    let mut rho_prev_pair;
    let mut tau = 1.0;
    let rho = |t: usize| 1.0 - (w - acov(t)) / var_plus;
    // Geyer pairing: accumulate rho(2k-1) + rho(2k) while positive,
    // enforcing monotone non-increase.
    let mut k = 1usize;
    rho_prev_pair = f64::INFINITY;
    while 2 * k < n {
        let pair = rho(2 * k - 1) + rho(2 * k);
        if pair <= 0.0 {
            break;
        }
        let pair = pair.min(rho_prev_pair);
        tau += 2.0 * pair;
        rho_prev_pair = pair;
        k += 1;
    }
    (total / tau.max(1e-12)).min(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn quantiles_match_sorted_array_oracle() {
        let sorted = vec![1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(quantile(&sorted, 0.0), 1.0);
        assert_eq!(quantile(&sorted, 1.0), 5.0);
        assert_eq!(median(&sorted), 3.0);
        assert_eq!(quantile(&sorted, 0.25), 2.0);
        // Interpolated position: h = 4 * 0.3 = 1.2.
        assert!((quantile(&sorted, 0.3) - 2.2).abs() < 1e-12);
        assert_eq!(quantile(&[7.0], 0.9), 7.0);
    }

    #[test]
    fn rhat_near_one_for_iid_chains() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let chains: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..500).map(|_| rng.sample(StandardNormal)).collect())
            .collect();
        let r = split_rhat(&chains);
        assert!((r - 1.0).abs() < 0.05, "rhat {r}");
        let ess = bulk_ess(&chains);
        assert!(ess > 600.0, "iid ess {ess}");
    }

    #[test]
    fn rhat_detects_shifted_chains() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut chains: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..400).map(|_| rng.sample(StandardNormal)).collect())
            .collect();
        for v in chains[0].iter_mut() {
            *v += 5.0;
        }
        assert!(split_rhat(&chains) > 1.5);
    }

    #[test]
    fn constant_samples_are_degenerate_but_defined() {
        let chains = vec![vec![2.5; 100], vec![2.5; 100]];
        assert_eq!(split_rhat(&chains), 1.0);
        assert_eq!(bulk_ess(&chains), 200.0);
    }

    #[test]
    fn autocorrelated_chain_has_reduced_ess() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let chains: Vec<Vec<f64>> = (0..2)
            .map(|_| {
                let mut x = 0.0;
                (0..2000)
                    .map(|_| {
                        let e: f64 = rng.sample(StandardNormal);
                        x = 0.9 * x + e;
                        x
                    })
                    .collect()
            })
            .collect();
        let ess = bulk_ess(&chains);
        // AR(1) with phi = 0.9 has tau ~= 19.
        assert!(ess < 600.0, "ess {ess}");
        assert!(ess > 50.0, "ess {ess}");
    }
}
