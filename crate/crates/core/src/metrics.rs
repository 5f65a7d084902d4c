//! Signal quality metrics and evaluation-time speaker alignment.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Guard added to the distortion energy in SI-SDR.
pub const SI_SDR_EPS: f64 = 1e-12;
/// Relative diagonal loading of the projection normal equations.
pub const SDR_LOADING: f64 = 1e-10;
/// Filter length used for the projective SDR.
pub const SDR_FILTER_LEN: usize = 512;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Scale-invariant SDR in dB.
pub fn si_sdr(estimate: &[f64], reference: &[f64]) -> Result<f64> {
    if estimate.len() != reference.len() {
        return Err(Error::invalid("estimate and reference lengths differ"));
    }
    let rr = dot(reference, reference);
    if rr == 0.0 {
        return Err(Error::invalid("reference is all zeros"));
    }
    let alpha = dot(estimate, reference) / rr;
    let target = alpha * alpha * rr;
    let noise: f64 = estimate
        .iter()
        .zip(reference)
        .map(|(e, r)| (e - alpha * r).powi(2))
        .sum();
    Ok(10.0 * (target / (noise + SI_SDR_EPS)).log10())
}

/// SDR after projecting the estimate onto the span of the reference delayed
/// by `0..filter_len` samples.
pub fn sdr_projective(estimate: &[f64], reference: &[f64], filter_len: usize) -> Result<f64> {
    let len = reference.len();
    if estimate.len() != len {
        return Err(Error::invalid("estimate and reference lengths differ"));
    }
    if filter_len == 0 || len <= filter_len {
        return Err(Error::invalid(format!(
            "filter length {filter_len} must be in 1..{len}"
        )));
    }
    if reference.iter().all(|v| *v == 0.0) {
        return Err(Error::invalid("reference is all zeros"));
    }
    let x = reference;
    // gram[i][j] = Σ_n x[n-i] x[n-j] over n in 0..len, zero outside.
    let mut gram = DMatrix::<f64>::zeros(filter_len, filter_len);
    for j in 0..filter_len {
        gram[(0, j)] = (j..len).map(|n| x[n] * x[n - j]).sum();
        gram[(j, 0)] = gram[(0, j)];
    }
    for i in 1..filter_len {
        for j in i..filter_len {
            let v = gram[(i - 1, j - 1)] - x[len - i] * x[len - j];
            gram[(i, j)] = v;
            gram[(j, i)] = v;
        }
    }
    let rhs = DVector::from_iterator(
        filter_len,
        (0..filter_len).map(|j| (j..len).map(|n| estimate[n] * x[n - j]).sum::<f64>()),
    );
    let loading = SDR_LOADING * gram.trace() / filter_len as f64;
    for i in 0..filter_len {
        gram[(i, i)] += loading;
    }
    let chol = gram
        .cholesky()
        .ok_or_else(|| Error::NumericalFailure("projection normal equations are singular".into()))?;
    let coeffs = chol.solve(&rhs);
    let mut proj = vec![0.0; len];
    for (j, c) in coeffs.iter().enumerate() {
        for n in j..len {
            proj[n] += c * x[n - j];
        }
    }
    let proj_energy = dot(&proj, &proj);
    let err_energy: f64 = estimate.iter().zip(&proj).map(|(e, p)| (e - p).powi(2)).sum();
    let floor = 1e-20 * dot(estimate, estimate).max(f64::MIN_POSITIVE);
    Ok(10.0 * ((proj_energy + floor) / (err_energy + floor)).log10())
}

/// All permutations of `0..k` in lexicographic order.
pub fn permutations(k: usize) -> Vec<Vec<usize>> {
    fn rec(prefix: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if prefix.len() == used.len() {
            out.push(prefix.clone());
            return;
        }
        for i in 0..used.len() {
            if !used[i] {
                used[i] = true;
                prefix.push(i);
                rec(prefix, used, out);
                prefix.pop();
                used[i] = false;
            }
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::with_capacity(k), &mut vec![false; k], &mut out);
    out
}

/// Best assignment for a `references x estimates` score matrix:
/// `perm[k]` is the estimate matched to reference `k`. Earliest permutation
/// wins ties.
pub fn best_permutation(scores: &[Vec<f64>]) -> (Vec<usize>, f64) {
    let k = scores.len();
    let mut best = (Vec::new(), f64::NEG_INFINITY);
    for p in permutations(k) {
        let total: f64 = p.iter().enumerate().map(|(r, &e)| scores[r][e]).sum();
        if total > best.1 {
            best = (p, total);
        }
    }
    best
}

/// Aligns estimates to references by exhaustive search, maximizing the mean
/// of `metric`. Returns the permutation and the per-reference scores.
pub fn eval_align<F>(estimates: &[Vec<f64>], references: &[Vec<f64>], metric: F) -> Result<(Vec<usize>, Vec<f64>)>
where
    F: Fn(&[f64], &[f64]) -> Result<f64>,
{
    let k = references.len();
    if estimates.len() != k || k == 0 {
        return Err(Error::invalid("estimate and reference counts differ"));
    }
    if k > 4 {
        return Err(Error::invalid("alignment supports at most 4 speakers"));
    }
    let mut scores = vec![vec![0.0; k]; k];
    for (r, reference) in references.iter().enumerate() {
        for (e, estimate) in estimates.iter().enumerate() {
            scores[r][e] = metric(estimate, reference)?;
        }
    }
    let (perm, _) = best_permutation(&scores);
    let per = perm.iter().enumerate().map(|(r, &e)| scores[r][e]).collect();
    Ok((perm, per))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(seed: u64, n: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn si_sdr_examples() {
        let r = random(1, 100);
        assert!(si_sdr(&r, &r).unwrap() >= 120.0);
        assert!((si_sdr(&[1.0, 0.1], &[1.0, 0.0]).unwrap() - 20.0).abs() < 1e-9);
        assert!(si_sdr(&[1.0, 0.0], &[0.0, 0.0]).is_err());
    }

    proptest! {
        #[test]
        fn si_sdr_is_scale_invariant(seed in 0u64..1000, c in 0.01f64..100.0) {
            let r = random(seed, 64);
            let e = random(seed + 1, 64);
            let scaled: Vec<f64> = e.iter().map(|v| v * c).collect();
            let a = si_sdr(&e, &r).unwrap();
            let b = si_sdr(&scaled, &r).unwrap();
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn delayed_reference_is_in_subspace() {
        let r = random(2, 3000);
        let mut e = vec![0.0; 3000];
        e[3..].copy_from_slice(&r[..2997]);
        assert!(sdr_projective(&e, &r, 512).unwrap() >= 60.0);
        // Any FIR filter shorter than the window stays in the subspace.
        let h = random(3, 40);
        let filtered = crate::scene::convolve_truncated(&r, &h).unwrap();
        assert!(sdr_projective(&filtered, &r, 512).unwrap() >= 60.0);
    }

    #[test]
    fn long_filter_lowers_projective_sdr() {
        let r = random(4, 6000);
        let decay = |len: usize, seed: u64| -> Vec<f64> {
            let g = random(seed, len);
            (0..len)
                .map(|n| if n == 0 { 1.0 } else { 0.5 * g[n] * (-6.9 * n as f64 / len as f64).exp() })
                .collect()
        };
        let short = crate::scene::convolve_truncated(&r, &decay(400, 5)).unwrap();
        let long = crate::scene::convolve_truncated(&r, &decay(1600, 6)).unwrap();
        let s_short = sdr_projective(&short, &r, 512).unwrap();
        let s_long = sdr_projective(&long, &r, 512).unwrap();
        assert!(s_short > s_long + 20.0, "{s_short} vs {s_long}");
    }

    #[test]
    fn orthogonal_estimate_is_floored() {
        // The reference only occupies the first half, the estimate the tail.
        let mut r = vec![0.0; 2000];
        r[..100].copy_from_slice(&random(7, 100));
        let mut e = vec![0.0; 2000];
        e[1500..].copy_from_slice(&random(8, 500));
        assert!(sdr_projective(&e, &r, 512).unwrap() <= -120.0);
    }

    #[test]
    fn projective_sdr_rejects_bad_input() {
        assert!(sdr_projective(&[1.0; 10], &[1.0; 10], 10).is_err());
        assert!(sdr_projective(&[1.0; 10], &[0.0; 10], 2).is_err());
    }

    #[test]
    fn alignment_recovers_swap() {
        let a = random(1, 200);
        let b = random(2, 200);
        let (perm, scores) = eval_align(&[b.clone(), a.clone()], &[a.clone(), b.clone()], si_sdr).unwrap();
        assert_eq!(perm, vec![1, 0]);
        assert!(scores.iter().all(|s| *s > 100.0));
        let (perm, _) = eval_align(&[a.clone()], &[a], si_sdr).unwrap();
        assert_eq!(perm, vec![0]);
    }

    #[test]
    fn best_permutation_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let scores: Vec<Vec<f64>> = (0..3).map(|_| (0..3).map(|_| rng.random_range(-10.0..10.0)).collect()).collect();
        let (perm, total) = best_permutation(&scores);
        // Hand-listed permutations of three items.
        let all = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
        let brute = all
            .iter()
            .map(|p| (p, (0..3).map(|r| scores[r][p[r]]).sum::<f64>()))
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap();
        assert_eq!(perm.as_slice(), brute.0);
        assert!((total - brute.1).abs() < 1e-12);
        assert_eq!(permutations(4).len(), 24);
    }
}
