use std::f64::consts::LN_10;

use serde::{Deserialize, Serialize};

use super::attractor::selection_weights;
use crate::autodiff::{Graph, Tensor};
use crate::error::{Error, Result};
use crate::masks::{MaskTensor, PresenceMask};
use crate::metrics::{best_permutation, SI_SDR_EPS};

/// Multi-task loss factors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha_r: f64,
    pub alpha_c: f64,
    pub alpha_d: f64,
    pub l_d: f64,
}

impl LossWeights {
    pub fn dan() -> Self {
        LossWeights {
            alpha_r: 1.0,
            alpha_c: 0.05,
            alpha_d: 0.0,
            l_d: 5f64.sqrt(),
        }
    }

    pub fn tddan() -> Self {
        LossWeights {
            alpha_r: 1.0,
            alpha_c: 1.0,
            alpha_d: 0.0,
            l_d: 5f64.sqrt(),
        }
    }

    /// TD-DAN whose SES encoder is learned.
    pub fn tddan_free() -> Self {
        LossWeights {
            alpha_d: 1.0,
            ..Self::tddan()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = [self.alpha_r, self.alpha_c, self.alpha_d].iter().all(|a| *a >= 0.0 && a.is_finite());
        if !ok || !(self.l_d > 0.0 && self.l_d.is_finite()) {
            return Err(Error::InvalidConfiguration(format!("invalid loss weights {self:?}")));
        }
        Ok(())
    }
}

/// Stacks equally sized planes as the columns of a `[bins, K]` constant.
pub fn columns(g: &mut Graph, planes: &[Vec<f64>]) -> Result<Tensor> {
    let k = planes.len();
    let n = planes.first().map_or(0, |p| p.len());
    if k == 0 || planes.iter().any(|p| p.len() != n) {
        return Err(Error::invalid("planes must be non-empty and equally sized"));
    }
    let mut data = vec![0.0; n * k];
    for (j, p) in planes.iter().enumerate() {
        for (i, v) in p.iter().enumerate() {
            data[i * k + j] = *v;
        }
    }
    g.constant(data, &[n, k])
}

/// Repeats a `[bins, 1]` column `k` times.
pub fn repeat_column(g: &mut Graph, col: Tensor, k: usize) -> Result<Tensor> {
    let ones = g.constant(vec![1.0; k], &[1, k])?;
    g.matmul(col, ones)
}

/// `mean_{k,t,f} (y · m_k - d_k)²` with `masks`, `mixture` and `targets` all
/// laid out as `[bins, K]`.
pub fn recon_loss(g: &mut Graph, masks: Tensor, mixture: Tensor, targets: Tensor) -> Result<Tensor> {
    let est = g.mul(mixture, masks)?;
    g.mse(est, targets)
}

/// Squared distance of every selected embedding to its speaker's attractor,
/// averaged over the selected bins. `emb` is `[bins, D]`, `attractors`
/// `[K, D]`.
pub fn concentration_loss(g: &mut Graph, emb: Tensor, attractors: Tensor, ibm: &MaskTensor, v: &PresenceMask) -> Result<Tensor> {
    let n = ibm.frames * ibm.channels;
    if g.shape(emb).first() != Some(&n) || g.shape(attractors).first() != Some(&ibm.speakers) {
        return Err(Error::invalid("embedding or attractor shape does not match the assignment"));
    }
    // Validates the planes and rejects empty speakers.
    selection_weights(ibm, v)?;
    let mut total: Option<Tensor> = None;
    let mut count = 0;
    for k in 0..ibm.speakers {
        let plane = ibm.plane(k);
        let rows: Vec<usize> = (0..n).filter(|&i| plane[i] != 0.0 && v.data[i]).collect();
        count += rows.len();
        let sel = g.gather_rows(emb, &rows)?;
        let a = g.narrow(attractors, 0, k, 1)?;
        let a = g.broadcast_rows(a, rows.len())?;
        let diff = g.sub(a, sel)?;
        let sq = g.square(diff);
        let s = g.sum(sq);
        total = Some(match total {
            None => s,
            Some(t) => g.add(t, s)?,
        });
    }
    let total = total.ok_or_else(|| Error::invalid("no speakers"))?;
    Ok(g.scale(total, 1.0 / count as f64))
}

/// Hinge `max(0, l_d² - Σ_{k≠q} ‖a_k - a_q‖²)` over ordered pairs. Zero for
/// a single attractor.
pub fn discrimination_loss(g: &mut Graph, attractors: Tensor, l_d: f64) -> Result<Tensor> {
    let k = match g.shape(attractors) {
        [k, _] => *k,
        s => return Err(Error::invalid(format!("attractors must be a matrix, got {s:?}"))),
    };
    if k < 2 {
        return Ok(g.scalar(0.0));
    }
    let mut total: Option<Tensor> = None;
    for p in 0..k {
        for q in 0..k {
            if p == q {
                continue;
            }
            let a = g.narrow(attractors, 0, p, 1)?;
            let b = g.narrow(attractors, 0, q, 1)?;
            let d = g.sub(a, b)?;
            let sq = g.square(d);
            let s = g.sum(sq);
            total = Some(match total {
                None => s,
                Some(t) => g.add(t, s)?,
            });
        }
    }
    let neg = g.scale(total.expect("k >= 2"), -1.0);
    let gap = g.add_scalar(neg, l_d * l_d);
    Ok(g.relu(gap))
}

/// SI-SDR in dB of a `[1, L]` (or `[L]`) estimate against a fixed reference.
pub fn si_sdr_in_graph(g: &mut Graph, estimate: Tensor, reference: &[f64]) -> Result<Tensor> {
    let len = reference.len();
    if g.value(estimate).len() != len {
        return Err(Error::invalid("estimate and reference lengths differ"));
    }
    let rr: f64 = reference.iter().map(|v| v * v).sum();
    if rr == 0.0 {
        return Err(Error::invalid("reference is all zeros"));
    }
    let shape = g.shape(estimate).to_vec();
    let r = g.constant(reference.to_vec(), &shape)?;
    let prod = g.mul(estimate, r)?;
    let dot = g.sum(prod);
    let alpha = g.scale(dot, 1.0 / rr);
    let target = g.scale_by(r, alpha)?;
    let err = g.sub(estimate, target)?;
    let t2 = g.square(target);
    let num = g.sum(t2);
    let e2 = g.square(err);
    let den = g.sum(e2);
    let den = g.add_scalar(den, SI_SDR_EPS);
    let ln_num = g.ln(num);
    let ln_den = g.ln(den);
    let ratio = g.sub(ln_num, ln_den)?;
    Ok(g.scale(ratio, 10.0 / LN_10))
}

/// Negative mean SI-SDR under the best assignment of estimates to targets.
/// Returns the loss and `perm`, where `perm[k]` is the estimate matched to
/// target `k`. Gradients flow only through the winning pairs.
pub fn upit_loss(g: &mut Graph, estimates: &[Tensor], targets: &[Vec<f64>]) -> Result<(Tensor, Vec<usize>)> {
    let k = targets.len();
    if estimates.len() != k || k == 0 {
        return Err(Error::invalid("estimate and target counts differ"));
    }
    if k > 4 {
        return Err(Error::Unsupported(format!("permutation search over {k} speakers")));
    }
    let mut nodes = vec![vec![None; k]; k];
    let mut scores = vec![vec![0.0; k]; k];
    for (r, target) in targets.iter().enumerate() {
        for (e, est) in estimates.iter().enumerate() {
            let s = si_sdr_in_graph(g, *est, target)?;
            scores[r][e] = g.item(s);
            nodes[r][e] = Some(s);
        }
    }
    let (perm, _) = best_permutation(&scores);
    let mut total = nodes[0][perm[0]].expect("filled");
    for r in 1..k {
        total = g.add(total, nodes[r][perm[r]].expect("filled"))?;
    }
    Ok((g.scale(total, -1.0 / k as f64), perm))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masks::MaskKind;
    use crate::metrics::si_sdr;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(seed: u64, n: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn recon_loss_matches_triple_sum() {
        let (k, bins) = (3, 20);
        let m = random(1, k * bins);
        let y: Vec<f64> = random(2, bins).iter().map(|v| v.abs()).collect();
        let d: Vec<Vec<f64>> = (0..k).map(|j| random(3 + j as u64, bins)).collect();
        let mut g = Graph::new();
        let masks = g.constant(m.clone(), &[bins, k]).unwrap();
        let ycol = g.constant(y.clone(), &[bins, 1]).unwrap();
        let ymat = repeat_column(&mut g, ycol, k).unwrap();
        let dmat = columns(&mut g, &d).unwrap();
        let l = recon_loss(&mut g, masks, ymat, dmat).unwrap();
        let mut brute = 0.0;
        for j in 0..k {
            for i in 0..bins {
                brute += (y[i] * m[i * k + j] - d[j][i]).powi(2);
            }
        }
        assert!((g.item(l) - brute / (k * bins) as f64).abs() < 1e-12);

        let zeros = g.constant(vec![0.0; bins * k], &[bins, k]).unwrap();
        let l0 = recon_loss(&mut g, zeros, ymat, zeros).unwrap();
        assert_eq!(g.item(l0), 0.0);
    }

    fn assignment(k: usize, t: usize, c: usize, owner: &[usize]) -> MaskTensor {
        let n = t * c;
        let mut data = vec![0.0; k * n];
        for (i, &o) in owner.iter().enumerate() {
            if o < k {
                data[o * n + i] = 1.0;
            }
        }
        MaskTensor {
            data,
            speakers: k,
            frames: t,
            channels: c,
            kind: MaskKind::Ibm,
        }
    }

    #[test]
    fn concentration_examples() {
        let mut g = Graph::new();
        let emb = g.constant(vec![1.0], &[1, 1]).unwrap();
        let a = g.constant(vec![0.0], &[1, 1]).unwrap();
        let ibm = assignment(1, 1, 1, &[0]);
        let l = concentration_loss(&mut g, emb, a, &ibm, &PresenceMask::all(1, 1)).unwrap();
        assert_eq!(g.item(l), 1.0);

        let emb = g.constant([0.3, -0.2].repeat(4), &[4, 2]).unwrap();
        let a = g.constant(vec![0.3, -0.2], &[1, 2]).unwrap();
        let ibm = assignment(1, 2, 2, &[0, 0, 0, 0]);
        let l = concentration_loss(&mut g, emb, a, &ibm, &PresenceMask::all(2, 2)).unwrap();
        assert_eq!(g.item(l), 0.0);
    }

    #[test]
    fn discrimination_examples() {
        let mut g = Graph::new();
        let a = g.constant(vec![1.0, 2.0, 1.0, 2.0], &[2, 2]).unwrap();
        let l = discrimination_loss(&mut g, a, 5f64.sqrt()).unwrap();
        assert!((g.item(l) - 5.0).abs() < 1e-12);

        let far = g.variable(vec![0.0, 0.0, 3.0, 0.0], &[2, 2]).unwrap();
        let l = discrimination_loss(&mut g, far, 5f64.sqrt()).unwrap();
        assert_eq!(g.item(l), 0.0);
        g.backward(l).unwrap();
        assert!(g.grad(far).map_or(true, |gr| gr.iter().all(|v| *v == 0.0)));

        let one = g.constant(vec![1.0, 1.0], &[1, 2]).unwrap();
        let l = discrimination_loss(&mut g, one, 1.0).unwrap();
        assert_eq!(g.item(l), 0.0);
    }

    #[test]
    fn graph_si_sdr_matches_metric() {
        let r = random(1, 300);
        let e = random(2, 300);
        let mut g = Graph::new();
        let et = g.constant(e.clone(), &[1, 300]).unwrap();
        let s = si_sdr_in_graph(&mut g, et, &r).unwrap();
        assert!((g.item(s) - si_sdr(&e, &r).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn upit_examples() {
        let a = random(10, 400);
        let b = random(11, 400);
        // Estimates at 10 dB from their own reference.
        let noisy = |x: &[f64], seed| -> Vec<f64> {
            let n = random(seed, 400);
            let px: f64 = x.iter().map(|v| v * v).sum();
            let pn: f64 = n.iter().map(|v| v * v).sum();
            let c = (px / pn / 10.0).sqrt();
            x.iter().zip(&n).map(|(s, w)| s + c * w).collect()
        };
        let (ea, eb) = (noisy(&a, 12), noisy(&b, 13));
        let mut g = Graph::new();
        let ta = g.constant(ea.clone(), &[1, 400]).unwrap();
        let tb = g.constant(eb.clone(), &[1, 400]).unwrap();
        let (l, perm) = upit_loss(&mut g, &[ta, tb], &[a.clone(), b.clone()]).unwrap();
        assert_eq!(perm, vec![0, 1]);
        let expect = -(si_sdr(&ea, &a).unwrap() + si_sdr(&eb, &b).unwrap()) / 2.0;
        assert!((g.item(l) - expect).abs() < 1e-10);
        let (l2, perm2) = upit_loss(&mut g, &[ta, tb], &[b, a]).unwrap();
        assert_eq!(perm2, vec![1, 0]);
        assert!((g.item(l2) - g.item(l)).abs() < 1e-12);
    }

    #[test]
    fn upit_three_speakers_matches_enumeration() {
        let targets: Vec<Vec<f64>> = (0..3).map(|i| random(20 + i, 200)).collect();
        let ests: Vec<Vec<f64>> = (0..3).map(|i| random(30 + i, 200)).collect();
        let mut g = Graph::new();
        let et: Vec<Tensor> = ests.iter().map(|e| g.constant(e.clone(), &[1, 200]).unwrap()).collect();
        let (l, _) = upit_loss(&mut g, &et, &targets).unwrap();
        let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
        let best = perms
            .iter()
            .map(|p| -(0..3).map(|r| si_sdr(&ests[p[r]], &targets[r]).unwrap()).sum::<f64>() / 3.0)
            .fold(f64::INFINITY, f64::min);
        assert!((g.item(l) - best).abs() < 1e-10);
    }
}
