//! Oracle masks on T-F and learned representations, and speech-presence gating.

use crate::error::{Error, Result};
use crate::transforms::{encode, magnitude, AnalysisKernel, ComplexSpectrogram};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskKind {
    /// Ideal binary mask.
    Ibm,
    /// Ideal ratio mask.
    Irm,
    /// Wiener-filter-like mask.
    Wfm,
    /// Model-estimated ratio mask (sigmoid of attractor similarity).
    Mrm,
    /// Non-negative mask on a learned representation.
    Td,
}

/// Per-speaker masks, `speakers x frames x channels` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskTensor {
    pub data: Vec<f64>,
    pub speakers: usize,
    pub frames: usize,
    pub channels: usize,
    pub kind: MaskKind,
}

impl MaskTensor {
    pub fn plane(&self, k: usize) -> &[f64] {
        let n = self.frames * self.channels;
        &self.data[k * n..(k + 1) * n]
    }

    pub fn at(&self, k: usize, t: usize, c: usize) -> f64 {
        self.data[(k * self.frames + t) * self.channels + c]
    }
}

fn check_planes(planes: &[Vec<f64>]) -> Result<usize> {
    let first = planes.first().ok_or_else(|| Error::invalid("need at least one speaker"))?;
    if planes.iter().any(|p| p.len() != first.len()) {
        return Err(Error::invalid("mask planes differ in size"));
    }
    Ok(first.len())
}

/// Binary dominance assignment: speaker k owns a bin iff its magnitude is
/// strictly larger than the sum of all other speakers' magnitudes.
pub fn ibm_tf(early_mags: &[Vec<f64>], frames: usize, channels: usize) -> Result<MaskTensor> {
    let n = check_planes(early_mags)?;
    if n != frames * channels {
        return Err(Error::invalid("plane size does not match frames x channels"));
    }
    let k = early_mags.len();
    let mut data = vec![0.0; k * n];
    for i in 0..n {
        let total: f64 = early_mags.iter().map(|p| p[i]).sum();
        for (s, plane) in early_mags.iter().enumerate() {
            if plane[i] > total - plane[i] {
                data[s * n + i] = 1.0;
            }
        }
    }
    Ok(MaskTensor {
        data,
        speakers: k,
        frames,
        channels,
        kind: MaskKind::Ibm,
    })
}

/// Dominance assignment on `|encode(d_k)|`, channelwise.
pub fn ibm_rep(kernel: &AnalysisKernel, early: &[Vec<f64>]) -> Result<MaskTensor> {
    let reps = early
        .iter()
        .map(|d| encode(d, kernel).map(|r| magnitude(&r)))
        .collect::<Result<Vec<_>>>()?;
    let first = reps.first().ok_or_else(|| Error::invalid("need at least one speaker"))?;
    let (frames, channels) = (first.frames, first.channels);
    let planes: Vec<Vec<f64>> = reps.into_iter().map(|r| r.data).collect();
    ibm_tf(&planes, frames, channels)
}

fn ratio(num: f64, den: f64) -> f64 {
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

/// Separation-only ratio mask `|y_k| / (Σ_q |y_q| + |n|)`.
pub fn irm(reverberant_mags: &[Vec<f64>], noise_mag: &[f64], frames: usize, channels: usize) -> Result<MaskTensor> {
    let n = check_planes(reverberant_mags)?;
    if noise_mag.len() != n || n != frames * channels {
        return Err(Error::invalid("noise plane does not match speaker planes"));
    }
    let k = reverberant_mags.len();
    let mut data = vec![0.0; k * n];
    for i in 0..n {
        let den: f64 = reverberant_mags.iter().map(|p| p[i]).sum::<f64>() + noise_mag[i];
        for (s, p) in reverberant_mags.iter().enumerate() {
            data[s * n + i] = ratio(p[i], den);
        }
    }
    Ok(MaskTensor {
        data,
        speakers: k,
        frames,
        channels,
        kind: MaskKind::Irm,
    })
}

/// Separation-only Wiener-like mask `sqrt(|y_k|² / (Σ_q |y_q|² + |n|²))`.
pub fn wfm(reverberant_mags: &[Vec<f64>], noise_mag: &[f64], frames: usize, channels: usize) -> Result<MaskTensor> {
    let sq: Vec<Vec<f64>> = reverberant_mags.iter().map(|p| p.iter().map(|v| v * v).collect()).collect();
    let nsq: Vec<f64> = noise_mag.iter().map(|v| v * v).collect();
    let mut m = irm(&sq, &nsq, frames, channels)?;
    m.data.iter_mut().for_each(|v| *v = v.sqrt());
    m.kind = MaskKind::Wfm;
    Ok(m)
}

/// Magnitudes of the early target and of its complement `y - d_k`, where the
/// subtraction is done on complex bins.
fn target_and_residual(early: &ComplexSpectrogram, mixture: &ComplexSpectrogram) -> Result<(Vec<f64>, Vec<f64>)> {
    if early.re.len() != mixture.re.len() {
        return Err(Error::invalid("spectrogram shapes differ"));
    }
    Ok((early.magnitude(), mixture.sub(early).magnitude()))
}

fn derevb_mask(early: &[ComplexSpectrogram], mixture: &ComplexSpectrogram, power: i32, kind: MaskKind) -> Result<MaskTensor> {
    if early.is_empty() {
        return Err(Error::invalid("need at least one speaker"));
    }
    let n = mixture.re.len();
    let mut data = Vec::with_capacity(early.len() * n);
    for d in early {
        let (target, residual) = target_and_residual(d, mixture)?;
        data.extend(target.iter().zip(&residual).map(|(t, r)| {
            let (tp, rp) = (t.powi(power), r.powi(power));
            let m = ratio(tp, rp + tp);
            if power == 2 {
                m.sqrt()
            } else {
                m
            }
        }));
    }
    Ok(MaskTensor {
        data,
        speakers: early.len(),
        frames: mixture.frames,
        channels: mixture.bins,
        kind,
    })
}

/// Separation-plus-dereverberation ratio mask `|d_k| / (|y - d_k| + |d_k|)`.
pub fn irm_derevb(early: &[ComplexSpectrogram], mixture: &ComplexSpectrogram) -> Result<MaskTensor> {
    derevb_mask(early, mixture, 1, MaskKind::Irm)
}

/// Square-magnitude analogue of [`irm_derevb`] under a square root.
pub fn wfm_derevb(early: &[ComplexSpectrogram], mixture: &ComplexSpectrogram) -> Result<MaskTensor> {
    derevb_mask(early, mixture, 2, MaskKind::Wfm)
}

/// Binary gate over `frames x channels` bins.
#[derive(Debug, Clone, PartialEq)]
pub struct PresenceMask {
    pub data: Vec<bool>,
    pub frames: usize,
    pub channels: usize,
}

impl PresenceMask {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|v| **v).count()
    }

    pub fn all(frames: usize, channels: usize) -> Self {
        PresenceMask {
            data: vec![true; frames * channels],
            frames,
            channels,
        }
    }
}

/// Keeps the `ceil(bins · top_percent / 100)` highest-power bins. Ties go to
/// the earlier bin in `(t, c)` order.
pub fn speech_presence(power: &[f64], frames: usize, channels: usize, top_percent: f64) -> Result<PresenceMask> {
    if !(top_percent > 0.0 && top_percent <= 100.0) {
        return Err(Error::invalid(format!("top percentage {top_percent} outside (0, 100]")));
    }
    let n = frames * channels;
    if power.len() != n {
        return Err(Error::invalid("power plane does not match frames x channels"));
    }
    let keep = ((n as f64 * top_percent / 100.0).ceil() as usize).min(n);
    let mut order: Vec<usize> = (0..n).collect();
    // Stable sort keeps lexicographic order among equal powers.
    order.sort_by(|&a, &b| power[b].total_cmp(&power[a]));
    let mut data = vec![false; n];
    for &i in &order[..keep] {
        data[i] = true;
    }
    Ok(PresenceMask { data, frames, channels })
}

/// Share of mask values (over all speakers and bins) strictly above
/// `threshold`.
pub fn fraction_above(mask: &MaskTensor, threshold: f64) -> f64 {
    if mask.data.is_empty() {
        return 0.0;
    }
    mask.data.iter().filter(|v| **v > threshold).count() as f64 / mask.data.len() as f64
}
