//! Waveform to representation maps: STFT/iSTFT, log power spectra, and
//! strided 1-D analysis/synthesis kernels (fixed stacked-STFT or learned).
//!
//! All framing shares one padding rule: `N - hop` zeros on the left, and on
//! the right as many zeros as needed (at least `N - hop`) to complete the
//! last frame. Every input sample is then covered by exactly `N / hop` frames
//! when `hop` divides `N`.

use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Number of frames produced for a signal of `len` samples.
pub fn num_frames(len: usize, n: usize, hop: usize) -> usize {
    (len + n - hop).div_ceil(hop)
}

/// Zero-pads `x` per the framing rule. Returns the padded buffer.
pub fn pad_signal(x: &[f64], n: usize, hop: usize) -> Vec<f64> {
    let frames = num_frames(x.len(), n, hop);
    let total = (frames - 1) * hop + n;
    let mut out = vec![0.0; total];
    out[n - hop..n - hop + x.len()].copy_from_slice(x);
    out
}

fn check_framing(n: usize, hop: usize) -> Result<()> {
    if n == 0 || hop == 0 || hop > n {
        return Err(Error::invalid(format!("need 0 < hop <= window, got hop {hop}, window {n}")));
    }
    Ok(())
}

pub fn rectangular(n: usize) -> Vec<f64> {
    vec![1.0; n]
}

/// Periodic Hann window.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()).collect()
}

pub fn sqrt_hann(n: usize) -> Vec<f64> {
    hann(n).into_iter().map(f64::sqrt).collect()
}

/// Complex STFT, stored as separate real and imaginary planes of
/// `frames x bins` (row-major), `bins = N/2 + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpectrogram {
    pub re: Vec<f64>,
    pub im: Vec<f64>,
    pub frames: usize,
    pub bins: usize,
    pub window_size: usize,
    pub hop: usize,
    pub window: Vec<f64>,
    /// Length of the analysed signal before padding.
    pub signal_len: usize,
}

impl ComplexSpectrogram {
    pub fn zeros_like(&self) -> Self {
        ComplexSpectrogram {
            re: vec![0.0; self.re.len()],
            im: vec![0.0; self.im.len()],
            ..self.clone()
        }
    }

    /// Elementwise magnitude, `frames x bins`.
    pub fn magnitude(&self) -> Vec<f64> {
        self.re.iter().zip(&self.im).map(|(r, i)| r.hypot(*i)).collect()
    }

    /// Multiplies every bin by a real gain of matching layout.
    pub fn apply_mask(&self, mask: &[f64]) -> Self {
        assert_eq!(mask.len(), self.re.len(), "mask layout mismatch");
        ComplexSpectrogram {
            re: self.re.iter().zip(mask).map(|(v, m)| v * m).collect(),
            im: self.im.iter().zip(mask).map(|(v, m)| v * m).collect(),
            ..self.clone()
        }
    }

    pub fn sub(&self, other: &Self) -> Self {
        ComplexSpectrogram {
            re: self.re.iter().zip(&other.re).map(|(a, b)| a - b).collect(),
            im: self.im.iter().zip(&other.im).map(|(a, b)| a - b).collect(),
            ..self.clone()
        }
    }

    pub fn add(&self, other: &Self) -> Self {
        ComplexSpectrogram {
            re: self.re.iter().zip(&other.re).map(|(a, b)| a + b).collect(),
            im: self.im.iter().zip(&other.im).map(|(a, b)| a + b).collect(),
            ..self.clone()
        }
    }
}

/// Cos/sin lookup for `exp(-i 2π m / N)`.
struct Twiddles {
    cos: Vec<f64>,
    sin: Vec<f64>,
}

impl Twiddles {
    fn new(n: usize) -> Self {
        let cos = (0..n).map(|m| (2.0 * PI * m as f64 / n as f64).cos()).collect();
        let sin = (0..n).map(|m| (2.0 * PI * m as f64 / n as f64).sin()).collect();
        Twiddles { cos, sin }
    }
}

pub fn stft(x: &[f64], window_size: usize, hop: usize, window: &[f64]) -> Result<ComplexSpectrogram> {
    check_framing(window_size, hop)?;
    if window_size % 2 != 0 {
        return Err(Error::invalid(format!("window size {window_size} must be even")));
    }
    if window.len() != window_size {
        return Err(Error::invalid("window length differs from window size"));
    }
    let n = window_size;
    let bins = n / 2 + 1;
    let frames = num_frames(x.len(), n, hop);
    let padded = pad_signal(x, n, hop);
    let tw = Twiddles::new(n);
    let mut re = vec![0.0; frames * bins];
    let mut im = vec![0.0; frames * bins];
    let mut buf = vec![0.0; n];
    for t in 0..frames {
        for (i, b) in buf.iter_mut().enumerate() {
            *b = window[i] * padded[t * hop + i];
        }
        for f in 0..bins {
            let (mut acc_re, mut acc_im) = (0.0, 0.0);
            for (i, &v) in buf.iter().enumerate() {
                let m = (i * f) % n;
                acc_re += v * tw.cos[m];
                acc_im -= v * tw.sin[m];
            }
            re[t * bins + f] = acc_re;
            im[t * bins + f] = acc_im;
        }
    }
    Ok(ComplexSpectrogram {
        re,
        im,
        frames,
        bins,
        window_size: n,
        hop,
        window: window.to_vec(),
        signal_len: x.len(),
    })
}

/// Weighted overlap-add inverse using the analysis window for synthesis.
pub fn istft(spec: &ComplexSpectrogram) -> Result<Vec<f64>> {
    istft_with(spec, &spec.window)
}

/// Weighted overlap-add inverse with an explicit synthesis window.
///
/// Requires `Σ_t analysis[n - t·hop] · synthesis[n - t·hop]` to be constant
/// over the signal support; the output is divided by that constant.
pub fn istft_with(spec: &ComplexSpectrogram, synthesis: &[f64]) -> Result<Vec<f64>> {
    let n = spec.window_size;
    let hop = spec.hop;
    if synthesis.len() != n {
        return Err(Error::invalid("synthesis window length differs from window size"));
    }
    let gain = cola_gain(&spec.window, synthesis, hop)?;
    let tw = Twiddles::new(n);
    let bins = spec.bins;
    let total = (spec.frames - 1) * hop + n;
    let mut out = vec![0.0; total];
    let mut frame = vec![0.0; n];
    for t in 0..spec.frames {
        let row_re = &spec.re[t * bins..(t + 1) * bins];
        let row_im = &spec.im[t * bins..(t + 1) * bins];
        for (i, slot) in frame.iter_mut().enumerate() {
            // Real inverse DFT from the half spectrum.
            let mut acc = row_re[0] + row_re[bins - 1] * if i % 2 == 0 { 1.0 } else { -1.0 };
            for f in 1..bins - 1 {
                let m = (i * f) % n;
                acc += 2.0 * (row_re[f] * tw.cos[m] - row_im[f] * tw.sin[m]);
            }
            *slot = acc / n as f64;
        }
        for i in 0..n {
            out[t * hop + i] += synthesis[i] * frame[i];
        }
    }
    let start = n - hop;
    Ok(out[start..start + spec.signal_len].iter().map(|v| v / gain).collect())
}

/// Overlap-add gain of an analysis/synthesis pair, or an error when the
/// pair does not sum to a constant.
pub fn cola_gain(analysis: &[f64], synthesis: &[f64], hop: usize) -> Result<f64> {
    let n = analysis.len();
    if hop == 0 || n % hop != 0 {
        return Err(Error::InvalidConfiguration(format!(
            "hop {hop} must divide window {n} for overlap-add"
        )));
    }
    let sums: Vec<f64> = (0..hop)
        .map(|r| (r..n).step_by(hop).map(|i| analysis[i] * synthesis[i]).sum())
        .collect();
    let mean = sums.iter().sum::<f64>() / hop as f64;
    if !(mean.abs() > 1e-12) || sums.iter().any(|s| (s - mean).abs() > 1e-9 * mean.abs()) {
        return Err(Error::InvalidConfiguration(
            "analysis/synthesis windows do not satisfy the constant overlap-add condition".into(),
        ));
    }
    Ok(mean)
}

/// Log power spectrum `log(|X|^2 + floor)`, `frames x bins`.
pub fn lps(spec: &ComplexSpectrogram, floor: f64) -> Vec<f64> {
    spec.re
        .iter()
        .zip(&spec.im)
        .map(|(r, i)| (r * r + i * i + floor).ln())
        .collect()
}

pub const LPS_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KernelKind {
    StackedStft,
    Free,
}

/// A strided 1-D filter bank, `channels x kernel_size` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisKernel {
    pub weights: Vec<f64>,
    pub channels: usize,
    pub kernel_size: usize,
    pub hop: usize,
    pub kind: KernelKind,
}

impl AnalysisKernel {
    pub fn new(weights: Vec<f64>, channels: usize, kernel_size: usize, hop: usize, kind: KernelKind) -> Result<Self> {
        check_framing(kernel_size, hop)?;
        if weights.len() != channels * kernel_size {
            return Err(Error::invalid(format!(
                "kernel weights have {} entries, expected {channels}x{kernel_size}",
                weights.len()
            )));
        }
        Ok(AnalysisKernel {
            weights,
            channels,
            kernel_size,
            hop,
            kind,
        })
    }

    pub fn row(&self, c: usize) -> &[f64] {
        &self.weights[c * self.kernel_size..(c + 1) * self.kernel_size]
    }
}

/// Stacks windowed cosine rows for `f = 0..=N/2` followed by windowed sine
/// rows for `f = 1..N/2`, giving exactly `N` real channels.
pub fn build_stacked_stft_kernel(n: usize, window: &[f64], hop: usize) -> Result<AnalysisKernel> {
    if n == 0 || n % 2 != 0 {
        return Err(Error::invalid(format!("stacked STFT kernel size {n} must be even")));
    }
    if window.len() != n {
        return Err(Error::invalid("window length differs from kernel size"));
    }
    let half = n / 2;
    let mut weights = Vec::with_capacity(n * n);
    for f in 0..=half {
        weights.extend((0..n).map(|i| window[i] * (2.0 * PI * (i * f) as f64 / n as f64).cos()));
    }
    for f in 1..half {
        weights.extend((0..n).map(|i| window[i] * (2.0 * PI * (i * f) as f64 / n as f64).sin()));
    }
    AnalysisKernel::new(weights, n, n, hop, KernelKind::StackedStft)
}

/// Synthesis kernel that inverts [`build_stacked_stft_kernel`] under
/// [`decode`] when `window · synthesis_window` overlap-adds to one.
pub fn stacked_stft_synthesis_kernel(n: usize, window: &[f64], hop: usize) -> Result<AnalysisKernel> {
    let analysis = build_stacked_stft_kernel(n, window, hop)?;
    let gain = cola_gain(window, window, hop)?;
    let half = n / 2;
    let mut weights = analysis.weights;
    for (c, row) in weights.chunks_mut(n).enumerate() {
        let scale = if c == 0 || c == half { 1.0 } else { 2.0 };
        row.iter_mut().for_each(|v| *v *= scale / (n as f64 * gain));
    }
    AnalysisKernel::new(weights, n, n, hop, KernelKind::StackedStft)
}

/// Real spectro-temporal representation, `frames x channels` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Rep {
    pub data: Vec<f64>,
    pub frames: usize,
    pub channels: usize,
    pub hop: usize,
    pub kernel_size: usize,
    pub signal_len: usize,
}

impl Rep {
    pub fn at(&self, t: usize, c: usize) -> f64 {
        self.data[t * self.channels + c]
    }

    /// Same data transposed to `channels x frames`.
    pub fn channels_first(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.data.len()];
        for t in 0..self.frames {
            for c in 0..self.channels {
                out[c * self.frames + t] = self.data[t * self.channels + c];
            }
        }
        out
    }
}

pub fn encode(x: &[f64], kernel: &AnalysisKernel) -> Result<Rep> {
    let n = kernel.kernel_size;
    let hop = kernel.hop;
    if x.len() < n {
        return Err(Error::invalid(format!(
            "signal of {} samples shorter than kernel of {n}",
            x.len()
        )));
    }
    let frames = num_frames(x.len(), n, hop);
    let padded = pad_signal(x, n, hop);
    let c = kernel.channels;
    let mut data = vec![0.0; frames * c];
    for t in 0..frames {
        let seg = &padded[t * hop..t * hop + n];
        for ch in 0..c {
            data[t * c + ch] = kernel.row(ch).iter().zip(seg).map(|(w, v)| w * v).sum();
        }
    }
    Ok(Rep {
        data,
        frames,
        channels: c,
        hop,
        kernel_size: n,
        signal_len: x.len(),
    })
}

/// Transposed-convolution overlap-add, trimmed back to the encoded length.
pub fn decode(rep: &Rep, kernel: &AnalysisKernel) -> Result<Vec<f64>> {
    if rep.hop != kernel.hop || rep.kernel_size != kernel.kernel_size || rep.channels != kernel.channels {
        return Err(Error::invalid("representation framing does not match kernel"));
    }
    let n = kernel.kernel_size;
    let hop = kernel.hop;
    let total = (rep.frames - 1) * hop + n;
    let mut out = vec![0.0; total];
    for t in 0..rep.frames {
        let dst = &mut out[t * hop..t * hop + n];
        for ch in 0..rep.channels {
            let v = rep.data[t * rep.channels + ch];
            if v == 0.0 {
                continue;
            }
            for (o, w) in dst.iter_mut().zip(kernel.row(ch)) {
                *o += w * v;
            }
        }
    }
    let start = n - hop;
    Ok(out[start..start + rep.signal_len].to_vec())
}

pub fn magnitude(rep: &Rep) -> Rep {
    Rep {
        data: rep.data.iter().map(|v| v.abs()).collect(),
        ..rep.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(seed: u64, n: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    /// Direct per-frame DFT on an already padded buffer.
    fn naive_dft(frame: &[f64]) -> Vec<(f64, f64)> {
        let n = frame.len();
        (0..=n / 2)
            .map(|f| {
                let mut re = 0.0;
                let mut im = 0.0;
                for (i, v) in frame.iter().enumerate() {
                    let arg = -2.0 * PI * (i * f) as f64 / n as f64;
                    re += v * arg.cos();
                    im += v * arg.sin();
                }
                (re, im)
            })
            .collect()
    }

    #[test]
    fn dc_signal_stft() {
        let x = vec![1.0; 12];
        let s = stft(&x, 4, 4, &rectangular(4)).unwrap();
        // hop == N means no padding: every frame is interior.
        assert_eq!(s.frames, 3);
        assert!((s.re[0] - 4.0).abs() < 1e-12);
        for f in 1..3 {
            assert!(s.re[f].abs() < 1e-12 && s.im[f].abs() < 1e-12);
        }
    }

    #[test]
    fn single_tone_stft() {
        let x: Vec<f64> = (0..8).map(|i| (2.0 * PI * i as f64 / 4.0).cos()).collect();
        let s = stft(&x, 4, 4, &rectangular(4)).unwrap();
        let mag = s.magnitude();
        assert!((mag[1] - 2.0).abs() < 1e-12);
        assert!(mag[0].abs() < 1e-12 && mag[2].abs() < 1e-12);
    }

    #[test]
    fn stft_matches_naive_dft() {
        let x = random(3, 300);
        let w = hann(32);
        let s = stft(&x, 32, 8, &w).unwrap();
        let padded = pad_signal(&x, 32, 8);
        for t in 0..s.frames {
            let frame: Vec<f64> = (0..32).map(|i| w[i] * padded[t * 8 + i]).collect();
            for (f, (re, im)) in naive_dft(&frame).into_iter().enumerate() {
                assert!((s.re[t * s.bins + f] - re).abs() <= 1e-10);
                assert!((s.im[t * s.bins + f] - im).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn odd_window_rejected() {
        assert!(stft(&[0.0; 10], 5, 1, &rectangular(5)).is_err());
        assert!(build_stacked_stft_kernel(5, &rectangular(5), 1).is_err());
    }

    #[test]
    fn istft_round_trip_sqrt_hann() {
        let x = random(4, 1000);
        let s = stft(&x, 64, 32, &sqrt_hann(64)).unwrap();
        let y = istft(&s).unwrap();
        let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for (a, b) in x.iter().zip(&y) {
            assert!((a - b).abs() <= 1e-8 * peak);
        }
    }

    #[test]
    fn istft_of_zero_is_zero_and_linear() {
        let x = random(5, 400);
        let z = random(6, 400);
        let w = sqrt_hann(64);
        let sx = stft(&x, 64, 32, &w).unwrap();
        let sz = stft(&z, 64, 32, &w).unwrap();
        assert!(istft(&sx.zeros_like()).unwrap().iter().all(|v| *v == 0.0));
        let sum = istft(&sx.add(&sz)).unwrap();
        for i in 0..400 {
            assert!((sum[i] - x[i] - z[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn non_cola_pair_is_rejected() {
        let s = stft(&random(1, 200), 64, 32, &hann(64)).unwrap();
        assert!(matches!(istft(&s), Err(Error::InvalidConfiguration(_))));
        // Hann analysis with rectangular synthesis overlap-adds to a constant.
        let y = istft_with(&s, &rectangular(64)).unwrap();
        let x = random(1, 200);
        for (a, b) in x.iter().zip(&y) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn lps_values() {
        let mut s = stft(&[0.0; 8], 4, 4, &rectangular(4)).unwrap();
        s.re[0] = 1.0;
        let l = lps(&s, LPS_FLOOR);
        assert!(l[0].abs() < 1e-9);
        assert!((l[1] - (1e-12f64).ln()).abs() < 1e-9);
        assert!((l[1] + 27.631).abs() < 1e-3);
    }

    #[test]
    fn lps_shifts_with_gain() {
        let x = random(8, 256);
        let x10: Vec<f64> = x.iter().map(|v| v * 10.0).collect();
        let w = hann(32);
        let a = stft(&x, 32, 16, &w).unwrap();
        let b = stft(&x10, 32, 16, &w).unwrap();
        let (la, lb) = (lps(&a, LPS_FLOOR), lps(&b, LPS_FLOOR));
        for i in 0..la.len() {
            let p = a.re[i].powi(2) + a.im[i].powi(2);
            if p > 1e-6 {
                assert!((lb[i] - la[i] - 2.0 * 10f64.ln()).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn stacked_kernel_n4() {
        let k = build_stacked_stft_kernel(4, &rectangular(4), 2).unwrap();
        let expect = [
            [1.0, 1.0, 1.0, 1.0],
            [1.0, 0.0, -1.0, 0.0],
            [1.0, -1.0, 1.0, -1.0],
            [0.0, 1.0, 0.0, -1.0],
        ];
        assert_eq!(k.channels, 4);
        for (c, row) in expect.iter().enumerate() {
            for (a, b) in k.row(c).iter().zip(row) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        for n in [2usize, 8, 16, 32] {
            assert_eq!(build_stacked_stft_kernel(n, &rectangular(n), n / 2).unwrap().channels, n);
        }
    }

    #[test]
    fn encode_with_stacked_kernel_matches_naive_dft() {
        let n = 16;
        let x = random(11, 200);
        let w = sqrt_hann(n);
        let k = build_stacked_stft_kernel(n, &w, 8).unwrap();
        let rep = encode(&x, &k).unwrap();
        let padded = pad_signal(&x, n, 8);
        for t in 0..rep.frames {
            let frame: Vec<f64> = (0..n).map(|i| w[i] * padded[t * 8 + i]).collect();
            let dft = naive_dft(&frame);
            for f in 0..=n / 2 {
                assert!((rep.at(t, f) - dft[f].0).abs() <= 1e-10);
            }
            for f in 1..n / 2 {
                // Sine rows correlate with +sin, the DFT uses -sin.
                assert!((rep.at(t, n / 2 + f) + dft[f].1).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn encode_dc_and_delta() {
        let k = build_stacked_stft_kernel(4, &rectangular(4), 2).unwrap();
        let rep = encode(&[1.0; 12], &k).unwrap();
        for t in 1..rep.frames - 1 {
            let row = &rep.data[t * 4..t * 4 + 4];
            assert!((row[0] - 4.0).abs() < 1e-12);
            assert!(row[1..].iter().all(|v| v.abs() < 1e-12));
        }
        let delta = AnalysisKernel::new(vec![1.0, 0.0, 0.0], 1, 3, 1, KernelKind::Free).unwrap();
        let x = random(2, 20);
        let rep = encode(&x, &delta).unwrap();
        // Frame t starts at padded index t, i.e. sample t - 2.
        for t in 2..rep.frames {
            assert_eq!(rep.data[t], x[t - 2]);
        }
    }

    #[test]
    fn decode_is_linear_and_zero_preserving() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let k = AnalysisKernel::new((0..40).map(|_| rng.random_range(-1.0..1.0)).collect(), 5, 8, 4, KernelKind::Free).unwrap();
        let r1 = encode(&random(3, 64), &k).unwrap();
        let r2 = encode(&random(4, 64), &k).unwrap();
        let zero = Rep {
            data: vec![0.0; r1.data.len()],
            ..r1.clone()
        };
        assert!(decode(&zero, &k).unwrap().iter().all(|v| *v == 0.0));
        let sum = Rep {
            data: r1.data.iter().zip(&r2.data).map(|(a, b)| a + b).collect(),
            ..r1.clone()
        };
        let (d1, d2, ds) = (decode(&r1, &k).unwrap(), decode(&r2, &k).unwrap(), decode(&sum, &k).unwrap());
        for i in 0..64 {
            assert!((ds[i] - d1[i] - d2[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn stacked_round_trip_with_synthesis_kernel() {
        let n = 32;
        let w = sqrt_hann(n);
        let a = build_stacked_stft_kernel(n, &w, n / 2).unwrap();
        let s = stacked_stft_synthesis_kernel(n, &w, n / 2).unwrap();
        let x = random(12, 777);
        let y = decode(&encode(&x, &a).unwrap(), &s).unwrap();
        for (p, q) in x.iter().zip(&y) {
            assert!((p - q).abs() < 1e-6);
        }
    }

    #[test]
    fn magnitude_of_tone_peaks_at_its_bin() {
        let n = 16;
        let k = build_stacked_stft_kernel(n, &rectangular(n), 8).unwrap();
        for bin in 1..n / 2 {
            let x: Vec<f64> = (0..160)
                .map(|i| (2.0 * PI * bin as f64 * i as f64 / n as f64 + 0.3).cos())
                .collect();
            let rep = magnitude(&encode(&x, &k).unwrap());
            let t = rep.frames / 2;
            let row = &rep.data[t * n..(t + 1) * n];
            let best = (0..n).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            assert!(best == bin || best == n / 2 + bin, "tone {bin} peaked at channel {best}");
            let energy = row[bin].powi(2) + row[n / 2 + bin].powi(2);
            assert!((energy.sqrt() - n as f64 / 2.0).abs() < 1e-9);
            assert!(rep.data.iter().all(|v| *v >= 0.0));
        }
    }
}
