//! Synthetic reverberant multi-speaker scenes.
//!
//! Every scene is built so that the additive decomposition
//! `mixture = Σ early + Σ late + noise` holds by construction: the early and
//! late parts of each room response are rendered separately and the mixture
//! is their sum.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Length of the early part of a room response, in seconds.
pub const EARLY_WINDOW_S: f64 = 0.050;
/// Largest speaker count the scene sampler derives seeds for.
pub const MAX_SPEAKERS: usize = 4;

pub const T60_RANGE: (f64, f64) = (0.2, 0.5);
pub const SIR_RANGE_DB: (f64, f64) = (-5.0, 5.0);
pub const SNR_RANGE_DB: (f64, f64) = (20.0, 30.0);

/// A room impulse response with its early/late boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct Rir {
    pub taps: Vec<f64>,
    pub sample_rate: u32,
    /// Index of the direct path.
    pub start_index: usize,
    /// First index belonging to the late part.
    pub early_end_index: usize,
    pub t60: f64,
}

impl Rir {
    /// Wraps measured or synthetic taps, locating the direct path as the
    /// first tap whose magnitude exceeds a tenth of the peak.
    pub fn from_taps(taps: Vec<f64>, sample_rate: u32, t60: f64) -> Result<Self> {
        if taps.is_empty() {
            return Err(Error::invalid("empty impulse response"));
        }
        if sample_rate == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        let peak = taps.iter().fold(0.0f64, |m, t| m.max(t.abs()));
        if peak == 0.0 || !peak.is_finite() {
            return Err(Error::invalid("impulse response has no finite non-zero tap"));
        }
        let start_index = taps
            .iter()
            .position(|t| t.abs() > peak / 10.0)
            .expect("peak tap exceeds peak/10");
        let early_end_index = (start_index + early_window_len(sample_rate)).min(taps.len());
        Ok(Rir {
            taps,
            sample_rate,
            start_index,
            early_end_index,
            t60,
        })
    }
}

/// Number of samples in the early window at `sample_rate`.
pub fn early_window_len(sample_rate: u32) -> usize {
    (EARLY_WINDOW_S * sample_rate as f64).round() as usize
}

/// A dry source utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceSignal {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
    pub speaker_id: String,
}

impl SourceSignal {
    pub fn new(samples: Vec<f64>, sample_rate: u32, speaker_id: impl Into<String>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::invalid("source signal is empty"));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::invalid("source signal has non-finite samples"));
        }
        Ok(SourceSignal {
            samples,
            sample_rate,
            speaker_id: speaker_id.into(),
        })
    }
}

/// One synthetic utterance with every intermediate render kept.
#[derive(Debug, Clone)]
pub struct MixtureScene {
    pub sources: Vec<SourceSignal>,
    pub rirs: Vec<Rir>,
    pub early: Vec<Vec<f64>>,
    pub late: Vec<Vec<f64>>,
    pub reverberant: Vec<Vec<f64>>,
    pub noise: Vec<f64>,
    pub mixture: Vec<f64>,
    /// Interferer amplitude gains applied to each speaker (speaker 0 is 1.0).
    pub gains: Vec<f64>,
    pub sir_db: f64,
    pub snr_db: f64,
    pub seed: u64,
}

impl MixtureScene {
    pub fn num_speakers(&self) -> usize {
        self.sources.len()
    }

    pub fn sample_rate(&self) -> u32 {
        self.sources[0].sample_rate
    }

    pub fn len(&self) -> usize {
        self.mixture.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mixture.is_empty()
    }

    /// Dry sources after interferer gain, i.e. the clean references that the
    /// early and reverberant renders were produced from.
    pub fn scaled_sources(&self) -> Vec<Vec<f64>> {
        self.sources
            .iter()
            .zip(&self.gains)
            .map(|(s, g)| s.samples.iter().map(|x| x * g).collect())
            .collect()
    }

    /// Sum of the early renders, a mixture without late reverberation or noise.
    pub fn early_mixture(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.len()];
        for e in &self.early {
            add_into(&mut out, e);
        }
        out
    }

    /// Returns a copy restricted to `[start, start + len)`.
    pub fn segment(&self, start: usize, len: usize) -> Result<MixtureScene> {
        if start + len > self.len() || len == 0 {
            return Err(Error::invalid(format!(
                "segment [{start}, {}) outside scene of length {}",
                start + len,
                self.len()
            )));
        }
        let cut = |v: &Vec<f64>| v[start..start + len].to_vec();
        Ok(MixtureScene {
            sources: self
                .sources
                .iter()
                .map(|s| SourceSignal {
                    samples: cut(&s.samples),
                    sample_rate: s.sample_rate,
                    speaker_id: s.speaker_id.clone(),
                })
                .collect(),
            rirs: self.rirs.clone(),
            early: self.early.iter().map(cut).collect(),
            late: self.late.iter().map(cut).collect(),
            reverberant: self.reverberant.iter().map(cut).collect(),
            noise: cut(&self.noise),
            mixture: cut(&self.mixture),
            gains: self.gains.clone(),
            sir_db: self.sir_db,
            snr_db: self.snr_db,
            seed: self.seed,
        })
    }
}

/// Synthesizes a room response: a unit direct path followed by an
/// exponentially decaying Gaussian tail whose envelope starts at 0.5.
pub fn synth_rir(t60: f64, length_s: f64, sample_rate: u32, direct_delay: usize, seed: u64) -> Result<Rir> {
    if !(t60 > 0.0) || sample_rate == 0 {
        return Err(Error::invalid("t60 and sample rate must be positive"));
    }
    if t60 <= EARLY_WINDOW_S {
        return Err(Error::invalid(format!("t60 {t60} s must exceed the early window")));
    }
    if length_s < t60 {
        return Err(Error::invalid("rir length shorter than t60"));
    }
    let fs = sample_rate as f64;
    let len = (length_s * fs).round() as usize;
    if direct_delay >= len {
        return Err(Error::invalid("direct delay beyond rir length"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let decay = 3.0 * std::f64::consts::LN_10 / (fs * t60);
    let mut taps = vec![0.0; len];
    taps[direct_delay] = 1.0;
    for (n, tap) in taps.iter_mut().enumerate().skip(direct_delay + 1) {
        let g: f64 = rng.sample(StandardNormal);
        *tap = 0.5 * g * tail_envelope(decay, n - direct_delay);
    }
    Rir::from_taps(taps, sample_rate, t60)
}

fn tail_envelope(decay: f64, offset: usize) -> f64 {
    (-decay * offset as f64).exp()
}

/// Splits a response at its early/late boundary. The two halves sum to the
/// original taps exactly.
pub fn split_rir(rir: &Rir) -> (Vec<f64>, Vec<f64>) {
    let cut = rir.early_end_index.min(rir.taps.len());
    let mut early = rir.taps.clone();
    let mut late = vec![0.0; rir.taps.len()];
    for n in cut..rir.taps.len() {
        late[n] = early[n];
        early[n] = 0.0;
    }
    (early, late)
}

/// Linear convolution of `signal` with `taps`, truncated to `signal.len()`.
pub fn convolve_truncated(signal: &[f64], taps: &[f64]) -> Result<Vec<f64>> {
    if taps.is_empty() {
        return Err(Error::invalid("empty convolution kernel"));
    }
    let n = signal.len();
    let mut out = vec![0.0; n];
    for (j, &h) in taps.iter().enumerate() {
        if h == 0.0 || j >= n {
            continue;
        }
        for (o, &x) in out[j..].iter_mut().zip(signal) {
            *o += h * x;
        }
    }
    Ok(out)
}

/// Renders a source through an impulse response.
pub fn render(source: &SourceSignal, taps: &[f64]) -> Result<Vec<f64>> {
    convolve_truncated(&source.samples, taps)
}

/// Mean power of a waveform.
pub fn power(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
}

fn add_into(acc: &mut [f64], x: &[f64]) {
    for (a, b) in acc.iter_mut().zip(x) {
        *a += b;
    }
}

/// Builds a scene from dry sources and their responses.
///
/// Speaker 0 is the SIR reference; each other speaker is scaled so that the
/// power ratio of reverberant renders equals `sir_db`. White noise is scaled
/// against the noiseless mixture so that its ratio equals `snr_db`; an
/// infinite `snr_db` disables noise.
pub fn mix_scene(sources: Vec<SourceSignal>, rirs: Vec<Rir>, sir_db: f64, snr_db: f64, seed: u64) -> Result<MixtureScene> {
    let k = sources.len();
    if k == 0 || rirs.len() != k {
        return Err(Error::invalid(format!(
            "need K >= 1 sources with matching rirs, got {} sources and {} rirs",
            k,
            rirs.len()
        )));
    }
    let fs = sources[0].sample_rate;
    let len = sources[0].samples.len();
    for (s, r) in sources.iter().zip(&rirs) {
        if s.sample_rate != fs || r.sample_rate != fs {
            return Err(Error::invalid("sample rates differ within scene"));
        }
        if s.samples.len() != len {
            return Err(Error::invalid("sources differ in length"));
        }
    }

    let mut early = Vec::with_capacity(k);
    let mut late = Vec::with_capacity(k);
    for (s, r) in sources.iter().zip(&rirs) {
        let (e_taps, l_taps) = split_rir(r);
        early.push(render(s, &e_taps)?);
        late.push(render(s, &l_taps)?);
    }
    let raw_powers: Vec<f64> = early
        .iter()
        .zip(&late)
        .map(|(e, l)| {
            let y: Vec<f64> = e.iter().zip(l).map(|(a, b)| a + b).collect();
            power(&y)
        })
        .collect();
    for (i, p) in raw_powers.iter().enumerate() {
        if !(*p > 0.0) {
            return Err(Error::DegenerateSource(format!("speaker {i} renders to silence")));
        }
    }

    let mut gains = vec![1.0; k];
    for i in 1..k {
        gains[i] = (raw_powers[0] / (raw_powers[i] * db_to_power(sir_db))).sqrt();
    }
    for i in 0..k {
        let g = gains[i];
        early[i].iter_mut().for_each(|v| *v *= g);
        late[i].iter_mut().for_each(|v| *v *= g);
    }
    let reverberant: Vec<Vec<f64>> = early
        .iter()
        .zip(&late)
        .map(|(e, l)| e.iter().zip(l).map(|(a, b)| a + b).collect())
        .collect();

    let mut clean_mix = vec![0.0; len];
    for y in &reverberant {
        add_into(&mut clean_mix, y);
    }
    let noise = if snr_db.is_infinite() && snr_db > 0.0 {
        vec![0.0; len]
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw: Vec<f64> = (0..len).map(|_| rng.sample(StandardNormal)).collect();
        let scale = (power(&clean_mix) / (power(&raw) * db_to_power(snr_db))).sqrt();
        raw.into_iter().map(|v| v * scale).collect()
    };

    let mut mixture = vec![0.0; len];
    for e in &early {
        add_into(&mut mixture, e);
    }
    for l in &late {
        add_into(&mut mixture, l);
    }
    add_into(&mut mixture, &noise);

    Ok(MixtureScene {
        sources,
        rirs,
        early,
        late,
        reverberant,
        noise,
        mixture,
        gains,
        sir_db: if k == 1 { 0.0 } else { sir_db },
        snr_db,
        seed,
    })
}

fn db_to_power(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

/// Realized signal-to-interference ratio of speaker 0 against speaker `k`.
pub fn realized_sir_db(scene: &MixtureScene, k: usize) -> f64 {
    10.0 * (power(&scene.reverberant[0]) / power(&scene.reverberant[k])).log10()
}

/// Realized signal-to-noise ratio of the noiseless mixture against the noise.
pub fn realized_snr_db(scene: &MixtureScene) -> f64 {
    let mut clean = vec![0.0; scene.len()];
    for y in &scene.reverberant {
        add_into(&mut clean, y);
    }
    10.0 * (power(&clean) / power(&scene.noise)).log10()
}

/// SplitMix64 finalizer.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Child seed for item `index` under `master_seed`:
/// `splitmix64(master_seed ^ splitmix64(index))`.
pub fn derive_seed(master_seed: u64, index: u64) -> u64 {
    splitmix64(master_seed ^ splitmix64(index))
}

/// Randomized acoustic conditions of one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneParams {
    pub seed: u64,
    pub t60: f64,
    pub sir_db: f64,
    pub snr_db: f64,
    pub speaker_seeds: [u64; MAX_SPEAKERS],
    pub noise_seed: u64,
}

pub fn sample_scene_params(master_seed: u64, index: u64) -> SceneParams {
    let seed = derive_seed(master_seed, index);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t60 = rng.random_range(T60_RANGE.0..=T60_RANGE.1);
    let sir_db = rng.random_range(SIR_RANGE_DB.0..=SIR_RANGE_DB.1);
    let snr_db = rng.random_range(SNR_RANGE_DB.0..=SNR_RANGE_DB.1);
    let mut speaker_seeds = [0u64; MAX_SPEAKERS];
    for (k, s) in speaker_seeds.iter_mut().enumerate() {
        *s = derive_seed(seed, k as u64 + 1);
    }
    SceneParams {
        seed,
        t60,
        sir_db,
        snr_db,
        speaker_seeds,
        noise_seed: derive_seed(seed, 0),
    }
}

/// Bandlimited "speech": AR(2)-resonator noise bursts separated by random
/// silences. The resonance is fixed per seed, so one seed is one voice.
pub fn synth_source(seed: u64, num_samples: usize, sample_rate: u32) -> SourceSignal {
    let fs = sample_rate as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nyquist = fs / 2.0;
    let centre = rng.random_range(0.05 * nyquist..0.75 * nyquist);
    let radius: f64 = rng.random_range(0.90..0.97);
    let a1 = -2.0 * radius * (2.0 * std::f64::consts::PI * centre / fs).cos();
    let a2 = radius * radius;

    let mut out = vec![0.0; num_samples];
    let mut pos = (rng.random_range(0.0..0.1) * fs) as usize;
    while pos < num_samples {
        let burst = (rng.random_range(0.15..0.5) * fs) as usize;
        let end = (pos + burst).min(num_samples);
        let level: f64 = rng.random_range(0.5..1.0);
        let (mut y1, mut y2) = (0.0, 0.0);
        for n in pos..end {
            let e: f64 = rng.sample(StandardNormal);
            let y = e - a1 * y1 - a2 * y2;
            y2 = y1;
            y1 = y;
            let phase = (n - pos) as f64 / burst.max(1) as f64;
            let fade = (std::f64::consts::PI * phase).sin();
            out[n] = level * fade * y;
        }
        pos = end + (rng.random_range(0.05..0.3) * fs) as usize;
    }
    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        out.iter_mut().for_each(|v| *v *= 0.9 / peak);
    } else {
        // Bursts can only be skipped for zero-length buffers.
        out.iter_mut().for_each(|v| *v = 0.0);
    }
    SourceSignal {
        samples: out,
        sample_rate,
        speaker_id: format!("spk{seed:016x}"),
    }
}

/// Recipe for a fully synthetic scene.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub master_seed: u64,
    pub index: u64,
    pub num_speakers: usize,
    pub duration_s: f64,
    pub sample_rate: u32,
    /// Length of each synthetic room response, in seconds.
    pub rir_length_s: f64,
}

/// Generates the scene described by `spec`. Pure given the spec.
pub fn generate_scene(spec: &SceneSpec) -> Result<MixtureScene> {
    if spec.num_speakers == 0 || spec.num_speakers > MAX_SPEAKERS {
        return Err(Error::invalid(format!(
            "speaker count {} outside 1..={MAX_SPEAKERS}",
            spec.num_speakers
        )));
    }
    let params = sample_scene_params(spec.master_seed, spec.index);
    let len = (spec.duration_s * spec.sample_rate as f64).round() as usize;
    if len == 0 {
        return Err(Error::invalid("scene duration rounds to zero samples"));
    }
    let mut sources = Vec::with_capacity(spec.num_speakers);
    let mut rirs = Vec::with_capacity(spec.num_speakers);
    for k in 0..spec.num_speakers {
        let spk_seed = params.speaker_seeds[k];
        sources.push(synth_source(spk_seed, len, spec.sample_rate));
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spk_seed, 7));
        let delay = rng.random_range(8..64usize);
        let rir_len = spec.rir_length_s.max(params.t60);
        rirs.push(synth_rir(params.t60, rir_len, spec.sample_rate, delay, derive_seed(spk_seed, 11))?);
    }
    mix_scene(sources, rirs, params.sir_db, params.snr_db, params.noise_seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_conv(x: &[f64], h: &[f64]) -> Vec<f64> {
        (0..x.len())
            .map(|n| (0..h.len()).filter(|&j| j <= n).map(|j| h[j] * x[n - j]).sum())
            .collect()
    }

    fn noise(seed: u64, n: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn t60_envelope_reaches_minus_60_db() {
        let decay = 3.0 * std::f64::consts::LN_10 / (8000.0 * 0.3);
        let ratio = tail_envelope(decay, 2400) / tail_envelope(decay, 0);
        assert!((ratio - 1e-3).abs() < 1e-15);
    }

    #[test]
    fn rir_is_deterministic_and_valid() {
        let a = synth_rir(0.3, 0.4, 8000, 20, 5).unwrap();
        let b = synth_rir(0.3, 0.4, 8000, 20, 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.start_index, 20);
        assert_eq!(a.early_end_index - a.start_index, 400);
        assert!(a.early_end_index <= a.taps.len());
        assert_ne!(a, synth_rir(0.3, 0.4, 8000, 20, 6).unwrap());
    }

    #[test]
    fn rir_rejects_bad_arguments() {
        assert!(synth_rir(0.0, 0.4, 8000, 0, 1).is_err());
        assert!(synth_rir(-1.0, 0.4, 8000, 0, 1).is_err());
        assert!(synth_rir(0.3, 0.4, 0, 0, 1).is_err());
        assert!(synth_rir(0.3, 0.2, 8000, 0, 1).is_err());
    }

    #[test]
    fn start_index_uses_tenth_of_peak() {
        let rir = Rir::from_taps(vec![0.05, 0.2, 1.0, 0.3, 0.1], 8000, 0.3).unwrap();
        assert_eq!(rir.start_index, 1);
    }

    #[test]
    fn split_window_covers_fifty_ms() {
        let mut taps = vec![0.0; 1000];
        taps[100] = 1.0;
        for t in taps.iter_mut().skip(101) {
            *t = 0.01;
        }
        let rir = Rir::from_taps(taps, 8000, 0.3).unwrap();
        let (early, late) = split_rir(&rir);
        assert_eq!(rir.early_end_index, 500);
        assert!(early[100..500].iter().all(|&v| v != 0.0));
        assert!(early[500..].iter().all(|&v| v == 0.0));
        assert!(late[..500].iter().all(|&v| v == 0.0));
        for i in 0..1000 {
            assert_eq!(early[i] + late[i], rir.taps[i]);
        }
    }

    #[test]
    fn short_rir_has_no_late_part() {
        let rir = Rir::from_taps(vec![0.0, 1.0, 0.5, 0.2], 8000, 0.3).unwrap();
        let (early, late) = split_rir(&rir);
        assert_eq!(early, rir.taps);
        assert!(late.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn split_convolution_is_linear() {
        let rir = synth_rir(0.25, 0.3, 8000, 13, 3).unwrap();
        let x = noise(9, 3000);
        let (e, l) = split_rir(&rir);
        let full = brute_conv(&x, &rir.taps);
        let ye = convolve_truncated(&x, &e).unwrap();
        let yl = convolve_truncated(&x, &l).unwrap();
        for i in 0..x.len() {
            assert!((ye[i] + yl[i] - full[i]).abs() <= 1e-10);
        }
    }

    #[test]
    fn render_matches_examples_and_brute_force() {
        let src = SourceSignal::new(vec![1.0, 0.0, 0.0, 0.0], 8000, "a").unwrap();
        assert_eq!(render(&src, &[1.0]).unwrap(), src.samples);
        assert_eq!(render(&src, &[0.0, 0.5]).unwrap(), vec![0.0, 0.5, 0.0, 0.0]);
        assert!(render(&src, &[]).is_err());

        let x = noise(1, 500);
        let h = noise(2, 70);
        let fast = convolve_truncated(&x, &h).unwrap();
        let slow = brute_conv(&x, &h);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    fn unit_rir() -> Rir {
        Rir::from_taps(vec![1.0], 8000, 0.3).unwrap()
    }

    #[test]
    fn single_speaker_identity_scene() {
        let src = synth_source(4, 2000, 8000);
        let scene = mix_scene(vec![src.clone()], vec![unit_rir()], 3.0, f64::INFINITY, 1).unwrap();
        assert_eq!(scene.mixture, src.samples);
        assert_eq!(scene.gains, vec![1.0]);
    }

    #[test]
    fn equal_power_zero_sir_gives_unit_gain() {
        let a = SourceSignal::new(vec![1.0, -1.0, 1.0, -1.0], 8000, "a").unwrap();
        let b = SourceSignal::new(vec![-1.0, 1.0, 1.0, -1.0], 8000, "b").unwrap();
        let scene = mix_scene(vec![a, b], vec![unit_rir(), unit_rir()], 0.0, f64::INFINITY, 1).unwrap();
        assert!((scene.gains[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn six_db_sir_halves_interferer_amplitude() {
        let a = SourceSignal::new(vec![1.0, -1.0, 1.0, -1.0], 8000, "a").unwrap();
        let b = SourceSignal::new(vec![-1.0, 1.0, 1.0, -1.0], 8000, "b").unwrap();
        let scene = mix_scene(vec![a, b], vec![unit_rir(), unit_rir()], 6.02, f64::INFINITY, 1).unwrap();
        assert!((scene.gains[1] - 0.5).abs() < 1e-3);
        assert!((realized_sir_db(&scene, 1) - 6.02).abs() < 1e-9);
    }

    #[test]
    fn silent_source_is_rejected() {
        let a = SourceSignal::new(vec![1.0; 8], 8000, "a").unwrap();
        let b = SourceSignal::new(vec![0.0; 8], 8000, "b").unwrap();
        let err = mix_scene(vec![a, b], vec![unit_rir(), unit_rir()], 0.0, 25.0, 1).unwrap_err();
        assert!(matches!(err, Error::DegenerateSource(_)));
    }

    #[test]
    fn scene_params_are_deterministic_and_in_range() {
        assert_eq!(sample_scene_params(7, 3), sample_scene_params(7, 3));
        let mut sum = 0.0;
        let (mut lo, mut hi) = (f64::MAX, f64::MIN);
        for i in 0..10_000 {
            let p = sample_scene_params(42, i);
            sum += p.t60;
            lo = lo.min(p.t60);
            hi = hi.max(p.t60);
            assert!((-5.0..=5.0).contains(&p.sir_db));
            assert!((20.0..=30.0).contains(&p.snr_db));
        }
        assert!(lo >= 0.2 && hi <= 0.5);
        assert!((sum / 10_000.0 - 0.35).abs() < 0.01);
    }

    #[test]
    fn child_seeds_rarely_collide() {
        let mut seeds: Vec<u64> = (0..10_000).map(|i| sample_scene_params(1, i).seed).collect();
        seeds.sort_unstable();
        seeds.dedup();
        assert!(seeds.len() >= 9_999);
    }

    #[test]
    fn generated_scene_satisfies_decomposition() {
        let spec = SceneSpec {
            master_seed: 3,
            index: 0,
            num_speakers: 3,
            duration_s: 0.5,
            sample_rate: 8000,
            rir_length_s: 0.5,
        };
        let scene = generate_scene(&spec).unwrap();
        let peak = scene.mixture.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for n in 0..scene.len() {
            let sum: f64 = (0..3).map(|k| scene.early[k][n] + scene.late[k][n]).sum::<f64>() + scene.noise[n];
            assert!((scene.mixture[n] - sum).abs() <= 1e-10 * peak);
            for k in 0..3 {
                assert!((scene.reverberant[k][n] - scene.early[k][n] - scene.late[k][n]).abs() <= 1e-10 * peak);
            }
        }
        for k in 1..3 {
            assert!((realized_sir_db(&scene, k) - scene.sir_db).abs() < 0.01);
        }
        assert!((realized_snr_db(&scene) - scene.snr_db).abs() < 0.01);
    }
}
