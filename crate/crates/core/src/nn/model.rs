use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::attractor::{kmeans_attractors_with, oracle_attractors_in_graph, AttractorMode, AttractorSet, EmbeddingField, KmeansOptions};
use super::loss::{concentration_loss, discrimination_loss, recon_loss, si_sdr_in_graph, upit_loss, LossWeights};
use super::tcn::{Tcn, TcnConfig};
use crate::autodiff::{param_diff_check, Checkpoint, Conv1dSpec, Graph, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::masks::{ibm_tf, speech_presence, MaskKind, MaskTensor, PresenceMask};
use crate::transforms::{
    build_stacked_stft_kernel, encode, istft, lps, pad_signal, sqrt_hann, stft, AnalysisKernel, ComplexSpectrogram, KernelKind,
    LPS_FLOOR,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Dan,
    Tasnet,
    Tddan,
}

/// Encoder of the speaker-embedding stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderKind {
    /// Log power spectrum of an STFT.
    Lps,
    /// Fixed stacked cosine/sine kernels.
    Stft,
    /// Learned kernels.
    Free,
}

/// Operand of the reconstruction loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReconDomain {
    /// `|y| m - |d|`.
    #[default]
    Magnitude,
    /// Complex STFT values, or signed values for real representations.
    Complex,
}

/// Window sizes and hops in samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Framing {
    pub ses_window: usize,
    pub ses_hop: usize,
    /// Channels of a learned speaker-stream encoder.
    pub ses_channels: usize,
    pub sds_window: usize,
    pub sds_hop: usize,
    pub sds_channels: usize,
}

impl Default for Framing {
    fn default() -> Self {
        Framing {
            ses_window: 32,
            ses_hop: 16,
            ses_channels: 32,
            sds_window: 16,
            sds_hop: 8,
            sds_channels: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub model_kind: ModelKind,
    pub encoder_kind: EncoderKind,
    pub tcn: TcnConfig,
    /// TD-DAN: repeats given to the speaker stream; the rest go to the
    /// decoding stream.
    #[serde(default = "one")]
    pub ses_repeats: usize,
    /// Speaker embedding dimension.
    #[serde(rename = "D")]
    pub d: usize,
    /// Decoding-stream embedding dimension.
    #[serde(rename = "E")]
    pub e: usize,
    pub loss_weights: LossWeights,
    pub sample_rate: u32,
    pub framing: Framing,
    /// Output count of Conv-TasNet.
    #[serde(default = "two")]
    pub num_speakers: usize,
    #[serde(default = "fifteen")]
    pub presence_percent: f64,
    #[serde(default)]
    pub recon_domain: ReconDomain,
    #[serde(default)]
    pub kmeans_normalize: bool,
    #[serde(default)]
    pub init_seed: u64,
}

fn one() -> usize {
    1
}
fn two() -> usize {
    2
}
fn fifteen() -> f64 {
    15.0
}

impl ModelConfig {
    /// Small configuration that trains on a laptop CPU.
    pub fn desk(kind: ModelKind, encoder: EncoderKind) -> Self {
        let mut framing = Framing::default();
        if encoder == EncoderKind::Lps || kind == ModelKind::Dan {
            framing.ses_window = 256;
            framing.ses_hop = 128;
        }
        ModelConfig {
            model_kind: kind,
            encoder_kind: if kind == ModelKind::Dan { EncoderKind::Lps } else { encoder },
            tcn: TcnConfig::new(16, 32, 3, 4, 2),
            ses_repeats: 1,
            d: 20,
            e: 20,
            loss_weights: match (kind, encoder) {
                (ModelKind::Dan, _) => LossWeights::dan(),
                (_, EncoderKind::Free) => LossWeights::tddan_free(),
                _ => LossWeights::tddan(),
            },
            sample_rate: 8000,
            framing,
            num_speakers: 2,
            presence_percent: 15.0,
            recon_domain: ReconDomain::Magnitude,
            kmeans_normalize: false,
            init_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfiguration(m));
        self.tcn.validate()?;
        self.loss_weights.validate()?;
        if self.d == 0 || self.e == 0 {
            return bad("embedding dimensions must be >= 1".into());
        }
        let f = &self.framing;
        for (w, h) in [(f.ses_window, f.ses_hop), (f.sds_window, f.sds_hop)] {
            if w == 0 || h == 0 || h > w || w % h != 0 {
                return bad(format!("hop {h} must divide window {w}"));
            }
        }
        if f.sds_channels == 0 || f.ses_channels == 0 {
            return bad("encoder channel counts must be >= 1".into());
        }
        if !(self.presence_percent > 0.0 && self.presence_percent <= 100.0) {
            return bad(format!("presence percentage {}", self.presence_percent));
        }
        match self.model_kind {
            ModelKind::Dan if self.encoder_kind != EncoderKind::Lps => bad("DAN uses the LPS encoder".into()),
            ModelKind::Tddan if self.ses_repeats == 0 || self.ses_repeats >= self.tcn.r => bad(format!(
                "TD-DAN needs 1 <= ses_repeats < R, got {} of {}",
                self.ses_repeats, self.tcn.r
            )),
            ModelKind::Tasnet if !(1..=4).contains(&self.num_speakers) => bad(format!("{} outputs", self.num_speakers)),
            _ => Ok(()),
        }
    }

    /// Channel count of the speaker-stream representation.
    pub fn ses_bins(&self) -> usize {
        match self.encoder_kind {
            EncoderKind::Lps => self.framing.ses_window / 2 + 1,
            EncoderKind::Stft => self.framing.ses_window,
            EncoderKind::Free => self.framing.ses_channels,
        }
    }
}

#[derive(Debug, Clone)]
struct SesNet {
    free_kernel: Option<ParamId>,
    fixed_kernel: Option<AnalysisKernel>,
    window: Vec<f64>,
    tcn: Tcn,
}

#[derive(Debug, Clone)]
struct WaveNet {
    enc: ParamId,
    dec: ParamId,
    tcn: Tcn,
    /// Attractor transform, TD-DAN only.
    transform: Option<ParamId>,
}

/// A separation model and its parameters.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    ses: Option<SesNet>,
    wave: Option<WaveNet>,
}

/// Per-term values of the training objective.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct LossTerms {
    pub total: f64,
    /// Mean SI-SDR in dB of the waveform outputs (absent for DAN).
    pub si_sdr: Option<f64>,
    pub recon: f64,
    pub concentration: f64,
    pub discrimination: f64,
}

/// Graph handles of a scalar loss and its parts.
#[derive(Debug, Clone, Copy)]
pub struct LossNodes {
    pub total: Tensor,
    pub si_sdr: Option<Tensor>,
    pub recon: Option<Tensor>,
    pub concentration: Option<Tensor>,
    pub discrimination: Option<Tensor>,
}

fn spectral_norm(window: &[f64]) -> f64 {
    1.0 / window.iter().map(|w| w * w).sum::<f64>().sqrt()
}

fn rms(x: &[f64]) -> f64 {
    (x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64).sqrt()
}

/// `[C·D, T]` network output to one row per `(t, c)` bin: `[T·C, D]`.
fn to_bins(g: &mut Graph, x: Tensor, c: usize, d: usize) -> Result<Tensor> {
    let t = g.shape(x)[1];
    let xt = g.transpose(x)?;
    g.reshape(xt, &[t * c, d])
}

/// Speaker-stream quantities of one mixture.
struct SesPass {
    emb: Tensor,
    frames: usize,
    channels: usize,
    /// `[bins, 1]` mixture magnitude, or signed/real part for complex recon.
    mix: Tensor,
    mix_imag: Option<Tensor>,
    presence: PresenceMask,
    spec: Option<ComplexSpectrogram>,
}

/// Decoding-stream quantities of one mixture.
struct WavePass {
    rep: Tensor,
    out: Tensor,
    frames: usize,
    len: usize,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut store = ParamStore::new();
        let f = config.framing;
        let mut ses = None;
        let mut wave = None;
        if config.model_kind != ModelKind::Tasnet {
            let bins = config.ses_bins();
            let window = sqrt_hann(f.ses_window);
            let (free_kernel, fixed_kernel) = match config.encoder_kind {
                EncoderKind::Lps => (None, None),
                EncoderKind::Stft => (None, Some(build_stacked_stft_kernel(f.ses_window, &window, f.ses_hop)?)),
                EncoderKind::Free => (
                    Some(store.add_uniform("ses.enc", &[bins, 1, f.ses_window], f.ses_window, &mut rng)),
                    None,
                ),
            };
            let mut tcfg = config.tcn;
            if config.model_kind == ModelKind::Tddan {
                tcfg.r = config.ses_repeats;
            }
            let tcn = Tcn::new(&mut store, "ses.tcn", tcfg, bins, bins * config.d, &mut rng)?;
            ses = Some(SesNet {
                free_kernel,
                fixed_kernel,
                window,
                tcn,
            });
        }
        if config.model_kind != ModelKind::Dan {
            let c = f.sds_channels;
            let enc = store.add_uniform("sds.enc", &[c, 1, f.sds_window], f.sds_window, &mut rng);
            let (out, transform, r) = if config.model_kind == ModelKind::Tddan {
                let mut w = vec![0.0; config.e * config.d];
                for i in 0..config.e.min(config.d) {
                    w[i * config.d + i] = 1.0;
                }
                let t = store.add(crate::autodiff::Parameter::new("sds.transform", &[config.e, config.d], w));
                (c * config.e, Some(t), config.tcn.r - config.ses_repeats)
            } else {
                (c * config.num_speakers, None, config.tcn.r)
            };
            let tcfg = TcnConfig { r, ..config.tcn };
            let tcn = Tcn::new(&mut store, "sds.tcn", tcfg, c, out, &mut rng)?;
            let dec = store.add_uniform("sds.dec", &[c, 1, f.sds_window], c, &mut rng);
            wave = Some(WaveNet { enc, dec, tcn, transform });
        }
        Ok(Model { config, store, ses, wave })
    }

    /// Scale applied to inputs so that the mixture has unit RMS.
    pub fn input_scale(mixture: &[f64]) -> f64 {
        let r = rms(mixture);
        if r > 0.0 {
            1.0 / r
        } else {
            1.0
        }
    }

    fn check_len(&self, len: usize) -> Result<()> {
        let f = &self.config.framing;
        let need = match self.config.model_kind {
            ModelKind::Dan => f.ses_window,
            ModelKind::Tasnet => f.sds_window,
            ModelKind::Tddan => f.ses_window.max(f.sds_window),
        };
        if len < need {
            return Err(Error::invalid(format!("signal of {len} samples shorter than one frame of {need}")));
        }
        Ok(())
    }

    fn free_analysis_kernel(&self, store: &ParamStore, id: ParamId) -> Result<AnalysisKernel> {
        let f = &self.config.framing;
        AnalysisKernel::new(store.get(id).values.clone(), f.ses_channels, f.ses_window, f.ses_hop, KernelKind::Free)
    }

    /// Representation of `x` through a learned `[C, 1, N]` kernel, `[C, T]`.
    fn conv_encode(g: &mut Graph, store: &ParamStore, x: &[f64], kernel: ParamId, hop: usize) -> Result<Tensor> {
        let n = store.get(kernel).shape[2];
        let padded = pad_signal(x, n, hop);
        let len = padded.len();
        let xt = g.constant(padded, &[1, len])?;
        let w = g.param(store, kernel);
        g.conv1d(xt, w, None, Conv1dSpec { stride: hop, ..Default::default() })
    }

    fn ses_pass(&self, g: &mut Graph, store: &ParamStore, y: &[f64]) -> Result<SesPass> {
        let ses = self.ses.as_ref().ok_or_else(|| Error::InvalidState("model has no speaker stream".into()))?;
        let f = &self.config.framing;
        let bins = self.config.ses_bins();
        let complex = self.config.recon_domain == ReconDomain::Complex;
        let (features, frames, mix, mix_imag, power, spec) = match self.config.encoder_kind {
            EncoderKind::Lps => {
                let spec = stft(y, f.ses_window, f.ses_hop, &ses.window)?;
                let frames = spec.frames;
                let s = spectral_norm(&ses.window);
                let feats = lps(&spec, LPS_FLOOR);
                let feats = g.constant(crate::transforms::Rep {
                    data: feats,
                    frames,
                    channels: bins,
                    hop: f.ses_hop,
                    kernel_size: f.ses_window,
                    signal_len: y.len(),
                }
                .channels_first(), &[bins, frames])?;
                let mag: Vec<f64> = spec.magnitude().iter().map(|m| m * s).collect();
                let power: Vec<f64> = mag.iter().map(|m| m * m).collect();
                let (mix, imag) = if complex {
                    let re = g.constant(spec.re.iter().map(|v| v * s).collect(), &[frames * bins, 1])?;
                    let im = g.constant(spec.im.iter().map(|v| v * s).collect(), &[frames * bins, 1])?;
                    (re, Some(im))
                } else {
                    (g.constant(mag, &[frames * bins, 1])?, None)
                };
                (feats, frames, mix, imag, power, Some(spec))
            }
            EncoderKind::Stft => {
                let kernel = ses.fixed_kernel.as_ref().expect("stacked kernel");
                let rep = encode(y, kernel)?;
                let s = spectral_norm(&ses.window);
                let frames = rep.frames;
                let feats = g.constant(rep.channels_first(), &[bins, frames])?;
                let vals: Vec<f64> = rep.data.iter().map(|v| v * s).collect();
                let power = vals.iter().map(|v| v * v).collect();
                let mix = if complex { vals } else { vals.iter().map(|v| v.abs()).collect() };
                (feats, frames, g.constant(mix, &[frames * bins, 1])?, None, power, None)
            }
            EncoderKind::Free => {
                let kernel = ses.free_kernel.expect("free kernel");
                let rep = Self::conv_encode(g, store, y, kernel, f.ses_hop)?;
                let frames = g.shape(rep)[1];
                let col = to_bins(g, rep, bins, 1)?;
                let power = g.value(col).iter().map(|v| v * v).collect();
                let mix = if complex { col } else { g.abs(col) };
                (rep, frames, mix, None, power, None)
            }
        };
        let out = ses.tcn.forward(g, store, features)?;
        let emb = to_bins(g, out, bins, self.config.d)?;
        let presence = speech_presence(&power, frames, bins, self.config.presence_percent)?;
        Ok(SesPass {
            emb,
            frames,
            channels: bins,
            mix,
            mix_imag,
            presence,
            spec,
        })
    }

    /// Oracle assignment planes and reconstruction targets for the
    /// speaker stream. Targets are `[bins, 1]` columns (real, imaginary).
    #[allow(clippy::type_complexity)]
    fn ses_targets(&self, g: &mut Graph, store: &ParamStore, early: &[Vec<f64>]) -> Result<(MaskTensor, Vec<(Tensor, Option<Tensor>)>)> {
        let ses = self.ses.as_ref().expect("speaker stream");
        let f = &self.config.framing;
        let bins = self.config.ses_bins();
        let complex = self.config.recon_domain == ReconDomain::Complex;
        let mut mags = Vec::with_capacity(early.len());
        let mut targets = Vec::with_capacity(early.len());
        let mut frames = 0;
        for d in early {
            match self.config.encoder_kind {
                EncoderKind::Lps => {
                    let spec = stft(d, f.ses_window, f.ses_hop, &ses.window)?;
                    frames = spec.frames;
                    let s = spectral_norm(&ses.window);
                    let mag: Vec<f64> = spec.magnitude().iter().map(|m| m * s).collect();
                    let t = if complex {
                        let re = g.constant(spec.re.iter().map(|v| v * s).collect(), &[frames * bins, 1])?;
                        let im = g.constant(spec.im.iter().map(|v| v * s).collect(), &[frames * bins, 1])?;
                        (re, Some(im))
                    } else {
                        (g.constant(mag.clone(), &[frames * bins, 1])?, None)
                    };
                    mags.push(mag);
                    targets.push(t);
                }
                EncoderKind::Stft => {
                    let rep = encode(d, ses.fixed_kernel.as_ref().expect("stacked kernel"))?;
                    frames = rep.frames;
                    let s = spectral_norm(&ses.window);
                    let vals: Vec<f64> = rep.data.iter().map(|v| v * s).collect();
                    let mag: Vec<f64> = vals.iter().map(|v| v.abs()).collect();
                    let t = if complex { vals } else { mag.clone() };
                    targets.push((g.constant(t, &[frames * bins, 1])?, None));
                    mags.push(mag);
                }
                EncoderKind::Free => {
                    let kernel = ses.free_kernel.expect("free kernel");
                    // Assignment follows the current kernel; the target stays
                    // differentiable through it.
                    let rep = encode(d, &self.free_analysis_kernel(store, kernel)?)?;
                    frames = rep.frames;
                    mags.push(rep.data.iter().map(|v| v.abs()).collect());
                    let r = Self::conv_encode(g, store, d, kernel, f.ses_hop)?;
                    let col = to_bins(g, r, bins, 1)?;
                    let t = if complex { col } else { g.abs(col) };
                    targets.push((t, None));
                }
            }
        }
        Ok((ibm_tf(&mags, frames, bins)?, targets))
    }

    fn wave_pass(&self, g: &mut Graph, store: &ParamStore, y: &[f64]) -> Result<WavePass> {
        let wave = self.wave.as_ref().ok_or_else(|| Error::InvalidState("model has no waveform stream".into()))?;
        let rep = Self::conv_encode(g, store, y, wave.enc, self.config.framing.sds_hop)?;
        let frames = g.shape(rep)[1];
        let out = wave.tcn.forward(g, store, rep)?;
        Ok(WavePass {
            rep,
            out,
            frames,
            len: y.len(),
        })
    }

    /// Masks `rep` with a `[C, T]` mask and decodes to a `[1, len]` waveform.
    fn decode_masked(&self, g: &mut Graph, store: &ParamStore, pass: &WavePass, mask: Tensor) -> Result<Tensor> {
        let wave = self.wave.as_ref().expect("waveform stream");
        let f = &self.config.framing;
        let masked = g.mul(pass.rep, mask)?;
        let w = g.param(store, wave.dec);
        let full = g.conv_transpose1d(masked, w, None, f.sds_hop)?;
        g.narrow(full, 1, f.sds_window - f.sds_hop, pass.len)
    }

    /// TD-DAN decoding stream driven by `[K, D]` attractors.
    fn tddan_outputs(&self, g: &mut Graph, store: &ParamStore, pass: &WavePass, attractors: Tensor) -> Result<Vec<Tensor>> {
        let wave = self.wave.as_ref().expect("waveform stream");
        let c = self.config.framing.sds_channels;
        let k = g.shape(attractors)[0];
        let emb = to_bins(g, pass.out, c, self.config.e)?;
        let w = g.param(store, wave.transform.expect("transform"));
        let moved = g.dense(attractors, w, None)?;
        let mt = g.transpose(moved)?;
        let logits = g.matmul(emb, mt)?;
        let masks = g.relu(logits);
        let mut outs = Vec::with_capacity(k);
        for j in 0..k {
            let col = g.narrow(masks, 1, j, 1)?;
            let plane = g.reshape(col, &[pass.frames, c])?;
            let plane = g.transpose(plane)?;
            outs.push(self.decode_masked(g, store, pass, plane)?);
        }
        Ok(outs)
    }

    fn tasnet_outputs(&self, g: &mut Graph, store: &ParamStore, pass: &WavePass) -> Result<Vec<Tensor>> {
        let c = self.config.framing.sds_channels;
        let masks = g.relu(pass.out);
        let mut outs = Vec::with_capacity(self.config.num_speakers);
        for j in 0..self.config.num_speakers {
            let m = g.narrow(masks, 0, j * c, c)?;
            outs.push(self.decode_masked(g, store, pass, m)?);
        }
        Ok(outs)
    }

    fn sigmoid_masks(g: &mut Graph, emb: Tensor, attractors: Tensor) -> Result<Tensor> {
        let at = g.transpose(attractors)?;
        let logits = g.matmul(emb, at)?;
        Ok(g.sigmoid(logits))
    }

    /// Training objective on one utterance with oracle attractors, using the
    /// configured loss weights.
    pub fn loss(&self, g: &mut Graph, mixture: &[f64], early: &[Vec<f64>]) -> Result<LossNodes> {
        self.loss_with(g, &self.store, mixture, early, &self.config.loss_weights)
    }

    /// Same as [`Model::loss`] with explicit parameters and weights.
    pub fn loss_with(&self, g: &mut Graph, store: &ParamStore, mixture: &[f64], early: &[Vec<f64>], weights: &LossWeights) -> Result<LossNodes> {
        self.check_len(mixture.len())?;
        let k = early.len();
        if k == 0 || early.iter().any(|d| d.len() != mixture.len()) {
            return Err(Error::invalid("need one early target per speaker, as long as the mixture"));
        }
        let s = Self::input_scale(mixture);
        let y: Vec<f64> = mixture.iter().map(|v| v * s).collect();
        let d: Vec<Vec<f64>> = early.iter().map(|e| e.iter().map(|v| v * s).collect()).collect();

        if self.config.model_kind == ModelKind::Tasnet {
            if k != self.config.num_speakers {
                return Err(Error::Unsupported(format!(
                    "model separates {} speakers, scene has {k}",
                    self.config.num_speakers
                )));
            }
            let pass = self.wave_pass(g, store, &y)?;
            let outs = self.tasnet_outputs(g, store, &pass)?;
            let (l, _) = upit_loss(g, &outs, &d)?;
            let sdr = g.scale(l, -1.0);
            return Ok(LossNodes {
                total: l,
                si_sdr: Some(sdr),
                recon: None,
                concentration: None,
                discrimination: None,
            });
        }

        let ses = self.ses_pass(g, store, &y)?;
        let (ibm, targets) = self.ses_targets(g, store, &d)?;
        let presence = match super::attractor::selection_weights(&ibm, &ses.presence) {
            Err(Error::EmptySpeaker { .. }) => PresenceMask::all(ses.frames, ses.channels),
            Err(e) => return Err(e),
            Ok(_) => ses.presence.clone(),
        };
        let attractors = oracle_attractors_in_graph(g, ses.emb, &ibm, &presence)?;
        let masks = Self::sigmoid_masks(g, ses.emb, attractors)?;

        let mut recon: Option<Tensor> = None;
        for (j, (t_re, t_im)) in targets.iter().enumerate() {
            let m = g.narrow(masks, 1, j, 1)?;
            let mut term = recon_loss(g, m, ses.mix, *t_re)?;
            if let (Some(mi), Some(ti)) = (ses.mix_imag, t_im) {
                let im = recon_loss(g, m, mi, *ti)?;
                term = g.add(term, im)?;
            }
            recon = Some(match recon {
                None => term,
                Some(r) => g.add(r, term)?,
            });
        }
        let recon = g.scale(recon.expect("k >= 1"), 1.0 / k as f64);
        let conc = concentration_loss(g, ses.emb, attractors, &ibm, &presence)?;
        let disc = discrimination_loss(g, attractors, weights.l_d)?;

        let wr = g.scale(recon, weights.alpha_r);
        let wc = g.scale(conc, weights.alpha_c);
        let wd = g.scale(disc, weights.alpha_d);
        let mut total = g.add(wr, wc)?;
        total = g.add(total, wd)?;

        let mut si = None;
        if self.config.model_kind == ModelKind::Tddan {
            let pass = self.wave_pass(g, store, &y)?;
            let outs = self.tddan_outputs(g, store, &pass, attractors)?;
            let mut acc: Option<Tensor> = None;
            for (o, t) in outs.iter().zip(&d) {
                let v = si_sdr_in_graph(g, *o, t)?;
                acc = Some(match acc {
                    None => v,
                    Some(a) => g.add(a, v)?,
                });
            }
            let mean = g.scale(acc.expect("k >= 1"), 1.0 / k as f64);
            let neg = g.scale(mean, -1.0);
            total = g.add(neg, total)?;
            si = Some(mean);
        }
        Ok(LossNodes {
            total,
            si_sdr: si,
            recon: Some(recon),
            concentration: Some(conc),
            discrimination: Some(disc),
        })
    }

    /// Central-difference check of the full loss on `coords_per_param`
    /// random coordinates of every parameter tensor. Returns the number of
    /// coordinates probed and the worst relative error.
    pub fn loss_gradient_check(
        &self,
        mixture: &[f64],
        early: &[Vec<f64>],
        weights: &LossWeights,
        coords_per_param: usize,
        h: f64,
        seed: u64,
    ) -> Result<(usize, f64)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut coords = Vec::new();
        for i in 0..self.store.len() {
            let id = ParamId(i);
            let n = self.store.get(id).values.len();
            for _ in 0..coords_per_param {
                coords.push((id, rng.random_range(0..n)));
            }
        }
        let err = param_diff_check(&self.store, |g, s| Ok(self.loss_with(g, s, mixture, early, weights)?.total), &coords, h)?;
        Ok((coords.len(), err))
    }

    /// Reads term values of a loss built on `g`.
    pub fn terms(g: &Graph, nodes: &LossNodes) -> LossTerms {
        let v = |t: Option<Tensor>| t.map_or(0.0, |t| g.item(t));
        LossTerms {
            total: g.item(nodes.total),
            si_sdr: nodes.si_sdr.map(|t| g.item(t)),
            recon: v(nodes.recon),
            concentration: v(nodes.concentration),
            discrimination: v(nodes.discrimination),
        }
    }

    /// Runs the shared forward pass once; attractors can then be applied
    /// repeatedly without recomputing features.
    pub fn analyze(&self, mixture: &[f64]) -> Result<Analysis<'_>> {
        self.check_len(mixture.len())?;
        let scale = Self::input_scale(mixture);
        let y: Vec<f64> = mixture.iter().map(|v| v * scale).collect();
        let mut g = Graph::new();
        let ses = match self.config.model_kind {
            ModelKind::Tasnet => None,
            _ => Some(self.ses_pass(&mut g, &self.store, &y)?),
        };
        let wave = match self.config.model_kind {
            ModelKind::Dan => None,
            _ => Some(self.wave_pass(&mut g, &self.store, &y)?),
        };
        Ok(Analysis {
            model: self,
            g,
            ses,
            wave,
            scale,
            len: mixture.len(),
        })
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint::from_store(&self.store, serde_json::to_value(&self.config)?))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.checkpoint()?.save(path)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config: ModelConfig = serde_json::from_value(ckpt.config.clone())
            .map_err(|e| Error::InvalidConfiguration(format!("checkpoint config: {e}")))?;
        let mut model = Model::new(config)?;
        model.store.load_values(&ckpt.tensors)?;
        Ok(model)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Cached forward features of one mixture.
pub struct Analysis<'a> {
    model: &'a Model,
    g: Graph,
    ses: Option<SesPass>,
    wave: Option<WavePass>,
    scale: f64,
    len: usize,
}

impl Analysis<'_> {
    /// Speaker-stream embeddings as plain values.
    pub fn embeddings(&self) -> Option<EmbeddingField> {
        let ses = self.ses.as_ref()?;
        EmbeddingField::new(self.g.value(ses.emb).to_vec(), ses.frames, ses.channels, self.model.config.d).ok()
    }

    pub fn presence(&self) -> Option<&PresenceMask> {
        self.ses.as_ref().map(|s| &s.presence)
    }

    /// Attractors averaged over the bins each early target dominates.
    pub fn oracle_attractors(&mut self, early: &[Vec<f64>]) -> Result<AttractorSet> {
        let ses = self.ses.as_ref().ok_or_else(|| Error::Unsupported("Conv-TasNet has no attractors".into()))?;
        let d: Vec<Vec<f64>> = early.iter().map(|e| e.iter().map(|v| v * self.scale).collect()).collect();
        let (ibm, _) = self.model.ses_targets(&mut self.g, &self.model.store, &d)?;
        let presence = match super::attractor::selection_weights(&ibm, &ses.presence) {
            Err(Error::EmptySpeaker { .. }) => PresenceMask::all(ses.frames, ses.channels),
            Err(e) => return Err(e),
            Ok(_) => ses.presence.clone(),
        };
        let a = oracle_attractors_in_graph(&mut self.g, ses.emb, &ibm, &presence)?;
        Ok(AttractorSet {
            data: self.g.value(a).to_vec(),
            speakers: early.len(),
            dim: self.model.config.d,
            source: AttractorMode::Oracle,
        })
    }

    pub fn kmeans_attractors(&self, k: usize, seed: u64) -> Result<AttractorSet> {
        let emb = self
            .embeddings()
            .ok_or_else(|| Error::Unsupported("Conv-TasNet has no attractors".into()))?;
        let opts = KmeansOptions {
            normalize: self.model.config.kmeans_normalize,
            ..Default::default()
        };
        kmeans_attractors_with(&emb, self.presence().expect("speaker stream"), k, seed, &opts)
    }

    /// Speaker-stream sigmoid masks for `attractors`.
    pub fn ses_masks(&mut self, attractors: &AttractorSet) -> Result<MaskTensor> {
        let ses = self.ses.as_ref().ok_or_else(|| Error::Unsupported("Conv-TasNet has no attractors".into()))?;
        let a = self.g.constant(attractors.data.clone(), &[attractors.speakers, attractors.dim])?;
        let m = Model::sigmoid_masks(&mut self.g, ses.emb, a)?;
        let (bins, k) = (ses.frames * ses.channels, attractors.speakers);
        let vals = self.g.value(m);
        let mut data = vec![0.0; k * bins];
        for i in 0..bins {
            for j in 0..k {
                data[j * bins + i] = vals[i * k + j];
            }
        }
        Ok(MaskTensor {
            data,
            speakers: k,
            frames: ses.frames,
            channels: ses.channels,
            kind: MaskKind::Mrm,
        })
    }

    /// Waveform estimates, in the scale of the input mixture.
    pub fn separate(&mut self, attractors: Option<&AttractorSet>) -> Result<Vec<Vec<f64>>> {
        let model = self.model;
        let unscale = |v: &[f64], s: f64| v.iter().map(|x| x / s).collect::<Vec<f64>>();
        match model.config.model_kind {
            ModelKind::Tasnet => {
                let pass = self.wave.as_ref().expect("waveform stream");
                let outs = model.tasnet_outputs(&mut self.g, &model.store, pass)?;
                Ok(outs.iter().map(|o| unscale(self.g.value(*o), self.scale)).collect())
            }
            ModelKind::Tddan => {
                let a = attractors.ok_or_else(|| Error::invalid("TD-DAN needs attractors"))?;
                let at = self.g.constant(a.data.clone(), &[a.speakers, a.dim])?;
                let pass = self.wave.as_ref().expect("waveform stream");
                let outs = model.tddan_outputs(&mut self.g, &model.store, pass, at)?;
                Ok(outs.iter().map(|o| unscale(self.g.value(*o), self.scale)).collect())
            }
            ModelKind::Dan => {
                let a = attractors.ok_or_else(|| Error::invalid("DAN needs attractors"))?;
                let masks = self.ses_masks(a)?;
                let spec = self.ses.as_ref().and_then(|s| s.spec.as_ref()).expect("LPS spectrogram");
                (0..a.speakers)
                    .map(|k| {
                        let x = istft(&spec.apply_mask(masks.plane(k)))?;
                        Ok(unscale(&x[..self.len], self.scale))
                    })
                    .collect()
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_scene, SceneSpec};

    fn tiny(kind: ModelKind, encoder: EncoderKind) -> ModelConfig {
        let mut cfg = ModelConfig::desk(kind, encoder);
        cfg.tcn = TcnConfig::new(3, 4, 3, 2, 2);
        cfg.d = 3;
        cfg.e = 3;
        cfg.framing = Framing {
            ses_window: 16,
            ses_hop: 8,
            ses_channels: 6,
            sds_window: 8,
            sds_hop: 4,
            sds_channels: 5,
        };
        cfg.presence_percent = 40.0;
        cfg
    }

    fn scene(len: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
        let s = generate_scene(&SceneSpec {
            master_seed: 5,
            index: 1,
            num_speakers: 2,
            duration_s: 0.25,
            sample_rate: 8000,
            rir_length_s: 0.1,
        })
        .unwrap();
        let s = s.segment(400, len).unwrap();
        (s.mixture, s.early)
    }

    #[test]
    fn terms_decompose_total() {
        let model = Model::new(tiny(ModelKind::Tddan, EncoderKind::Stft)).unwrap();
        let (mix, early) = scene(400);
        let mut g = Graph::new();
        let w = LossWeights {
            alpha_r: 0.7,
            alpha_c: 0.3,
            alpha_d: 0.2,
            l_d: 10.0,
        };
        let nodes = model.loss_with(&mut g, &model.store, &mix, &early, &w).unwrap();
        let t = Model::terms(&g, &nodes);
        let rebuilt = -t.si_sdr.unwrap() + 0.7 * t.recon + 0.3 * t.concentration + 0.2 * t.discrimination;
        assert!((t.total - rebuilt).abs() < 1e-12);
        let mut g2 = Graph::new();
        let only = LossWeights {
            alpha_c: 0.0,
            alpha_d: 0.0,
            ..w
        };
        let n2 = model.loss_with(&mut g2, &model.store, &mix, &early, &only).unwrap();
        let t2 = Model::terms(&g2, &n2);
        assert!((t2.total - (-t2.si_sdr.unwrap() + 0.7 * t2.recon)).abs() < 1e-12);
    }

    #[test]
    fn output_shapes_and_mask_ranges() {
        let (mix, early) = scene(400);
        let model = Model::new(tiny(ModelKind::Tddan, EncoderKind::Stft)).unwrap();
        let mut an = model.analyze(&mix).unwrap();
        let emb = an.embeddings().unwrap();
        assert_eq!((emb.channels, emb.dim), (16, 3));
        let a = an.oracle_attractors(&early).unwrap();
        let m = an.ses_masks(&a).unwrap();
        assert!(m.data.iter().all(|v| *v > 0.0 && *v < 1.0));
        let outs = an.separate(Some(&a)).unwrap();
        assert_eq!(outs.len(), 2);
        assert!(outs.iter().all(|o| o.len() == 400));

        let tas = Model::new(tiny(ModelKind::Tasnet, EncoderKind::Free)).unwrap();
        let outs = tas.analyze(&mix).unwrap().separate(None).unwrap();
        assert_eq!(outs.len(), 2);
        assert!(outs.iter().all(|o| o.len() == 400));
        assert!(tas.analyze(&mix[..4]).is_err());
    }

    #[test]
    fn orthogonal_transformed_attractor_gives_silence() {
        let (mix, _) = scene(400);
        let model = Model::new(tiny(ModelKind::Tddan, EncoderKind::Stft)).unwrap();
        let mut an = model.analyze(&mix).unwrap();
        let zero = AttractorSet {
            data: vec![0.0; 3],
            speakers: 1,
            dim: 3,
            source: AttractorMode::Oracle,
        };
        let out = an.separate(Some(&zero)).unwrap();
        assert!(out[0].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn checkpoint_round_trip_preserves_outputs() {
        let (mix, _) = scene(400);
        let model = Model::new(tiny(ModelKind::Tasnet, EncoderKind::Free)).unwrap();
        let back = Model::from_checkpoint(&Checkpoint::from_bytes(&model.checkpoint().unwrap().to_bytes().unwrap()).unwrap()).unwrap();
        let a = model.analyze(&mix).unwrap().separate(None).unwrap();
        let b = back.analyze(&mix).unwrap().separate(None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn config_validation() {
        let mut c = tiny(ModelKind::Tddan, EncoderKind::Stft);
        c.ses_repeats = 2;
        assert!(Model::new(c).is_err());
        let mut c = tiny(ModelKind::Dan, EncoderKind::Lps);
        c.encoder_kind = EncoderKind::Free;
        assert!(Model::new(c).is_err());
    }
}
