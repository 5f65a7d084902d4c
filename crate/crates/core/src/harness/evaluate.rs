use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::MetricKind;
use super::dataset::SceneData;
use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::io::{write_atomic, write_wav, WavFormat};
use crate::masks::{irm, irm_derevb, MaskTensor};
use crate::metrics::{eval_align, sdr_projective, si_sdr, SDR_FILTER_LEN};
use crate::nn::{AttractorMode, Model, ModelKind};
use crate::scene::derive_seed;
use crate::transforms::{istft, sqrt_hann, stft};

/// Metric values are clamped to `[-METRIC_CAP_DB, METRIC_CAP_DB]`; NaN maps
/// to the lower bound.
pub const METRIC_CAP_DB: f64 = 200.0;

pub fn cap_db(v: f64) -> f64 {
    if v.is_nan() {
        -METRIC_CAP_DB
    } else {
        v.clamp(-METRIC_CAP_DB, METRIC_CAP_DB)
    }
}

/// One CSV row: scene-level means over speakers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub scene_id: String,
    pub num_speakers: usize,
    pub system: String,
    pub attractor_mode: String,
    /// Against the early-reflection targets.
    pub si_sdr_db: Option<f64>,
    /// Against the clean sources, projective filter.
    pub sdr_db: Option<f64>,
    pub loss_total: Option<f64>,
    pub loss_si_sdr: Option<f64>,
    pub loss_recon: Option<f64>,
    pub loss_concentration: Option<f64>,
    pub loss_discrimination: Option<f64>,
}

pub const METRICS_COLUMNS: [&str; 11] = [
    "scene_id",
    "num_speakers",
    "system",
    "attractor_mode",
    "si_sdr_db",
    "sdr_db",
    "loss_total",
    "loss_si_sdr",
    "loss_recon",
    "loss_concentration",
    "loss_discrimination",
];

/// Reference systems that need no model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Baseline {
    /// The unprocessed mixture for every speaker.
    Mixture,
    /// Ratio mask of reverberant sources over noise.
    Irm,
    /// Ratio mask of early reflections over everything else.
    IrmDerevb,
}

impl Baseline {
    pub fn name(self) -> &'static str {
        match self {
            Baseline::Mixture => "mixture",
            Baseline::Irm => "irm",
            Baseline::IrmDerevb => "irm-derevb",
        }
    }
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub modes: Vec<AttractorMode>,
    pub metrics: Vec<MetricKind>,
    pub sdr_filter_len: usize,
    pub kmeans_seed: u64,
    pub baselines: Vec<Baseline>,
    /// Where aligned estimates are stored as float WAVs.
    pub estimates_dir: Option<PathBuf>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            modes: vec![AttractorMode::Oracle],
            metrics: vec![MetricKind::SiSdr, MetricKind::Sdr],
            sdr_filter_len: SDR_FILTER_LEN,
            kmeans_seed: 0,
            baselines: Vec::new(),
            estimates_dir: None,
        }
    }
}

/// Frame size of the oracle-mask baselines: 32 ms rounded up to a power of two.
pub fn baseline_window(sample_rate: u32) -> usize {
    ((0.032 * sample_rate as f64).round() as usize).max(2).next_power_of_two()
}

/// Masked-STFT estimates for an oracle mask baseline.
pub fn baseline_estimates(scene: &SceneData, which: Baseline) -> Result<Vec<Vec<f64>>> {
    let k = scene.num_speakers;
    if which == Baseline::Mixture {
        return Ok(vec![scene.mixture.clone(); k]);
    }
    let n = baseline_window(scene.sample_rate);
    let w = sqrt_hann(n);
    let mix = stft(&scene.mixture, n, n / 2, &w)?;
    let masks: MaskTensor = match which {
        Baseline::Irm => {
            let rev: Vec<Vec<f64>> = scene
                .reverberant
                .iter()
                .map(|x| stft(x, n, n / 2, &w).map(|s| s.magnitude()))
                .collect::<Result<_>>()?;
            let noise = stft(&scene.noise, n, n / 2, &w)?.magnitude();
            irm(&rev, &noise, mix.frames, mix.bins)?
        }
        _ => {
            let early = scene.early.iter().map(|x| stft(x, n, n / 2, &w)).collect::<Result<Vec<_>>>()?;
            irm_derevb(&early, &mix)?
        }
    };
    (0..k)
        .map(|j| Ok(istft(&mix.apply_mask(masks.plane(j)))?[..scene.len()].to_vec()))
        .collect()
}

fn round_f32(x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| *v as f32 as f64).collect()
}

struct Scored {
    si: Option<f64>,
    sdr: Option<f64>,
}

/// Aligns (when asked), rounds to float32, stores and scores estimates.
fn score(
    scene: &SceneData,
    estimates: Vec<Vec<f64>>,
    align: bool,
    tag: &str,
    opts: &EvalOptions,
) -> Result<Scored> {
    let k = scene.num_speakers;
    if estimates.len() != k {
        return Err(Error::Unsupported(format!("{tag}: {} outputs for {k} speakers", estimates.len())));
    }
    let mut est: Vec<Vec<f64>> = estimates.iter().map(|e| round_f32(e)).collect();
    if align {
        let (perm, _) = eval_align(&est, &scene.early, si_sdr)?;
        est = perm.iter().map(|&p| est[p].clone()).collect();
    }
    if let Some(dir) = &opts.estimates_dir {
        for (j, e) in est.iter().enumerate() {
            write_wav(&dir.join(&scene.scene_id).join(format!("{tag}_{j}.wav")), e, scene.sample_rate, WavFormat::Float32)?;
        }
    }
    let mean = |f: &dyn Fn(usize) -> Result<f64>| -> Result<f64> {
        let mut s = 0.0;
        for j in 0..k {
            s += f(j)?;
        }
        Ok(cap_db(s / k as f64))
    };
    let si = if opts.metrics.contains(&MetricKind::SiSdr) {
        Some(mean(&|j| si_sdr(&est[j], &scene.early[j]))?)
    } else {
        None
    };
    let sdr = if opts.metrics.contains(&MetricKind::Sdr) {
        Some(mean(&|j| sdr_projective(&est[j], &scene.clean[j], opts.sdr_filter_len))?)
    } else {
        None
    };
    Ok(Scored { si, sdr })
}

pub fn system_name(kind: ModelKind) -> &'static str {
    match kind {
        ModelKind::Dan => "dan",
        ModelKind::Tasnet => "tasnet",
        ModelKind::Tddan => "tddan",
    }
}

fn row(scene: &SceneData, system: &str, mode: &str, s: Scored) -> MetricsRow {
    MetricsRow {
        scene_id: scene.scene_id.clone(),
        num_speakers: scene.num_speakers,
        system: system.to_string(),
        attractor_mode: mode.to_string(),
        si_sdr_db: s.si,
        sdr_db: s.sdr,
        loss_total: None,
        loss_si_sdr: None,
        loss_recon: None,
        loss_concentration: None,
        loss_discrimination: None,
    }
}

/// Rows for one scene. All attractor modes reuse one forward pass.
pub fn evaluate_scene(model: Option<&Model>, scene: &SceneData, index: usize, opts: &EvalOptions) -> Result<Vec<MetricsRow>> {
    let mut rows = Vec::new();
    for &b in &opts.baselines {
        let est = baseline_estimates(scene, b)?;
        rows.push(row(scene, b.name(), "none", score(scene, est, false, b.name(), opts)?));
    }
    let Some(model) = model else {
        return Ok(rows);
    };
    let kind = model.config.model_kind;
    let system = system_name(kind);
    if kind == ModelKind::Tasnet && scene.num_speakers != model.config.num_speakers {
        return Err(Error::Unsupported(format!(
            "scene {} has {} speakers; the Conv-TasNet model separates exactly {}",
            scene.scene_id, scene.num_speakers, model.config.num_speakers
        )));
    }
    let mut g = Graph::new();
    let terms = model.loss(&mut g, &scene.mixture, &scene.early).ok().map(|n| Model::terms(&g, &n));
    drop(g);
    let mut an = model.analyze(&scene.mixture)?;
    let mut scored = Vec::new();
    if kind == ModelKind::Tasnet {
        let est = an.separate(None)?;
        scored.push(("none".to_string(), score(scene, est, true, system, opts)?));
    } else {
        for &mode in &opts.modes {
            let a = match mode {
                AttractorMode::Oracle => an.oracle_attractors(&scene.early)?,
                AttractorMode::Kmeans => an.kmeans_attractors(scene.num_speakers, derive_seed(opts.kmeans_seed, index as u64))?,
            };
            let est = an.separate(Some(&a))?;
            let tag = format!("{system}_{mode}");
            scored.push((mode.to_string(), score(scene, est, mode == AttractorMode::Kmeans, &tag, opts)?));
        }
    }
    for (mode, s) in scored {
        let mut r = row(scene, system, &mode, s);
        if let Some(t) = terms {
            r.loss_total = Some(t.total);
            r.loss_si_sdr = t.si_sdr;
            if kind != ModelKind::Tasnet {
                r.loss_recon = Some(t.recon);
                r.loss_concentration = Some(t.concentration);
                r.loss_discrimination = Some(t.discrimination);
            }
        }
        rows.push(r);
    }
    Ok(rows)
}

/// Evaluates scenes in parallel; rows keep scene order.
pub fn evaluate(model: Option<&Model>, scenes: &[SceneData], opts: &EvalOptions) -> Result<Vec<MetricsRow>> {
    let per: Vec<Vec<MetricsRow>> = scenes
        .par_iter()
        .enumerate()
        .map(|(i, s)| evaluate_scene(model, s, i, opts))
        .collect::<Result<_>>()?;
    Ok(per.into_iter().flatten().collect())
}

pub fn metrics_csv(rows: &[MetricsRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    if rows.is_empty() {
        w.write_record(METRICS_COLUMNS).map_err(|e| Error::InvalidState(e.to_string()))?;
    }
    for r in rows {
        w.serialize(r).map_err(|e| Error::InvalidState(e.to_string()))?;
    }
    w.into_inner().map_err(|e| Error::InvalidState(e.to_string()))
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    write_atomic(path, &metrics_csv(rows)?)
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::InvalidState(format!("{}: {e}", path.display())))?;
    r.deserialize()
        .map(|row| row.map_err(|e| Error::InvalidState(e.to_string())))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub system: String,
    pub attractor_mode: String,
    pub num_speakers: usize,
    pub scenes: usize,
    pub mean_si_sdr_db: Option<f64>,
    pub mean_sdr_db: Option<f64>,
}

/// Means per (system, attractor mode, speaker count).
pub fn summarize(rows: &[MetricsRow]) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<(String, String, usize), Vec<&MetricsRow>> = BTreeMap::new();
    for r in rows {
        groups.entry((r.system.clone(), r.attractor_mode.clone(), r.num_speakers)).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|((system, attractor_mode, num_speakers), rs)| {
            let mean = |f: fn(&MetricsRow) -> Option<f64>| {
                let v: Vec<f64> = rs.iter().filter_map(|r| f(r)).collect();
                (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
            };
            SummaryRow {
                system,
                attractor_mode,
                num_speakers,
                scenes: rs.len(),
                mean_si_sdr_db: mean(|r| r.si_sdr_db),
                mean_sdr_db: mean(|r| r.sdr_db),
            }
        })
        .collect()
}

pub fn format_summary(summary: &[SummaryRow]) -> String {
    let f = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.2}"));
    let mut s = format!("{:<12} {:<8} {:>3} {:>6} {:>10} {:>10}\n", "system", "mode", "K", "scenes", "SI-SDR dB", "SDR dB");
    for r in summary {
        s.push_str(&format!(
            "{:<12} {:<8} {:>3} {:>6} {:>10} {:>10}\n",
            r.system,
            r.attractor_mode,
            r.num_speakers,
            r.scenes,
            f(r.mean_si_sdr_db),
            f(r.mean_sdr_db)
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_scene, SceneSpec};

    fn scene_data(index: u64) -> SceneData {
        let s = generate_scene(&SceneSpec {
            master_seed: 2,
            index,
            num_speakers: 2,
            duration_s: 0.5,
            sample_rate: 8000,
            rir_length_s: 0.3,
        })
        .unwrap();
        SceneData {
            scene_id: format!("s{index}"),
            num_speakers: 2,
            sample_rate: 8000,
            mixture: s.mixture.clone(),
            clean: s.scaled_sources(),
            direct: vec![],
            early: s.early.clone(),
            reverberant: s.reverberant.clone(),
            noise: s.noise.clone(),
        }
    }

    #[test]
    fn csv_columns_match_schema() {
        let s = scene_data(0);
        let opts = EvalOptions {
            baselines: vec![Baseline::Mixture],
            metrics: vec![MetricKind::SiSdr],
            ..Default::default()
        };
        let rows = evaluate(None, &[s], &opts).unwrap();
        let text = String::from_utf8(metrics_csv(&rows).unwrap()).unwrap();
        assert_eq!(text.lines().next().unwrap(), METRICS_COLUMNS.join(","));
        let empty = String::from_utf8(metrics_csv(&[]).unwrap()).unwrap();
        assert_eq!(empty.trim_end(), METRICS_COLUMNS.join(","));
    }

    #[test]
    fn oracle_mask_baselines_beat_the_mixture() {
        let s = scene_data(1);
        let opts = EvalOptions {
            baselines: vec![Baseline::Mixture, Baseline::Irm, Baseline::IrmDerevb],
            ..Default::default()
        };
        let rows = evaluate_scene(None, &s, 0, &opts).unwrap();
        let si = |name: &str| rows.iter().find(|r| r.system == name).unwrap().si_sdr_db.unwrap();
        assert!(si("irm-derevb") > si("mixture") + 3.0);
        assert!(si("irm-derevb") > si("irm"));
    }

    #[test]
    fn tasnet_rejects_other_speaker_counts() {
        use crate::nn::{EncoderKind, ModelConfig, TcnConfig};
        let mut cfg = ModelConfig::desk(ModelKind::Tasnet, EncoderKind::Free);
        cfg.tcn = TcnConfig::new(2, 2, 3, 1, 1);
        cfg.num_speakers = 3;
        let model = Model::new(cfg).unwrap();
        let err = evaluate_scene(Some(&model), &scene_data(0), 0, &EvalOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Unsupported(_)));
    }

    #[test]
    fn oracle_and_kmeans_rows_share_features_and_stored_audio_rescores() {
        use crate::nn::{EncoderKind, ModelConfig, TcnConfig};
        let mut cfg = ModelConfig::desk(ModelKind::Tddan, EncoderKind::Stft);
        cfg.tcn = TcnConfig::new(4, 4, 3, 1, 2);
        cfg.d = 4;
        cfg.e = 4;
        let model = Model::new(cfg).unwrap();
        let s = scene_data(2);
        let dir = tempfile::tempdir().unwrap();
        let opts = EvalOptions {
            modes: vec![AttractorMode::Oracle, AttractorMode::Kmeans],
            metrics: vec![MetricKind::SiSdr],
            estimates_dir: Some(dir.path().to_path_buf()),
            ..Default::default()
        };
        let rows = evaluate_scene(Some(&model), &s, 0, &opts).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].loss_total, rows[1].loss_total);
        for r in &rows {
            let mut total = 0.0;
            for j in 0..2 {
                let p = dir.path().join(&s.scene_id).join(format!("tddan_{}_{j}.wav", r.attractor_mode));
                let est = crate::io::read_wav(&p).unwrap().samples;
                total += si_sdr(&est, &s.early[j]).unwrap();
            }
            assert_eq!(r.si_sdr_db.unwrap(), cap_db(total / 2.0));
        }
    }

    #[test]
    fn summary_groups_by_system_mode_and_count() {
        let mk = |id: &str, k: usize, si: f64| MetricsRow {
            scene_id: id.into(),
            num_speakers: k,
            system: "x".into(),
            attractor_mode: "oracle".into(),
            si_sdr_db: Some(si),
            sdr_db: None,
            loss_total: None,
            loss_si_sdr: None,
            loss_recon: None,
            loss_concentration: None,
            loss_discrimination: None,
        };
        let s = summarize(&[mk("a", 2, 1.0), mk("b", 2, 3.0), mk("c", 3, 5.0)]);
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].mean_si_sdr_db, Some(2.0));
        assert_eq!(s[1].scenes, 1);
        assert_eq!(s[0].mean_sdr_db, None);
    }

    #[test]
    fn caps_are_applied() {
        assert_eq!(cap_db(f64::NAN), -METRIC_CAP_DB);
        assert_eq!(cap_db(1e9), METRIC_CAP_DB);
        assert_eq!(cap_db(3.5), 3.5);
    }
}
