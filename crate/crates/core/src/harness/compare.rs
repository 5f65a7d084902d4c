use rayon::prelude::*;
use serde::Serialize;

use super::dataset::SceneData;
use super::evaluate::cap_db;
use crate::error::Result;
use crate::metrics::{sdr_projective, si_sdr};

/// Candidate learning targets, each scored against the clean source.
pub const TARGETS: [&str; 4] = ["clean", "direct", "early", "reverberant"];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TargetScore {
    pub target: String,
    pub count: usize,
    pub mean_si_sdr_db: f64,
    pub mean_sdr_db: f64,
    pub median_sdr_db: f64,
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn candidates<'a>(s: &'a SceneData, target: &str) -> &'a [Vec<f64>] {
    match target {
        "clean" => &s.clean,
        "direct" => &s.direct,
        "early" => &s.early,
        _ => &s.reverberant,
    }
}

/// SI-SDR and projective SDR of every candidate target against the clean
/// source, averaged over all speakers of all scenes.
pub fn compare_targets(scenes: &[SceneData], filter_len: usize) -> Result<Vec<TargetScore>> {
    TARGETS
        .iter()
        .map(|&t| {
            let pairs: Vec<(f64, f64)> = scenes
                .par_iter()
                .map(|s| {
                    candidates(s, t)
                        .iter()
                        .zip(&s.clean)
                        .map(|(x, c)| Ok((cap_db(si_sdr(x, c)?), cap_db(sdr_projective(x, c, filter_len)?))))
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .flatten()
                .collect();
            let n = pairs.len().max(1) as f64;
            Ok(TargetScore {
                target: t.to_string(),
                count: pairs.len(),
                mean_si_sdr_db: pairs.iter().map(|p| p.0).sum::<f64>() / n,
                mean_sdr_db: pairs.iter().map(|p| p.1).sum::<f64>() / n,
                median_sdr_db: median(pairs.iter().map(|p| p.1).collect()),
            })
        })
        .collect()
}

pub fn format_report(scores: &[TargetScore], filter_len: usize) -> String {
    let mut s = format!("# Learning targets against the clean source (SDR filter {filter_len} taps)\n\n");
    s.push_str("| target | pairs | SI-SDR dB | SDR dB | median SDR dB |\n|---|---:|---:|---:|---:|\n");
    for r in scores {
        s.push_str(&format!(
            "| {} | {} | {:.2} | {:.2} | {:.2} |\n",
            r.target, r.count, r.mean_si_sdr_db, r.mean_sdr_db, r.median_sdr_db
        ));
    }
    s
}
