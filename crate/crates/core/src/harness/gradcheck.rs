use crate::autodiff::suite::{op_suite, CheckResult};
use crate::error::Result;
use crate::nn::{EncoderKind, Framing, LossWeights, Model, ModelConfig, ModelKind, TcnConfig};
use crate::scene::{generate_scene, SceneSpec};

pub const MODEL_TOLERANCE: f64 = 1e-4;

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

/// End-to-end checks of the full losses on small models: one random
/// coordinate of every parameter tensor, with the discrimination hinge
/// active so that all terms contribute. ReLU masks put kinks near most
/// coordinates, so waveform models use a small step; the DAN loss is
/// dominated by roundoff at 1e-6.
pub fn model_checks() -> Result<Vec<CheckResult>> {
    let scene = generate_scene(&SceneSpec {
        master_seed: 5,
        index: 1,
        num_speakers: 2,
        duration_s: 0.25,
        sample_rate: 8000,
        rir_length_s: 0.1,
    })?
    .segment(400, 400)?;
    let cases = [
        ("tddan-stft", ModelKind::Tddan, EncoderKind::Stft, 1e-6),
        ("tddan-lps", ModelKind::Tddan, EncoderKind::Lps, 1e-6),
        ("tddan-free", ModelKind::Tddan, EncoderKind::Free, 1e-6),
        ("dan", ModelKind::Dan, EncoderKind::Lps, 1e-5),
        ("tasnet", ModelKind::Tasnet, EncoderKind::Free, 1e-6),
    ];
    cases
        .iter()
        .map(|&(name, kind, enc, h)| {
            let model = Model::new(tiny(kind, enc))?;
            let w = LossWeights {
                alpha_d: 1.0,
                l_d: 50.0,
                ..model.config.loss_weights
            };
            let (n, err) = model.loss_gradient_check(&scene.mixture, &scene.early, &w, 1, h, 3)?;
            Ok(CheckResult {
                name: format!("loss/{name} ({n} coordinates)"),
                error: err,
                tolerance: MODEL_TOLERANCE,
            })
        })
        .collect()
}

/// Operation checks followed by the end-to-end loss checks.
pub fn full_suite() -> Result<Vec<CheckResult>> {
    let mut all = op_suite()?;
    all.extend(model_checks()?);
    Ok(all)
}
