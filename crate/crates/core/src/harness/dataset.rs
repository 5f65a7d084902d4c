use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::DatasetConfig;
use crate::error::{Error, Result};
use crate::io::{read_wav, write_atomic, write_wav, WavFormat};
use crate::scene::{convolve_truncated, derive_seed, generate_scene, splitmix64, MixtureScene, SceneSpec};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        })
    }
}

/// FNV-1a, mixed once more so that neighbouring ids spread out.
fn id_hash(id: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in id.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix64(h)
}

/// 80/10/10 assignment from a hash of the scene id.
pub fn split_of(scene_id: &str) -> Split {
    match id_hash(scene_id) % 10 {
        0..=7 => Split::Train,
        8 => Split::Valid,
        _ => Split::Test,
    }
}

pub fn scene_id(index: usize) -> String {
    format!("scene{index:05}")
}

/// Speaker count of scene `index`, drawn from the configured proportions.
pub fn speaker_count(master_seed: u64, index: usize, distribution: &[(usize, f64)]) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(master_seed ^ 0x5eed_c0de, index as u64));
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for &(k, p) in distribution {
        acc += p;
        if u < acc {
            return k;
        }
    }
    distribution.last().expect("non-empty distribution").0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub scene_id: String,
    pub split: Split,
    pub num_speakers: usize,
    pub seed: u64,
    pub t60: f64,
    pub sir_db: f64,
    pub snr_db: f64,
    pub num_samples: usize,
    pub mixture: String,
    /// Scaled dry sources.
    pub clean: Vec<String>,
    /// Direct path only.
    pub direct: Vec<String>,
    pub early: Vec<String>,
    pub reverberant: Vec<String>,
    pub noise: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub sample_rate: u32,
    pub master_seed: u64,
    pub scenes: Vec<SceneRecord>,
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let m: Manifest = serde_json::from_slice(&bytes)?;
        if m.format_version != MANIFEST_VERSION {
            return Err(Error::Unsupported(format!("manifest version {}", m.format_version)));
        }
        Ok(m)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &SceneRecord> {
        self.scenes.iter().filter(move |r| r.split == split)
    }
}

/// Direct-path image of each source: the source scaled by the first
/// significant tap and delayed to its position.
fn direct_paths(scene: &MixtureScene) -> Result<Vec<Vec<f64>>> {
    scene
        .scaled_sources()
        .iter()
        .zip(&scene.rirs)
        .map(|(s, rir)| {
            let mut taps = vec![0.0; rir.start_index + 1];
            taps[rir.start_index] = rir.taps[rir.start_index];
            convolve_truncated(s, &taps)
        })
        .collect()
}

fn write_scene(dir: &Path, id: &str, split: Split, scene: &MixtureScene, t60: f64) -> Result<SceneRecord> {
    let sr = scene.sample_rate();
    let rel = |name: String| format!("{id}/{name}.wav");
    let put = |name: String, x: &[f64]| -> Result<String> {
        let r = rel(name);
        write_wav(&dir.join(&r), x, sr, WavFormat::Float32)?;
        Ok(r)
    };
    let many = |prefix: &str, xs: &[Vec<f64>]| -> Result<Vec<String>> {
        xs.iter().enumerate().map(|(k, x)| put(format!("{prefix}{k}"), x)).collect()
    };
    Ok(SceneRecord {
        scene_id: id.to_string(),
        split,
        num_speakers: scene.num_speakers(),
        seed: scene.seed,
        t60,
        sir_db: scene.sir_db,
        snr_db: scene.snr_db,
        num_samples: scene.len(),
        mixture: put("mixture".into(), &scene.mixture)?,
        clean: many("clean", &scene.scaled_sources())?,
        direct: many("direct", &direct_paths(scene)?)?,
        early: many("early", &scene.early)?,
        reverberant: many("reverberant", &scene.reverberant)?,
        noise: put("noise".into(), &scene.noise)?,
    })
}

/// Synthesizes every scene of `cfg` under `out` and writes the manifest.
/// Scenes are generated in parallel; output is independent of scheduling.
pub fn generate(cfg: &DatasetConfig, out: &Path) -> Result<Manifest> {
    let dist = cfg.speaker_distribution()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let scenes: Result<Vec<SceneRecord>> = (0..cfg.num_scenes)
        .into_par_iter()
        .map(|i| {
            let spec = SceneSpec {
                master_seed: cfg.master_seed,
                index: i as u64,
                num_speakers: speaker_count(cfg.master_seed, i, &dist),
                duration_s: cfg.duration_s,
                sample_rate: cfg.sample_rate,
                rir_length_s: cfg.rir_length_s,
            };
            let scene = generate_scene(&spec)?;
            let id = scene_id(i);
            let t60 = scene.rirs[0].t60;
            write_scene(out, &id, split_of(&id), &scene, t60)
        })
        .collect();
    let manifest = Manifest {
        format_version: MANIFEST_VERSION,
        sample_rate: cfg.sample_rate,
        master_seed: cfg.master_seed,
        scenes: scenes?,
    };
    let mut bytes = serde_json::to_vec_pretty(&manifest)?;
    bytes.push(b'\n');
    write_atomic(&out.join(MANIFEST_FILE), &bytes)?;
    Ok(manifest)
}

/// Signals of one scene read back from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneData {
    pub scene_id: String,
    pub num_speakers: usize,
    pub sample_rate: u32,
    pub mixture: Vec<f64>,
    pub clean: Vec<Vec<f64>>,
    pub direct: Vec<Vec<f64>>,
    pub early: Vec<Vec<f64>>,
    pub reverberant: Vec<Vec<f64>>,
    pub noise: Vec<f64>,
}

impl SceneData {
    pub fn load(dir: &Path, rec: &SceneRecord) -> Result<Self> {
        let mut rate = None;
        let mut read = |rel: &str| -> Result<Vec<f64>> {
            let path: PathBuf = dir.join(rel);
            let wav = read_wav(&path)?;
            if *rate.get_or_insert(wav.sample_rate) != wav.sample_rate || wav.samples.len() != rec.num_samples {
                return Err(Error::InvalidState(format!("{} does not match scene {}", path.display(), rec.scene_id)));
            }
            Ok(wav.samples)
        };
        let mixture = read(&rec.mixture)?;
        let mut many = |paths: &[String]| paths.iter().map(|p| read(p)).collect::<Result<Vec<_>>>();
        let clean = many(&rec.clean)?;
        let direct = many(&rec.direct)?;
        let early = many(&rec.early)?;
        let reverberant = many(&rec.reverberant)?;
        let noise = read(&rec.noise)?;
        Ok(SceneData {
            scene_id: rec.scene_id.clone(),
            num_speakers: rec.num_speakers,
            sample_rate: rate.unwrap_or(0),
            mixture,
            clean,
            direct,
            early,
            reverberant,
            noise,
        })
    }

    pub fn len(&self) -> usize {
        self.mixture.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mixture.is_empty()
    }
}

/// Loads every scene of `split` in manifest order.
pub fn load_split(dir: &Path, manifest: &Manifest, split: Split) -> Result<Vec<SceneData>> {
    let recs: Vec<&SceneRecord> = manifest.split(split).collect();
    recs.par_iter().map(|r| SceneData::load(dir, r)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn cfg(n: usize) -> DatasetConfig {
        DatasetConfig {
            num_scenes: n,
            duration_s: 0.25,
            rir_length_s: 0.2,
            ..Default::default()
        }
    }

    #[test]
    fn generate_writes_records_and_is_deterministic() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let m = generate(&cfg(10), a.path()).unwrap();
        assert_eq!(m.scenes.len(), 10);
        assert!(m.scenes.iter().all(|r| r.early.len() == 2 && r.num_speakers == 2));
        generate(&cfg(10), b.path()).unwrap();
        let ma = std::fs::read(a.path().join(MANIFEST_FILE)).unwrap();
        let mb = std::fs::read(b.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(ma, mb);
        let again = generate(&cfg(10), a.path()).unwrap();
        assert_eq!(again, m);
    }

    #[test]
    fn stored_signals_round_trip_at_float32() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate(&cfg(2), dir.path()).unwrap();
        let data = SceneData::load(dir.path(), &m.scenes[0]).unwrap();
        let scene = generate_scene(&SceneSpec {
            master_seed: 0,
            index: 0,
            num_speakers: 2,
            duration_s: 0.25,
            sample_rate: 8000,
            rir_length_s: 0.2,
        })
        .unwrap();
        for (a, b) in data.early[1].iter().zip(&scene.early[1]) {
            assert_eq!(*a, *b as f32 as f64);
        }
        assert_eq!(data.len(), 2000);
    }

    #[test]
    fn direct_path_is_inside_early() {
        let scene = generate_scene(&SceneSpec {
            master_seed: 4,
            index: 2,
            num_speakers: 1,
            duration_s: 0.25,
            sample_rate: 8000,
            rir_length_s: 0.2,
        })
        .unwrap();
        let d = direct_paths(&scene).unwrap();
        let s = scene.rirs[0].start_index;
        let src = scene.scaled_sources();
        assert_eq!(d[0][s + 10], src[0][10] * scene.rirs[0].taps[s]);
        assert!(d[0][..s].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn splits_are_stable_and_roughly_80_10_10() {
        let mut counts = BTreeMap::new();
        for i in 0..2000 {
            let id = scene_id(i);
            assert_eq!(split_of(&id), split_of(&id));
            *counts.entry(split_of(&id)).or_insert(0usize) += 1;
        }
        assert!((counts[&Split::Train] as f64 / 2000.0 - 0.8).abs() < 0.03);
        assert!((counts[&Split::Valid] as f64 / 2000.0 - 0.1).abs() < 0.03);
        assert!((counts[&Split::Test] as f64 / 2000.0 - 0.1).abs() < 0.03);
    }

    #[test]
    fn speaker_counts_follow_proportions() {
        // Monte-Carlo oracle: 1000 categorical draws stay within 3 points.
        let dist = [(1, 0.1), (2, 0.45), (3, 0.45)];
        let mut counts = [0usize; 4];
        for i in 0..1000 {
            counts[speaker_count(7, i, &dist)] += 1;
        }
        for (k, p) in dist {
            assert!((counts[k] as f64 / 1000.0 - p).abs() <= 0.03, "{k}: {}", counts[k]);
        }
    }
}
