use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, Graph, Tensor};
use crate::error::{Error, Result};
use crate::masks::{MaskKind, MaskTensor, PresenceMask};

/// One `dim`-vector per `(frame, channel)` bin, `frames x channels x dim`
/// row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingField {
    pub data: Vec<f64>,
    pub frames: usize,
    pub channels: usize,
    pub dim: usize,
}

impl EmbeddingField {
    pub fn new(data: Vec<f64>, frames: usize, channels: usize, dim: usize) -> Result<Self> {
        if data.len() != frames * channels * dim || dim == 0 {
            return Err(Error::invalid(format!(
                "{} values for a {frames}x{channels}x{dim} embedding field",
                data.len()
            )));
        }
        Ok(EmbeddingField {
            data,
            frames,
            channels,
            dim,
        })
    }

    pub fn bins(&self) -> usize {
        self.frames * self.channels
    }

    pub fn vector(&self, bin: usize) -> &[f64] {
        &self.data[bin * self.dim..(bin + 1) * self.dim]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttractorMode {
    Oracle,
    Kmeans,
}

impl std::fmt::Display for AttractorMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AttractorMode::Oracle => "oracle",
            AttractorMode::Kmeans => "kmeans",
        })
    }
}

/// `speakers x dim` attractor vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct AttractorSet {
    pub data: Vec<f64>,
    pub speakers: usize,
    pub dim: usize,
    pub source: AttractorMode,
}

impl AttractorSet {
    pub fn row(&self, k: usize) -> &[f64] {
        &self.data[k * self.dim..(k + 1) * self.dim]
    }
}

/// Row weights `m_k v / Σ m_k v`, `speakers x bins`, as used by the oracle
/// average. Fails if a speaker owns no selected bin.
pub fn selection_weights(ibm: &MaskTensor, v: &PresenceMask) -> Result<Vec<f64>> {
    let n = ibm.frames * ibm.channels;
    if v.data.len() != n {
        return Err(Error::invalid("presence mask does not match the assignment planes"));
    }
    let mut w = vec![0.0; ibm.speakers * n];
    for k in 0..ibm.speakers {
        let plane = ibm.plane(k);
        let count = (0..n).filter(|&i| plane[i] != 0.0 && v.data[i]).count();
        if count == 0 {
            return Err(Error::EmptySpeaker { speaker: k });
        }
        for i in 0..n {
            if plane[i] != 0.0 && v.data[i] {
                w[k * n + i] = 1.0 / count as f64;
            }
        }
    }
    Ok(w)
}

/// Oracle attractors inside a graph: `emb` is `[bins, dim]`, the result
/// `[speakers, dim]` and differentiable with respect to `emb`.
pub fn oracle_attractors_in_graph(g: &mut Graph, emb: Tensor, ibm: &MaskTensor, v: &PresenceMask) -> Result<Tensor> {
    let bins = ibm.frames * ibm.channels;
    if g.shape(emb).first() != Some(&bins) {
        return Err(Error::invalid(format!(
            "embedding shape {:?} does not match {bins} bins",
            g.shape(emb)
        )));
    }
    let w = selection_weights(ibm, v)?;
    let w = g.constant(w, &[ibm.speakers, bins])?;
    g.matmul(w, emb)
}

/// Average embedding over the bins each speaker dominates.
pub fn oracle_attractors(emb: &EmbeddingField, ibm: &MaskTensor, v: &PresenceMask) -> Result<AttractorSet> {
    if ibm.frames != emb.frames || ibm.channels != emb.channels {
        return Err(Error::invalid("assignment planes do not match the embedding field"));
    }
    let mut g = Graph::new();
    let e = g.constant(emb.data.clone(), &[emb.bins(), emb.dim])?;
    let a = oracle_attractors_in_graph(&mut g, e, ibm, v)?;
    Ok(AttractorSet {
        data: g.value(a).to_vec(),
        speakers: ibm.speakers,
        dim: emb.dim,
        source: AttractorMode::Oracle,
    })
}

/// K-means settings. Defaults: 10 restarts, 100 iterations, 1e-6 tolerance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KmeansOptions {
    pub restarts: usize,
    pub max_iters: usize,
    pub tol: f64,
    /// Cluster unit-length embeddings instead of raw ones.
    pub normalize: bool,
}

impl Default for KmeansOptions {
    fn default() -> Self {
        KmeansOptions {
            restarts: 10,
            max_iters: 100,
            tol: 1e-6,
            normalize: false,
        }
    }
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

fn nearest(p: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centers.iter().enumerate() {
        let d = dist2(p, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn kmeans_pp(points: &[&[f64]], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut centers = vec![points[rng.random_range(0..points.len())].to_vec()];
    while centers.len() < k {
        let d: Vec<f64> = points.iter().map(|p| nearest(p, &centers).1).collect();
        let total: f64 = d.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random_range(0.0..total);
            let mut idx = points.len() - 1;
            for (i, di) in d.iter().enumerate() {
                if r < *di {
                    idx = i;
                    break;
                }
                r -= di;
            }
            idx
        } else {
            rng.random_range(0..points.len())
        };
        centers.push(points[pick].to_vec());
    }
    centers
}

fn lloyd(points: &[&[f64]], mut centers: Vec<Vec<f64>>, opts: &KmeansOptions) -> (Vec<Vec<f64>>, f64) {
    let dim = centers[0].len();
    for _ in 0..opts.max_iters {
        let mut sums = vec![vec![0.0; dim]; centers.len()];
        let mut counts = vec![0usize; centers.len()];
        for p in points {
            let (j, _) = nearest(p, &centers);
            counts[j] += 1;
            for (s, v) in sums[j].iter_mut().zip(p.iter()) {
                *s += v;
            }
        }
        let mut moved = 0.0f64;
        for j in 0..centers.len() {
            // An empty cluster keeps its previous centroid.
            if counts[j] == 0 {
                continue;
            }
            let next: Vec<f64> = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            moved = moved.max(dist2(&next, &centers[j]).sqrt());
            centers[j] = next;
        }
        if moved <= opts.tol {
            break;
        }
    }
    let inertia = points.iter().map(|p| nearest(p, &centers).1).sum();
    (centers, inertia)
}

/// K-means over the selected embeddings with k-means++ seeding; the restart
/// with the lowest inertia wins (earliest on ties).
pub fn kmeans_attractors_with(emb: &EmbeddingField, v: &PresenceMask, k: usize, seed: u64, opts: &KmeansOptions) -> Result<AttractorSet> {
    if v.data.len() != emb.bins() {
        return Err(Error::invalid("presence mask does not match the embedding field"));
    }
    if k == 0 {
        return Err(Error::invalid("need at least one cluster"));
    }
    let owned: Vec<Vec<f64>> = (0..emb.bins())
        .filter(|&i| v.data[i])
        .map(|i| {
            let x = emb.vector(i);
            if opts.normalize {
                let n = x.iter().map(|a| a * a).sum::<f64>().sqrt();
                if n > 0.0 {
                    return x.iter().map(|a| a / n).collect();
                }
            }
            x.to_vec()
        })
        .collect();
    if owned.len() < k {
        return Err(Error::invalid(format!(
            "{} selected bins cannot form {k} clusters",
            owned.len()
        )));
    }
    let points: Vec<&[f64]> = owned.iter().map(|p| p.as_slice()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(Vec<Vec<f64>>, f64)> = None;
    for _ in 0..opts.restarts.max(1) {
        let init = kmeans_pp(&points, k, &mut rng);
        let (centers, inertia) = lloyd(&points, init, opts);
        if best.as_ref().is_none_or(|b| inertia < b.1) {
            best = Some((centers, inertia));
        }
    }
    let (centers, _) = best.expect("at least one restart");
    Ok(AttractorSet {
        data: centers.concat(),
        speakers: k,
        dim: emb.dim,
        source: AttractorMode::Kmeans,
    })
}

pub fn kmeans_attractors(emb: &EmbeddingField, v: &PresenceMask, k: usize, seed: u64) -> Result<AttractorSet> {
    kmeans_attractors_with(emb, v, k, seed, &KmeansOptions::default())
}

/// `sigmoid(a_kᵀ a_{t,f})` for every speaker and bin.
pub fn ses_masks(emb: &EmbeddingField, attractors: &AttractorSet) -> Result<MaskTensor> {
    if attractors.dim != emb.dim {
        return Err(Error::invalid("attractor and embedding dimensions differ"));
    }
    let n = emb.bins();
    let mut data = vec![0.0; attractors.speakers * n];
    for k in 0..attractors.speakers {
        let a = attractors.row(k);
        for i in 0..n {
            let dot: f64 = a.iter().zip(emb.vector(i)).map(|(x, y)| x * y).sum();
            data[k * n + i] = sigmoid(dot);
        }
    }
    Ok(MaskTensor {
        data,
        speakers: attractors.speakers,
        frames: emb.frames,
        channels: emb.channels,
        kind: MaskKind::Mrm,
    })
}
