//! Gram-matrix texture features and the clustered style space.
//!
//! A query's style representation is the channel Gram matrix of its pooled
//! conv features. K-means over the flattened Gram matrices of all training
//! queries yields `k` style bases; a query's style vector is the
//! softmax(cosine)-weighted sum of those bases.

use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::backbone::FeatureMap;
use crate::error::{Error, Result};
use crate::linalg::{cosine, seeded_rng, squared_distance};

pub const STYLE_SPACE_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GramMatrix {
    /// Row-major `C x C`.
    pub data: Vec<f64>,
    pub channels: usize,
    /// Number of spatial positions the product was divided by.
    pub normalizer: f64,
}

impl GramMatrix {
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.channels + col]
    }

    pub fn flattened(&self) -> &[f64] {
        &self.data
    }

    pub fn trace(&self) -> f64 {
        (0..self.channels).map(|i| self.get(i, i)).sum()
    }
}

/// Average-pools `feature` by `downsample_factor`, then returns `X^T X / N`
/// with `X` the `N x C` matrix of pooled positions.
pub fn gram_matrix(feature: &FeatureMap, downsample_factor: usize) -> Result<GramMatrix> {
    let c = feature.channels();
    let pooled = feature.avg_pool(downsample_factor)?;
    let (ph, pw, _) = pooled.dim();
    let pooled = pooled.as_slice().expect("standard layout");
    let positions = ph * pw;
    let mut data = vec![0.0; c * c];
    for i in 0..c {
        for j in i..c {
            let mut acc = 0.0;
            for p in 0..positions {
                acc += pooled[p * c + i] * pooled[p * c + j];
            }
            let v = acc / positions as f64;
            data[i * c + j] = v;
            data[j * c + i] = v;
        }
    }
    Ok(GramMatrix {
        data,
        channels: c,
        normalizer: positions as f64,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleSpace {
    pub format_version: u32,
    pub k: usize,
    pub dimension: usize,
    pub bases: Vec<Vec<f64>>,
    pub fit_iterations: usize,
    pub inertia: f64,
    pub seed: u64,
}

impl StyleSpace {
    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let space: StyleSpace = serde_json::from_slice(&fs::read(path)?)?;
        if space.format_version != STYLE_SPACE_FORMAT_VERSION {
            return Err(Error::Format(format!(
                "style space format version {} (expected {STYLE_SPACE_FORMAT_VERSION})",
                space.format_version
            )));
        }
        if space.k == 0 || space.bases.len() != space.k || space.bases.iter().any(|b| b.len() != space.dimension) {
            return Err(Error::Format("style space bases do not match k/dimension".into()));
        }
        Ok(space)
    }
}

/// Full result of a K-means fit, including diagnostics used by tests.
#[derive(Clone, Debug)]
pub struct KMeansFit {
    pub space: StyleSpace,
    /// Index of the nearest returned basis for every input point.
    pub assignments: Vec<usize>,
    /// Objective after every Lloyd iteration.
    pub inertia_history: Vec<f64>,
}

fn nearest(point: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centers.iter().enumerate() {
        let d = squared_distance(point, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn check_points(points: &[Vec<f64>], k: usize) -> Result<usize> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    if points.len() < k {
        return Err(Error::InsufficientData { points: points.len(), k });
    }
    let dim = points[0].len();
    if let Some(bad) = points.iter().position(|p| p.len() != dim) {
        return Err(Error::Shape(format!(
            "point {bad} has dimension {}, expected {dim}",
            points[bad].len()
        )));
    }
    Ok(dim)
}

/// Lloyd's K-means with centers initialised from `k` distinct points sampled
/// with `seed`.
pub fn kmeans_fit(points: &[Vec<f64>], k: usize, seed: u64, max_iter: usize, tol: f64) -> Result<KMeansFit> {
    check_points(points, k)?;
    let mut rng = seeded_rng(seed, 17);
    let init = sample(&mut rng, points.len(), k)
        .into_iter()
        .map(|i| points[i].clone())
        .collect();
    kmeans_fit_from(points, init, seed, max_iter, tol)
}

/// Lloyd's K-means from explicit initial centers.
///
/// Empty clusters are re-seeded from the point farthest from its current
/// center. Iteration stops once no assignment changes and the largest center
/// shift is below `tol`, or after `max_iter` iterations.
pub fn kmeans_fit_from(
    points: &[Vec<f64>],
    init: Vec<Vec<f64>>,
    seed: u64,
    max_iter: usize,
    tol: f64,
) -> Result<KMeansFit> {
    let k = init.len();
    let dim = check_points(points, k)?;
    if init.iter().any(|c| c.len() != dim) {
        return Err(Error::Shape("initial centers have the wrong dimension".into()));
    }
    let n = points.len();
    let mut centers = init;
    let mut assignments = vec![usize::MAX; n];
    let mut history = Vec::new();
    let mut iterations = 0;

    while iterations < max_iter {
        iterations += 1;
        let mut changed = false;
        let mut dists = vec![0.0; n];
        for (i, p) in points.iter().enumerate() {
            let (j, d) = nearest(p, &centers);
            if assignments[i] != j {
                changed = true;
                assignments[i] = j;
            }
            dists[i] = d;
        }

        let mut counts = vec![0usize; k];
        assignments.iter().for_each(|&a| counts[a] += 1);
        for j in 0..k {
            if counts[j] > 0 {
                continue;
            }
            // steal the worst-fit point from a cluster that can spare it
            let victim = (0..n)
                .filter(|&i| counts[assignments[i]] > 1)
                .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)))
                .expect("n >= k guarantees a donor cluster");
            counts[assignments[victim]] -= 1;
            assignments[victim] = j;
            counts[j] = 1;
            dists[victim] = 0.0;
            changed = true;
        }

        let mut next = vec![vec![0.0; dim]; k];
        for (p, &a) in points.iter().zip(&assignments) {
            for (acc, v) in next[a].iter_mut().zip(p) {
                *acc += v;
            }
        }
        for (c, &cnt) in next.iter_mut().zip(&counts) {
            c.iter_mut().for_each(|v| *v /= cnt as f64);
        }
        let shift = centers
            .iter()
            .zip(&next)
            .map(|(a, b)| squared_distance(a, b).sqrt())
            .fold(0.0, f64::max);
        centers = next;
        let inertia: f64 = points
            .iter()
            .zip(&assignments)
            .map(|(p, &a)| squared_distance(p, &centers[a]))
            .sum();
        history.push(inertia);
        if !changed && shift < tol {
            break;
        }
    }

    // report assignments against the returned centers
    let mut inertia = 0.0;
    for (i, p) in points.iter().enumerate() {
        let (j, d) = nearest(p, &centers);
        assignments[i] = j;
        inertia += d;
    }
    Ok(KMeansFit {
        space: StyleSpace {
            format_version: STYLE_SPACE_FORMAT_VERSION,
            k,
            dimension: dim,
            bases: centers,
            fit_iterations: iterations,
            inertia,
            seed,
        },
        assignments,
        inertia_history: history,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleVector {
    pub vector: Vec<f64>,
    pub weights: Vec<f64>,
}

/// Softmax over cosine similarities to every basis, then the weighted sum of
/// bases. A zero-norm gram or basis contributes cosine 0.
pub fn style_feature(gram: &GramMatrix, space: &StyleSpace) -> Result<StyleVector> {
    let g = gram.flattened();
    if g.len() != space.dimension {
        return Err(Error::Shape(format!(
            "gram dimension {} does not match style space dimension {}",
            g.len(),
            space.dimension
        )));
    }
    let sims: Vec<f64> = space.bases.iter().map(|b| cosine(g, b).unwrap_or(0.0)).collect();
    let max = sims.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = sims.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let weights: Vec<f64> = exps.iter().map(|e| e / total).collect();
    let mut vector = vec![0.0; space.dimension];
    for (w, b) in weights.iter().zip(&space.bases) {
        for (acc, v) in vector.iter_mut().zip(b) {
            *acc += w * v;
        }
    }
    Ok(StyleVector { vector, weights })
}
