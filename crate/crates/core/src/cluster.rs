//! Channel similarity and density-based clustering of feature maps.
//!
//! Each channel of a layer is represented by its sample-averaged feature map. Two
//! channels are close when their maps point in nearly the same (or exactly the
//! opposite) direction: the cosine distance is `1 - |cos|`. Clustering with DBSCAN
//! and counting clusters plus noise points gives the pruned width of the layer.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::featio::{average_samples, AveragedMaps, FeatureDump};
use crate::structmodel::{ArchTemplate, StructureVector};

#[derive(Debug, Error)]
pub enum ClusterError {
    #[error("channel {channel} of `{layer}` has a zero mean map; cosine distance is undefined")]
    ZeroNormChannel { layer: String, channel: usize },
    #[error("channel maps of `{0}` have unequal or zero length")]
    RaggedMaps(String),
    #[error("no feature dump for layer `{0}`")]
    MissingLayer(String),
    #[error("layer `{layer}` dump has {found} channels, template expects {expected}")]
    ShapeMismatch {
        layer: String,
        expected: usize,
        found: usize,
    },
    #[error("invalid clustering parameters: {0}")]
    InvalidParams(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    #[default]
    Cosine,
    Euclidean,
    Manhattan,
    Chebyshev,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::Cosine, Metric::Euclidean, Metric::Manhattan, Metric::Chebyshev];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Cosine => "cosine",
            Metric::Euclidean => "euclidean",
            Metric::Manhattan => "manhattan",
            Metric::Chebyshev => "chebyshev",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Metric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Metric::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown metric `{s}` (expected cosine, euclidean, manhattan or chebyshev)"))
    }
}

/// Symmetric `n x n` distances with a zero diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    n: usize,
    entries: Vec<f64>,
    metric: Metric,
}

impl DistanceMatrix {
    /// Builds a matrix from the strict upper triangle given by `f(i, j)`, `i < j`.
    pub fn from_fn(n: usize, metric: Metric, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut entries = vec![0.0; n * n];
        for i in 0..n {
            for j in i + 1..n {
                let d = f(i, j);
                entries[i * n + j] = d;
                entries[j * n + i] = d;
            }
        }
        Self { n, entries, metric }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn metric(&self) -> Metric {
        self.metric
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.entries[i * self.n..(i + 1) * self.n]
    }
}

pub fn pairwise_distance(maps: &AveragedMaps, metric: Metric) -> Result<DistanceMatrix, ClusterError> {
    let vs = &maps.channels;
    let dim = vs.first().map_or(0, Vec::len);
    if vs.iter().any(|v| v.len() != dim) || (dim == 0 && !vs.is_empty()) {
        return Err(ClusterError::RaggedMaps(maps.layer_name.clone()));
    }
    let n = vs.len();
    let dm = match metric {
        Metric::Cosine => {
            let sq_norms: Vec<f64> = vs.iter().map(|v| v.iter().map(|x| x * x).sum()).collect();
            if let Some(channel) = sq_norms.iter().position(|&x| x == 0.0) {
                return Err(ClusterError::ZeroNormChannel {
                    layer: maps.layer_name.clone(),
                    channel,
                });
            }
            // sqrt of the product keeps identical vectors at exactly zero distance
            DistanceMatrix::from_fn(n, metric, |i, j| {
                let dot: f64 = vs[i].iter().zip(&vs[j]).map(|(a, b)| a * b).sum();
                let cos = dot / (sq_norms[i] * sq_norms[j]).sqrt();
                (1.0 - cos.abs()).clamp(0.0, 1.0)
            })
        }
        Metric::Euclidean => DistanceMatrix::from_fn(n, metric, |i, j| {
            vs[i]
                .iter()
                .zip(&vs[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        }),
        Metric::Manhattan => DistanceMatrix::from_fn(n, metric, |i, j| {
            vs[i].iter().zip(&vs[j]).map(|(a, b)| (a - b).abs()).sum()
        }),
        Metric::Chebyshev => DistanceMatrix::from_fn(n, metric, |i, j| {
            vs[i].iter().zip(&vs[j]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
        }),
    };
    Ok(dm)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PointLabel {
    Cluster(usize),
    Noise,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterResult {
    pub labels: Vec<PointLabel>,
    pub num_clusters: usize,
    pub num_noise: usize,
    pub eps: f64,
    pub min_pts: usize,
}

/// DBSCAN over a precomputed distance matrix.
///
/// A point is core when at least `min_pts` points (itself included) lie within
/// `eps`. Clusters grow from cores in index order, so a border point reachable from
/// several clusters joins the lowest-numbered one.
pub fn dbscan(d: &DistanceMatrix, eps: f64, min_pts: usize) -> ClusterResult {
    let n = d.len();
    let neighbors: Vec<Vec<usize>> = (0..n)
        .map(|i| (0..n).filter(|&j| d.get(i, j) <= eps).collect())
        .collect();
    let core: Vec<bool> = neighbors.iter().map(|nb| nb.len() >= min_pts).collect();

    let mut labels = vec![PointLabel::Noise; n];
    let mut num_clusters = 0;
    let mut queue = VecDeque::new();
    for seed in 0..n {
        if !core[seed] || labels[seed] != PointLabel::Noise {
            continue;
        }
        let id = num_clusters;
        num_clusters += 1;
        labels[seed] = PointLabel::Cluster(id);
        queue.push_back(seed);
        while let Some(p) = queue.pop_front() {
            for &q in &neighbors[p] {
                if labels[q] == PointLabel::Noise {
                    labels[q] = PointLabel::Cluster(id);
                    if core[q] {
                        queue.push_back(q);
                    }
                }
            }
        }
    }
    let num_noise = labels.iter().filter(|l| **l == PointLabel::Noise).count();
    ClusterResult {
        labels,
        num_clusters,
        num_noise,
        eps,
        min_pts,
    }
}

/// Channels kept for a layer: one per cluster plus one per noise point.
pub fn pruned_channel_count(r: &ClusterResult) -> usize {
    r.num_clusters + r.num_noise
}

/// Clustering outcome for one free group.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerClustering {
    pub group: usize,
    pub layer: String,
    pub original: usize,
    pub result: ClusterResult,
}

impl LayerClustering {
    pub fn kept(&self) -> usize {
        pruned_channel_count(&self.result)
    }
}

/// Distances between the channels of one free group's captured layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerDistances {
    pub group: usize,
    pub layer: String,
    pub original: usize,
    pub distances: DistanceMatrix,
}

impl LayerDistances {
    pub fn cluster(&self, eps: f64, min_pts: usize) -> LayerClustering {
        LayerClustering {
            group: self.group,
            layer: self.layer.clone(),
            original: self.original,
            result: dbscan(&self.distances, eps, min_pts),
        }
    }
}

/// Pairwise channel distances for every free group of `t`, matched to dumps by layer name.
pub fn layer_distances(
    dumps: &[FeatureDump],
    t: &ArchTemplate,
    metric: Metric,
) -> Result<Vec<LayerDistances>, ClusterError> {
    let jobs = t
        .free_groups()
        .iter()
        .enumerate()
        .map(|(g, group)| {
            let layer = t.capture_layer(g).unwrap_or(&group.name);
            let dump = dumps
                .iter()
                .find(|d| d.layer_name() == layer)
                .ok_or_else(|| ClusterError::MissingLayer(layer.to_string()))?;
            if dump.shape().channels != group.original_count {
                return Err(ClusterError::ShapeMismatch {
                    layer: layer.to_string(),
                    expected: group.original_count,
                    found: dump.shape().channels,
                });
            }
            Ok((g, layer.to_string(), group.original_count, dump))
        })
        .collect::<Result<Vec<_>, _>>()?;

    jobs.into_par_iter()
        .map(|(group, layer, original, dump)| {
            Ok(LayerDistances {
                group,
                layer,
                original,
                distances: pairwise_distance(&average_samples(dump), metric)?,
            })
        })
        .collect()
}

fn check_params(eps: f64, min_pts: usize) -> Result<(), ClusterError> {
    if !(eps >= 0.0) || !eps.is_finite() {
        return Err(ClusterError::InvalidParams(format!(
            "eps must be a finite value >= 0, got {eps}"
        )));
    }
    if min_pts < 1 {
        return Err(ClusterError::InvalidParams("min_pts must be >= 1".into()));
    }
    Ok(())
}

/// Clusters every free group's captured layer.
pub fn cluster_layers(
    dumps: &[FeatureDump],
    t: &ArchTemplate,
    eps: f64,
    min_pts: usize,
    metric: Metric,
) -> Result<Vec<LayerClustering>, ClusterError> {
    check_params(eps, min_pts)?;
    Ok(layer_distances(dumps, t, metric)?
        .iter()
        .map(|d| d.cluster(eps, min_pts))
        .collect())
}

/// The preliminary pruned structure: per free group, clusters plus noise points.
pub fn cluster_prune(
    dumps: &[FeatureDump],
    t: &ArchTemplate,
    eps: f64,
    min_pts: usize,
    metric: Metric,
) -> Result<StructureVector, ClusterError> {
    let layers = cluster_layers(dumps, t, eps, min_pts, metric)?;
    Ok(StructureVector::new(
        &t.arch_id,
        layers.iter().map(LayerClustering::kept).collect(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn maps(vs: Vec<Vec<f64>>) -> AveragedMaps {
        AveragedMaps {
            layer_name: "l".into(),
            channels: vs,
        }
    }

    #[test]
    fn cosine_special_cases() {
        let m = maps(vec![vec![1.0, 2.0], vec![1.0, 2.0], vec![-2.0, -4.0], vec![2.0, -1.0]]);
        let d = pairwise_distance(&m, Metric::Cosine).unwrap();
        assert_eq!(d.get(0, 1), 0.0);
        assert!(d.get(0, 2).abs() < 1e-15);
        assert!((d.get(0, 3) - 1.0).abs() < 1e-15);
        for i in 0..4 {
            assert_eq!(d.get(i, i), 0.0);
        }
    }

    #[test]
    fn other_metrics() {
        let m = maps(vec![vec![0.0, 0.0], vec![3.0, -4.0]]);
        assert_eq!(pairwise_distance(&m, Metric::Euclidean).unwrap().get(0, 1), 5.0);
        assert_eq!(pairwise_distance(&m, Metric::Manhattan).unwrap().get(1, 0), 7.0);
        assert_eq!(pairwise_distance(&m, Metric::Chebyshev).unwrap().get(0, 1), 4.0);
    }

    #[test]
    fn zero_norm_is_reported() {
        let m = maps(vec![vec![1.0, 0.0], vec![0.0, 0.0]]);
        match pairwise_distance(&m, Metric::Cosine) {
            Err(ClusterError::ZeroNormChannel { channel, .. }) => assert_eq!(channel, 1),
            other => panic!("{other:?}"),
        }
        // other metrics are fine with it
        assert!(pairwise_distance(&m, Metric::Euclidean).is_ok());
    }

    #[test]
    fn ragged_maps_rejected() {
        let m = maps(vec![vec![1.0, 0.0], vec![1.0]]);
        assert!(matches!(
            pairwise_distance(&m, Metric::Manhattan),
            Err(ClusterError::RaggedMaps(_))
        ));
    }

    #[test]
    fn identical_points_form_one_cluster() {
        let d = DistanceMatrix::from_fn(8, Metric::Cosine, |_, _| 0.0);
        let r = dbscan(&d, 0.01, 5);
        assert_eq!((r.num_clusters, r.num_noise), (1, 0));
        assert_eq!(pruned_channel_count(&r), 1);
    }

    #[test]
    fn spread_points_are_all_noise() {
        let d = DistanceMatrix::from_fn(8, Metric::Cosine, |_, _| 1.0);
        let r = dbscan(&d, 0.5, 2);
        assert_eq!((r.num_clusters, r.num_noise), (0, 8));
        assert_eq!(pruned_channel_count(&r), 8);
    }

    #[test]
    fn min_pts_one_has_no_noise() {
        let d = DistanceMatrix::from_fn(5, Metric::Euclidean, |i, j| (i + j) as f64);
        let r = dbscan(&d, 0.5, 1);
        assert_eq!(r.num_noise, 0);
        assert_eq!(r.num_clusters, 5);
    }

    #[test]
    fn border_point_goes_to_lowest_cluster() {
        // cores 0..4 and 5..9, point 4 touches one core on each side only
        let side = |i: usize| {
            if i < 4 {
                0
            } else if i > 4 {
                2
            } else {
                1
            }
        };
        let d = DistanceMatrix::from_fn(9, Metric::Euclidean, |i, j| match (side(i), side(j)) {
            (a, b) if a == b => 0.0,
            (1, _) | (_, 1) if i.min(j) == 3 || i.max(j) == 5 => 1.0,
            _ => 10.0,
        });
        let r = dbscan(&d, 1.0, 4);
        assert_eq!(r.num_clusters, 2);
        assert_eq!(r.labels[4], PointLabel::Cluster(0));
        assert_eq!(r.labels[8], PointLabel::Cluster(1));
        assert_eq!(r.num_noise, 0);
    }

    #[test]
    fn invalid_params() {
        let t = crate::structmodel::build_template("toynet-1").unwrap();
        assert!(matches!(
            cluster_prune(&[], &t, -0.1, 5, Metric::Cosine),
            Err(ClusterError::InvalidParams(_))
        ));
        assert!(matches!(
            cluster_prune(&[], &t, 0.1, 0, Metric::Cosine),
            Err(ClusterError::InvalidParams(_))
        ));
        assert!(matches!(
            cluster_prune(&[], &t, 0.1, 5, Metric::Cosine),
            Err(ClusterError::MissingLayer(_))
        ));
    }

    #[test]
    fn metric_parsing() {
        for m in Metric::ALL {
            assert_eq!(m.name().parse::<Metric>().unwrap(), m);
        }
        assert!("hamming".parse::<Metric>().is_err());
    }
}
