//! Point proxies: farthest-point-sampled centers paired with hierarchical
//! edge-convolution features plus a positional embedding.

use crate::error::{Error, Result};
use crate::geometry::{dist2, fps, knn, Point, PointCloud};
use crate::nn::{Linear, Mlp};
use crate::tensor::{Element, Graph, ParamStore, TensorId};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// One hierarchical edge-convolution level.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdgeConvSpec {
    pub out_channels: usize,
    pub k: usize,
    /// Points kept after farthest point sampling; 0 means "the proxy count".
    pub out_points: usize,
}

/// Architecture of the feature extractor: a per-point stem linear followed
/// by edge-convolution levels, then a projection to the transformer width.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractorSpec {
    pub stem_out: usize,
    pub levels: Vec<EdgeConvSpec>,
}

impl ExtractorSpec {
    /// The stack used by the full-scale presets:
    /// Linear(3→8) → EdgeConv(8→32, k=8, 2048) → (32→64, k=8, 512)
    /// → (64→64, k=8, 512) → (64→128, k=8, N).
    pub fn full() -> ExtractorSpec {
        ExtractorSpec {
            stem_out: 8,
            levels: vec![
                EdgeConvSpec { out_channels: 32, k: 8, out_points: 2048 },
                EdgeConvSpec { out_channels: 64, k: 8, out_points: 512 },
                EdgeConvSpec { out_channels: 64, k: 8, out_points: 512 },
                EdgeConvSpec { out_channels: 128, k: 8, out_points: 0 },
            ],
        }
    }

    /// Quarter-width stack for desk-scale runs on 256-point inputs.
    pub fn desk() -> ExtractorSpec {
        ExtractorSpec {
            stem_out: 8,
            levels: vec![
                EdgeConvSpec { out_channels: 16, k: 8, out_points: 128 },
                EdgeConvSpec { out_channels: 32, k: 8, out_points: 0 },
            ],
        }
    }

    /// Minimal stack for gradient checks on ~12-point inputs.
    pub fn tiny() -> ExtractorSpec {
        ExtractorSpec {
            stem_out: 4,
            levels: vec![
                EdgeConvSpec { out_channels: 8, k: 4, out_points: 8 },
                EdgeConvSpec { out_channels: 16, k: 4, out_points: 0 },
            ],
        }
    }

    pub fn final_channels(&self) -> usize {
        self.levels.last().map(|l| l.out_channels).unwrap_or(self.stem_out)
    }
}

/// Learnable state of one edge-convolution level.
#[derive(Clone, Debug)]
pub struct EdgeConvLayer {
    pub linear: Linear,
    pub k: usize,
    pub out_points: usize,
}

/// The full proxy feature extractor.
#[derive(Clone, Debug)]
pub struct Extractor {
    pub stem: Linear,
    pub layers: Vec<EdgeConvLayer>,
    pub project: Linear,
    pub pos_embed: Mlp,
    pub width: usize,
}

impl Extractor {
    pub fn new<E: Element>(
        store: &mut ParamStore<E>,
        rng: &mut ChaCha8Rng,
        spec: &ExtractorSpec,
        proxy_count: usize,
        width: usize,
    ) -> Result<Extractor> {
        let stem = Linear::new(store, rng, "extractor.stem", 3, spec.stem_out)?;
        let mut layers = Vec::with_capacity(spec.levels.len());
        let mut channels = spec.stem_out;
        for (i, level) in spec.levels.iter().enumerate() {
            let linear = Linear::new(
                store,
                rng,
                &format!("extractor.edge{i}"),
                2 * channels,
                level.out_channels,
            )?;
            let out_points = if level.out_points == 0 { proxy_count } else { level.out_points };
            layers.push(EdgeConvLayer { linear, k: level.k, out_points });
            channels = level.out_channels;
        }
        let project = Linear::new(store, rng, "extractor.project", channels, width)?;
        let pos_embed = Mlp::new(store, rng, "extractor.pos", &[3, width / 2, width])?;
        Ok(Extractor { stem, layers, project, pos_embed, width })
    }
}

/// Proxy sequence: center coordinates plus per-center features, with the
/// pre-embedding features retained for inspection.
pub struct ProxySet {
    pub centers: Vec<Point>,
    /// `N x C` features including the positional term.
    pub features: TensorId,
    /// `N x C` features before the positional term.
    pub features_pre_embed: TensorId,
}

/// Deterministic, permutation-invariant start index for farthest point
/// sampling: the point farthest from the centroid (ties by lowest index,
/// which cannot fire on tie-free clouds).
pub fn fps_start(points: &[Point]) -> usize {
    let mut c = [0.0f64; 3];
    for p in points {
        for a in 0..3 {
            c[a] += p[a];
        }
    }
    for v in c.iter_mut() {
        *v /= points.len() as f64;
    }
    let mut best = f64::NEG_INFINITY;
    let mut best_i = 0;
    for (i, p) in points.iter().enumerate() {
        let d = dist2(p, &c);
        if d > best {
            best = d;
            best_i = i;
        }
    }
    best_i
}

fn points_to_tensor<E: Element>(g: &mut Graph<E>, points: &[Point]) -> Result<TensorId> {
    let data: Vec<E> = points
        .iter()
        .flat_map(|p| p.iter().map(|&c| E::from_f64(c)))
        .collect();
    g.constant(data, vec![points.len(), 3])
}

/// One edge-convolution level: fps-downsample, gather k neighbors in the
/// previous level, apply the per-edge linear map, max-pool over neighbors.
pub fn edge_conv<E: Element>(
    g: &mut Graph<E>,
    store: &ParamStore<E>,
    layer: &EdgeConvLayer,
    points: &[Point],
    feats: TensorId,
) -> Result<(Vec<Point>, TensorId)> {
    if points.len() < layer.k.max(layer.out_points) {
        return Err(Error::Domain(format!(
            "edge_conv: {} points < required {}",
            points.len(),
            layer.k.max(layer.out_points)
        )));
    }
    if g.shape(feats)[0] != points.len() {
        return Err(Error::ShapeMismatch {
            op: "edge_conv",
            lhs: vec![points.len()],
            rhs: g.shape(feats).to_vec(),
        });
    }
    let cloud = PointCloud::new(points.to_vec())?;
    let center_idx = fps(&cloud, layer.out_points, fps_start(points))?;
    let centers: Vec<Point> = center_idx.iter().map(|&i| points[i]).collect();
    let center_cloud = PointCloud::new(centers.clone())?;
    let nbr = knn(&cloud, &center_cloud, layer.k)?;
    let neighbor_lists: Vec<Vec<usize>> = (0..centers.len()).map(|i| nbr.row(i).to_vec()).collect();
    let center_feats = g.gather_rows(feats, &center_idx)?;
    let out = crate::nn::edge_max_pool(g, store, &layer.linear, center_feats, feats, &neighbor_lists)?;
    Ok((centers, out))
}

/// Two-layer positional embedding of a coordinate batch.
pub fn positional_embed<E: Element>(
    g: &mut Graph<E>,
    store: &ParamStore<E>,
    extractor: &Extractor,
    points: &[Point],
) -> Result<TensorId> {
    let coords = points_to_tensor(g, points)?;
    extractor.pos_embed.forward(g, store, coords)
}

/// Convert a cloud into `proxy_count` point proxies (Extractor must have been
/// built with the same count).
pub fn make_proxies<E: Element>(
    g: &mut Graph<E>,
    store: &ParamStore<E>,
    extractor: &Extractor,
    cloud: &PointCloud,
) -> Result<ProxySet> {
    let final_count = extractor
        .layers
        .last()
        .map(|l| l.out_points)
        .unwrap_or(cloud.len());
    if cloud.len() < final_count {
        return Err(Error::Domain(format!(
            "make_proxies: cloud of {} points cannot yield {} proxies",
            cloud.len(),
            final_count
        )));
    }
    let mut points: Vec<Point> = cloud.points().to_vec();
    let coords = points_to_tensor(g, &points)?;
    let mut feats = extractor.stem.forward(g, store, coords)?;
    feats = g.relu(feats);
    let n_layers = extractor.layers.len();
    for (i, layer) in extractor.layers.iter().enumerate() {
        let (next_points, next_feats) = edge_conv(g, store, layer, &points, feats)?;
        points = next_points;
        feats = if i + 1 < n_layers { g.relu(next_feats) } else { next_feats };
    }
    let features_pre_embed = extractor.project.forward(g, store, feats)?;
    let phi = positional_embed(g, store, extractor, &points)?;
    let features = g.add(features_pre_embed, phi)?;
    Ok(ProxySet {
        centers: points,
        features,
        features_pre_embed,
    })
}
