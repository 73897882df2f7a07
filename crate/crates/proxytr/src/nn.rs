//! Small building blocks over the tensor graph: linear layers, MLPs, layer
//! norm parameters, and the shared edge-feature aggregation used by both the
//! proxy extractor and the geometry-aware attention blocks.

use crate::error::Result;
use crate::tensor::{Element, Graph, ParamId, ParamStore, TensorId};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Uniform init in [-1/sqrt(fan_in), 1/sqrt(fan_in)].
pub fn uniform_init<E: Element>(rng: &mut ChaCha8Rng, fan_in: usize, n: usize) -> Vec<E> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    (0..n).map(|_| E::from_f64(rng.gen_range(-bound..bound))).collect()
}

/// Fully connected layer `y = x W + b`, weights `[in, out]`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<E: Element>(
        store: &mut ParamStore<E>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Result<Linear> {
        let w = store.add(
            &format!("{name}.w"),
            vec![in_dim, out_dim],
            uniform_init(rng, in_dim, in_dim * out_dim),
        )?;
        let b = store.add(
            &format!("{name}.b"),
            vec![1, out_dim],
            uniform_init(rng, in_dim, out_dim),
        )?;
        Ok(Linear { w, b, in_dim, out_dim })
    }

    pub fn forward<E: Element>(
        &self,
        g: &mut Graph<E>,
        store: &ParamStore<E>,
        x: TensorId,
    ) -> Result<TensorId> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let xw = g.matmul(x, w)?;
        g.add(xw, b)
    }
}

/// Stack of linear layers with ReLU between (none after the last).
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new<E: Element>(
        store: &mut ParamStore<E>,
        rng: &mut ChaCha8Rng,
        name: &str,
        dims: &[usize],
    ) -> Result<Mlp> {
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for i in 0..dims.len() - 1 {
            layers.push(Linear::new(store, rng, &format!("{name}.{i}"), dims[i], dims[i + 1])?);
        }
        Ok(Mlp { layers })
    }

    pub fn forward<E: Element>(
        &self,
        g: &mut Graph<E>,
        store: &ParamStore<E>,
        x: TensorId,
    ) -> Result<TensorId> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, store, h)?;
            if i + 1 < self.layers.len() {
                h = g.relu(h);
            }
        }
        Ok(h)
    }
}

/// Gain/bias pair for layer normalization.
#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<E: Element>(store: &mut ParamStore<E>, name: &str, dim: usize) -> Result<LayerNorm> {
        let gamma = store.add(&format!("{name}.gamma"), vec![dim], vec![E::ONE; dim])?;
        let beta = store.add(&format!("{name}.beta"), vec![dim], vec![E::ZERO; dim])?;
        Ok(LayerNorm { gamma, beta })
    }

    pub fn forward<E: Element>(
        &self,
        g: &mut Graph<E>,
        store: &ParamStore<E>,
        x: TensorId,
    ) -> Result<TensorId> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta, E::from_f64(1e-6))
    }
}

/// Edge-feature aggregation: for every center i with neighbor rows j in
/// `source`, apply `linear([center_i, source_j - center_i])` per edge and
/// max-pool over the neighbors.
///
/// Neighbor lists shorter than the longest are padded by repeating their
/// first entry; duplicates do not change a max-pool.
pub fn edge_max_pool<E: Element>(
    g: &mut Graph<E>,
    store: &ParamStore<E>,
    linear: &Linear,
    centers: TensorId,
    source: TensorId,
    neighbors: &[Vec<usize>],
) -> Result<TensorId> {
    let m = g.shape(centers)[0];
    debug_assert_eq!(m, neighbors.len());
    let k = neighbors.iter().map(Vec::len).max().unwrap_or(1).max(1);
    let mut center_rep = Vec::with_capacity(m * k);
    let mut nbr_idx = Vec::with_capacity(m * k);
    for (i, list) in neighbors.iter().enumerate() {
        debug_assert!(!list.is_empty());
        for j in 0..k {
            center_rep.push(i);
            nbr_idx.push(list[j.min(list.len() - 1)]);
        }
    }
    let c_rep = g.gather_rows(centers, &center_rep)?;
    let n_feat = g.gather_rows(source, &nbr_idx)?;
    let diff = g.sub(n_feat, c_rep)?;
    let edge = g.concat(&[c_rep, diff], 1)?;
    let mapped = linear.forward(g, store, edge)?;
    let c_out = g.shape(mapped)[1];
    let grouped = g.reshape(mapped, vec![m, k, c_out])?;
    g.max(grouped, Some(1))
}

/// Repeat a `[1, C]` row `n` times into `[n, C]`.
pub fn repeat_row<E: Element>(g: &mut Graph<E>, row: TensorId, n: usize) -> Result<TensorId> {
    g.gather_rows(row, &vec![0; n])
}
