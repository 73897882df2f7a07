//! Transformer encoder/decoder stacks with the geometry-aware block.
//!
//! Blocks are pre-norm: layer normalization feeds each sub-block and the
//! result adds back onto the residual stream. The geometry-aware variant runs
//! a kNN edge-feature path next to multi-head attention, concatenates the two
//! feature-wise, and maps back to the block width; it sits in the first
//! encoder block and the first decoder block only.
//!
//! Blocked attention entries receive a -1e30 bias before softmax, which
//! underflows to exactly zero weight, so masked groups cannot influence each
//! other even at the last bit.

use crate::error::{Error, Result};
use crate::geometry::{dist2, Point};
use crate::nn::{edge_max_pool, LayerNorm, Linear};
use crate::tensor::{Element, Graph, ParamStore, TensorId};
use rand_chacha::ChaCha8Rng;

/// Width/head/FFN configuration shared by every block in a stack.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockConfig {
    pub width: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub k_geo: usize,
}

impl BlockConfig {
    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::Domain(format!(
                "block width {} must be a positive multiple of heads {}",
                self.width, self.heads
            )));
        }
        if self.k_geo == 0 {
            return Err(Error::Domain("k_geo must be at least 1".into()));
        }
        Ok(())
    }
}

/// Boolean attention mask: `true` = attend, `false` = blocked. Every row must
/// keep at least one open entry.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    rows: usize,
    cols: usize,
    allow: Vec<bool>,
}

impl AttentionMask {
    pub fn new(rows: usize, cols: usize, allow: Vec<bool>) -> Result<AttentionMask> {
        if allow.len() != rows * cols {
            return Err(Error::Usage(format!(
                "mask data length {} does not match {rows}x{cols}",
                allow.len()
            )));
        }
        for r in 0..rows {
            if !allow[r * cols..(r + 1) * cols].iter().any(|&a| a) {
                return Err(Error::Domain(format!("mask row {r} blocks every column")));
            }
        }
        Ok(AttentionMask { rows, cols, allow })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn allows(&self, r: usize, c: usize) -> bool {
        self.allow[r * self.cols + c]
    }

    /// Additive pre-softmax bias: 0 where allowed, -1e30 where blocked.
    fn to_bias<E: Element>(&self, g: &mut Graph<E>) -> Result<TensorId> {
        let data: Vec<E> = self
            .allow
            .iter()
            .map(|&a| if a { E::ZERO } else { E::from_f64(-1e30) })
            .collect();
        g.constant(data, vec![self.rows, self.cols])
    }
}

/// Projection weights of one multi-head attention module.
#[derive(Clone, Debug)]
pub struct MhaParams {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
}

impl MhaParams {
    pub fn new<E: Element>(
        store: &mut ParamStore<E>,
        rng: &mut ChaCha8Rng,
        name: &str,
        width: usize,
    ) -> Result<MhaParams> {
        Ok(MhaParams {
            wq: Linear::new(store, rng, &format!("{name}.wq"), width, width)?,
            wk: Linear::new(store, rng, &format!("{name}.wk"), width, width)?,
            wv: Linear::new(store, rng, &format!("{name}.wv"), width, width)?,
            wo: Linear::new(store, rng, &format!("{name}.wo"), width, width)?,
        })
    }
}

/// Multi-head attention. `query` is `[n, C]`, `key`/`value` are `[m, C]`.
pub fn mha<E: Element>(
    g: &mut Graph<E>,
    store: &ParamStore<E>,
    params: &MhaParams,
    query: TensorId,
    key: TensorId,
    value: TensorId,
    mask: Option<&AttentionMask>,
    cfg: &BlockConfig,
) -> Result<TensorId> {
    cfg.validate()?;
    let n = g.shape(query)[0];
    let m = g.shape(key)[0];
    if g.shape(query)[1] != cfg.width || g.shape(key)[1] != cfg.width || g.shape(value) != [m, cfg.width] {
        return Err(Error::ShapeMismatch {
            op: "mha",
            lhs: g.shape(query).to_vec(),
            rhs: g.shape(key).to_vec(),
        });
    }
    let bias = match mask {
        Some(mask) => {
            if mask.rows() != n || mask.cols() != m {
                return Err(Error::Usage(format!(
                    "mask {}x{} does not cover attention {n}x{m}",
                    mask.rows(),
                    mask.cols()
                )));
            }
            Some(mask.to_bias(g)?)
        }
        None => None,
    };
    let q_all = params.wq.forward(g, store, query)?;
    let k_all = params.wk.forward(g, store, key)?;
    let v_all = params.wv.forward(g, store, value)?;
    let d_k = cfg.head_dim();
    let scale = E::from_f64(1.0 / (d_k as f64).sqrt());
    let mut heads = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let qh = g.slice_cols(q_all, h * d_k, d_k)?;
        let kh = g.slice_cols(k_all, h * d_k, d_k)?;
        let vh = g.slice_cols(v_all, h * d_k, d_k)?;
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let mut scores = g.scale(scores, scale);
        if let Some(b) = bias {
            scores = g.add(scores, b)?;
        }
        let weights = g.softmax(scores, 1)?;
        heads.push(g.matmul(weights, vh)?);
    }
    let joined = g.concat(&heads, 1)?;
    params.wo.forward(g, store, joined)
}

/// kNN edge path of the geometry-aware block (Fig. 4 side branch).
#[derive(Clone, Debug)]
pub struct GeoPathParams {
    /// Per-edge map on `[V_i, V_j - V_i]`.
    pub edge: Linear,
    /// Maps `[attention ++ knn]` back to the block width.
    pub merge: Linear,
}

impl GeoPathParams {
    pub fn new<E: Element>(
        store: &mut ParamStore<E>,
        rng: &mut ChaCha8Rng,
        name: &str,
        width: usize,
    ) -> Result<GeoPathParams> {
        Ok(GeoPathParams {
            edge: Linear::new(store, rng, &format!("{name}.edge"), 2 * width, width)?,
            merge: Linear::new(store, rng, &format!("{name}.merge"), 2 * width, width)?,
        })
    }
}

/// Neighbor lists for the geometry path. When `groups` is given, neighbors
/// are restricted to rows of the same group so masked groups stay isolated
/// on the kNN path exactly as they do under attention masking.
pub fn knn_lists(coords: &[Point], groups: Option<&[usize]>, k: usize) -> Vec<Vec<usize>> {
    let n = coords.len();
    let mut lists = Vec::with_capacity(n);
    for i in 0..n {
        let gi = groups.map(|g| g[i]);
        let mut cands: Vec<(usize, f64)> = (0..n)
            .filter(|&j| groups.map(|g| g[j]) == gi)
            .map(|j| (j, dist2(&coords[i], &coords[j])))
            .collect();
        cands.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
        cands.truncate(k.min(cands.len()));
        lists.push(cands.into_iter().map(|(j, _)| j).collect());
    }
    lists
}

/// Feature sequence with the coordinates the kNN path keys off.
pub struct SeqState {
    pub coords: Vec<Point>,
    pub feats: TensorId,
}

fn geo_combine<E: Element>(
    g: &mut Graph<E>,
    store: &ParamStore<E>,
    geo: &GeoPathParams,
    normed: TensorId,
    attn: TensorId,
    coords: &[Point],
    groups: Option<&[usize]>,
    k_geo: usize,
) -> Result<TensorId> {
    if coords.len() < 1 {
        return Err(Error::Domain("geometry path needs at least one point".into()));
    }
    let lists = knn_lists(coords, groups, k_geo);
    let knn_feat = edge_max_pool(g, store, &geo.edge, normed, normed, &lists)?;
    let both = g.concat(&[attn, knn_feat], 1)?;
    geo.merge.forward(g, store, both)
}

/// One encoder block: (geometry-aware) self-attention then FFN, pre-norm.
#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub ln_attn: LayerNorm,
    pub attn: MhaParams,
    pub geo: Option<GeoPathParams>,
    pub ln_ffn: LayerNorm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
}

impl EncoderBlock {
    pub fn new<E: Element>(
        store: &mut ParamStore<E>,
        rng: &mut ChaCha8Rng,
        name: &str,
        cfg: &BlockConfig,
        geometry: bool,
    ) -> Result<EncoderBlock> {
        Ok(EncoderBlock {
            ln_attn: LayerNorm::new(store, &format!("{name}.ln_attn"), cfg.width)?,
            attn: MhaParams::new(store, rng, &format!("{name}.attn"), cfg.width)?,
            geo: if geometry {
                Some(GeoPathParams::new(store, rng, &format!("{name}.geo"), cfg.width)?)
            } else {
                None
            },
            ln_ffn: LayerNorm::new(store, &format!("{name}.ln_ffn"), cfg.width)?,
            ffn_in: Linear::new(store, rng, &format!("{name}.ffn_in"), cfg.width, cfg.ffn_hidden)?,
            ffn_out: Linear::new(store, rng, &format!("{name}.ffn_out"), cfg.ffn_hidden, cfg.width)?,
        })
    }

    pub fn forward<E: Element>(
        &self,
        g: &mut Graph<E>,
        store: &ParamStore<E>,
        state: &SeqState,
        cfg: &BlockConfig,
    ) -> Result<TensorId> {
        let x = state.feats;
        let normed = self.ln_attn.forward(g, store, x)?;
        let attn = mha(g, store, &self.attn, normed, normed, normed, None, cfg)?;
        let combined = match &self.geo {
            Some(geo) => geo_combine(g, store, geo, normed, attn, &state.coords, None, cfg.k_geo)?,
            None => attn,
        };
        let x = g.add(x, combined)?;
        let normed = self.ln_ffn.forward(g, store, x)?;
        let hidden = self.ffn_in.forward(g, store, normed)?;
        let hidden = g.relu(hidden);
        let ffn = self.ffn_out.forward(g, store, hidden)?;
        g.add(x, ffn)
    }
}

/// One decoder block: masked (geometry-aware) self-attention, cross-attention
/// to the encoder memory, then FFN. Cross-attention is never masked.
#[derive(Clone, Debug)]
pub struct DecoderBlock {
    pub ln_self: LayerNorm,
    pub self_attn: MhaParams,
    pub geo: Option<GeoPathParams>,
    pub ln_cross: LayerNorm,
    pub cross_attn: MhaParams,
    pub ln_ffn: LayerNorm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
}

impl DecoderBlock {
    pub fn new<E: Element>(
        store: &mut ParamStore<E>,
        rng: &mut ChaCha8Rng,
        name: &str,
        cfg: &BlockConfig,
        geometry: bool,
    ) -> Result<DecoderBlock> {
        Ok(DecoderBlock {
            ln_self: LayerNorm::new(store, &format!("{name}.ln_self"), cfg.width)?,
            self_attn: MhaParams::new(store, rng, &format!("{name}.self_attn"), cfg.width)?,
            geo: if geometry {
                Some(GeoPathParams::new(store, rng, &format!("{name}.geo"), cfg.width)?)
            } else {
                None
            },
            ln_cross: LayerNorm::new(store, &format!("{name}.ln_cross"), cfg.width)?,
            cross_attn: MhaParams::new(store, rng, &format!("{name}.cross_attn"), cfg.width)?,
            ln_ffn: LayerNorm::new(store, &format!("{name}.ln_ffn"), cfg.width)?,
            ffn_in: Linear::new(store, rng, &format!("{name}.ffn_in"), cfg.width, cfg.ffn_hidden)?,
            ffn_out: Linear::new(store, rng, &format!("{name}.ffn_out"), cfg.ffn_hidden, cfg.width)?,
        })
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward<E: Element>(
        &self,
        g: &mut Graph<E>,
        store: &ParamStore<E>,
        state: &SeqState,
        groups: Option<&[usize]>,
        memory: TensorId,
        mask: Option<&AttentionMask>,
        cfg: &BlockConfig,
    ) -> Result<TensorId> {
        let x = state.feats;
        let normed = self.ln_self.forward(g, store, x)?;
        let attn = mha(g, store, &self.self_attn, normed, normed, normed, mask, cfg)?;
        let combined = match &self.geo {
            Some(geo) => geo_combine(g, store, geo, normed, attn, &state.coords, groups, cfg.k_geo)?,
            None => attn,
        };
        let x = g.add(x, combined)?;
        let normed = self.ln_cross.forward(g, store, x)?;
        let cross = mha(g, store, &self.cross_attn, normed, memory, memory, None, cfg)?;
        let x = g.add(x, cross)?;
        let normed = self.ln_ffn.forward(g, store, x)?;
        let hidden = self.ffn_in.forward(g, store, normed)?;
        let hidden = g.relu(hidden);
        let ffn = self.ffn_out.forward(g, store, hidden)?;
        g.add(x, ffn)
    }
}

/// Encoder stack; the first block is geometry-aware, the rest are vanilla.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub blocks: Vec<EncoderBlock>,
    pub final_ln: LayerNorm,
}

impl Encoder {
    pub fn new<E: Element>(
        store: &mut ParamStore<E>,
        rng: &mut ChaCha8Rng,
        cfg: &BlockConfig,
        depth: usize,
    ) -> Result<Encoder> {
        let mut blocks = Vec::with_capacity(depth);
        for i in 0..depth {
            blocks.push(EncoderBlock::new(store, rng, &format!("encoder.block{i}"), cfg, i == 0)?);
        }
        Ok(Encoder {
            blocks,
            final_ln: LayerNorm::new(store, "encoder.final_ln", cfg.width)?,
        })
    }

    /// Map proxy features to memory features; coordinates pass through.
    pub fn forward<E: Element>(
        &self,
        g: &mut Graph<E>,
        store: &ParamStore<E>,
        coords: &[Point],
        feats: TensorId,
        cfg: &BlockConfig,
    ) -> Result<TensorId> {
        let mut state = SeqState { coords: coords.to_vec(), feats };
        for block in &self.blocks {
            state.feats = block.forward(g, store, &state, cfg)?;
        }
        if self.blocks.is_empty() {
            return Ok(state.feats); // depth-0 test config: identity
        }
        self.final_ln.forward(g, store, state.feats)
    }
}

/// Decoder stack; the first block is geometry-aware on the self-attention
/// path, using the query coordinates.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub blocks: Vec<DecoderBlock>,
    pub final_ln: LayerNorm,
}

impl Decoder {
    pub fn new<E: Element>(
        store: &mut ParamStore<E>,
        rng: &mut ChaCha8Rng,
        cfg: &BlockConfig,
        depth: usize,
    ) -> Result<Decoder> {
        let mut blocks = Vec::with_capacity(depth);
        for i in 0..depth {
            blocks.push(DecoderBlock::new(store, rng, &format!("decoder.block{i}"), cfg, i == 0)?);
        }
        Ok(Decoder {
            blocks,
            final_ln: LayerNorm::new(store, "decoder.final_ln", cfg.width)?,
        })
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward<E: Element>(
        &self,
        g: &mut Graph<E>,
        store: &ParamStore<E>,
        query_coords: &[Point],
        groups: Option<&[usize]>,
        query_feats: TensorId,
        memory: TensorId,
        mask: Option<&AttentionMask>,
        cfg: &BlockConfig,
    ) -> Result<TensorId> {
        if let Some(mask) = mask {
            let n = g.shape(query_feats)[0];
            if mask.rows() != n || mask.cols() != n {
                return Err(Error::Usage(format!(
                    "decoder self-attention mask {}x{} does not cover {n} queries",
                    mask.rows(),
                    mask.cols()
                )));
            }
        }
        let mut state = SeqState {
            coords: query_coords.to_vec(),
            feats: query_feats,
        };
        for block in &self.blocks {
            state.feats = block.forward(g, store, &state, groups, memory, mask, cfg)?;
        }
        if self.blocks.is_empty() {
            return Ok(state.feats);
        }
        self.final_ln.forward(g, store, state.feats)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg1() -> BlockConfig {
        BlockConfig { width: 4, heads: 1, ffn_hidden: 8, k_geo: 2 }
    }

    fn identity_mha(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng, name: &str, c: usize) -> MhaParams {
        let p = MhaParams::new(store, rng, name, c).unwrap();
        let mut eye = vec![0.0; c * c];
        for i in 0..c {
            eye[i * c + i] = 1.0;
        }
        for lin in [&p.wq, &p.wk, &p.wv, &p.wo] {
            store.set_data(lin.w, eye.clone()).unwrap();
            store.set_data(lin.b, vec![0.0; c]).unwrap();
        }
        p
    }

    fn rand_feats(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<f64> {
        (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn mha_single_key_returns_its_value_row() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = identity_mha(&mut store, &mut rng, "a", 4);
        let mut g = Graph::new();
        let q = g.constant(rand_feats(&mut rng, 3, 4), vec![3, 4]).unwrap();
        let kv = g.constant(vec![0.3, -0.2, 0.9, 0.1], vec![1, 4]).unwrap();
        let out = mha(&mut g, &store, &p, q, kv, kv, None, &cfg1()).unwrap();
        for r in 0..3 {
            assert_eq!(&g.value(out)[r * 4..(r + 1) * 4], &[0.3, -0.2, 0.9, 0.1]);
        }
    }

    #[test]
    fn mha_identical_keys_average_values() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = identity_mha(&mut store, &mut rng, "a", 4);
        let mut g = Graph::new();
        let q = g.constant(rand_feats(&mut rng, 1, 4), vec![1, 4]).unwrap();
        let key_row = [0.5, 0.5, -0.5, 0.0];
        let k = g.constant(key_row.iter().cycle().take(8).copied().collect(), vec![2, 4]).unwrap();
        let v = g.constant(vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0], vec![2, 4]).unwrap();
        let out = mha(&mut g, &store, &p, q, k, v, None, &cfg1()).unwrap();
        let got = g.value(out);
        let expect = [0.5, 0.5, 0.0, 0.0];
        for (a, b) in got.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-12, "{got:?}");
        }
    }

    #[test]
    fn mha_identity_mask_isolates_rows() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = identity_mha(&mut store, &mut rng, "a", 4);
        let n = 3;
        let mut allow = vec![false; n * n];
        for i in 0..n {
            allow[i * n + i] = true;
        }
        let mask = AttentionMask::new(n, n, allow).unwrap();
        let feats = rand_feats(&mut rng, n, 4);

        let run = |kv_data: Vec<f64>| {
            let mut g = Graph::new();
            let q = g.constant(feats.clone(), vec![n, 4]).unwrap();
            let kv = g.constant(kv_data, vec![n, 4]).unwrap();
            let out = mha(&mut g, &store, &p, q, kv, kv, Some(&mask), &cfg1()).unwrap();
            g.value(out).to_vec()
        };
        let base_kv = rand_feats(&mut rng, n, 4);
        let base = run(base_kv.clone());
        // Row 0 attends only to key 0: perturbing keys 1 and 2 changes nothing.
        let mut other = base_kv.clone();
        for v in other[4..].iter_mut() {
            *v += 10.0;
        }
        let perturbed = run(other);
        assert_eq!(&base[..4], &perturbed[..4]);
        assert_ne!(&base[4..], &perturbed[4..]);
    }

    #[test]
    fn mask_rejects_fully_blocked_row() {
        let allow = vec![true, false, false, false];
        assert!(matches!(AttentionMask::new(2, 2, allow), Err(Error::Domain(_))));
    }

    #[test]
    fn knn_lists_respect_groups() {
        let coords: Vec<Point> = vec![
            [0.0, 0.0, 0.0],
            [0.1, 0.0, 0.0],
            [0.05, 0.0, 0.0],
            [0.06, 0.0, 0.0],
        ];
        let groups = [0usize, 0, 1, 1];
        let lists = knn_lists(&coords, Some(&groups), 2);
        assert_eq!(lists[0], vec![0, 1]);
        assert_eq!(lists[2], vec![2, 3]);
        assert!(lists[0].iter().all(|&j| groups[j] == 0));
        assert!(lists[3].iter().all(|&j| groups[j] == 1));
    }

    fn random_coords(rng: &mut ChaCha8Rng, n: usize) -> Vec<Point> {
        (0..n)
            .map(|_| {
                [
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                ]
            })
            .collect()
    }

    #[test]
    fn geometry_block_reacts_to_coordinates_attention_does_not() {
        let cfg = BlockConfig { width: 8, heads: 2, ffn_hidden: 16, k_geo: 2 };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let block = EncoderBlock::new(&mut store, &mut rng, "b", &cfg, true).unwrap();
        let plain = EncoderBlock::new(&mut store, &mut rng, "p", &cfg, false).unwrap();
        let feats = rand_feats(&mut rng, 6, 8);
        let coords = random_coords(&mut rng, 6);
        let mut moved = coords.clone();
        moved[0] = [25.0, 25.0, 25.0]; // changes every point's neighborhood candidates

        let run = |b: &EncoderBlock, cs: &[Point]| {
            let mut g = Graph::new();
            let f = g.constant(feats.clone(), vec![6, 8]).unwrap();
            let state = SeqState { coords: cs.to_vec(), feats: f };
            let out = b.forward(&mut g, &store, &state, &cfg).unwrap();
            g.value(out).to_vec()
        };
        assert_ne!(run(&block, &coords), run(&block, &moved));
        assert_eq!(run(&plain, &coords), run(&plain, &moved));
    }

    #[test]
    fn encoder_depth_zero_is_identity() {
        let cfg = cfg1();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let enc = Encoder::new(&mut store, &mut rng, &cfg, 0).unwrap();
        let mut g = Graph::new();
        let feats = g.constant(rand_feats(&mut rng, 5, 4), vec![5, 4]).unwrap();
        let coords = random_coords(&mut rng, 5);
        let out = enc.forward(&mut g, &store, &coords, feats, &cfg).unwrap();
        assert_eq!(g.value(out), g.value(feats));
    }

    #[test]
    fn encoder_preserves_row_count() {
        let cfg = BlockConfig { width: 8, heads: 2, ffn_hidden: 16, k_geo: 3 };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let enc = Encoder::new(&mut store, &mut rng, &cfg, 2).unwrap();
        let mut g = Graph::new();
        let feats = g.constant(rand_feats(&mut rng, 9, 8), vec![9, 8]).unwrap();
        let coords = random_coords(&mut rng, 9);
        let out = enc.forward(&mut g, &store, &coords, feats, &cfg).unwrap();
        assert_eq!(g.shape(out), &[9, 8]);
    }

    #[test]
    fn encoder_is_permutation_equivariant() {
        let cfg = BlockConfig { width: 8, heads: 2, ffn_hidden: 16, k_geo: 3 };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let enc = Encoder::new(&mut store, &mut rng, &cfg, 2).unwrap();
        for trial in 0..5 {
            let mut trial_rng = ChaCha8Rng::seed_from_u64(100 + trial);
            let n = 7;
            let feats = rand_feats(&mut trial_rng, n, 8);
            let coords = random_coords(&mut trial_rng, n);
            let mut perm: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                perm.swap(i, trial_rng.gen_range(0..=i));
            }
            let run = |f: &[f64], c: &[Point]| {
                let mut g = Graph::new();
                let feats = g.constant(f.to_vec(), vec![n, 8]).unwrap();
                let out = enc.forward(&mut g, &store, c, feats, &cfg).unwrap();
                g.value(out).to_vec()
            };
            let base = run(&feats, &coords);
            let feats_p: Vec<f64> = perm.iter().flat_map(|&i| feats[i * 8..(i + 1) * 8].to_vec()).collect();
            let coords_p: Vec<Point> = perm.iter().map(|&i| coords[i]).collect();
            let permuted = run(&feats_p, &coords_p);
            for (r, &src) in perm.iter().enumerate() {
                for c in 0..8 {
                    let a = base[src * 8 + c];
                    let b = permuted[r * 8 + c];
                    assert!((a - b).abs() < 1e-5, "row {r} col {c}: {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn decoder_single_query_single_memory() {
        let cfg = cfg1();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let dec = Decoder::new(&mut store, &mut rng, &cfg, 1).unwrap();
        let mut g = Graph::new();
        let qf = g.constant(rand_feats(&mut rng, 1, 4), vec![1, 4]).unwrap();
        let mem = g.constant(rand_feats(&mut rng, 1, 4), vec![1, 4]).unwrap();
        let out = dec
            .forward(&mut g, &store, &[[0.0, 0.0, 0.0]], None, qf, mem, None, &cfg)
            .unwrap();
        assert_eq!(g.shape(out), &[1, 4]);
        assert!(g.value(out).iter().all(|v| v.is_finite()));
    }

    /// Appending masked-off noised queries must not move normal-query outputs.
    #[test]
    fn decoder_masked_group_is_isolated() {
        let cfg = BlockConfig { width: 8, heads: 2, ffn_hidden: 16, k_geo: 2 };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let dec = Decoder::new(&mut store, &mut rng, &cfg, 2).unwrap();
        let n_normal = 4;
        let n_noise = 3;
        let total = n_normal + n_noise;
        let normal_feats = rand_feats(&mut rng, n_normal, 8);
        let noise_feats = rand_feats(&mut rng, n_noise, 8);
        let normal_coords = random_coords(&mut rng, n_normal);
        let noise_coords = random_coords(&mut rng, n_noise);
        let mem_feats = rand_feats(&mut rng, 5, 8);
        let mem_coords = random_coords(&mut rng, 5);
        let _ = mem_coords;

        // Two-group mask: block both directions between normal and noise.
        let mut allow = vec![true; total * total];
        for i in 0..total {
            for j in 0..total {
                let gi = i >= n_normal;
                let gj = j >= n_normal;
                if gi != gj {
                    allow[i * total + j] = false;
                }
            }
        }
        let mask = AttentionMask::new(total, total, allow).unwrap();
        let groups: Vec<usize> = (0..total).map(|i| usize::from(i >= n_normal)).collect();

        let with_noise = {
            let mut g = Graph::new();
            let mut feats = normal_feats.clone();
            feats.extend_from_slice(&noise_feats);
            let f = g.constant(feats, vec![total, 8]).unwrap();
            let mem = g.constant(mem_feats.clone(), vec![5, 8]).unwrap();
            let mut coords = normal_coords.clone();
            coords.extend_from_slice(&noise_coords);
            let out = dec
                .forward(&mut g, &store, &coords, Some(&groups), f, mem, Some(&mask), &cfg)
                .unwrap();
            g.value(out)[..n_normal * 8].to_vec()
        };
        let without_noise = {
            let mut g = Graph::new();
            let f = g.constant(normal_feats.clone(), vec![n_normal, 8]).unwrap();
            let mem = g.constant(mem_feats.clone(), vec![5, 8]).unwrap();
            let out = dec
                .forward(&mut g, &store, &normal_coords, None, f, mem, None, &cfg)
                .unwrap();
            g.value(out).to_vec()
        };
        for (a, b) in with_noise.iter().zip(without_noise.iter()) {
            assert!((a - b).abs() <= 1e-6, "isolation violated: {a} vs {b}");
        }
    }

    /// Gradients through a small encode–decode pipeline match finite differences.
    #[test]
    fn encode_decode_gradcheck() {
        let cfg = BlockConfig { width: 4, heads: 2, ffn_hidden: 8, k_geo: 2 };
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let enc = Encoder::new(&mut store, &mut rng, &cfg, 1).unwrap();
        let dec = Decoder::new(&mut store, &mut rng, &cfg, 1).unwrap();
        let n = 5;
        let m = 3;
        let feats = rand_feats(&mut rng, n, 4);
        let qfeats = rand_feats(&mut rng, m, 4);
        let coords = random_coords(&mut rng, n);
        let qcoords = random_coords(&mut rng, m);

        let loss_of = |store: &ParamStore<f64>| -> f64 {
            let mut g = Graph::new();
            let f = g.constant(feats.clone(), vec![n, 4]).unwrap();
            let qf = g.constant(qfeats.clone(), vec![m, 4]).unwrap();
            let mem = enc.forward(&mut g, store, &coords, f, &cfg).unwrap();
            let out = dec
                .forward(&mut g, store, &qcoords, None, qf, mem, None, &cfg)
                .unwrap();
            let sq = g.mul(out, out).unwrap();
            let loss = g.sum(sq, None).unwrap();
            g.value(loss)[0]
        };

        // Analytic gradients.
        let mut g = Graph::new();
        let f = g.constant(feats.clone(), vec![n, 4]).unwrap();
        let qf = g.constant(qfeats.clone(), vec![m, 4]).unwrap();
        let mem = enc.forward(&mut g, &store, &coords, f, &cfg).unwrap();
        let out = dec
            .forward(&mut g, &store, &qcoords, None, qf, mem, None, &cfg)
            .unwrap();
        let sq = g.mul(out, out).unwrap();
        let loss = g.sum(sq, None).unwrap();
        g.backward(loss).unwrap();
        store.accumulate_grads(&g);

        let report = crate::gradcheck::check_gradients(&mut store, |s| loss_of(s), 1e-5, 1e-4);
        assert!(report.passed, "{report:?}");
    }
}
