//! Point-cloud container and non-differentiable geometric kernels.
//!
//! All kernels are pure functions over immutable clouds and break distance
//! ties by lowest index, so results are identical across platforms and runs.

use crate::error::{Error, Result};
use std::io::Write;
use std::path::Path;

pub type Point = [f64; 3];

/// Finite sequence of 3D coordinates. Non-empty, all coordinates finite.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    points: Vec<Point>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Domain("point cloud must be non-empty".into()));
        }
        if let Some(p) = points.iter().find(|p| p.iter().any(|c| !c.is_finite())) {
            return Err(Error::Domain(format!("non-finite coordinate {p:?}")));
        }
        Ok(PointCloud { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        false // by construction
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn get(&self, i: usize) -> Point {
        self.points[i]
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Point> {
        self.points.iter()
    }

    /// Select a subset by index. Indices must be in range; duplicates allowed.
    pub fn select(&self, indices: &[usize]) -> Result<PointCloud> {
        let mut pts = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.points.len() {
                return Err(Error::Domain(format!(
                    "index {i} out of range for cloud of {} points",
                    self.points.len()
                )));
            }
            pts.push(self.points[i]);
        }
        PointCloud::new(pts)
    }

    pub fn centroid(&self) -> Point {
        let mut c = [0.0; 3];
        for p in &self.points {
            for a in 0..3 {
                c[a] += p[a];
            }
        }
        let n = self.points.len() as f64;
        [c[0] / n, c[1] / n, c[2] / n]
    }

    /// Axis-aligned bounding box `(min, max)`.
    pub fn bounding_box(&self) -> (Point, Point) {
        let mut lo = self.points[0];
        let mut hi = self.points[0];
        for p in &self.points {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        (lo, hi)
    }

    /// Bounding-box diagonal length.
    pub fn bbox_diagonal(&self) -> f64 {
        let (lo, hi) = self.bounding_box();
        dist(&lo, &hi)
    }

    // ---- XYZ text format -----------------------------------------------

    /// Parse the XYZ text format: one point per line, three decimal floats
    /// separated by single spaces; `#`-prefixed comment lines are ignored.
    pub fn parse_xyz(text: &str) -> Result<Self> {
        let mut points = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim_end_matches('\r');
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut coords = [0.0f64; 3];
            let mut fields = line.split(' ').filter(|f| !f.is_empty());
            for c in coords.iter_mut() {
                let field = fields.next().ok_or(Error::Parse {
                    line: lineno + 1,
                    message: "expected three coordinates".into(),
                })?;
                *c = field.parse::<f64>().map_err(|_| Error::Parse {
                    line: lineno + 1,
                    message: format!("invalid float {field:?}"),
                })?;
                if !c.is_finite() {
                    return Err(Error::Parse {
                        line: lineno + 1,
                        message: format!("non-finite coordinate {field:?}"),
                    });
                }
            }
            if fields.next().is_some() {
                return Err(Error::Parse {
                    line: lineno + 1,
                    message: "more than three coordinates".into(),
                });
            }
            points.push(coords);
        }
        if points.is_empty() {
            return Err(Error::Parse {
                line: 0,
                message: "no points in input".into(),
            });
        }
        PointCloud::new(points)
    }

    pub fn to_xyz_string(&self) -> String {
        let mut s = String::with_capacity(self.points.len() * 24);
        for p in &self.points {
            s.push_str(&format!("{:?} {:?} {:?}\n", p[0], p[1], p[2]));
        }
        s
    }

    pub fn read_xyz(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse_xyz(&text)
    }

    pub fn write_xyz(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_xyz_string().as_bytes())?;
        Ok(())
    }
}

pub fn dist2(a: &Point, b: &Point) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

pub fn dist(a: &Point, b: &Point) -> f64 {
    dist2(a, b).sqrt()
}

/// Neighbor matrix produced by [`knn`]: `queries x k` indices into the
/// reference cloud, each row sorted ascending by distance with ties broken
/// by index.
#[derive(Clone, Debug, PartialEq)]
pub struct NeighborIndex {
    k: usize,
    queries: usize,
    indices: Vec<usize>,
}

impl NeighborIndex {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn queries(&self) -> usize {
        self.queries
    }

    pub fn row(&self, q: usize) -> &[usize] {
        &self.indices[q * self.k..(q + 1) * self.k]
    }
}

/// Farthest point sampling: greedy max-min subset selection of `m` indices,
/// starting at `start`. Ties break to the lowest index.
pub fn fps(cloud: &PointCloud, m: usize, start: usize) -> Result<Vec<usize>> {
    let n = cloud.len();
    if m == 0 || m > n {
        return Err(Error::Domain(format!("fps: m = {m} out of range 1..={n}")));
    }
    if start >= n {
        return Err(Error::Domain(format!("fps: start index {start} out of range")));
    }
    let pts = cloud.points();
    let mut selected = Vec::with_capacity(m);
    let mut min_d2 = vec![f64::INFINITY; n];
    let mut current = start;
    selected.push(current);
    min_d2[current] = f64::NEG_INFINITY; // selected points are never re-picked
    for _ in 1..m {
        let cp = pts[current];
        let mut best = f64::NEG_INFINITY;
        let mut best_i = 0usize;
        for i in 0..n {
            let d = dist2(&pts[i], &cp);
            if d < min_d2[i] {
                min_d2[i] = d;
            }
            if min_d2[i] > best {
                best = min_d2[i];
                best_i = i;
            }
        }
        current = best_i;
        selected.push(current);
        min_d2[current] = f64::NEG_INFINITY;
    }
    Ok(selected)
}

/// Uniform-grid nearest-neighbor index over a fixed reference cloud.
///
/// Cell edge is `diameter / cbrt(count)`; clouds below [`GRID_MIN_POINTS`]
/// points (or with zero extent) use brute force. Queries are exact: results
/// equal the O(N^2) scan, including tie order.
pub struct NnIndex<'a> {
    points: &'a [Point],
    grid: Option<Grid>,
}

pub const GRID_MIN_POINTS: usize = 64;

struct Grid {
    origin: Point,
    cell: f64,
    dims: [usize; 3],
    /// CSR layout: `starts[c]..starts[c+1]` indexes into `ids`.
    starts: Vec<usize>,
    ids: Vec<usize>,
}

impl Grid {
    fn cell_of(&self, p: &Point) -> [usize; 3] {
        let mut c = [0usize; 3];
        for a in 0..3 {
            let f = ((p[a] - self.origin[a]) / self.cell).floor();
            c[a] = (f.max(0.0) as usize).min(self.dims[a] - 1);
        }
        c
    }

    fn flat(&self, c: [usize; 3]) -> usize {
        (c[0] * self.dims[1] + c[1]) * self.dims[2] + c[2]
    }
}

impl<'a> NnIndex<'a> {
    pub fn build(points: &'a [Point]) -> Self {
        let n = points.len();
        if n < GRID_MIN_POINTS {
            return NnIndex { points, grid: None };
        }
        let mut lo = points[0];
        let mut hi = points[0];
        for p in points {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let diameter = dist(&lo, &hi);
        if diameter <= 0.0 {
            return NnIndex { points, grid: None };
        }
        let cell = diameter / (n as f64).cbrt();
        let mut dims = [0usize; 3];
        for a in 0..3 {
            dims[a] = (((hi[a] - lo[a]) / cell).floor() as usize + 1).max(1);
        }
        let ncells = dims[0] * dims[1] * dims[2];
        let mut grid = Grid {
            origin: lo,
            cell,
            dims,
            starts: vec![0; ncells + 1],
            ids: vec![0; n],
        };
        let mut counts = vec![0usize; ncells];
        let cells: Vec<usize> = points.iter().map(|p| grid.flat(grid.cell_of(p))).collect();
        for &c in &cells {
            counts[c] += 1;
        }
        for c in 0..ncells {
            grid.starts[c + 1] = grid.starts[c] + counts[c];
        }
        let mut cursor = grid.starts.clone();
        for (i, &c) in cells.iter().enumerate() {
            grid.ids[cursor[c]] = i;
            cursor[c] += 1;
        }
        NnIndex { points, grid: Some(grid) }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Index and squared distance of the nearest reference point.
    pub fn nearest(&self, q: &Point) -> (usize, f64) {
        let mut out = [(0usize, 0.0f64)];
        self.knn_into(q, 1, &mut out);
        out[0]
    }

    /// The `k` nearest reference points, ascending by distance, ties by index.
    pub fn knn(&self, q: &Point, k: usize) -> Result<Vec<(usize, f64)>> {
        if k == 0 || k > self.points.len() {
            return Err(Error::Domain(format!(
                "knn: k = {k} out of range 1..={}",
                self.points.len()
            )));
        }
        let mut out = vec![(0usize, 0.0f64); k];
        self.knn_into(q, k, &mut out);
        Ok(out)
    }

    fn knn_into(&self, q: &Point, k: usize, out: &mut [(usize, f64)]) {
        match &self.grid {
            None => {
                let mut all: Vec<(usize, f64)> = self
                    .points
                    .iter()
                    .enumerate()
                    .map(|(i, p)| (i, dist2(q, p)))
                    .collect();
                select_k(&mut all, k);
                out.copy_from_slice(&all[..k]);
            }
            Some(grid) => {
                let qc = grid.cell_of(q);
                let mut candidates: Vec<(usize, f64)> = Vec::with_capacity(k * 4);
                let max_shell = grid.dims.iter().max().copied().unwrap_or(1);
                let mut shell = 0usize;
                loop {
                    self.collect_shell(grid, qc, shell, q, &mut candidates);
                    // Any point in shells > `shell` is at least this far away.
                    let lower_bound = shell as f64 * grid.cell;
                    if candidates.len() >= k {
                        let mut sorted = candidates.clone();
                        select_k(&mut sorted, k);
                        let kth = sorted[k - 1].1;
                        if kth <= lower_bound * lower_bound {
                            out.copy_from_slice(&sorted[..k]);
                            return;
                        }
                    }
                    shell += 1;
                    if shell > max_shell {
                        let mut sorted = candidates;
                        select_k(&mut sorted, k);
                        out.copy_from_slice(&sorted[..k]);
                        return;
                    }
                }
            }
        }
    }

    /// Append points from all cells at Chebyshev cell-distance `shell`.
    fn collect_shell(&self, grid: &Grid, qc: [usize; 3], shell: usize, q: &Point, acc: &mut Vec<(usize, f64)>) {
        let s = shell as isize;
        let range = |c: usize, dim: usize| -> (isize, isize) {
            let c = c as isize;
            ((c - s).max(0), (c + s).min(dim as isize - 1))
        };
        let (x0, x1) = range(qc[0], grid.dims[0]);
        let (y0, y1) = range(qc[1], grid.dims[1]);
        let (z0, z1) = range(qc[2], grid.dims[2]);
        for x in x0..=x1 {
            for y in y0..=y1 {
                for z in z0..=z1 {
                    let cheb = (x - qc[0] as isize)
                        .abs()
                        .max((y - qc[1] as isize).abs())
                        .max((z - qc[2] as isize).abs());
                    if cheb != s {
                        continue;
                    }
                    let flat = grid.flat([x as usize, y as usize, z as usize]);
                    for &i in &grid.ids[grid.starts[flat]..grid.starts[flat + 1]] {
                        acc.push((i, dist2(q, &self.points[i])));
                    }
                }
            }
        }
    }
}

/// Order candidates ascending by `(distance, index)` so the first `k` are the
/// k nearest with deterministic tie handling.
fn select_k(candidates: &mut [(usize, f64)], k: usize) {
    candidates.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
    debug_assert!(candidates.len() >= k);
}

/// Exact k-nearest-neighbor search of each query point against `reference`.
pub fn knn(reference: &PointCloud, queries: &PointCloud, k: usize) -> Result<NeighborIndex> {
    if k == 0 || k > reference.len() {
        return Err(Error::Domain(format!(
            "knn: k = {k} out of range 1..={}",
            reference.len()
        )));
    }
    let index = NnIndex::build(reference.points());
    let mut indices = Vec::with_capacity(queries.len() * k);
    for q in queries.iter() {
        let found = index.knn(q, k)?;
        indices.extend(found.iter().map(|&(i, _)| i));
    }
    Ok(NeighborIndex {
        k,
        queries: queries.len(),
        indices,
    })
}

/// Brute-force reference for [`knn`]. Test oracle; exported for the
/// acceptance suite.
pub fn knn_brute_force(reference: &PointCloud, queries: &PointCloud, k: usize) -> Result<NeighborIndex> {
    if k == 0 || k > reference.len() {
        return Err(Error::Domain(format!(
            "knn: k = {k} out of range 1..={}",
            reference.len()
        )));
    }
    let mut indices = Vec::with_capacity(queries.len() * k);
    for q in queries.iter() {
        let mut all: Vec<(usize, f64)> = reference
            .iter()
            .enumerate()
            .map(|(i, p)| (i, dist2(q, p)))
            .collect();
        select_k(&mut all, k);
        indices.extend(all[..k].iter().map(|&(i, _)| i));
    }
    Ok(NeighborIndex {
        k,
        queries: queries.len(),
        indices,
    })
}

/// Inverse transform parameters returned by [`normalize`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormalizeParams {
    pub centroid: Point,
    pub scale: f64,
}

/// Center the cloud on its centroid and scale so the farthest point sits at
/// norm 1. Returns the normalized cloud and the inverse-transform parameters.
pub fn normalize(cloud: &PointCloud) -> Result<(PointCloud, NormalizeParams)> {
    let c = cloud.centroid();
    let mut scale = 0.0f64;
    for p in cloud.iter() {
        scale = scale.max(dist(p, &c));
    }
    if scale <= 0.0 {
        return Err(Error::DegenerateInput("all points identical; cannot normalize".into()));
    }
    let pts = cloud
        .iter()
        .map(|p| {
            [
                (p[0] - c[0]) / scale,
                (p[1] - c[1]) / scale,
                (p[2] - c[2]) / scale,
            ]
        })
        .collect();
    Ok((PointCloud::new(pts)?, NormalizeParams { centroid: c, scale }))
}

/// Undo [`normalize`].
pub fn denormalize(cloud: &PointCloud, params: NormalizeParams) -> PointCloud {
    let pts = cloud
        .iter()
        .map(|p| {
            [
                p[0] * params.scale + params.centroid[0],
                p[1] * params.scale + params.centroid[1],
                p[2] * params.scale + params.centroid[2],
            ]
        })
        .collect();
    PointCloud::new(pts).expect("denormalize preserves validity")
}
