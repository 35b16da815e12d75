//! Voxel lattices, their neighbor graphs, and graph difference operators.
//!
//! A [`VoxelGrid`] assigns each masked voxel a feature index. [`build_graph`]
//! turns it into a [`LatticeGraph`] under face (6) or Moore (26) adjacency,
//! [`split_subgraphs`] partitions the edges by the sign of the voxel z-scores,
//! and [`stacked_operator`] materializes the weighted incidence matrix used by
//! the smoothing penalty.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::fdrhs::HsParams;

pub type Coord = [usize; 3];

/// Voxel adjacency used to build the lattice graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Connectivity {
    /// Voxels sharing a face.
    #[default]
    Face6,
    /// Voxels within the surrounding 3x3x3 block.
    Moore26,
}

impl Connectivity {
    /// Neighbor offsets that are lexicographically positive, so that every
    /// unordered pair is visited once.
    fn forward_offsets(self) -> Vec<[i64; 3]> {
        match self {
            Connectivity::Face6 => vec![[1, 0, 0], [0, 1, 0], [0, 0, 1]],
            Connectivity::Moore26 => {
                let mut out = Vec::with_capacity(13);
                for di in -1i64..=1 {
                    for dj in -1i64..=1 {
                        for dk in -1i64..=1 {
                            if [di, dj, dk] > [0, 0, 0] {
                                out.push([di, dj, dk]);
                            }
                        }
                    }
                }
                out
            }
        }
    }
}

impl fmt::Display for Connectivity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Connectivity::Face6 => f.write_str("face6"),
            Connectivity::Moore26 => f.write_str("moore26"),
        }
    }
}

impl FromStr for Connectivity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "face6" | "face-6" | "6" => Ok(Connectivity::Face6),
            "moore26" | "moore-26" | "26" => Ok(Connectivity::Moore26),
            other => Err(Error::InvalidParameter(format!(
                "unknown connectivity {other:?} (expected face6 or moore26)"
            ))),
        }
    }
}

/// Masked voxels of a 3D box, each carrying a feature index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VoxelGrid {
    dims: [usize; 3],
    coords: Vec<Coord>,
    lookup: HashMap<Coord, usize>,
}

impl VoxelGrid {
    /// Builds a grid whose feature index `i` is `coords[i]`.
    pub fn from_coords(dims: [usize; 3], coords: Vec<Coord>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidGrid(format!(
                "dims must be positive, got {dims:?}"
            )));
        }
        let mut lookup = HashMap::with_capacity(coords.len());
        for (idx, c) in coords.iter().enumerate() {
            if (0..3).any(|a| c[a] >= dims[a]) {
                return Err(Error::InvalidGrid(format!(
                    "voxel {c:?} lies outside dims {dims:?}"
                )));
            }
            if lookup.insert(*c, idx).is_some() {
                return Err(Error::InvalidGrid(format!("duplicate voxel {c:?}")));
            }
        }
        Ok(Self {
            dims,
            coords,
            lookup,
        })
    }

    /// Builds a grid from an unordered mask; indices follow lexicographic
    /// coordinate order.
    pub fn from_mask(dims: [usize; 3], mut mask: Vec<Coord>) -> Result<Self> {
        mask.sort_unstable();
        Self::from_coords(dims, mask)
    }

    /// Every voxel of the box is masked.
    pub fn full(dims: [usize; 3]) -> Result<Self> {
        let mut coords = Vec::with_capacity(dims.iter().product());
        for i in 0..dims[0] {
            for j in 0..dims[1] {
                for k in 0..dims[2] {
                    coords.push([i, j, k]);
                }
            }
        }
        Self::from_coords(dims, coords)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    /// Number of masked voxels (features).
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coords(&self) -> &[Coord] {
        &self.coords
    }

    pub fn coord(&self, index: usize) -> Coord {
        self.coords[index]
    }

    pub fn index_of(&self, coord: Coord) -> Option<usize> {
        self.lookup.get(&coord).copied()
    }

    fn neighbor(&self, c: Coord, offset: [i64; 3]) -> Option<usize> {
        let mut n = [0usize; 3];
        for a in 0..3 {
            let v = c[a] as i64 + offset[a];
            if v < 0 || v >= self.dims[a] as i64 {
                return None;
            }
            n[a] = v as usize;
        }
        self.index_of(n)
    }
}

/// Undirected neighbor graph over feature indices `0..n_vertices`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatticeGraph {
    n_vertices: usize,
    edges: Vec<(usize, usize)>,
    connectivity: Connectivity,
}

impl LatticeGraph {
    /// Builds a graph from an explicit edge list. Pairs are normalized to
    /// `(min, max)` and sorted; self-loops and duplicates are rejected.
    pub fn from_edges(
        n_vertices: usize,
        edges: impl IntoIterator<Item = (usize, usize)>,
        connectivity: Connectivity,
    ) -> Result<Self> {
        let mut edges: Vec<(usize, usize)> = edges
            .into_iter()
            .map(|(a, b)| (a.min(b), a.max(b)))
            .collect();
        edges.sort_unstable();
        for w in edges.windows(2) {
            if w[0] == w[1] {
                return Err(Error::InvalidGrid(format!("duplicate edge {:?}", w[0])));
            }
        }
        for &(a, b) in &edges {
            if a == b {
                return Err(Error::InvalidGrid(format!("self-loop at {a}")));
            }
            if b >= n_vertices {
                return Err(Error::InvalidGrid(format!(
                    "edge endpoint {b} out of range for {n_vertices} vertices"
                )));
            }
        }
        Ok(Self {
            n_vertices,
            edges,
            connectivity,
        })
    }

    /// A path `0 - 1 - ... - (n-1)`.
    pub fn chain(n: usize) -> Self {
        Self {
            n_vertices: n,
            edges: (1..n).map(|i| (i - 1, i)).collect(),
            connectivity: Connectivity::Face6,
        }
    }

    pub fn n_vertices(&self) -> usize {
        self.n_vertices
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn connectivity(&self) -> Connectivity {
        self.connectivity
    }

    /// Connected component label per vertex, labels in order of first vertex.
    pub fn components(&self) -> Vec<usize> {
        let adj = self.adjacency();
        let mut label = vec![usize::MAX; self.n_vertices];
        let mut next = 0;
        let mut stack = Vec::new();
        for start in 0..self.n_vertices {
            if label[start] != usize::MAX {
                continue;
            }
            label[start] = next;
            stack.push(start);
            while let Some(v) = stack.pop() {
                for &u in &adj[v] {
                    if label[u] == usize::MAX {
                        label[u] = next;
                        stack.push(u);
                    }
                }
            }
            next += 1;
        }
        label
    }

    pub fn is_connected(&self) -> bool {
        self.n_vertices == 0 || self.components().iter().all(|&c| c == 0)
    }

    pub fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.n_vertices];
        for &(a, b) in &self.edges {
            adj[a].push(b);
            adj[b].push(a);
        }
        adj
    }
}

/// Returns every neighbor pair among the masked voxels, sorted
/// lexicographically by `(min index, max index)`.
pub fn build_graph(grid: &VoxelGrid, connectivity: Connectivity) -> Result<LatticeGraph> {
    if grid.is_empty() {
        return Err(Error::EmptyGrid);
    }
    let offsets = connectivity.forward_offsets();
    let mut edges = Vec::with_capacity(grid.len() * offsets.len() / 2);
    for (a, &c) in grid.coords().iter().enumerate() {
        for &off in &offsets {
            if let Some(b) = grid.neighbor(c, off) {
                edges.push((a.min(b), a.max(b)));
            }
        }
    }
    edges.sort_unstable();
    Ok(LatticeGraph {
        n_vertices: grid.len(),
        edges,
        connectivity,
    })
}

/// Partition of vertices by z-sign and of edges into within-nonpositive,
/// within-positive and bridging sets.
#[derive(Debug, Clone, PartialEq)]
pub struct SubgraphSplit {
    /// Vertices with `z <= 0`.
    pub v1: Vec<usize>,
    /// Vertices with `z > 0`.
    pub v2: Vec<usize>,
    pub e1: Vec<(usize, usize)>,
    pub e2: Vec<(usize, usize)>,
    pub e3: Vec<(usize, usize)>,
    n_vertices: usize,
}

impl SubgraphSplit {
    pub fn n_vertices(&self) -> usize {
        self.n_vertices
    }
}

pub fn split_subgraphs(graph: &LatticeGraph, z: &[f64]) -> Result<SubgraphSplit> {
    if z.len() != graph.n_vertices() {
        return Err(Error::Dimension {
            context: "split_subgraphs z",
            expected: graph.n_vertices(),
            actual: z.len(),
        });
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("z-scores"));
    }
    let positive: Vec<bool> = z.iter().map(|&v| v > 0.0).collect();
    let (v2, v1): (Vec<usize>, Vec<usize>) = (0..z.len()).partition(|&i| positive[i]);
    let mut e1 = Vec::new();
    let mut e2 = Vec::new();
    let mut e3 = Vec::new();
    for &(a, b) in graph.edges() {
        match (positive[a], positive[b]) {
            (false, false) => e1.push((a, b)),
            (true, true) => e2.push((a, b)),
            _ => e3.push((a, b)),
        }
    }
    Ok(SubgraphSplit {
        v1,
        v2,
        e1,
        e2,
        e3,
        n_vertices: z.len(),
    })
}

/// Sparse weighted incidence matrix: row `r` maps `beta` to
/// `weights[r] * (beta[rows[r].0] - beta[rows[r].1])`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffOperator {
    n_cols: usize,
    rows: Vec<(usize, usize)>,
    weights: Vec<f64>,
}

impl DiffOperator {
    pub fn new(n_cols: usize, rows: Vec<(usize, usize)>, weights: Vec<f64>) -> Result<Self> {
        if rows.len() != weights.len() {
            return Err(Error::Dimension {
                context: "DiffOperator weights",
                expected: rows.len(),
                actual: weights.len(),
            });
        }
        for &(a, b) in &rows {
            if a == b || a >= n_cols || b >= n_cols {
                return Err(Error::InvalidGrid(format!(
                    "invalid operator row ({a}, {b}) for {n_cols} columns"
                )));
            }
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::NonFinite("operator row weights"));
        }
        Ok(Self {
            n_cols,
            rows,
            weights,
        })
    }

    /// Unweighted incidence of a graph's edges.
    pub fn incidence(graph: &LatticeGraph) -> Self {
        Self {
            n_cols: graph.n_vertices(),
            rows: graph.edges().to_vec(),
            weights: vec![1.0; graph.edges().len()],
        }
    }

    /// Operator with no rows.
    pub fn empty(n_cols: usize) -> Self {
        Self {
            n_cols,
            rows: Vec::new(),
            weights: Vec::new(),
        }
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn rows(&self) -> &[(usize, usize)] {
        &self.rows
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// `out = D x`.
    pub fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.n_cols);
        debug_assert_eq!(out.len(), self.rows.len());
        for ((o, &(a, b)), &w) in out.iter_mut().zip(&self.rows).zip(&self.weights) {
            *o = w * (x[a] - x[b]);
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.rows.len()];
        self.apply_into(x, &mut out);
        out
    }

    /// `out = D^T y`.
    pub fn apply_transpose_into(&self, y: &[f64], out: &mut [f64]) {
        debug_assert_eq!(y.len(), self.rows.len());
        debug_assert_eq!(out.len(), self.n_cols);
        out.iter_mut().for_each(|o| *o = 0.0);
        for ((&v, &(a, b)), &w) in y.iter().zip(&self.rows).zip(&self.weights) {
            out[a] += w * v;
            out[b] -= w * v;
        }
    }

    pub fn apply_transpose(&self, y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_cols];
        self.apply_transpose_into(y, &mut out);
        out
    }

    /// `||D x||_1`.
    pub fn l1_norm(&self, x: &[f64]) -> f64 {
        self.rows
            .iter()
            .zip(&self.weights)
            .map(|(&(a, b), &w)| (w * (x[a] - x[b])).abs())
            .sum()
    }

    /// Returns a copy with rows reordered so that new row `r` is old row
    /// `order[r]`.
    pub fn permute_rows(&self, order: &[usize]) -> Self {
        Self {
            n_cols: self.n_cols,
            rows: order.iter().map(|&r| self.rows[r]).collect(),
            weights: order.iter().map(|&r| self.weights[r]).collect(),
        }
    }
}

/// Stacks the three subgraph incidences with weights relative to
/// `lambda_pro`: rows of `e1` get 1, `e2` get `lambda_les / lambda_pro`,
/// `e3` get `lambda_proles / lambda_pro`.
pub fn stacked_operator(split: &SubgraphSplit, params: &HsParams) -> Result<DiffOperator> {
    if !(params.lambda_pro > 0.0) {
        return Err(Error::UndefinedWeightRatio);
    }
    let w2 = params.lambda_les / params.lambda_pro;
    let w3 = params.lambda_proles / params.lambda_pro;
    let n_rows = split.e1.len() + split.e2.len() + split.e3.len();
    let mut rows = Vec::with_capacity(n_rows);
    let mut weights = Vec::with_capacity(n_rows);
    for (edges, w) in [(&split.e1, 1.0), (&split.e2, w2), (&split.e3, w3)] {
        rows.extend_from_slice(edges);
        weights.extend(std::iter::repeat_n(w, edges.len()));
    }
    DiffOperator::new(split.n_vertices, rows, weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    /// Brute-force neighbor enumeration over all voxel pairs.
    fn brute_force_edges(grid: &VoxelGrid, conn: Connectivity) -> BTreeSet<(usize, usize)> {
        let mut out = BTreeSet::new();
        let n = grid.len();
        for a in 0..n {
            for b in (a + 1)..n {
                let (ca, cb) = (grid.coord(a), grid.coord(b));
                let diffs: Vec<usize> = (0..3).map(|x| ca[x].abs_diff(cb[x])).collect();
                let adjacent = match conn {
                    Connectivity::Face6 => diffs.iter().sum::<usize>() == 1,
                    Connectivity::Moore26 => diffs.iter().all(|&d| d <= 1),
                };
                if adjacent {
                    out.insert((a, b));
                }
            }
        }
        out
    }

    #[test]
    fn single_voxel_has_no_edges() {
        let grid = VoxelGrid::from_mask([3, 3, 3], vec![[1, 1, 1]]).unwrap();
        let g = build_graph(&grid, Connectivity::Face6).unwrap();
        assert!(g.edges().is_empty());
    }

    #[test]
    fn full_cube_edge_counts() {
        let grid = VoxelGrid::full([2, 2, 2]).unwrap();
        assert_eq!(brute_force_edges(&grid, Connectivity::Face6).len(), 12);
        assert_eq!(brute_force_edges(&grid, Connectivity::Moore26).len(), 28);
        assert_eq!(build_graph(&grid, Connectivity::Face6).unwrap().edges().len(), 12);
        assert_eq!(build_graph(&grid, Connectivity::Moore26).unwrap().edges().len(), 28);
    }

    #[test]
    fn empty_mask_is_an_error() {
        let grid = VoxelGrid::from_mask([2, 2, 2], vec![]).unwrap();
        assert!(matches!(
            build_graph(&grid, Connectivity::Face6),
            Err(Error::EmptyGrid)
        ));
    }

    #[test]
    fn out_of_bounds_and_duplicate_voxels_rejected() {
        assert!(VoxelGrid::from_mask([2, 2, 2], vec![[2, 0, 0]]).is_err());
        assert!(VoxelGrid::from_mask([2, 2, 2], vec![[1, 0, 0], [1, 0, 0]]).is_err());
        assert!(VoxelGrid::from_mask([0, 2, 2], vec![]).is_err());
    }

    #[test]
    fn box_face_edge_formula() {
        for dims in [[1, 1, 1], [3, 1, 1], [2, 3, 4], [5, 5, 2], [4, 4, 4]] {
            let [a, b, c] = dims;
            let g = build_graph(&VoxelGrid::full(dims).unwrap(), Connectivity::Face6).unwrap();
            assert_eq!(g.edges().len(), 3 * a * b * c - a * b - b * c - a * c);
        }
    }

    #[test]
    fn chain_split_example() {
        let g = LatticeGraph::chain(4);
        let s = split_subgraphs(&g, &[-1.0, -2.0, 3.0, 4.0]).unwrap();
        assert_eq!(s.v1, vec![0, 1]);
        assert_eq!(s.v2, vec![2, 3]);
        assert_eq!(s.e1, vec![(0, 1)]);
        assert_eq!(s.e2, vec![(2, 3)]);
        assert_eq!(s.e3, vec![(1, 2)]);
    }

    #[test]
    fn single_sign_and_zero_ties() {
        let g = LatticeGraph::chain(4);
        let s = split_subgraphs(&g, &[-1.0, -0.5, -3.0, -0.1]).unwrap();
        assert_eq!(s.e1.len(), 3);
        assert!(s.e2.is_empty() && s.e3.is_empty());
        let s = split_subgraphs(&g, &[0.0, 1.0, 0.0, -1.0]).unwrap();
        assert_eq!(s.v1, vec![0, 2, 3]);
        assert_eq!(s.v2, vec![1]);
    }

    #[test]
    fn split_errors() {
        let g = LatticeGraph::chain(3);
        assert!(matches!(
            split_subgraphs(&g, &[0.0, 1.0]),
            Err(Error::Dimension { .. })
        ));
        assert!(matches!(
            split_subgraphs(&g, &[0.0, f64::NAN, 1.0]),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn stacked_weights() {
        let g = LatticeGraph::chain(4);
        let s = split_subgraphs(&g, &[-1.0, -2.0, 3.0, 4.0]).unwrap();
        let params = HsParams::new(0.8, 0.4, 1.6);
        let d = stacked_operator(&s, &params).unwrap();
        assert_eq!(d.rows(), &[(0, 1), (2, 3), (1, 2)]);
        assert_eq!(d.weights(), &[1.0, 0.5, 2.0]);

        let equal = stacked_operator(&s, &HsParams::new(0.7, 0.7, 0.7)).unwrap();
        assert!(equal.weights().iter().all(|&w| w == 1.0));
        let mut rows = equal.rows().to_vec();
        rows.sort_unstable();
        assert_eq!(rows, g.edges());

        assert!(matches!(
            stacked_operator(&s, &HsParams::new(0.0, 0.4, 1.6)),
            Err(Error::UndefinedWeightRatio)
        ));
    }

    #[test]
    fn transpose_is_adjoint() {
        let grid = VoxelGrid::full([3, 2, 2]).unwrap();
        let g = build_graph(&grid, Connectivity::Moore26).unwrap();
        let z: Vec<f64> = (0..grid.len()).map(|i| (i as f64 * 0.7).sin()).collect();
        let d = stacked_operator(&split_subgraphs(&g, &z).unwrap(), &HsParams::new(1.0, 0.3, 2.5))
            .unwrap();
        let x: Vec<f64> = (0..d.n_cols()).map(|i| (i as f64 * 1.3).cos()).collect();
        let y: Vec<f64> = (0..d.n_rows()).map(|i| (i as f64 * 0.4).sin()).collect();
        let dx = d.apply(&x);
        let dty = d.apply_transpose(&y);
        let lhs: f64 = dx.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&dty).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    fn mask_strategy() -> impl Strategy<Value = (Vec<Coord>, Vec<f64>)> {
        proptest::collection::btree_set((0usize..4, 0usize..4, 0usize..3), 1..40).prop_flat_map(
            |set| {
                let coords: Vec<Coord> = set.into_iter().map(|(i, j, k)| [i, j, k]).collect();
                let n = coords.len();
                (
                    Just(coords),
                    proptest::collection::vec(
                        prop_oneof![Just(0.0), -3.0..3.0f64],
                        n,
                    ),
                )
            },
        )
    }

    proptest! {
        #[test]
        fn split_is_a_partition((coords, z) in mask_strategy(), moore in any::<bool>()) {
            let conn = if moore { Connectivity::Moore26 } else { Connectivity::Face6 };
            let grid = VoxelGrid::from_mask([4, 4, 3], coords).unwrap();
            let g = build_graph(&grid, conn).unwrap();
            prop_assert_eq!(
                g.edges().iter().copied().collect::<BTreeSet<_>>(),
                brute_force_edges(&grid, conn)
            );
            let s = split_subgraphs(&g, &z).unwrap();
            let mut verts: Vec<usize> = s.v1.iter().chain(&s.v2).copied().collect();
            verts.sort_unstable();
            prop_assert_eq!(verts, (0..grid.len()).collect::<Vec<_>>());
            let mut all: Vec<(usize, usize)> =
                s.e1.iter().chain(&s.e2).chain(&s.e3).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(&all[..], g.edges());
            for &(a, b) in &s.e1 { prop_assert!(z[a] <= 0.0 && z[b] <= 0.0); }
            for &(a, b) in &s.e2 { prop_assert!(z[a] > 0.0 && z[b] > 0.0); }
            for &(a, b) in &s.e3 { prop_assert!((z[a] > 0.0) != (z[b] > 0.0)); }

            let d = stacked_operator(&s, &HsParams::new(0.9, 0.3, 1.7)).unwrap();
            let constant = vec![4.25; grid.len()];
            prop_assert!(d.apply(&constant).iter().all(|&v| v == 0.0));
        }

        #[test]
        fn relabeling_preserves_graph((coords, _z) in mask_strategy(), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut perm: Vec<usize> = (0..coords.len()).collect();
            perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let permuted: Vec<Coord> = perm.iter().map(|&i| coords[i]).collect();
            let g = build_graph(&VoxelGrid::from_coords([4, 4, 3], coords).unwrap(), Connectivity::Face6).unwrap();
            let gp = build_graph(&VoxelGrid::from_coords([4, 4, 3], permuted).unwrap(), Connectivity::Face6).unwrap();
            // new index r holds old voxel perm[r]
            let mapped: BTreeSet<(usize, usize)> = gp
                .edges()
                .iter()
                .map(|&(a, b)| (perm[a].min(perm[b]), perm[a].max(perm[b])))
                .collect();
            prop_assert_eq!(mapped, g.edges().iter().copied().collect::<BTreeSet<_>>());
        }
    }
}
