//! Selection quality metrics: FDP and power against a known truth, multi-set
//! Dice across folds, and 3D edge density of selected sets.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::voxelgrid::{Coord, VoxelGrid};

/// Largest set size handled by the exhaustive polycube enumeration.
pub const ORACLE_MAX_SIZE: usize = 8;

/// `(fdp, power)`; both are 0 for an empty selection.
pub fn fdp_power(selected: &[usize], truth: &[usize]) -> (f64, f64) {
    let sel: HashSet<usize> = selected.iter().copied().collect();
    let tru: HashSet<usize> = truth.iter().copied().collect();
    let hits = sel.intersection(&tru).count();
    let fdp = (sel.len() - hits) as f64 / sel.len().max(1) as f64;
    let power = hits as f64 / tru.len().max(1) as f64;
    (fdp, power)
}

/// `K |intersection| / sum |S_k|` over `K >= 2` sets; 0 when every set is empty.
pub fn mdc(folds: &[Vec<usize>]) -> Result<f64> {
    if folds.len() < 2 {
        return Err(Error::InvalidParameter(format!(
            "mDC needs at least 2 folds, got {}",
            folds.len()
        )));
    }
    let sets: Vec<BTreeSet<usize>> = folds.iter().map(|f| f.iter().copied().collect()).collect();
    let total: usize = sets.iter().map(BTreeSet::len).sum();
    if total == 0 {
        return Ok(0.0);
    }
    let common = sets[0]
        .iter()
        .filter(|i| sets[1..].iter().all(|s| s.contains(i)))
        .count();
    Ok(sets.len() as f64 * common as f64 / total as f64)
}

/// Maximizes `3 c1 c2 c3 - c1 c2 - c1 c3 - c2 c3 + 2 r1 r2 - r1 - r2 + l` over
/// decompositions `n = c1 c2 c3 + r1 r2 + l` of a box, a rectangle laid on
/// one of its faces, and a residual line with `l <= max(r1, r2)`.
pub fn max_lattice_edges(n: usize) -> u64 {
    if n <= 1 {
        return 0;
    }
    let mut best = i64::MIN;
    for c1 in 1..=n {
        for c2 in c1..=n / c1 {
            for c3 in c2..=n / (c1 * c2) {
                let cube = c1 * c2 * c3;
                let rem = n - cube;
                let (a, b, c) = (c1 as i64, c2 as i64, c3 as i64);
                let cube_edges = 3 * a * b * c - a * b - a * c - b * c;
                for (f1, f2) in [(c1, c2), (c1, c3), (c2, c3)] {
                    if let Some(extra) = best_remainder(rem, f1, f2) {
                        best = best.max(cube_edges + extra);
                    }
                }
            }
        }
    }
    best.max(0) as u64
}

/// Best `2 r1 r2 - r1 - r2 + l` with `r1 <= f1`, `r2 <= f2`,
/// `r1 r2 + l = rem <= f1 f2` and `l <= max(r1, r2)`.
fn best_remainder(rem: usize, f1: usize, f2: usize) -> Option<i64> {
    if rem > f1 * f2 {
        return None;
    }
    let mut best = None;
    for r1 in 0..=f1 {
        for r2 in 0..=f2 {
            let area = r1 * r2;
            if area > rem {
                break;
            }
            let l = rem - area;
            if l > r1.max(r2) {
                continue;
            }
            let v = 2 * area as i64 - r1 as i64 - r2 as i64 + l as i64;
            best = Some(best.map_or(v, |b: i64| b.max(v)));
        }
    }
    best
}

fn face_edges(cells: &[[i32; 3]]) -> usize {
    let set: HashSet<[i32; 3]> = cells.iter().copied().collect();
    cells
        .iter()
        .map(|c| {
            (0..3)
                .filter(|&ax| {
                    let mut n = *c;
                    n[ax] += 1;
                    set.contains(&n)
                })
                .count()
        })
        .sum()
}

/// Translation-normalized, sorted cell list.
fn normalize(mut cells: Vec<[i32; 3]>) -> Vec<[i32; 3]> {
    let mut lo = [i32::MAX; 3];
    for c in &cells {
        for ax in 0..3 {
            lo[ax] = lo[ax].min(c[ax]);
        }
    }
    for c in &mut cells {
        for ax in 0..3 {
            c[ax] -= lo[ax];
        }
    }
    cells.sort_unstable();
    cells
}

/// Maximum face-adjacent edge count over all sets of `n` lattice cells, by
/// exhaustive enumeration of fixed polycubes.
pub fn max_lattice_edges_oracle(n: usize) -> Result<u64> {
    if n > ORACLE_MAX_SIZE {
        return Err(Error::OracleInfeasible(n));
    }
    if n <= 1 {
        return Ok(0);
    }
    Ok(enumerate_polycubes(n)
        .iter()
        .map(|shape| face_edges(shape) as u64)
        .max()
        .unwrap_or(0))
}

/// All fixed polycubes with `n` cells.
pub fn enumerate_polycubes(n: usize) -> Vec<Vec<[i32; 3]>> {
    if n == 0 {
        return Vec::new();
    }
    let mut level: Vec<Vec<[i32; 3]>> = vec![vec![[0, 0, 0]]];
    for _ in 1..n {
        let mut seen: HashSet<Vec<[i32; 3]>> = HashSet::new();
        let mut next = Vec::new();
        for shape in &level {
            let cells: HashSet<[i32; 3]> = shape.iter().copied().collect();
            for c in shape {
                for ax in 0..3 {
                    for d in [-1, 1] {
                        let mut nb = *c;
                        nb[ax] += d;
                        if cells.contains(&nb) {
                            continue;
                        }
                        let mut grown = shape.clone();
                        grown.push(nb);
                        let canon = normalize(grown);
                        if seen.insert(canon.clone()) {
                            next.push(canon);
                        }
                    }
                }
            }
        }
        next.sort_unstable();
        level = next;
    }
    level
}

/// Face-adjacent pairs inside `set`, using grid coordinates.
pub fn within_set_edges(set: &[usize], grid: &VoxelGrid) -> usize {
    let cells: Vec<[i32; 3]> = set
        .iter()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .map(|&i| to_i32(grid.coord(i)))
        .collect();
    face_edges(&cells)
}

fn to_i32(c: Coord) -> [i32; 3] {
    [c[0] as i32, c[1] as i32, c[2] as i32]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Denominator {
    /// Closed-form decomposition bound.
    #[default]
    Paper,
    /// Exhaustive enumeration, sets of at most [`ORACLE_MAX_SIZE`] voxels.
    Oracle,
}

impl fmt::Display for Denominator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Denominator::Paper => "paper",
            Denominator::Oracle => "oracle",
        })
    }
}

impl FromStr for Denominator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "paper" | "formula" => Ok(Denominator::Paper),
            "oracle" | "exhaustive" => Ok(Denominator::Oracle),
            other => Err(Error::InvalidParameter(format!("unknown denominator '{other}'"))),
        }
    }
}

/// One fold's selection split into lesion (`z > 0`) and bias (`z <= 0`) sets.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct FoldSelection {
    pub lesion: Vec<usize>,
    pub bias: Vec<usize>,
}

impl FoldSelection {
    pub fn new(lesion: Vec<usize>, bias: Vec<usize>) -> Result<Self> {
        let l: HashSet<usize> = lesion.iter().copied().collect();
        if bias.iter().any(|i| l.contains(i)) {
            return Err(Error::InvalidParameter("lesion and bias sets overlap".into()));
        }
        Ok(Self { lesion, bias })
    }

    /// Splits a selection by the sign of `z`.
    pub fn from_selection(selected: &[usize], z: &[f64]) -> Self {
        let (lesion, bias) = selected.iter().partition(|&&i| z[i] > 0.0);
        Self { lesion, bias }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SelectionFolds {
    pub folds: Vec<FoldSelection>,
}

impl SelectionFolds {
    pub fn new(folds: Vec<FoldSelection>) -> Self {
        Self { folds }
    }

    pub fn lesion_sets(&self) -> Vec<Vec<usize>> {
        self.folds.iter().map(|f| f.lesion.clone()).collect()
    }

    pub fn bias_sets(&self) -> Vec<Vec<usize>> {
        self.folds.iter().map(|f| f.bias.clone()).collect()
    }

    /// `(mDC lesion, mDC bias)`.
    pub fn mdc(&self) -> Result<(f64, f64)> {
        Ok((mdc(&self.lesion_sets())?, mdc(&self.bias_sets())?))
    }
}

fn set_density(set: &[usize], grid: &VoxelGrid, denominator: Denominator) -> Result<f64> {
    let n = set.iter().collect::<HashSet<_>>().len();
    let max = match denominator {
        Denominator::Paper => max_lattice_edges(n),
        Denominator::Oracle => max_lattice_edges_oracle(n)?,
    };
    if max == 0 {
        return Ok(0.0);
    }
    Ok(within_set_edges(set, grid) as f64 / max as f64)
}

/// `(eds_plus, eds_minus)`: fold-averaged ratio of within-set face edges to
/// the maximum edge count for a set of that size, for lesion and bias sets.
pub fn edge_density_3d(
    folds: &SelectionFolds,
    grid: &VoxelGrid,
    denominator: Denominator,
) -> Result<(f64, f64)> {
    if folds.folds.is_empty() {
        return Err(Error::InvalidParameter("3dED needs at least one fold".into()));
    }
    let k = folds.folds.len() as f64;
    let mut plus = 0.0;
    let mut minus = 0.0;
    for fold in &folds.folds {
        plus += set_density(&fold.lesion, grid, denominator)?;
        minus += set_density(&fold.bias, grid, denominator)?;
    }
    Ok((plus / k, minus / k))
}
