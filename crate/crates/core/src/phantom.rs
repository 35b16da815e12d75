//! Synthetic voxel data with planted lesion balls and a bias shell.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::stats::Dataset;
use crate::voxelgrid::{Coord, VoxelGrid};

/// Voxels within Euclidean distance `radius` of `center`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Blob {
    pub center: Coord,
    pub radius: f64,
    /// Mean drop in the disease class, in noise standard deviations.
    pub effect: f64,
}

/// Face-6 outer layer of the box `[lo, hi)`: voxels outside the box that
/// share a face with it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Shell {
    pub lo: Coord,
    pub hi: Coord,
    /// Mean rise in the disease class, in noise standard deviations.
    pub effect: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub n_per_class: usize,
    pub lesion_blobs: Vec<Blob>,
    pub bias_shell: Option<Shell>,
    pub noise_sd: f64,
    pub seed: u64,
}

impl PhantomSpec {
    /// 24^3 grid, two radius-2.5 balls (81 voxels each) at effect 1.2, a
    /// 62-voxel shell around a 5x3x2 box at effect 0.9, 40 subjects per class.
    pub fn standard(seed: u64) -> Self {
        Self {
            dims: [24, 24, 24],
            n_per_class: 40,
            lesion_blobs: vec![
                Blob {
                    center: [6, 6, 6],
                    radius: 2.5,
                    effect: 1.2,
                },
                Blob {
                    center: [17, 17, 17],
                    radius: 2.5,
                    effect: 1.2,
                },
            ],
            bias_shell: Some(Shell {
                lo: [10, 10, 11],
                hi: [15, 13, 13],
                effect: 0.9,
            }),
            noise_sd: 1.0,
            seed,
        }
    }

    /// Same geometry with every effect set to zero.
    pub fn null(mut self) -> Self {
        for b in &mut self.lesion_blobs {
            b.effect = 0.0;
        }
        if let Some(s) = &mut self.bias_shell {
            s.effect = 0.0;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.contains(&0) {
            return Err(Error::InvalidGrid(format!("dims must be positive, got {:?}", self.dims)));
        }
        if self.n_per_class < 2 {
            return Err(Error::InvalidParameter("need at least 2 subjects per class".into()));
        }
        if !(self.noise_sd > 0.0) || !self.noise_sd.is_finite() {
            return Err(Error::InvalidParameter(format!("noise_sd must be positive, got {}", self.noise_sd)));
        }
        for b in &self.lesion_blobs {
            let r = b.radius.floor() as usize;
            let inside = (0..3).all(|a| b.center[a] >= r && b.center[a] + r < self.dims[a]);
            if !(b.radius >= 0.0) || !inside {
                return Err(Error::InvalidParameter(format!("blob {b:?} does not fit in {:?}", self.dims)));
            }
            if !(b.effect >= 0.0) {
                return Err(Error::InvalidParameter("effect sizes must be >= 0".into()));
            }
        }
        if let Some(s) = &self.bias_shell {
            let inside = (0..3).all(|a| s.lo[a] >= 1 && s.lo[a] < s.hi[a] && s.hi[a] < self.dims[a]);
            if !inside {
                return Err(Error::InvalidParameter(format!(
                    "shell box {:?}..{:?} and its outer layer must fit in {:?}",
                    s.lo, s.hi, self.dims
                )));
            }
            if !(s.effect >= 0.0) {
                return Err(Error::InvalidParameter("effect sizes must be >= 0".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Truth {
    pub lesion: Vec<usize>,
    pub bias: Vec<usize>,
}

impl Truth {
    pub fn group(&self, voxel: usize) -> &'static str {
        if self.lesion.binary_search(&voxel).is_ok() {
            "lesion"
        } else if self.bias.binary_search(&voxel).is_ok() {
            "bias"
        } else {
            "null"
        }
    }

    /// Lesion and bias voxels together, ascending.
    pub fn non_null(&self) -> Vec<usize> {
        let mut all = [self.lesion.clone(), self.bias.clone()].concat();
        all.sort_unstable();
        all
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    pub dataset: Dataset,
    pub grid: VoxelGrid,
    pub truth: Truth,
}

fn in_ball(c: Coord, b: &Blob) -> bool {
    let d2: f64 = (0..3).map(|a| (c[a] as f64 - b.center[a] as f64).powi(2)).sum();
    d2 <= b.radius * b.radius
}

fn in_shell(c: Coord, s: &Shell) -> bool {
    let inside = |c: [i64; 3]| (0..3).all(|a| c[a] >= s.lo[a] as i64 && c[a] < s.hi[a] as i64);
    let ci = [c[0] as i64, c[1] as i64, c[2] as i64];
    if inside(ci) {
        return false;
    }
    (0..3).any(|a| {
        [-1, 1].iter().any(|d| {
            let mut n = ci;
            n[a] += d;
            inside(n)
        })
    })
}

/// Draws the dataset: `x = mu(y) + noise_sd * N(0, 1)`, one ChaCha stream per
/// subject. The first `n_per_class` subjects are labeled `+1`, the rest `-1`.
pub fn generate(spec: &PhantomSpec) -> Result<Phantom> {
    spec.validate()?;
    let grid = VoxelGrid::full(spec.dims)?;
    let p = grid.len();
    let mut shift = vec![0.0; p];
    let mut truth = Truth::default();
    for i in 0..p {
        let c = grid.coord(i);
        let blob = spec.lesion_blobs.iter().find(|b| in_ball(c, b));
        let shell = spec.bias_shell.as_ref().filter(|s| in_shell(c, s));
        match (blob, shell) {
            (Some(_), Some(_)) => {
                return Err(Error::InvalidParameter(format!(
                    "voxel {c:?} belongs to both a lesion blob and the bias shell"
                )))
            }
            (Some(b), None) => {
                truth.lesion.push(i);
                shift[i] = -b.effect * spec.noise_sd;
            }
            (None, Some(s)) => {
                truth.bias.push(i);
                shift[i] = s.effect * spec.noise_sd;
            }
            (None, None) => {}
        }
    }
    let n = 2 * spec.n_per_class;
    let mut x = Vec::with_capacity(n * p);
    let mut y = Vec::with_capacity(n);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    for subject in 0..n {
        rng.set_stream(subject as u64);
        rng.set_word_pos(0);
        let disease = subject >= spec.n_per_class;
        y.push(if disease { -1 } else { 1 });
        for &s in &shift {
            let eps: f64 = StandardNormal.sample(&mut rng);
            let mu = if disease { s } else { 0.0 };
            x.push(mu + spec.noise_sd * eps);
        }
    }
    Ok(Phantom {
        dataset: Dataset::new(n, p, x, y)?,
        grid,
        truth,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{edge_density_3d, Denominator, FoldSelection, SelectionFolds};
    use crate::stats::z_scores;

    #[test]
    fn standard_geometry_counts() {
        let ph = generate(&PhantomSpec::standard(1)).unwrap();
        assert_eq!(ph.truth.lesion.len(), 162);
        assert_eq!(ph.truth.bias.len(), 62);
        assert_eq!(ph.dataset.n_subjects(), 80);
        assert_eq!(ph.dataset.n_voxels(), 24 * 24 * 24);
        let lesion = ph.truth.lesion[0];
        assert_eq!(ph.truth.group(lesion), "lesion");
        assert_eq!(ph.truth.group(0), "null");
    }

    #[test]
    fn deterministic_per_seed() {
        let mut spec = PhantomSpec::standard(5);
        spec.dims = [10, 10, 10];
        spec.lesion_blobs = vec![Blob {
            center: [3, 3, 3],
            radius: 1.5,
            effect: 1.0,
        }];
        spec.bias_shell = Some(Shell {
            lo: [6, 6, 6],
            hi: [8, 8, 8],
            effect: 1.0,
        });
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        assert!(a.dataset.values().iter().zip(b.dataset.values()).all(|(x, y)| x.to_bits() == y.to_bits()));
        spec.seed = 6;
        let c = generate(&spec).unwrap();
        assert_ne!(a.dataset.values(), c.dataset.values());
    }

    #[test]
    fn overlap_and_fit_errors() {
        let mut spec = PhantomSpec::standard(0);
        spec.bias_shell = Some(Shell {
            lo: [5, 5, 5],
            hi: [7, 7, 7],
            effect: 1.0,
        });
        assert!(generate(&spec).is_err());
        let mut spec = PhantomSpec::standard(0);
        spec.lesion_blobs[0].center = [1, 1, 1];
        assert!(generate(&spec).is_err());
    }

    #[test]
    fn effects_orient_z() {
        let ph = generate(&PhantomSpec::standard(3)).unwrap();
        let z = z_scores(&ph.dataset).unwrap().z;
        let mean = |s: &[usize]| s.iter().map(|&i| z[i]).sum::<f64>() / s.len() as f64;
        assert!(mean(&ph.truth.lesion) > 2.0);
        assert!(mean(&ph.truth.bias) < -1.5);
    }

    #[test]
    fn shell_less_compact_than_blob() {
        let ph = generate(&PhantomSpec::standard(0)).unwrap();
        let blob: Vec<usize> = ph.truth.lesion[..81].to_vec();
        let folds = SelectionFolds::new(vec![FoldSelection::new(blob, ph.truth.bias.clone()).unwrap()]);
        let (plus, minus) = edge_density_3d(&folds, &ph.grid, Denominator::Paper).unwrap();
        assert!(plus > minus, "{plus} vs {minus}");
    }
}
