//! End-to-end fitting: statistics, two-groups model, graph split and EM.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fdrhs::{fit_em_with, FitResult, HsParams, Likelihoods};
use crate::stats::{z_scores, Dataset, ModelOptions, TwoGroupsModel, ZScores};
use crate::voxelgrid::{build_graph, split_subgraphs, Connectivity, SubgraphSplit, VoxelGrid};

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PipelineOptions {
    pub connectivity: Connectivity,
    pub params: HsParams,
    pub model: ModelOptions,
}

/// Everything computed on the way to a fit.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub zscores: ZScores,
    pub model: TwoGroupsModel,
    pub likelihoods: Likelihoods,
    pub split: SubgraphSplit,
}

#[derive(Debug, Clone)]
pub struct PipelineFit {
    pub prepared: Prepared,
    pub fit: FitResult,
}

pub fn prepare(data: &Dataset, grid: &VoxelGrid, options: &PipelineOptions) -> Result<Prepared> {
    if data.n_voxels() != grid.len() {
        return Err(Error::Dimension {
            context: "dataset voxels vs mask",
            expected: grid.len(),
            actual: data.n_voxels(),
        });
    }
    let zscores = z_scores(data)?;
    let model = TwoGroupsModel::fit(&zscores.z, &options.model)?;
    let likelihoods = Likelihoods::new(&zscores.z, &model);
    let graph = build_graph(grid, options.connectivity)?;
    let split = split_subgraphs(&graph, &zscores.z)?;
    Ok(Prepared {
        zscores,
        model,
        likelihoods,
        split,
    })
}

impl Prepared {
    pub fn fit(&self, params: &HsParams) -> Result<FitResult> {
        fit_em_with(
            &self.zscores.z,
            &self.likelihoods,
            self.model.cbar,
            &self.split,
            params,
            None,
        )
    }
}

pub fn fit_dataset(data: &Dataset, grid: &VoxelGrid, options: &PipelineOptions) -> Result<PipelineFit> {
    let prepared = prepare(data, grid, options)?;
    let fit = prepared.fit(&options.params)?;
    Ok(PipelineFit { prepared, fit })
}

/// Subjects kept when fold `fold` of `k` is held out. Each class is shuffled
/// with the seed and dealt round-robin into folds, so every fold removes
/// about `1/k` of each class.
pub fn cv_training_subjects(labels: &[i8], k: usize, fold: usize, seed: u64) -> Result<Vec<usize>> {
    if k < 2 || fold >= k {
        return Err(Error::InvalidParameter(format!(
            "fold {fold} of {k} is invalid (need k >= 2 and fold < k)"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = Vec::new();
    for class in [1i8, -1] {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        members.shuffle(&mut rng);
        keep.extend(
            members
                .iter()
                .enumerate()
                .filter(|(pos, _)| pos % k != fold)
                .map(|(_, &s)| s),
        );
    }
    keep.sort_unstable();
    Ok(keep)
}
