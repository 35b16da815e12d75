//! Command-line interface: `synth`, `fit`, `baseline`, `metrics`, `render`
//! and `gridsearch`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::baselines::{bh_select, localfdr_select_with, ttest_select, Method};
use crate::error::{Error, Result};
use crate::fdrhs::{logit, select_features, FitResult, HsParams};
use crate::io::{self, DataFormat, FitRow, FitTable, MetricRow, RunManifest};
use crate::metrics::{edge_density_3d, fdp_power, mdc, Denominator, FoldSelection, SelectionFolds};
use crate::phantom::{generate, Blob, PhantomSpec, Shell, Truth};
use crate::pipeline::{cv_training_subjects, prepare, PipelineOptions, Prepared};
use crate::stats::{Dataset, ModelOptions, NullKind, CENTRAL_WINDOW};
use crate::voxelgrid::{Connectivity, VoxelGrid};

#[derive(Debug, Parser)]
#[command(name = "fdrhs", version, about = "Spatially smoothed two-groups voxel selection")]
pub struct Cli {
    /// Run manifest (`key = value` lines).
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,
    /// Output directory [default: manifest `out`, else the current directory].
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Seed for phantom generation and fold assignment.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Concurrent fits in `gridsearch`.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
    /// Lattice neighborhood [default: manifest value, else face6].
    #[arg(long, global = true)]
    pub connectivity: Option<Connectivity>,
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a phantom dataset with planted lesion balls and a bias shell.
    Synth(SynthArgs),
    /// Fit the smoothed two-groups model and select voxels.
    Fit(FitArgs),
    /// Run a univariate baseline selector.
    Baseline(BaselineArgs),
    /// Score selections: FDP/power, mDC across folds, 3D edge density.
    Metrics(MetricsArgs),
    /// Write one slice of a selection as PGM and CSV.
    Render(RenderArgs),
    /// Fit every penalty combination and rank by an objective.
    Gridsearch(GridArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value = "24,24,24", value_parser = parse_dims_arg)]
    pub dims: [usize; 3],
    #[arg(long, default_value_t = 40)]
    pub n_per_class: usize,
    /// Lesion effect size in noise standard deviations.
    #[arg(long, default_value_t = 1.2)]
    pub lesion_effect: f64,
    /// Bias effect size in noise standard deviations.
    #[arg(long, default_value_t = 0.9)]
    pub bias_effect: f64,
    #[arg(long, default_value_t = 2.5)]
    pub radius: f64,
    #[arg(long, default_value_t = 1.0)]
    pub noise_sd: f64,
    /// Lesion ball centers `i,j,k` (repeatable) [default: two balls scaled from (6,6,6) and (17,17,17) on 24^3].
    #[arg(long = "blob", value_parser = parse_dims_arg)]
    pub blobs: Vec<[usize; 3]>,
    /// Bias box `lo_i,lo_j,lo_k,hi_i,hi_j,hi_k` whose outer face layer is the shell.
    #[arg(long)]
    pub shell: Option<String>,
    /// Omit the bias shell.
    #[arg(long)]
    pub no_shell: bool,
    #[arg(long, value_enum, default_value_t = FormatArg::Csv)]
    pub format: FormatArg,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FormatArg {
    Csv,
    F64le,
}

#[derive(Debug, Args, Clone, Default)]
pub struct ParamArgs {
    /// Sets all three penalties.
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub lambda_pro: Option<f64>,
    #[arg(long)]
    pub lambda_les: Option<f64>,
    #[arg(long)]
    pub lambda_proles: Option<f64>,
    /// Selection threshold on the posterior null probability [default 0.2].
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub em_max_iter: Option<usize>,
    #[arg(long)]
    pub em_tol: Option<f64>,
    /// Fix `delta0 = 0, sigma0 = 1` instead of central matching.
    #[arg(long)]
    pub theoretical_null: bool,
    /// Kernel bandwidth [default: Silverman].
    #[arg(long)]
    pub bandwidth: Option<f64>,
    /// Number of resampling folds; with `--cv-fold` fits on the other folds.
    #[arg(long, requires = "cv_fold")]
    pub cv_folds: Option<usize>,
    /// Held-out fold index in `0..cv-folds`.
    #[arg(long, requires = "cv_folds")]
    pub cv_fold: Option<usize>,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub params: ParamArgs,
    /// Keep the prior constant at the two-groups estimate (no EM).
    #[arg(long)]
    pub constant_prior: bool,
}

#[derive(Debug, Args)]
pub struct BaselineArgs {
    #[arg(long, value_enum)]
    pub method: MethodArg,
    #[command(flatten)]
    pub params: ParamArgs,
    /// p-value threshold for `ttest`.
    #[arg(long, default_value_t = 0.05)]
    pub p_threshold: f64,
    /// FDR level for `bh`.
    #[arg(long, default_value_t = 0.05)]
    pub q: f64,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum MethodArg {
    Ttest,
    Bh,
    Localfdr,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Ttest => Method::Ttest,
            MethodArg::Bh => Method::Bh,
            MethodArg::Localfdr => Method::LocalFdr,
        }
    }
}

#[derive(Debug, Args)]
pub struct MetricsArgs {
    /// Fit or baseline CSV files, one per fold (repeatable).
    #[arg(long = "fit", required = true)]
    pub fits: Vec<PathBuf>,
    /// Truth CSV [default: manifest `truth`].
    #[arg(long)]
    pub truth: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = DenominatorArg::Paper)]
    pub denominator: DenominatorArg,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum DenominatorArg {
    Paper,
    Oracle,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    /// Fit CSV [default: OUT/fit.csv].
    #[arg(long)]
    pub fit: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = AxisArg::K)]
    pub axis: AxisArg,
    #[arg(long)]
    pub slice: usize,
    /// Grid dims [default: manifest `dims`].
    #[arg(long, value_parser = parse_dims_arg)]
    pub dims: Option<[usize; 3]>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum AxisArg {
    I,
    J,
    K,
}

#[derive(Debug, Args)]
pub struct GridArgs {
    #[arg(long, value_delimiter = ',', default_values_t = default_lambdas())]
    pub lambda_pro: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = default_lambdas())]
    pub lambda_les: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = default_lambdas())]
    pub lambda_proles: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = default_gammas())]
    pub gamma: Vec<f64>,
    #[arg(long, value_enum, default_value_t = Objective::MinFdpAtPower)]
    pub objective: Objective,
    /// Power target for `min-fdp-at-power`.
    #[arg(long, default_value_t = 0.5)]
    pub target_power: f64,
    /// Resampling folds for `max-mdc`.
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
}

fn default_lambdas() -> Vec<f64> {
    (1..=20).map(|i| i as f64 / 10.0).collect()
}

fn default_gammas() -> Vec<f64> {
    (1..=5).map(|i| i as f64 / 10.0).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Objective {
    /// FDP when power reaches the target, else `1 + shortfall`; lower is better.
    MinFdpAtPower,
    /// mDC of the selection across resampled folds; higher is better.
    MaxMdc,
}

fn parse_dims_arg(s: &str) -> std::result::Result<[usize; 3], String> {
    io::parse_dims(s).map_err(|e| e.to_string())
}

/// Exit status for an error: 2 for data and schema problems, 3 for
/// numerical failures, 1 for everything else.
pub fn exit_code(err: &Error) -> i32 {
    if err.is_numerical() {
        return 3;
    }
    match err {
        Error::Io { .. }
        | Error::Schema { .. }
        | Error::InvalidDataset(_)
        | Error::InvalidGrid(_)
        | Error::Dimension { .. }
        | Error::EmptyGrid
        | Error::OracleInfeasible(_) => 2,
        _ => 1,
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let manifest = match &cli.manifest {
        Some(p) => RunManifest::read(p)?,
        None => RunManifest::default(),
    };
    let out = cli
        .out
        .clone()
        .or_else(|| manifest.out.clone())
        .unwrap_or_else(|| PathBuf::from("."));
    let ctx = Context {
        connectivity: cli.connectivity.unwrap_or(manifest.connectivity),
        manifest,
        has_manifest: cli.manifest.is_some(),
        out,
        seed: cli.seed,
        jobs: cli.jobs.max(1),
    };
    match &cli.command {
        Command::Synth(a) => cmd_synth(&ctx, a),
        Command::Fit(a) => cmd_fit(&ctx, a),
        Command::Baseline(a) => cmd_baseline(&ctx, a),
        Command::Metrics(a) => cmd_metrics(&ctx, a),
        Command::Render(a) => cmd_render(&ctx, a),
        Command::Gridsearch(a) => cmd_gridsearch(&ctx, a),
    }
}

struct Context {
    manifest: RunManifest,
    has_manifest: bool,
    out: PathBuf,
    seed: u64,
    jobs: usize,
    connectivity: Connectivity,
}

impl Context {
    fn out_path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    /// Mask, dataset and optional truth named by the manifest, all checked
    /// before any fitting starts.
    fn load(&self) -> Result<(Dataset, VoxelGrid, Option<Truth>)> {
        if !self.has_manifest {
            return Err(Error::InvalidParameter("--manifest is required for this command".into()));
        }
        let m = &self.manifest;
        let dims = m
            .dims
            .ok_or_else(|| Error::InvalidParameter("manifest does not set 'dims'".into()))?;
        let grid = io::read_mask(m.require("mask", &m.mask)?, dims)?;
        let data = io::read_dataset(
            m.require("data", &m.data)?,
            m.data_format,
            m.require("labels", &m.labels)?,
            grid.len(),
        )?;
        let truth = m.truth.as_deref().map(io::read_truth).transpose()?;
        if let Some(t) = &truth {
            if t.lesion.iter().chain(&t.bias).any(|&i| i >= grid.len()) {
                return Err(Error::InvalidDataset("truth references voxels outside the mask".into()));
            }
        }
        Ok((data, grid, truth))
    }
}

fn resolve_params(base: &HsParams, a: &ParamArgs) -> HsParams {
    let mut p = base.clone();
    if let Some(l) = a.lambda {
        p.lambda_pro = l;
        p.lambda_les = l;
        p.lambda_proles = l;
    }
    if let Some(v) = a.lambda_pro {
        p.lambda_pro = v;
    }
    if let Some(v) = a.lambda_les {
        p.lambda_les = v;
    }
    if let Some(v) = a.lambda_proles {
        p.lambda_proles = v;
    }
    if let Some(v) = a.gamma {
        p.gamma = v;
    }
    if let Some(v) = a.em_max_iter {
        p.em_max_iter = v;
    }
    if let Some(v) = a.em_tol {
        p.em_tol = v;
    }
    p
}

fn model_options(a: &ParamArgs) -> ModelOptions {
    ModelOptions {
        null: if a.theoretical_null {
            NullKind::Theoretical { window: CENTRAL_WINDOW }
        } else {
            NullKind::Empirical { window: CENTRAL_WINDOW }
        },
        bandwidth: a.bandwidth,
    }
}

/// Applies `--cv-folds/--cv-fold` subsampling.
fn training_data(ctx: &Context, data: Dataset, a: &ParamArgs) -> Result<Dataset> {
    match (a.cv_folds, a.cv_fold) {
        (Some(k), Some(fold)) => {
            let keep = cv_training_subjects(data.labels(), k, fold, ctx.seed)?;
            data.subset(&keep)
        }
        _ => Ok(data),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn scaled_center(c: [usize; 3], dims: [usize; 3]) -> [usize; 3] {
    let mut out = [0; 3];
    for a in 0..3 {
        out[a] = ((c[a] as f64 * dims[a] as f64 / 24.0).round() as usize).min(dims[a] - 1);
    }
    out
}

fn synth_spec(ctx: &Context, a: &SynthArgs) -> Result<PhantomSpec> {
    let standard = PhantomSpec::standard(ctx.seed);
    let centers: Vec<[usize; 3]> = if a.blobs.is_empty() {
        standard
            .lesion_blobs
            .iter()
            .map(|b| {
                let r = a.radius.max(0.0).floor() as usize;
                let mut c = scaled_center(b.center, a.dims);
                for (x, &d) in c.iter_mut().zip(&a.dims) {
                    if d > 2 * r {
                        *x = (*x).clamp(r, d - 1 - r);
                    }
                }
                c
            })
            .collect()
    } else {
        a.blobs.clone()
    };
    let shell = if a.no_shell {
        None
    } else {
        let (lo, hi) = match &a.shell {
            Some(s) => {
                let v: Vec<usize> = s
                    .split(',')
                    .map(|x| x.trim().parse::<usize>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| Error::InvalidParameter(format!("invalid shell '{s}'")))?;
                if v.len() != 6 {
                    return Err(Error::InvalidParameter("shell needs six integers".into()));
                }
                ([v[0], v[1], v[2]], [v[3], v[4], v[5]])
            }
            None => {
                let s = standard.bias_shell.expect("standard shell");
                (scaled_center(s.lo, a.dims), scaled_center(s.hi, a.dims))
            }
        };
        Some(Shell {
            lo,
            hi,
            effect: a.bias_effect,
        })
    };
    Ok(PhantomSpec {
        dims: a.dims,
        n_per_class: a.n_per_class,
        lesion_blobs: centers
            .into_iter()
            .map(|center| Blob {
                center,
                radius: a.radius,
                effect: a.lesion_effect,
            })
            .collect(),
        bias_shell: shell,
        noise_sd: a.noise_sd,
        seed: ctx.seed,
    })
}

fn cmd_synth(ctx: &Context, a: &SynthArgs) -> Result<()> {
    let spec = synth_spec(ctx, a)?;
    let ph = generate(&spec)?;
    let (format, data_name) = match a.format {
        FormatArg::Csv => (DataFormat::Csv, "data.csv"),
        FormatArg::F64le => (DataFormat::F64Le, "data.f64"),
    };
    let data_path = ctx.out_path(data_name);
    match format {
        DataFormat::Csv => io::write_data_csv(&data_path, &ph.dataset)?,
        DataFormat::F64Le => io::write_data_raw(&data_path, &ph.dataset)?,
    }
    let labels = ctx.out_path("labels.csv");
    let mask = ctx.out_path("mask.csv");
    let truth = ctx.out_path("truth.csv");
    io::write_labels(&labels, ph.dataset.labels())?;
    io::write_mask(&mask, &ph.grid)?;
    io::write_truth(&truth, &ph.truth, ph.grid.len())?;
    let manifest = RunManifest {
        base_dir: ctx.out.clone(),
        data: Some(data_path),
        data_format: format,
        labels: Some(labels),
        mask: Some(mask),
        truth: Some(truth),
        dims: Some(spec.dims),
        connectivity: ctx.connectivity,
        params: ctx.manifest.params.clone(),
        out: None,
    };
    manifest.write(&ctx.out_path("run.manifest"))?;
    log::info!(
        "wrote phantom with {} subjects, {} voxels, {} lesion and {} bias voxels to {}",
        ph.dataset.n_subjects(),
        ph.grid.len(),
        ph.truth.lesion.len(),
        ph.truth.bias.len(),
        ctx.out.display()
    );
    Ok(())
}

fn fit_rows(prep: &Prepared, fit: &FitResult, selected: &[usize]) -> Vec<FitRow> {
    let mut flags = vec![false; prep.zscores.z.len()];
    for &i in selected {
        flags[i] = true;
    }
    (0..flags.len())
        .map(|i| FitRow {
            t: prep.zscores.t[i],
            z: prep.zscores.z[i],
            beta: fit.state.beta[i],
            c: fit.state.c[i],
            lfdr: fit.state.lfdr[i],
            selected: flags[i],
        })
        .collect()
}

fn cmd_fit(ctx: &Context, a: &FitArgs) -> Result<()> {
    let (data, grid, _) = ctx.load()?;
    let data = training_data(ctx, data, &a.params)?;
    let mut params = resolve_params(&ctx.manifest.params, &a.params);
    params.constant_prior = a.constant_prior;
    params.validate()?;
    let options = PipelineOptions {
        connectivity: ctx.connectivity,
        params: params.clone(),
        model: model_options(&a.params),
    };
    let prep = prepare(&data, &grid, &options)?;
    log::info!(
        "two-groups model: delta0 = {:.4}, sigma0 = {:.4}, cbar = {:.4}",
        prep.model.delta0,
        prep.model.sigma0,
        prep.model.cbar
    );
    let fit = prep.fit(&params)?;
    if fit.converged {
        log::info!("EM converged after {} iterations", fit.iterations);
    } else {
        log::warn!("EM stopped after {} iterations without converging", fit.iterations);
    }
    log::info!(
        "selected {} voxels ({} lesion, {} bias)",
        fit.selected.len(),
        fit.group_lesion.len(),
        fit.group_bias.len()
    );
    io::write_fit(&ctx.out_path("fit.csv"), &grid, &fit_rows(&prep, &fit, &fit.selected))?;
    io::write_trace(&ctx.out_path("trace.csv"), &fit.state.objective_trace)
}

fn cmd_baseline(ctx: &Context, a: &BaselineArgs) -> Result<()> {
    let (data, grid, _) = ctx.load()?;
    let data = training_data(ctx, data, &a.params)?;
    let params = resolve_params(&ctx.manifest.params, &a.params);
    let method: Method = a.method.into();
    let options = PipelineOptions {
        connectivity: ctx.connectivity,
        params: params.clone(),
        model: model_options(&a.params),
    };
    let zs = crate::stats::z_scores(&data)?;
    let (result, beta, c) = match method {
        Method::Ttest => (ttest_select(&zs.t, zs.df, a.p_threshold)?, f64::NAN, f64::NAN),
        Method::Bh => {
            let p = crate::baselines::two_sided_p(&zs.t, zs.df)?;
            (bh_select(&p, a.q)?, f64::NAN, f64::NAN)
        }
        Method::LocalFdr => {
            let prep = prepare(&data, &grid, &options)?;
            let cbar = prep.model.cbar;
            let r = localfdr_select_with(&prep.likelihoods, cbar, params.gamma)?;
            (r, logit(cbar), cbar)
        }
    };
    let mut flags = vec![false; grid.len()];
    for &i in &result.selected {
        flags[i] = true;
    }
    let rows: Vec<FitRow> = (0..grid.len())
        .map(|i| FitRow {
            t: zs.t[i],
            z: zs.z[i],
            beta,
            c,
            lfdr: result.scores[i],
            selected: flags[i],
        })
        .collect();
    log::info!("{method}: selected {} voxels", result.selected.len());
    io::write_fit(&ctx.out_path(&format!("baseline_{method}.csv")), &grid, &rows)
}

/// Grid built from the fit table's own coordinates.
fn table_grid(table: &FitTable, dims: Option<[usize; 3]>) -> Result<VoxelGrid> {
    let dims = dims.unwrap_or_else(|| {
        let mut d = [1; 3];
        for c in &table.coords {
            for a in 0..3 {
                d[a] = d[a].max(c[a] + 1);
            }
        }
        d
    });
    VoxelGrid::from_coords(dims, table.coords.clone())
}

fn cmd_metrics(ctx: &Context, a: &MetricsArgs) -> Result<()> {
    let tables: Vec<FitTable> = a.fits.iter().map(|p| io::read_fit(p)).collect::<Result<_>>()?;
    for (t, p) in tables.iter().zip(&a.fits).skip(1) {
        if t.coords != tables[0].coords {
            return Err(Error::InvalidDataset(format!(
                "voxel universe of {} differs from {}",
                p.display(),
                a.fits[0].display()
            )));
        }
    }
    let grid = table_grid(&tables[0], ctx.manifest.dims)?;
    let truth_path = a.truth.clone().or_else(|| ctx.manifest.truth.clone());
    let truth = truth_path.as_deref().map(io::read_truth).transpose()?;
    let folds = SelectionFolds::new(
        tables
            .iter()
            .map(|t| FoldSelection::from_selection(&t.selected(), &t.z()))
            .collect(),
    );
    let denominator = match a.denominator {
        DenominatorArg::Paper => Denominator::Paper,
        DenominatorArg::Oracle => Denominator::Oracle,
    };
    let rows = metric_rows(&tables, &folds, truth.as_ref(), &grid, denominator)?;
    io::write_metrics(&ctx.out_path("metrics.csv"), &rows)?;
    let mut stdout = std::io::stdout().lock();
    for r in &rows {
        writeln!(stdout, "{},{},{}", r.metric, r.group, r.value).map_err(|e| Error::io("<stdout>", e))?;
    }
    Ok(())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// FDP and power (fold means) against the truth, mDC across folds when
/// there are at least two, and 3dED per group.
pub fn metric_rows(
    tables: &[FitTable],
    folds: &SelectionFolds,
    truth: Option<&Truth>,
    grid: &VoxelGrid,
    denominator: Denominator,
) -> Result<Vec<MetricRow>> {
    let mut rows = Vec::new();
    if let Some(truth) = truth {
        let all_truth = truth.non_null();
        let groups: [(&str, Vec<Vec<usize>>, &[usize]); 3] = [
            ("all", tables.iter().map(FitTable::selected).collect(), &all_truth),
            ("lesion", folds.lesion_sets(), &truth.lesion),
            ("bias", folds.bias_sets(), &truth.bias),
        ];
        for (group, sets, t) in groups.iter() {
            let (f, p): (Vec<f64>, Vec<f64>) = sets.iter().map(|s| fdp_power(s, t)).unzip();
            rows.push(MetricRow::new("fdp", group, mean(&f)));
            rows.push(MetricRow::new("power", group, mean(&p)));
        }
    }
    if folds.folds.len() >= 2 {
        let all: Vec<Vec<usize>> = tables.iter().map(FitTable::selected).collect();
        rows.push(MetricRow::new("mdc", "all", mdc(&all)?));
        let (l, b) = folds.mdc()?;
        rows.push(MetricRow::new("mdc", "lesion", l));
        rows.push(MetricRow::new("mdc", "bias", b));
    }
    let (plus, minus) = edge_density_3d(folds, grid, denominator)?;
    rows.push(MetricRow::new("eds", "lesion", plus));
    rows.push(MetricRow::new("eds", "bias", minus));
    Ok(rows)
}

pub const RENDER_LESION: u8 = 255;
pub const RENDER_BIAS: u8 = 160;
pub const RENDER_MASKED: u8 = 64;
pub const RENDER_OUTSIDE: u8 = 0;

/// Slice of the selection along `axis`; rows follow the second remaining
/// axis, columns the first.
pub fn render_slice(table: &FitTable, dims: [usize; 3], axis: usize, slice: usize) -> Result<(usize, usize, Vec<u8>)> {
    if slice >= dims[axis] {
        return Err(Error::InvalidParameter(format!(
            "slice {slice} out of range for axis of length {}",
            dims[axis]
        )));
    }
    let (u, v) = match axis {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    };
    let (w, h) = (dims[u], dims[v]);
    let mut pixels = vec![RENDER_OUTSIDE; w * h];
    for (c, r) in table.coords.iter().zip(&table.rows) {
        if c.iter().zip(&dims).any(|(x, d)| x >= d) {
            return Err(Error::InvalidGrid(format!("voxel {c:?} outside dims {dims:?}")));
        }
        if c[axis] != slice {
            continue;
        }
        pixels[c[v] * w + c[u]] = match (r.selected, r.z > 0.0) {
            (true, true) => RENDER_LESION,
            (true, false) => RENDER_BIAS,
            (false, _) => RENDER_MASKED,
        };
    }
    Ok((w, h, pixels))
}

fn cmd_render(ctx: &Context, a: &RenderArgs) -> Result<()> {
    let fit_path = a.fit.clone().unwrap_or_else(|| ctx.out_path("fit.csv"));
    let table = io::read_fit(&fit_path)?;
    let dims = a
        .dims
        .or(ctx.manifest.dims)
        .ok_or_else(|| Error::InvalidParameter("grid dims needed: pass --dims or a manifest".into()))?;
    let (axis, name) = match a.axis {
        AxisArg::I => (0, "i"),
        AxisArg::J => (1, "j"),
        AxisArg::K => (2, "k"),
    };
    let (w, h, pixels) = render_slice(&table, dims, axis, a.slice)?;
    let stem = format!("slice_{name}{}", a.slice);
    let mut pgm = format!("P5\n{w} {h}\n255\n").into_bytes();
    pgm.extend_from_slice(&pixels);
    let pgm_path = ctx.out_path(&format!("{stem}.pgm"));
    if let Some(dir) = pgm_path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(&pgm_path, pgm).map_err(|e| Error::io(&pgm_path, e))?;
    let mut csv = String::from("i,j,k,value\n");
    let (u, v) = match axis {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    };
    for row in 0..h {
        for col in 0..w {
            let mut c = [0; 3];
            c[axis] = a.slice;
            c[u] = col;
            c[v] = row;
            csv.push_str(&format!("{},{},{},{}\n", c[0], c[1], c[2], pixels[row * w + col]));
        }
    }
    write_text(&ctx.out_path(&format!("{stem}.csv")), &csv)
}

/// One ranked grid-search row.
#[derive(Debug, Clone, PartialEq)]
pub struct GridRow {
    pub lambda_pro: f64,
    pub lambda_les: f64,
    pub lambda_proles: f64,
    pub gamma: f64,
    pub objective: f64,
}

/// `fdp` when `power >= target`, otherwise `1 + (target - power)`.
pub fn fdp_at_power_score(fdp: f64, power: f64, target: f64) -> f64 {
    if power >= target {
        fdp
    } else {
        1.0 + (target - power)
    }
}

/// Orders rows best first; NaN objectives last, ties by parameters.
pub fn rank_rows(rows: &mut [GridRow], objective: Objective) {
    let key = |r: &GridRow| [r.lambda_pro, r.lambda_les, r.lambda_proles, r.gamma];
    rows.sort_by(|a, b| {
        let by_value = match (a.objective.is_nan(), b.objective.is_nan()) {
            (true, true) => std::cmp::Ordering::Equal,
            (true, false) => std::cmp::Ordering::Greater,
            (false, true) => std::cmp::Ordering::Less,
            (false, false) => match objective {
                Objective::MinFdpAtPower => a.objective.total_cmp(&b.objective),
                Objective::MaxMdc => b.objective.total_cmp(&a.objective),
            },
        };
        by_value.then_with(|| {
            key(a)
                .iter()
                .zip(key(b).iter())
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        })
    });
}

fn cmd_gridsearch(ctx: &Context, a: &GridArgs) -> Result<()> {
    for (name, list) in [
        ("lambda-pro", &a.lambda_pro),
        ("lambda-les", &a.lambda_les),
        ("lambda-proles", &a.lambda_proles),
        ("gamma", &a.gamma),
    ] {
        if list.is_empty() {
            return Err(Error::InvalidParameter(format!("--{name} needs at least one value")));
        }
    }
    let (data, grid, truth) = ctx.load()?;
    let base = ctx.manifest.params.clone();
    let options = PipelineOptions {
        connectivity: ctx.connectivity,
        params: base.clone(),
        model: ModelOptions::default(),
    };
    let preps: Vec<Prepared> = match a.objective {
        Objective::MinFdpAtPower => {
            if truth.is_none() {
                return Err(Error::InvalidParameter("min-fdp-at-power needs a truth file in the manifest".into()));
            }
            vec![prepare(&data, &grid, &options)?]
        }
        Objective::MaxMdc => (0..a.folds)
            .map(|k| {
                let keep = cv_training_subjects(data.labels(), a.folds, k, ctx.seed)?;
                prepare(&data.subset(&keep)?, &grid, &options)
            })
            .collect::<Result<_>>()?,
    };
    let triples: Vec<[f64; 3]> = a
        .lambda_pro
        .iter()
        .flat_map(|&p| {
            a.lambda_les
                .iter()
                .flat_map(move |&l| a.lambda_proles.iter().map(move |&pl| [p, l, pl]))
        })
        .collect();

    // Fits are independent; results land in their slot so ordering is fixed.
    let results: Vec<Mutex<Option<Vec<f64>>>> = triples.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..ctx.jobs.min(triples.len()) {
            scope.spawn(|| loop {
                let idx = next.fetch_add(1, Ordering::SeqCst);
                if idx >= triples.len() {
                    break;
                }
                let [p, l, pl] = triples[idx];
                let mut params = base.clone();
                params.lambda_pro = p;
                params.lambda_les = l;
                params.lambda_proles = pl;
                let values = evaluate_triple(&preps, &params, &a.gamma, a, truth.as_ref());
                *results[idx].lock().expect("result slot") = Some(values);
            });
        }
    });

    let mut rows = Vec::with_capacity(triples.len() * a.gamma.len());
    for (t, slot) in triples.iter().zip(results) {
        let values = slot.into_inner().expect("result slot").expect("evaluated");
        for (&g, &v) in a.gamma.iter().zip(&values) {
            rows.push(GridRow {
                lambda_pro: t[0],
                lambda_les: t[1],
                lambda_proles: t[2],
                gamma: g,
                objective: v,
            });
        }
    }
    rank_rows(&mut rows, a.objective);
    let mut csv = String::from("rank,lambda_pro,lambda_les,lambda_proles,gamma,objective\n");
    for (i, r) in rows.iter().enumerate() {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            i + 1,
            r.lambda_pro,
            r.lambda_les,
            r.lambda_proles,
            r.gamma,
            r.objective
        ));
    }
    if let Some(best) = rows.first() {
        log::info!(
            "best: lambda_pro = {}, lambda_les = {}, lambda_proles = {}, gamma = {}, objective = {}",
            best.lambda_pro,
            best.lambda_les,
            best.lambda_proles,
            best.gamma,
            best.objective
        );
    }
    write_text(&ctx.out_path("gridsearch.csv"), &csv)
}

/// Objective for every gamma of one penalty triple; NaN when a fit fails.
fn evaluate_triple(
    preps: &[Prepared],
    params: &HsParams,
    gammas: &[f64],
    a: &GridArgs,
    truth: Option<&Truth>,
) -> Vec<f64> {
    let fits: Result<Vec<FitResult>> = preps.iter().map(|p| p.fit(params)).collect();
    let fits = match fits {
        Ok(f) => f,
        Err(e) => {
            log::warn!(
                "fit failed for ({}, {}, {}): {e}",
                params.lambda_pro,
                params.lambda_les,
                params.lambda_proles
            );
            return vec![f64::NAN; gammas.len()];
        }
    };
    gammas
        .iter()
        .map(|&g| {
            let selections: Result<Vec<Vec<usize>>> = fits
                .iter()
                .zip(preps)
                .map(|(f, p)| select_features(&f.state.lfdr, &p.zscores.z, g).map(|s| s.selected))
                .collect();
            let Ok(selections) = selections else {
                return f64::NAN;
            };
            match a.objective {
                Objective::MinFdpAtPower => {
                    let truth = truth.expect("truth checked").non_null();
                    let (fdp, power) = fdp_power(&selections[0], &truth);
                    fdp_at_power_score(fdp, power, a.target_power)
                }
                Objective::MaxMdc => mdc(&selections).unwrap_or(f64::NAN),
            }
        })
        .collect()
}
