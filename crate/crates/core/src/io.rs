//! File formats: mask, data, labels, truth, fit results, traces, metric
//! reports and the run manifest.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::fdrhs::HsParams;
use crate::phantom::Truth;
use crate::stats::Dataset;
use crate::voxelgrid::{Connectivity, VoxelGrid};

fn open_reader(path: &Path) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(file))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    Error::schema(path, line, e.to_string())
}

fn check_header(path: &Path, reader: &mut csv::Reader<File>, expected: &[&str]) -> Result<()> {
    let header = reader.headers().map_err(|e| csv_err(path, e))?;
    let got: Vec<&str> = header.iter().collect();
    if got != expected {
        return Err(Error::schema(
            path,
            1,
            format!("expected header '{}', found '{}'", expected.join(","), got.join(",")),
        ));
    }
    Ok(())
}

/// Records with their 1-based line numbers.
fn records(path: &Path, reader: &mut csv::Reader<File>) -> Result<Vec<(usize, csv::StringRecord)>> {
    let mut out = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        out.push((line, rec));
    }
    Ok(out)
}

fn parse<T: std::str::FromStr>(path: &Path, line: usize, field: &str, what: &str) -> Result<T> {
    field
        .parse()
        .map_err(|_| Error::schema(path, line, format!("invalid {what} '{field}'")))
}

fn check_ids(path: &Path, ids: &[(usize, usize)]) -> Result<()> {
    for (expected, &(line, id)) in ids.iter().enumerate() {
        if id != expected {
            return Err(Error::schema(
                path,
                line,
                format!("voxel ids must be 0..p in order; expected {expected}, found {id}"),
            ));
        }
    }
    Ok(())
}

pub fn write_mask(path: &Path, grid: &VoxelGrid) -> Result<()> {
    let mut w = create(path)?;
    let res = (|| -> std::io::Result<()> {
        writeln!(w, "voxel_id,i,j,k")?;
        for (id, c) in grid.coords().iter().enumerate() {
            writeln!(w, "{id},{},{},{}", c[0], c[1], c[2])?;
        }
        w.flush()
    })();
    res.map_err(|e| Error::io(path, e))
}

pub fn read_mask(path: &Path, dims: [usize; 3]) -> Result<VoxelGrid> {
    let mut r = open_reader(path)?;
    check_header(path, &mut r, &["voxel_id", "i", "j", "k"])?;
    let mut ids = Vec::new();
    let mut coords = Vec::new();
    for (line, rec) in records(path, &mut r)? {
        if rec.len() != 4 {
            return Err(Error::schema(path, line, "expected 4 fields"));
        }
        ids.push((line, parse(path, line, &rec[0], "voxel id")?));
        let c: [usize; 3] = [
            parse(path, line, &rec[1], "coordinate")?,
            parse(path, line, &rec[2], "coordinate")?,
            parse(path, line, &rec[3], "coordinate")?,
        ];
        coords.push(c);
    }
    check_ids(path, &ids)?;
    VoxelGrid::from_coords(dims, coords).map_err(|e| Error::schema(path, 0, e.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DataFormat {
    #[default]
    Csv,
    /// Row-major little-endian f64, subjects by voxels, no header.
    F64Le,
}

impl std::str::FromStr for DataFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(DataFormat::Csv),
            "f64le" | "raw" => Ok(DataFormat::F64Le),
            other => Err(Error::InvalidParameter(format!("unknown data format '{other}'"))),
        }
    }
}

impl std::fmt::Display for DataFormat {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DataFormat::Csv => "csv",
            DataFormat::F64Le => "f64le",
        })
    }
}

/// Header row of voxel ids, then one row per subject.
pub fn write_data_csv(path: &Path, data: &Dataset) -> Result<()> {
    let mut w = create(path)?;
    let res = (|| -> std::io::Result<()> {
        let header: Vec<String> = (0..data.n_voxels()).map(|i| i.to_string()).collect();
        writeln!(w, "{}", header.join(","))?;
        let mut line = String::new();
        for s in 0..data.n_subjects() {
            line.clear();
            for (i, v) in data.row(s).iter().enumerate() {
                if i > 0 {
                    line.push(',');
                }
                line.push_str(&v.to_string());
            }
            writeln!(w, "{line}")?;
        }
        w.flush()
    })();
    res.map_err(|e| Error::io(path, e))
}

pub fn write_data_raw(path: &Path, data: &Dataset) -> Result<()> {
    let mut w = create(path)?;
    let res = (|| -> std::io::Result<()> {
        for v in data.values() {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()
    })();
    res.map_err(|e| Error::io(path, e))
}

/// Matrix only; labels are attached by [`read_dataset`].
pub fn read_data_csv(path: &Path, n_voxels: usize) -> Result<(usize, Vec<f64>)> {
    let mut r = open_reader(path)?;
    let header = r.headers().map_err(|e| csv_err(path, e))?.clone();
    if header.len() != n_voxels {
        return Err(Error::schema(
            path,
            1,
            format!("expected {n_voxels} voxel columns, found {}", header.len()),
        ));
    }
    for (i, h) in header.iter().enumerate() {
        if h.parse::<usize>().ok() != Some(i) {
            return Err(Error::schema(path, 1, format!("column {i} must be voxel id {i}, found '{h}'")));
        }
    }
    let mut x = Vec::new();
    let mut n = 0;
    for (line, rec) in records(path, &mut r)? {
        if rec.len() != n_voxels {
            return Err(Error::schema(path, line, format!("expected {n_voxels} fields, found {}", rec.len())));
        }
        for f in rec.iter() {
            let v: f64 = parse(path, line, f, "intensity")?;
            if !v.is_finite() {
                return Err(Error::schema(path, line, format!("non-finite intensity '{f}'")));
            }
            x.push(v);
        }
        n += 1;
    }
    Ok((n, x))
}

pub fn read_data_raw(path: &Path, n_subjects: usize, n_voxels: usize) -> Result<Vec<f64>> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let expected = n_subjects * n_voxels * 8;
    if bytes.len() != expected {
        return Err(Error::schema(
            path,
            0,
            format!("expected {expected} bytes for {n_subjects}x{n_voxels} f64 values, found {}", bytes.len()),
        ));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

pub fn write_labels(path: &Path, labels: &[i8]) -> Result<()> {
    let mut w = create(path)?;
    let res = (|| -> std::io::Result<()> {
        writeln!(w, "subject_id,label")?;
        for (s, l) in labels.iter().enumerate() {
            writeln!(w, "{s},{}", if *l > 0 { "+1" } else { "-1" })?;
        }
        w.flush()
    })();
    res.map_err(|e| Error::io(path, e))
}

pub fn read_labels(path: &Path) -> Result<Vec<i8>> {
    let mut r = open_reader(path)?;
    check_header(path, &mut r, &["subject_id", "label"])?;
    let mut ids = Vec::new();
    let mut labels = Vec::new();
    for (line, rec) in records(path, &mut r)? {
        if rec.len() != 2 {
            return Err(Error::schema(path, line, "expected 2 fields"));
        }
        ids.push((line, parse::<usize>(path, line, &rec[0], "subject id")?));
        labels.push(match &rec[1] {
            "+1" | "1" => 1,
            "-1" => -1,
            other => return Err(Error::schema(path, line, format!("label must be +1 or -1, found '{other}'"))),
        });
    }
    for (expected, &(line, id)) in ids.iter().enumerate() {
        if id != expected {
            return Err(Error::schema(path, line, format!("subject ids must be 0..N in order, found {id}")));
        }
    }
    Ok(labels)
}

/// Loads data and labels into a validated [`Dataset`].
pub fn read_dataset(data: &Path, format: DataFormat, labels: &Path, n_voxels: usize) -> Result<Dataset> {
    let y = read_labels(labels)?;
    let (n, x) = match format {
        DataFormat::Csv => read_data_csv(data, n_voxels)?,
        DataFormat::F64Le => (y.len(), read_data_raw(data, y.len(), n_voxels)?),
    };
    if n != y.len() {
        return Err(Error::schema(
            data,
            0,
            format!("{n} data rows but {} labels in {}", y.len(), labels.display()),
        ));
    }
    Dataset::new(n, n_voxels, x, y).map_err(|e| Error::schema(data, 0, e.to_string()))
}

pub fn write_truth(path: &Path, truth: &Truth, n_voxels: usize) -> Result<()> {
    let mut w = create(path)?;
    let res = (|| -> std::io::Result<()> {
        writeln!(w, "voxel_id,truth_group")?;
        for i in 0..n_voxels {
            writeln!(w, "{i},{}", truth.group(i))?;
        }
        w.flush()
    })();
    res.map_err(|e| Error::io(path, e))
}

pub fn read_truth(path: &Path) -> Result<Truth> {
    let mut r = open_reader(path)?;
    check_header(path, &mut r, &["voxel_id", "truth_group"])?;
    let mut truth = Truth::default();
    let mut ids = Vec::new();
    for (line, rec) in records(path, &mut r)? {
        if rec.len() != 2 {
            return Err(Error::schema(path, line, "expected 2 fields"));
        }
        let id: usize = parse(path, line, &rec[0], "voxel id")?;
        ids.push((line, id));
        match &rec[1] {
            "lesion" => truth.lesion.push(id),
            "bias" => truth.bias.push(id),
            "null" => {}
            other => {
                return Err(Error::schema(path, line, format!("truth_group must be lesion, bias or null, found '{other}'")))
            }
        }
    }
    check_ids(path, &ids)?;
    Ok(truth)
}

/// One row of a fit or baseline result.
#[derive(Debug, Clone, PartialEq)]
pub struct FitRow {
    pub t: f64,
    pub z: f64,
    pub beta: f64,
    pub c: f64,
    /// Posterior null probability, or the p-value for p-value baselines.
    pub lfdr: f64,
    pub selected: bool,
}

pub const FIT_HEADER: [&str; 11] = ["voxel_id", "i", "j", "k", "t", "z", "beta", "c", "lfdr", "selected", "group"];

pub fn group_label(selected: bool, z: f64) -> &'static str {
    match (selected, z > 0.0) {
        (false, _) => "none",
        (true, true) => "lesion",
        (true, false) => "bias",
    }
}

pub fn write_fit(path: &Path, grid: &VoxelGrid, rows: &[FitRow]) -> Result<()> {
    if rows.len() != grid.len() {
        return Err(Error::Dimension {
            context: "fit rows",
            expected: grid.len(),
            actual: rows.len(),
        });
    }
    let mut w = create(path)?;
    let res = (|| -> std::io::Result<()> {
        writeln!(w, "{}", FIT_HEADER.join(","))?;
        for (id, r) in rows.iter().enumerate() {
            let c = grid.coord(id);
            writeln!(
                w,
                "{id},{},{},{},{},{},{},{},{},{},{}",
                c[0],
                c[1],
                c[2],
                r.t,
                r.z,
                r.beta,
                r.c,
                r.lfdr,
                u8::from(r.selected),
                group_label(r.selected, r.z)
            )?;
        }
        w.flush()
    })();
    res.map_err(|e| Error::io(path, e))
}

/// Fit table together with the voxel coordinates it was written with.
#[derive(Debug, Clone, PartialEq)]
pub struct FitTable {
    pub coords: Vec<[usize; 3]>,
    pub rows: Vec<FitRow>,
}

impl FitTable {
    pub fn selected(&self) -> Vec<usize> {
        (0..self.rows.len()).filter(|&i| self.rows[i].selected).collect()
    }

    pub fn z(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.z).collect()
    }
}

pub fn read_fit(path: &Path) -> Result<FitTable> {
    let mut r = open_reader(path)?;
    check_header(path, &mut r, &FIT_HEADER)?;
    let mut ids = Vec::new();
    let mut table = FitTable {
        coords: Vec::new(),
        rows: Vec::new(),
    };
    for (line, rec) in records(path, &mut r)? {
        if rec.len() != FIT_HEADER.len() {
            return Err(Error::schema(path, line, format!("expected {} fields", FIT_HEADER.len())));
        }
        ids.push((line, parse(path, line, &rec[0], "voxel id")?));
        table.coords.push([
            parse(path, line, &rec[1], "coordinate")?,
            parse(path, line, &rec[2], "coordinate")?,
            parse(path, line, &rec[3], "coordinate")?,
        ]);
        let selected = match &rec[9] {
            "1" => true,
            "0" => false,
            other => return Err(Error::schema(path, line, format!("selected must be 0 or 1, found '{other}'"))),
        };
        let row = FitRow {
            t: parse(path, line, &rec[4], "t")?,
            z: parse(path, line, &rec[5], "z")?,
            beta: parse(path, line, &rec[6], "beta")?,
            c: parse(path, line, &rec[7], "c")?,
            lfdr: parse(path, line, &rec[8], "lfdr")?,
            selected,
        };
        if &rec[10] != group_label(selected, row.z) {
            return Err(Error::schema(path, line, format!("group '{}' inconsistent with selected/z", &rec[10])));
        }
        table.rows.push(row);
    }
    check_ids(path, &ids)?;
    Ok(table)
}

pub fn write_trace(path: &Path, trace: &[f64]) -> Result<()> {
    let mut w = create(path)?;
    let res = (|| -> std::io::Result<()> {
        writeln!(w, "iteration,objective")?;
        for (i, v) in trace.iter().enumerate() {
            writeln!(w, "{i},{v}")?;
        }
        w.flush()
    })();
    res.map_err(|e| Error::io(path, e))
}

pub fn read_trace(path: &Path) -> Result<Vec<f64>> {
    let mut r = open_reader(path)?;
    check_header(path, &mut r, &["iteration", "objective"])?;
    records(path, &mut r)?
        .into_iter()
        .map(|(line, rec)| parse(path, line, &rec[1], "objective"))
        .collect()
}

/// `metric,group,value` row.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub metric: String,
    pub group: String,
    pub value: f64,
}

impl MetricRow {
    pub fn new(metric: &str, group: &str, value: f64) -> Self {
        Self {
            metric: metric.into(),
            group: group.into(),
            value,
        }
    }
}

pub fn write_metrics(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut w = create(path)?;
    let res = (|| -> std::io::Result<()> {
        writeln!(w, "metric,group,value")?;
        for r in rows {
            writeln!(w, "{},{},{}", r.metric, r.group, r.value)?;
        }
        w.flush()
    })();
    res.map_err(|e| Error::io(path, e))
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRow>> {
    let mut r = open_reader(path)?;
    check_header(path, &mut r, &["metric", "group", "value"])?;
    records(path, &mut r)?
        .into_iter()
        .map(|(line, rec)| {
            if rec.len() != 3 {
                return Err(Error::schema(path, line, "expected 3 fields"));
            }
            Ok(MetricRow::new(&rec[0], &rec[1], parse(path, line, &rec[2], "value")?))
        })
        .collect()
}

/// Parsed `key = value` file. Paths are resolved against the manifest's
/// directory.
#[derive(Debug, Clone, PartialEq)]
pub struct RunManifest {
    pub base_dir: PathBuf,
    pub data: Option<PathBuf>,
    pub data_format: DataFormat,
    pub labels: Option<PathBuf>,
    pub mask: Option<PathBuf>,
    pub truth: Option<PathBuf>,
    pub dims: Option<[usize; 3]>,
    pub connectivity: Connectivity,
    pub params: HsParams,
    pub out: Option<PathBuf>,
}

impl Default for RunManifest {
    fn default() -> Self {
        Self {
            base_dir: PathBuf::from("."),
            data: None,
            data_format: DataFormat::Csv,
            labels: None,
            mask: None,
            truth: None,
            dims: None,
            connectivity: Connectivity::Face6,
            params: HsParams::default(),
            out: None,
        }
    }
}

pub fn parse_dims(s: &str) -> Result<[usize; 3]> {
    let parts: Vec<&str> = s.split(|c| c == ',' || c == 'x').map(str::trim).collect();
    let dims: Vec<usize> = parts
        .iter()
        .map(|p| p.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::InvalidParameter(format!("invalid dims '{s}'")))?;
    match dims.as_slice() {
        &[a, b, c] if a > 0 && b > 0 && c > 0 => Ok([a, b, c]),
        _ => Err(Error::InvalidParameter(format!("dims must be three positive integers, got '{s}'"))),
    }
}

impl RunManifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf);
        Self::parse(&text, &base, path)
    }

    pub fn parse(text: &str, base_dir: &Path, source: &Path) -> Result<Self> {
        let mut m = RunManifest {
            base_dir: base_dir.to_path_buf(),
            ..Self::default()
        };
        let mut seen = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line_no = n + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::schema(source, line_no, "expected 'key = value'"))?;
            let (key, value) = (key.trim(), value.trim());
            if seen.insert(key.to_string(), line_no).is_some() {
                return Err(Error::schema(source, line_no, format!("duplicate key '{key}'")));
            }
            let bad = |e: Error| Error::schema(source, line_no, e.to_string());
            let num = |v: &str| -> Result<f64> {
                v.parse().map_err(|_| Error::schema(source, line_no, format!("invalid number '{v}'")))
            };
            let int = |v: &str| -> Result<usize> {
                v.parse().map_err(|_| Error::schema(source, line_no, format!("invalid integer '{v}'")))
            };
            let path = |v: &str| Some(base_dir.join(v));
            match key {
                "data" => m.data = path(value),
                "data_format" => m.data_format = value.parse().map_err(bad)?,
                "labels" => m.labels = path(value),
                "mask" => m.mask = path(value),
                "truth" => m.truth = path(value),
                "out" => m.out = path(value),
                "dims" => m.dims = Some(parse_dims(value).map_err(bad)?),
                "connectivity" => m.connectivity = value.parse().map_err(bad)?,
                "lambda_pro" => m.params.lambda_pro = num(value)?,
                "lambda_les" => m.params.lambda_les = num(value)?,
                "lambda_proles" => m.params.lambda_proles = num(value)?,
                "gamma" => m.params.gamma = num(value)?,
                "em_max_iter" => m.params.em_max_iter = int(value)?,
                "em_tol" => m.params.em_tol = num(value)?,
                "beta_clamp" => m.params.beta_clamp = num(value)?,
                "w_floor" => m.params.w_floor = num(value)?,
                other => return Err(Error::schema(source, line_no, format!("unknown key '{other}'"))),
            }
        }
        Ok(m)
    }

    /// Writes paths relative to `dir` when they live under it.
    pub fn write(&self, path: &Path) -> Result<()> {
        let dir = path.parent().unwrap_or(Path::new(""));
        let rel = |p: &Path| p.strip_prefix(dir).unwrap_or(p).display().to_string();
        let mut out = String::from("# fdrhs run manifest\n");
        for (key, p) in [
            ("data", &self.data),
            ("labels", &self.labels),
            ("mask", &self.mask),
            ("truth", &self.truth),
        ] {
            if let Some(p) = p {
                out.push_str(&format!("{key} = {}\n", rel(p)));
            }
        }
        out.push_str(&format!("data_format = {}\n", self.data_format));
        if let Some([a, b, c]) = self.dims {
            out.push_str(&format!("dims = {a},{b},{c}\n"));
        }
        out.push_str(&format!("connectivity = {}\n", self.connectivity));
        let p = &self.params;
        out.push_str(&format!(
            "lambda_pro = {}\nlambda_les = {}\nlambda_proles = {}\ngamma = {}\n",
            p.lambda_pro, p.lambda_les, p.lambda_proles, p.gamma
        ));
        let mut w = create(path)?;
        w.write_all(out.as_bytes()).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
    }

    pub fn require<'a>(&self, field: &'a str, value: &'a Option<PathBuf>) -> Result<&'a Path> {
        value
            .as_deref()
            .ok_or_else(|| Error::InvalidParameter(format!("manifest does not set '{field}'")))
    }
}
