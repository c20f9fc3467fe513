//! Tabular series ingestion and windowing.
//!
//! A [`RawTable`] holds column-major values with `None` for missing cells.
//! After interpolation it is split chronologically by rows, normalised with
//! statistics from the training rows, and windowed into [`SeriesDataset`]s
//! whose samples are `[T × d]` blocks flattened into `(channel, lag)` features.

use std::collections::BTreeMap;
use std::path::Path;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{AmnError, Result};
use crate::metrics::naive_mae;
use crate::rng::seeded;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnKind {
    Numeric,
    Categorical,
    Timestamp,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColumnSpec {
    pub name: String,
    pub kind: ColumnKind,
}

/// Declared columns of a CSV file; columns not listed are ignored.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schema {
    pub columns: Vec<ColumnSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Column {
    pub name: String,
    pub values: Vec<Option<f64>>,
    /// Category labels by code, for categorical columns.
    pub vocab: Option<Vec<String>>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RawTable {
    pub columns: Vec<Column>,
    pub timestamps: Option<Vec<String>>,
}

impl RawTable {
    pub fn rows(&self) -> usize {
        self.columns.first().map_or(0, |c| c.values.len())
    }

    pub fn column(&self, name: &str) -> Result<&Column> {
        self.columns
            .iter()
            .find(|c| c.name == name)
            .ok_or_else(|| AmnError::Data(format!("unknown column {name:?}")))
    }

    pub fn column_names(&self) -> Vec<String> {
        self.columns.iter().map(|c| c.name.clone()).collect()
    }

    pub fn from_columns(columns: Vec<(String, Vec<f64>)>) -> Result<Self> {
        let rows = columns.first().map_or(0, |c| c.1.len());
        if columns.iter().any(|c| c.1.len() != rows) {
            return Err(AmnError::Data("columns have different lengths".into()));
        }
        Ok(RawTable {
            columns: columns
                .into_iter()
                .map(|(name, v)| Column {
                    name,
                    values: v.into_iter().map(Some).collect(),
                    vocab: None,
                })
                .collect(),
            timestamps: None,
        })
    }

    pub fn slice_rows(&self, range: std::ops::Range<usize>) -> RawTable {
        RawTable {
            columns: self
                .columns
                .iter()
                .map(|c| Column {
                    name: c.name.clone(),
                    values: c.values[range.clone()].to_vec(),
                    vocab: c.vocab.clone(),
                })
                .collect(),
            timestamps: self.timestamps.as_ref().map(|t| t[range.clone()].to_vec()),
        }
    }

    pub fn has_missing(&self) -> bool {
        self.columns.iter().any(|c| c.values.iter().any(Option::is_none))
    }

    /// Write as CSV with full-precision numbers; categorical codes are
    /// written back as their labels.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)
            .map_err(|e| AmnError::io(path, std::io::Error::other(e)))?;
        let mut header: Vec<String> = Vec::new();
        if self.timestamps.is_some() {
            header.push("timestamp".into());
        }
        header.extend(self.column_names());
        w.write_record(&header)
            .map_err(|e| AmnError::io(path, std::io::Error::other(e)))?;
        for r in 0..self.rows() {
            let mut rec: Vec<String> = Vec::with_capacity(header.len());
            if let Some(ts) = &self.timestamps {
                rec.push(ts[r].clone());
            }
            for c in &self.columns {
                rec.push(match (c.values[r], &c.vocab) {
                    (None, _) => String::new(),
                    (Some(v), Some(vocab)) => vocab[v as usize].clone(),
                    (Some(v), None) => format!("{v:?}"),
                });
            }
            w.write_record(&rec)
                .map_err(|e| AmnError::io(path, std::io::Error::other(e)))?;
        }
        w.flush().map_err(|e| AmnError::io(path, e))?;
        Ok(())
    }
}

fn is_missing(cell: &str) -> bool {
    matches!(
        cell.trim(),
        "" | "NA" | "N/A" | "NaN" | "nan" | "null" | "NULL" | "?"
    )
}

/// Read a CSV with a header row.
///
/// Without a schema every column is numeric if all observed cells parse as
/// numbers, categorical otherwise. Categorical columns are coded by sorted
/// label order unless `vocabularies` pins an existing coding.
pub fn load_csv(
    path: &Path,
    schema: Option<&Schema>,
    vocabularies: Option<&BTreeMap<String, Vec<String>>>,
) -> Result<RawTable> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_path(path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => AmnError::io(
                path,
                std::io::Error::new(std::io::ErrorKind::NotFound, e.to_string()),
            ),
            _ => AmnError::Data(format!("{}: {e}", path.display())),
        })?;
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| AmnError::Data(format!("{}: {e}", path.display())))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    if header.is_empty() || header.iter().all(|h| h.parse::<f64>().is_ok()) {
        return Err(AmnError::Data(format!(
            "{}: missing header row (first row is numeric)",
            path.display()
        )));
    }
    let mut cells: Vec<Vec<String>> = vec![Vec::new(); header.len()];
    for (r, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| AmnError::Data(format!("{} row {}: {e}", path.display(), r + 2)))?;
        for (c, cell) in rec.iter().enumerate() {
            cells[c].push(cell.to_string());
        }
    }

    let specs: Vec<ColumnSpec> = match schema {
        Some(s) => s.columns.clone(),
        None => header
            .iter()
            .enumerate()
            .map(|(c, name)| ColumnSpec {
                name: name.clone(),
                kind: if cells[c]
                    .iter()
                    .all(|v| is_missing(v) || v.trim().parse::<f64>().is_ok())
                {
                    ColumnKind::Numeric
                } else {
                    ColumnKind::Categorical
                },
            })
            .collect(),
    };

    let mut table = RawTable::default();
    for spec in &specs {
        let c = header.iter().position(|h| *h == spec.name).ok_or_else(|| {
            AmnError::Data(format!(
                "{}: unknown column {:?} (header has {:?})",
                path.display(),
                spec.name,
                header
            ))
        })?;
        match spec.kind {
            ColumnKind::Timestamp => {
                table.timestamps = Some(cells[c].iter().map(|s| s.trim().to_string()).collect());
            }
            ColumnKind::Numeric => {
                let values = cells[c]
                    .iter()
                    .enumerate()
                    .map(|(r, v)| {
                        if is_missing(v) {
                            return Ok(None);
                        }
                        v.trim().parse::<f64>().map(Some).map_err(|_| {
                            AmnError::Data(format!(
                                "{}: unparseable cell {:?} at row {}, column {:?}",
                                path.display(),
                                v,
                                r + 2,
                                spec.name
                            ))
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                table.columns.push(Column {
                    name: spec.name.clone(),
                    values,
                    vocab: None,
                });
            }
            ColumnKind::Categorical => {
                let vocab: Vec<String> = match vocabularies.and_then(|v| v.get(&spec.name)) {
                    Some(v) => v.clone(),
                    None => {
                        let mut v: Vec<String> = cells[c]
                            .iter()
                            .filter(|s| !is_missing(s))
                            .map(|s| s.trim().to_string())
                            .collect();
                        v.sort();
                        v.dedup();
                        v
                    }
                };
                let values = cells[c]
                    .iter()
                    .enumerate()
                    .map(|(r, s)| {
                        if is_missing(s) {
                            return Ok(None);
                        }
                        vocab
                            .iter()
                            .position(|v| v == s.trim())
                            .map(|i| Some(i as f64))
                            .ok_or_else(|| {
                                AmnError::Data(format!(
                                    "{}: unknown category {:?} at row {}, column {:?}",
                                    path.display(),
                                    s,
                                    r + 2,
                                    spec.name
                                ))
                            })
                    })
                    .collect::<Result<Vec<_>>>()?;
                table.columns.push(Column {
                    name: spec.name.clone(),
                    values,
                    vocab: Some(vocab),
                });
            }
        }
    }
    if table.columns.is_empty() {
        return Err(AmnError::Data(format!("{}: no value columns", path.display())));
    }
    Ok(table)
}

/// Linear interpolation inside each column; leading and trailing gaps take
/// the nearest observed value.
pub fn interpolate_missing(table: &RawTable) -> Result<RawTable> {
    let mut out = table.clone();
    for col in &mut out.columns {
        let observed: Vec<usize> = (0..col.values.len())
            .filter(|&i| col.values[i].is_some())
            .collect();
        let (&first, &last) = match (observed.first(), observed.last()) {
            (Some(f), Some(l)) => (f, l),
            _ => {
                return Err(AmnError::Data(format!(
                    "column {:?} has no observed values",
                    col.name
                )))
            }
        };
        let v = |i: usize, vals: &[Option<f64>]| vals[i].expect("observed");
        let fill_first = v(first, &col.values);
        let fill_last = v(last, &col.values);
        for i in 0..first {
            col.values[i] = Some(fill_first);
        }
        for i in last + 1..col.values.len() {
            col.values[i] = Some(fill_last);
        }
        for pair in observed.windows(2) {
            let (a, b) = (pair[0], pair[1]);
            let (va, vb) = (v(a, &col.values), v(b, &col.values));
            for i in a + 1..b {
                let t = (i - a) as f64 / (b - a) as f64;
                col.values[i] = Some(va + t * (vb - va));
            }
        }
    }
    Ok(out)
}

/// Windowed samples: `samples` is `[N × T × d]` row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeriesDataset {
    pub channel_names: Vec<String>,
    /// Flattened `(channel, lag)` names, lag-major: `<channel>_t<lag>`.
    pub feature_names: Vec<String>,
    pub window: usize,
    pub samples: Vec<f64>,
    pub targets: Vec<f64>,
    /// Source-table row of each sample's target.
    pub target_rows: Vec<usize>,
    /// Scaling applied to `samples` and `targets`, if any.
    pub norm_meta: Option<NormMeta>,
}

impl SeriesDataset {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.channel_names.len()
    }

    pub fn features(&self) -> usize {
        self.window * self.channels()
    }

    /// The flattened features of sample `i`.
    pub fn sample(&self, i: usize) -> &[f64] {
        let d = self.features();
        &self.samples[i * d..(i + 1) * d]
    }

    /// All values of flattened feature `j`, one per sample.
    pub fn feature_column(&self, j: usize) -> Vec<f64> {
        (0..self.len()).map(|i| self.sample(i)[j]).collect()
    }

    /// Subset of samples in the given order.
    pub fn select(&self, indices: &[usize]) -> SeriesDataset {
        let mut samples = Vec::with_capacity(indices.len() * self.features());
        for &i in indices {
            samples.extend_from_slice(self.sample(i));
        }
        SeriesDataset {
            channel_names: self.channel_names.clone(),
            feature_names: self.feature_names.clone(),
            window: self.window,
            samples,
            targets: indices.iter().map(|&i| self.targets[i]).collect(),
            target_rows: indices.iter().map(|&i| self.target_rows[i]).collect(),
            norm_meta: self.norm_meta.clone(),
        }
    }

    pub fn normalized(&self, meta: &NormMeta) -> Result<SeriesDataset> {
        if self.norm_meta.is_some() {
            return Err(AmnError::Data("dataset is already normalised".into()));
        }
        let mut out = self.transform(meta, |s, v| s.apply(v))?;
        out.norm_meta = Some(meta.clone());
        Ok(out)
    }

    /// Undo the stored normalisation.
    pub fn denormalized(&self) -> Result<SeriesDataset> {
        let meta = self
            .norm_meta
            .as_ref()
            .ok_or_else(|| AmnError::Data("dataset is not normalised".into()))?;
        let mut out = self.transform(meta, |s, v| s.invert(v))?;
        out.norm_meta = None;
        Ok(out)
    }

    fn transform(&self, meta: &NormMeta, f: impl Fn(&ChannelStats, f64) -> f64) -> Result<SeriesDataset> {
        let stats = meta.channel_stats(&self.channel_names)?;
        let d = self.channels();
        let mut out = self.clone();
        for (k, v) in out.samples.iter_mut().enumerate() {
            *v = f(stats[k % d], *v);
        }
        for t in out.targets.iter_mut() {
            *t = f(&meta.target, *t);
        }
        Ok(out)
    }
}

/// Cut `table` into windows of `window` rows predicting `target` at
/// `horizon` rows after the window's last row.
pub fn window(
    table: &RawTable,
    window: usize,
    target: &str,
    inputs: &[String],
    horizon: usize,
) -> Result<SeriesDataset> {
    if window < 1 || horizon < 1 {
        return Err(AmnError::Config(format!(
            "window ({window}) and horizon ({horizon}) must be >= 1"
        )));
    }
    let rows = table.rows();
    if rows < window + horizon {
        return Err(AmnError::Data(format!(
            "table has {rows} rows, need at least window + horizon = {}",
            window + horizon
        )));
    }
    if table.has_missing() {
        return Err(AmnError::Data("missing values must be interpolated before windowing".into()));
    }
    let target_col = table.column(target)?;
    let cols: Vec<&Column> = inputs
        .iter()
        .map(|n| table.column(n))
        .collect::<Result<_>>()?;
    if cols.is_empty() {
        return Err(AmnError::Config("at least one input column is required".into()));
    }
    let n = rows - window - horizon + 1;
    let d = cols.len();
    let mut samples = Vec::with_capacity(n * window * d);
    let mut targets = Vec::with_capacity(n);
    let mut target_rows = Vec::with_capacity(n);
    for i in 0..n {
        for t in 0..window {
            for c in &cols {
                samples.push(c.values[i + t].expect("interpolated"));
            }
        }
        let tr = i + window - 1 + horizon;
        targets.push(target_col.values[tr].expect("interpolated"));
        target_rows.push(tr);
    }
    let feature_names = (0..window)
        .flat_map(|t| inputs.iter().map(move |c| format!("{c}_t{t}")))
        .collect();
    Ok(SeriesDataset {
        channel_names: inputs.to_vec(),
        feature_names,
        window,
        samples,
        targets,
        target_rows,
        norm_meta: None,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormScheme {
    Zscore,
    Minmax,
}

/// `normalised = (raw − shift) / scale`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub name: String,
    pub shift: f64,
    pub scale: f64,
}

impl ChannelStats {
    pub fn identity(name: &str) -> Self {
        ChannelStats {
            name: name.to_string(),
            shift: 0.0,
            scale: 1.0,
        }
    }

    pub fn apply(&self, v: f64) -> f64 {
        (v - self.shift) / self.scale
    }

    pub fn invert(&self, v: f64) -> f64 {
        v * self.scale + self.shift
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormMeta {
    pub scheme: NormScheme,
    pub channels: Vec<ChannelStats>,
    pub target: ChannelStats,
    /// Channels left unscaled because they were constant on the fit rows.
    pub warnings: Vec<String>,
}

impl NormMeta {
    /// Fit per-column statistics on `table` (the training rows).
    pub fn fit(
        table: &RawTable,
        inputs: &[String],
        target: &str,
        scheme: NormScheme,
        normalize_target: bool,
    ) -> Result<Self> {
        let mut warnings = Vec::new();
        let mut stats_for = |name: &str| -> Result<ChannelStats> {
            let vals: Vec<f64> = table
                .column(name)?
                .values
                .iter()
                .map(|v| v.ok_or_else(|| AmnError::Data(format!("missing value in {name:?}"))))
                .collect::<Result<_>>()?;
            let (shift, scale) = match scheme {
                NormScheme::Zscore => {
                    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
                    (mean, var.sqrt())
                }
                NormScheme::Minmax => {
                    let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
                    let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    (lo, hi - lo)
                }
            };
            if scale <= 1e-12 {
                let msg = format!("channel {name:?} is constant on the training split; left unscaled");
                log::warn!("{msg}");
                warnings.push(msg);
                return Ok(ChannelStats::identity(name));
            }
            Ok(ChannelStats {
                name: name.to_string(),
                shift,
                scale,
            })
        };
        let channels = inputs
            .iter()
            .map(|n| stats_for(n))
            .collect::<Result<Vec<_>>>()?;
        let target = if normalize_target {
            stats_for(target)?
        } else {
            ChannelStats::identity(target)
        };
        Ok(NormMeta {
            scheme,
            channels,
            target,
            warnings,
        })
    }

    /// Stats ordered like `names`.
    pub fn channel_stats(&self, names: &[String]) -> Result<Vec<&ChannelStats>> {
        names
            .iter()
            .map(|n| {
                self.channels
                    .iter()
                    .find(|s| &s.name == n)
                    .ok_or_else(|| AmnError::Data(format!("normalisation metadata has no channel {n:?}")))
            })
            .collect()
    }
}

/// Contiguous row ranges for train, validation and test.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIndices {
    pub train: (usize, usize),
    pub val: (usize, usize),
    pub test: (usize, usize),
}

/// Split `rows` chronologically. Segment sizes are floored except the last,
/// which takes the remainder.
pub fn chrono_split(rows: usize, fractions: [f64; 3]) -> Result<SplitIndices> {
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f))
        || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9
    {
        return Err(AmnError::Config(format!(
            "split fractions must be in [0, 1] and sum to 1, got {fractions:?}"
        )));
    }
    let n_train = (rows as f64 * fractions[0] + 1e-9).floor() as usize;
    let n_val = (rows as f64 * fractions[1] + 1e-9).floor() as usize;
    let n_test = rows.saturating_sub(n_train + n_val);
    if n_train == 0 || n_val == 0 || n_test == 0 {
        return Err(AmnError::Config(format!(
            "split {fractions:?} of {rows} rows leaves an empty segment ({n_train}/{n_val}/{n_test})"
        )));
    }
    Ok(SplitIndices {
        train: (0, n_train),
        val: (n_train, n_train + n_val),
        test: (n_train + n_val, rows),
    })
}

/// Everything needed to rebuild the same windows and scaling later.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    pub schema: Schema,
    pub target: String,
    pub inputs: Vec<String>,
    pub window: usize,
    pub horizon: usize,
    pub norm_meta: NormMeta,
    pub split: SplitIndices,
    pub vocabularies: BTreeMap<String, Vec<String>>,
    /// One-step naive MAE of the raw training targets; scales MASE.
    #[serde(default)]
    pub mase_scale: Option<f64>,
}

impl DatasetManifest {
    pub fn check_version(&self) -> Result<()> {
        if self.version != MANIFEST_VERSION {
            return Err(AmnError::Version {
                what: "dataset manifest",
                found: self.version,
                expected: MANIFEST_VERSION,
            });
        }
        Ok(())
    }
}

/// Normalised train/val/test windows plus their manifest.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub train: SeriesDataset,
    pub val: SeriesDataset,
    pub test: SeriesDataset,
    pub manifest: DatasetManifest,
    /// Raw (unnormalised) training targets in row order, for MASE scaling.
    pub train_targets_raw: Vec<f64>,
}

/// Options for [`prepare`].
#[derive(Clone, Debug)]
pub struct PrepareOptions {
    pub target: String,
    /// Input channels; `None` means every value column.
    pub inputs: Option<Vec<String>>,
    pub window: usize,
    pub horizon: usize,
    pub fractions: [f64; 3],
    pub scheme: NormScheme,
    pub normalize_target: bool,
}

/// Interpolate, split, fit normalisation on the training rows and window
/// each segment separately so no window crosses a boundary.
pub fn prepare(table: &RawTable, opts: &PrepareOptions) -> Result<PreparedData> {
    let table = interpolate_missing(table)?;
    let inputs = opts.inputs.clone().unwrap_or_else(|| table.column_names());
    table.column(&opts.target)?;
    let split = chrono_split(table.rows(), opts.fractions)?;
    let seg = |r: (usize, usize)| table.slice_rows(r.0..r.1);
    let (train_t, val_t, test_t) = (seg(split.train), seg(split.val), seg(split.test));
    let meta = NormMeta::fit(&train_t, &inputs, &opts.target, opts.scheme, opts.normalize_target)?;
    let build = |t: &RawTable, offset: usize| -> Result<SeriesDataset> {
        let mut ds = window(t, opts.window, &opts.target, &inputs, opts.horizon)?;
        for r in ds.target_rows.iter_mut() {
            *r += offset;
        }
        ds.normalized(&meta)
    };
    let train = build(&train_t, split.train.0)?;
    let val = build(&val_t, split.val.0)?;
    let test = build(&test_t, split.test.0)?;
    let train_targets_raw: Vec<f64> = train_t
        .column(&opts.target)?
        .values
        .iter()
        .map(|v| v.expect("interpolated"))
        .collect();
    let schema = Schema {
        columns: table
            .columns
            .iter()
            .map(|c| ColumnSpec {
                name: c.name.clone(),
                kind: if c.vocab.is_some() {
                    ColumnKind::Categorical
                } else {
                    ColumnKind::Numeric
                },
            })
            .collect(),
    };
    let vocabularies = table
        .columns
        .iter()
        .filter_map(|c| c.vocab.clone().map(|v| (c.name.clone(), v)))
        .collect();
    Ok(PreparedData {
        train,
        val,
        test,
        manifest: DatasetManifest {
            version: MANIFEST_VERSION,
            schema,
            target: opts.target.clone(),
            inputs,
            window: opts.window,
            horizon: opts.horizon,
            norm_meta: meta,
            split,
            vocabularies,
            mase_scale: naive_mae(&train_targets_raw),
        },
        train_targets_raw,
    })
}

/// Rebuild normalised windows for a whole table from a stored manifest.
pub fn apply_manifest(table: &RawTable, manifest: &DatasetManifest) -> Result<SeriesDataset> {
    manifest.check_version()?;
    let table = interpolate_missing(table)?;
    for name in &manifest.inputs {
        table.column(name)?;
    }
    let ds = window(
        &table,
        manifest.window,
        &manifest.target,
        &manifest.inputs,
        manifest.horizon,
    )?;
    ds.normalized(&manifest.norm_meta)
}

// ---- synthetic data --------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Identity,
    Sine,
    Quadratic,
    Step,
    Exp,
}

impl ShapeKind {
    /// The ground-truth univariate effect.
    pub fn eval(self, x: f64) -> f64 {
        match self {
            ShapeKind::Identity => x,
            ShapeKind::Sine => (1.5 * x).sin(),
            ShapeKind::Quadratic => 0.5 * x * x,
            ShapeKind::Step => {
                if x > 0.0 {
                    1.0
                } else {
                    -1.0
                }
            }
            ShapeKind::Exp => (0.8 * x).exp() / 2.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Regression,
    Classification,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::Regression => "regression",
            Task::Classification => "classification",
        }
    }
}

impl std::str::FromStr for Task {
    type Err = AmnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "regression" => Ok(Task::Regression),
            "classification" => Ok(Task::Classification),
            other => Err(AmnError::Config(format!(
                "unknown task {other:?} (expected regression or classification)"
            ))),
        }
    }
}

/// Generator settings for a series with planted feature relevance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub relevant: usize,
    pub irrelevant: usize,
    /// Cycled over the relevant channels.
    pub shapes: Vec<ShapeKind>,
    pub noise_std: f64,
    pub length: usize,
    pub task: Task,
    pub seed: u64,
    /// AR(1) coefficient of every input channel; marginals stay N(0, 1).
    pub autocorrelation: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            relevant: 4,
            irrelevant: 6,
            shapes: vec![
                ShapeKind::Sine,
                ShapeKind::Quadratic,
                ShapeKind::Step,
                ShapeKind::Identity,
            ],
            noise_std: 0.1,
            length: 2000,
            task: Task::Regression,
            seed: 0,
            autocorrelation: 0.3,
        }
    }
}

/// Which channels drive the target and how.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub channels: Vec<String>,
    pub relevant: Vec<String>,
    pub shapes: BTreeMap<String, ShapeKind>,
    pub target: String,
    pub task: Task,
    /// Relevant channels act with a one-row lag: the target at row `t`
    /// depends on the channel at row `t − 1`.
    pub lag: usize,
}

impl GroundTruth {
    /// Flattened feature names that carry signal for a given window.
    pub fn relevant_features(&self, window: usize) -> Vec<String> {
        self.relevant
            .iter()
            .map(|c| format!("{c}_t{}", window - 1))
            .collect()
    }
}

pub const SYNTHETIC_TARGET: &str = "target";

/// Generate channels `x0..x{r+k-1}` and a `target` column.
///
/// The first `relevant` channels act through their shape on the next row's
/// target; the rest are independent noise. Classification thresholds the
/// latent sum at its median.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(RawTable, GroundTruth)> {
    let total = spec.relevant + spec.irrelevant;
    if total == 0 || spec.length < 2 {
        return Err(AmnError::Config(
            "synthetic spec needs at least one channel and two rows".into(),
        ));
    }
    if spec.relevant > 0 && spec.shapes.is_empty() {
        return Err(AmnError::Config("synthetic spec needs at least one shape".into()));
    }
    if !(0.0..1.0).contains(&spec.autocorrelation.abs()) || spec.noise_std < 0.0 {
        return Err(AmnError::Config(
            "autocorrelation must be in (-1, 1) and noise_std >= 0".into(),
        ));
    }
    let mut rng = seeded(spec.seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let phi = spec.autocorrelation;
    let innov = (1.0 - phi * phi).sqrt();
    // One extra leading row supplies the lagged input for the first target.
    let rows = spec.length + 1;
    let mut channels = vec![vec![0.0; rows]; total];
    for ch in channels.iter_mut() {
        ch[0] = normal.sample(&mut rng);
        for t in 1..rows {
            ch[t] = phi * ch[t - 1] + innov * normal.sample(&mut rng);
        }
    }
    let names: Vec<String> = (0..total).map(|c| format!("x{c}")).collect();
    let shape_of = |c: usize| spec.shapes[c % spec.shapes.len()];
    let mut latent = vec![0.0; rows];
    for t in 1..rows {
        let mut y = 0.0;
        for (c, ch) in channels.iter().enumerate().take(spec.relevant) {
            y += shape_of(c).eval(ch[t - 1]);
        }
        if spec.noise_std > 0.0 {
            y += spec.noise_std * normal.sample(&mut rng);
        }
        latent[t] = y;
    }
    let latent = &latent[1..];
    let target: Vec<f64> = match spec.task {
        Task::Regression => latent.to_vec(),
        Task::Classification => {
            let mut sorted = latent.to_vec();
            sorted.sort_by(f64::total_cmp);
            let median = sorted[sorted.len() / 2];
            latent.iter().map(|&v| if v > median { 1.0 } else { 0.0 }).collect()
        }
    };
    let mut cols: Vec<(String, Vec<f64>)> = names
        .iter()
        .zip(&channels)
        .map(|(n, ch)| (n.clone(), ch[1..].to_vec()))
        .collect();
    cols.push((SYNTHETIC_TARGET.to_string(), target));
    let table = RawTable::from_columns(cols)?;
    let truth = GroundTruth {
        relevant: names[..spec.relevant].to_vec(),
        shapes: (0..spec.relevant).map(|c| (names[c].clone(), shape_of(c))).collect(),
        channels: names,
        target: SYNTHETIC_TARGET.to_string(),
        task: spec.task,
        lag: 1,
    };
    Ok((table, truth))
}
