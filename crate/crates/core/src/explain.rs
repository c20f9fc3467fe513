//! Shape functions, per-sample decompositions and their SVG/JSON rendering.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor};
use crate::data::{ChannelStats, SeriesDataset, Task};
use crate::error::{AmnError, Result};
use crate::model::AmnModel;
use crate::rng::seeded;

pub const EXPLANATION_VERSION: u32 = 1;
pub const DEFAULT_GRID: usize = 256;
pub const DENSITY_BINS: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeFunction {
    pub feature: String,
    pub feature_index: usize,
    /// One-based position in the selection.
    pub rank: usize,
    /// Strictly ascending normalised inputs.
    pub grid: Vec<f64>,
    /// `grid` in original units.
    pub grid_original: Vec<f64>,
    /// Module output minus `offset`.
    pub contributions: Vec<f64>,
    /// Mean module output over the training data.
    pub offset: f64,
    /// `DENSITY_BINS + 1` ascending edges over the grid range.
    pub bin_edges: Vec<f64>,
    /// Per-bin training counts divided by the largest count.
    pub density: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureWeight {
    pub feature: String,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decomposition {
    pub prediction: f64,
    pub beta: f64,
    /// Aligned with `Explanation::selected`.
    pub contributions: Vec<f64>,
}

impl Decomposition {
    /// `beta + Σ contributions` summed left to right, as the ensemble does.
    pub fn reconstruct(&self) -> f64 {
        self.contributions.iter().fold(0.0, |acc, c| acc + c) + self.beta
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub version: u32,
    pub task: Task,
    pub beta: f64,
    /// All features, descending weight.
    pub feature_weights: Vec<FeatureWeight>,
    pub selected: Vec<String>,
    pub shape_functions: Vec<ShapeFunction>,
    pub decompositions: Vec<Decomposition>,
}

impl Explanation {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let e: Explanation = serde_json::from_str(s)?;
        if e.version != EXPLANATION_VERSION {
            return Err(AmnError::Version {
                what: "explanation",
                found: e.version,
                expected: EXPLANATION_VERSION,
            });
        }
        Ok(e)
    }
}

/// Module output for feature `j` alone at each normalised input value.
pub fn module_outputs(model: &AmnModel, j: usize, xs: &[f64]) -> Result<Vec<f64>> {
    let module = model
        .ensemble
        .modules
        .get(j)
        .ok_or_else(|| AmnError::Contract(format!("no module for feature {j}")))?;
    let mut g = Graph::new();
    let p = model.store.bind(&mut g, false);
    let x = g.constant(Tensor::new(vec![xs.len(), 1], xs.to_vec())?);
    let f = g.constant(Tensor::scalar(model.anb_scale(j)));
    let mut rng = seeded(0);
    let out = module.forward(&mut g, &p, x, f, false, &mut rng)?;
    Ok(g.value(out).data().to_vec())
}

fn channel_stats(ds: &SeriesDataset, j: usize) -> ChannelStats {
    let c = j % ds.channels();
    ds.norm_meta
        .as_ref()
        .and_then(|m| m.channels.iter().find(|s| s.name == ds.channel_names[c]).cloned())
        .unwrap_or_else(|| ChannelStats::identity(&ds.channel_names[c]))
}

/// Sweep feature `j`'s module over the range of its training values.
pub fn sweep_shape(
    model: &AmnModel,
    train: &SeriesDataset,
    j: usize,
    grid_size: usize,
) -> Result<ShapeFunction> {
    let selection = model.selection()?;
    let rank = selection.iter().position(|&s| s == j).ok_or_else(|| {
        let names: Vec<&str> = selection
            .iter()
            .map(|&s| model.config.feature_names[s].as_str())
            .collect();
        AmnError::Contract(format!(
            "feature {j} is not selected; available: {names:?}"
        ))
    })? + 1;
    if grid_size < 2 {
        return Err(AmnError::Config(format!("grid_size must be >= 2, got {grid_size}")));
    }
    if train.is_empty() {
        return Err(AmnError::Data("shape sweep needs training data".into()));
    }
    let values = train.feature_column(j);
    let mut lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let mut hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo < 1e-12 {
        lo -= 0.5;
        hi += 0.5;
    }
    let step = (hi - lo) / (grid_size - 1) as f64;
    let mut grid: Vec<f64> = (0..grid_size).map(|i| lo + step * i as f64).collect();
    grid[grid_size - 1] = hi;

    let on_train = module_outputs(model, j, &values)?;
    let offset = on_train.iter().sum::<f64>() / on_train.len() as f64;
    let contributions = module_outputs(model, j, &grid)?
        .into_iter()
        .map(|v| v - offset)
        .collect();

    let width = (hi - lo) / DENSITY_BINS as f64;
    let bin_edges: Vec<f64> = (0..=DENSITY_BINS)
        .map(|i| if i == DENSITY_BINS { hi } else { lo + width * i as f64 })
        .collect();
    let mut counts = vec![0usize; DENSITY_BINS];
    for &v in &values {
        let b = (((v - lo) / width) as usize).min(DENSITY_BINS - 1);
        counts[b] += 1;
    }
    let max = *counts.iter().max().expect("bins") as f64;
    let density = counts.iter().map(|&c| c as f64 / max).collect();

    let stats = channel_stats(train, j);
    Ok(ShapeFunction {
        feature: model.config.feature_names[j].clone(),
        feature_index: j,
        rank,
        grid_original: grid.iter().map(|&v| stats.invert(v)).collect(),
        grid,
        contributions,
        offset,
        bin_edges,
        density,
    })
}

/// Evaluation-mode decomposition of every sample in `samples` (`[N × D]`).
pub fn decompose(model: &AmnModel, samples: &[f64]) -> Result<Vec<Decomposition>> {
    let e = model.evaluate_all(samples, 256)?;
    let n = e.active.len();
    Ok(e.prediction
        .iter()
        .enumerate()
        .map(|(i, &prediction)| Decomposition {
            prediction,
            beta: e.beta,
            contributions: e.contributions[i * n..(i + 1) * n].to_vec(),
        })
        .collect())
}

/// Build the full explanation; decompositions cover the first
/// `max_samples` rows of `ds`.
pub fn explain(
    model: &AmnModel,
    train: &SeriesDataset,
    ds: &SeriesDataset,
    grid_size: usize,
    max_samples: usize,
) -> Result<Explanation> {
    let names = &model.config.feature_names;
    let selection = model.selection()?;
    let order = crate::afs::select_top_n(&model.reference_weights, model.features())?;
    let shape_functions = selection
        .iter()
        .map(|&j| sweep_shape(model, train, j, grid_size))
        .collect::<Result<Vec<_>>>()?;
    let keep = ds.len().min(max_samples);
    let decompositions = if keep == 0 {
        Vec::new()
    } else {
        decompose(model, &ds.samples[..keep * model.features()])?
    };
    Ok(Explanation {
        version: EXPLANATION_VERSION,
        task: model.task(),
        beta: model.beta(),
        feature_weights: order
            .iter()
            .map(|&j| FeatureWeight {
                feature: names[j].clone(),
                weight: model.reference_weights[j],
            })
            .collect(),
        selected: selection.iter().map(|&j| names[j].clone()).collect(),
        shape_functions,
        decompositions,
    })
}

fn file_stem(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' { c } else { '_' })
        .collect()
}

/// Write `explanation.json` and one SVG per shape function.
pub fn render(explanation: &Explanation, out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| AmnError::io(out_dir, e))?;
    let mut written = Vec::new();
    let json_path = out_dir.join("explanation.json");
    std::fs::write(&json_path, explanation.to_json()?).map_err(|e| AmnError::io(&json_path, e))?;
    written.push(json_path);
    for sf in &explanation.shape_functions {
        let path = out_dir.join(format!("{}_{}.svg", sf.rank, file_stem(&sf.feature)));
        std::fs::write(&path, shape_svg(sf)).map_err(|e| AmnError::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}

/// Blue shape line over red density bars; x ticks show normalised values
/// with original units beneath.
pub fn shape_svg(sf: &ShapeFunction) -> String {
    const W: f64 = 520.0;
    const H: f64 = 340.0;
    const L: f64 = 64.0;
    const R: f64 = 16.0;
    const T: f64 = 36.0;
    const B: f64 = 72.0;
    let (pw, ph) = (W - L - R, H - T - B);
    let (x0, x1) = (sf.grid[0], sf.grid[sf.grid.len() - 1]);
    let mut y0 = sf.contributions.iter().copied().fold(f64::INFINITY, f64::min);
    let mut y1 = sf.contributions.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if y1 - y0 < 1e-12 {
        y0 -= 1.0;
        y1 += 1.0;
    }
    let pad = 0.05 * (y1 - y0);
    let (y0, y1) = (y0 - pad, y1 + pad);
    let sx = |v: f64| L + (v - x0) / (x1 - x0) * pw;
    let sy = |v: f64| T + (y1 - v) / (y1 - y0) * ph;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="20" text-anchor="middle" font-size="13">{}</text>"#,
        L + pw / 2.0,
        xml_escape(&format!("#{} {}", sf.rank, sf.feature))
    );
    for (i, &d) in sf.density.iter().enumerate() {
        if d == 0.0 {
            continue;
        }
        let (a, b) = (sx(sf.bin_edges[i]), sx(sf.bin_edges[i + 1]));
        let _ = writeln!(
            s,
            r#"<rect x="{a:.2}" y="{T:.2}" width="{:.2}" height="{ph:.2}" fill="red" fill-opacity="{:.3}"/>"#,
            (b - a).max(0.0),
            0.5 * d
        );
    }
    if y0 < 0.0 && y1 > 0.0 {
        let _ = writeln!(
            s,
            r##"<line x1="{L:.2}" y1="{0:.2}" x2="{1:.2}" y2="{0:.2}" stroke="#999" stroke-dasharray="3,3"/>"##,
            sy(0.0),
            L + pw
        );
    }
    let points: Vec<String> = sf
        .grid
        .iter()
        .zip(&sf.contributions)
        .map(|(&x, &y)| format!("{:.2},{:.2}", sx(x), sy(y)))
        .collect();
    let _ = writeln!(
        s,
        r#"<polyline fill="none" stroke="blue" stroke-width="2" points="{}"/>"#,
        points.join(" ")
    );
    let _ = writeln!(
        s,
        r#"<rect x="{L}" y="{T}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    for k in 0..=4 {
        let fx = k as f64 / 4.0;
        let idx = ((sf.grid.len() - 1) as f64 * fx).round() as usize;
        let x = sx(sf.grid[idx]);
        let _ = writeln!(
            s,
            r#"<line x1="{x:.2}" y1="{0:.2}" x2="{x:.2}" y2="{1:.2}" stroke="black"/>"#,
            T + ph,
            T + ph + 4.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{x:.2}" y="{:.2}" text-anchor="middle">{:.2}</text>"#,
            T + ph + 16.0,
            sf.grid[idx]
        );
        let _ = writeln!(
            s,
            r##"<text x="{x:.2}" y="{:.2}" text-anchor="middle" fill="#555">{:.3}</text>"##,
            T + ph + 30.0,
            sf.grid_original[idx]
        );
        let yv = y0 + (y1 - y0) * fx;
        let y = sy(yv);
        let _ = writeln!(
            s,
            r#"<line x1="{:.2}" y1="{y:.2}" x2="{L:.2}" y2="{y:.2}" stroke="black"/>"#,
            L - 4.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{yv:.3}</text>"#,
            L - 6.0,
            y + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">normalised (top) / original (bottom)</text>"#,
        L + pw / 2.0,
        H - 12.0
    );
    let _ = writeln!(
        s,
        r#"<text transform="translate(14 {:.1}) rotate(-90)" text-anchor="middle">contribution</text>"#,
        T + ph / 2.0
    );
    s.push_str("</svg>\n");
    s
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Pearson correlation of two equal-length series.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(AmnError::Contract("pearson needs two equal series of length >= 2".into()));
    }
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(AmnError::UndefinedMetric("pearson of a constant series".into()));
    }
    Ok(sab / (saa * sbb).sqrt())
}
