//! Longitudinal functional data: curves observed on a shared, equally spaced
//! grid in `s`, repeatedly at subject-specific visit times `t`.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ProfitError, Result};

/// Relative tolerance on grid spacing.
pub const GRID_SPACING_TOL: f64 = 1e-8;

/// `original = offset + scale * internal`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineMap {
    pub offset: f64,
    pub scale: f64,
}

impl AffineMap {
    pub const IDENTITY: AffineMap = AffineMap {
        offset: 0.0,
        scale: 1.0,
    };

    /// Map sending `[lo, hi]` onto `[0, 1]`. A degenerate interval gives a
    /// pure shift.
    pub fn unit_interval(lo: f64, hi: f64) -> Self {
        let scale = hi - lo;
        AffineMap {
            offset: lo,
            scale: if scale > 0.0 { scale } else { 1.0 },
        }
    }

    pub fn to_internal(&self, x: f64) -> f64 {
        (x - self.offset) / self.scale
    }

    pub fn to_original(&self, x: f64) -> f64 {
        self.offset + self.scale * x
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMetadata {
    /// Rescaling applied to the functional argument.
    pub s_map: AffineMap,
    /// Rescaling applied to the visit times.
    pub t_map: AffineMap,
    /// SHA-256 of the ingested file, when the dataset came from disk.
    pub source_hash: Option<String>,
    pub source: Option<String>,
}

impl Default for DatasetMetadata {
    fn default() -> Self {
        DatasetMetadata {
            s_map: AffineMap::IDENTITY,
            t_map: AffineMap::IDENTITY,
            source_hash: None,
            source: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectRecord {
    pub id: String,
    /// Visit times, ascending.
    pub times: Vec<f64>,
    /// One curve per visit, each of length `R`.
    pub curves: Vec<Vec<f64>>,
    #[serde(default)]
    pub covariates: BTreeMap<String, f64>,
}

impl SubjectRecord {
    pub fn new(id: impl Into<String>, times: Vec<f64>, curves: Vec<Vec<f64>>) -> Self {
        SubjectRecord {
            id: id.into(),
            times,
            curves,
            covariates: BTreeMap::new(),
        }
    }

    pub fn with_covariate(mut self, name: impl Into<String>, value: f64) -> Self {
        self.covariates.insert(name.into(), value);
        self
    }

    pub fn n_visits(&self) -> usize {
        self.times.len()
    }
}

/// A broken dataset invariant and where it was found.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub invariant: &'static str,
    pub location: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} at {}", self.invariant, self.location)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LongitudinalFunctionalDataset {
    pub grid_s: Vec<f64>,
    pub subjects: Vec<SubjectRecord>,
    pub domain_t: (f64, f64),
    #[serde(default)]
    pub metadata: DatasetMetadata,
}

const JSON_FORMAT: &str = "profit-dataset/1";

#[derive(Serialize, Deserialize)]
struct DatasetContainer {
    format: String,
    #[serde(flatten)]
    dataset: LongitudinalFunctionalDataset,
}

impl LongitudinalFunctionalDataset {
    /// Build a dataset on the internal `[0, 1]` domain, checking every
    /// invariant.
    pub fn new(grid_s: Vec<f64>, subjects: Vec<SubjectRecord>) -> Result<Self> {
        let ds = LongitudinalFunctionalDataset {
            grid_s,
            subjects,
            domain_t: (0.0, 1.0),
            metadata: DatasetMetadata::default(),
        };
        ds.ensure_valid()?;
        Ok(ds)
    }

    pub fn n_subjects(&self) -> usize {
        self.subjects.len()
    }

    pub fn grid_len(&self) -> usize {
        self.grid_s.len()
    }

    /// Total number of curves `N = Σ m_i`.
    pub fn n_curves(&self) -> usize {
        self.subjects.iter().map(|s| s.n_visits()).sum()
    }

    /// Names of the subject-level covariates (taken from the first subject).
    pub fn covariate_names(&self) -> Vec<String> {
        self.subjects
            .first()
            .map(|s| s.covariates.keys().cloned().collect())
            .unwrap_or_default()
    }

    /// All visit times, subject-major.
    pub fn pooled_times(&self) -> Vec<f64> {
        self.subjects
            .iter()
            .flat_map(|s| s.times.iter().copied())
            .collect()
    }

    /// Iterate over `(subject index, time, curve)` in subject-major order.
    pub fn curves(&self) -> impl Iterator<Item = (usize, f64, &[f64])> {
        self.subjects.iter().enumerate().flat_map(|(i, s)| {
            s.times
                .iter()
                .zip(&s.curves)
                .map(move |(&t, c)| (i, t, c.as_slice()))
        })
    }

    /// Check every invariant, returning one entry per violation.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let r = self.grid_s.len();
        if r < 4 {
            out.push(Violation {
                invariant: "grid has at least 4 points",
                location: format!("grid_s (R = {r})"),
            });
        }
        if self.grid_s.iter().any(|v| !v.is_finite()) {
            out.push(Violation {
                invariant: "grid values finite",
                location: "grid_s".into(),
            });
        }
        for (i, w) in self.grid_s.windows(2).enumerate() {
            if w[1] <= w[0] {
                out.push(Violation {
                    invariant: "grid strictly increasing",
                    location: format!("grid_s[{}]", i + 1),
                });
            }
        }
        if r >= 2 && out.is_empty() {
            let mean = (self.grid_s[r - 1] - self.grid_s[0]) / (r - 1) as f64;
            if let Some((i, _)) = self
                .grid_s
                .windows(2)
                .enumerate()
                .find(|(_, w)| ((w[1] - w[0]) - mean).abs() > GRID_SPACING_TOL * mean)
            {
                out.push(Violation {
                    invariant: "grid equally spaced (interpolate onto an equally spaced grid first)",
                    location: format!("grid_s[{}]", i + 1),
                });
            }
        }

        let (lo, hi) = self.domain_t;
        let cov_names: Option<Vec<&String>> =
            self.subjects.first().map(|s| s.covariates.keys().collect());
        let mut total = 0usize;
        for (i, subj) in self.subjects.iter().enumerate() {
            let loc = |extra: String| format!("subject {} ({}){}", i + 1, subj.id, extra);
            let m = subj.times.len();
            total += m;
            if m == 0 {
                out.push(Violation {
                    invariant: "subject has at least one visit",
                    location: loc(String::new()),
                });
            }
            if subj.curves.len() != m {
                out.push(Violation {
                    invariant: "one curve per visit",
                    location: loc(format!(": {} times, {} curves", m, subj.curves.len())),
                });
            }
            for (j, &t) in subj.times.iter().enumerate() {
                if !t.is_finite() || t < lo || t > hi {
                    out.push(Violation {
                        invariant: "visit time inside the time domain",
                        location: loc(format!(", visit {}", j + 1)),
                    });
                }
            }
            for (j, w) in subj.times.windows(2).enumerate() {
                if w[1] < w[0] {
                    out.push(Violation {
                        invariant: "visit times sorted ascending",
                        location: loc(format!(", visit {}", j + 2)),
                    });
                }
            }
            for (j, c) in subj.curves.iter().enumerate() {
                if c.len() != r {
                    out.push(Violation {
                        invariant: "curve length equals grid length",
                        location: loc(format!(", visit {}", j + 1)),
                    });
                    continue;
                }
                for (g, v) in c.iter().enumerate() {
                    if !v.is_finite() {
                        out.push(Violation {
                            invariant: "curve values finite",
                            location: loc(format!(", visit {}, grid {}", j + 1, g + 1)),
                        });
                    }
                }
            }
            if let Some(names) = &cov_names {
                let here: Vec<&String> = subj.covariates.keys().collect();
                if &here != names {
                    out.push(Violation {
                        invariant: "covariate names identical across subjects",
                        location: loc(String::new()),
                    });
                }
                if subj.covariates.values().any(|v| !v.is_finite()) {
                    out.push(Violation {
                        invariant: "covariate values finite",
                        location: loc(String::new()),
                    });
                }
            }
        }
        if total < 2 {
            out.push(Violation {
                invariant: "at least two curves in total",
                location: format!("N = {total}"),
            });
        }
        out
    }

    pub fn ensure_valid(&self) -> Result<()> {
        let v = self.validate();
        if v.is_empty() {
            Ok(())
        } else {
            let msg: Vec<String> = v.iter().map(|x| x.to_string()).collect();
            Err(ProfitError::Validation(msg.join("; ")))
        }
    }

    /// Serialize to the self-describing JSON container.
    pub fn to_json(&self) -> Result<String> {
        let c = DatasetContainer {
            format: JSON_FORMAT.into(),
            dataset: self.clone(),
        };
        Ok(serde_json::to_string(&c)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: DatasetContainer = serde_json::from_str(text)?;
        if c.format != JSON_FORMAT {
            return Err(ProfitError::Structural(format!(
                "unknown dataset format '{}'",
                c.format
            )));
        }
        c.dataset.ensure_valid()?;
        Ok(c.dataset)
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|source| ProfitError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| ProfitError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text)
    }

    /// Write the long-format CSV (internal coordinates).
    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let names = self.covariate_names();
        let mut header = vec!["subject_id".to_string(), "t".into(), "s".into(), "y".into()];
        header.extend(names.iter().cloned());
        w.write_record(&header).map_err(csv_err)?;
        for subj in &self.subjects {
            let covs: Vec<String> = names
                .iter()
                .map(|n| subj.covariates[n].to_string())
                .collect();
            for (t, curve) in subj.times.iter().zip(&subj.curves) {
                for (s, y) in self.grid_s.iter().zip(curve) {
                    let mut rec = vec![subj.id.clone(), t.to_string(), s.to_string(), y.to_string()];
                    rec.extend(covs.iter().cloned());
                    w.write_record(&rec).map_err(csv_err)?;
                }
            }
        }
        w.flush().map_err(|e| ProfitError::Csv(e.to_string()))?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let f = fs::File::create(path).map_err(|source| ProfitError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        self.write_csv(std::io::BufWriter::new(f))
    }
}

fn csv_err(e: csv::Error) -> ProfitError {
    ProfitError::Csv(e.to_string())
}

/// Options for [`load_csv`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IngestOptions {
    /// Original-scale interval mapped onto `[0, 1]` for `t`; defaults to the
    /// observed range.
    pub t_domain: Option<(f64, f64)>,
    /// Original-scale interval mapped onto `[0, 1]` for `s`; defaults to the
    /// observed grid range.
    pub s_domain: Option<(f64, f64)>,
    /// Covariate columns to keep. `None` keeps every extra column.
    pub covariates: Option<Vec<String>>,
}

/// Load a long-format CSV (`subject_id, t, s, y` plus optional subject-level
/// covariate columns) and rescale `s` and `t` onto `[0, 1]`.
pub fn load_csv(path: &Path, opts: &IngestOptions) -> Result<LongitudinalFunctionalDataset> {
    let bytes = fs::read(path).map_err(|source| ProfitError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut ds = parse_csv(&bytes, opts)?;
    ds.metadata.source_hash = Some(hex::encode(Sha256::digest(&bytes)));
    ds.metadata.source = Some(path.display().to_string());
    Ok(ds)
}

struct RawCurve {
    t: f64,
    points: Vec<(f64, f64)>,
}

struct RawSubject {
    id: String,
    curves: Vec<RawCurve>,
    curve_index: HashMap<u64, usize>,
    covariates: BTreeMap<String, f64>,
}

/// Parse CSV bytes; see [`load_csv`].
pub fn parse_csv(bytes: &[u8], opts: &IngestOptions) -> Result<LongitudinalFunctionalDataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(bytes);
    let headers = rdr.headers().map_err(csv_err)?.clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| ProfitError::Structural(format!("missing column '{name}'")))
    };
    let (c_id, c_t, c_s, c_y) = (col("subject_id")?, col("t")?, col("s")?, col("y")?);
    let base = [c_id, c_t, c_s, c_y];
    let extra: Vec<(usize, String)> = headers
        .iter()
        .enumerate()
        .filter(|(i, _)| !base.contains(i))
        .map(|(i, h)| (i, h.to_string()))
        .filter(|(_, h)| opts.covariates.as_ref().is_none_or(|keep| keep.contains(h)))
        .collect();
    if let Some(keep) = &opts.covariates {
        for k in keep {
            if !extra.iter().any(|(_, h)| h == k) {
                return Err(ProfitError::Structural(format!(
                    "covariate column '{k}' not found"
                )));
            }
        }
    }

    let mut subjects: Vec<RawSubject> = Vec::new();
    let mut by_id: HashMap<String, usize> = HashMap::new();
    for (row_idx, rec) in rdr.records().enumerate() {
        // 1-based data row number, header excluded.
        let row = row_idx + 1;
        let rec = rec.map_err(csv_err)?;
        let num = |c: usize, what: &str| -> Result<f64> {
            let raw = rec.get(c).unwrap_or("");
            raw.parse::<f64>().map_err(|_| {
                ProfitError::Validation(format!("row {row}: cannot parse {what} '{raw}'"))
            })
        };
        let id = rec.get(c_id).unwrap_or("").to_string();
        let t = num(c_t, "t")?;
        let s = num(c_s, "s")?;
        let y = num(c_y, "y")?;
        if !t.is_finite() || !s.is_finite() {
            return Err(ProfitError::Validation(format!(
                "row {row}: non-finite t or s"
            )));
        }
        if !y.is_finite() {
            return Err(ProfitError::Validation(format!("row {row}: non-finite y")));
        }
        let si = *by_id.entry(id.clone()).or_insert_with(|| {
            subjects.push(RawSubject {
                id: id.clone(),
                curves: Vec::new(),
                curve_index: HashMap::new(),
                covariates: BTreeMap::new(),
            });
            subjects.len() - 1
        });
        let subj = &mut subjects[si];
        for (c, name) in &extra {
            let v = num(*c, name)?;
            match subj.covariates.get(name) {
                Some(&prev) if prev != v => {
                    return Err(ProfitError::Validation(format!(
                        "row {row}: covariate '{name}' varies within subject '{id}'"
                    )))
                }
                _ => {
                    subj.covariates.insert(name.clone(), v);
                }
            }
        }
        let ci = *subj.curve_index.entry(t.to_bits()).or_insert_with(|| {
            subj.curves.push(RawCurve {
                t,
                points: Vec::new(),
            });
            subj.curves.len() - 1
        });
        subj.curves[ci].points.push((s, y));
    }
    if subjects.is_empty() {
        return Err(ProfitError::Structural("no data rows".into()));
    }

    // Reference grid from the first curve; every curve must match it.
    let mut reference: Option<Vec<f64>> = None;
    for subj in &mut subjects {
        for curve in &mut subj.curves {
            curve.points.sort_by(|a, b| a.0.total_cmp(&b.0));
            if let Some(w) = curve.points.windows(2).find(|w| w[0].0 == w[1].0) {
                return Err(ProfitError::Validation(format!(
                    "duplicate observation for subject '{}', t = {}, s = {}",
                    subj.id, curve.t, w[0].0
                )));
            }
            let grid: Vec<f64> = curve.points.iter().map(|p| p.0).collect();
            match &reference {
                None => reference = Some(grid),
                Some(g) if *g != grid => {
                    return Err(ProfitError::Structural(format!(
                        "ragged grid: subject '{}' at t = {} has a different s-grid \
                         ({} points) than the first curve ({} points)",
                        subj.id,
                        curve.t,
                        grid.len(),
                        g.len()
                    )))
                }
                _ => {}
            }
        }
        subj.curves.sort_by(|a, b| a.t.total_cmp(&b.t));
    }
    let grid = reference.unwrap_or_default();
    let (s_lo, s_hi) = opts
        .s_domain
        .unwrap_or((grid[0], *grid.last().unwrap_or(&grid[0])));
    let s_map = AffineMap::unit_interval(s_lo, s_hi);
    let (t_lo, t_hi) = opts.t_domain.unwrap_or_else(|| {
        subjects
            .iter()
            .flat_map(|s| s.curves.iter().map(|c| c.t))
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), t| {
                (a.min(t), b.max(t))
            })
    });
    let t_map = AffineMap::unit_interval(t_lo, t_hi);

    let grid_s: Vec<f64> = grid.iter().map(|&s| s_map.to_internal(s)).collect();
    let records: Vec<SubjectRecord> = subjects
        .into_iter()
        .map(|s| SubjectRecord {
            id: s.id,
            times: s.curves.iter().map(|c| t_map.to_internal(c.t)).collect(),
            curves: s
                .curves
                .iter()
                .map(|c| c.points.iter().map(|p| p.1).collect())
                .collect(),
            covariates: s.covariates,
        })
        .collect();
    let ds = LongitudinalFunctionalDataset {
        grid_s,
        subjects: records,
        domain_t: (0.0, 1.0),
        metadata: DatasetMetadata {
            s_map,
            t_map,
            source_hash: None,
            source: None,
        },
    };
    ds.ensure_valid()?;
    Ok(ds)
}

/// A function of `(s, t)` tabulated on a tensor grid and evaluated by
/// bilinear interpolation, clamped at the boundary. A single-column surface
/// (one `t` value) is a curve in `s`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BivariateSurface {
    pub grid_s: Vec<f64>,
    pub grid_t: Vec<f64>,
    /// Row-major `|grid_s| × |grid_t|` values.
    pub values: Vec<f64>,
}

impl BivariateSurface {
    pub fn new(grid_s: Vec<f64>, grid_t: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid_s.len() * grid_t.len() {
            return Err(ProfitError::Dimension(format!(
                "surface values {} != {} x {}",
                values.len(),
                grid_s.len(),
                grid_t.len()
            )));
        }
        let increasing = |g: &[f64]| !g.is_empty() && g.windows(2).all(|w| w[1] > w[0]);
        if !increasing(&grid_s) || !increasing(&grid_t) {
            return Err(ProfitError::Validation(
                "surface grids must be non-empty and strictly increasing".into(),
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(ProfitError::Validation("non-finite surface value".into()));
        }
        Ok(BivariateSurface {
            grid_s,
            grid_t,
            values,
        })
    }

    /// Tabulate `f(s, t)` on the grids.
    pub fn tabulate(grid_s: Vec<f64>, grid_t: Vec<f64>, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        let values = grid_s
            .iter()
            .flat_map(|&s| grid_t.iter().map(move |&t| (s, t)))
            .map(|(s, t)| f(s, t))
            .collect();
        Self::new(grid_s, grid_t, values)
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.grid_t.len() + j]
    }

    pub fn eval(&self, s: f64, t: f64) -> f64 {
        let (i0, i1, ws) = bracket(&self.grid_s, s);
        let (j0, j1, wt) = bracket(&self.grid_t, t);
        let a = self.at(i0, j0) * (1.0 - wt) + self.at(i0, j1) * wt;
        let b = self.at(i1, j0) * (1.0 - wt) + self.at(i1, j1) * wt;
        a * (1.0 - ws) + b * ws
    }
}

fn bracket(grid: &[f64], x: f64) -> (usize, usize, f64) {
    let n = grid.len();
    if n == 1 || x <= grid[0] {
        return (0, 0, 0.0);
    }
    if x >= grid[n - 1] {
        return (n - 1, n - 1, 0.0);
    }
    let hi = grid.partition_point(|&g| g <= x).min(n - 1);
    let lo = hi - 1;
    (lo, hi, (x - grid[lo]) / (grid[hi] - grid[lo]))
}

/// `n` equally spaced points covering `[0, 1]` inclusive.
pub fn unit_grid(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![0.0];
    }
    (0..n).map(|i| i as f64 / (n - 1) as f64).collect()
}
