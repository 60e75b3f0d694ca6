//! File formats: densities as a JSON sidecar plus a row-major CSV
//! matrix, warps as CSV tables, icospheres as a JSON header plus vertex
//! table, and JSON diagnostics with CSV/SVG cost traces. All floats are
//! written with 17 significant digits so values round-trip bitwise.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::density::{DensityField, DomainSpec, SphereWarp, SquareMatrix, Warp1D};
use crate::error::{Error, Result};
use crate::geometry::{Grid1D, Icosphere, SpherePoint};
use crate::simulate::RecoveryResult;

fn fmt(v: f64) -> String {
    format!("{v:.16e}")
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path.display().to_string(), e))
}

fn read_file(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))
}

fn parse_f64(path: &Path, s: &str) -> Result<f64> {
    s.trim()
        .parse()
        .map_err(|_| Error::parse(path.display().to_string(), format!("bad number {s:?}")))
}

/// `<path with extension replaced by .json>`; the CSV path carries the data.
pub fn sidecar_path(csv: &Path) -> PathBuf {
    csv.with_extension("json")
}

/// Domain description stored alongside a density matrix.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DensitySidecar {
    pub domain: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub level: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub level2: Option<u32>,
    pub symmetric: bool,
}

fn matrix_csv(m: &SquareMatrix) -> String {
    let mut out = String::new();
    for i in 0..m.size() {
        let row: Vec<String> = m.row(i).iter().map(|&v| fmt(v)).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

fn parse_matrix_csv(path: &Path, text: &str) -> Result<SquareMatrix> {
    let mut data = Vec::new();
    let mut rows = 0;
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        rows += 1;
        for cell in line.split(',') {
            data.push(parse_f64(path, cell)?);
        }
    }
    if data.len() != rows * rows {
        return Err(Error::parse(
            path.display().to_string(),
            format!("{} values do not form a {rows}x{rows} matrix", data.len()),
        ));
    }
    SquareMatrix::from_vec(rows, data)
}

/// Writes `<path>.csv`'s matrix and the JSON sidecar describing the domain.
pub fn write_density(f: &DensityField, csv: &Path) -> Result<()> {
    let sidecar = match f.domain().kind() {
        crate::density::DomainKind::Interval(_) => DensitySidecar {
            domain: "interval".into(),
            n: Some(f.domain().node_count()),
            level: None,
            level2: None,
            symmetric: true,
        },
        crate::density::DomainKind::Sphere(ico) => DensitySidecar {
            domain: "sphere".into(),
            n: None,
            level: Some(ico.level()),
            level2: None,
            symmetric: true,
        },
        crate::density::DomainKind::DualSphere(a, b) => DensitySidecar {
            domain: "dual".into(),
            n: None,
            level: Some(a.level()),
            level2: Some(b.level()),
            symmetric: true,
        },
    };
    let json = serde_json::to_string_pretty(&sidecar)
        .map_err(|e| Error::parse(csv.display().to_string(), e.to_string()))?;
    write_file(&sidecar_path(csv), &json)?;
    write_file(csv, &matrix_csv(f.values()))
}

/// Rebuilds the domain from the sidecar and validates the matrix through
/// the density constructor.
pub fn read_density(csv: &Path) -> Result<DensityField> {
    let side = sidecar_path(csv);
    let sidecar: DensitySidecar = serde_json::from_str(&read_file(&side)?)
        .map_err(|e| Error::parse(side.display().to_string(), e.to_string()))?;
    let matrix = parse_matrix_csv(csv, &read_file(csv)?)?;
    let domain = domain_from_sidecar(&sidecar, &side)?;
    DensityField::new(domain, matrix)
}

fn domain_from_sidecar(sidecar: &DensitySidecar, path: &Path) -> Result<DomainSpec> {
    match sidecar.domain.as_str() {
        "interval" => {
            let n = sidecar
                .n
                .ok_or_else(|| Error::parse(path.display().to_string(), "missing n"))?;
            Ok(DomainSpec::interval(Grid1D::uniform(n)?))
        }
        "sphere" => {
            let level = sidecar
                .level
                .ok_or_else(|| Error::parse(path.display().to_string(), "missing level"))?;
            Ok(DomainSpec::sphere(Arc::new(Icosphere::build(level)?)))
        }
        "dual" => {
            let l1 = sidecar
                .level
                .ok_or_else(|| Error::parse(path.display().to_string(), "missing level"))?;
            let l2 = sidecar
                .level2
                .ok_or_else(|| Error::parse(path.display().to_string(), "missing level2"))?;
            Ok(DomainSpec::dual_sphere(
                Arc::new(Icosphere::build(l1)?),
                Arc::new(Icosphere::build(l2)?),
            ))
        }
        other => Err(Error::parse(
            path.display().to_string(),
            format!("unknown domain {other:?}"),
        )),
    }
}

/// Two-column CSV (x, γ(x)); the derivative is re-derived by monotone
/// interpolation on read.
pub fn write_warp_1d(w: &Warp1D, path: &Path) -> Result<()> {
    let mut out = String::new();
    for (x, v) in w.grid().points().iter().zip(w.values()) {
        out.push_str(&fmt(*x));
        out.push(',');
        out.push_str(&fmt(*v));
        out.push('\n');
    }
    write_file(path, &out)
}

pub fn read_warp_1d(path: &Path) -> Result<Warp1D> {
    let text = read_file(path)?;
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let mut cells = line.split(',');
        let (a, b) = (cells.next(), cells.next());
        match (a, b) {
            (Some(a), Some(b)) => {
                xs.push(parse_f64(path, a)?);
                ys.push(parse_f64(path, b)?);
            }
            _ => {
                return Err(Error::parse(
                    path.display().to_string(),
                    format!("expected two columns, got {line:?}"),
                ))
            }
        }
    }
    if xs.len() < 2 {
        return Err(Error::parse(path.display().to_string(), "warp table too short"));
    }
    let grid = Grid1D::uniform(xs.len())?;
    for (a, b) in grid.points().iter().zip(&xs) {
        if a != b {
            return Err(Error::parse(
                path.display().to_string(),
                "warp abscissae are not the uniform grid",
            ));
        }
    }
    Warp1D::from_knots(grid, &xs, &ys)
}

/// Four-column CSV (vertex index, target x, y, z).
pub fn write_sphere_warp(w: &SphereWarp, path: &Path) -> Result<()> {
    let mut out = String::new();
    for i in 0..w.icosphere().vertex_count() {
        let [x, y, z] = w.target(i).coords();
        out.push_str(&format!("{i},{},{},{}\n", fmt(x), fmt(y), fmt(z)));
    }
    write_file(path, &out)
}

pub fn read_sphere_warp(path: &Path, ico: Arc<Icosphere>) -> Result<SphereWarp> {
    let text = read_file(path)?;
    let mut targets = vec![None; ico.vertex_count()];
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 4 {
            return Err(Error::parse(
                path.display().to_string(),
                format!("expected four columns, got {line:?}"),
            ));
        }
        let idx: usize = cells[0].trim().parse().map_err(|_| {
            Error::parse(path.display().to_string(), format!("bad index {:?}", cells[0]))
        })?;
        if idx >= targets.len() {
            return Err(Error::parse(
                path.display().to_string(),
                format!("vertex index {idx} out of range"),
            ));
        }
        // values were written from unit vectors with full precision, so
        // re-accept them as-is instead of renormalizing (which would
        // perturb the low bits)
        let p = SpherePoint::from_unit([
            parse_f64(path, cells[1])?,
            parse_f64(path, cells[2])?,
            parse_f64(path, cells[3])?,
        ])?;
        targets[idx] = Some(p);
    }
    let targets: Option<Vec<SpherePoint>> = targets.into_iter().collect();
    let targets = targets.ok_or_else(|| {
        Error::parse(path.display().to_string(), "missing vertex rows")
    })?;
    SphereWarp::new(ico, targets)
}

/// JSON header with level and vertex count.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IcosphereHeader {
    pub level: u32,
    pub vertices: usize,
}

/// JSON header plus a CSV vertex table (x, y, z per row).
pub fn write_icosphere(ico: &Icosphere, csv: &Path) -> Result<()> {
    let header = IcosphereHeader { level: ico.level(), vertices: ico.vertex_count() };
    let json = serde_json::to_string_pretty(&header)
        .map_err(|e| Error::parse(csv.display().to_string(), e.to_string()))?;
    write_file(&sidecar_path(csv), &json)?;
    let mut out = String::new();
    for v in ico.vertices() {
        let [x, y, z] = v.coords();
        out.push_str(&format!("{},{},{}\n", fmt(x), fmt(y), fmt(z)));
    }
    write_file(csv, &out)
}

/// Rebuilds the grid at the recorded level and cross-checks the stored
/// vertex table against it.
pub fn read_icosphere(csv: &Path) -> Result<Arc<Icosphere>> {
    let side = sidecar_path(csv);
    let header: IcosphereHeader = serde_json::from_str(&read_file(&side)?)
        .map_err(|e| Error::parse(side.display().to_string(), e.to_string()))?;
    let ico = Arc::new(Icosphere::build(header.level)?);
    if ico.vertex_count() != header.vertices {
        return Err(Error::parse(
            side.display().to_string(),
            format!(
                "header says {} vertices, level {} has {}",
                header.vertices,
                header.level,
                ico.vertex_count()
            ),
        ));
    }
    let text = read_file(csv)?;
    for (i, line) in text.lines().filter(|l| !l.trim().is_empty()).enumerate() {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 3 {
            return Err(Error::parse(
                csv.display().to_string(),
                format!("expected three columns, got {line:?}"),
            ));
        }
        let stored = [
            parse_f64(csv, cells[0])?,
            parse_f64(csv, cells[1])?,
            parse_f64(csv, cells[2])?,
        ];
        let built = ico.vertices()[i].coords();
        if stored != built {
            return Err(Error::parse(
                csv.display().to_string(),
                format!("vertex {i} does not match the level-{} grid", header.level),
            ));
        }
    }
    Ok(ico)
}

/// Registration diagnostics for the JSON output of a run.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Diagnostics {
    pub cost_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// norm drift absorbed by renormalization (sphere domains only)
    #[serde(skip_serializing_if = "Option::is_none")]
    pub raw_norm: Option<f64>,
}

pub fn write_diagnostics(d: &Diagnostics, path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(d)
        .map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
    write_file(path, &json)
}

pub fn read_diagnostics(path: &Path) -> Result<Diagnostics> {
    serde_json::from_str(&read_file(path)?)
        .map_err(|e| Error::parse(path.display().to_string(), e.to_string()))
}

/// Two-column CSV (iteration, cost).
pub fn write_cost_trace_csv(trace: &[f64], path: &Path) -> Result<()> {
    let mut out = String::from("iteration,cost\n");
    for (i, c) in trace.iter().enumerate() {
        out.push_str(&format!("{i},{}\n", fmt(*c)));
    }
    write_file(path, &out)
}

pub fn read_cost_trace_csv(path: &Path) -> Result<Vec<f64>> {
    let text = read_file(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let cell = line.split(',').nth(1).ok_or_else(|| {
            Error::parse(path.display().to_string(), format!("expected two columns, got {line:?}"))
        })?;
        out.push(parse_f64(path, cell)?);
    }
    Ok(out)
}

/// A small self-contained SVG line plot of a cost trace.
pub fn write_cost_trace_svg(trace: &[f64], path: &Path) -> Result<()> {
    let (w, h, pad) = (640.0, 400.0, 40.0);
    let n = trace.len().max(2);
    let max = trace.iter().cloned().fold(f64::MIN, f64::max);
    let min = trace.iter().cloned().fold(f64::MAX, f64::min);
    let span = (max - min).max(1e-300);
    let points: Vec<String> = trace
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            let x = pad + (w - 2.0 * pad) * i as f64 / (n - 1) as f64;
            let y = h - pad - (h - 2.0 * pad) * (c - min) / span;
            format!("{x:.2},{y:.2}")
        })
        .collect();
    let svg = format!(
        concat!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" ",
            "viewBox=\"0 0 {w} {h}\">\n",
            "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n",
            "<polyline fill=\"none\" stroke=\"black\" stroke-width=\"1.5\" points=\"{pts}\"/>\n",
            "<text x=\"{tx}\" y=\"20\" font-family=\"monospace\" font-size=\"13\" ",
            "text-anchor=\"middle\">cost per accepted iteration ({lo:.4e} .. {hi:.4e})</text>\n",
            "</svg>\n"
        ),
        w = w,
        h = h,
        pts = points.join(" "),
        tx = w / 2.0,
        lo = min,
        hi = max,
    );
    write_file(path, &svg)
}

/// JSON summary plus a per-subject CSV for a recovery experiment.
pub fn write_recovery_result(r: &RecoveryResult, csv: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(r)
        .map_err(|e| Error::parse(csv.display().to_string(), e.to_string()))?;
    write_file(&sidecar_path(csv), &json)?;
    let mut out = String::from("subject,recovery_error,warp_magnitude,failure\n");
    for (j, s) in r.subjects.iter().enumerate() {
        out.push_str(&format!(
            "{j},{},{},{}\n",
            fmt(s.recovery_error),
            fmt(s.warp_magnitude),
            s.failure.as_deref().unwrap_or("")
        ));
    }
    write_file(csv, &out)
}
