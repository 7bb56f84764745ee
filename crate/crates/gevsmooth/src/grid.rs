//! Grid-box bookkeeping: lattice coordinates, elevation and region labels,
//! edge-neighbour structure, the GMRF penalty matrix, TXx extraction from
//! daily series and dataset ingestion.

use crate::error::Error;
use crate::gev::Sample;
use crate::Result;
use chrono::{Datelike, NaiveDate};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

/// One grid box of a regular lattice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridBox {
    pub id: usize,
    pub lon: f64,
    pub lat: f64,
    pub elevation_km: f64,
    pub region: String,
}

/// A (possibly irregular) subset of a regular lon/lat lattice.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    boxes: Vec<GridBox>,
    spacing: f64,
}

impl Grid {
    /// Build a grid from boxes, validating id density and coordinate
    /// uniqueness. `spacing` is the lattice step in degrees.
    pub fn from_boxes(boxes: Vec<GridBox>, spacing: f64) -> Result<Self> {
        if boxes.is_empty() {
            return Err(Error::Ingest("grid has no boxes".into()));
        }
        if !(spacing.is_finite() && spacing > 0.0) {
            return Err(Error::Ingest(format!("grid spacing must be positive, got {spacing}")));
        }
        let n = boxes.len();
        let mut seen = vec![false; n];
        let mut coords = HashMap::with_capacity(n);
        for b in &boxes {
            if b.id >= n || seen[b.id] {
                return Err(Error::Ingest(format!(
                    "grid box ids must be unique and dense 0..{}, offending id {}",
                    n - 1,
                    b.id
                )));
            }
            seen[b.id] = true;
            let key = lattice_key(b.lon, b.lat, spacing)?;
            if coords.insert(key, b.id).is_some() {
                return Err(Error::Ingest(format!(
                    "duplicate grid coordinates ({}, {})",
                    b.lon, b.lat
                )));
            }
        }
        let mut boxes = boxes;
        boxes.sort_by_key(|b| b.id);
        Ok(Grid { boxes, spacing })
    }

    pub fn n_boxes(&self) -> usize {
        self.boxes.len()
    }

    pub fn boxes(&self) -> &[GridBox] {
        &self.boxes
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    /// Elevations centered to zero mean over the grid, paired with the
    /// centering constant (the mean elevation in km).
    pub fn centered_elevations(&self) -> (Vec<f64>, f64) {
        let mean = self.boxes.iter().map(|b| b.elevation_km).sum::<f64>() / self.n_boxes() as f64;
        (self.boxes.iter().map(|b| b.elevation_km - mean).collect(), mean)
    }

    /// Distinct region labels in first-appearance order.
    pub fn regions(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for b in &self.boxes {
            if !out.iter().any(|r| r == &b.region) {
                out.push(b.region.clone());
            }
        }
        out
    }

    /// Ids of the boxes carrying `region`.
    pub fn region_boxes(&self, region: &str) -> Vec<usize> {
        self.boxes.iter().filter(|b| b.region == region).map(|b| b.id).collect()
    }

    /// Restrict to one region, renumbering box ids densely. Returns the
    /// sub-grid and the original ids in new-id order.
    pub fn restrict_to_region(&self, region: &str) -> Result<(Grid, Vec<usize>)> {
        let keep = self.region_boxes(region);
        if keep.is_empty() {
            return Err(Error::Ingest(format!("region {region:?} has no grid boxes")));
        }
        let boxes = keep
            .iter()
            .enumerate()
            .map(|(new_id, &old)| {
                let mut b = self.boxes[old].clone();
                b.id = new_id;
                b
            })
            .collect();
        Ok((Grid { boxes, spacing: self.spacing }, keep))
    }
}

fn lattice_key(lon: f64, lat: f64, spacing: f64) -> Result<(i64, i64)> {
    let rx = lon / spacing;
    let ry = lat / spacing;
    let ix = rx.round();
    let iy = ry.round();
    if (rx - ix).abs() > 1e-4 || (ry - iy).abs() > 1e-4 {
        return Err(Error::Ingest(format!(
            "coordinates ({lon}, {lat}) do not sit on a lattice of spacing {spacing}"
        )));
    }
    Ok((ix as i64, iy as i64))
}

/// Edge-neighbour sets: `j` neighbours `i` iff their coordinates differ by
/// exactly one spacing step in exactly one coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct Neighborhood {
    adjacency: Vec<Vec<usize>>,
}

impl Neighborhood {
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.adjacency[i]
    }

    pub fn n_boxes(&self) -> usize {
        self.adjacency.len()
    }

    /// Neighbour pairs (i, j) with i < j, each edge once.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (i, nb) in self.adjacency.iter().enumerate() {
            for &j in nb {
                if j > i {
                    out.push((i, j));
                }
            }
        }
        out
    }

    /// Connected-component label per box plus the component count.
    pub fn components(&self) -> (Vec<usize>, usize) {
        let n = self.adjacency.len();
        let mut label = vec![usize::MAX; n];
        let mut count = 0;
        for start in 0..n {
            if label[start] != usize::MAX {
                continue;
            }
            let mut stack = vec![start];
            label[start] = count;
            while let Some(i) = stack.pop() {
                for &j in &self.adjacency[i] {
                    if label[j] == usize::MAX {
                        label[j] = count;
                        stack.push(j);
                    }
                }
            }
            count += 1;
        }
        (label, count)
    }
}

/// Neighbours share a lattice edge; boxes on domain boundaries get fewer.
pub fn build_neighborhood(grid: &Grid) -> Neighborhood {
    let spacing = grid.spacing();
    let mut index: HashMap<(i64, i64), usize> = HashMap::with_capacity(grid.n_boxes());
    for b in grid.boxes() {
        // Grid construction already validated lattice membership.
        let key = lattice_key(b.lon, b.lat, spacing).expect("validated lattice");
        index.insert(key, b.id);
    }
    let mut adjacency = vec![Vec::new(); grid.n_boxes()];
    for b in grid.boxes() {
        let (ix, iy) = lattice_key(b.lon, b.lat, spacing).expect("validated lattice");
        for (dx, dy) in [(1i64, 0i64), (-1, 0), (0, 1), (0, -1)] {
            if let Some(&j) = index.get(&(ix + dx, iy + dy)) {
                adjacency[b.id].push(j);
            }
        }
        adjacency[b.id].sort_unstable();
    }
    Neighborhood { adjacency }
}

/// The GMRF penalty matrix `S` with `S_ii = |N(i)|` and `S_ij = -1` for
/// neighbours: a graph Laplacian, so `v' S v = sum over edges (v_i - v_j)^2`.
#[derive(Debug, Clone, PartialEq)]
pub struct PenaltyMatrix {
    n: usize,
    degree: Vec<usize>,
    pairs: Vec<(usize, usize)>,
    components: Vec<usize>,
    n_components: usize,
}

pub fn build_penalty(nb: &Neighborhood) -> PenaltyMatrix {
    let n = nb.n_boxes();
    let degree = (0..n).map(|i| nb.neighbors(i).len()).collect();
    let (components, n_components) = nb.components();
    PenaltyMatrix { n, degree, pairs: nb.pairs(), components, n_components }
}

impl PenaltyMatrix {
    pub fn dim(&self) -> usize {
        self.n
    }

    /// Number of connected grid components: the dimension of the null space.
    pub fn n_components(&self) -> usize {
        self.n_components
    }

    /// Component label per box.
    pub fn component_labels(&self) -> &[usize] {
        &self.components
    }

    pub fn rank(&self) -> usize {
        self.n - self.n_components
    }

    /// Neighbour pairs (i, j), i < j.
    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    /// `out += scale * S v`.
    pub fn accumulate_matvec(&self, v: &[f64], scale: f64, out: &mut [f64]) {
        assert_eq!(v.len(), self.n);
        assert_eq!(out.len(), self.n);
        for i in 0..self.n {
            out[i] += scale * self.degree[i] as f64 * v[i];
        }
        for &(i, j) in &self.pairs {
            out[i] -= scale * v[j];
            out[j] -= scale * v[i];
        }
    }

    /// Quadratic form `v' S v`, evaluated as the neighbour-pair sum
    /// `sum (v_i - v_j)^2` (exactly zero on constant fields).
    pub fn quadratic_form(&self, v: &[f64]) -> f64 {
        self.pairs.iter().map(|&(i, j)| (v[i] - v[j]) * (v[i] - v[j])).sum()
    }

    /// `dense[offset.., offset..] += scale * S`.
    pub fn add_scaled_to_dense(&self, dense: &mut DMatrix<f64>, offset: usize, scale: f64) {
        for i in 0..self.n {
            dense[(offset + i, offset + i)] += scale * self.degree[i] as f64;
        }
        for &(i, j) in &self.pairs {
            dense[(offset + i, offset + j)] -= scale;
            dense[(offset + j, offset + i)] -= scale;
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.n, self.n);
        self.add_scaled_to_dense(&mut m, 0, 1.0);
        m
    }

    /// Log pseudo-determinant: the sum of logs of the `rank()` largest
    /// eigenvalues (the nonzero spectrum of the Laplacian).
    pub fn log_pseudo_det(&self) -> f64 {
        if self.rank() == 0 {
            return 0.0;
        }
        let eig = self.to_dense().symmetric_eigen();
        let mut ev: Vec<f64> = eig.eigenvalues.iter().copied().collect();
        ev.sort_by(|a, b| b.partial_cmp(a).unwrap());
        ev.iter().take(self.rank()).map(|&e| e.max(1e-300).ln()).sum()
    }
}

/// Gridded annual maxima: a `n_boxes x n_years` matrix with a missing mask,
/// year axis shared across boxes.
#[derive(Debug, Clone, PartialEq)]
pub struct GriddedDataset {
    grid: Grid,
    /// Calendar years, strictly increasing.
    years: Vec<i32>,
    /// Row-major `n_boxes x n_years`; `None` marks missing.
    txx: Vec<Option<f64>>,
}

impl GriddedDataset {
    pub fn new(grid: Grid, years: Vec<i32>, txx: Vec<Option<f64>>) -> Result<Self> {
        if years.is_empty() || !years.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Ingest(
                "dataset years must be non-empty and strictly increasing".into(),
            ));
        }
        if txx.len() != grid.n_boxes() * years.len() {
            return Err(Error::Ingest(format!(
                "txx matrix has {} cells, expected {} boxes x {} years",
                txx.len(),
                grid.n_boxes(),
                years.len()
            )));
        }
        if let Some(v) = txx.iter().flatten().find(|v| !v.is_finite()) {
            return Err(Error::Ingest(format!("non-finite txx value {v}")));
        }
        let ds = GriddedDataset { grid, years, txx };
        for b in 0..ds.n_boxes() {
            if ds.box_observation_count(b) == 0 {
                return Err(Error::Ingest(format!("grid box {b} has no non-missing years")));
            }
        }
        Ok(ds)
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn years(&self) -> &[i32] {
        &self.years
    }

    pub fn n_boxes(&self) -> usize {
        self.grid.n_boxes()
    }

    pub fn n_years(&self) -> usize {
        self.years.len()
    }

    /// TXx at (box, year-index), if present.
    pub fn value(&self, box_id: usize, t: usize) -> Option<f64> {
        self.txx[box_id * self.years.len() + t]
    }

    pub fn box_observation_count(&self, box_id: usize) -> usize {
        let t = self.years.len();
        self.txx[box_id * t..(box_id + 1) * t].iter().flatten().count()
    }

    /// All non-missing observations as (box, year-index, value).
    pub fn observations(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.n_boxes()).flat_map(move |b| {
            (0..self.n_years()).filter_map(move |t| self.value(b, t).map(|y| (b, t, y)))
        })
    }

    pub fn n_observations(&self) -> usize {
        self.txx.iter().flatten().count()
    }

    /// One box's observations as a sample with 1-based year indices.
    pub fn box_sample(&self, box_id: usize) -> Result<Sample> {
        let mut values = Vec::new();
        let mut years = Vec::new();
        for t in 0..self.n_years() {
            if let Some(y) = self.value(box_id, t) {
                values.push(y);
                years.push(t as u32 + 1);
            }
        }
        Sample::new(values, years)
    }

    /// Copy with the listed (box, year-index) observations removed.
    pub fn with_held_out(&self, held_out: &[(usize, usize)]) -> GriddedDataset {
        let mut txx = self.txx.clone();
        for &(b, t) in held_out {
            txx[b * self.years.len() + t] = None;
        }
        GriddedDataset { grid: self.grid.clone(), years: self.years.clone(), txx }
    }

    /// Restrict to one region (renumbering boxes densely).
    pub fn restrict_to_region(&self, region: &str) -> Result<GriddedDataset> {
        let (grid, old_ids) = self.grid.restrict_to_region(region)?;
        let t = self.years.len();
        let mut txx = Vec::with_capacity(grid.n_boxes() * t);
        for &old in &old_ids {
            txx.extend_from_slice(&self.txx[old * t..(old + 1) * t]);
        }
        GriddedDataset::new(grid, self.years.clone(), txx)
    }
}

/// Summary produced by ingestion: dropped boxes and per-region counts.
#[derive(Debug, Clone, Serialize)]
pub struct IngestReport {
    pub n_boxes: usize,
    pub n_years: usize,
    pub n_observations: usize,
    pub region_box_counts: Vec<(String, usize)>,
    pub dropped_boxes: Vec<usize>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Deserialize)]
struct GridRow {
    box_id: usize,
    lon: f64,
    lat: f64,
    elevation_km: f64,
    region: String,
}

#[derive(Debug, Deserialize)]
struct TxxRow {
    box_id: usize,
    year: i32,
    txx_celsius: Option<f64>,
}

/// Read the grid metadata CSV (`box_id, lon, lat, elevation_km, region`).
/// Spacing is inferred as the smallest positive coordinate gap unless
/// overridden.
pub fn read_grid_csv(path: &Path, spacing_override: Option<f64>) -> Result<Grid> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut boxes = Vec::new();
    for row in reader.deserialize() {
        let row: GridRow = row?;
        boxes.push(GridBox {
            id: row.box_id,
            lon: row.lon,
            lat: row.lat,
            elevation_km: row.elevation_km,
            region: row.region,
        });
    }
    let spacing = match spacing_override {
        Some(s) => s,
        None => infer_spacing(&boxes),
    };
    Grid::from_boxes(boxes, spacing)
}

fn infer_spacing(boxes: &[GridBox]) -> f64 {
    let mut best = f64::INFINITY;
    for axis in 0..2 {
        let mut v: Vec<f64> =
            boxes.iter().map(|b| if axis == 0 { b.lon } else { b.lat }).collect();
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        v.dedup_by(|a, b| (*a - *b).abs() < 1e-9);
        for w in v.windows(2) {
            let d = w[1] - w[0];
            if d > 1e-9 && d < best {
                best = d;
            }
        }
    }
    if best.is_finite() {
        best
    } else {
        1.0
    }
}

/// Ingest the txx and grid CSVs into a validated dataset. Boxes whose series
/// is entirely missing are dropped (with a warning) and ids renumbered.
pub fn ingest_dataset(txx_path: &Path, grid_path: &Path) -> Result<(GriddedDataset, IngestReport)> {
    ingest_dataset_with_spacing(txx_path, grid_path, None)
}

pub fn ingest_dataset_with_spacing(
    txx_path: &Path,
    grid_path: &Path,
    spacing_override: Option<f64>,
) -> Result<(GriddedDataset, IngestReport)> {
    let grid = read_grid_csv(grid_path, spacing_override)?;
    let n = grid.n_boxes();

    let mut reader = csv::Reader::from_path(txx_path)?;
    let mut years: Vec<i32> = Vec::new();
    let mut cells: HashMap<(usize, i32), Option<f64>> = HashMap::new();
    for (line, row) in reader.deserialize().enumerate() {
        let row: TxxRow = row?;
        if row.box_id >= n {
            return Err(Error::Ingest(format!(
                "txx row {} references unknown box {}",
                line + 2,
                row.box_id
            )));
        }
        if cells.insert((row.box_id, row.year), row.txx_celsius).is_some() {
            return Err(Error::Ingest(format!(
                "duplicate (box, year) row at line {}: box {} year {}",
                line + 2,
                row.box_id,
                row.year
            )));
        }
        if !years.contains(&row.year) {
            years.push(row.year);
        }
    }
    if years.is_empty() {
        return Err(Error::Ingest("txx table contains no rows".into()));
    }
    years.sort_unstable();

    let mut txx = vec![None; n * years.len()];
    for ((b, year), v) in cells {
        let t = years.binary_search(&year).expect("year collected above");
        txx[b * years.len() + t] = v.filter(|x| x.is_finite());
    }
    finalize_dataset(grid, years, txx)
}

fn finalize_dataset(
    grid: Grid,
    years: Vec<i32>,
    txx: Vec<Option<f64>>,
) -> Result<(GriddedDataset, IngestReport)> {
    let n = grid.n_boxes();
    let t = years.len();
    let mut dropped = Vec::new();
    let mut keep = Vec::new();
    for b in 0..n {
        if txx[b * t..(b + 1) * t].iter().all(|v| v.is_none()) {
            dropped.push(b);
        } else {
            keep.push(b);
        }
    }
    if keep.is_empty() {
        return Err(Error::Ingest("every grid box has an all-missing series".into()));
    }

    let mut warnings = Vec::new();
    let (grid, txx) = if dropped.is_empty() {
        (grid, txx)
    } else {
        warnings.push(format!(
            "dropped {} box(es) with all-missing series (original ids {:?}); remaining boxes renumbered",
            dropped.len(),
            dropped
        ));
        let boxes = keep
            .iter()
            .enumerate()
            .map(|(new_id, &old)| {
                let mut b = grid.boxes()[old].clone();
                b.id = new_id;
                b
            })
            .collect::<Vec<_>>();
        let mut new_txx = Vec::with_capacity(keep.len() * t);
        for &old in &keep {
            new_txx.extend_from_slice(&txx[old * t..(old + 1) * t]);
        }
        (Grid::from_boxes(boxes, grid.spacing())?, new_txx)
    };

    let ds = GriddedDataset::new(grid, years, txx)?;
    let region_box_counts = ds
        .grid()
        .regions()
        .into_iter()
        .map(|r| {
            let c = ds.grid().region_boxes(&r).len();
            (r, c)
        })
        .collect();
    let report = IngestReport {
        n_boxes: ds.n_boxes(),
        n_years: ds.n_years(),
        n_observations: ds.n_observations(),
        region_box_counts,
        dropped_boxes: dropped,
        warnings,
    };
    Ok((ds, report))
}

/// One daily-maximum record.
#[derive(Debug, Clone, Deserialize)]
pub struct DailyRecord {
    pub box_id: usize,
    pub date: NaiveDate,
    pub tmax_celsius: Option<f64>,
}

pub fn read_daily_csv(path: &Path) -> Result<Vec<DailyRecord>> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for row in reader.deserialize() {
        out.push(row?);
    }
    Ok(out)
}

fn days_in_year(year: i32) -> u32 {
    if NaiveDate::from_ymd_opt(year, 2, 29).is_some() {
        366
    } else {
        365
    }
}

/// Annual maxima of daily maxima. A (box, year) cell is marked missing when
/// more than 10 daily observations of that year are missing (absent rows
/// count as missing).
pub fn extract_txx(grid: Grid, daily: &[DailyRecord]) -> Result<(GriddedDataset, IngestReport)> {
    let n = grid.n_boxes();
    let mut seen: HashMap<(usize, NaiveDate), ()> = HashMap::new();
    let mut per_year: HashMap<(usize, i32), (u32, f64)> = HashMap::new(); // (count, max)
    let mut years: Vec<i32> = Vec::new();
    for rec in daily {
        if rec.box_id >= n {
            return Err(Error::Ingest(format!("daily row references unknown box {}", rec.box_id)));
        }
        if seen.insert((rec.box_id, rec.date), ()).is_some() {
            return Err(Error::Ingest(format!(
                "duplicate daily row: box {} date {}",
                rec.box_id, rec.date
            )));
        }
        let year = rec.date.year();
        if !years.contains(&year) {
            years.push(year);
        }
        if let Some(v) = rec.tmax_celsius.filter(|v| v.is_finite()) {
            let e = per_year.entry((rec.box_id, year)).or_insert((0, f64::NEG_INFINITY));
            e.0 += 1;
            e.1 = e.1.max(v);
        }
    }
    if years.is_empty() {
        return Err(Error::Ingest("daily table contains no rows".into()));
    }
    years.sort_unstable();

    let t = years.len();
    let mut txx = vec![None; n * t];
    for ((b, year), (count, max)) in per_year {
        let missing = days_in_year(year) - count.min(days_in_year(year));
        if missing <= 10 {
            let idx = years.binary_search(&year).expect("year collected above");
            txx[b * t + idx] = Some(max);
        }
    }
    finalize_dataset(grid, years, txx)
}

/// Write the grid CSV in the ingestion schema.
pub fn write_grid_csv(grid: &Grid, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["box_id", "lon", "lat", "elevation_km", "region"])?;
    for b in grid.boxes() {
        w.write_record([
            b.id.to_string(),
            format_float(b.lon),
            format_float(b.lat),
            format_float(b.elevation_km),
            b.region.clone(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Write the txx CSV in the ingestion schema (empty field = missing).
pub fn write_txx_csv(ds: &GriddedDataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["box_id", "year", "txx_celsius"])?;
    for b in 0..ds.n_boxes() {
        for (t, &year) in ds.years().iter().enumerate() {
            let v = match ds.value(b, t) {
                Some(x) => format_float(x),
                None => String::new(),
            };
            w.write_record([b.to_string(), year.to_string(), v])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Shortest round-trip decimal representation; shared by all emitters so CSV
/// and JSON artifacts agree bit for bit.
pub(crate) fn format_float(v: f64) -> String {
    let mut buf = serde_json::to_string(&v).expect("finite float");
    if buf.ends_with(".0") {
        buf.truncate(buf.len() - 2);
    }
    buf
}

/// Small helper shared by the table emitters in other modules.
pub(crate) fn write_csv_rows(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for row in rows {
        w.write_record(row)?;
    }
    w.flush()?;
    Ok(())
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(text.as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn block_grid(nx: usize, ny: usize) -> Grid {
        let mut boxes = Vec::new();
        for j in 0..ny {
            for i in 0..nx {
                boxes.push(GridBox {
                    id: j * nx + i,
                    lon: i as f64 * 0.25,
                    lat: j as f64 * 0.25,
                    elevation_km: 0.0,
                    region: "R1".into(),
                });
            }
        }
        Grid::from_boxes(boxes, 0.25).unwrap()
    }

    #[test]
    fn two_by_two_has_two_neighbors_each() {
        let nb = build_neighborhood(&block_grid(2, 2));
        for i in 0..4 {
            assert_eq!(nb.neighbors(i).len(), 2, "box {i}");
        }
    }

    #[test]
    fn single_box_has_no_neighbors() {
        let nb = build_neighborhood(&block_grid(1, 1));
        assert!(nb.neighbors(0).is_empty());
        assert_eq!(nb.components().1, 1);
    }

    #[test]
    fn three_by_three_degree_census() {
        let nb = build_neighborhood(&block_grid(3, 3));
        let degrees: Vec<usize> = (0..9).map(|i| nb.neighbors(i).len()).collect();
        assert_eq!(degrees, vec![2, 3, 2, 3, 4, 3, 2, 3, 2]);
    }

    #[test]
    fn neighborhood_is_symmetric() {
        let nb = build_neighborhood(&block_grid(4, 3));
        for i in 0..nb.n_boxes() {
            for &j in nb.neighbors(i) {
                assert!(nb.neighbors(j).contains(&i));
                assert_ne!(i, j);
            }
        }
    }

    #[test]
    fn penalty_null_space_and_pair_value() {
        let s = build_penalty(&build_neighborhood(&block_grid(2, 2)));
        let c = vec![3.7; 4];
        assert_eq!(s.quadratic_form(&c), 0.0);
        // Box 0 neighbours boxes 1 and 2 in the 2x2 block.
        let v = vec![1.0, 0.0, 0.0, 0.0];
        assert!((s.quadratic_form(&v) - 2.0).abs() < 1e-14);
    }

    #[test]
    fn penalty_row_sums_are_zero() {
        let s = build_penalty(&build_neighborhood(&block_grid(3, 4)));
        let dense = s.to_dense();
        for i in 0..s.dim() {
            let row_sum: f64 = (0..s.dim()).map(|j| dense[(i, j)]).sum();
            assert!(row_sum.abs() < 1e-12);
        }
    }

    #[test]
    fn disconnected_grid_components() {
        // Two boxes far apart on the lattice.
        let boxes = vec![
            GridBox { id: 0, lon: 0.0, lat: 0.0, elevation_km: 0.1, region: "A".into() },
            GridBox { id: 1, lon: 2.0, lat: 0.0, elevation_km: 0.2, region: "B".into() },
        ];
        let grid = Grid::from_boxes(boxes, 0.25).unwrap();
        let s = build_penalty(&build_neighborhood(&grid));
        assert_eq!(s.n_components(), 2);
        assert_eq!(s.rank(), 0);
    }

    #[test]
    fn duplicate_coordinates_rejected() {
        let boxes = vec![
            GridBox { id: 0, lon: 0.0, lat: 0.0, elevation_km: 0.0, region: "A".into() },
            GridBox { id: 1, lon: 0.0, lat: 0.0, elevation_km: 0.0, region: "A".into() },
        ];
        assert!(Grid::from_boxes(boxes, 0.25).is_err());
    }

    #[test]
    fn extract_txx_missing_rule() {
        let grid = block_grid(1, 1);
        let mut daily = Vec::new();
        // 1951: full year, max 31.2.
        for d in 1..=365u32 {
            let date = NaiveDate::from_yo_opt(1951, d).unwrap();
            let v = if d == 200 { 31.2 } else { 20.0 };
            daily.push(DailyRecord { box_id: 0, date, tmax_celsius: Some(v) });
        }
        // 1952 (leap, 366 days): exactly 10 missing -> retained.
        for d in 1..=366u32 {
            let date = NaiveDate::from_yo_opt(1952, d).unwrap();
            let v = if d <= 10 { None } else { Some(18.0 + (d % 7) as f64) };
            daily.push(DailyRecord { box_id: 0, date, tmax_celsius: v });
        }
        // 1953: 12 missing -> dropped.
        for d in 1..=365u32 {
            let date = NaiveDate::from_yo_opt(1953, d).unwrap();
            let v = if d <= 12 { None } else { Some(25.0) };
            daily.push(DailyRecord { box_id: 0, date, tmax_celsius: v });
        }
        let (ds, _) = extract_txx(grid, &daily).unwrap();
        assert_eq!(ds.years(), &[1951, 1952, 1953]);
        assert_eq!(ds.value(0, 0), Some(31.2));
        assert_eq!(ds.value(0, 1), Some(24.0));
        assert_eq!(ds.value(0, 2), None);
    }

    #[test]
    fn extract_txx_empty_year_is_missing_not_error() {
        let grid = block_grid(2, 1);
        let mut daily = Vec::new();
        for b in 0..2 {
            for d in 1..=365u32 {
                let date = NaiveDate::from_yo_opt(1960, d).unwrap();
                daily.push(DailyRecord { box_id: b, date, tmax_celsius: Some(20.0 + b as f64) });
            }
        }
        // Box 1 has rows for 1961 but every value is missing.
        for d in 1..=365u32 {
            let date = NaiveDate::from_yo_opt(1961, d).unwrap();
            daily.push(DailyRecord { box_id: 1, date, tmax_celsius: None });
        }
        let (ds, _) = extract_txx(grid, &daily).unwrap();
        assert_eq!(ds.value(1, 1), None);
        assert_eq!(ds.value(1, 0), Some(21.0));
    }
}
