//! Gridded space-time datasets: a CSV table with one line per cell plus a
//! JSON sidecar holding the grid shape, predictor names and units.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::fsio;
use crate::objectives::Response;
use crate::pinn::PredictorCube;

const FIXED_COLUMNS: [&str; 7] = ["t_index", "row", "col", "lat", "lon", "y", "mask"];

/// Responses and predictors on a `times × height × width` grid, cells in
/// t-major then row-major order. `mask[i]` is true where `y[i]` is absent.
#[derive(Debug, Clone, PartialEq)]
pub struct GridDataset {
    pub times: usize,
    pub height: usize,
    pub width: usize,
    /// Per site, row-major.
    pub lat: Vec<f64>,
    pub lon: Vec<f64>,
    pub y: Vec<f64>,
    pub mask: Vec<bool>,
    pub names: Vec<String>,
    /// `cells × d`.
    pub x: Tensor,
    pub units: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Sidecar {
    format: String,
    times: usize,
    height: usize,
    width: usize,
    predictors: Vec<String>,
    #[serde(default)]
    units: BTreeMap<String, String>,
}

const FORMAT: &str = "pinnev-grid-1";

fn schema(file: &Path, detail: impl Into<String>) -> Error {
    Error::Schema { file: file.display().to_string(), detail: detail.into() }
}

/// Path of the sidecar belonging to a table path (`data.csv` → `data.json`).
pub fn sidecar_path(table: &Path) -> PathBuf {
    table.with_extension("json")
}

impl GridDataset {
    /// A dataset of `n` unrelated observations on a `n × 1 × 1` grid.
    pub fn iid(x: Tensor, y: Vec<f64>) -> Result<Self> {
        let n = x.rows;
        if y.len() != n {
            return Err(Error::Shape(format!("{} responses for {n} predictor rows", y.len())));
        }
        let names = (1..=x.cols).map(|j| format!("x_{j}")).collect();
        let mask = y.iter().map(|v| !v.is_finite()).collect();
        Ok(GridDataset { times: n, height: 1, width: 1, lat: vec![0.0], lon: vec![0.0], y, mask, names, x, units: BTreeMap::new() })
    }

    pub fn cells(&self) -> usize {
        self.times * self.height * self.width
    }

    pub fn sites(&self) -> usize {
        self.height * self.width
    }

    pub fn d(&self) -> usize {
        self.names.len()
    }

    pub fn masked_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn time_of(&self, cell: usize) -> usize {
        cell / self.sites()
    }

    pub fn site_of(&self, cell: usize) -> usize {
        cell % self.sites()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.cells();
        let ok = self.lat.len() == self.sites()
            && self.lon.len() == self.sites()
            && self.y.len() == n
            && self.mask.len() == n
            && self.x.rows == n
            && self.x.cols == self.names.len();
        if !ok {
            return Err(Error::Shape(format!(
                "dataset arrays do not match a {}x{}x{} grid with {} predictors",
                self.times,
                self.height,
                self.width,
                self.names.len()
            )));
        }
        if let Some(i) = (0..n).find(|&i| !self.mask[i] && !self.y[i].is_finite()) {
            return Err(Error::invalid(format!("cell {i} is unmasked but has response {}", self.y[i])));
        }
        Ok(())
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn cube(&self) -> Result<PredictorCube> {
        PredictorCube::new(self.times, self.height, self.width, self.names.clone(), self.x.clone())
    }

    /// Response for the modelling scale; masked cells are unobserved.
    pub fn response(&self, sqrt: bool) -> Result<Response> {
        let y = self.y.iter().zip(&self.mask).map(|(&v, &m)| if m { f64::NAN } else if sqrt { v.max(0.0).sqrt() } else { v }).collect();
        Response::new(y, self.mask.iter().map(|m| !m).collect(), None)
    }

    pub fn site_coords(&self) -> Vec<(f64, f64)> {
        self.lat.iter().copied().zip(self.lon.iter().copied()).collect()
    }

    /// The CSV table as bytes.
    pub fn table_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut w = csv::Writer::from_writer(Vec::new());
        let header: Vec<&str> = FIXED_COLUMNS.iter().copied().chain(self.names.iter().map(String::as_str)).collect();
        w.write_record(&header)?;
        let mut rec = Vec::with_capacity(header.len());
        for i in 0..self.cells() {
            let (t, site) = (self.time_of(i), self.site_of(i));
            rec.clear();
            rec.push(t.to_string());
            rec.push((site / self.width).to_string());
            rec.push((site % self.width).to_string());
            rec.push(self.lat[site].to_string());
            rec.push(self.lon[site].to_string());
            rec.push(if self.mask[i] { String::new() } else { self.y[i].to_string() });
            rec.push(u8::from(self.mask[i]).to_string());
            rec.extend(self.x.row(i).iter().map(f64::to_string));
            w.write_record(&rec)?;
        }
        w.into_inner().map_err(|e| Error::io("<memory>", e.into_error()))
    }

    fn sidecar_bytes(&self) -> Result<Vec<u8>> {
        let sc = Sidecar {
            format: FORMAT.into(),
            times: self.times,
            height: self.height,
            width: self.width,
            predictors: self.names.clone(),
            units: self.units.clone(),
        };
        let mut b = serde_json::to_vec_pretty(&sc)?;
        b.push(b'\n');
        Ok(b)
    }

    /// Writes the table to `path` and the sidecar next to it; returns the
    /// SHA-256 of the table.
    pub fn save(&self, path: &Path) -> Result<String> {
        let table = self.table_bytes()?;
        fsio::write_atomic(&sidecar_path(path), &self.sidecar_bytes()?)?;
        fsio::write_atomic(path, &table)?;
        Ok(hex::encode(Sha256::digest(&table)))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let side = sidecar_path(path);
        let sc: Sidecar = serde_json::from_str(&fsio::read_string(&side)?).map_err(|e| schema(&side, e.to_string()))?;
        if sc.format != FORMAT {
            return Err(schema(&side, format!("format `{}`, expected `{FORMAT}`", sc.format)));
        }
        let bytes = fsio::read(path)?;
        let mut r = csv::Reader::from_reader(bytes.as_slice());
        let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
        let expected: Vec<String> = FIXED_COLUMNS.iter().map(|s| s.to_string()).chain(sc.predictors.iter().cloned()).collect();
        for (j, want) in expected.iter().enumerate() {
            match header.get(j) {
                Some(h) if h == want => {}
                Some(h) => return Err(schema(path, format!("column {} is `{h}`, expected `{want}`", j + 1))),
                None => return Err(schema(path, format!("missing column `{want}`"))),
            }
        }
        if header.len() > expected.len() {
            return Err(schema(path, format!("unexpected column `{}`", header[expected.len()])));
        }
        let (times, height, width) = (sc.times, sc.height, sc.width);
        let sites = height * width;
        let n = times * sites;
        let d = sc.predictors.len();
        let mut ds = GridDataset {
            times,
            height,
            width,
            lat: vec![f64::NAN; sites],
            lon: vec![f64::NAN; sites],
            y: Vec::with_capacity(n),
            mask: Vec::with_capacity(n),
            names: sc.predictors,
            x: Tensor::zeros(n, d),
            units: sc.units,
        };
        let mut count = 0;
        for (i, rec) in r.records().enumerate() {
            let rec = rec?;
            let line = i + 2;
            if i >= n {
                return Err(schema(path, format!("more than {n} data lines")));
            }
            let num = |j: usize| -> Result<f64> {
                rec[j].parse::<f64>().map_err(|_| schema(path, format!("line {line}, column `{}`: `{}` is not a number", expected[j], &rec[j])))
            };
            let int = |j: usize| -> Result<usize> {
                rec[j].parse::<usize>().map_err(|_| schema(path, format!("line {line}, column `{}`: `{}` is not an index", expected[j], &rec[j])))
            };
            let (t, row, col) = (int(0)?, int(1)?, int(2)?);
            if (t, row, col) != (i / sites, (i % sites) / width, i % width) {
                return Err(schema(path, format!("line {line}: cell ({t}, {row}, {col}) out of canonical order")));
            }
            let site = i % sites;
            if t == 0 {
                ds.lat[site] = num(3)?;
                ds.lon[site] = num(4)?;
            }
            let masked = match &rec[6] {
                "0" => false,
                "1" => true,
                other => return Err(schema(path, format!("line {line}, column `mask`: `{other}` is not 0 or 1"))),
            };
            let y = if masked && rec[5].is_empty() { f64::NAN } else { num(5)? };
            ds.y.push(y);
            ds.mask.push(masked);
            for j in 0..d {
                ds.x.data[i * d + j] = num(7 + j)?;
            }
            count += 1;
        }
        if count != n {
            return Err(schema(path, format!("{count} data lines, expected {n}")));
        }
        ds.validate()?;
        Ok(ds)
    }
}
