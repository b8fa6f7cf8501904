use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DVector;

use crate::error::{check_dim, Error, Result};

/// Stored (state, safety sample) pairs with the τ-gate and capacity limit.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    dim: usize,
    inputs: Vec<DVector<f64>>,
    targets: Vec<f64>,
    capacity: usize,
    tau: f64,
}

impl Dataset {
    pub fn new(dim: usize, capacity: usize, tau: f64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("dataset dimension must be positive".into()));
        }
        if capacity == 0 {
            return Err(Error::InvalidArgument("dataset capacity must be positive".into()));
        }
        if !(tau.is_finite() && tau >= 0.0) {
            return Err(Error::InvalidArgument(format!("tau {tau} must be non-negative")));
        }
        Ok(Self {
            dim,
            inputs: Vec::new(),
            targets: Vec::new(),
            capacity,
            tau,
        })
    }

    /// Build from parallel vectors, applying the same gate as online insertion.
    /// Returns the dataset and the number of rejected rows.
    pub fn from_samples(
        dim: usize,
        inputs: Vec<DVector<f64>>,
        targets: Vec<f64>,
        capacity: usize,
        tau: f64,
    ) -> Result<(Self, usize)> {
        check_dim(inputs.len(), targets.len(), "targets vs inputs")?;
        let mut ds = Self::new(dim, capacity, tau)?;
        let mut rejected = 0;
        for (x, y) in inputs.into_iter().zip(targets) {
            check_dim(dim, x.len(), "sample input")?;
            if ds.admits(&x) {
                ds.push_unchecked(x, y);
            } else {
                rejected += 1;
            }
        }
        Ok((ds, rejected))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn inputs(&self) -> &[DVector<f64>] {
        &self.inputs
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    /// Room left and at least τ away from every stored input.
    pub fn admits(&self, x: &DVector<f64>) -> bool {
        if self.len() >= self.capacity {
            return false;
        }
        if self.tau == 0.0 {
            return true;
        }
        let tau2 = self.tau * self.tau;
        self.inputs.iter().all(|xi| (xi - x).norm_squared() >= tau2)
    }

    pub(crate) fn push_unchecked(&mut self, x: DVector<f64>, y: f64) {
        self.inputs.push(x);
        self.targets.push(y);
    }

    /// CSV with a header row naming the axes, one sample per row, target last.
    pub fn write_csv<W: Write>(&self, writer: W, axis_names: Option<&[&str]>) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<String> = match axis_names {
            Some(names) => {
                check_dim(self.dim, names.len(), "axis names")?;
                names.iter().map(|s| s.to_string()).collect()
            }
            None => (0..self.dim).map(|k| format!("x{k}")).collect(),
        };
        header.push("y".into());
        w.write_record(&header)?;
        for (x, y) in self.inputs.iter().zip(&self.targets) {
            let mut row: Vec<String> = x.iter().map(|v| v.to_string()).collect();
            row.push(y.to_string());
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Inverse of [`Dataset::write_csv`]. The input dimension is the number of
    /// header columns minus one.
    pub fn read_csv<R: Read>(reader: R, capacity: usize, tau: f64) -> Result<(Self, usize)> {
        let mut r = csv::Reader::from_reader(reader);
        let cols = r.headers()?.len();
        if cols < 2 {
            return Err(Error::InvalidArgument(
                "dataset CSV needs at least one state column and a target column".into(),
            ));
        }
        let dim = cols - 1;
        let mut inputs = Vec::new();
        let mut targets = Vec::new();
        for (line, rec) in r.records().enumerate() {
            let rec = rec?;
            let vals: Vec<f64> = rec
                .iter()
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::InvalidArgument(format!("dataset row {}: {e}", line + 2)))?;
            inputs.push(DVector::from_column_slice(&vals[..dim]));
            targets.push(vals[dim]);
        }
        Self::from_samples(dim, inputs, targets, capacity, tau)
    }

    pub fn load_csv(path: &Path, capacity: usize, tau: f64) -> Result<(Self, usize)> {
        Self::read_csv(std::fs::File::open(path)?, capacity, tau)
    }
}
