//! Reference/observation datasets and their CSV representation.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::model::{Signal, Topology};

/// References `r` (m × N) and observations `x_o` (p × N), one column per time step.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    r: DMatrix<f64>,
    x_o: DMatrix<f64>,
    labels: Vec<Signal>,
}

impl Dataset {
    pub fn new(r: DMatrix<f64>, x_o: DMatrix<f64>, labels: Vec<Signal>) -> Result<Self> {
        if r.ncols() != x_o.ncols() {
            return Err(Error::Dimension(format!(
                "reference horizon {} differs from observation horizon {}",
                r.ncols(),
                x_o.ncols()
            )));
        }
        if labels.len() != x_o.nrows() {
            return Err(Error::Dimension(format!(
                "{} labels for {} observed signals",
                labels.len(),
                x_o.nrows()
            )));
        }
        if r.iter().chain(x_o.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Input("dataset contains non-finite entries".into()));
        }
        Ok(Self { r, x_o, labels })
    }

    pub fn horizon(&self) -> usize {
        self.r.ncols()
    }
    pub fn references(&self) -> usize {
        self.r.nrows()
    }
    pub fn observations(&self) -> usize {
        self.x_o.nrows()
    }
    pub fn r(&self) -> &DMatrix<f64> {
        &self.r
    }
    pub fn x_o(&self) -> &DMatrix<f64> {
        &self.x_o
    }
    pub fn labels(&self) -> &[Signal] {
        &self.labels
    }

    /// Checks that the dataset fits a topology.
    pub fn check_topology(&self, topo: &Topology) -> Result<()> {
        if self.references() != topo.references() {
            return Err(Error::Dimension(format!(
                "dataset has {} references, topology expects {}",
                self.references(),
                topo.references()
            )));
        }
        if self.labels != topo.observed_signals() {
            return Err(Error::Dimension(
                "dataset observations do not match the observed signals of the topology".into(),
            ));
        }
        Ok(())
    }

    /// First `n` samples.
    pub fn truncate(&self, n: usize) -> Self {
        let n = n.min(self.horizon());
        Self {
            r: self.r.columns(0, n).into_owned(),
            x_o: self.x_o.columns(0, n).into_owned(),
            labels: self.labels.clone(),
        }
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header = vec!["k".to_string()];
        header.extend((1..=self.references()).map(|i| format!("r{i}")));
        header.extend((1..=self.observations()).map(|i| format!("xo{i}")));
        wr.write_record(&header)?;
        for k in 0..self.horizon() {
            let mut row = vec![(k + 1).to_string()];
            row.extend(self.r.column(k).iter().map(|v| format!("{v:e}")));
            row.extend(self.x_o.column(k).iter().map(|v| format!("{v:e}")));
            wr.write_record(&row)?;
        }
        wr.flush()?;
        Ok(())
    }

    /// Reads `k,r1..rm,xo1..xop`; the column split and labels come from `topo`.
    pub fn read_csv<R: Read>(rd: R, topo: &Topology) -> Result<Self> {
        let mut reader = csv::Reader::from_reader(rd);
        let header = reader.headers()?.clone();
        let m = topo.references();
        let p = topo.observations();
        let mut expected = vec!["k".to_string()];
        expected.extend((1..=m).map(|i| format!("r{i}")));
        expected.extend((1..=p).map(|i| format!("xo{i}")));
        let got: Vec<&str> = header.iter().map(str::trim).collect();
        if got != expected {
            return Err(Error::Input(format!(
                "dataset header {:?} does not match expected {:?}",
                got, expected
            )));
        }
        let mut r = Vec::new();
        let mut x = Vec::new();
        for (line, rec) in reader.records().enumerate() {
            let rec = rec?;
            if rec.len() != 1 + m + p {
                return Err(Error::Input(format!("row {} has {} fields", line + 1, rec.len())));
            }
            let parse = |s: &str| -> Result<f64> {
                s.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Input(format!("row {}: cannot parse '{s}'", line + 1)))
            };
            for j in 0..m {
                r.push(parse(&rec[1 + j])?);
            }
            for j in 0..p {
                x.push(parse(&rec[1 + m + j])?);
            }
        }
        let n = r.len() / m.max(1);
        if n == 0 {
            return Err(Error::Input("dataset has no samples".into()));
        }
        Self::new(
            DMatrix::from_column_slice(m, n, &r),
            DMatrix::from_column_slice(p, n, &x),
            topo.observed_signals(),
        )
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    pub fn load_csv(path: &Path, topo: &Topology) -> Result<Self> {
        let f = std::fs::File::open(path)
            .map_err(|e| Error::Input(format!("cannot open {}: {e}", path.display())))?;
        Self::read_csv(f, topo)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn topo() -> Topology {
        Topology::three_node(&[Signal::u(0), Signal::u(2)]).unwrap()
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let r = DMatrix::from_fn(3, 5, |i, j| (i as f64 + 1.0) * 0.1 - j as f64 / 3.0);
        let x = DMatrix::from_fn(2, 5, |i, j| (i * j) as f64 * std::f64::consts::PI);
        let d = Dataset::new(r, x, topo().observed_signals()).unwrap();
        let mut buf = Vec::new();
        d.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("k,r1,r2,r3,xo1,xo2\n"));
        assert_eq!(Dataset::read_csv(&buf[..], &topo()).unwrap(), d);
    }

    #[test]
    fn corrupted_csv_rejected() {
        let bad = "k,r1,r2,r3,xo1,xo2\n1,0,0,0,abc,0\n";
        assert!(matches!(Dataset::read_csv(bad.as_bytes(), &topo()), Err(Error::Input(_))));
        let short = "k,r1,r2,r3,xo1\n1,0,0,0,0\n";
        assert!(Dataset::read_csv(short.as_bytes(), &topo()).is_err());
    }
}
