use std::collections::BTreeMap;
use std::io::Write;

use crate::error::{Error, Result};
use crate::nnet::Matrix;

impl Matrix {
    /// Rows at `indices`, in that order.
    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols());
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix::from_vec(indices.len(), self.cols(), data).expect("row selection keeps the shape")
    }

    /// Stacks `a` over `b`. An empty side adopts the other's width.
    pub fn vstack(a: &Matrix, b: &Matrix) -> Result<Matrix> {
        if a.rows() == 0 {
            return Ok(b.clone());
        }
        if b.rows() == 0 {
            return Ok(a.clone());
        }
        if a.cols() != b.cols() {
            return Err(Error::invalid(format!("cannot stack width {} over width {}", a.cols(), b.cols())));
        }
        let mut data = a.as_slice().to_vec();
        data.extend_from_slice(b.as_slice());
        Matrix::from_vec(a.rows() + b.rows(), a.cols(), data)
    }
}

/// Inputs with global class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
}

impl LabeledSet {
    pub fn new(inputs: Matrix, labels: Vec<usize>) -> Result<Self> {
        if inputs.rows() != labels.len() {
            return Err(Error::invalid(format!("{} inputs but {} labels", inputs.rows(), labels.len())));
        }
        Ok(Self { inputs, labels })
    }

    pub fn empty(dim: usize) -> Self {
        Self { inputs: Matrix::zeros(0, dim), labels: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn select(&self, indices: &[usize]) -> LabeledSet {
        LabeledSet {
            inputs: self.inputs.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    pub fn concat(&self, other: &LabeledSet) -> Result<LabeledSet> {
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        LabeledSet::new(Matrix::vstack(&self.inputs, &other.inputs)?, labels)
    }

    pub fn class_counts(&self) -> BTreeMap<usize, usize> {
        let mut counts = BTreeMap::new();
        for &y in &self.labels {
            *counts.entry(y).or_insert(0) += 1;
        }
        counts
    }

    /// Indices of each class, in set order.
    pub fn indices_by_class(&self) -> BTreeMap<usize, Vec<usize>> {
        let mut out: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &y) in self.labels.iter().enumerate() {
            out.entry(y).or_default().push(i);
        }
        out
    }

    /// CSV with columns `x0..x{d-1},label`, floats in shortest round-trip form.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header: Vec<String> = (0..self.dim()).map(|j| format!("x{j}")).collect();
        header.push("label".into());
        out.write_record(&header)?;
        for (row, y) in self.inputs.iter_rows().zip(&self.labels) {
            let mut rec: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            rec.push(y.to_string());
            out.write_record(&rec)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(r: R) -> Result<Self> {
        let mut reader = csv::Reader::from_reader(r);
        let dim = reader.headers()?.len().saturating_sub(1);
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for rec in reader.records() {
            let rec = rec?;
            for j in 0..dim {
                data.push(parse_f64(&rec[j])?);
            }
            labels.push(rec[dim].parse().map_err(|_| Error::invalid(format!("bad label `{}`", &rec[dim])))?);
        }
        LabeledSet::new(Matrix::from_vec(labels.len(), dim, data)?, labels)
    }
}

pub(crate) fn parse_f64(s: &str) -> Result<f64> {
    s.trim().parse().map_err(|_| Error::invalid(format!("bad number `{s}`")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip_is_exact() {
        let set = LabeledSet::new(Matrix::from_rows(&[[0.1, -2.5e-7], [1.0 / 3.0, 4.0]]).unwrap(), vec![3, 0]).unwrap();
        let mut buf = Vec::new();
        set.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8(buf.clone()).unwrap().starts_with("x0,x1,label\n"));
        assert_eq!(LabeledSet::read_csv(&buf[..]).unwrap(), set);
    }

    #[test]
    fn vstack_with_empty() {
        let a = Matrix::zeros(0, 0);
        let b = Matrix::from_rows(&[[1.0, 2.0]]).unwrap();
        assert_eq!(Matrix::vstack(&a, &b).unwrap(), b);
        assert!(Matrix::vstack(&b, &Matrix::from_rows(&[[1.0]]).unwrap()).is_err());
    }
}
