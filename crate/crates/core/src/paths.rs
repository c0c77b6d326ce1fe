//! Dense storage for ensembles of grid-indexed, vector-valued paths.

use std::io::Write;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::timegrid::TimeGrid;

/// `n_paths × n_nodes × dim` values, path-major.
#[derive(Clone, Debug, PartialEq)]
pub struct PathSet<T> {
    n_paths: usize,
    n_nodes: usize,
    dim: usize,
    data: Vec<T>,
}

impl<T: Scalar> PathSet<T> {
    pub fn zeros(n_paths: usize, n_nodes: usize, dim: usize) -> Self {
        Self {
            n_paths,
            n_nodes,
            dim,
            data: vec![T::zero(); n_paths * n_nodes * dim],
        }
    }

    pub fn from_vec(n_paths: usize, n_nodes: usize, dim: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != n_paths * n_nodes * dim {
            return Err(Error::Consistency(format!(
                "path data has {} values, expected {}x{}x{}",
                data.len(),
                n_paths,
                n_nodes,
                dim
            )));
        }
        Ok(Self {
            n_paths,
            n_nodes,
            dim,
            data,
        })
    }

    /// Same deterministic path repeated for every member of the ensemble.
    pub fn deterministic(n_paths: usize, grid: &TimeGrid<T>, dim: usize, f: impl Fn(T) -> Vec<T>) -> Self {
        let mut out = Self::zeros(n_paths, grid.n_nodes(), dim);
        for k in 0..grid.n_nodes() {
            let v = f(grid.node(k));
            for p in 0..n_paths {
                out.at_mut(p, k).copy_from_slice(&v[..dim]);
            }
        }
        out
    }

    /// Fills every path in parallel; `fill(p, path)` receives the `n_nodes × dim` slice.
    pub fn par_fill<F>(&mut self, fill: F)
    where
        F: Fn(usize, &mut [T]) + Sync + Send,
    {
        let stride = self.n_nodes * self.dim;
        if stride == 0 {
            return;
        }
        self.data
            .par_chunks_mut(stride)
            .enumerate()
            .for_each(|(p, chunk)| fill(p, chunk));
    }

    /// Fallible variant of [`PathSet::par_fill`]; reports the lowest-index failing path.
    pub fn try_par_fill<F>(&mut self, fill: F) -> Result<()>
    where
        F: Fn(usize, &mut [T]) -> Result<()> + Sync + Send,
    {
        let stride = self.n_nodes * self.dim;
        if stride == 0 {
            return Ok(());
        }
        let outcomes: Vec<Result<()>> = self
            .data
            .par_chunks_mut(stride)
            .enumerate()
            .map(|(p, chunk)| fill(p, chunk))
            .collect();
        outcomes.into_iter().collect()
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    #[inline]
    pub fn at(&self, p: usize, k: usize) -> &[T] {
        let start = (p * self.n_nodes + k) * self.dim;
        &self.data[start..start + self.dim]
    }

    #[inline]
    pub fn at_mut(&mut self, p: usize, k: usize) -> &mut [T] {
        let start = (p * self.n_nodes + k) * self.dim;
        &mut self.data[start..start + self.dim]
    }

    #[inline]
    pub fn get(&self, p: usize, k: usize, c: usize) -> T {
        self.data[(p * self.n_nodes + k) * self.dim + c]
    }

    pub fn path(&self, p: usize) -> &[T] {
        let stride = self.n_nodes * self.dim;
        &self.data[p * stride..(p + 1) * stride]
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.n_paths == other.n_paths && self.n_nodes == other.n_nodes && self.dim == other.dim
    }

    pub fn scaled(&self, c: T) -> Self {
        let mut out = self.clone();
        out.data.iter_mut().for_each(|v| *v *= c);
        out
    }

    /// `self − other`, entrywise.
    pub fn difference(&self, other: &Self) -> Result<Self> {
        if !self.same_shape(other) {
            return Err(Error::Consistency("path sets differ in shape".into()));
        }
        let mut out = self.clone();
        out.data
            .iter_mut()
            .zip(&other.data)
            .for_each(|(a, b)| *a -= *b);
        Ok(out)
    }

    /// `self + c·other`, entrywise.
    pub fn axpy(&mut self, c: T, other: &Self) -> Result<()> {
        if !self.same_shape(other) {
            return Err(Error::Consistency("path sets differ in shape".into()));
        }
        self.data
            .iter_mut()
            .zip(&other.data)
            .for_each(|(a, b)| *a += c * *b);
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> T {
        self.data
            .iter()
            .fold(T::zero(), |m, v| m.max(v.abs()))
    }

    /// Ensemble mean of component `c` at node `k`.
    pub fn mean_at(&self, k: usize, c: usize) -> T {
        let mut s = T::zero();
        for p in 0..self.n_paths {
            s += self.get(p, k, c);
        }
        s / T::from_count(self.n_paths.max(1))
    }

    /// Writes `time,path_id,<columns...>` rows; `time_of(k)` maps the node index to a time.
    pub fn write_csv<W: Write>(
        &self,
        mut w: W,
        columns: &[String],
        time_of: impl Fn(usize) -> T,
    ) -> Result<()> {
        if columns.len() != self.dim {
            return Err(Error::Consistency(format!(
                "{} column names for dimension {}",
                columns.len(),
                self.dim
            )));
        }
        write!(w, "time,path_id")?;
        for c in columns {
            write!(w, ",{c}")?;
        }
        writeln!(w)?;
        for p in 0..self.n_paths {
            for k in 0..self.n_nodes {
                write!(w, "{},{}", time_of(k).as_f64(), p)?;
                for v in self.at(p, k) {
                    write!(w, ",{}", v.as_f64())?;
                }
                writeln!(w)?;
            }
        }
        Ok(())
    }
}
