use std::collections::BTreeMap;

use super::{add_assign, axpy, dot, Param};
use crate::error::{input_err, Result};

/// Dense input rows that tree nodes refer to by index: prototype centroids
/// in the default setup, raw user features otherwise.
#[derive(Debug, Clone, PartialEq)]
pub struct InputTable {
    dim: usize,
    data: Vec<f64>,
}

impl InputTable {
    pub fn new(dim: usize, rows: &[Vec<f64>]) -> Result<Self> {
        let mut data = Vec::with_capacity(dim * rows.len());
        for (i, r) in rows.iter().enumerate() {
            if r.len() != dim {
                return input_err(format!("input row {i} has dimension {}, expected {dim}", r.len()));
            }
            data.extend_from_slice(r);
        }
        Ok(Self { dim, data })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.data.len() / self.dim
        }
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim.max(1))
    }

    /// Applies `f` to every row in place (used for feature masking).
    pub fn map_rows(&mut self, mut f: impl FnMut(&mut [f64])) {
        for r in self.data.chunks_exact_mut(self.dim.max(1)) {
            f(r);
        }
    }
}

/// Precomputed `W[:, offset..offset+dim] · x` for the table rows a batch
/// touches. Every node mapped to the same row shares one projection, and the
/// matching weight gradient is formed once per row from the summed upstream
/// gradients ([`RowGrads`]).
#[derive(Debug, Clone)]
pub struct RowProjection {
    out: usize,
    proj: Vec<Option<Vec<f64>>>,
}

impl RowProjection {
    pub fn new(
        w: &Param,
        col_offset: usize,
        table: &InputTable,
        rows: impl IntoIterator<Item = usize>,
    ) -> Result<Self> {
        if col_offset + table.dim() != w.cols {
            return input_err(format!(
                "projection: weight {} has {} columns, input needs {} (+{} offset)",
                w.name,
                w.cols,
                table.dim(),
                col_offset
            ));
        }
        let mut proj = vec![None; table.len()];
        for r in rows {
            if r >= table.len() {
                return input_err(format!("input row {r} out of range ({} rows)", table.len()));
            }
            if proj[r].is_some() {
                continue;
            }
            let x = table.row(r);
            let v: Vec<f64> = (0..w.rows)
                .map(|o| {
                    let start = o * w.cols + col_offset;
                    dot(&w.value[start..start + x.len()], x)
                })
                .collect();
            proj[r] = Some(v);
        }
        Ok(Self { out: w.rows, proj })
    }

    /// Projects every row of the table.
    pub fn all(w: &Param, col_offset: usize, table: &InputTable) -> Result<Self> {
        Self::new(w, col_offset, table, 0..table.len())
    }

    pub fn out_dim(&self) -> usize {
        self.out
    }

    pub fn get(&self, row: usize) -> Result<&[f64]> {
        match self.proj.get(row) {
            Some(Some(v)) => Ok(v),
            _ => input_err(format!("input row {row} was not projected")),
        }
    }
}

/// Per-row sums of upstream gradients for a [`RowProjection`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RowGrads {
    acc: BTreeMap<usize, Vec<f64>>,
}

impl RowGrads {
    pub fn add(&mut self, row: usize, dz: &[f64]) {
        match self.acc.get_mut(&row) {
            Some(v) => add_assign(v, dz),
            None => {
                self.acc.insert(row, dz.to_vec());
            }
        }
    }

    pub fn merge(&mut self, other: &RowGrads, scale: f64) {
        for (&row, dz) in &other.acc {
            let v = self.acc.entry(row).or_insert_with(|| vec![0.0; dz.len()]);
            axpy(scale, dz, v);
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.acc.values_mut().flatten().for_each(|v| *v *= s);
    }

    pub fn is_empty(&self) -> bool {
        self.acc.is_empty()
    }

    /// `grad[:, offset..offset+dim] += scale · Σ_rows dz_row ⊗ x_row`.
    pub fn apply(&self, w: &mut Param, col_offset: usize, table: &InputTable, scale: f64) {
        w.ensure_buffers();
        for (&row, dz) in &self.acc {
            let x = table.row(row);
            for (o, &g) in dz.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                let start = o * w.cols + col_offset;
                axpy(scale * g, x, &mut w.grad[start..start + x.len()]);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn projection_matches_direct_product() {
        let table = InputTable::new(2, &[vec![1.0, 2.0], vec![-1.0, 0.5]]).unwrap();
        // 2 x (1 + 2): first column is an unrelated block.
        let w = Param::from_values("w", 2, 3, vec![9.0, 1.0, 1.0, 9.0, 2.0, -1.0]);
        let p = RowProjection::all(&w, 1, &table).unwrap();
        assert_eq!(p.get(0).unwrap(), &[3.0, 0.0]);
        assert_eq!(p.get(1).unwrap(), &[-0.5, -2.5]);

        let mut g = RowGrads::default();
        g.add(1, &[1.0, 0.0]);
        g.add(1, &[1.0, 2.0]);
        let mut w = w;
        g.apply(&mut w, 1, &table, 0.5);
        assert_eq!(w.grad, vec![0.0, -1.0, 0.5, 0.0, -1.0, 0.5]);
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(InputTable::new(2, &[vec![1.0]]).is_err());
        let table = InputTable::new(2, &[vec![1.0, 2.0]]).unwrap();
        let w = Param::zeros("w", 2, 3);
        assert!(RowProjection::all(&w, 0, &table).is_err());
        assert!(RowProjection::new(&w, 1, &table, [3]).is_err());
    }
}
