//! CSR matrices and the 27-point stencil generator.
//!
//! Text format (whitespace separated, `#` starts a comment line):
//!
//! ```text
//! # tadf csr
//! <n> <nnz>
//! <row> <col> <value>      one line per nonzero, rows ascending
//! ```
//!
//! Values are written with Rust's shortest round-trip formatting, so
//! dump followed by load reproduces the matrix bit for bit.

use std::fmt::Write as _;
use std::ops::Range;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    pub fn new(n: usize, row_ptr: Vec<usize>, col_idx: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if row_ptr.len() != n + 1 || row_ptr[0] != 0 {
            return Err(Error::invalid("row_ptr must have n+1 entries starting at 0"));
        }
        if row_ptr.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::invalid("row_ptr must be non-decreasing"));
        }
        if row_ptr[n] != col_idx.len() || col_idx.len() != values.len() {
            return Err(Error::invalid("row_ptr[n] must equal nnz"));
        }
        if let Some(c) = col_idx.iter().find(|&&c| c >= n) {
            return Err(Error::invalid(format!("column {c} out of range for n={n}")));
        }
        Ok(CsrMatrix {
            n,
            row_ptr,
            col_idx,
            values,
        })
    }

    pub fn identity(n: usize) -> Self {
        CsrMatrix {
            n,
            row_ptr: (0..=n).collect(),
            col_idx: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    pub fn from_dense(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let mut row_ptr = vec![0];
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        for row in rows {
            if row.len() != n {
                return Err(Error::invalid("dense matrix must be square"));
            }
            for (j, &v) in row.iter().enumerate() {
                if v != 0.0 {
                    col_idx.push(j);
                    values.push(v);
                }
            }
            row_ptr.push(col_idx.len());
        }
        CsrMatrix::new(n, row_ptr, col_idx, values)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row_ptr(&self) -> &[usize] {
        &self.row_ptr
    }

    pub fn col_idx(&self) -> &[usize] {
        &self.col_idx
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Nonzeros of `rows`.
    pub fn nnz_in(&self, rows: Range<usize>) -> usize {
        self.row_ptr[rows.end] - self.row_ptr[rows.start]
    }

    /// Smallest column range touched by `rows`.
    pub fn column_span(&self, rows: Range<usize>) -> Range<usize> {
        let cols = &self.col_idx[self.row_ptr[rows.start]..self.row_ptr[rows.end]];
        match (cols.iter().min(), cols.iter().max()) {
            (Some(&lo), Some(&hi)) => lo..hi + 1,
            _ => rows.start..rows.start,
        }
    }

    pub fn row_sum(&self, i: usize) -> f64 {
        self.values[self.row_ptr[i]..self.row_ptr[i + 1]].iter().sum()
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut d = vec![vec![0.0; self.n]; self.n];
        for (i, row) in d.iter_mut().enumerate() {
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                row[self.col_idx[k]] += self.values[k];
            }
        }
        d
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("# tadf csr\n{} {}\n", self.n, self.nnz());
        for i in 0..self.n {
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                let _ = writeln!(out, "{} {} {:?}", i, self.col_idx[k], self.values[k]);
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'));
        let bad = |line: usize, msg: &str| Error::invalid(format!("csr line {}: {msg}", line + 1));
        let (hl, header) = lines.next().ok_or_else(|| Error::invalid("csr text is empty"))?;
        let mut h = header.split_whitespace().map(str::parse::<usize>);
        let (Some(Ok(n)), Some(Ok(nnz)), None) = (h.next(), h.next(), h.next()) else {
            return Err(bad(hl, "expected `<n> <nnz>`"));
        };
        let mut row_ptr = vec![0usize; n + 1];
        let mut col_idx = Vec::with_capacity(nnz);
        let mut values = Vec::with_capacity(nnz);
        let mut last_row = 0;
        for (ln, line) in lines {
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 3 {
                return Err(bad(ln, "expected `<row> <col> <value>`"));
            }
            let row: usize = f[0].parse().map_err(|_| bad(ln, "bad row"))?;
            let col: usize = f[1].parse().map_err(|_| bad(ln, "bad column"))?;
            let v: f64 = f[2].parse().map_err(|_| bad(ln, "bad value"))?;
            if row >= n || row < last_row {
                return Err(bad(ln, "rows must be ascending and below n"));
            }
            last_row = row;
            row_ptr[row + 1] += 1;
            col_idx.push(col);
            values.push(v);
        }
        if values.len() != nnz {
            return Err(Error::invalid(format!("csr header says {nnz} nonzeros, found {}", values.len())));
        }
        for i in 0..n {
            row_ptr[i + 1] += row_ptr[i];
        }
        CsrMatrix::new(n, row_ptr, col_idx, values)
    }
}

/// 27-point stencil on an `nx * ny * nz` grid: 27.0 on the diagonal and
/// -1.0 for each neighbor, rows ordered x fastest.
pub fn gen_stencil_matrix(nx: usize, ny: usize, nz: usize) -> Result<CsrMatrix> {
    if nx == 0 || ny == 0 || nz == 0 {
        return Err(Error::invalid("stencil dimensions must be at least 1"));
    }
    let n = nx
        .checked_mul(ny)
        .and_then(|v| v.checked_mul(nz))
        .filter(|n| n.checked_mul(27).is_some())
        .ok_or_else(|| Error::Overflow(format!("{nx}x{ny}x{nz} grid")))?;
    let mut row_ptr = Vec::with_capacity(n + 1);
    let mut col_idx = Vec::with_capacity(n * 27);
    let mut values = Vec::with_capacity(n * 27);
    row_ptr.push(0);
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let row = x + nx * (y + ny * z);
                for dz in -1i64..=1 {
                    for dy in -1i64..=1 {
                        for dx in -1i64..=1 {
                            let (cx, cy, cz) = (x as i64 + dx, y as i64 + dy, z as i64 + dz);
                            if cx < 0 || cy < 0 || cz < 0 || cx >= nx as i64 || cy >= ny as i64 || cz >= nz as i64 {
                                continue;
                            }
                            let col = cx as usize + nx * (cy as usize + ny * cz as usize);
                            col_idx.push(col);
                            values.push(if col == row { 27.0 } else { -1.0 });
                        }
                    }
                }
                row_ptr.push(col_idx.len());
            }
        }
    }
    CsrMatrix::new(n, row_ptr, col_idx, values)
}
