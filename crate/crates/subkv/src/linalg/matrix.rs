use crate::error::{Error, Result};

/// Dense row-major matrix of 64-bit reals.
///
/// The universal carrier for keys, values, queries, weights, and projection
/// bases. All public constructors and operations keep two invariants:
/// `data.len() == rows * cols`, and every entry finite on success.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dimension(
                "from_vec",
                format!("{} entries for a {rows}x{cols} matrix", data.len()),
            ));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(Error::dimension("from_rows", "ragged rows"));
            }
            data.extend_from_slice(row);
        }
        Matrix::from_vec(r, c, data)
    }

    /// 1-by-n row vector.
    pub fn row_vector(entries: &[f64]) -> Self {
        Matrix {
            rows: 1,
            cols: entries.len(),
            data: entries.to_vec(),
        }
    }

    /// 1-by-1 matrix holding a single scalar.
    pub fn scalar(value: f64) -> Self {
        Matrix {
            rows: 1,
            cols: 1,
            data: vec![value],
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        debug_assert!(row < self.rows && col < self.cols);
        self.data[row * self.cols + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        debug_assert!(row < self.rows && col < self.cols);
        self.data[row * self.cols + col] = value;
    }

    #[inline]
    pub fn row(&self, row: usize) -> &[f64] {
        &self.data[row * self.cols..(row + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, row: usize) -> &mut [f64] {
        &mut self.data[row * self.cols..(row + 1) * self.cols]
    }

    /// Value of the single entry of a 1x1 matrix.
    pub fn scalar_value(&self) -> Result<f64> {
        if self.rows != 1 || self.cols != 1 {
            return Err(Error::contract(
                "scalar_value",
                format!("expected 1x1, got {}x{}", self.rows, self.cols),
            ));
        }
        Ok(self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Standard product. Summation over the inner index runs in ascending
    /// order so results are bit-identical to the sequential triple loop.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::dimension(
                "matmul",
                format!(
                    "{}x{} times {}x{}",
                    self.rows, self.cols, other.rows, other.cols
                ),
            ));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        let n = other.cols;
        for i in 0..self.rows {
            let a_row = &self.data[i * self.cols..(i + 1) * self.cols];
            let out_row = &mut out.data[i * n..(i + 1) * n];
            for (k, &a_ik) in a_row.iter().enumerate() {
                let b_row = &other.data[k * n..(k + 1) * n];
                for j in 0..n {
                    out_row[j] += a_ik * b_row[j];
                }
            }
        }
        Ok(out)
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with("add", other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with("sub", other, |a, b| a - b)
    }

    /// Entrywise product.
    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with("hadamard", other, |a, b| a * b)
    }

    fn zip_with(
        &self,
        op: &'static str,
        other: &Matrix,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(Error::dimension(
                op,
                format!(
                    "{}x{} vs {}x{}",
                    self.rows, self.cols, other.rows, other.cols
                ),
            ));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn scale(&self, factor: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| v * factor).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// sqrt of the sum of squared entries, accumulated in index order.
    pub fn frobenius_norm(&self) -> f64 {
        let mut sum = 0.0;
        for &v in &self.data {
            sum += v * v;
        }
        sum.sqrt()
    }

    /// Columns `[start, start + len)` as a new matrix.
    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Matrix> {
        if start + len > self.cols || len == 0 {
            return Err(Error::dimension(
                "slice_cols",
                format!("cols [{start}, {}) of {}", start + len, self.cols),
            ));
        }
        let mut out = Matrix::zeros(self.rows, len);
        for i in 0..self.rows {
            let src = &self.data[i * self.cols + start..i * self.cols + start + len];
            out.data[i * len..(i + 1) * len].copy_from_slice(src);
        }
        Ok(out)
    }

    pub fn concat_rows(blocks: &[&Matrix]) -> Result<Matrix> {
        let cols = blocks
            .first()
            .ok_or_else(|| Error::dimension("concat_rows", "no blocks"))?
            .cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for b in blocks {
            if b.cols != cols {
                return Err(Error::dimension("concat_rows", "column count mismatch"));
            }
            data.extend_from_slice(&b.data);
            rows += b.rows;
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn concat_cols(blocks: &[&Matrix]) -> Result<Matrix> {
        let rows = blocks
            .first()
            .ok_or_else(|| Error::dimension("concat_cols", "no blocks"))?
            .rows;
        let cols: usize = blocks.iter().map(|b| b.cols).sum();
        let mut out = Matrix::zeros(rows, cols);
        for i in 0..rows {
            let mut offset = 0;
            for b in blocks {
                if b.rows != rows {
                    return Err(Error::dimension("concat_cols", "row count mismatch"));
                }
                out.data[i * cols + offset..i * cols + offset + b.cols]
                    .copy_from_slice(b.row(i));
                offset += b.cols;
            }
        }
        Ok(out)
    }

    pub fn reshape(&self, rows: usize, cols: usize) -> Result<Matrix> {
        if rows * cols != self.data.len() {
            return Err(Error::dimension(
                "reshape",
                format!("{}x{} from {} entries", rows, cols, self.data.len()),
            ));
        }
        Ok(Matrix {
            rows,
            cols,
            data: self.data.clone(),
        })
    }

    /// Gram matrix `self^T * self`, accumulated row by row so that appending
    /// all-zero rows leaves every entry bit-identical.
    pub fn gram(&self) -> Matrix {
        let d = self.cols;
        let mut out = Matrix::zeros(d, d);
        for i in 0..self.rows {
            let row = self.row(i);
            for a in 0..d {
                let ra = row[a];
                for b in 0..d {
                    out.data[a * d + b] += ra * row[b];
                }
            }
        }
        out
    }

    /// Debug text dump: first line "rows cols", then one row per line with
    /// entries as shortest round-trip decimals.
    pub fn to_text(&self) -> String {
        let mut s = format!("{} {}\n", self.rows, self.cols);
        for i in 0..self.rows {
            let row: Vec<String> = self.row(i).iter().map(|v| format!("{v}")).collect();
            s.push_str(&row.join(" "));
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Matrix> {
        let bad = |d: &str| Error::Format {
            path: "<text>".into(),
            offset: 0,
            detail: d.to_string(),
        };
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad("empty dump"))?;
        let mut parts = header.split_whitespace();
        let rows: usize = parts
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| bad("bad row count"))?;
        let cols: usize = parts
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| bad("bad col count"))?;
        let mut data = Vec::with_capacity(rows * cols);
        for line in lines.take(rows) {
            for tok in line.split_whitespace() {
                data.push(tok.parse::<f64>().map_err(|_| bad("bad entry"))?);
            }
        }
        Matrix::from_vec(rows, cols, data)
    }
}

/// `||reference - approx||_F / ||reference||_F`.
pub fn relative_error(reference: &Matrix, approx: &Matrix) -> Result<f64> {
    if reference.shape() != approx.shape() {
        return Err(Error::dimension(
            "relative_error",
            format!("{:?} vs {:?}", reference.shape(), approx.shape()),
        ));
    }
    let denom = reference.frobenius_norm();
    if denom == 0.0 {
        return Err(Error::degenerate(
            "relative_error",
            "zero-norm reference matrix",
        ));
    }
    Ok(reference.sub(approx)?.frobenius_norm() / denom)
}

/// First `r` columns of `p`.
pub fn truncate_columns(p: &Matrix, r: usize) -> Result<Matrix> {
    if r == 0 || r > p.cols() {
        return Err(Error::dimension(
            "truncate_columns",
            format!("rank {r} of a matrix with {} columns", p.cols()),
        ));
    }
    p.slice_cols(0, r)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let i = Matrix::identity(2);
        assert_eq!(i.matmul(&a).unwrap(), a);
    }

    #[test]
    fn matmul_hand_case() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.data(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(2, 3);
        assert!(matches!(a.matmul(&b), Err(Error::Dimension { .. })));
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = crate::linalg::RngState::new(42);
        let a = crate::linalg::random_gaussian(5, 3, &mut rng);
        let b = crate::linalg::random_gaussian(3, 4, &mut rng);
        let c = a.matmul(&b).unwrap();
        // Brute-force oracle: plain i-j-k triple loop.
        for i in 0..5 {
            for j in 0..4 {
                let mut acc = 0.0;
                for k in 0..3 {
                    acc += a.get(i, k) * b.get(k, j);
                }
                assert!((c.get(i, j) - acc).abs() <= 1e-12 * acc.abs().max(1.0));
            }
        }
    }

    #[test]
    fn frobenius_cases() {
        assert_eq!(Matrix::zeros(3, 2).frobenius_norm(), 0.0);
        assert!((Matrix::identity(3).frobenius_norm() - 3f64.sqrt()).abs() < 1e-15);
        let m = Matrix::row_vector(&[3.0, 4.0]);
        assert_eq!(m.frobenius_norm(), 5.0);
    }

    #[test]
    fn relative_error_cases() {
        let a = Matrix::from_rows(&[vec![1.0, -2.0], vec![0.5, 3.0]]).unwrap();
        assert_eq!(relative_error(&a, &a).unwrap(), 0.0);
        let zero = Matrix::zeros(2, 2);
        assert!((relative_error(&a, &zero).unwrap() - 1.0).abs() < 1e-15);
        let i = Matrix::identity(2);
        let twice = i.scale(2.0);
        assert!((relative_error(&i, &twice).unwrap() - 1.0).abs() < 1e-15);
        assert!(matches!(
            relative_error(&zero, &a),
            Err(Error::DegenerateInput { .. })
        ));
    }

    #[test]
    fn truncate_columns_cases() {
        let i4 = Matrix::identity(4);
        let t = truncate_columns(&i4, 2).unwrap();
        assert_eq!(t.shape(), (4, 2));
        assert_eq!(t.get(0, 0), 1.0);
        assert_eq!(t.get(1, 1), 1.0);
        assert_eq!(t.get(2, 0), 0.0);
        assert_eq!(truncate_columns(&i4, 4).unwrap(), i4);
        assert!(truncate_columns(&i4, 5).is_err());
        assert!(truncate_columns(&i4, 0).is_err());
    }

    #[test]
    fn text_dump_round_trip() {
        let m = Matrix::from_rows(&[vec![1.5, -0.25, 1.0 / 3.0], vec![0.0, 1e-17, 2e300]])
            .unwrap();
        let text = m.to_text();
        assert!(text.starts_with("2 3\n"));
        let back = Matrix::from_text(&text).unwrap();
        assert_eq!(m, back);
    }

    #[test]
    fn concat_and_slice() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![3.0, 4.0]]).unwrap();
        let stacked = Matrix::concat_rows(&[&a, &b]).unwrap();
        assert_eq!(stacked.shape(), (2, 2));
        let side = Matrix::concat_cols(&[&a, &b]).unwrap();
        assert_eq!(side.shape(), (1, 4));
        assert_eq!(side.data(), &[1.0, 2.0, 3.0, 4.0]);
        let back = side.slice_cols(2, 2).unwrap();
        assert_eq!(back, b);
    }
}
