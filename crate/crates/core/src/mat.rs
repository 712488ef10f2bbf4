//! Row-major f64 matrices and the data-parallel kernels built on them.
//!
//! The only numeric type in the crate is `f64`; a matrix is a flat
//! `Vec<f64>` with `rows × cols` laid out row-major. The three matmul
//! flavors cover everything backprop needs:
//!
//! ```text
//! matmul(a, b)      = a · b      (n×k · k×m → n×m)   forward
//! matmul_a_bt(a, b) = a · bᵀ     (n×m · (k×m)ᵀ → n×k) input gradient
//! matmul_at_b(a, b) = aᵀ · b     ((n×k)ᵀ · n×m → k×m) weight gradient
//! ```
//!
//! Each kernel has a `*_seq` form and a dispatching form that switches to a
//! rayon row-parallel implementation (feature `parallel`, on by default)
//! once the work crosses a threshold. Parallelism is only ever over
//! *independent output rows* — every individual reduction runs sequentially
//! in a fixed order — so the parallel and sequential paths produce bitwise
//! identical results.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Minimum flop count (rows · inner · cols) before a matmul goes parallel.
pub const PAR_MIN_FLOPS: usize = 1 << 18;

/// Minimum element count before a row-wise map goes parallel.
pub const PAR_MIN_ELEMS: usize = 1 << 15;

/// Dense row-major f64 matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Build from a flat row-major buffer; `data.len()` must equal
    /// `rows * cols`.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(
            data.len(),
            rows * cols,
            "Mat::from_vec: buffer length {} != {}x{}",
            data.len(),
            rows,
            cols
        );
        Mat { rows, cols, data }
    }

    /// Build from row slices (test/fixture convenience). All rows must have
    /// equal length; an empty slice yields a 0×0 matrix.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "Mat::from_rows: ragged rows");
            data.extend_from_slice(r);
        }
        Mat {
            rows: rows.len(),
            cols,
            data,
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
    pub fn get(&self, r: usize, c: usize) -> f64 {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols.max(1))
    }

    /// New matrix whose rows are `self`'s rows at `idx`, in order.
    pub fn gather_rows(&self, idx: &[usize]) -> Mat {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            assert!(i < self.rows, "gather_rows: index {i} out of {}", self.rows);
            data.extend_from_slice(self.row(i));
        }
        Mat {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    /// Elementwise `self += other`; shapes must match.
    pub fn add_inplace(&mut self, other: &Mat) {
        assert_eq!(self.shape(), other.shape(), "add_inplace: shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Elementwise `self *= s`.
    pub fn scale_inplace(&mut self, s: f64) {
        for a in &mut self.data {
            *a *= s;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

// ---------------------------------------------------------------------------
// a · b
// ---------------------------------------------------------------------------

#[inline]
fn matmul_row(out: &mut [f64], a_row: &[f64], b: &Mat) {
    for (xi, b_row) in a_row.iter().zip(b.data.chunks_exact(b.cols)) {
        for (o, w) in out.iter_mut().zip(b_row) {
            *o += xi * w;
        }
    }
}

/// `a · b`, always sequential.
pub fn matmul_seq(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(
        a.cols, b.rows,
        "matmul: inner dims disagree ({}x{} · {}x{})",
        a.rows, a.cols, b.rows, b.cols
    );
    let mut out = Mat::zeros(a.rows, b.cols);
    if b.cols == 0 || a.rows == 0 {
        return out;
    }
    for (o_row, a_row) in out
        .data
        .chunks_exact_mut(b.cols)
        .zip(a.data.chunks_exact(a.cols.max(1)))
    {
        matmul_row(o_row, a_row, b);
    }
    out
}

/// `a · b`; goes row-parallel above [`PAR_MIN_FLOPS`] when the `parallel`
/// feature is on. Bitwise identical to [`matmul_seq`].
pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    #[cfg(feature = "parallel")]
    if a.rows * a.cols * b.cols >= PAR_MIN_FLOPS && a.rows > 1 {
        assert_eq!(
            a.cols, b.rows,
            "matmul: inner dims disagree ({}x{} · {}x{})",
            a.rows, a.cols, b.rows, b.cols
        );
        let mut out = Mat::zeros(a.rows, b.cols);
        out.data
            .par_chunks_exact_mut(b.cols)
            .zip(a.data.par_chunks_exact(a.cols))
            .for_each(|(o_row, a_row)| matmul_row(o_row, a_row, b));
        return out;
    }
    matmul_seq(a, b)
}

// ---------------------------------------------------------------------------
// a · bᵀ
// ---------------------------------------------------------------------------

#[inline]
fn matmul_a_bt_row(out: &mut [f64], a_row: &[f64], b: &Mat) {
    for (o, b_row) in out.iter_mut().zip(b.data.chunks_exact(b.cols.max(1))) {
        *o = dot(a_row, b_row);
    }
}

/// `a · bᵀ` (`a` is n×m, `b` is k×m), always sequential.
pub fn matmul_a_bt_seq(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(
        a.cols, b.cols,
        "matmul_a_bt: column dims disagree ({}x{} · ({}x{})ᵀ)",
        a.rows, a.cols, b.rows, b.cols
    );
    let mut out = Mat::zeros(a.rows, b.rows);
    if b.rows == 0 || a.rows == 0 {
        return out;
    }
    for (o_row, a_row) in out
        .data
        .chunks_exact_mut(b.rows)
        .zip(a.data.chunks_exact(a.cols.max(1)))
    {
        matmul_a_bt_row(o_row, a_row, b);
    }
    out
}

/// `a · bᵀ`; parallel over output rows above the work threshold. Bitwise
/// identical to [`matmul_a_bt_seq`].
pub fn matmul_a_bt(a: &Mat, b: &Mat) -> Mat {
    #[cfg(feature = "parallel")]
    if a.rows * a.cols * b.rows >= PAR_MIN_FLOPS && a.rows > 1 {
        assert_eq!(
            a.cols, b.cols,
            "matmul_a_bt: column dims disagree ({}x{} · ({}x{})ᵀ)",
            a.rows, a.cols, b.rows, b.cols
        );
        let mut out = Mat::zeros(a.rows, b.rows);
        out.data
            .par_chunks_exact_mut(b.rows)
            .zip(a.data.par_chunks_exact(a.cols))
            .for_each(|(o_row, a_row)| matmul_a_bt_row(o_row, a_row, b));
        return out;
    }
    matmul_a_bt_seq(a, b)
}

// ---------------------------------------------------------------------------
// aᵀ · b
// ---------------------------------------------------------------------------

#[inline]
fn matmul_at_b_row(i: usize, out: &mut [f64], a: &Mat, b: &Mat) {
    for n in 0..a.rows {
        let ani = a.data[n * a.cols + i];
        let b_row = &b.data[n * b.cols..(n + 1) * b.cols];
        for (o, v) in out.iter_mut().zip(b_row) {
            *o += ani * v;
        }
    }
}

/// `aᵀ · b` (`a` is n×k, `b` is n×m → k×m), always sequential. The batch
/// reduction over n runs in index order.
pub fn matmul_at_b_seq(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(
        a.rows, b.rows,
        "matmul_at_b: row dims disagree (({}x{})ᵀ · {}x{})",
        a.rows, a.cols, b.rows, b.cols
    );
    let mut out = Mat::zeros(a.cols, b.cols);
    if b.cols == 0 {
        return out;
    }
    for (i, o_row) in out.data.chunks_exact_mut(b.cols).enumerate() {
        matmul_at_b_row(i, o_row, a, b);
    }
    out
}

/// `aᵀ · b`; parallel over the k output rows above the work threshold (each
/// row still reduces over the batch in index order). Bitwise identical to
/// [`matmul_at_b_seq`].
pub fn matmul_at_b(a: &Mat, b: &Mat) -> Mat {
    #[cfg(feature = "parallel")]
    if a.rows * a.cols * b.cols >= PAR_MIN_FLOPS && a.cols > 1 {
        assert_eq!(
            a.rows, b.rows,
            "matmul_at_b: row dims disagree (({}x{})ᵀ · {}x{})",
            a.rows, a.cols, b.rows, b.cols
        );
        let mut out = Mat::zeros(a.cols, b.cols);
        out.data
            .par_chunks_exact_mut(b.cols)
            .enumerate()
            .for_each(|(i, o_row)| matmul_at_b_row(i, o_row, a, b));
        return out;
    }
    matmul_at_b_seq(a, b)
}

// ---------------------------------------------------------------------------
// Row-wise map
// ---------------------------------------------------------------------------

/// Apply `f` to every row, always sequentially.
pub fn for_each_row_mut_seq<F>(m: &mut Mat, f: F)
where
    F: Fn(&mut [f64]) + Sync,
{
    if m.rows == 0 || m.cols == 0 {
        return;
    }
    for row in m.data.chunks_exact_mut(m.cols) {
        f(row);
    }
}

/// Apply `f` to every row independently; parallel above [`PAR_MIN_ELEMS`]
/// elements. Rows are independent, so this is bitwise identical to the
/// sequential form.
pub fn for_each_row_mut<F>(m: &mut Mat, f: F)
where
    F: Fn(&mut [f64]) + Sync,
{
    #[cfg(feature = "parallel")]
    if m.data.len() >= PAR_MIN_ELEMS && m.rows > 1 {
        let cols = m.cols;
        m.data.par_chunks_exact_mut(cols).for_each(&f);
        return;
    }
    for_each_row_mut_seq(m, f);
}
