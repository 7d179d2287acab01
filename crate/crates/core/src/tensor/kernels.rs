//! Inner loops for the heavy operators. All buffers are row-major slices.

use alloc::borrow::Cow;
use alloc::vec;
use alloc::vec::Vec;

/// Dot product with four independent accumulators. Summation order is fixed,
/// so results are reproducible across runs.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvDims {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub len_in: usize,
    pub kernel: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvDims {
    pub fn padded_len(&self) -> usize {
        self.len_in + 2 * self.padding
    }

    pub fn len_out(&self) -> usize {
        self.padded_len() + 1 - self.kernel
    }

    fn cin_per_group(&self) -> usize {
        self.c_in / self.groups
    }

    fn cout_per_group(&self) -> usize {
        self.c_out / self.groups
    }
}

fn pad_input<'a>(d: &ConvDims, input: &'a [f64]) -> Cow<'a, [f64]> {
    if d.padding == 0 {
        return Cow::Borrowed(input);
    }
    let lp = d.padded_len();
    let mut out = vec![0.0; d.batch * d.c_in * lp];
    for row in 0..d.batch * d.c_in {
        out[row * lp + d.padding..row * lp + d.padding + d.len_in]
            .copy_from_slice(&input[row * d.len_in..(row + 1) * d.len_in]);
    }
    Cow::Owned(out)
}

fn last_index(rows: usize, cols: usize, (rs, cs): (usize, usize)) -> usize {
    (rows - 1) * rs + (cols - 1) * cs
}

/// # Safety
/// `c` must be valid for writes at every index `r * rs + q * cs` of the
/// `m x n` output, and for reads too unless `beta == 0`. The operands must be
/// in bounds for their strides.
#[allow(clippy::too_many_arguments)]
unsafe fn gemm_raw(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    beta: f64,
    c: *mut f64,
    c_strides: (usize, usize),
) {
    assert!(last_index(m, k, a_strides) < a.len(), "gemm: lhs buffer too small");
    assert!(last_index(k, n, b_strides) < b.len(), "gemm: rhs buffer too small");
    matrixmultiply::dgemm(
        m,
        k,
        n,
        1.0,
        a.as_ptr(),
        a_strides.0 as isize,
        a_strides.1 as isize,
        b.as_ptr(),
        b_strides.0 as isize,
        b_strides.1 as isize,
        beta,
        c,
        c_strides.0 as isize,
        c_strides.1 as isize,
    );
}

/// `C = A B + beta C` for row/column strided `m x k` and `k x n` operands.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    beta: f64,
    c: &mut [f64],
    c_strides: (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(last_index(m, n, c_strides) < c.len(), "gemm: output buffer too small");
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    // SAFETY: the output is bounded by the assert above, the operands inside.
    unsafe { gemm_raw(m, k, n, a, a_strides, b, b_strides, beta, c.as_mut_ptr(), c_strides) }
}

/// `count` products `A_i B_i`, each `m x n`, stacked row-major into a fresh
/// buffer. `operands(i)` yields `(k, A_i, A strides, B_i, B strides)`.
/// With `beta = 0` the kernel never reads C, so the buffer skips zeroing.
pub(crate) fn stacked_gemm<'a, F>(count: usize, m: usize, n: usize, mut operands: F) -> Vec<f64>
where
    F: FnMut(usize) -> (usize, &'a [f64], (usize, usize), &'a [f64], (usize, usize)),
{
    let block = m * n;
    let mut out: Vec<f64> = Vec::with_capacity(count * block);
    if block == 0 {
        return out;
    }
    for i in 0..count {
        let (k, a, a_st, b, b_st) = operands(i);
        let dst = out.spare_capacity_mut()[i * block..(i + 1) * block].as_mut_ptr() as *mut f64;
        if k == 0 {
            // SAFETY: `dst` points at `block` reserved, unaliased slots.
            unsafe { core::ptr::write_bytes(dst, 0, block) };
            continue;
        }
        // SAFETY: the `(n, 1)` strided output covers exactly the `block`
        // reserved slots at `dst`; beta is 0 so they are only written.
        unsafe { gemm_raw(m, k, n, a, a_st, b, b_st, 0.0, dst, (n, 1)) };
    }
    // SAFETY: every block was written above.
    unsafe { out.set_len(count * block) };
    out
}

/// `A B` as a fresh row-major `m x n` buffer.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_new(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
) -> Vec<f64> {
    stacked_gemm(1, m, n, |_| (k, a, a_strides, b, b_strides))
}

/// Unfolds a padded `[N, C_in, Lp]` buffer into `(C_in K) x (N L_out)`.
fn im2col(d: &ConvDims, x: &[f64]) -> Vec<f64> {
    let (lp, lo, k) = (d.padded_len(), d.len_out(), d.kernel);
    let mut cols = Vec::with_capacity(d.c_in * k * d.batch * lo);
    for ci in 0..d.c_in {
        for kk in 0..k {
            for n in 0..d.batch {
                let start = (n * d.c_in + ci) * lp + kk;
                cols.extend_from_slice(&x[start..start + lo]);
            }
        }
    }
    cols
}

fn unpad(d: &ConvDims, dx: Vec<f64>) -> Vec<f64> {
    if d.padding == 0 {
        return dx;
    }
    let lp = d.padded_len();
    let mut out = vec![0.0; d.batch * d.c_in * d.len_in];
    for row in 0..d.batch * d.c_in {
        out[row * d.len_in..(row + 1) * d.len_in].copy_from_slice(&dx[row * lp + d.padding..row * lp + d.padding + d.len_in]);
    }
    out
}

pub(crate) fn conv1d_forward(d: &ConvDims, input: &[f64], kernels: &[f64], bias: &[f64]) -> Vec<f64> {
    if d.groups != 1 {
        return conv1d_forward_grouped(d, input, kernels, bias);
    }
    let lo = d.len_out();
    let width = d.batch * lo;
    let ck = d.c_in * d.kernel;
    let cols = im2col(d, &pad_input(d, input));
    let y = gemm_new(d.c_out, ck, width, kernels, (ck, 1), &cols, (width, 1));
    let mut out = Vec::with_capacity(d.batch * d.c_out * lo);
    for n in 0..d.batch {
        for co in 0..d.c_out {
            let src = &y[co * width + n * lo..co * width + (n + 1) * lo];
            out.extend(src.iter().map(|v| v + bias[co]));
        }
    }
    out
}

fn conv1d_forward_grouped(d: &ConvDims, input: &[f64], kernels: &[f64], bias: &[f64]) -> Vec<f64> {
    let lp = d.padded_len();
    let lo = d.len_out();
    let cin_g = d.cin_per_group();
    let cout_g = d.cout_per_group();
    let x = pad_input(d, input);
    let mut out = vec![0.0; d.batch * d.c_out * lo];
    for n in 0..d.batch {
        for co in 0..d.c_out {
            let g = co / cout_g;
            let row = &mut out[(n * d.c_out + co) * lo..(n * d.c_out + co + 1) * lo];
            row.iter_mut().for_each(|v| *v = bias[co]);
            for cl in 0..cin_g {
                let ci = g * cin_g + cl;
                let xr = &x[(n * d.c_in + ci) * lp..(n * d.c_in + ci + 1) * lp];
                let wr = &kernels[(co * cin_g + cl) * d.kernel..(co * cin_g + cl + 1) * d.kernel];
                if lo == 1 {
                    row[0] += dot(wr, &xr[..d.kernel]);
                } else {
                    for (k, &w) in wr.iter().enumerate() {
                        axpy(w, &xr[k..k + lo], row);
                    }
                }
            }
        }
    }
    out
}

/// Returns (d_input, d_kernels, d_bias); each is only computed when requested.
pub(crate) fn conv1d_backward(
    d: &ConvDims,
    input: &[f64],
    kernels: &[f64],
    grad_out: &[f64],
    want: [bool; 3],
) -> (Option<Vec<f64>>, Option<Vec<f64>>, Option<Vec<f64>>) {
    if d.groups != 1 {
        return conv1d_backward_grouped(d, input, kernels, grad_out, want);
    }
    let (lp, lo, k) = (d.padded_len(), d.len_out(), d.kernel);
    let width = d.batch * lo;
    let ck = d.c_in * k;
    let mut g = Vec::with_capacity(d.c_out * width);
    for co in 0..d.c_out {
        for n in 0..d.batch {
            g.extend_from_slice(&grad_out[(n * d.c_out + co) * lo..(n * d.c_out + co + 1) * lo]);
        }
    }
    let db = want[2].then(|| g.chunks(width).map(|r| r.iter().sum::<f64>()).collect());
    let dw = want[1].then(|| {
        let cols = im2col(d, &pad_input(d, input));
        gemm_new(d.c_out, width, ck, &g, (width, 1), &cols, (1, width))
    });
    let dx = want[0].then(|| {
        let dcols = gemm_new(ck, d.c_out, width, kernels, (1, ck), &g, (width, 1));
        let mut dx = vec![0.0; d.batch * d.c_in * lp];
        for n in 0..d.batch {
            for ci in 0..d.c_in {
                let dxr = &mut dx[(n * d.c_in + ci) * lp..(n * d.c_in + ci + 1) * lp];
                for kk in 0..k {
                    let src = (ci * k + kk) * width + n * lo;
                    axpy(1.0, &dcols[src..src + lo], &mut dxr[kk..kk + lo]);
                }
            }
        }
        unpad(d, dx)
    });
    (dx, dw, db)
}

fn conv1d_backward_grouped(
    d: &ConvDims,
    input: &[f64],
    kernels: &[f64],
    grad_out: &[f64],
    want: [bool; 3],
) -> (Option<Vec<f64>>, Option<Vec<f64>>, Option<Vec<f64>>) {
    let lp = d.padded_len();
    let lo = d.len_out();
    let cin_g = d.cin_per_group();
    let cout_g = d.cout_per_group();
    let x = pad_input(d, input);
    let mut dx = want[0].then(|| vec![0.0; d.batch * d.c_in * lp]);
    let mut dw = want[1].then(|| vec![0.0; kernels.len()]);
    let mut db = want[2].then(|| vec![0.0; d.c_out]);
    for n in 0..d.batch {
        for co in 0..d.c_out {
            let g = co / cout_g;
            let gr = &grad_out[(n * d.c_out + co) * lo..(n * d.c_out + co + 1) * lo];
            if let Some(db) = db.as_mut() {
                db[co] += gr.iter().sum::<f64>();
            }
            for cl in 0..cin_g {
                let ci = g * cin_g + cl;
                let base = (co * cin_g + cl) * d.kernel;
                if let Some(dw) = dw.as_mut() {
                    let xr = &x[(n * d.c_in + ci) * lp..(n * d.c_in + ci + 1) * lp];
                    for k in 0..d.kernel {
                        dw[base + k] += dot(gr, &xr[k..k + lo]);
                    }
                }
                if let Some(dx) = dx.as_mut() {
                    let dxr = &mut dx[(n * d.c_in + ci) * lp..(n * d.c_in + ci + 1) * lp];
                    if lo == 1 {
                        axpy(gr[0], &kernels[base..base + d.kernel], &mut dxr[..d.kernel]);
                    } else {
                        for k in 0..d.kernel {
                            axpy(kernels[base + k], gr, &mut dxr[k..k + lo]);
                        }
                    }
                }
            }
        }
    }
    (dx.map(|dx| unpad(d, dx)), dw, db)
}

pub(crate) fn dense_forward(
    batch: usize,
    d_in: usize,
    d_out: usize,
    input: &[f64],
    weight: &[f64],
    bias: &[f64],
) -> Vec<f64> {
    let mut out = Vec::with_capacity(batch * d_out);
    for _ in 0..batch {
        out.extend_from_slice(bias);
    }
    gemm(batch, d_in, d_out, input, (d_in, 1), weight, (1, d_in), 1.0, &mut out, (d_out, 1));
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn dense_backward(
    batch: usize,
    d_in: usize,
    d_out: usize,
    input: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    want: [bool; 3],
) -> (Option<Vec<f64>>, Option<Vec<f64>>, Option<Vec<f64>>) {
    let dx = want[0].then(|| gemm_new(batch, d_out, d_in, grad_out, (d_out, 1), weight, (d_in, 1)));
    let dw = want[1].then(|| gemm_new(d_out, batch, d_in, grad_out, (1, d_out), input, (d_in, 1)));
    let db = want[2].then(|| {
        let mut db = vec![0.0; d_out];
        for row in grad_out.chunks(d_out) {
            axpy(1.0, row, &mut db);
        }
        db
    });
    (dx, dw, db)
}

/// Centred copy of a `rows x cols` block: subtract the mean of each row
/// (`along_rows = true`) or each column.
pub(crate) fn centre(block: &[f64], rows: usize, cols: usize, along_rows: bool) -> Vec<f64> {
    let mut out = block.to_vec();
    if along_rows {
        for r in 0..rows {
            let row = &mut out[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            row.iter_mut().for_each(|v| *v -= mean);
        }
    } else {
        let mut means = vec![0.0; cols];
        for r in 0..rows {
            axpy(1.0, &block[r * cols..(r + 1) * cols], &mut means);
        }
        means.iter_mut().for_each(|m| *m /= rows as f64);
        for r in 0..rows {
            axpy(-1.0, &means, &mut out[r * cols..(r + 1) * cols]);
        }
    }
    out
}
