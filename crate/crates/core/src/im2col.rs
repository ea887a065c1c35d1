//! im2col expansion and matrix multiplication.
//!
//! The traced GEMM follows Darknet's `gemm_nn` loop nest: the output is
//! produced row by row and every `(i, k)` step streams a full row of the
//! im2col operand, so one output row needs a sweep over the whole expanded
//! matrix. The untraced path blocks the same loop nest; both visit `k` in
//! increasing order for every output element and therefore agree bit for bit.

use std::ops::Range;

use crate::enclave::{BufferHandle, Memory};
use crate::error::{Error, Result};
use crate::layers::{check_conv_params, ConvLayerSpec};
use crate::tensor::{Shape3, Tensor3D};

pub const GEMM_BLOCK: usize = 64;

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "matrix data",
                format!("{rows}x{cols}"),
                format!("{} values", data.len()),
            ));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn bytes(&self) -> usize {
        self.data.len() * 4
    }
}

/// Geometry of the im2col matrix of one layer: row `(c*K + ky)*K + kx`,
/// column `oy*outW + ox`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Im2colLayout {
    pub spec: ConvLayerSpec,
    pub input: Shape3,
    pub out_h: usize,
    pub out_w: usize,
}

impl Im2colLayout {
    pub fn new(spec: &ConvLayerSpec, input: Shape3) -> Result<Self> {
        let out = spec.output_shape(input)?;
        Ok(Im2colLayout {
            spec: *spec,
            input,
            out_h: out.height,
            out_w: out.width,
        })
    }

    pub fn rows(&self) -> usize {
        self.spec.patch_len()
    }

    pub fn cols(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn bytes(&self) -> usize {
        self.rows() * self.cols() * 4
    }

    /// Input coordinate feeding `(row, col)`, or `None` for a padding cell.
    pub fn source(&self, row: usize, col: usize) -> Option<(usize, usize, usize)> {
        let k = self.spec.kernel;
        let (c, ky, kx) = (row / (k * k), (row / k) % k, row % k);
        let (oy, ox) = (col / self.out_w, col % self.out_w);
        let iy = (oy * self.spec.stride + ky).checked_sub(self.spec.padding)?;
        let ix = (ox * self.spec.stride + kx).checked_sub(self.spec.padding)?;
        (iy < self.input.height && ix < self.input.width).then_some((c, iy, ix))
    }

    /// `size(im2col) / size(input)`.
    pub fn expansion_factor(&self) -> f64 {
        (self.rows() * self.cols()) as f64 / self.input.len() as f64
    }
}

/// Full im2col matrix (`C*K*K` rows, `outH*outW` columns).
pub fn im2col(input: &Tensor3D, spec: &ConvLayerSpec) -> Result<Matrix> {
    let out = spec.output_shape(input.shape())?;
    Ok(im2col_region(input, spec, 0..out.height, 0..spec.in_channels))
}

/// im2col restricted to output rows `rows` and input channels `channels`.
///
/// The result has `channels.len()*K*K` rows and `rows.len()*outW` columns.
/// Shapes must already be validated.
pub fn im2col_region(input: &Tensor3D, spec: &ConvLayerSpec, rows: Range<usize>, channels: Range<usize>) -> Matrix {
    let (h, w) = (input.height(), input.width());
    let k = spec.kernel;
    let (s, p) = (spec.stride, spec.padding);
    let out_w = spec.out_extent(w).expect("validated shape");
    let cols = rows.len() * out_w;
    let mut m = Matrix::zeros(channels.len() * k * k, cols);
    for (ci, c) in channels.enumerate() {
        let src = input.channel(c);
        for ky in 0..k {
            for kx in 0..k {
                let r = (ci * k + ky) * k + kx;
                let dst = &mut m.data[r * cols..(r + 1) * cols];
                for (ri, oy) in rows.clone().enumerate() {
                    let Some(iy) = (oy * s + ky).checked_sub(p).filter(|&iy| iy < h) else {
                        continue;
                    };
                    let line = &src[iy * w..(iy + 1) * w];
                    let out_line = &mut dst[ri * out_w..(ri + 1) * out_w];
                    for (ox, d) in out_line.iter_mut().enumerate() {
                        if let Some(ix) = (ox * s + kx).checked_sub(p).filter(|&ix| ix < w) {
                            *d = line[ix];
                        }
                    }
                }
            }
        }
    }
    m
}

/// Reports the accesses of [`im2col_region`]: per im2col row, the input rows
/// of that channel it samples and the workspace row it writes.
pub(crate) fn trace_im2col_region(
    mem: &mut dyn Memory,
    input_buf: &BufferHandle,
    ws_buf: &BufferHandle,
    input: Shape3,
    spec: &ConvLayerSpec,
    rows: Range<usize>,
    channels: Range<usize>,
) -> Result<()> {
    let (h, w) = (input.height, input.width);
    let k = spec.kernel;
    let out_w = spec.out_extent(w).expect("validated shape");
    let row_bytes = rows.len() * out_w * 4;
    for (ci, c) in channels.enumerate() {
        for ky in 0..k {
            // input rows sampled for this kernel row
            let ys = rows
                .clone()
                .filter_map(|oy| (oy * spec.stride + ky).checked_sub(spec.padding).filter(|&iy| iy < h));
            let (lo, hi) = ys.fold((usize::MAX, 0), |(lo, hi), iy| (lo.min(iy), hi.max(iy + 1)));
            for kx in 0..k {
                if lo < hi {
                    mem.read(input_buf, (c * h * w + lo * w) * 4, (hi - lo) * w * 4)?;
                }
                let r = (ci * k + ky) * k + kx;
                mem.write(ws_buf, r * row_bytes, row_bytes)?;
            }
        }
    }
    Ok(())
}

fn check_gemm(a: (usize, usize), b: (usize, usize), c: (usize, usize)) -> Result<()> {
    if a.1 != b.0 || c != (a.0, b.1) {
        return Err(Error::shape(
            "gemm",
            format!("A {}x{} * B {}x{} -> C {}x{}", a.0, a.1, a.1, b.1, a.0, b.1),
            format!("A {}x{}, B {}x{}, C {}x{}", a.0, a.1, b.0, b.1, c.0, c.1),
        ));
    }
    Ok(())
}

fn scale_rows(c: &mut [f32], beta: f32) {
    if beta == 0.0 {
        c.fill(0.0);
    } else if beta != 1.0 {
        c.iter_mut().for_each(|v| *v *= beta);
    }
}

/// `C <- alpha*A*B + beta*C` on raw row-major slices (`m x k` by `k x n`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_raw(m: usize, n: usize, kd: usize, alpha: f32, a: &[f32], b: &[f32], beta: f32, c: &mut [f32]) {
    debug_assert!(a.len() == m * kd && b.len() == kd * n && c.len() == m * n);
    scale_rows(c, beta);
    for i0 in (0..m).step_by(GEMM_BLOCK) {
        let i1 = (i0 + GEMM_BLOCK).min(m);
        for k0 in (0..kd).step_by(GEMM_BLOCK) {
            let k1 = (k0 + GEMM_BLOCK).min(kd);
            for j0 in (0..n).step_by(GEMM_BLOCK * 4) {
                let j1 = (j0 + GEMM_BLOCK * 4).min(n);
                for i in i0..i1 {
                    let c_row = &mut c[i * n + j0..i * n + j1];
                    for kk in k0..k1 {
                        let a_part = alpha * a[i * kd + kk];
                        let b_row = &b[kk * n + j0..kk * n + j1];
                        for (cv, bv) in c_row.iter_mut().zip(b_row) {
                            *cv += a_part * bv;
                        }
                    }
                }
            }
        }
    }
}

/// Blocked `C <- alpha*A*B + beta*C`.
pub fn gemm(a: &Matrix, b: &Matrix, c: &mut Matrix, alpha: f32, beta: f32) -> Result<()> {
    check_gemm((a.rows, a.cols), (b.rows, b.cols), (c.rows, c.cols))?;
    gemm_raw(a.rows, b.cols, a.cols, alpha, &a.data, &b.data, beta, &mut c.data);
    Ok(())
}

/// Where the rows of a GEMM operand live inside a simulated buffer: row `r`
/// starts `base + r*row_stride` bytes into `buf` and is contiguous.
#[derive(Debug, Clone, Copy)]
pub struct RowMap<'a> {
    pub buf: &'a BufferHandle,
    pub base: usize,
    pub row_stride: usize,
}

impl<'a> RowMap<'a> {
    pub fn dense(buf: &'a BufferHandle, cols: usize) -> Self {
        RowMap {
            buf,
            base: 0,
            row_stride: cols * 4,
        }
    }

    fn at(&self, row: usize, col: usize) -> usize {
        self.base + row * self.row_stride + col * 4
    }
}

/// Row-order GEMM on raw slices, reporting every operand access.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_raw_traced(
    m: usize,
    n: usize,
    kd: usize,
    alpha: f32,
    a: &[f32],
    b: &[f32],
    beta: f32,
    c: &mut [f32],
    mem: &mut dyn Memory,
    maps: [RowMap<'_>; 3],
) -> Result<()> {
    let [am, bm, cm] = maps;
    let row_bytes = n * 4;
    if beta != 1.0 {
        for i in 0..m {
            if beta != 0.0 {
                mem.read(cm.buf, cm.at(i, 0), row_bytes)?;
            }
            mem.write(cm.buf, cm.at(i, 0), row_bytes)?;
        }
    }
    scale_rows(c, beta);
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for kk in 0..kd {
            mem.read(am.buf, am.at(i, kk), 4)?;
            mem.read(bm.buf, bm.at(kk, 0), row_bytes)?;
            mem.read(cm.buf, cm.at(i, 0), row_bytes)?;
            mem.write(cm.buf, cm.at(i, 0), row_bytes)?;
            let a_part = alpha * a[i * kd + kk];
            for (cv, bv) in c_row.iter_mut().zip(&b[kk * n..(kk + 1) * n]) {
                *cv += a_part * bv;
            }
        }
    }
    Ok(())
}

/// Row-order GEMM with every access reported to `mem`. For each output row
/// the whole of `B` is re-read, so `B` sees `A.rows * B.rows * B.cols`
/// element reads.
pub fn gemm_row_order_traced(
    a: &Matrix,
    b: &Matrix,
    c: &mut Matrix,
    alpha: f32,
    beta: f32,
    mem: &mut dyn Memory,
    bufs: [&BufferHandle; 3],
) -> Result<()> {
    check_gemm((a.rows, a.cols), (b.rows, b.cols), (c.rows, c.cols))?;
    let maps = [
        RowMap::dense(bufs[0], a.cols),
        RowMap::dense(bufs[1], b.cols),
        RowMap::dense(bufs[2], c.cols),
    ];
    gemm_raw_traced(
        a.rows,
        b.cols,
        a.cols,
        alpha,
        &a.data,
        &b.data,
        beta,
        &mut c.data,
        mem,
        maps,
    )
}

/// Dispatches to the traced row-order loop when `mem` records accesses and
/// to the blocked loop otherwise. Results are bit-identical.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_dispatch(
    m: usize,
    n: usize,
    kd: usize,
    a: &[f32],
    b: &[f32],
    beta: f32,
    c: &mut [f32],
    mem: &mut dyn Memory,
    maps: [RowMap<'_>; 3],
) -> Result<()> {
    if mem.is_traced() {
        gemm_raw_traced(m, n, kd, 1.0, a, b, beta, c, mem, maps)
    } else {
        gemm_raw(m, n, kd, 1.0, a, b, beta, c);
        Ok(())
    }
}

/// Buffers of one conv layer inside a simulated memory.
#[derive(Debug, Clone)]
pub struct ConvBuffers {
    pub input: BufferHandle,
    pub weights: BufferHandle,
    pub bias: Option<BufferHandle>,
    pub output: BufferHandle,
}

impl ConvBuffers {
    pub fn alloc(mem: &mut dyn Memory, spec: &ConvLayerSpec, input: Shape3) -> Result<Self> {
        let out = spec.output_shape(input)?;
        Ok(ConvBuffers {
            input: mem.alloc(input.bytes(), "input"),
            weights: mem.alloc(spec.weight_bytes(), "weights"),
            bias: spec.has_bias.then(|| mem.alloc(spec.bias_len() * 4, "bias")),
            output: mem.alloc(out.bytes(), "output"),
        })
    }
}

/// Adds the per-channel bias to `out`, reading the bias vector and
/// rewriting each output plane.
pub(crate) fn add_bias(
    out: &mut Tensor3D,
    bias: Option<&[f32]>,
    mem: &mut dyn Memory,
    bufs: &ConvBuffers,
) -> Result<()> {
    let (Some(bias), Some(bias_buf)) = (bias, bufs.bias.as_ref()) else {
        return Ok(());
    };
    let plane = out.shape().plane();
    if mem.is_traced() {
        mem.read(bias_buf, 0, bias.len() * 4)?;
    }
    for (n, chunk) in out.data_mut().chunks_exact_mut(plane).enumerate() {
        if mem.is_traced() {
            mem.read(&bufs.output, n * plane * 4, plane * 4)?;
            mem.write(&bufs.output, n * plane * 4, plane * 4)?;
        }
        for v in chunk {
            *v += bias[n];
        }
    }
    Ok(())
}

/// Convolution as one im2col expansion plus one GEMM.
pub fn conv2d_im2col(
    input: &Tensor3D,
    weights: &[f32],
    bias: Option<&[f32]>,
    spec: &ConvLayerSpec,
) -> Result<Tensor3D> {
    let mut mem = crate::enclave::Untraced::default();
    let bufs = ConvBuffers::alloc(&mut mem, spec, input.shape())?;
    conv2d_unmodified(input, weights, bias, spec, &mut mem, &bufs)
}

/// The unpartitioned executor: materialise the full im2col matrix, then one
/// GEMM into the output. Under tracing this is the access pattern that
/// thrashes once the expanded matrix outgrows secure memory.
pub fn conv2d_unmodified(
    input: &Tensor3D,
    weights: &[f32],
    bias: Option<&[f32]>,
    spec: &ConvLayerSpec,
    mem: &mut dyn Memory,
    bufs: &ConvBuffers,
) -> Result<Tensor3D> {
    let out_shape = spec.output_shape(input.shape())?;
    check_conv_params(spec, weights, bias)?;
    let layout = Im2colLayout::new(spec, input.shape())?;
    let ws = mem.alloc(layout.bytes(), "im2col");
    let cols = im2col_region(input, spec, 0..out_shape.height, 0..spec.in_channels);
    if mem.is_traced() {
        trace_im2col_region(
            mem,
            &bufs.input,
            &ws,
            input.shape(),
            spec,
            0..out_shape.height,
            0..spec.in_channels,
        )?;
    }
    let mut out = Tensor3D::zeros(out_shape);
    let (m, n, kd) = (spec.out_channels, layout.cols(), layout.rows());
    let maps = [
        RowMap::dense(&bufs.weights, kd),
        RowMap::dense(&ws, n),
        RowMap::dense(&bufs.output, n),
    ];
    gemm_dispatch(m, n, kd, weights, cols.data(), 0.0, out.data_mut(), mem, maps)?;
    add_bias(&mut out, bias, mem, bufs)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::enclave::{Enclave, EnclaveConfig};
    use crate::layers::conv2d_direct;
    use crate::tensor::max_rel_diff;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn random_tensor(rng: &mut ChaCha8Rng, shape: Shape3) -> Tensor3D {
        Tensor3D::from_vec(shape, (0..shape.len()).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn one_by_one_kernel_is_reshape() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_tensor(&mut rng, Shape3::new(3, 4, 5));
        let spec = ConvLayerSpec::new(3, 2, 1, 1, 0);
        let m = im2col(&x, &spec).unwrap();
        assert_eq!((m.rows(), m.cols()), (3, 20));
        assert_eq!(m.data(), x.data());
        assert_eq!(Im2colLayout::new(&spec, x.shape()).unwrap().expansion_factor(), 1.0);
    }

    #[test]
    fn same_padding_three_by_three_expands_ninefold() {
        let spec = ConvLayerSpec::new(64, 64, 3, 1, 1);
        let layout = Im2colLayout::new(&spec, Shape3::new(64, 224, 224)).unwrap();
        assert_eq!((layout.out_h, layout.out_w), (224, 224));
        assert_eq!(layout.expansion_factor(), 9.0);
    }

    #[test]
    fn columns_are_brute_force_patches() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_tensor(&mut rng, Shape3::new(2, 4, 4));
        let spec = ConvLayerSpec::new(2, 1, 2, 2, 0);
        let m = im2col(&x, &spec).unwrap();
        assert_eq!((m.rows(), m.cols()), (8, 4));
        for oy in 0..2 {
            for ox in 0..2 {
                let mut patch = Vec::new();
                for c in 0..2 {
                    for ky in 0..2 {
                        for kx in 0..2 {
                            patch.push(x.get(c, oy * 2 + ky, ox * 2 + kx));
                        }
                    }
                }
                let col: Vec<f32> = (0..8).map(|r| m.get(r, oy * 2 + ox)).collect();
                assert_eq!(col, patch);
            }
        }
    }

    #[test]
    fn layout_sources_are_in_bounds() {
        let spec = ConvLayerSpec::new(2, 1, 3, 2, 1);
        let shape = Shape3::new(2, 5, 6);
        let layout = Im2colLayout::new(&spec, shape).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_tensor(&mut rng, shape);
        let m = im2col(&x, &spec).unwrap();
        for r in 0..layout.rows() {
            for c in 0..layout.cols() {
                match layout.source(r, c) {
                    Some((ch, y, xx)) => assert_eq!(m.get(r, c), x.get(ch, y, xx)),
                    None => assert_eq!(m.get(r, c), 0.0),
                }
            }
        }
    }

    #[test]
    fn gemm_small_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let b = random_matrix(&mut rng, 5, 7);
        let mut c = Matrix::zeros(5, 7);
        gemm(&Matrix::identity(5), &b, &mut c, 1.0, 0.0).unwrap();
        assert_eq!(c, b);

        let mut c = Matrix::zeros(1, 1);
        gemm(
            &Matrix::from_vec(1, 1, vec![2.0]).unwrap(),
            &Matrix::from_vec(1, 1, vec![3.0]).unwrap(),
            &mut c,
            1.0,
            0.0,
        )
        .unwrap();
        assert_eq!(c.data(), &[6.0]);

        assert!(gemm(
            &Matrix::zeros(2, 3),
            &Matrix::zeros(2, 3),
            &mut Matrix::zeros(2, 3),
            1.0,
            0.0
        )
        .is_err());
    }

    #[test]
    fn gemm_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_matrix(&mut rng, 17, 23);
        let b = random_matrix(&mut rng, 23, 11);
        let c0 = random_matrix(&mut rng, 17, 11);
        let mut c = c0.clone();
        gemm(&a, &b, &mut c, 0.5, 2.0).unwrap();
        let mut oracle = vec![0.0f32; 17 * 11];
        for i in 0..17 {
            for j in 0..11 {
                let mut acc = 0.0f64;
                for k in 0..23 {
                    acc += f64::from(a.get(i, k)) * f64::from(b.get(k, j));
                }
                oracle[i * 11 + j] = (0.5 * acc + 2.0 * f64::from(c0.get(i, j))) as f32;
            }
        }
        assert!(max_rel_diff(c.data(), &oracle) <= 1e-5);
    }

    #[test]
    fn traced_gemm_is_bit_identical_and_counts_b_reads() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = random_matrix(&mut rng, 32, 64);
        let b = random_matrix(&mut rng, 64, 48);
        let mut c1 = Matrix::zeros(32, 48);
        gemm(&a, &b, &mut c1, 1.0, 0.0).unwrap();

        let mut e = Enclave::new(EnclaveConfig::new(1 << 20, 4096)).unwrap();
        let bufs = [
            e.alloc(a.bytes(), "A"),
            e.alloc(b.bytes(), "B"),
            e.alloc(32 * 48 * 4, "C"),
        ];
        let mut c2 = Matrix::zeros(32, 48);
        gemm_row_order_traced(&a, &b, &mut c2, 1.0, 0.0, &mut e, [&bufs[0], &bufs[1], &bufs[2]]).unwrap();
        assert_eq!(
            c1.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            c2.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(e.buffer_stats(&bufs[1]).read_bytes / 4, 32 * 64 * 48);
    }

    #[test]
    fn row_order_sweeps_b_once_per_output_row() {
        // B = 64 rows x 1024 floats = 64 pages; only 16 fit, so every output
        // row faults all of B again.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let b = random_matrix(&mut rng, 64, 1024);
        let mut prev = None;
        for m in [2usize, 4, 8] {
            let a = random_matrix(&mut rng, m, 64);
            let mut e = Enclave::new(EnclaveConfig::new(16 * 4096, 4096)).unwrap();
            let bufs = [
                e.alloc(a.bytes(), "A"),
                e.alloc(b.bytes(), "B"),
                e.alloc(m * 1024 * 4, "C"),
            ];
            let mut c = Matrix::zeros(m, 1024);
            gemm_row_order_traced(&a, &b, &mut c, 1.0, 0.0, &mut e, [&bufs[0], &bufs[1], &bufs[2]]).unwrap();
            let b_faults = e.buffer_stats(&bufs[1]).faults;
            assert_eq!(b_faults, m as u64 * 64);
            if let Some(p) = prev {
                assert_eq!(b_faults, 2 * p);
            }
            prev = Some(b_faults);
        }
    }

    #[test]
    fn im2col_conv_matches_direct() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let spec = ConvLayerSpec::new(6, 1, 3, 1, 0);
        let x = random_tensor(&mut rng, Shape3::new(6, 5, 5));
        let w: Vec<f32> = (0..spec.weight_len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let a = conv2d_im2col(&x, &w, Some(&[0.25]), &spec).unwrap();
        let d = conv2d_direct(&x, &w, Some(&[0.25]), &spec).unwrap();
        assert!(max_rel_diff(a.data(), d.data()) <= 1e-5);

        let zero = Tensor3D::zeros(Shape3::new(6, 5, 5));
        let z = conv2d_im2col(&zero, &w, Some(&[0.25]), &spec).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn random_layers_match_direct() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let k = [1, 2, 3, 5][rng.gen_range(0..4)];
            let s = rng.gen_range(1..=2);
            let p = rng.gen_range(0..=2);
            let c = rng.gen_range(1..=4);
            let n = rng.gen_range(1..=4);
            let h = rng.gen_range(k.max(3)..=10);
            let w = rng.gen_range(k.max(3)..=10);
            let spec = ConvLayerSpec::new(c, n, k, s, p);
            let x = random_tensor(&mut rng, Shape3::new(c, h, w));
            let wt: Vec<f32> = (0..spec.weight_len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<f32> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let a = conv2d_im2col(&x, &wt, Some(&b), &spec).unwrap();
            let d = conv2d_direct(&x, &wt, Some(&b), &spec).unwrap();
            assert_eq!(a.shape(), d.shape());
            assert!(max_rel_diff(a.data(), d.data()) <= 1e-5);
        }
    }
}
