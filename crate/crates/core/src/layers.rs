//! Layer parameters and the reference (oracle) implementation of each layer.
//!
//! Everything here is written as plain nested loops over the defining sums
//! so it can serve as ground truth for the im2col and partitioned paths.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Shape3, Tensor3D};

/// Static parameters of a square-kernel, zero-padded convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConvLayerSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub has_bias: bool,
}

impl ConvLayerSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        ConvLayerSpec {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            has_bias: true,
        }
    }

    pub fn without_bias(mut self) -> Self {
        self.has_bias = false;
        self
    }

    /// Output extent along one spatial axis, or `None` when the kernel does
    /// not fit the padded input.
    pub fn out_extent(&self, extent: usize) -> Option<usize> {
        let padded = extent + 2 * self.padding;
        if self.kernel == 0 || self.stride == 0 || padded < self.kernel {
            return None;
        }
        Some((padded - self.kernel) / self.stride + 1)
    }

    pub fn output_shape(&self, input: Shape3) -> Result<Shape3> {
        if self.kernel == 0 || self.stride == 0 || self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::shape(
                "conv spec",
                "kernel, stride and channel counts >= 1",
                format!("{self:?}"),
            ));
        }
        if input.channels != self.in_channels {
            return Err(Error::shape(
                "conv input",
                format!("{} channels", self.in_channels),
                input,
            ));
        }
        match (self.out_extent(input.height), self.out_extent(input.width)) {
            (Some(h), Some(w)) => Ok(Shape3::new(self.out_channels, h, w)),
            _ => Err(Error::shape(
                "conv input",
                format!("spatial extent >= {} after padding {}", self.kernel, self.padding),
                input,
            )),
        }
    }

    /// Elements in one filter (`C * K * K`), i.e. the im2col row count.
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn weight_len(&self) -> usize {
        self.out_channels * self.patch_len()
    }

    pub fn weight_bytes(&self) -> usize {
        self.weight_len() * 4
    }

    pub fn bias_len(&self) -> usize {
        if self.has_bias {
            self.out_channels
        } else {
            0
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FcLayerSpec {
    pub in_features: usize,
    pub out_features: usize,
    pub has_bias: bool,
}

impl FcLayerSpec {
    pub fn new(in_features: usize, out_features: usize) -> Self {
        FcLayerSpec {
            in_features,
            out_features,
            has_bias: true,
        }
    }

    pub fn weight_len(&self) -> usize {
        self.in_features * self.out_features
    }

    pub fn bias_len(&self) -> usize {
        if self.has_bias {
            self.out_features
        } else {
            0
        }
    }

    fn validate(&self) -> Result<()> {
        if self.in_features == 0 || self.out_features == 0 {
            return Err(Error::shape("fc spec", "in/out features >= 1", format!("{self:?}")));
        }
        Ok(())
    }
}

/// Max-pooling window. `padding` follows the Darknet convention: the padded
/// extent is `H + padding`, with `padding / 2` virtual rows before the input
/// and the rest after. Padded cells never win the max.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PoolSpec {
    pub window: usize,
    pub stride: usize,
    #[serde(default)]
    pub padding: usize,
}

impl PoolSpec {
    pub fn new(window: usize, stride: usize) -> Self {
        PoolSpec {
            window,
            stride,
            padding: 0,
        }
    }

    pub fn padded(window: usize, stride: usize, padding: usize) -> Self {
        PoolSpec {
            window,
            stride,
            padding,
        }
    }

    pub fn output_shape(&self, input: Shape3) -> Result<Shape3> {
        let ph = input.height + self.padding;
        let pw = input.width + self.padding;
        if self.window == 0 || self.stride == 0 || self.window > ph || self.window > pw {
            return Err(Error::shape(
                "maxpool input",
                format!("spatial extent >= window {}", self.window),
                input,
            ));
        }
        Ok(Shape3::new(
            input.channels,
            (ph - self.window) / self.stride + 1,
            (pw - self.window) / self.stride + 1,
        ))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActivationKind {
    Relu,
    Linear,
}

impl ActivationKind {
    #[inline]
    pub fn apply(self, v: f32) -> f32 {
        match self {
            ActivationKind::Relu => v.max(0.0),
            ActivationKind::Linear => v,
        }
    }

    pub fn apply_slice(self, values: &mut [f32]) {
        if self == ActivationKind::Linear {
            return;
        }
        for v in values {
            *v = self.apply(*v);
        }
    }
}

/// A convolution together with its parameters.
///
/// `weights` is `N x C x K x K`, row-major, which is also the `N x (C*K*K)`
/// left-hand GEMM operand.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub spec: ConvLayerSpec,
    pub weights: Vec<f32>,
    pub bias: Option<Vec<f32>>,
}

impl ConvLayer {
    pub fn new(spec: ConvLayerSpec, weights: Vec<f32>, bias: Option<Vec<f32>>) -> Result<Self> {
        check_conv_params(&spec, &weights, bias.as_deref())?;
        Ok(ConvLayer { spec, weights, bias })
    }

    pub fn bias(&self) -> Option<&[f32]> {
        self.bias.as_deref()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FcLayer {
    pub spec: FcLayerSpec,
    pub weights: Vec<f32>,
    pub bias: Option<Vec<f32>>,
}

impl FcLayer {
    pub fn new(spec: FcLayerSpec, weights: Vec<f32>, bias: Option<Vec<f32>>) -> Result<Self> {
        spec.validate()?;
        if weights.len() != spec.weight_len() {
            return Err(Error::shape(
                "fc weights",
                format!("{}x{}", spec.out_features, spec.in_features),
                format!("{} values", weights.len()),
            ));
        }
        check_bias("fc bias", spec.bias_len(), bias.as_deref())?;
        Ok(FcLayer { spec, weights, bias })
    }

    pub fn bias(&self) -> Option<&[f32]> {
        self.bias.as_deref()
    }
}

fn check_bias(context: &'static str, expected: usize, bias: Option<&[f32]>) -> Result<()> {
    let actual = bias.map_or(0, <[f32]>::len);
    if actual != expected {
        return Err(Error::shape(
            context,
            format!("{expected} values"),
            format!("{actual} values"),
        ));
    }
    Ok(())
}

pub(crate) fn check_conv_params(spec: &ConvLayerSpec, weights: &[f32], bias: Option<&[f32]>) -> Result<()> {
    if weights.len() != spec.weight_len() {
        return Err(Error::shape(
            "conv weights",
            format!(
                "{}x{}x{}x{}",
                spec.out_channels, spec.in_channels, spec.kernel, spec.kernel
            ),
            format!("{} values", weights.len()),
        ));
    }
    check_bias("conv bias", spec.bias_len(), bias)
}

/// Reference convolution:
/// `out[n][y][x] = bias[n] + sum_{c,ky,kx} in_pad[c][y*S+ky][x*S+kx] * w[n][c][ky][kx]`.
pub fn conv2d_direct(
    input: &Tensor3D,
    weights: &[f32],
    bias: Option<&[f32]>,
    spec: &ConvLayerSpec,
) -> Result<Tensor3D> {
    let out_shape = spec.output_shape(input.shape())?;
    check_conv_params(spec, weights, bias)?;

    let (h, w) = (input.height() as isize, input.width() as isize);
    let (k, s, p) = (spec.kernel, spec.stride, spec.padding as isize);
    let (oh, ow) = (out_shape.height, out_shape.width);
    let mut out = Tensor3D::zeros(out_shape);
    let data = out.data_mut();

    for n in 0..spec.out_channels {
        let plane = &mut data[n * oh * ow..(n + 1) * oh * ow];
        for c in 0..spec.in_channels {
            let src = input.channel(c);
            for ky in 0..k {
                for kx in 0..k {
                    let wv = weights[((n * spec.in_channels + c) * k + ky) * k + kx];
                    for oy in 0..oh {
                        let iy = (oy * s + ky) as isize - p;
                        if iy < 0 || iy >= h {
                            continue;
                        }
                        let row = &src[iy as usize * w as usize..(iy as usize + 1) * w as usize];
                        let dst = &mut plane[oy * ow..(oy + 1) * ow];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * s + kx) as isize - p;
                            if ix >= 0 && ix < w {
                                *d += row[ix as usize] * wv;
                            }
                        }
                    }
                }
            }
        }
        if let Some(b) = bias {
            for v in plane.iter_mut() {
                *v += b[n];
            }
        }
    }
    Ok(out)
}

/// Reference fully-connected layer: `out = W * input + bias`, summed in
/// increasing input index.
pub fn fc_direct(input: &[f32], weights: &[f32], bias: Option<&[f32]>, spec: &FcLayerSpec) -> Result<Vec<f32>> {
    spec.validate()?;
    if input.len() != spec.in_features {
        return Err(Error::shape(
            "fc input",
            format!("{} features", spec.in_features),
            format!("{} values", input.len()),
        ));
    }
    if weights.len() != spec.weight_len() {
        return Err(Error::shape(
            "fc weights",
            format!("{}x{}", spec.out_features, spec.in_features),
            format!("{} values", weights.len()),
        ));
    }
    check_bias("fc bias", spec.bias_len(), bias)?;

    Ok(weights
        .chunks_exact(spec.in_features)
        .enumerate()
        .map(|(o, row)| {
            let acc = dot(row, input);
            match bias {
                Some(b) => acc + b[o],
                None => acc,
            }
        })
        .collect())
}

#[inline]
pub(crate) fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = 0.0f32;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// Unpadded max pooling; the window must fit the input.
pub fn maxpool_direct(input: &Tensor3D, window: usize, stride: usize) -> Result<Tensor3D> {
    maxpool(input, &PoolSpec::new(window, stride))
}

pub fn maxpool(input: &Tensor3D, pool: &PoolSpec) -> Result<Tensor3D> {
    let out_shape = pool.output_shape(input.shape())?;
    let (h, w) = (input.height() as isize, input.width() as isize);
    let offset = (pool.padding / 2) as isize;
    Ok(Tensor3D::from_fn(out_shape, |c, oy, ox| {
        let mut best = f32::NEG_INFINITY;
        for dy in 0..pool.window {
            let iy = (oy * pool.stride + dy) as isize - offset;
            if iy < 0 || iy >= h {
                continue;
            }
            for dx in 0..pool.window {
                let ix = (ox * pool.stride + dx) as isize - offset;
                if ix >= 0 && ix < w {
                    best = best.max(input.get(c, iy as usize, ix as usize));
                }
            }
        }
        best
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::max_rel_diff;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    // Straight transcription of the defining sum, with explicit padding.
    fn conv_quad_loop(input: &Tensor3D, w: &[f32], b: Option<&[f32]>, spec: &ConvLayerSpec) -> Vec<f32> {
        let (c_in, h, wd) = (input.channels(), input.height() as i64, input.width() as i64);
        let (k, s, p) = (spec.kernel as i64, spec.stride as i64, spec.padding as i64);
        let oh = (h + 2 * p - k) / s + 1;
        let ow = (wd + 2 * p - k) / s + 1;
        let mut out = Vec::new();
        for n in 0..spec.out_channels as i64 {
            for y in 0..oh {
                for x in 0..ow {
                    let mut acc = 0.0f64;
                    for c in 0..c_in as i64 {
                        for ky in 0..k {
                            for kx in 0..k {
                                let (iy, ix) = (y * s + ky - p, x * s + kx - p);
                                if iy < 0 || ix < 0 || iy >= h || ix >= wd {
                                    continue;
                                }
                                let wi = (((n * c_in as i64 + c) * k + ky) * k + kx) as usize;
                                acc += f64::from(input.get(c as usize, iy as usize, ix as usize)) * f64::from(w[wi]);
                            }
                        }
                    }
                    acc += b.map_or(0.0, |b| f64::from(b[n as usize]));
                    out.push(acc as f32);
                }
            }
        }
        out
    }

    #[test]
    fn scalar_conv() {
        let input = Tensor3D::filled(Shape3::new(1, 1, 1), 2.0);
        let spec = ConvLayerSpec::new(1, 1, 1, 1, 0);
        let out = conv2d_direct(&input, &[3.0], Some(&[0.0]), &spec).unwrap();
        assert_eq!(out.data(), &[6.0]);
    }

    #[test]
    fn five_by_five_six_channel_window() {
        // 5x5x6 input, one 3x3x6 kernel: 3x3 output, each a 54-term window sum.
        let input = Tensor3D::from_fn(Shape3::new(6, 5, 5), |c, y, x| (c + y * 5 + x) as f32);
        let spec = ConvLayerSpec::new(6, 1, 3, 1, 0).without_bias();
        let w = vec![1.0; 54];
        let out = conv2d_direct(&input, &w, None, &spec).unwrap();
        assert_eq!(out.shape(), Shape3::new(1, 3, 3));
        let expected: f32 = (0..6)
            .flat_map(|c| (0..3).flat_map(move |y| (0..3).map(move |x| (c + y * 5 + x) as f32)))
            .sum();
        assert_eq!(out.get(0, 0, 0), expected);
    }

    #[test]
    fn strided_padded_conv_matches_quad_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let input = Tensor3D::from_vec(Shape3::new(3, 8, 8), random_vec(&mut rng, 192)).unwrap();
        let spec = ConvLayerSpec::new(3, 4, 3, 2, 1);
        let w = random_vec(&mut rng, spec.weight_len());
        let b = random_vec(&mut rng, 4);
        let out = conv2d_direct(&input, &w, Some(&b), &spec).unwrap();
        assert_eq!(out.shape(), Shape3::new(4, 4, 4));
        let oracle = conv_quad_loop(&input, &w, Some(&b), &spec);
        assert!(max_rel_diff(out.data(), &oracle) <= 1e-6);
    }

    #[test]
    fn conv_rejects_bad_shapes() {
        let input = Tensor3D::zeros(Shape3::new(2, 4, 4));
        let spec = ConvLayerSpec::new(3, 1, 3, 1, 0);
        let err = conv2d_direct(&input, &[0.0; 27], Some(&[0.0]), &spec).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("3 channels") && msg.contains("2x4x4"), "{msg}");

        let spec = ConvLayerSpec::new(2, 1, 3, 1, 0);
        assert!(conv2d_direct(&input, &[0.0; 5], Some(&[0.0]), &spec).is_err());
        let spec = ConvLayerSpec::new(2, 1, 7, 1, 1);
        assert!(spec.output_shape(input.shape()).is_err());
    }

    #[test]
    fn fc_identity_and_hand_values() {
        let spec = FcLayerSpec::new(2, 2);
        let out = fc_direct(&[5.0, -1.0], &[1.0, 0.0, 0.0, 1.0], Some(&[0.0, 0.0]), &spec).unwrap();
        assert_eq!(out, vec![5.0, -1.0]);
        let out = fc_direct(&[1.0, 1.0], &[1.0, 2.0, 3.0, 4.0], Some(&[0.0, 0.0]), &spec).unwrap();
        assert_eq!(out, vec![3.0, 7.0]);
    }

    #[test]
    fn fc_matches_nested_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let spec = FcLayerSpec::new(50, 100);
        let w = random_vec(&mut rng, 5000);
        let b = random_vec(&mut rng, 100);
        let x = random_vec(&mut rng, 50);
        let out = fc_direct(&x, &w, Some(&b), &spec).unwrap();
        let mut oracle = vec![0.0f32; 100];
        for (o, slot) in oracle.iter_mut().enumerate() {
            let mut acc = f64::from(b[o]);
            for i in 0..50 {
                acc += f64::from(w[o * 50 + i]) * f64::from(x[i]);
            }
            *slot = acc as f32;
        }
        assert!(max_rel_diff(&out, &oracle) <= 1e-6);
    }

    #[test]
    fn fc_length_mismatch() {
        let spec = FcLayerSpec::new(3, 1);
        assert!(matches!(
            fc_direct(&[1.0; 2], &[1.0; 3], Some(&[0.0]), &spec),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn maxpool_cases() {
        let input = Tensor3D::from_vec(Shape3::new(1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(maxpool_direct(&input, 2, 2).unwrap().data(), &[4.0]);

        let c = Tensor3D::filled(Shape3::new(2, 4, 6), 1.5);
        let out = maxpool_direct(&c, 2, 2).unwrap();
        assert_eq!(out.shape(), Shape3::new(2, 2, 3));
        assert!(out.data().iter().all(|&v| v == 1.5));

        assert!(maxpool_direct(&input, 3, 1).is_err());
    }

    #[test]
    fn maxpool_matches_nested_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let input = Tensor3D::from_vec(Shape3::new(3, 6, 6), random_vec(&mut rng, 108)).unwrap();
        let out = maxpool_direct(&input, 2, 2).unwrap();
        for c in 0..3 {
            for y in 0..3 {
                for x in 0..3 {
                    let m = [(0, 0), (0, 1), (1, 0), (1, 1)]
                        .iter()
                        .map(|(dy, dx)| input.get(c, 2 * y + dy, 2 * x + dx))
                        .fold(f32::NEG_INFINITY, f32::max);
                    assert_eq!(out.get(c, y, x), m);
                }
            }
        }
    }

    #[test]
    fn darknet_padded_pool_extent() {
        // 225 -> 113 and 113 -> 29 with size-1 padding.
        let p = PoolSpec::padded(2, 2, 1);
        assert_eq!(p.output_shape(Shape3::new(1, 225, 225)).unwrap().height, 113);
        let p = PoolSpec::padded(4, 4, 3);
        assert_eq!(p.output_shape(Shape3::new(1, 113, 113)).unwrap().height, 29);
        let t = Tensor3D::from_fn(Shape3::new(1, 3, 3), |_, y, x| (y * 3 + x) as f32);
        let out = maxpool(&t, &PoolSpec::padded(2, 2, 1)).unwrap();
        assert_eq!(out.data(), &[4.0, 5.0, 7.0, 8.0]);
    }
}
