use crate::error::{Error, Result};
use crate::frame::FrameMatrix;
use crate::real::Real;

/// Dot product with eight independent accumulators so the reduction
/// vectorizes.
#[inline]
pub(crate) fn dot<F: Real>(a: &[F], b: &[F]) -> F {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [F::zero(); 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let xa = &a[c * 8..c * 8 + 8];
        let xb = &b[c * 8..c * 8 + 8];
        for k in 0..8 {
            acc[k] += xa[k] * xb[k];
        }
    }
    let mut tail = F::zero();
    for k in chunks * 8..a.len() {
        tail += a[k] * b[k];
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

/// `y += alpha * x`
#[inline]
pub(crate) fn axpy<F: Real>(alpha: F, x: &[F], y: &mut [F]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Weights of one temporal convolution. Row `o` of `weights` is filter `o`,
/// laid out as `kernel_width` consecutive input frames of `in_dim` values.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayerParams<F = f32> {
    pub weights: Vec<F>,
    pub bias: Vec<F>,
    pub kernel_width: usize,
    pub shift: usize,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl<F: Real> ConvLayerParams<F> {
    pub fn zeros(kernel_width: usize, shift: usize, in_dim: usize, out_dim: usize) -> Self {
        ConvLayerParams {
            weights: vec![F::zero(); out_dim * kernel_width * in_dim],
            bias: vec![F::zero(); out_dim],
            kernel_width,
            shift,
            in_dim,
            out_dim,
        }
    }

    pub fn fan_in(&self) -> usize {
        self.kernel_width * self.in_dim
    }

    pub fn filter(&self, o: usize) -> &[F] {
        let n = self.fan_in();
        &self.weights[o * n..(o + 1) * n]
    }

    pub fn output_frames(&self, input_frames: usize) -> Option<usize> {
        (input_frames >= self.kernel_width)
            .then(|| (input_frames - self.kernel_width) / self.shift + 1)
    }

    fn check(&self) -> Result<()> {
        if self.kernel_width == 0 || self.shift == 0 || self.in_dim == 0 || self.out_dim == 0 {
            return Err(Error::shape("conv kernel width, shift and dimensions must be >= 1"));
        }
        if self.weights.len() != self.out_dim * self.fan_in() || self.bias.len() != self.out_dim {
            return Err(Error::shape("conv weight/bias sizes disagree with dimensions"));
        }
        Ok(())
    }
}

/// Applies the same affine map to every window of `kernel_width` frames,
/// advancing `shift` frames at a time. Only fully covered positions are
/// produced.
pub fn conv_forward<F: Real>(x: &FrameMatrix<F>, p: &ConvLayerParams<F>) -> Result<FrameMatrix<F>> {
    p.check()?;
    if x.dim() != p.in_dim {
        return Err(Error::shape(format!(
            "conv expects frames of dimension {}, got {}",
            p.in_dim,
            x.dim()
        )));
    }
    let Some(out_frames) = p.output_frames(x.rows()) else {
        return Err(Error::shape(format!(
            "conv kernel width {} exceeds input length {}",
            p.kernel_width,
            x.rows()
        )));
    };
    let span = p.fan_in();
    let step = p.shift * p.in_dim;
    let input = x.as_slice();
    let mut out = vec![F::zero(); out_frames * p.out_dim];
    for (j, row) in out.chunks_exact_mut(p.out_dim).enumerate() {
        let window = &input[j * step..j * step + span];
        for (o, y) in row.iter_mut().enumerate() {
            *y = dot(p.filter(o), window) + p.bias[o];
        }
    }
    Ok(FrameMatrix::from_raw(out_frames, p.out_dim, out))
}

/// Accumulates weight and bias gradients into `grad` and, if requested,
/// writes the input gradient.
pub(crate) fn conv_backward<F: Real>(
    x: &FrameMatrix<F>,
    p: &ConvLayerParams<F>,
    dy: &FrameMatrix<F>,
    grad: &mut ConvLayerParams<F>,
    dx: Option<&mut [F]>,
) {
    let span = p.fan_in();
    let step = p.shift * p.in_dim;
    let input = x.as_slice();
    for j in 0..dy.rows() {
        let window = &input[j * step..j * step + span];
        for (o, &g) in dy.frame(j).iter().enumerate() {
            if g != F::zero() {
                axpy(g, window, &mut grad.weights[o * span..(o + 1) * span]);
                grad.bias[o] += g;
            }
        }
    }
    if let Some(dx) = dx {
        dx.iter_mut().for_each(|v| *v = F::zero());
        for j in 0..dy.rows() {
            let target = &mut dx[j * step..j * step + span];
            for (o, &g) in dy.frame(j).iter().enumerate() {
                if g != F::zero() {
                    axpy(g, p.filter(o), target);
                }
            }
        }
    }
}

/// Output of a max-pooling layer together with the input frame that won each
/// output element.
#[derive(Debug, Clone, PartialEq)]
pub struct Pooled<F = f32> {
    pub output: FrameMatrix<F>,
    pub argmax: Vec<usize>,
}

/// Non-overlapping temporal max-pooling; trailing frames that do not fill a
/// whole pool are dropped. Ties go to the earliest frame.
pub fn maxpool_forward<F: Real>(x: &FrameMatrix<F>, pool_width: usize) -> Result<Pooled<F>> {
    if pool_width == 0 {
        return Err(Error::shape("pool width must be >= 1"));
    }
    if x.rows() < pool_width {
        return Err(Error::shape(format!(
            "pool width {pool_width} exceeds input length {}",
            x.rows()
        )));
    }
    let d = x.dim();
    let out_frames = x.rows() / pool_width;
    let mut out = Vec::with_capacity(out_frames * d);
    let mut argmax = Vec::with_capacity(out_frames * d);
    for j in 0..out_frames {
        let first = j * pool_width;
        for i in 0..d {
            let mut best = first;
            let mut value = x.frame(first)[i];
            for s in first + 1..first + pool_width {
                let v = x.frame(s)[i];
                if v > value {
                    value = v;
                    best = s;
                }
            }
            out.push(value);
            argmax.push(best);
        }
    }
    Ok(Pooled {
        output: FrameMatrix::from_raw(out_frames, d, out),
        argmax,
    })
}

/// Routes each output gradient to the input frame recorded in `argmax`.
pub(crate) fn maxpool_backward<F: Real>(
    dy: &[F],
    argmax: &[usize],
    dim: usize,
    input_frames: usize,
) -> FrameMatrix<F> {
    let mut dx = FrameMatrix::zeros(input_frames, dim);
    let buf = dx.as_mut_slice();
    for (k, (&g, &src)) in dy.iter().zip(argmax).enumerate() {
        buf[src * dim + k % dim] += g;
    }
    dx
}

/// Class probabilities from scores, shifted by the maximum score first so
/// large scores cannot overflow.
pub fn softmax<F: Real>(scores: &[F]) -> Vec<F> {
    if scores.is_empty() {
        return Vec::new();
    }
    let max = scores.iter().copied().fold(F::neg_infinity(), F::max);
    let exps: Vec<F> = scores.iter().map(|&s| (s - max).exp()).collect();
    let total: F = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn column(values: &[f64]) -> FrameMatrix<f64> {
        FrameMatrix::new(values.len(), 1, values.to_vec()).unwrap()
    }

    #[test]
    fn conv_difference_filter() {
        let mut p = ConvLayerParams::zeros(3, 1, 1, 1);
        p.weights = vec![1.0, 0.0, -1.0];
        let y = conv_forward(&column(&[1.0, 2.0, 3.0, 4.0]), &p).unwrap();
        assert_eq!(y.as_slice(), &[-2.0, -2.0]);
    }

    #[test]
    fn conv_identity_kernel() {
        let x = FrameMatrix::new(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let mut p = ConvLayerParams::zeros(1, 1, 2, 2);
        p.weights = vec![1.0, 0.0, 0.0, 1.0];
        assert_eq!(conv_forward(&x, &p).unwrap(), x);
    }

    #[test]
    fn conv_output_length() {
        let p = ConvLayerParams::<f32>::zeros(10, 10, 1, 4);
        assert_eq!(p.output_frames(4320), Some(432));
        assert_eq!(p.output_frames(9), None);
        let err = conv_forward(&FrameMatrix::new(9, 1, vec![0.0f32; 9]).unwrap(), &p);
        assert!(matches!(err, Err(Error::Shape(_))));
    }

    #[test]
    fn conv_shift_two() {
        let mut p = ConvLayerParams::zeros(2, 2, 1, 1);
        p.weights = vec![1.0, 1.0];
        p.bias = vec![0.5];
        let y = conv_forward(&column(&[1.0, 2.0, 3.0, 4.0, 5.0]), &p).unwrap();
        assert_eq!(y.as_slice(), &[3.5, 7.5]);
    }

    #[test]
    fn maxpool_examples() {
        let pooled = maxpool_forward(&column(&[1.0, 5.0, 3.0, 2.0, 2.0, 4.0]), 3).unwrap();
        assert_eq!(pooled.output.as_slice(), &[5.0, 4.0]);
        assert_eq!(pooled.argmax, vec![1, 5]);

        let x = column(&[3.0, 1.0, 2.0]);
        assert_eq!(maxpool_forward(&x, 1).unwrap().output, x);

        let seven = column(&[0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 100.0]);
        let pooled = maxpool_forward(&seven, 3).unwrap();
        assert_eq!(pooled.output.as_slice(), &[2.0, 5.0]);

        assert!(maxpool_forward(&column(&[1.0, 2.0]), 3).is_err());
    }

    #[test]
    fn maxpool_backward_routes_to_winner() {
        let pooled = maxpool_forward(&column(&[1.0, 5.0, 3.0, 2.0, 2.0, 4.0]), 3).unwrap();
        let dx = maxpool_backward(&[10.0, 20.0], &pooled.argmax, 1, 6);
        assert_eq!(dx.as_slice(), &[0.0, 10.0, 0.0, 0.0, 0.0, 20.0]);
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0f64, 0.0]), vec![0.5, 0.5]);
        let p = softmax(&[2.0f64.ln(), 0.0]);
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-15 && (p[1] - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(softmax(&[1000.0f64, 1000.0]), vec![0.5, 0.5]);
    }

    fn matrix(rows: usize, dim: usize) -> impl Strategy<Value = FrameMatrix<f64>> {
        prop::collection::vec(-3.0f64..3.0, rows * dim)
            .prop_map(move |v| FrameMatrix::new(rows, dim, v).unwrap())
    }

    fn conv_params(kw: usize, dw: usize, din: usize, dout: usize) -> impl Strategy<Value = ConvLayerParams<f64>> {
        prop::collection::vec(-1.0f64..1.0, kw * din * dout).prop_map(move |w| {
            let mut p = ConvLayerParams::zeros(kw, dw, din, dout);
            p.weights = w;
            p
        })
    }

    proptest! {
        #[test]
        fn conv_is_linear_without_bias(
            x in matrix(9, 2),
            y in matrix(9, 2),
            p in conv_params(3, 2, 2, 3),
            a in -2.0f64..2.0,
            b in -2.0f64..2.0,
        ) {
            let combo: Vec<f64> = x.as_slice().iter().zip(y.as_slice()).map(|(u, v)| a * u + b * v).collect();
            let combo = FrameMatrix::new(9, 2, combo).unwrap();
            let lhs = conv_forward(&combo, &p).unwrap();
            let cx = conv_forward(&x, &p).unwrap();
            let cy = conv_forward(&y, &p).unwrap();
            for ((l, u), v) in lhs.as_slice().iter().zip(cx.as_slice()).zip(cy.as_slice()) {
                prop_assert!((l - (a * u + b * v)).abs() < 1e-9);
            }
        }

        #[test]
        fn conv_is_shift_equivariant(x in matrix(12, 2), p in conv_params(4, 1, 2, 3)) {
            let shifted = FrameMatrix::new(11, 2, x.as_slice()[2..].to_vec()).unwrap();
            let full = conv_forward(&x, &p).unwrap();
            let part = conv_forward(&shifted, &p).unwrap();
            for j in 0..part.rows() {
                prop_assert_eq!(part.frame(j), full.frame(j + 1));
            }
        }

        #[test]
        fn maxpool_bounds_and_permutation(x in matrix(10, 3), width in 1usize..5) {
            let pooled = maxpool_forward(&x, width).unwrap();
            // reverse the order of frames inside every pool
            let mut permuted = x.as_slice().to_vec();
            for j in 0..x.rows() / width {
                for s in 0..width {
                    let src = j * width + (width - 1 - s);
                    permuted[(j * width + s) * 3..(j * width + s + 1) * 3].copy_from_slice(x.frame(src));
                }
            }
            let permuted = FrameMatrix::new(10, 3, permuted).unwrap();
            prop_assert_eq!(&maxpool_forward(&permuted, width).unwrap().output, &pooled.output);
            for j in 0..pooled.output.rows() {
                for i in 0..3 {
                    let window_max = (j * width..(j + 1) * width)
                        .map(|s| x.frame(s)[i])
                        .fold(f64::NEG_INFINITY, f64::max);
                    prop_assert!(pooled.output.frame(j)[i] <= window_max);
                }
            }
        }

        #[test]
        fn softmax_sums_to_one_and_ignores_offsets(
            scores in prop::collection::vec(-50.0f64..50.0, 1..12),
            c in -100.0f64..100.0,
        ) {
            let p = softmax(&scores);
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(p.iter().all(|&v| v > 0.0));
            let shifted: Vec<f64> = scores.iter().map(|s| s + c).collect();
            for (a, b) in p.iter().zip(softmax(&shifted)) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }
    }
}
