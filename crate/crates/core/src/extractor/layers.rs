use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Activation tensor in channel-major (`CHW`) order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: Shape) -> Self {
        Tensor {
            c: shape.c,
            h: shape.h,
            w: shape.w,
            data: vec![0.0; shape.len()],
        }
    }

    pub fn shape(&self) -> Shape {
        Shape {
            c: self.c,
            h: self.h,
            w: self.w,
        }
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shape {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn len(&self) -> usize {
        self.c * self.h * self.w
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// `[out][in][ky][kx]`
    pub weights: Vec<f64>,
}

impl Conv2d {
    fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.padding - self.kernel) / self.stride + 1,
            (w + 2 * self.padding - self.kernel) / self.stride + 1,
        )
    }

    /// Output positions `o` with `0 <= o * stride + tap - padding < len`.
    fn valid_range(&self, tap: usize, len: usize, out_len: usize) -> (usize, usize) {
        let (s, p) = (self.stride, self.padding);
        let lo = if tap >= p { 0 } else { (p - tap).div_ceil(s) };
        let hi = if len + p > tap { (len + p - tap - 1) / s + 1 } else { 0 };
        (lo.min(out_len), hi.min(out_len).max(lo.min(out_len)))
    }

    /// Patch matrix, `(in * k * k) x (oh * ow)` row-major, zero where padded.
    fn im2col(&self, x: &Tensor, oh: usize, ow: usize) -> Vec<f64> {
        let (k, s, p) = (self.kernel, self.stride, self.padding);
        let n = oh * ow;
        let mut cols = vec![0.0; self.in_channels * k * k * n];
        for i in 0..self.in_channels {
            let plane = &x.data[i * x.h * x.w..(i + 1) * x.h * x.w];
            for ky in 0..k {
                let (y0, y1) = self.valid_range(ky, x.h, oh);
                for kx in 0..k {
                    let (x0, x1) = self.valid_range(kx, x.w, ow);
                    let dst = &mut cols[((i * k + ky) * k + kx) * n..][..n];
                    for oy in y0..y1 {
                        let row = &plane[(oy * s + ky - p) * x.w..][..x.w];
                        for ox in x0..x1 {
                            dst[oy * ow + ox] = row[ox * s + kx - p];
                        }
                    }
                }
            }
        }
        cols
    }

    fn forward(&self, x: &Tensor) -> Tensor {
        let (oh, ow) = self.out_hw(x.h, x.w);
        let mut out = Tensor::zeros(Shape {
            c: self.out_channels,
            h: oh,
            w: ow,
        });
        let cols = self.im2col(x, oh, ow);
        let depth = self.in_channels * self.kernel * self.kernel;
        let n = oh * ow;
        // out (O x n) = W (O x depth) * cols (depth x n)
        unsafe {
            matrixmultiply::dgemm(
                self.out_channels,
                depth,
                n,
                1.0,
                self.weights.as_ptr(),
                depth as isize,
                1,
                cols.as_ptr(),
                n as isize,
                1,
                0.0,
                out.data.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        out
    }

    /// Transposed application: gradient w.r.t. the input.
    fn backward(&self, input_shape: Shape, grad_out: &Tensor) -> Tensor {
        let mut grad_in = Tensor::zeros(input_shape);
        let (h, w) = (input_shape.h, input_shape.w);
        let (oh, ow) = (grad_out.h, grad_out.w);
        let (k, s, p) = (self.kernel, self.stride, self.padding);
        let depth = self.in_channels * k * k;
        let n = oh * ow;
        // grad_cols (depth x n) = W^T (depth x O) * grad_out (O x n)
        let mut cols = vec![0.0; depth * n];
        unsafe {
            matrixmultiply::dgemm(
                depth,
                self.out_channels,
                n,
                1.0,
                self.weights.as_ptr(),
                1,
                depth as isize,
                grad_out.data.as_ptr(),
                n as isize,
                1,
                0.0,
                cols.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        for i in 0..self.in_channels {
            let plane = &mut grad_in.data[i * h * w..(i + 1) * h * w];
            for ky in 0..k {
                let (y0, y1) = self.valid_range(ky, h, oh);
                for kx in 0..k {
                    let (x0, x1) = self.valid_range(kx, w, ow);
                    let src = &cols[((i * k + ky) * k + kx) * n..][..n];
                    for oy in y0..y1 {
                        let row = &mut plane[(oy * s + ky - p) * w..][..w];
                        for ox in x0..x1 {
                            row[ox * s + kx - p] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
        grad_in
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub rows: usize,
    pub cols: usize,
    /// Row-major `rows x cols`; applied to the flattened `CHW` input.
    pub weights: Vec<f64>,
}

impl Dense {
    fn forward(&self, x: &Tensor) -> Tensor {
        let data = self
            .weights
            .chunks_exact(self.cols)
            .map(|row| row.iter().zip(&x.data).map(|(a, b)| a * b).sum())
            .collect();
        Tensor {
            c: self.rows,
            h: 1,
            w: 1,
            data,
        }
    }

    fn backward(&self, input_shape: Shape, grad_out: &Tensor) -> Tensor {
        let mut grad_in = Tensor::zeros(input_shape);
        for (row, &g) in self.weights.chunks_exact(self.cols).zip(&grad_out.data) {
            if g == 0.0 {
                continue;
            }
            for (gi, w) in grad_in.data.iter_mut().zip(row) {
                *gi += w * g;
            }
        }
        grad_in
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Layer {
    Scale(f64),
    Conv(Conv2d),
    LeakyRelu(f64),
    GlobalAvgPool,
    Dense(Dense),
}

impl Layer {
    pub fn output_shape(&self, input: Shape) -> Shape {
        match self {
            Layer::Scale(_) | Layer::LeakyRelu(_) => input,
            Layer::Conv(conv) => {
                let (h, w) = conv.out_hw(input.h, input.w);
                Shape {
                    c: conv.out_channels,
                    h,
                    w,
                }
            }
            Layer::GlobalAvgPool => Shape {
                c: input.c,
                h: 1,
                w: 1,
            },
            Layer::Dense(dense) => Shape {
                c: dense.rows,
                h: 1,
                w: 1,
            },
        }
    }

    pub fn accepts(&self, input: Shape) -> bool {
        match self {
            Layer::Conv(conv) => {
                conv.in_channels == input.c
                    && input.h + 2 * conv.padding >= conv.kernel
                    && input.w + 2 * conv.padding >= conv.kernel
                    && conv.weights.len()
                        == conv.out_channels * conv.in_channels * conv.kernel * conv.kernel
            }
            Layer::Dense(dense) => {
                dense.cols == input.len() && dense.weights.len() == dense.rows * dense.cols
            }
            _ => true,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        match self {
            Layer::Scale(s) => Tensor {
                data: x.data.iter().map(|v| v * s).collect(),
                ..*x
            },
            Layer::Conv(conv) => conv.forward(x),
            Layer::LeakyRelu(slope) => Tensor {
                data: x
                    .data
                    .iter()
                    .map(|&v| if v > 0.0 { v } else { slope * v })
                    .collect(),
                ..*x
            },
            Layer::GlobalAvgPool => {
                let plane = x.h * x.w;
                Tensor {
                    c: x.c,
                    h: 1,
                    w: 1,
                    data: x
                        .data
                        .chunks_exact(plane)
                        .map(|p| p.iter().sum::<f64>() / plane as f64)
                        .collect(),
                }
            }
            Layer::Dense(dense) => dense.forward(x),
        }
    }

    /// Vector-Jacobian product; `input` is the tensor this layer consumed.
    pub fn backward(&self, input: &Tensor, grad_out: &Tensor) -> Tensor {
        match self {
            Layer::Scale(s) => Tensor {
                data: grad_out.data.iter().map(|g| g * s).collect(),
                ..*input
            },
            Layer::Conv(conv) => conv.backward(input.shape(), grad_out),
            Layer::LeakyRelu(slope) => Tensor {
                data: grad_out
                    .data
                    .iter()
                    .zip(&input.data)
                    .map(|(&g, &v)| if v > 0.0 { g } else { slope * g })
                    .collect(),
                ..*input
            },
            Layer::GlobalAvgPool => {
                let plane = input.h * input.w;
                let mut grad_in = Tensor::zeros(input.shape());
                for (chunk, &g) in grad_in.data.chunks_exact_mut(plane).zip(&grad_out.data) {
                    chunk.fill(g / plane as f64);
                }
                grad_in
            }
            Layer::Dense(dense) => dense.backward(input.shape(), grad_out),
        }
    }

    pub fn has_weights(&self) -> bool {
        matches!(self, Layer::Conv(_) | Layer::Dense(_))
    }

    pub fn weights_mut(&mut self) -> Option<&mut Vec<f64>> {
        match self {
            Layer::Conv(conv) => Some(&mut conv.weights),
            Layer::Dense(dense) => Some(&mut dense.weights),
            _ => None,
        }
    }

    pub fn weights(&self) -> Option<&[f64]> {
        match self {
            Layer::Conv(conv) => Some(&conv.weights),
            Layer::Dense(dense) => Some(&dense.weights),
            _ => None,
        }
    }

    /// Upper bound on the Lipschitz constant of a weight-free layer.
    pub fn fixed_lipschitz(&self, input: Shape) -> Option<f64> {
        match self {
            Layer::Scale(s) => Some(s.abs()),
            Layer::LeakyRelu(slope) => Some(slope.abs().max(1.0)),
            Layer::GlobalAvgPool => Some(1.0 / ((input.h * input.w) as f64).sqrt()),
            _ => None,
        }
    }

    /// Largest singular value of a weighted (linear) layer on the given input
    /// shape, by power iteration on `A^T A`.
    pub fn operator_norm(&self, input: Shape, rounds: usize, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v = Tensor::zeros(input);
        for x in v.data.iter_mut() {
            *x = StandardNormal.sample(&mut rng);
        }
        let n = v.norm();
        v.data.iter_mut().for_each(|x| *x /= n);
        for _ in 0..rounds {
            let u = self.forward(&v);
            let mut next = self.backward(&v, &u);
            let n = next.norm();
            if n == 0.0 {
                return 0.0;
            }
            next.data.iter_mut().for_each(|x| *x /= n);
            v = next;
        }
        self.forward(&v).norm()
    }
}
