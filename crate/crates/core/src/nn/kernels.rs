//! Batched forward/backward kernels for the fixed layer vocabulary.
//!
//! Activations are stored batch-major in height-width-channel order, which
//! makes the output of a convolution stack bit-for-bit the `hw × d` layout
//! of a feature grid and turns `flatten` into a relabeling.

use crate::image::Geometry;

use super::{Layer, LayerSpec};

#[derive(Debug, Clone)]
pub(crate) struct Batch {
    pub n: usize,
    pub geometry: Geometry,
    pub data: Vec<f64>,
}

impl Batch {
    pub fn new(n: usize, geometry: Geometry, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), n * geometry.len());
        Batch { n, geometry, data }
    }
}

pub(crate) enum Cache {
    None,
    Columns(Vec<f64>),
    Argmax(Vec<usize>),
}

#[derive(Debug, Clone, Default)]
pub(crate) struct ParamGrad {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Activations and caches retained for a backward pass.
pub(crate) struct Trace {
    pub inputs: Vec<Batch>,
    pub caches: Vec<Cache>,
    pub output: Batch,
}

/// Row-major `C = op(A) · op(B) + beta · C` with `op(A)` of shape `m × k`
/// and `op(B)` of shape `k × n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index the strides can reach.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn forward(layers: &[Layer], input: Batch, keep: bool) -> (Batch, Option<Trace>) {
    let mut inputs = Vec::new();
    let mut caches = Vec::new();
    let mut current = input;
    for layer in layers {
        let (out, cache) = forward_layer(layer, &current, keep);
        if keep {
            inputs.push(current);
            caches.push(cache);
        }
        current = out;
    }
    if keep {
        let output = current.clone();
        (
            current,
            Some(Trace {
                inputs,
                caches,
                output,
            }),
        )
    } else {
        (current, None)
    }
}

/// Propagates `grad_out` back through `layers`. Parameter gradients are
/// written to `params` when given; the input gradient is computed when
/// `need_input` is set.
pub(crate) fn backward(
    layers: &[Layer],
    trace: &Trace,
    grad_out: Vec<f64>,
    mut params: Option<&mut [ParamGrad]>,
    need_input: bool,
) -> Vec<f64> {
    let mut grad = grad_out;
    for idx in (0..layers.len()).rev() {
        let input = &trace.inputs[idx];
        let output = if idx + 1 < layers.len() {
            &trace.inputs[idx + 1]
        } else {
            &trace.output
        };
        let want_input = idx > 0 || need_input;
        let pg = params.as_deref_mut().map(|p| &mut p[idx]);
        grad = backward_layer(
            &layers[idx],
            input,
            output,
            &trace.caches[idx],
            &grad,
            pg,
            want_input,
        );
    }
    grad
}

fn forward_layer(layer: &Layer, input: &Batch, keep: bool) -> (Batch, Cache) {
    let n = input.n;
    let out_geom = layer.output;
    match layer.spec {
        LayerSpec::Conv2d {
            out_channels,
            kernel,
            stride,
            padding,
        } => {
            let cols = im2col(input, out_geom, kernel, stride, padding);
            let rows = n * out_geom.height * out_geom.width;
            let kk = kernel * kernel * input.geometry.channels;
            let mut out = vec![0.0; rows * out_channels];
            for r in 0..rows {
                out[r * out_channels..(r + 1) * out_channels].copy_from_slice(&layer.bias);
            }
            gemm(
                rows,
                kk,
                out_channels,
                &cols,
                false,
                &layer.weights,
                false,
                1.0,
                &mut out,
            );
            let cache = if keep { Cache::Columns(cols) } else { Cache::None };
            (Batch::new(n, out_geom, out), cache)
        }
        LayerSpec::Relu => {
            let out = input.data.iter().map(|&v| v.max(0.0)).collect();
            (Batch::new(n, out_geom, out), Cache::None)
        }
        LayerSpec::MaxPool2d { window, stride } => {
            let (out, argmax) = maxpool(input, out_geom, window, stride);
            let cache = if keep { Cache::Argmax(argmax) } else { Cache::None };
            (Batch::new(n, out_geom, out), cache)
        }
        LayerSpec::Flatten => (Batch::new(n, out_geom, input.data.clone()), Cache::None),
        LayerSpec::Dense { outputs } => {
            let inputs = input.geometry.len();
            let mut out = vec![0.0; n * outputs];
            for r in 0..n {
                out[r * outputs..(r + 1) * outputs].copy_from_slice(&layer.bias);
            }
            gemm(
                n,
                inputs,
                outputs,
                &input.data,
                false,
                &layer.weights,
                false,
                1.0,
                &mut out,
            );
            (Batch::new(n, out_geom, out), Cache::None)
        }
        LayerSpec::LogSoftmax => {
            let width = input.geometry.len();
            let mut out = input.data.clone();
            for row in out.chunks_mut(width) {
                log_softmax_in_place(row);
            }
            (Batch::new(n, out_geom, out), Cache::None)
        }
    }
}

fn backward_layer(
    layer: &Layer,
    input: &Batch,
    output: &Batch,
    cache: &Cache,
    grad_out: &[f64],
    params: Option<&mut ParamGrad>,
    want_input: bool,
) -> Vec<f64> {
    let n = input.n;
    match layer.spec {
        LayerSpec::Conv2d {
            out_channels,
            kernel,
            stride,
            padding,
        } => {
            let Cache::Columns(cols) = cache else {
                unreachable!("conv backward without columns")
            };
            let rows = n * layer.output.height * layer.output.width;
            let kk = kernel * kernel * input.geometry.channels;
            if let Some(pg) = params {
                pg.weights.resize(kk * out_channels, 0.0);
                gemm(
                    kk,
                    rows,
                    out_channels,
                    cols,
                    true,
                    grad_out,
                    false,
                    0.0,
                    &mut pg.weights,
                );
                pg.bias = column_sums(grad_out, out_channels);
            }
            if !want_input {
                return Vec::new();
            }
            let mut dcols = vec![0.0; rows * kk];
            gemm(
                rows,
                out_channels,
                kk,
                grad_out,
                false,
                &layer.weights,
                true,
                0.0,
                &mut dcols,
            );
            col2im(&dcols, input, layer.output, kernel, stride, padding)
        }
        LayerSpec::Relu => grad_out
            .iter()
            .zip(&input.data)
            .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
            .collect(),
        LayerSpec::MaxPool2d { .. } => {
            let Cache::Argmax(argmax) = cache else {
                unreachable!("pool backward without argmax")
            };
            let mut grad = vec![0.0; input.data.len()];
            for (&src, &g) in argmax.iter().zip(grad_out) {
                grad[src] += g;
            }
            grad
        }
        LayerSpec::Flatten => grad_out.to_vec(),
        LayerSpec::Dense { outputs } => {
            let inputs = input.geometry.len();
            if let Some(pg) = params {
                pg.weights.resize(inputs * outputs, 0.0);
                gemm(
                    inputs,
                    n,
                    outputs,
                    &input.data,
                    true,
                    grad_out,
                    false,
                    0.0,
                    &mut pg.weights,
                );
                pg.bias = column_sums(grad_out, outputs);
            }
            if !want_input {
                return Vec::new();
            }
            let mut grad = vec![0.0; n * inputs];
            gemm(
                n,
                outputs,
                inputs,
                grad_out,
                false,
                &layer.weights,
                true,
                0.0,
                &mut grad,
            );
            grad
        }
        LayerSpec::LogSoftmax => {
            let width = input.geometry.len();
            let mut grad = vec![0.0; grad_out.len()];
            for ((g_in, g_out), out) in grad
                .chunks_mut(width)
                .zip(grad_out.chunks(width))
                .zip(output.data.chunks(width))
            {
                let total: f64 = g_out.iter().sum();
                for ((gi, &go), &o) in g_in.iter_mut().zip(g_out).zip(out) {
                    *gi = go - o.exp() * total;
                }
            }
            grad
        }
    }
}

pub(crate) fn log_softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
    let log_norm = max + sum.ln();
    for v in row.iter_mut() {
        *v -= log_norm;
    }
}

fn column_sums(m: &[f64], cols: usize) -> Vec<f64> {
    let mut sums = vec![0.0; cols];
    for row in m.chunks(cols) {
        for (s, &v) in sums.iter_mut().zip(row) {
            *s += v;
        }
    }
    sums
}

fn im2col(input: &Batch, out: Geometry, kernel: usize, stride: usize, padding: usize) -> Vec<f64> {
    let g = input.geometry;
    let c = g.channels;
    let kk = kernel * kernel * c;
    let rows = input.n * out.height * out.width;
    let mut cols = vec![0.0; rows * kk];
    let mut r = 0;
    for b in 0..input.n {
        let image = &input.data[b * g.len()..(b + 1) * g.len()];
        for oy in 0..out.height {
            for ox in 0..out.width {
                let row = &mut cols[r * kk..(r + 1) * kk];
                for ky in 0..kernel {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    for kx in 0..kernel {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if ix < 0 || ix >= g.width as isize {
                            continue;
                        }
                        let src = (iy as usize * g.width + ix as usize) * c;
                        let dst = (ky * kernel + kx) * c;
                        row[dst..dst + c].copy_from_slice(&image[src..src + c]);
                    }
                }
                r += 1;
            }
        }
    }
    cols
}

fn col2im(
    dcols: &[f64],
    input: &Batch,
    out: Geometry,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Vec<f64> {
    let g = input.geometry;
    let c = g.channels;
    let kk = kernel * kernel * c;
    let mut grad = vec![0.0; input.data.len()];
    let mut r = 0;
    for b in 0..input.n {
        let image = &mut grad[b * g.len()..(b + 1) * g.len()];
        for oy in 0..out.height {
            for ox in 0..out.width {
                let row = &dcols[r * kk..(r + 1) * kk];
                for ky in 0..kernel {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    for kx in 0..kernel {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if ix < 0 || ix >= g.width as isize {
                            continue;
                        }
                        let dst = (iy as usize * g.width + ix as usize) * c;
                        let src = (ky * kernel + kx) * c;
                        for (d, &s) in image[dst..dst + c].iter_mut().zip(&row[src..src + c]) {
                            *d += s;
                        }
                    }
                }
                r += 1;
            }
        }
    }
    grad
}

/// Max pooling; ties go to the first maximum in scan order.
fn maxpool(input: &Batch, out: Geometry, window: usize, stride: usize) -> (Vec<f64>, Vec<usize>) {
    let g = input.geometry;
    let c = g.channels;
    let total = input.n * out.len();
    let mut values = Vec::with_capacity(total);
    let mut argmax = Vec::with_capacity(total);
    for b in 0..input.n {
        let base = b * g.len();
        for oy in 0..out.height {
            for ox in 0..out.width {
                for ch in 0..c {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_at = usize::MAX;
                    for ky in 0..window {
                        for kx in 0..window {
                            let iy = oy * stride + ky;
                            let ix = ox * stride + kx;
                            let at = base + (iy * g.width + ix) * c + ch;
                            let v = input.data[at];
                            if best_at == usize::MAX || v > best {
                                best = v;
                                best_at = at;
                            }
                        }
                    }
                    values.push(best);
                    argmax.push(best_at);
                }
            }
        }
    }
    (values, argmax)
}
