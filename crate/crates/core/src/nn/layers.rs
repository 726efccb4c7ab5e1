//! Layer kernels with hand-written backward passes.
//!
//! Activations are flat `f64` buffers in channel-major order: element `t` of
//! channel `c` in a `C x L` map lives at `c * L + t`.

use rand::Rng;

use crate::error::{Error, Result};

fn expect_len(what: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::Dimension(format!("{what}: length {got}, expected {want}")));
    }
    Ok(())
}

/// Stride-1 cross-correlation with zero padding.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv1d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub padding: usize,
    /// `out x in x kernel`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv1d {
    pub fn zeros(in_channels: usize, out_channels: usize, kernel: usize, padding: usize) -> Conv1d {
        Conv1d {
            in_channels,
            out_channels,
            kernel,
            padding,
            weight: vec![0.0; out_channels * in_channels * kernel],
            bias: vec![0.0; out_channels],
        }
    }

    pub fn output_len(&self, len: usize) -> Result<usize> {
        (len + 2 * self.padding)
            .checked_sub(self.kernel)
            .map(|l| l + 1)
            .ok_or_else(|| Error::Dimension(format!("input length {len} shorter than kernel {}", self.kernel)))
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    #[inline]
    fn w(&self, o: usize, i: usize, k: usize) -> f64 {
        self.weight[(o * self.in_channels + i) * self.kernel + k]
    }

    /// Range of output positions `t` for which `t + k - padding` is a real input index.
    #[inline]
    fn valid_range(&self, k: usize, len: usize, out_len: usize) -> (usize, usize) {
        let lo = self.padding.saturating_sub(k);
        let hi = (len + self.padding).saturating_sub(k).min(out_len);
        (lo, hi.max(lo))
    }

    pub fn forward(&self, input: &[f64], len: usize) -> Result<Vec<f64>> {
        expect_len("conv1d input", input.len(), self.in_channels * len)?;
        let out_len = self.output_len(len)?;
        let mut out = vec![0.0; self.out_channels * out_len];
        for o in 0..self.out_channels {
            let row = &mut out[o * out_len..(o + 1) * out_len];
            row.fill(self.bias[o]);
            for i in 0..self.in_channels {
                let x = &input[i * len..(i + 1) * len];
                for k in 0..self.kernel {
                    let w = self.w(o, i, k);
                    let (lo, hi) = self.valid_range(k, len, out_len);
                    let shift = k as isize - self.padding as isize;
                    let src = &x[(lo as isize + shift) as usize..(hi as isize + shift) as usize];
                    for (y, &xv) in row[lo..hi].iter_mut().zip(src) {
                        *y += w * xv;
                    }
                }
            }
        }
        Ok(out)
    }

    /// Accumulates weight and bias gradients; writes the input gradient when asked.
    pub fn backward(
        &self,
        input: &[f64],
        len: usize,
        grad_out: &[f64],
        grad_weight: &mut [f64],
        grad_bias: &mut [f64],
        mut grad_input: Option<&mut [f64]>,
    ) -> Result<()> {
        expect_len("conv1d input", input.len(), self.in_channels * len)?;
        let out_len = self.output_len(len)?;
        expect_len("conv1d output gradient", grad_out.len(), self.out_channels * out_len)?;
        expect_len("conv1d weight gradient", grad_weight.len(), self.weight.len())?;
        expect_len("conv1d bias gradient", grad_bias.len(), self.bias.len())?;
        if let Some(g) = grad_input.as_deref_mut() {
            expect_len("conv1d input gradient", g.len(), input.len())?;
            g.fill(0.0);
        }
        for o in 0..self.out_channels {
            let g = &grad_out[o * out_len..(o + 1) * out_len];
            grad_bias[o] += g.iter().sum::<f64>();
            for i in 0..self.in_channels {
                let x = &input[i * len..(i + 1) * len];
                for k in 0..self.kernel {
                    let (lo, hi) = self.valid_range(k, len, out_len);
                    let shift = k as isize - self.padding as isize;
                    let s_lo = (lo as isize + shift) as usize;
                    let s_hi = (hi as isize + shift) as usize;
                    let widx = (o * self.in_channels + i) * self.kernel + k;
                    grad_weight[widx] += dot(&g[lo..hi], &x[s_lo..s_hi]);
                    if let Some(gi) = grad_input.as_deref_mut() {
                        let w = self.weight[widx];
                        for (d, &gv) in gi[i * len + s_lo..i * len + s_hi].iter_mut().zip(&g[lo..hi]) {
                            *d += w * gv;
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Max pooling; padded positions behave as -inf and are never selected.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MaxPool1d {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl MaxPool1d {
    pub fn output_len(&self, len: usize) -> Result<usize> {
        if len == 0 {
            return Err(Error::Dimension("max-pool over an empty input".into()));
        }
        if self.stride == 0 || self.kernel == 0 || self.padding >= self.kernel {
            return Err(Error::Dimension(format!(
                "max-pool kernel {} / stride {} / padding {} leaves windows without real entries",
                self.kernel, self.stride, self.padding
            )));
        }
        let padded = len + 2 * self.padding;
        if padded < self.kernel {
            return Err(Error::Dimension(format!("input length {len} shorter than the pooling window")));
        }
        Ok((padded - self.kernel) / self.stride + 1)
    }

    /// Pooled map and, for each output, the flat input index it came from.
    /// Ties go to the earliest index.
    pub fn forward(&self, input: &[f64], channels: usize, len: usize) -> Result<(Vec<f64>, Vec<usize>)> {
        expect_len("max-pool input", input.len(), channels * len)?;
        let out_len = self.output_len(len)?;
        let mut out = Vec::with_capacity(channels * out_len);
        let mut argmax = Vec::with_capacity(channels * out_len);
        for c in 0..channels {
            let base = c * len;
            for j in 0..out_len {
                let start = (j * self.stride) as isize - self.padding as isize;
                let mut best = f64::NEG_INFINITY;
                let mut best_at = usize::MAX;
                for k in 0..self.kernel {
                    let t = start + k as isize;
                    if t < 0 || t >= len as isize {
                        continue;
                    }
                    let v = input[base + t as usize];
                    if best_at == usize::MAX || v > best {
                        best = v;
                        best_at = base + t as usize;
                    }
                }
                if best_at == usize::MAX {
                    return Err(Error::Dimension(format!("pooling window {j} lies entirely in padding")));
                }
                out.push(best);
                argmax.push(best_at);
            }
        }
        Ok((out, argmax))
    }

    /// Routes each output gradient to the input position that won its window.
    pub fn backward(argmax: &[usize], grad_out: &[f64], input_size: usize) -> Result<Vec<f64>> {
        expect_len("max-pool output gradient", grad_out.len(), argmax.len())?;
        let mut grad = vec![0.0; input_size];
        for (&i, &g) in argmax.iter().zip(grad_out) {
            grad[i] += g;
        }
        Ok(grad)
    }
}

/// Fully connected layer, `weight` is `outputs x inputs`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn zeros(inputs: usize, outputs: usize) -> Linear {
        Linear {
            inputs,
            outputs,
            weight: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        expect_len("linear input", input.len(), self.inputs)?;
        Ok(self
            .weight
            .chunks_exact(self.inputs)
            .zip(&self.bias)
            .map(|(row, b)| b + dot(row, input))
            .collect())
    }

    pub fn backward(
        &self,
        input: &[f64],
        grad_out: &[f64],
        grad_weight: &mut [f64],
        grad_bias: &mut [f64],
        grad_input: Option<&mut [f64]>,
    ) -> Result<()> {
        expect_len("linear input", input.len(), self.inputs)?;
        expect_len("linear output gradient", grad_out.len(), self.outputs)?;
        expect_len("linear weight gradient", grad_weight.len(), self.weight.len())?;
        expect_len("linear bias gradient", grad_bias.len(), self.bias.len())?;
        for (b, g) in grad_bias.iter_mut().zip(grad_out) {
            *b += g;
        }
        for (row, &g) in grad_weight.chunks_exact_mut(self.inputs).zip(grad_out) {
            if g != 0.0 {
                for (w, x) in row.iter_mut().zip(input) {
                    *w += g * x;
                }
            }
        }
        if let Some(gi) = grad_input {
            expect_len("linear input gradient", gi.len(), self.inputs)?;
            gi.fill(0.0);
            for (row, &g) in self.weight.chunks_exact(self.inputs).zip(grad_out) {
                if g != 0.0 {
                    for (d, w) in gi.iter_mut().zip(row) {
                        *d += g * w;
                    }
                }
            }
        }
        Ok(())
    }
}

/// Dot product with four interleaved accumulators, so the loop vectorizes.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub fn relu(input: &[f64]) -> Vec<f64> {
    input.iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect()
}

/// Gradient through ReLU; the subgradient at 0 is taken as 0.
pub fn relu_backward(pre_activation: &[f64], grad_out: &[f64]) -> Result<Vec<f64>> {
    expect_len("relu gradient", grad_out.len(), pre_activation.len())?;
    Ok(pre_activation
        .iter()
        .zip(grad_out)
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect())
}

/// Inverted-dropout mask: each entry is 0 with probability `rate`, else `1 / (1 - rate)`.
pub fn dropout_mask<R: Rng + ?Sized>(len: usize, rate: f64, rng: &mut R) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Domain(format!("dropout rate {rate} outside [0, 1)")));
    }
    let keep = 1.0 / (1.0 - rate);
    Ok((0..len)
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect())
}

/// Applies dropout. With `mask = None` (eval mode) this is the identity.
pub fn dropout(input: &[f64], mask: Option<&[f64]>) -> Result<Vec<f64>> {
    match mask {
        None => Ok(input.to_vec()),
        Some(m) => {
            expect_len("dropout mask", m.len(), input.len())?;
            Ok(input.iter().zip(m).map(|(x, k)| x * k).collect())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
        if scale == 0.0 {
            diff
        } else {
            diff / scale
        }
    }

    #[test]
    fn conv_identity_kernel() {
        let mut conv = Conv1d::zeros(1, 1, 3, 1);
        conv.weight = vec![0.0, 1.0, 0.0];
        assert_eq!(conv.forward(&[1.0, 2.0, 3.0], 3).unwrap(), vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn conv_shift_and_padding() {
        let mut conv = Conv1d::zeros(1, 1, 3, 1);
        conv.weight = vec![1.0, 0.0, 0.0];
        // y[t] = x[t - 1], zero at the left edge
        assert_eq!(conv.forward(&[1.0, 2.0, 3.0], 3).unwrap(), vec![0.0, 1.0, 2.0]);
        conv.weight = vec![0.0, 0.0, 1.0];
        assert_eq!(conv.forward(&[1.0, 2.0, 3.0], 3).unwrap(), vec![2.0, 3.0, 0.0]);
    }

    #[test]
    fn conv_zero_input_gives_bias() {
        let mut conv = Conv1d::zeros(2, 3, 3, 1);
        conv.weight.iter_mut().enumerate().for_each(|(i, w)| *w = i as f64);
        conv.bias = vec![0.5, -1.0, 2.0];
        let out = conv.forward(&[0.0; 8], 4).unwrap();
        assert_eq!(out, vec![0.5, 0.5, 0.5, 0.5, -1.0, -1.0, -1.0, -1.0, 2.0, 2.0, 2.0, 2.0]);
    }

    #[test]
    fn conv_shape_errors() {
        let conv = Conv1d::zeros(2, 3, 3, 1);
        assert!(matches!(conv.forward(&[0.0; 7], 4), Err(Error::Dimension(_))));
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let len = 8;
        let mut conv = Conv1d::zeros(2, 3, 3, 1);
        conv.weight = random_vec(&mut rng, conv.weight.len());
        conv.bias = random_vec(&mut rng, 3);
        let x = random_vec(&mut rng, 2 * len);
        let upstream = random_vec(&mut rng, 3 * len);
        let objective = |c: &Conv1d, x: &[f64]| -> f64 {
            c.forward(x, len).unwrap().iter().zip(&upstream).map(|(a, b)| a * b).sum()
        };
        let mut gw = vec![0.0; conv.weight.len()];
        let mut gb = vec![0.0; 3];
        let mut gx = vec![0.0; x.len()];
        conv.backward(&x, len, &upstream, &mut gw, &mut gb, Some(&mut gx)).unwrap();

        let h = 1e-5;
        let fd_x: Vec<f64> = (0..x.len())
            .map(|i| {
                let (mut p, mut m) = (x.clone(), x.clone());
                p[i] += h;
                m[i] -= h;
                (objective(&conv, &p) - objective(&conv, &m)) / (2.0 * h)
            })
            .collect();
        let fd_w: Vec<f64> = (0..conv.weight.len())
            .map(|i| {
                let (mut p, mut m) = (conv.clone(), conv.clone());
                p.weight[i] += h;
                m.weight[i] -= h;
                (objective(&p, &x) - objective(&m, &x)) / (2.0 * h)
            })
            .collect();
        let fd_b: Vec<f64> = (0..3)
            .map(|i| {
                let (mut p, mut m) = (conv.clone(), conv.clone());
                p.bias[i] += h;
                m.bias[i] -= h;
                (objective(&p, &x) - objective(&m, &x)) / (2.0 * h)
            })
            .collect();
        assert!(rel_err(&gx, &fd_x) < 1e-8, "{}", rel_err(&gx, &fd_x));
        assert!(rel_err(&gw, &fd_w) < 1e-8, "{}", rel_err(&gw, &fd_w));
        assert!(rel_err(&gb, &fd_b) < 1e-8, "{}", rel_err(&gb, &fd_b));
    }

    #[test]
    fn pool_lengths_of_the_reference_network() {
        let pool = MaxPool1d {
            kernel: 2,
            stride: 2,
            padding: 1,
        };
        assert_eq!(pool.output_len(1229).unwrap(), 615);
        assert_eq!(pool.output_len(615).unwrap(), 308);
        assert_eq!(pool.output_len(308).unwrap(), 155);
        assert!(pool.output_len(0).is_err());
    }

    #[test]
    fn pool_small_case() {
        let pool = MaxPool1d {
            kernel: 2,
            stride: 2,
            padding: 1,
        };
        let (out, arg) = pool.forward(&[1.0, 3.0, 2.0], 1, 3).unwrap();
        assert_eq!(out, vec![1.0, 3.0]);
        assert_eq!(arg, vec![0, 1]);
        // negative entries must win over padding
        let (out, _) = pool.forward(&[-5.0, -1.0, -2.0, -7.0], 1, 4).unwrap();
        assert_eq!(out, vec![-5.0, -1.0, -7.0]);
    }

    #[test]
    fn pool_ties_route_to_first() {
        let pool = MaxPool1d {
            kernel: 2,
            stride: 2,
            padding: 1,
        };
        let input = [4.0; 6];
        let (_, arg) = pool.forward(&input, 1, 6).unwrap();
        assert_eq!(arg, vec![0, 1, 3, 5]);
        let grad = MaxPool1d::backward(&arg, &[1.0, 1.0, 1.0, 1.0], 6).unwrap();
        assert_eq!(grad, vec![1.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn linear_identity() {
        let mut lin = Linear::zeros(3, 3);
        for i in 0..3 {
            lin.weight[i * 3 + i] = 1.0;
        }
        assert_eq!(lin.forward(&[1.0, -2.0, 0.5]).unwrap(), vec![1.0, -2.0, 0.5]);
        assert!(lin.forward(&[1.0]).is_err());
    }

    #[test]
    fn linear_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut lin = Linear::zeros(5, 4);
        lin.weight = random_vec(&mut rng, 20);
        lin.bias = random_vec(&mut rng, 4);
        let x = random_vec(&mut rng, 5);
        let up = random_vec(&mut rng, 4);
        let f = |l: &Linear, x: &[f64]| -> f64 { l.forward(x).unwrap().iter().zip(&up).map(|(a, b)| a * b).sum() };
        let mut gw = vec![0.0; 20];
        let mut gb = vec![0.0; 4];
        let mut gx = vec![0.0; 5];
        lin.backward(&x, &up, &mut gw, &mut gb, Some(&mut gx)).unwrap();
        let h = 1e-5;
        for i in 0..5 {
            let (mut p, mut m) = (x.clone(), x.clone());
            p[i] += h;
            m[i] -= h;
            let fd = (f(&lin, &p) - f(&lin, &m)) / (2.0 * h);
            assert!((fd - gx[i]).abs() < 1e-9);
        }
        for i in 0..20 {
            let (mut p, mut m) = (lin.clone(), lin.clone());
            p.weight[i] += h;
            m.weight[i] -= h;
            let fd = (f(&p, &x) - f(&m, &x)) / (2.0 * h);
            assert!((fd - gw[i]).abs() < 1e-9);
        }
        assert_eq!(gb, up);
    }

    #[test]
    fn relu_and_subgradient() {
        assert_eq!(relu(&[-1.0, 0.0, 2.0]), vec![0.0, 0.0, 2.0]);
        assert_eq!(relu_backward(&[-1.0, 0.0, 2.0], &[5.0, 5.0, 5.0]).unwrap(), vec![0.0, 0.0, 5.0]);
    }

    #[test]
    fn dropout_modes() {
        let x = vec![1.0, 2.0, 3.0];
        assert_eq!(dropout(&x, None).unwrap(), x);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let n = 1_000_000;
        let mask = dropout_mask(n, 0.5, &mut rng).unwrap();
        let out = dropout(&vec![1.0; n], Some(&mask)).unwrap();
        let mean = out.iter().sum::<f64>() / n as f64;
        assert!((mean - 1.0).abs() < 0.005, "mean {mean}");
        assert!(out.iter().all(|&v| v == 0.0 || v == 2.0));
        assert!(dropout_mask(3, 1.0, &mut rng).is_err());
    }
}
