//! Kernels for the individual layer kinds.
//!
//! Every kernel works on flat `f64` slices. Sequences are stored channel-major:
//! element `(c, t)` of a `[channels, len]` tensor lives at `c * len + t`.
//! Backward kernels accumulate (`+=`) into their gradient buffers so that a
//! node feeding several consumers receives the sum of their contributions.

use serde::{Deserialize, Serialize};

/// Zero padding applied along the time axis of a 1D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    /// No padding; output length `(len - kernel) / stride + 1`.
    Valid,
    /// Pad so that the output length is `ceil(len / stride)`.
    Same,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub in_channels: usize,
    pub len: usize,
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad_left: usize,
    pub out_len: usize,
}

impl ConvGeometry {
    pub fn new(
        in_channels: usize,
        len: usize,
        filters: usize,
        kernel: usize,
        stride: usize,
        padding: Padding,
    ) -> Option<Self> {
        let (pad_left, out_len) = match padding {
            Padding::Valid => {
                if len < kernel {
                    return None;
                }
                (0, (len - kernel) / stride + 1)
            }
            Padding::Same => {
                let out_len = len.div_ceil(stride);
                let needed = ((out_len - 1) * stride + kernel).saturating_sub(len);
                (needed / 2, out_len)
            }
        };
        Some(Self {
            in_channels,
            len,
            filters,
            kernel,
            stride,
            pad_left,
            out_len,
        })
    }

    pub fn weight_len(&self) -> usize {
        self.filters * self.in_channels * self.kernel
    }

    /// Input time index read by output position `t` and tap `k`, if inside the signal.
    #[inline]
    fn source(&self, t: usize, k: usize) -> Option<usize> {
        let pos = (t * self.stride + k) as isize - self.pad_left as isize;
        (pos >= 0 && (pos as usize) < self.len).then_some(pos as usize)
    }
}

/// Dot product with four independent accumulators.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0; 4];
    let (ac, bc) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ac.remainder().iter().zip(bc.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ac.zip(bc) {
        for i in 0..4 {
            acc[i] += x[i] * y[i];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub(crate) fn dense_forward(w: &[f64], b: &[f64], x: &[f64], y: &mut [f64]) {
    let n_in = x.len();
    for (o, out) in y.iter_mut().enumerate() {
        *out = b[o] + dot(&w[o * n_in..(o + 1) * n_in], x);
    }
}

pub(crate) fn dense_backward(
    w: &[f64],
    x: &[f64],
    dy: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
    dx: &mut [f64],
) {
    let n_in = x.len();
    for (o, &g) in dy.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        db[o] += g;
        let row = &w[o * n_in..(o + 1) * n_in];
        let drow = &mut dw[o * n_in..(o + 1) * n_in];
        for i in 0..n_in {
            drow[i] += g * x[i];
            dx[i] += g * row[i];
        }
    }
}

pub(crate) fn conv1d_forward(geo: &ConvGeometry, w: &[f64], b: &[f64], x: &[f64], y: &mut [f64]) {
    let k_len = geo.kernel;
    for f in 0..geo.filters {
        for t in 0..geo.out_len {
            let mut acc = b[f];
            for c in 0..geo.in_channels {
                let wrow = &w[(f * geo.in_channels + c) * k_len..][..k_len];
                let xrow = &x[c * geo.len..][..geo.len];
                for (k, wk) in wrow.iter().enumerate() {
                    if let Some(s) = geo.source(t, k) {
                        acc += wk * xrow[s];
                    }
                }
            }
            y[f * geo.out_len + t] = acc;
        }
    }
}

pub(crate) fn conv1d_backward(
    geo: &ConvGeometry,
    w: &[f64],
    x: &[f64],
    dy: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
    dx: &mut [f64],
) {
    let k_len = geo.kernel;
    for f in 0..geo.filters {
        for t in 0..geo.out_len {
            let g = dy[f * geo.out_len + t];
            if g == 0.0 {
                continue;
            }
            db[f] += g;
            for c in 0..geo.in_channels {
                let base = (f * geo.in_channels + c) * k_len;
                for k in 0..k_len {
                    if let Some(s) = geo.source(t, k) {
                        dw[base + k] += g * x[c * geo.len + s];
                        dx[c * geo.len + s] += g * w[base + k];
                    }
                }
            }
        }
    }
}

pub(crate) fn relu_forward(x: &[f64], y: &mut [f64]) {
    for (o, &v) in y.iter_mut().zip(x) {
        *o = v.max(0.0);
    }
}

pub(crate) fn relu_backward(x: &[f64], dy: &[f64], dx: &mut [f64]) {
    for i in 0..x.len() {
        if x[i] > 0.0 {
            dx[i] += dy[i];
        }
    }
}

pub(crate) fn softmax_forward(x: &[f64], y: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in y.iter_mut().zip(x) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in y.iter_mut() {
        *o /= sum;
    }
}

pub(crate) fn softmax_backward(y: &[f64], dy: &[f64], dx: &mut [f64]) {
    let dot: f64 = y.iter().zip(dy).map(|(p, g)| p * g).sum();
    for i in 0..y.len() {
        dx[i] += y[i] * (dy[i] - dot);
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Parameter layout of a GRU layer inside its flat parameter slice:
/// `W [3H x I]` (update, reset, candidate rows), then `U [3H x H]`, then `b [3H]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GruShape {
    pub input_size: usize,
    pub hidden: usize,
}

impl GruShape {
    pub fn param_len(&self) -> usize {
        let h = self.hidden;
        3 * h * self.input_size + 3 * h * h + 3 * h
    }

    fn split<'a>(&self, p: &'a [f64]) -> (&'a [f64], &'a [f64], &'a [f64]) {
        let h = self.hidden;
        let (w, rest) = p.split_at(3 * h * self.input_size);
        let (u, b) = rest.split_at(3 * h * h);
        (w, u, b)
    }

    fn split_mut<'a>(&self, p: &'a mut [f64]) -> (&'a mut [f64], &'a mut [f64], &'a mut [f64]) {
        let h = self.hidden;
        let (w, rest) = p.split_at_mut(3 * h * self.input_size);
        let (u, b) = rest.split_at_mut(3 * h * h);
        (w, u, b)
    }
}

/// Per-step intermediates kept for backpropagation through time.
#[derive(Debug, Clone, Default)]
pub(crate) struct GruCache {
    /// Hidden state entering each step, `steps x H`.
    h_prev: Vec<f64>,
    z: Vec<f64>,
    r: Vec<f64>,
    n: Vec<f64>,
}

/// One GRU step:
///
/// ```text
/// z  = sigmoid(Wz x + Uz h + bz)
/// r  = sigmoid(Wr x + Ur h + br)
/// n  = tanh(Wn x + Un (r * h) + bn)
/// h' = (1 - z) * h + z * n
/// ```
///
/// Returns `h'` and writes the gate activations into the given buffers.
fn gru_cell(
    shape: &GruShape,
    params: &[f64],
    x: &[f64],
    h: &[f64],
    z: &mut [f64],
    r: &mut [f64],
    n: &mut [f64],
    h_next: &mut [f64],
) {
    let (hs, is) = (shape.hidden, shape.input_size);
    let (w, u, b) = shape.split(params);
    let wx = |row: usize| -> f64 { dot(&w[row * is..(row + 1) * is], x) };
    let uv = |row: usize, v: &[f64]| -> f64 { dot(&u[row * hs..(row + 1) * hs], v) };
    for j in 0..hs {
        z[j] = sigmoid(wx(j) + uv(j, h) + b[j]);
        r[j] = sigmoid(wx(hs + j) + uv(hs + j, h) + b[hs + j]);
    }
    let rh: Vec<f64> = r.iter().zip(h).map(|(a, c)| a * c).collect();
    for j in 0..hs {
        n[j] = (wx(2 * hs + j) + uv(2 * hs + j, &rh) + b[2 * hs + j]).tanh();
        h_next[j] = (1.0 - z[j]) * h[j] + z[j] * n[j];
    }
}

/// Evaluates a single GRU step from hidden state `h` on input `x`.
pub fn gru_step(shape: &GruShape, params: &[f64], x: &[f64], h: &[f64]) -> Vec<f64> {
    let hs = shape.hidden;
    let (mut z, mut r, mut n, mut out) = (vec![0.0; hs], vec![0.0; hs], vec![0.0; hs], vec![0.0; hs]);
    gru_cell(shape, params, x, h, &mut z, &mut r, &mut n, &mut out);
    out
}

/// Runs the GRU over a `[input_size, steps]` sequence from a zero state and
/// returns the final hidden state.
pub(crate) fn gru_forward(
    shape: &GruShape,
    params: &[f64],
    seq: &[f64],
    steps: usize,
    y: &mut [f64],
) -> GruCache {
    let (hs, is) = (shape.hidden, shape.input_size);
    let mut cache = GruCache {
        h_prev: vec![0.0; steps * hs],
        z: vec![0.0; steps * hs],
        r: vec![0.0; steps * hs],
        n: vec![0.0; steps * hs],
    };
    let mut h = vec![0.0; hs];
    let mut x = vec![0.0; is];
    let mut next = vec![0.0; hs];
    for t in 0..steps {
        for c in 0..is {
            x[c] = seq[c * steps + t];
        }
        cache.h_prev[t * hs..(t + 1) * hs].copy_from_slice(&h);
        gru_cell(
            shape,
            params,
            &x,
            &h,
            &mut cache.z[t * hs..(t + 1) * hs],
            &mut cache.r[t * hs..(t + 1) * hs],
            &mut cache.n[t * hs..(t + 1) * hs],
            &mut next,
        );
        std::mem::swap(&mut h, &mut next);
    }
    y.copy_from_slice(&h);
    cache
}

pub(crate) fn gru_backward(
    shape: &GruShape,
    params: &[f64],
    seq: &[f64],
    steps: usize,
    cache: &GruCache,
    dy: &[f64],
    dparams: &mut [f64],
    dseq: &mut [f64],
) {
    let (hs, is) = (shape.hidden, shape.input_size);
    let (w, u, _) = shape.split(params);
    let (dw, du, db) = shape.split_mut(dparams);

    let mut dh = dy.to_vec();
    let mut x = vec![0.0; is];
    let mut dx = vec![0.0; is];
    let mut daz = vec![0.0; hs];
    let mut dar = vec![0.0; hs];
    let mut dan = vec![0.0; hs];
    let mut rh = vec![0.0; hs];
    let mut dh_prev = vec![0.0; hs];

    for t in (0..steps).rev() {
        let h = &cache.h_prev[t * hs..(t + 1) * hs];
        let z = &cache.z[t * hs..(t + 1) * hs];
        let r = &cache.r[t * hs..(t + 1) * hs];
        let n = &cache.n[t * hs..(t + 1) * hs];
        for c in 0..is {
            x[c] = seq[c * steps + t];
        }
        dh_prev.fill(0.0);
        for j in 0..hs {
            let dz = dh[j] * (n[j] - h[j]);
            let dn = dh[j] * z[j];
            dh_prev[j] += dh[j] * (1.0 - z[j]);
            daz[j] = dz * z[j] * (1.0 - z[j]);
            dan[j] = dn * (1.0 - n[j] * n[j]);
            rh[j] = r[j] * h[j];
        }
        // Candidate path: d(r*h) = Un^T dan.
        let mut drh = vec![0.0; hs];
        for j in 0..hs {
            let row = 2 * hs + j;
            let g = dan[j];
            if g == 0.0 {
                continue;
            }
            let urow = &u[row * hs..(row + 1) * hs];
            let durow = &mut du[row * hs..(row + 1) * hs];
            for k in 0..hs {
                durow[k] += g * rh[k];
                drh[k] += g * urow[k];
            }
        }
        for j in 0..hs {
            dar[j] = drh[j] * h[j] * r[j] * (1.0 - r[j]);
            dh_prev[j] += drh[j] * r[j];
        }
        // Gate recurrences through Uz, Ur.
        for (gate, da) in [(0usize, &daz), (1usize, &dar)] {
            for j in 0..hs {
                let row = gate * hs + j;
                let g = da[j];
                if g == 0.0 {
                    continue;
                }
                let urow = &u[row * hs..(row + 1) * hs];
                let durow = &mut du[row * hs..(row + 1) * hs];
                for k in 0..hs {
                    durow[k] += g * h[k];
                    dh_prev[k] += g * urow[k];
                }
            }
        }
        // Input weights and biases for all three blocks.
        dx.fill(0.0);
        for (gate, da) in [(0usize, &daz), (1usize, &dar), (2usize, &dan)] {
            for j in 0..hs {
                let row = gate * hs + j;
                let g = da[j];
                db[row] += g;
                if g == 0.0 {
                    continue;
                }
                let wrow = &w[row * is..(row + 1) * is];
                let dwrow = &mut dw[row * is..(row + 1) * is];
                for c in 0..is {
                    dwrow[c] += g * x[c];
                    dx[c] += g * wrow[c];
                }
            }
        }
        for c in 0..is {
            dseq[c * steps + t] += dx[c];
        }
        std::mem::swap(&mut dh, &mut dh_prev);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut y = [0.0; 6];
        softmax_forward(&[0.0; 6], &mut y);
        for p in y {
            assert!((p - 1.0 / 6.0).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_weight_gru_halves_state() {
        let shape = GruShape {
            input_size: 3,
            hidden: 4,
        };
        let params = vec![0.0; shape.param_len()];
        let h = [0.8, -0.4, 2.0, 0.0];
        let next = gru_step(&shape, &params, &[1.0, -2.0, 0.5], &h);
        for (a, b) in next.iter().zip(h) {
            assert!((a - 0.5 * b).abs() < 1e-15);
        }
    }

    #[test]
    fn same_padding_keeps_length() {
        let g = ConvGeometry::new(5, 4, 32, 5, 1, Padding::Same).unwrap();
        assert_eq!(g.out_len, 4);
        assert_eq!(g.pad_left, 2);
        assert!(ConvGeometry::new(1, 4, 8, 5, 1, Padding::Valid).is_none());
        let g = ConvGeometry::new(1, 6, 8, 3, 1, Padding::Valid).unwrap();
        assert_eq!(g.out_len, 4);
    }

    #[test]
    fn conv_matches_hand_computation() {
        // Single filter [1, 2, 3] over [1, 0, -1, 2], valid.
        let g = ConvGeometry::new(1, 4, 1, 3, 1, Padding::Valid).unwrap();
        let mut y = [0.0; 2];
        conv1d_forward(&g, &[1.0, 2.0, 3.0], &[0.5], &[1.0, 0.0, -1.0, 2.0], &mut y);
        assert_eq!(y, [1.0 - 3.0 + 0.5, -2.0 + 6.0 + 0.5]);
    }
}
