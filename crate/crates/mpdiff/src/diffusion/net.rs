//! The fixed compact denoiser: four 3×3 conv layers with widths [32, 64, 64,
//! 32], SiLU between layers, sinusoidal time embedding injected as per-channel
//! scale-and-shift after layers 1 and 3, and a residual skip that concatenates
//! the noisy input channels into a final 3×3 projection.
//!
//! The architecture is deliberately not configurable layer-by-layer: the
//! reverse-mode gradients are derived by hand and checked against central
//! finite differences, which is only tractable for one fixed wiring.

use ndarray::{Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::Field2D;

/// Channel widths of the four hidden conv layers.
pub const HIDDEN_WIDTHS: [usize; 4] = [32, 64, 64, 32];

/// Shape contract for one denoiser: channel counts, grid size, and the
/// sinusoidal embedding dimension.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchDescriptor {
    pub noisy_channels: usize,
    pub context_channels: usize,
    pub c1_channels: usize,
    pub width: usize,
    pub height: usize,
    pub time_embed_dim: usize,
}

impl ArchDescriptor {
    pub fn validate(&self) -> Result<()> {
        if self.noisy_channels == 0 || self.width == 0 || self.height == 0 {
            return Err(Error::RejectedInput("descriptor needs noisy channels and a grid".into()));
        }
        if self.time_embed_dim < 2 || !self.time_embed_dim.is_multiple_of(2) {
            return Err(Error::RejectedInput("time_embed_dim must be even and >= 2".into()));
        }
        Ok(())
    }

    pub fn input_channels(&self) -> usize {
        self.noisy_channels + self.context_channels + self.c1_channels
    }
}

#[derive(Debug, Clone, Copy)]
struct Seg {
    start: usize,
    len: usize,
}

impl Seg {
    fn range(&self) -> std::ops::Range<usize> {
        self.start..self.start + self.len
    }
}

/// Offsets of every named parameter segment inside the flat vector.
#[derive(Debug, Clone)]
struct Layout {
    conv_k: [Seg; 5],
    conv_b: [Seg; 5],
    film_w: [Seg; 2],
    film_b: [Seg; 2],
    total: usize,
}

impl Layout {
    fn new(arch: &ArchDescriptor) -> Self {
        let cin = arch.input_channels();
        let n = arch.noisy_channels;
        let dims = [
            (HIDDEN_WIDTHS[0], cin),
            (HIDDEN_WIDTHS[1], HIDDEN_WIDTHS[0]),
            (HIDDEN_WIDTHS[2], HIDDEN_WIDTHS[1]),
            (HIDDEN_WIDTHS[3], HIDDEN_WIDTHS[2]),
            (n, HIDDEN_WIDTHS[3] + n),
        ];
        let film_rows = [2 * HIDDEN_WIDTHS[0], 2 * HIDDEN_WIDTHS[2]];
        let mut off = 0;
        let mut seg = |len: usize| {
            let s = Seg { start: off, len };
            off += len;
            s
        };
        let mut conv_k = [Seg { start: 0, len: 0 }; 5];
        let mut conv_b = [Seg { start: 0, len: 0 }; 5];
        for (i, (out, inp)) in dims.iter().enumerate() {
            conv_k[i] = seg(out * inp * 9);
            conv_b[i] = seg(*out);
        }
        let mut film_w = [Seg { start: 0, len: 0 }; 2];
        let mut film_b = [Seg { start: 0, len: 0 }; 2];
        for (i, rows) in film_rows.iter().enumerate() {
            film_w[i] = seg(rows * arch.time_embed_dim);
            film_b[i] = seg(*rows);
        }
        Layout { conv_k, conv_b, film_w, film_b, total: off }
    }

    fn conv_dims(arch: &ArchDescriptor, idx: usize) -> (usize, usize) {
        let cin = arch.input_channels();
        let n = arch.noisy_channels;
        match idx {
            0 => (HIDDEN_WIDTHS[0], cin),
            1 => (HIDDEN_WIDTHS[1], HIDDEN_WIDTHS[0]),
            2 => (HIDDEN_WIDTHS[2], HIDDEN_WIDTHS[1]),
            3 => (HIDDEN_WIDTHS[3], HIDDEN_WIDTHS[2]),
            _ => (n, HIDDEN_WIDTHS[3] + n),
        }
    }
}

/// The denoiser: a descriptor plus one flat parameter vector.
#[derive(Debug, Clone)]
pub struct Denoiser {
    arch: ArchDescriptor,
    params: Vec<f64>,
    layout: Layout,
}

/// Activations kept from a forward pass for the backward pass.
pub struct ForwardTrace {
    cols: [Array2<f64>; 5],
    pre_film: [Array2<f64>; 2],
    pre_act: [Array2<f64>; 4],
    gamma: [Array1<f64>; 2],
    emb: Array1<f64>,
}

impl Denoiser {
    pub fn param_count(arch: &ArchDescriptor) -> usize {
        Layout::new(arch).total
    }

    /// All-zero parameters (the forward pass then returns a zero field).
    pub fn zeros(arch: ArchDescriptor) -> Result<Self> {
        arch.validate()?;
        let layout = Layout::new(&arch);
        Ok(Self { params: vec![0.0; layout.total], arch, layout })
    }

    /// Seeded initialization: conv kernels scaled by fan-in, zero biases,
    /// zero film heads (identity modulation), zero output projection.
    pub fn seeded(arch: ArchDescriptor, seed: u64) -> Result<Self> {
        let mut d = Self::zeros(arch)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in 0..4 {
            let (_, cin) = Layout::conv_dims(&d.arch, i);
            let std = (2.0 / (cin * 9) as f64).sqrt();
            let dist = Normal::new(0.0, std).expect("valid normal");
            for v in &mut d.params[d.layout.conv_k[i].range()] {
                *v = dist.sample(&mut rng);
            }
        }
        Ok(d)
    }

    pub fn arch(&self) -> &ArchDescriptor {
        &self.arch
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn set_params(&mut self, params: Vec<f64>) -> Result<()> {
        if params.len() != self.layout.total {
            return Err(Error::RejectedInput(format!(
                "expected {} parameters, got {}",
                self.layout.total,
                params.len()
            )));
        }
        self.params = params;
        Ok(())
    }

    /// Named parameter segments, in layout order.
    pub fn segments(&self) -> Vec<(String, std::ops::Range<usize>)> {
        let mut out = Vec::new();
        for i in 0..5 {
            let name = if i == 4 { "proj".to_string() } else { format!("conv{}", i + 1) };
            out.push((format!("{name}.kernel"), self.layout.conv_k[i].range()));
            out.push((format!("{name}.bias"), self.layout.conv_b[i].range()));
        }
        for (i, tag) in ["film1", "film3"].iter().enumerate() {
            out.push((format!("{tag}.weight"), self.layout.film_w[i].range()));
            out.push((format!("{tag}.bias"), self.layout.film_b[i].range()));
        }
        out
    }

    fn kernel(&self, idx: usize) -> Array2<f64> {
        let (out, cin) = Layout::conv_dims(&self.arch, idx);
        Array2::from_shape_vec((out, cin * 9), self.params[self.layout.conv_k[idx].range()].to_vec())
            .expect("layout shape")
    }

    fn bias(&self, idx: usize) -> &[f64] {
        &self.params[self.layout.conv_b[idx].range()]
    }

    fn film(&self, idx: usize, emb: &Array1<f64>) -> (Array1<f64>, Array1<f64>) {
        let rows = self.layout.film_b[idx].len;
        let w = Array2::from_shape_vec(
            (rows, self.arch.time_embed_dim),
            self.params[self.layout.film_w[idx].range()].to_vec(),
        )
        .expect("layout shape");
        let b = Array1::from(self.params[self.layout.film_b[idx].range()].to_vec());
        let gd = w.dot(emb) + &b;
        let half = rows / 2;
        let gamma = gd.slice(ndarray::s![..half]).to_owned();
        let delta = gd.slice(ndarray::s![half..]).to_owned();
        (gamma, delta)
    }

    fn check_inputs(
        &self,
        noisy: &[Field2D],
        context: &[Field2D],
        c1: &[Field2D],
    ) -> Result<()> {
        let groups = [
            (noisy, self.arch.noisy_channels, "noisy"),
            (context, self.arch.context_channels, "context"),
            (c1, self.arch.c1_channels, "c1"),
        ];
        for (fields, expect, tag) in groups {
            if fields.len() != expect {
                return Err(Error::RejectedInput(format!(
                    "{tag}: expected {expect} channels, got {}",
                    fields.len()
                )));
            }
            for f in fields {
                if f.width() != self.arch.width || f.height() != self.arch.height {
                    return Err(Error::RejectedInput(format!(
                        "{tag}: field {}x{} does not match grid {}x{}",
                        f.width(),
                        f.height(),
                        self.arch.width,
                        self.arch.height
                    )));
                }
            }
        }
        Ok(())
    }

    /// Predicted noise for one example. Deterministic in parameters and inputs.
    pub fn forward(
        &self,
        noisy: &[Field2D],
        t: usize,
        context: &[Field2D],
        c1: &[Field2D],
    ) -> Result<Vec<Field2D>> {
        Ok(self.forward_traced(noisy, t, context, c1)?.0)
    }

    /// Forward pass that also returns the activations needed by
    /// [`Denoiser::backward`].
    pub fn forward_traced(
        &self,
        noisy: &[Field2D],
        t: usize,
        context: &[Field2D],
        c1: &[Field2D],
    ) -> Result<(Vec<Field2D>, ForwardTrace)> {
        self.check_inputs(noisy, context, c1)?;
        let (w, h) = (self.arch.width, self.arch.height);
        let hw = w * h;
        let input = stack_channels(&[noisy, context, c1], hw);
        let emb = time_embedding(t, self.arch.time_embed_dim);

        let cols1 = im2col(&input, w, h);
        let h1 = conv_apply(&self.kernel(0), self.bias(0), &cols1);
        let (g1, d1) = self.film(0, &emb);
        let a1 = film_apply(&h1, &g1, &d1);
        let z1 = a1.mapv(silu);

        let cols2 = im2col(&z1, w, h);
        let h2 = conv_apply(&self.kernel(1), self.bias(1), &cols2);
        let z2 = h2.mapv(silu);

        let cols3 = im2col(&z2, w, h);
        let h3 = conv_apply(&self.kernel(2), self.bias(2), &cols3);
        let (g3, d3) = self.film(1, &emb);
        let a3 = film_apply(&h3, &g3, &d3);
        let z3 = a3.mapv(silu);

        let cols4 = im2col(&z3, w, h);
        let h4 = conv_apply(&self.kernel(3), self.bias(3), &cols4);
        let z4 = h4.mapv(silu);

        // Residual skip: the noisy channels ride along into the projection.
        let mut skip = Array2::zeros((HIDDEN_WIDTHS[3] + self.arch.noisy_channels, hw));
        skip.slice_mut(ndarray::s![..HIDDEN_WIDTHS[3], ..]).assign(&z4);
        for (i, f) in noisy.iter().enumerate() {
            skip.row_mut(HIDDEN_WIDTHS[3] + i)
                .assign(&Array1::from(f.data().to_vec()));
        }
        let cols5 = im2col(&skip, w, h);
        let out = conv_apply(&self.kernel(4), self.bias(4), &cols5);

        let fields = (0..self.arch.noisy_channels)
            .map(|c| {
                Field2D::new(w, h, out.row(c).to_vec())
                    .expect("conv output is finite")
            })
            .collect();
        let trace = ForwardTrace {
            cols: [cols1, cols2, cols3, cols4, cols5],
            pre_film: [h1, h3],
            pre_act: [a1, h2, a3, h4],
            gamma: [g1, g3],
            emb,
        };
        Ok((fields, trace))
    }

    /// Gradient of a scalar loss with respect to every parameter, given
    /// `d_out = ∂loss/∂output` (channels × pixels).
    pub fn backward(&self, trace: &ForwardTrace, d_out: &Array2<f64>) -> Vec<f64> {
        let (w, h) = (self.arch.width, self.arch.height);
        let n = self.arch.noisy_channels;
        let mut grad = vec![0.0; self.layout.total];

        // projection
        let (d_in5, _) = self.conv_backward(4, d_out, &trace.cols[4], &mut grad, w, h);
        let dz4 = d_in5.slice(ndarray::s![..HIDDEN_WIDTHS[3], ..]).to_owned();
        let _ = n;

        // conv4 + silu
        let da4 = &dz4 * &trace.pre_act[3].mapv(silu_prime);
        let (dz3, _) = self.conv_backward(3, &da4, &trace.cols[3], &mut grad, w, h);

        // conv3 + film3 + silu
        let da3 = &dz3 * &trace.pre_act[2].mapv(silu_prime);
        let dh3 = self.film_backward(1, &da3, &trace.pre_film[1], &trace.gamma[1], &trace.emb, &mut grad);
        let (dz2, _) = self.conv_backward(2, &dh3, &trace.cols[2], &mut grad, w, h);

        // conv2 + silu
        let da2 = &dz2 * &trace.pre_act[1].mapv(silu_prime);
        let (dz1, _) = self.conv_backward(1, &da2, &trace.cols[1], &mut grad, w, h);

        // conv1 + film1 + silu
        let da1 = &dz1 * &trace.pre_act[0].mapv(silu_prime);
        let dh1 = self.film_backward(0, &da1, &trace.pre_film[0], &trace.gamma[0], &trace.emb, &mut grad);
        let d_k1 = dh1.dot(&trace.cols[0].t());
        let seg = self.layout.conv_k[0];
        for (dst, src) in grad[seg.range()].iter_mut().zip(d_k1.iter()) {
            *dst += src;
        }
        let db1 = dh1.sum_axis(Axis(1));
        let seg = self.layout.conv_b[0];
        for (dst, src) in grad[seg.range()].iter_mut().zip(db1.iter()) {
            *dst += src;
        }
        grad
    }

    /// Convenience wrapper: squared-error loss against the true noise and its
    /// parameter gradient. The loss is the plain sum of squared residuals.
    pub fn loss_and_grad(
        &self,
        noisy: &[Field2D],
        t: usize,
        context: &[Field2D],
        c1: &[Field2D],
        eps_true: &[Field2D],
    ) -> Result<(f64, Vec<f64>)> {
        let (out, trace) = self.forward_traced(noisy, t, context, c1)?;
        if eps_true.len() != out.len() {
            return Err(Error::RejectedInput("eps_true channel count mismatch".into()));
        }
        let hw = self.arch.width * self.arch.height;
        let mut d_out = Array2::zeros((out.len(), hw));
        let mut loss = 0.0;
        for (c, (pred, truth)) in out.iter().zip(eps_true).enumerate() {
            if !pred.same_shape(truth) {
                return Err(Error::RejectedInput("eps_true shape mismatch".into()));
            }
            for (p, (a, b)) in pred.data().iter().zip(truth.data()).enumerate() {
                let r = a - b;
                loss += r * r;
                d_out[(c, p)] = 2.0 * r;
            }
        }
        let grad = self.backward(&trace, &d_out);
        Ok((loss, grad))
    }

    fn conv_backward(
        &self,
        idx: usize,
        d_y: &Array2<f64>,
        cols: &Array2<f64>,
        grad: &mut [f64],
        w: usize,
        h: usize,
    ) -> (Array2<f64>, ()) {
        let d_k = d_y.dot(&cols.t());
        for (dst, src) in grad[self.layout.conv_k[idx].range()].iter_mut().zip(d_k.iter()) {
            *dst += src;
        }
        let d_b = d_y.sum_axis(Axis(1));
        for (dst, src) in grad[self.layout.conv_b[idx].range()].iter_mut().zip(d_b.iter()) {
            *dst += src;
        }
        let d_cols = self.kernel(idx).t().dot(d_y);
        (col2im(&d_cols, w, h), ())
    }

    fn film_backward(
        &self,
        idx: usize,
        d_a: &Array2<f64>,
        pre_film: &Array2<f64>,
        gamma: &Array1<f64>,
        emb: &Array1<f64>,
        grad: &mut [f64],
    ) -> Array2<f64> {
        let channels = gamma.len();
        let mut d_gamma = Array1::zeros(channels);
        let mut d_delta = Array1::zeros(channels);
        for c in 0..channels {
            d_gamma[c] = d_a.row(c).dot(&pre_film.row(c));
            d_delta[c] = d_a.row(c).sum();
        }
        let wseg = self.layout.film_w[idx];
        let dt = self.arch.time_embed_dim;
        {
            let gw = &mut grad[wseg.range()];
            for c in 0..channels {
                for (j, e) in emb.iter().enumerate() {
                    gw[c * dt + j] += d_gamma[c] * e;
                    gw[(channels + c) * dt + j] += d_delta[c] * e;
                }
            }
        }
        let bseg = self.layout.film_b[idx];
        {
            let gb = &mut grad[bseg.range()];
            for c in 0..channels {
                gb[c] += d_gamma[c];
                gb[channels + c] += d_delta[c];
            }
        }
        let mut d_h = d_a.clone();
        for c in 0..channels {
            let scale = 1.0 + gamma[c];
            d_h.row_mut(c).mapv_inplace(|v| v * scale);
        }
        d_h
    }
}

fn stack_channels(groups: &[&[Field2D]], hw: usize) -> Array2<f64> {
    let total: usize = groups.iter().map(|g| g.len()).sum();
    let mut arr = Array2::zeros((total, hw));
    let mut row = 0;
    for group in groups {
        for f in group.iter() {
            arr.row_mut(row).assign(&Array1::from(f.data().to_vec()));
            row += 1;
        }
    }
    arr
}

/// Sinusoidal step embedding: interleaved sin/cos halves over geometrically
/// spaced frequencies.
pub fn time_embedding(t: usize, dim: usize) -> Array1<f64> {
    let half = dim / 2;
    let mut e = Array1::zeros(dim);
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        e[i] = arg.sin();
        e[half + i] = arg.cos();
    }
    e
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub(crate) fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
pub(crate) fn silu_prime(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

fn conv_apply(kernel: &Array2<f64>, bias: &[f64], cols: &Array2<f64>) -> Array2<f64> {
    let mut y = kernel.dot(cols);
    for (c, b) in bias.iter().enumerate() {
        y.row_mut(c).mapv_inplace(|v| v + b);
    }
    y
}

fn film_apply(h: &Array2<f64>, gamma: &Array1<f64>, delta: &Array1<f64>) -> Array2<f64> {
    let mut a = h.clone();
    for c in 0..gamma.len() {
        let (g, d) = (1.0 + gamma[c], delta[c]);
        a.row_mut(c).mapv_inplace(|v| v * g + d);
    }
    a
}

/// 3×3 zero-padded patch extraction: `(C, H·W)` → `(9C, H·W)`.
fn im2col(src: &Array2<f64>, w: usize, h: usize) -> Array2<f64> {
    let c = src.nrows();
    let mut cols = Array2::zeros((c * 9, w * h));
    for ch in 0..c {
        let plane = src.row(ch);
        for ky in 0..3usize {
            for kx in 0..3usize {
                let row = ch * 9 + ky * 3 + kx;
                let mut dst = cols.row_mut(row);
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for x in 0..w {
                        let sx = x as isize + kx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        dst[y * w + x] = plane[sy as usize * w + sx as usize];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-adds patch gradients back onto the plane.
fn col2im(cols: &Array2<f64>, w: usize, h: usize) -> Array2<f64> {
    let c = cols.nrows() / 9;
    let mut out = Array2::zeros((c, w * h));
    for ch in 0..c {
        let mut plane = out.row_mut(ch);
        for ky in 0..3usize {
            for kx in 0..3usize {
                let row = cols.row(ch * 9 + ky * 3 + kx);
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for x in 0..w {
                        let sx = x as isize + kx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        plane[sy as usize * w + sx as usize] += row[y * w + x];
                    }
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn small_arch() -> ArchDescriptor {
        ArchDescriptor {
            noisy_channels: 1,
            context_channels: 1,
            c1_channels: 2,
            width: 6,
            height: 5,
            time_embed_dim: 8,
        }
    }

    fn random_inputs(
        arch: &ArchDescriptor,
        seed: u64,
    ) -> (Vec<Field2D>, Vec<Field2D>, Vec<Field2D>, Vec<Field2D>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut mk = |n: usize| -> Vec<Field2D> {
            (0..n)
                .map(|_| Field2D::from_fn(arch.width, arch.height, |_, _| rng.gen_range(-1.0..1.0)))
                .collect()
        };
        (mk(arch.noisy_channels), mk(arch.context_channels), mk(arch.c1_channels), mk(arch.noisy_channels))
    }

    /// Straight-line reimplementation of the layer arithmetic with quadruple
    /// loops; shares nothing with the im2col/GEMM path it checks.
    fn naive_forward(d: &Denoiser, noisy: &[Field2D], t: usize, ctx: &[Field2D], c1: &[Field2D]) -> Vec<Vec<f64>> {
        let arch = d.arch().clone();
        let (w, h) = (arch.width, arch.height);
        let mut planes: Vec<Vec<f64>> = Vec::new();
        for f in noisy.iter().chain(ctx).chain(c1) {
            planes.push(f.data().to_vec());
        }
        let emb = time_embedding(t, arch.time_embed_dim);
        let segs: std::collections::BTreeMap<String, std::ops::Range<usize>> =
            d.segments().into_iter().collect();
        let p = d.params();

        let conv = |input: &[Vec<f64>], kseg: &str, bseg: &str, cout: usize| -> Vec<Vec<f64>> {
            let k = &p[segs[kseg].clone()];
            let b = &p[segs[bseg].clone()];
            let cin = input.len();
            let mut out = vec![vec![0.0; w * h]; cout];
            for co in 0..cout {
                for y in 0..h as isize {
                    for x in 0..w as isize {
                        let mut acc = b[co];
                        for ci in 0..cin {
                            for ky in -1..=1isize {
                                for kx in -1..=1isize {
                                    let (sy, sx) = (y + ky, x + kx);
                                    if sy < 0 || sy >= h as isize || sx < 0 || sx >= w as isize {
                                        continue;
                                    }
                                    let kidx = co * cin * 9
                                        + ci * 9
                                        + (ky + 1) as usize * 3
                                        + (kx + 1) as usize;
                                    acc += k[kidx] * input[ci][sy as usize * w + sx as usize];
                                }
                            }
                        }
                        out[co][y as usize * w + x as usize] = acc;
                    }
                }
            }
            out
        };
        let film = |input: &mut [Vec<f64>], wseg: &str, bseg: &str| {
            let wm = &p[segs[wseg].clone()];
            let bm = &p[segs[bseg].clone()];
            let c = input.len();
            let dt = emb.len();
            for (ci, plane) in input.iter_mut().enumerate() {
                let mut g = bm[ci];
                let mut dl = bm[c + ci];
                for j in 0..dt {
                    g += wm[ci * dt + j] * emb[j];
                    dl += wm[(c + ci) * dt + j] * emb[j];
                }
                for v in plane.iter_mut() {
                    *v = *v * (1.0 + g) + dl;
                }
            }
        };
        let act = |input: &mut [Vec<f64>]| {
            for plane in input {
                for v in plane.iter_mut() {
                    *v = silu(*v);
                }
            }
        };

        let mut z = conv(&planes, "conv1.kernel", "conv1.bias", 32);
        film(&mut z, "film1.weight", "film1.bias");
        act(&mut z);
        let mut z2 = conv(&z, "conv2.kernel", "conv2.bias", 64);
        act(&mut z2);
        let mut z3 = conv(&z2, "conv3.kernel", "conv3.bias", 64);
        film(&mut z3, "film3.weight", "film3.bias");
        act(&mut z3);
        let mut z4 = conv(&z3, "conv4.kernel", "conv4.bias", 32);
        act(&mut z4);
        for f in noisy {
            z4.push(f.data().to_vec());
        }
        conv(&z4, "proj.kernel", "proj.bias", arch.noisy_channels)
    }

    #[test]
    fn zero_parameters_give_zero_output() {
        let arch = small_arch();
        let d = Denoiser::zeros(arch.clone()).unwrap();
        let (noisy, ctx, c1, _) = random_inputs(&arch, 3);
        let out = d.forward(&noisy, 5, &ctx, &c1).unwrap();
        assert!(out[0].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_matches_straight_line_reimplementation() {
        let arch = small_arch();
        let mut d = Denoiser::seeded(arch.clone(), 42).unwrap();
        // fill every segment (including film and proj) with nonzero values
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let params: Vec<f64> = (0..d.params().len()).map(|_| rng.gen_range(-0.2..0.2)).collect();
        d.set_params(params).unwrap();
        let (noisy, ctx, c1, _) = random_inputs(&arch, 4);
        let fast = d.forward(&noisy, 17, &ctx, &c1).unwrap();
        let slow = naive_forward(&d, &noisy, 17, &ctx, &c1);
        for (f, s) in fast.iter().zip(&slow) {
            for (a, b) in f.data().iter().zip(s) {
                assert!((a - b).abs() < 1e-10, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn per_example_outputs_are_independent() {
        let arch = small_arch();
        let d = Denoiser::seeded(arch.clone(), 1).unwrap();
        let (n1, ctx1, c11, _) = random_inputs(&arch, 10);
        let (n2, ctx2, c12, _) = random_inputs(&arch, 11);
        let out1 = d.forward(&n1, 5, &ctx1, &c11).unwrap();
        let out2 = d.forward(&n2, 5, &ctx2, &c12).unwrap();
        // permuting the two examples permutes the outputs identically
        let swapped2 = d.forward(&n2, 5, &ctx2, &c12).unwrap();
        let swapped1 = d.forward(&n1, 5, &ctx1, &c11).unwrap();
        assert_eq!(out1, swapped1);
        assert_eq!(out2, swapped2);
    }

    #[test]
    fn rejects_shape_mismatch() {
        let arch = small_arch();
        let d = Denoiser::zeros(arch.clone()).unwrap();
        let (noisy, ctx, _, _) = random_inputs(&arch, 3);
        let bad_c1 = vec![Field2D::zeros(3, 3); 2];
        assert!(d.forward(&noisy, 1, &ctx, &bad_c1).is_err());
        let short_ctx: Vec<Field2D> = vec![];
        assert!(d.forward(&noisy, 1, &short_ctx, &bad_c1).is_err());
    }

    #[test]
    fn zero_gradient_at_perfect_prediction() {
        // zero params → output 0; eps_true = 0 → residual 0 → gradient 0
        let arch = small_arch();
        let d = Denoiser::zeros(arch.clone()).unwrap();
        let (noisy, ctx, c1, _) = random_inputs(&arch, 6);
        let zeros = vec![Field2D::zeros(arch.width, arch.height)];
        let (loss, grad) = d.loss_and_grad(&noisy, 3, &ctx, &c1, &zeros).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn gradient_accumulation_doubles() {
        let arch = small_arch();
        let mut d = Denoiser::seeded(arch.clone(), 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let params: Vec<f64> = (0..d.params().len()).map(|_| rng.gen_range(-0.2..0.2)).collect();
        d.set_params(params).unwrap();
        let (noisy, ctx, c1, eps) = random_inputs(&arch, 12);
        let (l1, g1) = d.loss_and_grad(&noisy, 9, &ctx, &c1, &eps).unwrap();
        let (l2, g2) = d.loss_and_grad(&noisy, 9, &ctx, &c1, &eps).unwrap();
        assert_eq!(l1, l2);
        for (a, b) in g1.iter().zip(&g2) {
            let sum = a + b;
            assert!((sum - 2.0 * a).abs() <= 1e-12 * a.abs().max(1.0));
        }
    }

    #[test]
    fn backward_matches_central_finite_differences() {
        let arch = ArchDescriptor {
            noisy_channels: 1,
            context_channels: 1,
            c1_channels: 1,
            width: 5,
            height: 4,
            time_embed_dim: 8,
        };
        let mut d = Denoiser::seeded(arch.clone(), 21).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let params: Vec<f64> = (0..d.params().len()).map(|_| rng.gen_range(-0.3..0.3)).collect();
        d.set_params(params).unwrap();
        let (noisy, ctx, c1, eps) = random_inputs(&arch, 23);
        let (_, grad) = d.loss_and_grad(&noisy, 4, &ctx, &c1, &eps).unwrap();

        let total = d.params().len();
        let step = 1e-5;
        let mut max_rel = 0.0f64;
        for _ in 0..200 {
            let idx = rng.gen_range(0..total);
            let orig = d.params()[idx];
            d.params_mut()[idx] = orig + step;
            let (lp, _) = d.loss_and_grad(&noisy, 4, &ctx, &c1, &eps).unwrap();
            d.params_mut()[idx] = orig - step;
            let (lm, _) = d.loss_and_grad(&noisy, 4, &ctx, &c1, &eps).unwrap();
            d.params_mut()[idx] = orig;
            let fd = (lp - lm) / (2.0 * step);
            let denom = fd.abs().max(grad[idx].abs()).max(1e-8);
            max_rel = max_rel.max((fd - grad[idx]).abs() / denom);
        }
        assert!(max_rel <= 1e-4, "max relative error {max_rel}");
    }

    #[test]
    fn final_bias_gradient_equals_residual_sums() {
        // For the projection bias, dL/db_c = sum over pixels of 2(eps_hat - eps).
        let arch = small_arch();
        let mut d = Denoiser::seeded(arch.clone(), 31).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let params: Vec<f64> = (0..d.params().len()).map(|_| rng.gen_range(-0.2..0.2)).collect();
        d.set_params(params).unwrap();
        let (noisy, ctx, c1, eps) = random_inputs(&arch, 33);
        let out = d.forward(&noisy, 2, &ctx, &c1).unwrap();
        let (_, grad) = d.loss_and_grad(&noisy, 2, &ctx, &c1, &eps).unwrap();
        let segs: std::collections::BTreeMap<_, _> = d.segments().into_iter().collect();
        let bias_range = segs["proj.bias"].clone();
        for (c, gidx) in bias_range.enumerate() {
            let expect: f64 = out[c]
                .data()
                .iter()
                .zip(eps[c].data())
                .map(|(a, b)| 2.0 * (a - b))
                .sum();
            assert!((grad[gidx] - expect).abs() < 1e-9);
        }
    }
}
