//! Trainable convolutional descriptor.
//!
//! conv 3x3 -> ReLU -> 2x2 max pool -> conv 3x3 (dilation 2) -> ReLU ->
//! 4x4 head (dilation 2) evaluated only at the sample positions, then L2
//! normalization. The pool has stride 1 and the layers after it are dilated
//! by 2, which gives the receptive field of a stride-2 pool while keeping
//! features at every pixel, so the head can be sampled at any pixel stride.

use std::hash::Hasher;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{l2_normalize, l2_normalize_backward, DescriptorField, GrayImage, SampleGrid};
use crate::error::{Error, Result};
use crate::par::{for_each_chunk, for_each_chunk2};

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub out_channels: usize,
    pub in_channels: usize,
    pub kernel: usize,
    pub dilation: usize,
    /// `[out][in][ky][kx]`
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvLayer {
    fn zeros(out_channels: usize, in_channels: usize, kernel: usize, dilation: usize) -> Self {
        Self {
            out_channels,
            in_channels,
            kernel,
            dilation,
            weight: vec![0.0; out_channels * in_channels * kernel * kernel],
            bias: vec![0.0; out_channels],
        }
    }

    fn glorot(mut self, rng: &mut ChaCha8Rng) -> Self {
        let kk = self.kernel * self.kernel;
        let fan_in = self.in_channels * kk;
        let fan_out = self.out_channels * kk;
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        for w in &mut self.weight {
            *w = rng.random_range(-a..a);
        }
        self
    }

    /// Pixel offset of tap `t`, centred on the output position.
    fn tap_offset(&self, t: usize) -> i64 {
        let d = self.dilation as i64;
        (d * (2 * t as i64 - (self.kernel as i64 - 1))) / 2
    }

    fn per_output(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }
}

/// Weights of the trainable extractor. The same shape doubles as the
/// gradient buffer (see [`ExtractorParams::zeros_like`]).
#[derive(Clone, Debug, PartialEq)]
pub struct ExtractorParams {
    pub conv1: ConvLayer,
    pub conv2: ConvLayer,
    pub head: ConvLayer,
}

impl ExtractorParams {
    pub const DEFAULT_WIDTHS: [usize; 3] = [16, 32, 64];

    /// Glorot-uniform weights and zero biases from a fixed seed.
    pub fn init(widths: [usize; 3], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            conv1: ConvLayer::zeros(widths[0], 1, 3, 1).glorot(&mut rng),
            conv2: ConvLayer::zeros(widths[1], widths[0], 3, 2).glorot(&mut rng),
            head: ConvLayer::zeros(widths[2], widths[1], 4, 2).glorot(&mut rng),
        }
    }

    pub fn zeros(widths: [usize; 3]) -> Self {
        Self {
            conv1: ConvLayer::zeros(widths[0], 1, 3, 1),
            conv2: ConvLayer::zeros(widths[1], widths[0], 3, 2),
            head: ConvLayer::zeros(widths[2], widths[1], 4, 2),
        }
    }

    pub fn widths(&self) -> [usize; 3] {
        [
            self.conv1.out_channels,
            self.conv2.out_channels,
            self.head.out_channels,
        ]
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.widths())
    }

    pub fn dim(&self) -> usize {
        self.head.out_channels
    }

    /// Parameter tensors in checkpoint order.
    pub fn tensors(&self) -> [&[f64]; 6] {
        [
            &self.conv1.weight,
            &self.conv1.bias,
            &self.conv2.weight,
            &self.conv2.bias,
            &self.head.weight,
            &self.head.bias,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Vec<f64>; 6] {
        [
            &mut self.conv1.weight,
            &mut self.conv1.bias,
            &mut self.conv2.weight,
            &mut self.conv2.bias,
            &mut self.head.weight,
            &mut self.head.bias,
        ]
    }

    pub fn len(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.tensors().concat()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.len() {
            return Err(Error::shape(format!(
                "extractor has {} parameters, got {}",
                self.len(),
                flat.len()
            )));
        }
        let mut rest = flat;
        for t in self.tensors_mut() {
            let (head, tail) = rest.split_at(t.len());
            t.copy_from_slice(head);
            rest = tail;
        }
        Ok(())
    }

    pub fn get_flat(&self, idx: usize) -> f64 {
        let mut idx = idx;
        for t in self.tensors() {
            if idx < t.len() {
                return t[idx];
            }
            idx -= t.len();
        }
        panic!("parameter index out of range");
    }

    pub fn set_flat_at(&mut self, idx: usize, value: f64) {
        let mut idx = idx;
        for t in self.tensors_mut() {
            if idx < t.len() {
                t[idx] = value;
                return;
            }
            idx -= t.len();
        }
        panic!("parameter index out of range");
    }

    pub fn fill(&mut self, value: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|x| *x = value);
        }
    }

    /// `self += scale * other` (same widths).
    pub fn add_scaled(&mut self, other: &Self, scale: f64) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += scale * y;
            }
        }
    }

    pub fn squared_norm(&self) -> f64 {
        self.tensors().iter().flat_map(|t| t.iter()).map(|x| x * x).sum()
    }

    fn check_finite(&self) -> Result<()> {
        if self.tensors().iter().all(|t| t.iter().all(|x| x.is_finite())) {
            Ok(())
        } else {
            Err(Error::NonFinite("extractor parameters"))
        }
    }
}

/// Forward activations retained for [`extract_backward`].
#[derive(Clone, Debug)]
pub struct ExtractorCache {
    width: usize,
    height: usize,
    grid: SampleGrid,
    widths: [usize; 3],
    input: Vec<f64>,
    pre1: Vec<f64>,
    pooled: Vec<f64>,
    switches: Vec<u8>,
    pre2: Vec<f64>,
    act2: Vec<f64>,
    norms: Vec<f64>,
    descriptors: Vec<f64>,
}

impl ExtractorCache {
    pub fn grid(&self) -> SampleGrid {
        self.grid
    }

    /// Feeds every discrete choice of the forward pass (ReLU masks, pool
    /// switches) into `h`.
    pub fn hash_decisions<H: Hasher>(&self, h: &mut H) {
        for v in self.pre1.iter().chain(&self.pre2) {
            h.write_u8((*v > 0.0) as u8);
        }
        h.write(&self.switches);
    }

    /// Smallest |pre-activation| over non-zero ReLU inputs.
    pub fn min_relu_margin(&self) -> f64 {
        self.pre1
            .iter()
            .chain(&self.pre2)
            .filter(|v| **v != 0.0)
            .fold(f64::INFINITY, |m, v| m.min(v.abs()))
    }

    /// Smallest gap between the winner and the runner-up of any pool window
    /// whose winner is non-zero after the ReLU.
    pub fn min_pool_gap(&self) -> f64 {
        let (w, h) = (self.width, self.height);
        let c1 = self.widths[0];
        let mut gap = f64::INFINITY;
        for c in 0..c1 {
            let plane = &self.pre1[c * w * h..(c + 1) * w * h];
            for y in 0..h {
                for x in 0..w {
                    let mut vals = [f64::NEG_INFINITY; 4];
                    for (n, (dy, dx)) in [(0, 0), (0, 1), (1, 0), (1, 1)].iter().enumerate() {
                        if y + dy < h && x + dx < w {
                            vals[n] = plane[(y + dy) * w + x + dx].max(0.0);
                        }
                    }
                    let win = vals[self.switches[c * w * h + y * w + x] as usize];
                    if win == 0.0 {
                        continue;
                    }
                    for (n, v) in vals.iter().enumerate() {
                        if n as u8 != self.switches[c * w * h + y * w + x] && v.is_finite() {
                            gap = gap.min(win - v);
                        }
                    }
                }
            }
        }
        gap
    }
}

fn conv_forward(layer: &ConvLayer, input: &[f64], w: usize, h: usize, out: &mut [f64]) {
    let plane = w * h;
    let k = layer.kernel;
    for_each_chunk(out, plane, |o, dst| {
        dst.iter_mut().for_each(|v| *v = layer.bias[o]);
        for c in 0..layer.in_channels {
            let src = &input[c * plane..(c + 1) * plane];
            for ty in 0..k {
                let dy = layer.tap_offset(ty);
                for tx in 0..k {
                    let dx = layer.tap_offset(tx);
                    let wt = layer.weight[((o * layer.in_channels + c) * k + ty) * k + tx];
                    if wt == 0.0 {
                        continue;
                    }
                    let x0 = (-dx).max(0) as usize;
                    let x1 = (w as i64 - dx).min(w as i64).max(0) as usize;
                    if x0 >= x1 {
                        continue;
                    }
                    for y in 0..h {
                        let sy = y as i64 + dy;
                        if sy < 0 || sy >= h as i64 {
                            continue;
                        }
                        let srow = &src[sy as usize * w..];
                        let drow = &mut dst[y * w..(y + 1) * w];
                        for x in x0..x1 {
                            drow[x] += wt * srow[(x as i64 + dx) as usize];
                        }
                    }
                }
            }
        }
    });
}

/// Accumulates weight/bias gradients and, when `d_input` is given, the input gradient.
fn conv_backward(
    layer: &ConvLayer,
    input: &[f64],
    d_out: &[f64],
    w: usize,
    h: usize,
    grad: &mut ConvLayer,
    d_input: Option<&mut [f64]>,
) {
    let plane = w * h;
    let k = layer.kernel;
    let per = layer.per_output();
    for_each_chunk2(&mut grad.weight, per, &mut grad.bias, 1, |o, dw, db| {
        let g = &d_out[o * plane..(o + 1) * plane];
        db[0] += g.iter().sum::<f64>();
        for c in 0..layer.in_channels {
            let src = &input[c * plane..(c + 1) * plane];
            for ty in 0..k {
                let dy = layer.tap_offset(ty);
                for tx in 0..k {
                    let dx = layer.tap_offset(tx);
                    let x0 = (-dx).max(0) as usize;
                    let x1 = (w as i64 - dx).min(w as i64).max(0) as usize;
                    let mut acc = 0.0;
                    for y in 0..h {
                        let sy = y as i64 + dy;
                        if sy < 0 || sy >= h as i64 || x0 >= x1 {
                            continue;
                        }
                        let srow = &src[sy as usize * w..];
                        let grow = &g[y * w..(y + 1) * w];
                        for x in x0..x1 {
                            acc += grow[x] * srow[(x as i64 + dx) as usize];
                        }
                    }
                    dw[(c * k + ty) * k + tx] += acc;
                }
            }
        }
    });
    if let Some(d_input) = d_input {
        for_each_chunk(d_input, plane, |c, dst| {
            for o in 0..layer.out_channels {
                let g = &d_out[o * plane..(o + 1) * plane];
                for ty in 0..k {
                    let dy = layer.tap_offset(ty);
                    for tx in 0..k {
                        let dx = layer.tap_offset(tx);
                        let wt = layer.weight[((o * layer.in_channels + c) * k + ty) * k + tx];
                        if wt == 0.0 {
                            continue;
                        }
                        let x0 = (-dx).max(0) as usize;
                        let x1 = (w as i64 - dx).min(w as i64).max(0) as usize;
                        if x0 >= x1 {
                            continue;
                        }
                        for y in 0..h {
                            let sy = y as i64 + dy;
                            if sy < 0 || sy >= h as i64 {
                                continue;
                            }
                            let grow = &g[y * w..(y + 1) * w];
                            let drow = &mut dst[sy as usize * w..(sy as usize + 1) * w];
                            for x in x0..x1 {
                                drow[(x as i64 + dx) as usize] += wt * grow[x];
                            }
                        }
                    }
                }
            }
        });
    }
}

fn gather_patch(layer: &ConvLayer, act: &[f64], w: usize, h: usize, q: [i64; 2], patch: &mut [f64]) {
    let k = layer.kernel;
    let plane = w * h;
    for c in 0..layer.in_channels {
        for ty in 0..k {
            let y = q[0] + layer.tap_offset(ty);
            for tx in 0..k {
                let x = q[1] + layer.tap_offset(tx);
                patch[(c * k + ty) * k + tx] = if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
                    act[c * plane + y as usize * w + x as usize]
                } else {
                    0.0
                };
            }
        }
    }
}

pub fn extract_trainable(
    image: &GrayImage,
    params: &ExtractorParams,
    grid: SampleGrid,
) -> Result<(DescriptorField, ExtractorCache)> {
    let (w, h) = (image.width, image.height);
    if w == 0 || h == 0 {
        return Err(Error::shape("empty image"));
    }
    let [c1, c2, dim] = params.widths();
    let plane = w * h;
    let input: Vec<f64> = image.pixels.iter().map(|v| v - 0.5).collect();

    let mut pre1 = vec![0.0; c1 * plane];
    conv_forward(&params.conv1, &input, w, h, &mut pre1);

    let mut pooled = vec![0.0; c1 * plane];
    let mut switches = vec![0u8; c1 * plane];
    for_each_chunk2(&mut pooled, plane, &mut switches, plane, |c, dst, sw| {
        let src = &pre1[c * plane..(c + 1) * plane];
        for y in 0..h {
            for x in 0..w {
                let mut best = f64::NEG_INFINITY;
                let mut arg = 0u8;
                for (n, (dy, dx)) in [(0, 0), (0, 1), (1, 0), (1, 1)].iter().enumerate() {
                    if y + dy < h && x + dx < w {
                        let v = src[(y + dy) * w + x + dx].max(0.0);
                        if v > best {
                            best = v;
                            arg = n as u8;
                        }
                    }
                }
                dst[y * w + x] = best;
                sw[y * w + x] = arg;
            }
        }
    });

    let mut pre2 = vec![0.0; c2 * plane];
    conv_forward(&params.conv2, &pooled, w, h, &mut pre2);
    let act2: Vec<f64> = pre2.iter().map(|v| v.max(0.0)).collect();

    let head = &params.head;
    let per = head.per_output();
    let positions: Vec<[i64; 2]> = grid.positions().collect();
    let mut values = vec![0.0; positions.len() * dim];
    let mut norms = vec![0.0; positions.len()];
    for_each_chunk2(&mut values, dim, &mut norms, 1, |s, z, norm| {
        let mut patch = vec![0.0; per];
        gather_patch(head, &act2, w, h, positions[s], &mut patch);
        for (o, zo) in z.iter_mut().enumerate() {
            let wrow = &head.weight[o * per..(o + 1) * per];
            *zo = head.bias[o] + wrow.iter().zip(&patch).map(|(a, b)| a * b).sum::<f64>();
        }
        norm[0] = l2_normalize(z);
    });
    if !values.iter().all(|v| v.is_finite()) || !norms.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("descriptor activations"));
    }
    let field = DescriptorField::new(grid, dim, values)?;
    let cache = ExtractorCache {
        width: w,
        height: h,
        grid,
        widths: [c1, c2, dim],
        input,
        pre1,
        pooled,
        switches,
        pre2,
        act2,
        norms,
        descriptors: field.values.clone(),
    };
    Ok((field, cache))
}

/// Accumulates the gradient of a loss w.r.t. the extractor weights into
/// `grads`, given the loss gradient w.r.t. the normalized descriptors.
pub fn extract_backward(
    grad_field: &[f64],
    cache: &ExtractorCache,
    params: &ExtractorParams,
    grads: &mut ExtractorParams,
) -> Result<()> {
    let [c1, c2, dim] = cache.widths;
    if params.widths() != cache.widths || grads.widths() != cache.widths {
        return Err(Error::shape("extractor widths differ from the forward cache"));
    }
    let n = cache.grid.len();
    if grad_field.len() != n * dim {
        return Err(Error::shape(format!(
            "descriptor gradient has {} values, cache expects {}",
            grad_field.len(),
            n * dim
        )));
    }
    params.check_finite()?;
    let (w, h) = (cache.width, cache.height);
    let plane = w * h;
    let head = &params.head;
    let per = head.per_output();
    let positions: Vec<[i64; 2]> = cache.grid.positions().collect();

    // Normalization.
    let mut d_pre = vec![0.0; n * dim];
    for s in 0..n {
        l2_normalize_backward(
            &cache.descriptors[s * dim..(s + 1) * dim],
            cache.norms[s],
            &grad_field[s * dim..(s + 1) * dim],
            &mut d_pre[s * dim..(s + 1) * dim],
        );
    }

    // Head weights: one output row at a time.
    for_each_chunk2(&mut grads.head.weight, per, &mut grads.head.bias, 1, |o, dw, db| {
        let mut patch = vec![0.0; per];
        for (s, q) in positions.iter().enumerate() {
            let g = d_pre[s * dim + o];
            if g == 0.0 {
                continue;
            }
            db[0] += g;
            gather_patch(head, &cache.act2, w, h, *q, &mut patch);
            for (a, b) in dw.iter_mut().zip(&patch) {
                *a += g * b;
            }
        }
    });

    // Head input gradient, scattered per input channel.
    let k = head.kernel;
    let mut d_act2 = vec![0.0; c2 * plane];
    for_each_chunk(&mut d_act2, plane, |c, dst| {
        for (s, q) in positions.iter().enumerate() {
            let g = &d_pre[s * dim..(s + 1) * dim];
            if g.iter().all(|v| *v == 0.0) {
                continue;
            }
            for ty in 0..k {
                let y = q[0] + head.tap_offset(ty);
                if y < 0 || y as usize >= h {
                    continue;
                }
                for tx in 0..k {
                    let x = q[1] + head.tap_offset(tx);
                    if x < 0 || x as usize >= w {
                        continue;
                    }
                    let t = (c * k + ty) * k + tx;
                    let mut acc = 0.0;
                    for (o, go) in g.iter().enumerate() {
                        acc += head.weight[o * per + t] * go;
                    }
                    dst[y as usize * w + x as usize] += acc;
                }
            }
        }
    });

    // ReLU 2.
    let d_pre2: Vec<f64> = d_act2
        .iter()
        .zip(&cache.pre2)
        .map(|(g, p)| if *p > 0.0 { *g } else { 0.0 })
        .collect();

    let mut d_pooled = vec![0.0; c1 * plane];
    conv_backward(
        &params.conv2,
        &cache.pooled,
        &d_pre2,
        w,
        h,
        &mut grads.conv2,
        Some(&mut d_pooled),
    );

    // Pool switches, then ReLU 1.
    let mut d_pre1 = vec![0.0; c1 * plane];
    for_each_chunk(&mut d_pre1, plane, |c, dst| {
        let g = &d_pooled[c * plane..(c + 1) * plane];
        let sw = &cache.switches[c * plane..(c + 1) * plane];
        for y in 0..h {
            for x in 0..w {
                let v = g[y * w + x];
                if v == 0.0 {
                    continue;
                }
                let n = sw[y * w + x] as usize;
                let (yy, xx) = (y + n / 2, x + n % 2);
                dst[yy * w + xx] += v;
            }
        }
        let pre = &cache.pre1[c * plane..(c + 1) * plane];
        for (d, p) in dst.iter_mut().zip(pre) {
            if *p <= 0.0 {
                *d = 0.0;
            }
        }
    });

    conv_backward(
        &params.conv1,
        &cache.input,
        &d_pre1,
        w,
        h,
        &mut grads.conv1,
        None,
    );
    Ok(())
}
