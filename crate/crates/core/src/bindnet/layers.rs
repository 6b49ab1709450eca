//! Dense f64 feature maps and the two layer kinds the network is built
//! from: same-padded stride-1 convolutions and ReLU.

use rand::Rng as _;
use rand_distr::Distribution as _;

use crate::error::{Error, Result};
use crate::grid::ImageGrid;
use crate::rng::Rng;

/// h×w×c feature map in HWC order (channel index moves fastest).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatMap {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl FeatMap {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        FeatMap {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn from_data(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::InvalidConfig(format!(
                "feature map data length {} does not match {height}x{width}x{channels}",
                data.len()
            )));
        }
        Ok(FeatMap {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn from_image(image: &ImageGrid) -> Self {
        FeatMap {
            height: image.height(),
            width: image.width(),
            channels: crate::grid::CHANNELS,
            data: image.data().to_vec(),
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Channel vector at one pixel.
    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        let base = (y * self.width + x) * self.channels;
        &self.data[base..base + self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, y: usize, x: usize) -> &mut [f64] {
        let base = (y * self.width + x) * self.channels;
        &mut self.data[base..base + self.channels]
    }
}

/// Stride-1 convolution with same padding. Weights are stored as
/// `[ky][kx][in][out]` so the per-tap kernel slice is an `in×out` matrix
/// and the innermost loop runs contiguously over output channels.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub in_ch: usize,
    pub out_ch: usize,
    pub ksize: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvLayer {
    pub fn zeros(in_ch: usize, out_ch: usize, ksize: usize) -> Self {
        assert!(ksize % 2 == 1, "kernel size must be odd for same padding");
        ConvLayer {
            in_ch,
            out_ch,
            ksize,
            weight: vec![0.0; ksize * ksize * in_ch * out_ch],
            bias: vec![0.0; out_ch],
        }
    }

    /// He-style init: normal with variance 2 / fan_in, zero bias.
    pub fn init(in_ch: usize, out_ch: usize, ksize: usize, rng: &mut Rng) -> Self {
        let mut layer = ConvLayer::zeros(in_ch, out_ch, ksize);
        let fan_in = (ksize * ksize * in_ch) as f64;
        let normal = rand_distr::Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("finite stddev");
        for w in &mut layer.weight {
            *w = normal.sample(rng);
        }
        layer
    }

    /// Random small weights and biases for gradient-check fixtures.
    pub fn init_with_bias(in_ch: usize, out_ch: usize, ksize: usize, rng: &mut Rng) -> Self {
        let mut layer = ConvLayer::init(in_ch, out_ch, ksize, rng);
        for b in &mut layer.bias {
            *b = 0.2 * rng.gen::<f64>() - 0.1;
        }
        layer
    }

    #[inline]
    fn tap(&self, ky: usize, kx: usize) -> &[f64] {
        let per_tap = self.in_ch * self.out_ch;
        let base = (ky * self.ksize + kx) * per_tap;
        &self.weight[base..base + per_tap]
    }

    #[inline]
    fn tap_mut(weight: &mut [f64], ksize: usize, in_ch: usize, out_ch: usize, ky: usize, kx: usize) -> &mut [f64] {
        let per_tap = in_ch * out_ch;
        let base = (ky * ksize + kx) * per_tap;
        &mut weight[base..base + per_tap]
    }

    pub fn forward(&self, input: &FeatMap) -> FeatMap {
        assert_eq!(input.channels, self.in_ch, "input channel mismatch");
        let (h, w) = (input.height, input.width);
        let pad = (self.ksize / 2) as isize;
        let mut out = FeatMap::zeros(h, w, self.out_ch);
        for y in 0..h {
            for x in 0..w {
                out.pixel_mut(y, x).copy_from_slice(&self.bias);
            }
        }
        for ky in 0..self.ksize {
            let dy = ky as isize - pad;
            for kx in 0..self.ksize {
                let dx = kx as isize - pad;
                let tap = self.tap(ky, kx);
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for x in 0..w {
                        let sx = x as isize + dx;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let inp = input.pixel(sy as usize, sx as usize);
                        let dst = out.pixel_mut(y, x);
                        for (i, &v) in inp.iter().enumerate() {
                            let row = &tap[i * self.out_ch..(i + 1) * self.out_ch];
                            for (d, &wgt) in dst.iter_mut().zip(row) {
                                *d += v * wgt;
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Accumulate weight/bias gradients into `grad` and return the
    /// gradient with respect to the input.
    pub fn backward(&self, input: &FeatMap, d_out: &FeatMap, grad: &mut ConvGrad) -> FeatMap {
        assert_eq!(d_out.channels, self.out_ch);
        assert_eq!(input.channels, self.in_ch);
        let (h, w) = (input.height, input.width);
        let pad = (self.ksize / 2) as isize;
        let mut d_in = FeatMap::zeros(h, w, self.in_ch);
        for y in 0..h {
            for x in 0..w {
                let d = d_out.pixel(y, x);
                for (g, &dv) in grad.bias.iter_mut().zip(d) {
                    *g += dv;
                }
            }
        }
        for ky in 0..self.ksize {
            let dy = ky as isize - pad;
            for kx in 0..self.ksize {
                let dx = kx as isize - pad;
                let tap = self.tap(ky, kx);
                let gtap =
                    ConvLayer::tap_mut(&mut grad.weight, self.ksize, self.in_ch, self.out_ch, ky, kx);
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for x in 0..w {
                        let sx = x as isize + dx;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let inp = input.pixel(sy as usize, sx as usize);
                        let d = d_out.pixel(y, x);
                        let din = d_in.pixel_mut(sy as usize, sx as usize);
                        for (i, (&v, di)) in inp.iter().zip(din.iter_mut()).enumerate() {
                            let row = &tap[i * self.out_ch..(i + 1) * self.out_ch];
                            let grow = &mut gtap[i * self.out_ch..(i + 1) * self.out_ch];
                            let mut acc = 0.0;
                            for ((&dv, &wgt), g) in d.iter().zip(row).zip(grow.iter_mut()) {
                                acc += dv * wgt;
                                *g += v * dv;
                            }
                            *di += acc;
                        }
                    }
                }
            }
        }
        d_in
    }
}

/// Gradient (or momentum-velocity) buffers matching one [`ConvLayer`].
#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrad {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvGrad {
    pub fn zeros_like(layer: &ConvLayer) -> Self {
        ConvGrad {
            weight: vec![0.0; layer.weight.len()],
            bias: vec![0.0; layer.bias.len()],
        }
    }
}

pub fn relu(input: &FeatMap) -> FeatMap {
    let mut out = input.clone();
    for v in out.data.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    out
}

/// ReLU input-gradient: passes `d_out` where the pre-activation was
/// strictly positive.
pub fn relu_backward(pre: &FeatMap, d_out: &FeatMap) -> FeatMap {
    let mut d_in = d_out.clone();
    for (d, &p) in d_in.data.iter_mut().zip(&pre.data) {
        if p <= 0.0 {
            *d = 0.0;
        }
    }
    d_in
}
