//! The feature-binding network: a small convolutional encoder feeding a
//! dominant head, a phantom head, and a binding head that fuses the two
//! prediction maps.

use crate::blend::BlendedSample;
use crate::error::{Error, Result};
use crate::grid::{ImageGrid, LabelMap, CHANNELS};
use crate::rng::Rng;

use super::layers::{relu, relu_backward, ConvGrad, ConvLayer, FeatMap};
use super::loss::{cross_entropy_with_grad, ppa_with_grad, LossBreakdown};

pub const ENCODER_DEPTH: usize = 3;
pub const DEFAULT_WIDTH: usize = 16;
pub const FBH_HIDDEN: usize = 16;

/// All learnable tensors.
///
/// Encoder: `ENCODER_DEPTH` 3×3 convolutions (3 → width → … → width) with
/// ReLU after each. The dominant head and the phantom head are single 1×1
/// convolutions width → n_classes. The binding head stacks two 1×1
/// convolutions (2·n_classes → hidden → n_classes) with a ReLU between,
/// reading the concatenated dominant and phantom logits.
#[derive(Debug, Clone, PartialEq)]
pub struct BindNetParams {
    pub n_classes: usize,
    pub width: usize,
    pub hidden: usize,
    pub encoder: Vec<ConvLayer>,
    pub head_t: ConvLayer,
    pub head_p: ConvLayer,
    pub fbh1: ConvLayer,
    pub fbh2: ConvLayer,
}

impl BindNetParams {
    /// All-zero weights; useful as a shape template.
    pub fn zeros(n_classes: usize, width: usize, hidden: usize) -> Self {
        let mut encoder = Vec::with_capacity(ENCODER_DEPTH);
        let mut in_ch = CHANNELS;
        for _ in 0..ENCODER_DEPTH {
            encoder.push(ConvLayer::zeros(in_ch, width, 3));
            in_ch = width;
        }
        BindNetParams {
            n_classes,
            width,
            hidden,
            encoder,
            head_t: ConvLayer::zeros(width, n_classes, 1),
            head_p: ConvLayer::zeros(width, n_classes, 1),
            fbh1: ConvLayer::zeros(2 * n_classes, hidden, 1),
            fbh2: ConvLayer::zeros(hidden, n_classes, 1),
        }
    }

    pub fn init(n_classes: usize, width: usize, rng: &mut Rng) -> Self {
        Self::init_with_hidden(n_classes, width, FBH_HIDDEN, rng)
    }

    pub fn init_with_hidden(n_classes: usize, width: usize, hidden: usize, rng: &mut Rng) -> Self {
        let mut params = Self::zeros(n_classes, width, hidden);
        let mut in_ch = CHANNELS;
        for layer in &mut params.encoder {
            *layer = ConvLayer::init(in_ch, params.width, 3, rng);
            in_ch = params.width;
        }
        params.head_t = ConvLayer::init(params.width, n_classes, 1, rng);
        params.head_p = ConvLayer::init(params.width, n_classes, 1, rng);
        params.fbh1 = ConvLayer::init(2 * n_classes, hidden, 1, rng);
        params.fbh2 = ConvLayer::init(hidden, n_classes, 1, rng);
        params
    }

    pub fn n_parameters(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Named parameter tensors in a fixed order (the checkpoint and
    /// optimizer order).
    pub fn tensors(&self) -> Vec<(String, &Vec<f64>)> {
        let mut out = Vec::new();
        for (i, layer) in self.encoder.iter().enumerate() {
            out.push((format!("enc{i}.weight"), &layer.weight));
            out.push((format!("enc{i}.bias"), &layer.bias));
        }
        out.push(("head_t.weight".into(), &self.head_t.weight));
        out.push(("head_t.bias".into(), &self.head_t.bias));
        out.push(("head_p.weight".into(), &self.head_p.weight));
        out.push(("head_p.bias".into(), &self.head_p.bias));
        out.push(("fbh1.weight".into(), &self.fbh1.weight));
        out.push(("fbh1.bias".into(), &self.fbh1.bias));
        out.push(("fbh2.weight".into(), &self.fbh2.weight));
        out.push(("fbh2.bias".into(), &self.fbh2.bias));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Vec<f64>)> {
        let mut out = Vec::new();
        for (i, layer) in self.encoder.iter_mut().enumerate() {
            out.push((format!("enc{i}.weight"), &mut layer.weight));
            out.push((format!("enc{i}.bias"), &mut layer.bias));
        }
        out.push(("head_t.weight".into(), &mut self.head_t.weight));
        out.push(("head_t.bias".into(), &mut self.head_t.bias));
        out.push(("head_p.weight".into(), &mut self.head_p.weight));
        out.push(("head_p.bias".into(), &mut self.head_p.bias));
        out.push(("fbh1.weight".into(), &mut self.fbh1.weight));
        out.push(("fbh1.bias".into(), &mut self.fbh1.bias));
        out.push(("fbh2.weight".into(), &mut self.fbh2.weight));
        out.push(("fbh2.bias".into(), &mut self.fbh2.bias));
        out
    }
}

/// The three logit maps the network emits for one input.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionMaps {
    /// Dominant-stream logits S_t.
    pub s_t: FeatMap,
    /// Phantom-stream logits S_p.
    pub s_p: FeatMap,
    /// Binding-head logits S_fb.
    pub s_fb: FeatMap,
}

/// Every intermediate tensor of one forward pass, in evaluation order.
pub struct ForwardCache {
    pub input: FeatMap,
    /// Pre-ReLU encoder outputs.
    pub enc_pre: Vec<FeatMap>,
    /// Post-ReLU encoder outputs; the last one feeds the heads.
    pub enc_post: Vec<FeatMap>,
    pub s_t: FeatMap,
    pub s_p: FeatMap,
    pub concat: FeatMap,
    pub fb_pre: FeatMap,
    pub fb_post: FeatMap,
    pub s_fb: FeatMap,
}

fn concat_channels(a: &FeatMap, b: &FeatMap) -> FeatMap {
    debug_assert_eq!(a.height(), b.height());
    debug_assert_eq!(a.width(), b.width());
    let (h, w) = (a.height(), a.width());
    let (ca, cb) = (a.channels(), b.channels());
    let mut out = FeatMap::zeros(h, w, ca + cb);
    for y in 0..h {
        for x in 0..w {
            let dst = out.pixel_mut(y, x);
            dst[..ca].copy_from_slice(a.pixel(y, x));
            dst[ca..].copy_from_slice(b.pixel(y, x));
        }
    }
    out
}

pub fn forward_cached(params: &BindNetParams, image: &ImageGrid) -> Result<ForwardCache> {
    let input = FeatMap::from_image(image);
    if input.channels() != CHANNELS {
        return Err(Error::InvalidConfig(format!(
            "expected {CHANNELS}-channel input, got {}",
            input.channels()
        )));
    }
    let mut enc_pre = Vec::with_capacity(params.encoder.len());
    let mut enc_post = Vec::with_capacity(params.encoder.len());
    let mut cur = input.clone();
    for layer in &params.encoder {
        let pre = layer.forward(&cur);
        let post = relu(&pre);
        enc_pre.push(pre);
        cur = post.clone();
        enc_post.push(post);
    }
    let features = enc_post.last().expect("non-empty encoder");
    let s_t = params.head_t.forward(features);
    let s_p = params.head_p.forward(features);
    let concat = concat_channels(&s_t, &s_p);
    let fb_pre = params.fbh1.forward(&concat);
    let fb_post = relu(&fb_pre);
    let s_fb = params.fbh2.forward(&fb_post);
    Ok(ForwardCache {
        input,
        enc_pre,
        enc_post,
        s_t,
        s_p,
        concat,
        fb_pre,
        fb_post,
        s_fb,
    })
}

/// Run the network on one image and return the three logit maps.
pub fn forward(params: &BindNetParams, image: &ImageGrid) -> Result<PredictionMaps> {
    let cache = forward_cached(params, image)?;
    Ok(PredictionMaps {
        s_t: cache.s_t,
        s_p: cache.s_p,
        s_fb: cache.s_fb,
    })
}

/// Gradients for every tensor of [`BindNetParams`]; also used as the
/// optimizer's velocity storage.
#[derive(Debug, Clone, PartialEq)]
pub struct BindNetGrads {
    pub encoder: Vec<ConvGrad>,
    pub head_t: ConvGrad,
    pub head_p: ConvGrad,
    pub fbh1: ConvGrad,
    pub fbh2: ConvGrad,
}

impl BindNetGrads {
    pub fn zeros_like(params: &BindNetParams) -> Self {
        BindNetGrads {
            encoder: params.encoder.iter().map(ConvGrad::zeros_like).collect(),
            head_t: ConvGrad::zeros_like(&params.head_t),
            head_p: ConvGrad::zeros_like(&params.head_p),
            fbh1: ConvGrad::zeros_like(&params.fbh1),
            fbh2: ConvGrad::zeros_like(&params.fbh2),
        }
    }

    pub fn tensors(&self) -> Vec<(String, &Vec<f64>)> {
        let mut out = Vec::new();
        for (i, g) in self.encoder.iter().enumerate() {
            out.push((format!("enc{i}.weight"), &g.weight));
            out.push((format!("enc{i}.bias"), &g.bias));
        }
        out.push(("head_t.weight".into(), &self.head_t.weight));
        out.push(("head_t.bias".into(), &self.head_t.bias));
        out.push(("head_p.weight".into(), &self.head_p.weight));
        out.push(("head_p.bias".into(), &self.head_p.bias));
        out.push(("fbh1.weight".into(), &self.fbh1.weight));
        out.push(("fbh1.bias".into(), &self.fbh1.bias));
        out.push(("fbh2.weight".into(), &self.fbh2.weight));
        out.push(("fbh2.bias".into(), &self.fbh2.bias));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Vec<f64>)> {
        let mut out = Vec::new();
        for (i, g) in self.encoder.iter_mut().enumerate() {
            out.push((format!("enc{i}.weight"), &mut g.weight));
            out.push((format!("enc{i}.bias"), &mut g.bias));
        }
        out.push(("head_t.weight".into(), &mut self.head_t.weight));
        out.push(("head_t.bias".into(), &mut self.head_t.bias));
        out.push(("head_p.weight".into(), &mut self.head_p.weight));
        out.push(("head_p.bias".into(), &mut self.head_p.bias));
        out.push(("fbh1.weight".into(), &mut self.fbh1.weight));
        out.push(("fbh1.bias".into(), &mut self.fbh1.bias));
        out.push(("fbh2.weight".into(), &mut self.fbh2.weight));
        out.push(("fbh2.bias".into(), &mut self.fbh2.bias));
        out
    }

    /// Entry-wise `self += other`, in the fixed tensor order.
    pub fn add_assign(&mut self, other: &BindNetGrads) {
        for ((_, a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for (_, t) in self.tensors_mut() {
            for v in t.iter_mut() {
                *v *= factor;
            }
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|(_, t)| t.iter())
            .fold(0.0f64, |m, &v| m.max(v.abs()))
    }
}

/// Which objective drives the backward pass.
pub enum StageTarget<'a> {
    /// Joint supervision of the binding, dominant, and phantom streams on
    /// a blended sample (the image comes from the sample itself).
    Stage1(&'a BlendedSample),
    /// Dominant-stream supervision plus phantom suppression on a clean
    /// sample.
    Stage2(&'a LabelMap),
    /// Dominant-stream supervision only (plain segmentation baseline).
    Plain(&'a LabelMap),
}

/// Reverse-mode gradients of the selected stage loss for one input.
///
/// Returns the loss breakdown alongside gradients for every parameter
/// tensor. For `Stage2`/`Plain` the binding head receives no gradient at
/// all, since the loss never reads its output.
pub fn backward(
    params: &BindNetParams,
    image: &ImageGrid,
    target: StageTarget<'_>,
    ignore_index: u8,
) -> Result<(LossBreakdown, BindNetGrads)> {
    let cache = forward_cached(params, image)?;
    let n = params.n_classes;

    // Per-logit-map gradients plus the loss terms.
    let (loss, mut d_s_t, d_s_p, d_s_fb) = match target {
        StageTarget::Stage1(sample) => {
            let delta = sample.delta;
            let (l_fb, d_fb) =
                cross_entropy_with_grad(&cache.s_fb, &sample.gt_dominant, ignore_index)?;
            let (l_t, mut d_t) =
                cross_entropy_with_grad(&cache.s_t, &sample.gt_dominant, ignore_index)?;
            let (l_p, mut d_p) =
                cross_entropy_with_grad(&cache.s_p, &sample.gt_phantom, ignore_index)?;
            for v in d_t.data_mut() {
                *v *= delta;
            }
            for v in d_p.data_mut() {
                *v *= 1.0 - delta;
            }
            let loss = LossBreakdown {
                l_fb,
                l_t,
                l_p,
                l_ppa: 0.0,
                total: l_fb + delta * l_t + (1.0 - delta) * l_p,
                delta,
            };
            (loss, d_t, d_p, Some(d_fb))
        }
        StageTarget::Stage2(target) => {
            let (l_t, d_t) = cross_entropy_with_grad(&cache.s_t, target, ignore_index)?;
            let (l_ppa, d_p) = ppa_with_grad(&cache.s_p);
            let loss = LossBreakdown {
                l_fb: 0.0,
                l_t,
                l_p: 0.0,
                l_ppa,
                total: l_t + l_ppa,
                delta: 1.0,
            };
            (loss, d_t, d_p, None)
        }
        StageTarget::Plain(target) => {
            let (l_t, d_t) = cross_entropy_with_grad(&cache.s_t, target, ignore_index)?;
            let loss = LossBreakdown {
                l_fb: 0.0,
                l_t,
                l_p: 0.0,
                l_ppa: 0.0,
                total: l_t,
                delta: 1.0,
            };
            let d_p = FeatMap::zeros(cache.s_p.height(), cache.s_p.width(), n);
            (loss, d_t, d_p, None)
        }
    };
    let mut d_s_p = d_s_p;

    let mut grads = BindNetGrads::zeros_like(params);

    // Binding head (only contributes when its output is in the loss).
    if let Some(d_s_fb) = d_s_fb {
        let d_fb_post = params.fbh2.backward(&cache.fb_post, &d_s_fb, &mut grads.fbh2);
        let d_fb_pre = relu_backward(&cache.fb_pre, &d_fb_post);
        let d_concat = params.fbh1.backward(&cache.concat, &d_fb_pre, &mut grads.fbh1);
        // Split the concat gradient back onto the two logit maps.
        let (h, w) = (d_concat.height(), d_concat.width());
        for y in 0..h {
            for x in 0..w {
                let src = d_concat.pixel(y, x);
                let dt = d_s_t.pixel_mut(y, x);
                for (d, &v) in dt.iter_mut().zip(&src[..n]) {
                    *d += v;
                }
                let dp = d_s_p.pixel_mut(y, x);
                for (d, &v) in dp.iter_mut().zip(&src[n..]) {
                    *d += v;
                }
            }
        }
    }

    // Heads down to the shared feature map.
    let features = cache.enc_post.last().expect("non-empty encoder");
    let d_feat_t = params.head_t.backward(features, &d_s_t, &mut grads.head_t);
    let d_feat_p = params.head_p.backward(features, &d_s_p, &mut grads.head_p);
    let mut d_cur = d_feat_t;
    for (d, &v) in d_cur.data_mut().iter_mut().zip(d_feat_p.data()) {
        *d += v;
    }

    // Encoder stack in reverse.
    for i in (0..params.encoder.len()).rev() {
        let d_pre = relu_backward(&cache.enc_pre[i], &d_cur);
        let input = if i == 0 {
            &cache.input
        } else {
            &cache.enc_post[i - 1]
        };
        d_cur = params.encoder[i].backward(input, &d_pre, &mut grads.encoder[i]);
    }

    Ok((loss, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use rand::Rng as _;

    fn random_image(h: usize, w: usize, seed: u64) -> ImageGrid {
        let mut rng = rng_from_seed(seed);
        let data = (0..h * w * CHANNELS).map(|_| rng.gen::<f64>()).collect();
        ImageGrid::from_data(h, w, data).unwrap()
    }

    #[test]
    fn zero_params_give_zero_logits() {
        let params = BindNetParams::zeros(3, 8, 16);
        let preds = forward(&params, &random_image(5, 5, 1)).unwrap();
        assert!(preds.s_t.data().iter().all(|&v| v == 0.0));
        assert!(preds.s_p.data().iter().all(|&v| v == 0.0));
        assert!(preds.s_fb.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_shapes_follow_input() {
        let params = BindNetParams::init(4, 8, &mut rng_from_seed(2));
        let preds = forward(&params, &random_image(6, 9, 3)).unwrap();
        for m in [&preds.s_t, &preds.s_p, &preds.s_fb] {
            assert_eq!(m.height(), 6);
            assert_eq!(m.width(), 9);
            assert_eq!(m.channels(), 4);
        }
    }

    #[test]
    fn forward_is_byte_stable() {
        let params = BindNetParams::init(3, 8, &mut rng_from_seed(4));
        let image = random_image(8, 8, 5);
        let a = forward(&params, &image).unwrap();
        let b = forward(&params, &image).unwrap();
        assert_eq!(a.s_t, b.s_t);
        assert_eq!(a.s_p, b.s_p);
        assert_eq!(a.s_fb, b.s_fb);
        // And across a fresh init with the same seed.
        let params2 = BindNetParams::init(3, 8, &mut rng_from_seed(4));
        let c = forward(&params2, &image).unwrap();
        assert_eq!(a.s_fb, c.s_fb);
    }

    /// Full-network oracle: chain the naive per-layer loops through the
    /// same topology.
    #[test]
    fn forward_matches_composition_of_layer_forwards() {
        let params = BindNetParams::init(3, 6, &mut rng_from_seed(6));
        let image = random_image(8, 8, 7);
        let preds = forward(&params, &image).unwrap();

        let mut cur = FeatMap::from_image(&image);
        for layer in &params.encoder {
            cur = relu(&layer.forward(&cur));
        }
        let s_t = params.head_t.forward(&cur);
        let s_p = params.head_p.forward(&cur);
        let concat = concat_channels(&s_t, &s_p);
        let s_fb = params.fbh2.forward(&relu(&params.fbh1.forward(&concat)));
        for (a, b) in preds.s_fb.data().iter().zip(s_fb.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn parameter_count_is_stable() {
        let params = BindNetParams::zeros(21, 16, 16);
        // enc: 9·(3·16 + 16·16 + 16·16) weights + 3·16 biases
        let enc = 9 * (3 * 16 + 16 * 16 + 16 * 16) + 3 * 16;
        let heads = 2 * (16 * 21 + 21);
        let fbh = (42 * 16 + 16) + (16 * 21 + 21);
        assert_eq!(params.n_parameters(), enc + heads + fbh);
    }

    #[test]
    fn tensor_lists_align() {
        let params = BindNetParams::init(3, 4, &mut rng_from_seed(8));
        let grads = BindNetGrads::zeros_like(&params);
        let pt = params.tensors();
        let gt = grads.tensors();
        assert_eq!(pt.len(), gt.len());
        for ((pn, pv), (gn, gv)) in pt.iter().zip(&gt) {
            assert_eq!(pn, gn);
            assert_eq!(pv.len(), gv.len());
        }
    }

    #[test]
    fn grad_accumulation_adds_entrywise() {
        let params = BindNetParams::init(2, 4, &mut rng_from_seed(9));
        let image = random_image(4, 4, 10);
        let label = LabelMap::filled(4, 4, 1);
        let (_, g1) = backward(&params, &image, StageTarget::Plain(&label), 255).unwrap();
        let mut acc = BindNetGrads::zeros_like(&params);
        acc.add_assign(&g1);
        acc.add_assign(&g1);
        let mut doubled = g1.clone();
        doubled.scale(2.0);
        assert_eq!(acc, doubled);
    }
}
