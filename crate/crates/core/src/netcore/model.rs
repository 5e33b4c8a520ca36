//! Detector: stride-2 conv stages down, nearest-upsample+conv stages up,
//! then three 3x3+1x1 heads (class heatmaps, center offsets, box sizes).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{relu, relu_backward, sigmoid, upsample2x, upsample2x_backward, Conv2d};
use super::loss::{
    focal_loss, focal_loss_backward, masked_l1_loss, masked_l1_loss_backward, LossBreakdown,
    LossWeights,
};
use super::tensor::{Scalar, Tensor};
use super::NetError;
use crate::codec::{EncodedTarget, HeadMaps};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Input image side in pixels.
    pub in_size: usize,
    pub num_classes: usize,
    /// Output channels of the stride-2 downsampling convs.
    pub down_channels: Vec<usize>,
    /// Output channels of the upsample+conv stages.
    pub up_channels: Vec<usize>,
    /// Hidden width of each head's 3x3 trunk conv.
    pub head_channels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_size: 480,
            num_classes: 5,
            down_channels: vec![16, 32, 64, 64],
            up_channels: vec![64, 32],
            head_channels: 32,
        }
    }
}

impl ModelConfig {
    /// Pixels per output cell: each down stage halves, each up stage doubles.
    pub fn stride_out(&self) -> usize {
        1 << (self.down_channels.len() - self.up_channels.len())
    }

    pub fn map_side(&self) -> usize {
        self.in_size / self.stride_out()
    }

    pub fn validate(&self) -> Result<(), NetError> {
        let err = |m: String| Err(NetError::InvalidConfig(m));
        if self.down_channels.is_empty() {
            return err("at least one downsampling stage required".into());
        }
        if self.up_channels.len() >= self.down_channels.len() {
            return err("need fewer up stages than down stages".into());
        }
        if self.in_size == 0 || self.in_size % (1 << self.down_channels.len()) != 0 {
            return err(format!(
                "in_size {} must be divisible by {}",
                self.in_size,
                1 << self.down_channels.len()
            ));
        }
        if self.num_classes == 0 || self.head_channels == 0 {
            return err("num_classes and head_channels must be positive".into());
        }
        if self
            .down_channels
            .iter()
            .chain(&self.up_channels)
            .any(|c| *c == 0)
        {
            return err("channel counts must be positive".into());
        }
        Ok(())
    }
}

/// Post-activation head outputs: heatmap after sigmoid, sizes after exp,
/// offsets raw. All `[c, side, side]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Outputs<T = f32> {
    pub heatmap: Tensor<T>,
    pub offset: Tensor<T>,
    pub size: Tensor<T>,
}

impl Outputs<f32> {
    pub fn into_head_maps(self) -> HeadMaps {
        let side = self.heatmap.shape()[1];
        let classes = self.heatmap.shape()[0];
        HeadMaps::new(
            classes,
            side,
            self.heatmap.into_data(),
            self.offset.into_data(),
            self.size.into_data(),
        )
        .expect("consistent by construction")
    }
}

/// Parameter gradients, ordered exactly like `DetectorModel::params()`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T = f32> {
    pub tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.all_finite())
    }
}

const HEAD_NAMES: [&str; 3] = ["heat", "offset", "size"];

#[derive(Debug, Clone, PartialEq)]
struct Head<T> {
    trunk: Conv2d<T>,
    out: Conv2d<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorModel<T = f32> {
    pub config: ModelConfig,
    down: Vec<Conv2d<T>>,
    up: Vec<Conv2d<T>>,
    heads: Vec<Head<T>>,
}

impl<T: Scalar> DetectorModel<T> {
    /// Fresh init: He-uniform weights, zero biases, except the heatmap output
    /// bias which starts at ln(1/9) so initial center probabilities sit near
    /// 0.1 and the focal loss is not swamped by background cells.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, NetError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut down = Vec::with_capacity(config.down_channels.len());
        let mut in_c = 1;
        for &c in &config.down_channels {
            down.push(Conv2d::init(in_c, c, 3, 2, 1, &mut rng));
            in_c = c;
        }
        let mut up = Vec::with_capacity(config.up_channels.len());
        for &c in &config.up_channels {
            up.push(Conv2d::init(in_c, c, 3, 1, 1, &mut rng));
            in_c = c;
        }
        let head_outs = [config.num_classes, 2, 2];
        let mut heads = Vec::with_capacity(3);
        for out_c in head_outs {
            let trunk = Conv2d::init(in_c, config.head_channels, 3, 1, 1, &mut rng);
            let out = Conv2d::init(config.head_channels, out_c, 1, 1, 0, &mut rng);
            heads.push(Head { trunk, out });
        }
        let bias0 = T::from_f64((0.1f64 / 0.9).ln());
        heads[0].out.bias.data_mut().fill(bias0);
        Ok(Self {
            config,
            down,
            up,
            heads,
        })
    }

    pub fn cast<U: Scalar>(&self) -> DetectorModel<U> {
        DetectorModel {
            config: self.config.clone(),
            down: self.down.iter().map(|c| c.cast()).collect(),
            up: self.up.iter().map(|c| c.cast()).collect(),
            heads: self
                .heads
                .iter()
                .map(|h| Head {
                    trunk: h.trunk.cast(),
                    out: h.out.cast(),
                })
                .collect(),
        }
    }

    fn convs(&self) -> Vec<(String, &Conv2d<T>)> {
        let mut v = Vec::new();
        for (i, c) in self.down.iter().enumerate() {
            v.push((format!("down{i}"), c));
        }
        for (i, c) in self.up.iter().enumerate() {
            v.push((format!("up{i}"), c));
        }
        for (name, h) in HEAD_NAMES.iter().zip(&self.heads) {
            v.push((format!("{name}.trunk"), &h.trunk));
            v.push((format!("{name}.out"), &h.out));
        }
        v
    }

    fn convs_mut(&mut self) -> Vec<(String, &mut Conv2d<T>)> {
        let mut v = Vec::new();
        for (i, c) in self.down.iter_mut().enumerate() {
            v.push((format!("down{i}"), c));
        }
        for (i, c) in self.up.iter_mut().enumerate() {
            v.push((format!("up{i}"), c));
        }
        for (name, h) in HEAD_NAMES.iter().zip(self.heads.iter_mut()) {
            v.push((format!("{name}.trunk"), &mut h.trunk));
            v.push((format!("{name}.out"), &mut h.out));
        }
        v
    }

    /// `<conv>.weight` / `<conv>.bias` pairs in a stable order.
    pub fn param_names(&self) -> Vec<String> {
        self.convs()
            .iter()
            .flat_map(|(n, _)| [format!("{n}.weight"), format!("{n}.bias")])
            .collect()
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        self.convs()
            .into_iter()
            .flat_map(|(_, c)| [&c.weight, &c.bias])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut v = Vec::new();
        for (_, conv) in self.convs_mut() {
            let Conv2d { weight, bias, .. } = conv;
            v.push(weight);
            v.push(bias);
        }
        v
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    fn check_input(&self, input: &Tensor<T>) -> Result<(), NetError> {
        let n = self.config.in_size;
        if input.shape() != [1, n, n] {
            return Err(NetError::ShapeMismatch {
                expected: format!("[1, {n}, {n}]"),
                got: format!("{:?}", input.shape()),
            });
        }
        Ok(())
    }

    pub fn forward(&self, input: &Tensor<T>) -> Result<Outputs<T>, NetError> {
        Ok(self.forward_cached(input)?.0)
    }

    fn forward_cached(&self, input: &Tensor<T>) -> Result<(Outputs<T>, Cache<T>), NetError> {
        self.check_input(input)?;
        let mut cache = Cache::default();
        let mut x = input.clone();
        for conv in &self.down {
            cache.down_in.push(x.clone());
            let y = relu(&conv.forward(&x));
            cache.down_out.push(y.clone());
            x = y;
        }
        for conv in &self.up {
            cache.up_in.push(x.clone());
            let u = upsample2x(&x);
            cache.up_mid.push(u.clone());
            let y = relu(&conv.forward(&u));
            cache.up_out.push(y.clone());
            x = y;
        }
        cache.feature = x;
        let mut raw = Vec::with_capacity(3);
        for head in &self.heads {
            let t = relu(&head.trunk.forward(&cache.feature));
            let o = head.out.forward(&t);
            cache.head_trunk_out.push(t);
            raw.push(o);
        }
        let size_raw = raw.pop().expect("three heads");
        let offset = raw.pop().expect("three heads");
        let heat_raw = raw.pop().expect("three heads");
        let outputs = Outputs {
            heatmap: sigmoid(&heat_raw),
            offset,
            size: size_raw.map(|v| v.exp()),
        };
        Ok((outputs, cache))
    }

    /// Forward, loss, and full backprop for one image. `target` must be laid
    /// out on this model's output grid.
    pub fn backward(
        &self,
        input: &Tensor<T>,
        target: &EncodedTarget,
        weights: &LossWeights,
    ) -> Result<(LossBreakdown, Gradients<T>), NetError> {
        let side = self.config.map_side();
        if target.side != side || target.classes != self.config.num_classes {
            return Err(NetError::ShapeMismatch {
                expected: format!("target {}x{side}x{side}", self.config.num_classes),
                got: format!("target {}x{}x{}", target.classes, target.side, target.side),
            });
        }
        let (outputs, cache) = self.forward_cached(input)?;
        let (alpha, beta) = (weights.focal_alpha as f64, weights.focal_beta as f64);

        let heat_t: Vec<T> = target.heatmap.iter().map(|v| T::from_f64(*v as f64)).collect();
        let off_t: Vec<T> = target.offset.iter().map(|v| T::from_f64(*v as f64)).collect();
        let size_t: Vec<T> = target.size.iter().map(|v| T::from_f64(*v as f64)).collect();

        let l_heat = focal_loss(outputs.heatmap.data(), &heat_t, alpha, beta);
        let l_off = masked_l1_loss(outputs.offset.data(), &off_t, &target.center_mask);
        let l_size = masked_l1_loss(outputs.size.data(), &size_t, &target.center_mask);
        let breakdown = LossBreakdown {
            heatmap: l_heat.into_f64(),
            offset: l_off.into_f64(),
            size: l_size.into_f64(),
            total: weights.heatmap as f64 * l_heat.into_f64()
                + weights.offset as f64 * l_off.into_f64()
                + weights.size as f64 * l_size.into_f64(),
        };
        if !breakdown.is_finite() {
            return Err(NetError::NonFiniteLoss(format!("{breakdown:?}")));
        }

        let w_heat = T::from_f64(weights.heatmap as f64);
        let w_off = T::from_f64(weights.offset as f64);
        let w_size = T::from_f64(weights.size as f64);

        // Head-output gradients, post-activation.
        let g_heat_sig: Vec<T> =
            focal_loss_backward(outputs.heatmap.data(), &heat_t, alpha, beta)
                .into_iter()
                .map(|g| g * w_heat)
                .collect();
        let g_off: Vec<T> =
            masked_l1_loss_backward(outputs.offset.data(), &off_t, &target.center_mask)
                .into_iter()
                .map(|g| g * w_off)
                .collect();
        let g_size_post: Vec<T> =
            masked_l1_loss_backward(outputs.size.data(), &size_t, &target.center_mask)
                .into_iter()
                .map(|g| g * w_size)
                .collect();

        // Through the output nonlinearities.
        let g_heat_raw: Vec<T> = outputs
            .heatmap
            .data()
            .iter()
            .zip(&g_heat_sig)
            .map(|(y, g)| *g * *y * (T::one() - *y))
            .collect();
        let g_size_raw: Vec<T> = outputs
            .size
            .data()
            .iter()
            .zip(&g_size_post)
            .map(|(y, g)| *g * *y)
            .collect();

        let head_grads_out = [
            Tensor::from_vec(outputs.heatmap.shape(), g_heat_raw).expect("shape"),
            Tensor::from_vec(outputs.offset.shape(), g_off).expect("shape"),
            Tensor::from_vec(outputs.size.shape(), g_size_raw).expect("shape"),
        ];

        // Backprop through heads into the shared feature map.
        let mut g_feature = Tensor::zeros(cache.feature.shape());
        let mut head_param_grads = Vec::with_capacity(3);
        for ((head, trunk_out), g_out) in self
            .heads
            .iter()
            .zip(&cache.head_trunk_out)
            .zip(head_grads_out.iter())
        {
            let (g_trunk_out, gw_out, gb_out) = head.out.backward(trunk_out, g_out);
            let g_trunk_pre = relu_backward(trunk_out, &g_trunk_out);
            let (g_feat, gw_trunk, gb_trunk) = head.trunk.backward(&cache.feature, &g_trunk_pre);
            for (a, b) in g_feature.data_mut().iter_mut().zip(g_feat.data()) {
                *a += *b;
            }
            head_param_grads.push([gw_trunk, gb_trunk, gw_out, gb_out]);
        }

        // Up stages in reverse: y = relu(conv(upsample(x))).
        let mut g = g_feature;
        let mut up_grads = Vec::with_capacity(self.up.len());
        for i in (0..self.up.len()).rev() {
            let g_post = relu_backward(&cache.up_out[i], &g);
            let (g_mid, gw, gb) = self.up[i].backward(&cache.up_mid[i], &g_post);
            g = upsample2x_backward(&g_mid, cache.up_in[i].shape());
            up_grads.push((gw, gb));
        }
        up_grads.reverse();

        // Down stages in reverse: y = relu(conv(x)).
        let mut down_grads = Vec::with_capacity(self.down.len());
        for i in (0..self.down.len()).rev() {
            let g_post = relu_backward(&cache.down_out[i], &g);
            let (g_in, gw, gb) = self.down[i].backward(&cache.down_in[i], &g_post);
            g = g_in;
            down_grads.push((gw, gb));
        }
        down_grads.reverse();

        // Assemble in params() order: down, up, then per-head trunk/out.
        let mut tensors = Vec::with_capacity(2 * (self.down.len() + self.up.len() + 6));
        for (gw, gb) in down_grads {
            tensors.push(gw);
            tensors.push(gb);
        }
        for (gw, gb) in up_grads {
            tensors.push(gw);
            tensors.push(gb);
        }
        for [gw_t, gb_t, gw_o, gb_o] in head_param_grads {
            tensors.push(gw_t);
            tensors.push(gb_t);
            tensors.push(gw_o);
            tensors.push(gb_o);
        }
        Ok((breakdown, Gradients { tensors }))
    }
}

#[derive(Debug)]
struct Cache<T> {
    down_in: Vec<Tensor<T>>,
    down_out: Vec<Tensor<T>>,
    up_in: Vec<Tensor<T>>,
    up_mid: Vec<Tensor<T>>,
    up_out: Vec<Tensor<T>>,
    feature: Tensor<T>,
    head_trunk_out: Vec<Tensor<T>>,
}

impl<T: Scalar> Default for Cache<T> {
    fn default() -> Self {
        Self {
            down_in: Vec::new(),
            down_out: Vec::new(),
            up_in: Vec::new(),
            up_mid: Vec::new(),
            up_out: Vec::new(),
            feature: Tensor::zeros(&[0]),
            head_trunk_out: Vec::new(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{encode_targets, CodecConfig};
    use crate::geometry::{Annotation, BBox};
    use rand::Rng;
    use rand::SeedableRng;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            in_size: 32,
            num_classes: 2,
            down_channels: vec![4, 6, 6],
            up_channels: vec![4],
            head_channels: 6,
        }
    }

    fn tiny_target(cfg: &ModelConfig) -> EncodedTarget {
        let codec = CodecConfig {
            stride: cfg.stride_out(),
            num_classes: cfg.num_classes,
            ..CodecConfig::default()
        };
        let anns = [
            Annotation {
                class_id: 0,
                bbox: BBox::from_center(10.0, 12.0, 8.0, 9.0),
            },
            Annotation {
                class_id: 1,
                bbox: BBox::from_center(24.0, 22.0, 10.0, 6.0),
            },
        ];
        encode_targets(&anns, cfg.in_size, &codec).unwrap()
    }

    #[test]
    fn forward_shapes_and_ranges() {
        let cfg = ModelConfig {
            in_size: 64,
            ..ModelConfig::default()
        };
        assert_eq!(cfg.stride_out(), 4);
        let model = DetectorModel::<f32>::init(cfg.clone(), 7).unwrap();
        let x = Tensor::zeros(&[1, 64, 64]);
        let out = model.forward(&x).unwrap();
        assert_eq!(out.heatmap.shape(), &[5, 16, 16]);
        assert_eq!(out.offset.shape(), &[2, 16, 16]);
        assert_eq!(out.size.shape(), &[2, 16, 16]);
        assert!(out.heatmap.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(out.size.data().iter().all(|v| *v > 0.0));
    }

    #[test]
    fn zero_weights_give_uniform_half_heatmap() {
        let mut model = DetectorModel::<f32>::init(tiny_config(), 3).unwrap();
        for p in model.params_mut() {
            p.data_mut().fill(0.0);
        }
        let x = Tensor::zeros(&[1, 32, 32]);
        let out = model.forward(&x).unwrap();
        assert!(out.heatmap.data().iter().all(|v| *v == 0.5));
        assert!(out.size.data().iter().all(|v| *v == 1.0));
        assert!(out.offset.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn fresh_init_heatmap_sits_near_one_tenth() {
        let model = DetectorModel::<f32>::init(tiny_config(), 5).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let data: Vec<f32> = (0..32 * 32).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = Tensor::from_vec(&[1, 32, 32], data).unwrap();
        let out = model.forward(&x).unwrap();
        let mean: f32 =
            out.heatmap.data().iter().sum::<f32>() / out.heatmap.len() as f32;
        assert!((0.03..0.3).contains(&mean), "mean {mean}");
    }

    #[test]
    fn param_names_align_with_params() {
        let model = DetectorModel::<f32>::init(tiny_config(), 1).unwrap();
        let names = model.param_names();
        let params = model.params();
        assert_eq!(names.len(), params.len());
        // 3 down + 1 up + 3 heads x 2 convs = 10 convs, 20 tensors.
        assert_eq!(names.len(), 20);
        assert_eq!(names[0], "down0.weight");
        assert!(names.contains(&"heat.out.bias".to_string()));
        assert!(names.contains(&"size.trunk.weight".to_string()));
        let mut model2 = DetectorModel::<f32>::init(tiny_config(), 1).unwrap();
        assert_eq!(model2.params_mut().len(), names.len());
    }

    #[test]
    fn deterministic_init_and_forward() {
        let a = DetectorModel::<f32>::init(tiny_config(), 42).unwrap();
        let b = DetectorModel::<f32>::init(tiny_config(), 42).unwrap();
        assert_eq!(a, b);
        let c = DetectorModel::<f32>::init(tiny_config(), 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn backward_loss_is_finite_and_head_grads_flow() {
        let cfg = tiny_config();
        let model = DetectorModel::<f64>::init(cfg.clone(), 11).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let data: Vec<f64> = (0..32 * 32).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = Tensor::from_vec(&[1, 32, 32], data).unwrap();
        let target = tiny_target(&cfg);
        let (loss, grads) = model.backward(&x, &target, &LossWeights::default()).unwrap();
        assert!(loss.total.is_finite() && loss.total > 0.0);
        assert!(grads.all_finite());
        assert_eq!(grads.tensors.len(), model.params().len());
        for (g, p) in grads.tensors.iter().zip(model.params()) {
            assert_eq!(g.shape(), p.shape());
        }
        let heat_w_idx = model
            .param_names()
            .iter()
            .position(|n| n == "heat.out.weight")
            .unwrap();
        let nonzero = grads.tensors[heat_w_idx]
            .data()
            .iter()
            .filter(|v| **v != 0.0)
            .count();
        assert!(nonzero > 0, "heatmap head receives gradient");
    }

    /// Full-pipeline gradient check at f64: analytic gradients vs central
    /// differences on a sample of coordinates of every parameter tensor.
    #[test]
    fn model_gradients_match_finite_differences() {
        let cfg = ModelConfig {
            in_size: 16,
            num_classes: 2,
            down_channels: vec![3, 4],
            up_channels: vec![3],
            head_channels: 4,
        };
        let model = DetectorModel::<f64>::init(cfg.clone(), 19).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let data: Vec<f64> = (0..16 * 16).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = Tensor::from_vec(&[1, 16, 16], data).unwrap();
        let codec = CodecConfig {
            stride: cfg.stride_out(),
            num_classes: 2,
            ..CodecConfig::default()
        };
        let anns = [Annotation {
            class_id: 1,
            bbox: BBox::from_center(7.3, 9.1, 6.0, 5.0),
        }];
        let target = encode_targets(&anns, 16, &codec).unwrap();
        let weights = LossWeights::default();
        let (_, grads) = model.backward(&x, &target, &weights).unwrap();
        let h = 1e-5;
        let mut checked = 0;
        for (t_idx, grad) in grads.tensors.iter().enumerate() {
            let stride = (grad.len() / 7).max(1);
            for idx in (0..grad.len()).step_by(stride) {
                let mut mp = model.clone();
                mp.params_mut()[t_idx].data_mut()[idx] += h;
                let (lp, _) = mp.backward(&x, &target, &weights).unwrap();
                let mut mm = model.clone();
                mm.params_mut()[t_idx].data_mut()[idx] -= h;
                let (lm, _) = mm.backward(&x, &target, &weights).unwrap();
                let num = (lp.total - lm.total) / (2.0 * h);
                let ana = grad.data()[idx];
                let scale = num.abs().max(ana.abs()).max(1e-4);
                assert!(
                    (num - ana).abs() / scale < 1e-4,
                    "tensor {t_idx} idx {idx}: numeric {num} vs analytic {ana}"
                );
                checked += 1;
            }
        }
        assert!(checked > 50, "checked {checked} coordinates");
    }
}
