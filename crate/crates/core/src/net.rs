//! Layer-stack networks with per-element active/dormant masks.
//!
//! An *element* is one output node of a dense layer (a weight row plus its
//! bias entry) or one output filter of a conv layer (an `[C, kh, kw]` slice
//! plus its bias entry). The last dense layer is the classifier and is never
//! deactivated.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{self, ConvGeom, Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LayerSpec {
    Dense {
        in_features: usize,
        out_features: usize,
    },
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: [usize; 2],
        stride: usize,
        padding: usize,
    },
    Relu,
    Flatten,
}

impl LayerSpec {
    pub fn dense(in_features: usize, out_features: usize) -> Self {
        LayerSpec::Dense {
            in_features,
            out_features,
        }
    }

    pub fn conv(cin: usize, cout: usize, k: usize, stride: usize, padding: usize) -> Self {
        LayerSpec::Conv {
            in_channels: cin,
            out_channels: cout,
            kernel: [k, k],
            stride,
            padding,
        }
    }

    pub fn is_parametric(&self) -> bool {
        matches!(self, LayerSpec::Dense { .. } | LayerSpec::Conv { .. })
    }

    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Conv { .. } => "conv",
            LayerSpec::Relu => "relu",
            LayerSpec::Flatten => "flatten",
        }
    }

    /// `(weight shape, fan-in)` for parametric layers.
    fn weight_shape(&self) -> Option<(Vec<usize>, usize)> {
        match *self {
            LayerSpec::Dense {
                in_features,
                out_features,
            } => Some((vec![out_features, in_features], in_features)),
            LayerSpec::Conv {
                in_channels,
                out_channels,
                kernel,
                ..
            } => Some((
                vec![out_channels, in_channels, kernel[0], kernel[1]],
                in_channels * kernel[0] * kernel[1],
            )),
            _ => None,
        }
    }

    pub fn geom(&self) -> Option<ConvGeom> {
        match *self {
            LayerSpec::Conv {
                stride, padding, ..
            } => Some(ConvGeom { stride, padding }),
            _ => None,
        }
    }
}

/// Input shape (per sample, without the batch axis) plus the layer chain.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

impl Architecture {
    /// Per-sample output shape of every layer; checks the chain is well formed.
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>> {
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(Error::Config(format!(
                "invalid input shape {:?}",
                self.input_shape
            )));
        }
        let mut cur = self.input_shape.clone();
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            cur = match *layer {
                LayerSpec::Dense {
                    in_features,
                    out_features,
                } => {
                    if cur != [in_features] || out_features == 0 {
                        return Err(Error::Config(format!(
                            "layer {i}: dense {in_features}->{out_features} cannot follow shape {cur:?}"
                        )));
                    }
                    vec![out_features]
                }
                LayerSpec::Conv {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    padding,
                } => {
                    if cur.len() != 3 || cur[0] != in_channels || out_channels == 0 {
                        return Err(Error::Config(format!(
                            "layer {i}: conv with {in_channels} input channels cannot follow shape {cur:?}"
                        )));
                    }
                    let g = ConvGeom { stride, padding };
                    let oh = g
                        .out_extent(cur[1], kernel[0])
                        .map_err(|e| Error::Config(format!("layer {i}: {e}")))?;
                    let ow = g
                        .out_extent(cur[2], kernel[1])
                        .map_err(|e| Error::Config(format!("layer {i}: {e}")))?;
                    vec![out_channels, oh, ow]
                }
                LayerSpec::Relu => cur.clone(),
                LayerSpec::Flatten => vec![cur.iter().product()],
            };
            out.push(cur.clone());
        }
        match self.layers.last() {
            Some(LayerSpec::Dense { .. }) => Ok(out),
            _ => Err(Error::Config(
                "the final layer must be dense (the classifier)".into(),
            )),
        }
    }

    pub fn num_classes(&self) -> usize {
        match self.layers.last() {
            Some(LayerSpec::Dense { out_features, .. }) => *out_features,
            _ => 0,
        }
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }
}

/// Named backbones. Channel widths follow the commonly used certified-training
/// models; they are configurable through inline layer lists.
pub mod presets {
    use super::*;

    pub const NAMES: &[&str] = &["mlp-small", "cnn-small", "cnn-4layer", "cnn-7layer"];

    pub fn architecture(name: &str, input_shape: &[usize], classes: usize) -> Result<Architecture> {
        let [c, h, w] = match input_shape {
            &[c, h, w] => [c, h, w],
            _ => {
                return Err(Error::Config(format!(
                    "presets expect a [C, H, W] input, got {input_shape:?}"
                )))
            }
        };
        let mut layers = Vec::new();
        match name {
            "mlp-small" => {
                layers.push(LayerSpec::Flatten);
                layers.push(LayerSpec::dense(c * h * w, 256));
                layers.push(LayerSpec::Relu);
                layers.push(LayerSpec::dense(256, classes));
            }
            "cnn-small" => {
                // two stride-2 convs then two dense layers
                layers.extend([
                    LayerSpec::conv(c, 8, 4, 2, 1),
                    LayerSpec::Relu,
                    LayerSpec::conv(8, 16, 4, 2, 1),
                    LayerSpec::Relu,
                    LayerSpec::Flatten,
                ]);
                let flat = 16 * (h / 4) * (w / 4);
                layers.extend([
                    LayerSpec::dense(flat, 100),
                    LayerSpec::Relu,
                    LayerSpec::dense(100, classes),
                ]);
            }
            "cnn-4layer" => {
                layers.extend([
                    LayerSpec::conv(c, 16, 4, 2, 0),
                    LayerSpec::Relu,
                    LayerSpec::conv(16, 32, 4, 1, 0),
                    LayerSpec::Relu,
                    LayerSpec::Flatten,
                ]);
                let h1 = (h - 4) / 2 + 1;
                let w1 = (w - 4) / 2 + 1;
                let flat = 32 * (h1 - 3) * (w1 - 3);
                layers.extend([
                    LayerSpec::dense(flat, 100),
                    LayerSpec::Relu,
                    LayerSpec::dense(100, classes),
                ]);
            }
            "cnn-7layer" => {
                layers.extend([
                    LayerSpec::conv(c, 64, 3, 1, 1),
                    LayerSpec::Relu,
                    LayerSpec::conv(64, 64, 3, 1, 1),
                    LayerSpec::Relu,
                    LayerSpec::conv(64, 128, 4, 2, 1),
                    LayerSpec::Relu,
                    LayerSpec::conv(128, 128, 3, 1, 1),
                    LayerSpec::Relu,
                    LayerSpec::conv(128, 128, 3, 1, 1),
                    LayerSpec::Relu,
                    LayerSpec::Flatten,
                ]);
                let flat = 128 * (h / 2) * (w / 2);
                layers.extend([
                    LayerSpec::dense(flat, 512),
                    LayerSpec::Relu,
                    LayerSpec::dense(512, classes),
                ]);
            }
            other => {
                return Err(Error::Config(format!(
                    "unknown preset '{other}' (known: {})",
                    NAMES.join(", ")
                )))
            }
        }
        let arch = Architecture {
            input_shape: input_shape.to_vec(),
            layers,
        };
        arch.shapes()?;
        Ok(arch)
    }
}

/// Weight, bias and element mask of one parametric layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub mask: Vec<bool>,
}

impl<T: Scalar> LayerParams<T> {
    pub fn elements(&self) -> usize {
        self.weight.shape()[0]
    }

    /// Weights per element plus one bias entry.
    pub fn params_per_element(&self) -> usize {
        self.weight.len() / self.elements() + 1
    }

    pub fn element_weights(&self, e: usize) -> &[T] {
        let k = self.weight.len() / self.elements();
        &self.weight.data()[e * k..(e + 1) * k]
    }

    pub fn element_is_zero(&self, e: usize) -> bool {
        self.bias.data()[e] == T::zero() && self.element_weights(e).iter().all(|&w| w == T::zero())
    }

    pub fn zero_element(&mut self, e: usize) {
        let k = self.weight.len() / self.elements();
        self.weight.data_mut()[e * k..(e + 1) * k]
            .iter_mut()
            .for_each(|w| *w = T::zero());
        self.bias.data_mut()[e] = T::zero();
    }
}

/// What last touched the parameters; compaction expects a deactivation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LastEvent {
    Init,
    Train,
    Deactivate,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ElementId {
    pub layer: usize,
    pub element: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network<T> {
    arch: Architecture,
    shapes: Vec<Vec<usize>>,
    params: Vec<Option<LayerParams<T>>>,
    pub last_event: LastEvent,
}

/// Graph handles for a network's weights and biases, aligned with its layers.
pub type ParamVars = Vec<Option<(Var, Var)>>;

impl<T: Scalar> Network<T> {
    /// Kaiming-uniform weights (bound `sqrt(6 / fan_in)`), zero biases, all
    /// elements active. Deterministic in `seed`.
    pub fn build(arch: Architecture, seed: u64) -> Result<Self> {
        let shapes = arch.shapes()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = arch
            .layers
            .iter()
            .map(|layer| {
                layer.weight_shape().map(|(shape, fan_in)| {
                    let bound = (6.0 / fan_in as f64).sqrt();
                    let weight = Tensor::from_fn(&shape, |_| T::lit(rng.gen_range(-bound..bound)));
                    let elements = shape[0];
                    LayerParams {
                        weight,
                        bias: Tensor::zeros(&[elements]),
                        mask: vec![true; elements],
                    }
                })
            })
            .collect();
        Ok(Self {
            arch,
            shapes,
            params,
            last_event: LastEvent::Init,
        })
    }

    /// Assembles a network from explicit parameters (used by deserialization
    /// and compaction). Masks must agree with the zero pattern they describe.
    pub fn from_parts(arch: Architecture, params: Vec<Option<LayerParams<T>>>) -> Result<Self> {
        let shapes = arch.shapes()?;
        if params.len() != arch.layers.len() {
            return Err(Error::Consistency("parameter list length".into()));
        }
        for (i, (layer, p)) in arch.layers.iter().zip(&params).enumerate() {
            match (layer.weight_shape(), p) {
                (None, None) => {}
                (Some((ws, _)), Some(p)) => {
                    if p.weight.shape() != ws.as_slice()
                        || p.bias.shape() != [ws[0]]
                        || p.mask.len() != ws[0]
                    {
                        return Err(Error::Consistency(format!(
                            "layer {i}: parameter shapes do not match {ws:?}"
                        )));
                    }
                }
                _ => {
                    return Err(Error::Consistency(format!(
                        "layer {i}: parameters present/absent mismatch"
                    )))
                }
            }
        }
        Ok(Self {
            arch,
            shapes,
            params,
            last_event: LastEvent::Init,
        })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    /// Per-sample output shape of layer `i`.
    pub fn output_shape(&self, i: usize) -> &[usize] {
        &self.shapes[i]
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.arch.input_shape
    }

    pub fn num_classes(&self) -> usize {
        self.arch.num_classes()
    }

    pub fn layer_params(&self, i: usize) -> Option<&LayerParams<T>> {
        self.params[i].as_ref()
    }

    /// Mutable parameters of layer `i`; marks the network as trained.
    pub fn layer_params_mut(&mut self, i: usize) -> Option<&mut LayerParams<T>> {
        self.last_event = LastEvent::Train;
        self.params[i].as_mut()
    }

    pub fn params(&self) -> impl Iterator<Item = (usize, &LayerParams<T>)> {
        self.params
            .iter()
            .enumerate()
            .filter_map(|(i, p)| p.as_ref().map(|p| (i, p)))
    }

    #[cfg(test)]
    pub(crate) fn params_raw_mut(&mut self) -> &mut [Option<LayerParams<T>>] {
        &mut self.params
    }

    pub fn parametric_layers(&self) -> Vec<usize> {
        self.params().map(|(i, _)| i).collect()
    }

    /// Index of the classifier (last dense) layer.
    pub fn classifier_index(&self) -> usize {
        self.arch.layers.len() - 1
    }

    /// Parametric layers other than the classifier.
    pub fn prunable_layers(&self) -> Vec<usize> {
        let c = self.classifier_index();
        self.parametric_layers()
            .into_iter()
            .filter(|&i| i != c)
            .collect()
    }

    pub fn total_param_count(&self) -> usize {
        self.params()
            .map(|(_, p)| p.weight.len() + p.bias.len())
            .sum()
    }

    /// Σ over active elements of their weights plus bias.
    pub fn active_param_count(&self) -> usize {
        self.params()
            .map(|(_, p)| p.mask.iter().filter(|&&m| m).count() * p.params_per_element())
            .sum()
    }

    pub fn dormant_elements(&self) -> usize {
        self.params()
            .map(|(_, p)| p.mask.iter().filter(|&&m| !m).count())
            .sum()
    }

    /// Replaces the mask of layer `i`; the classifier must stay all-active.
    pub fn set_mask(&mut self, i: usize, mask: Vec<bool>) -> Result<()> {
        if i == self.classifier_index() && mask.iter().any(|&m| !m) {
            return Err(Error::Contract(
                "the classifier layer cannot be deactivated".into(),
            ));
        }
        let p = self.params[i]
            .as_mut()
            .ok_or_else(|| Error::Contract(format!("layer {i} has no parameters")))?;
        if mask.len() != p.elements() {
            return Err(Error::Contract(format!(
                "mask length {} for {} elements",
                mask.len(),
                p.elements()
            )));
        }
        p.mask = mask;
        Ok(())
    }

    /// Zeros every parameter of every dormant element.
    pub fn apply_mask(&mut self) {
        for p in self.params.iter_mut().flatten() {
            for e in 0..p.elements() {
                if !p.mask[e] {
                    p.zero_element(e);
                }
            }
        }
    }

    /// Recomputes masks from the parameters: an element is active iff any of
    /// its parameters is nonzero. The classifier stays all-active.
    pub fn refresh_masks(&mut self) {
        let c = self.classifier_index();
        for (i, p) in self.params.iter_mut().enumerate() {
            if let Some(p) = p {
                if i == c {
                    continue;
                }
                p.mask = (0..p.elements()).map(|e| !p.element_is_zero(e)).collect();
            }
        }
    }

    /// True iff every dormant element has all-zero parameters.
    pub fn masks_consistent(&self) -> bool {
        self.params()
            .all(|(_, p)| (0..p.elements()).all(|e| p.mask[e] || p.element_is_zero(e)))
    }

    /// Logits for a batch `x[N, input_shape...]`.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.forward_all(x)?
            .pop()
            .ok_or_else(|| Error::Contract("empty network".into()))
    }

    /// Outputs of every layer for a batch.
    pub fn forward_all(&self, x: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let n = self.check_input(x.shape())?;
        let mut cur = x.clone();
        let mut outs = Vec::with_capacity(self.arch.layers.len());
        for (i, layer) in self.arch.layers.iter().enumerate() {
            cur = match layer {
                LayerSpec::Dense { .. } => {
                    let p = self.params[i].as_ref().unwrap();
                    let mut y = cur.matmul_nt(&p.weight)?;
                    let f = p.elements();
                    tensor::add_channel_bias(y.data_mut(), p.bias.data(), f, 1);
                    y
                }
                LayerSpec::Conv { .. } => {
                    let p = self.params[i].as_ref().unwrap();
                    tensor::conv2d(&cur, &p.weight, Some(&p.bias), layer.geom().unwrap())?
                }
                LayerSpec::Relu => cur.relu(),
                LayerSpec::Flatten => {
                    let d = self.shapes[i][0];
                    cur.reshape(&[n, d])?
                }
            };
            outs.push(cur.clone());
        }
        Ok(outs)
    }

    pub(crate) fn check_input(&self, shape: &[usize]) -> Result<usize> {
        if shape.len() != self.arch.input_shape.len() + 1 || shape[1..] != self.arch.input_shape[..] {
            return Err(Error::shape(
                "forward",
                format!(
                    "input {shape:?} does not match [N, {:?}]",
                    self.arch.input_shape
                ),
            ));
        }
        Ok(shape[0])
    }

    /// Registers weights and biases in `g`, as trainable leaves or constants.
    pub fn param_vars(&self, g: &mut Graph<T>, trainable: bool) -> ParamVars {
        self.params
            .iter()
            .map(|p| {
                p.as_ref().map(|p| {
                    if trainable {
                        (g.param(p.weight.clone()), g.param(p.bias.clone()))
                    } else {
                        (g.constant(p.weight.clone()), g.constant(p.bias.clone()))
                    }
                })
            })
            .collect()
    }

    /// Differentiable forward pass of layer `i` on a batched input var.
    pub fn layer_graph(&self, g: &mut Graph<T>, vars: &ParamVars, i: usize, x: Var) -> Result<Var> {
        let layer = &self.arch.layers[i];
        match layer {
            LayerSpec::Dense { .. } => {
                let (w, b) = vars[i].unwrap();
                let y = g.matmul_nt(x, w)?;
                g.add_bias(y, b)
            }
            LayerSpec::Conv { .. } => {
                let (w, b) = vars[i].unwrap();
                g.conv2d(x, w, Some(b), layer.geom().unwrap())
            }
            LayerSpec::Relu => Ok(g.relu(x)),
            LayerSpec::Flatten => {
                let n = g.shape(x)[0];
                g.reshape(x, &[n, self.shapes[i][0]])
            }
        }
    }

    /// Differentiable logits for a batch.
    pub fn forward_graph(&self, g: &mut Graph<T>, vars: &ParamVars, x: Var) -> Result<Var> {
        self.check_input(g.shape(x))?;
        let mut cur = x;
        for i in 0..self.arch.layers.len() {
            cur = self.layer_graph(g, vars, i, cur)?;
        }
        Ok(cur)
    }

    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network {
            arch: self.arch.clone(),
            shapes: self.shapes.clone(),
            params: self
                .params
                .iter()
                .map(|p| {
                    p.as_ref().map(|p| LayerParams {
                        weight: p.weight.cast(),
                        bias: p.bias.cast(),
                        mask: p.mask.clone(),
                    })
                })
                .collect(),
            last_event: self.last_event,
        }
    }

    /// Multiply-accumulate count of one forward pass for a single sample.
    pub fn macs_per_sample(&self) -> usize {
        self.arch
            .layers
            .iter()
            .enumerate()
            .map(|(i, layer)| match *layer {
                LayerSpec::Dense {
                    in_features,
                    out_features,
                } => in_features * out_features,
                LayerSpec::Conv {
                    in_channels,
                    kernel,
                    ..
                } => {
                    let s = &self.shapes[i];
                    s[0] * s[1] * s[2] * in_channels * kernel[0] * kernel[1]
                }
                _ => 0,
            })
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mlp(input: usize, hidden: usize, classes: usize) -> Architecture {
        Architecture {
            input_shape: vec![input],
            layers: vec![
                LayerSpec::dense(input, hidden),
                LayerSpec::Relu,
                LayerSpec::dense(hidden, classes),
            ],
        }
    }

    #[test]
    fn build_is_deterministic() {
        let a = Network::<f32>::build(mlp(10, 8, 3), 42).unwrap();
        let b = Network::<f32>::build(mlp(10, 8, 3), 42).unwrap();
        assert_eq!(a, b);
        let c = Network::<f32>::build(mlp(10, 8, 3), 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn closed_form_param_count() {
        let net = Network::<f32>::build(mlp(784, 256, 10), 0).unwrap();
        assert_eq!(net.total_param_count(), 784 * 256 + 256 + 256 * 10 + 10);
        assert_eq!(net.total_param_count(), 203_530);
        assert_eq!(net.active_param_count(), 203_530);
    }

    #[test]
    fn conv_element_geometry() {
        let arch = Architecture {
            input_shape: vec![3, 8, 8],
            layers: vec![
                LayerSpec::conv(3, 16, 3, 1, 1),
                LayerSpec::Relu,
                LayerSpec::Flatten,
                LayerSpec::dense(16 * 64, 2),
            ],
        };
        let net = Network::<f32>::build(arch, 1).unwrap();
        let p = net.layer_params(0).unwrap();
        assert_eq!(p.elements(), 16);
        assert_eq!(p.params_per_element(), 27 + 1);
    }

    #[test]
    fn invalid_chains_are_rejected() {
        let bad = Architecture {
            input_shape: vec![4],
            layers: vec![LayerSpec::dense(5, 2)],
        };
        assert!(matches!(bad.shapes(), Err(Error::Config(_))));
        let no_classifier = Architecture {
            input_shape: vec![4],
            layers: vec![LayerSpec::dense(4, 2), LayerSpec::Relu],
        };
        assert!(no_classifier.shapes().is_err());
    }

    #[test]
    fn all_dormant_hidden_layer_yields_classifier_bias() {
        let mut net = Network::<f64>::build(mlp(6, 5, 3), 9).unwrap();
        net.layer_params_mut(2)
            .unwrap()
            .bias
            .data_mut()
            .copy_from_slice(&[0.1, -0.2, 0.3]);
        net.set_mask(0, vec![false; 5]).unwrap();
        net.apply_mask();
        let x = Tensor::from_fn(&[4, 6], |i| (i as f64).sin());
        let y = net.forward(&x).unwrap();
        for row in y.data().chunks(3) {
            assert_eq!(row, &[0.1, -0.2, 0.3]);
        }
    }

    #[test]
    fn masking_is_idempotent_and_noop_when_all_active() {
        let mut net = Network::<f32>::build(mlp(6, 5, 3), 2).unwrap();
        let x = Tensor::from_fn(&[3, 6], |i| i as f32 * 0.1);
        let before = net.forward(&x).unwrap();
        net.apply_mask();
        assert_eq!(before, net.forward(&x).unwrap());

        net.set_mask(0, vec![true, false, true, false, true]).unwrap();
        net.apply_mask();
        let once = net.clone();
        net.apply_mask();
        assert_eq!(once, net);
        let p = net.layer_params(0).unwrap();
        let norm: f32 = p.element_weights(1).iter().map(|w| w * w).sum();
        assert_eq!(norm, 0.0);
    }

    #[test]
    fn active_count_tracks_masks() {
        let mut net = Network::<f32>::build(mlp(10, 8, 3), 0).unwrap();
        let total = net.total_param_count();
        net.set_mask(0, vec![true, false, true, false, true, false, true, false])
            .unwrap();
        assert_eq!(net.active_param_count(), total - 4 * 11);
        net.set_mask(0, vec![false; 8]).unwrap();
        assert_eq!(net.active_param_count(), 8 * 3 + 3);
    }

    #[test]
    fn classifier_cannot_be_deactivated() {
        let mut net = Network::<f32>::build(mlp(4, 4, 2), 0).unwrap();
        assert!(net.set_mask(2, vec![true, false]).is_err());
    }

    #[test]
    fn forward_matches_straight_line_oracle() {
        let arch = Architecture {
            input_shape: vec![1, 6, 6],
            layers: vec![
                LayerSpec::conv(1, 2, 3, 1, 0),
                LayerSpec::Relu,
                LayerSpec::Flatten,
                LayerSpec::dense(2 * 16, 3),
            ],
        };
        let net = Network::<f64>::build(arch, 5).unwrap();
        let x = Tensor::from_fn(&[2, 1, 6, 6], |i| ((i * 7 % 11) as f64) / 11.0 - 0.3);
        let y = net.forward(&x).unwrap();

        let conv = net.layer_params(0).unwrap();
        let dense = net.layer_params(3).unwrap();
        for n in 0..2 {
            let mut hidden = vec![0.0; 32];
            for f in 0..2 {
                for oy in 0..4 {
                    for ox in 0..4 {
                        let mut s = conv.bias.data()[f];
                        for ky in 0..3 {
                            for kx in 0..3 {
                                s += x.data()[n * 36 + (oy + ky) * 6 + ox + kx]
                                    * conv.weight.data()[f * 9 + ky * 3 + kx];
                            }
                        }
                        hidden[f * 16 + oy * 4 + ox] = s.max(0.0);
                    }
                }
            }
            for k in 0..3 {
                let mut s = dense.bias.data()[k];
                for j in 0..32 {
                    s += dense.weight.data()[k * 32 + j] * hidden[j];
                }
                assert!((s - y.data()[n * 3 + k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn presets_are_valid() {
        for name in presets::NAMES {
            presets::architecture(name, &[1, 28, 28], 10).unwrap();
            presets::architecture(name, &[3, 32, 32], 10).unwrap();
        }
        assert!(presets::architecture("nope", &[1, 28, 28], 10).is_err());
    }

    #[test]
    fn graph_forward_matches_plain_forward() {
        let arch = presets::architecture("cnn-small", &[1, 12, 12], 4).unwrap();
        let net = Network::<f64>::build(arch, 3).unwrap();
        let x = Tensor::from_fn(&[3, 1, 12, 12], |i| (i as f64 * 0.37).cos());
        let mut g = Graph::new();
        let vars = net.param_vars(&mut g, false);
        let xv = g.constant(x.clone());
        let y = net.forward_graph(&mut g, &vars, xv).unwrap();
        assert!(g.value(y).max_abs_diff(&net.forward(&x).unwrap()) < 1e-12);
    }
}
