//! Model descriptions, weight materialisation and the end-to-end reference
//! forward pass.
//!
//! On disk a model is a JSON document plus an optional sidecar of raw
//! little-endian f32 weights:
//!
//! ```json
//! {
//!   "name": "toy",
//!   "input": { "channels": 3, "height": 32, "width": 32 },
//!   "weights": { "source": "random", "seed": 7 },
//!   "layers": [
//!     { "type": "conv", "in_channels": 3, "out_channels": 8, "kernel": 3,
//!       "stride": 1, "padding": 1, "bias": true, "activation": "relu" },
//!     { "type": "maxpool", "window": 2, "stride": 2, "padding": 0 },
//!     { "type": "fc", "in_features": 2048, "out_features": 10, "bias": true },
//!     { "type": "activation", "kind": "relu" }
//!   ]
//! }
//! ```
//!
//! `weights` is either `{"source": "random", "seed": N}` (weights drawn from a
//! seeded ChaCha8 stream) or `{"source": "file", "path": "model.bin"}`, the
//! path being relative to the JSON file. The sidecar holds, for every conv and
//! fc layer in declaration order, the weight array (`N x C x K x K` or
//! `out x in`, row-major) followed by the bias vector when `bias` is true.
//! Layers are numbered from 1 in reports and errors.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{
    conv2d_direct, fc_direct, maxpool, ActivationKind, ConvLayer, ConvLayerSpec, FcLayer, FcLayerSpec, PoolSpec,
};
use crate::tensor::{Shape3, Tensor3D};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvDesc {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    #[serde(default = "default_true")]
    pub bias: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub activation: Option<ActivationKind>,
}

impl ConvDesc {
    pub fn spec(&self) -> ConvLayerSpec {
        ConvLayerSpec {
            in_channels: self.in_channels,
            out_channels: self.out_channels,
            kernel: self.kernel,
            stride: self.stride,
            padding: self.padding,
            has_bias: self.bias,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FcDesc {
    pub in_features: usize,
    pub out_features: usize,
    #[serde(default = "default_true")]
    pub bias: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub activation: Option<ActivationKind>,
}

impl FcDesc {
    pub fn spec(&self) -> FcLayerSpec {
        FcLayerSpec {
            in_features: self.in_features,
            out_features: self.out_features,
            has_bias: self.bias,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActivationDesc {
    pub kind: ActivationKind,
}

fn default_true() -> bool {
    true
}

/// One layer of a model description, without parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum LayerDesc {
    Conv(ConvDesc),
    Maxpool(PoolSpec),
    Fc(FcDesc),
    Activation(ActivationDesc),
}

impl LayerDesc {
    pub fn conv(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        LayerDesc::Conv(ConvDesc {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            bias: true,
            activation: Some(ActivationKind::Relu),
        })
    }

    pub fn fc(in_features: usize, out_features: usize) -> Self {
        LayerDesc::Fc(FcDesc {
            in_features,
            out_features,
            bias: true,
            activation: None,
        })
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerDesc::Conv(_) => "conv",
            LayerDesc::Maxpool(_) => "maxpool",
            LayerDesc::Fc(_) => "fc",
            LayerDesc::Activation(_) => "activation",
        }
    }

    pub fn output_shape(&self, input: Shape3) -> Result<Shape3> {
        match self {
            LayerDesc::Conv(c) => c.spec().output_shape(input),
            LayerDesc::Maxpool(p) => p.output_shape(input),
            LayerDesc::Fc(f) => {
                if input.len() != f.in_features {
                    return Err(Error::shape("fc input", format!("{} features", f.in_features), input));
                }
                if f.out_features == 0 {
                    return Err(Error::shape("fc spec", "out_features >= 1", 0));
                }
                Ok(Shape3::new(f.out_features, 1, 1))
            }
            LayerDesc::Activation(_) => Ok(input),
        }
    }

    /// Parameter count (weights plus bias).
    pub fn param_len(&self) -> usize {
        match self {
            LayerDesc::Conv(c) => c.spec().weight_len() + c.spec().bias_len(),
            LayerDesc::Fc(f) => f.spec().weight_len() + f.spec().bias_len(),
            _ => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase", deny_unknown_fields)]
pub enum WeightSource {
    Random { seed: u64 },
    File { path: String },
}

impl Default for WeightSource {
    fn default() -> Self {
        WeightSource::Random { seed: 0 }
    }
}

/// A model description: input shape plus layer list. Shape compatibility of
/// adjacent layers is checked on construction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub name: String,
    pub input: Shape3,
    #[serde(default)]
    pub weights: WeightSource,
    pub layers: Vec<LayerDesc>,
}

impl Architecture {
    pub fn new(name: impl Into<String>, input: Shape3, layers: Vec<LayerDesc>) -> Result<Self> {
        let arch = Architecture {
            name: name.into(),
            input,
            weights: WeightSource::default(),
            layers,
        };
        arch.validate()?;
        Ok(arch)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Parse("model has no layers".into()));
        }
        self.shapes().map(|_| ())
    }

    /// `(input, output)` shape of every layer.
    pub fn shapes(&self) -> Result<Vec<(Shape3, Shape3)>> {
        let mut cur = self.input;
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let next = layer.output_shape(cur).map_err(|e| e.at_layer(i + 1))?;
            out.push((cur, next));
            cur = next;
        }
        Ok(out)
    }

    pub fn output_shape(&self) -> Result<Shape3> {
        Ok(self.shapes()?.last().map(|s| s.1).unwrap_or(self.input))
    }

    pub fn weighted_layers(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| matches!(l, LayerDesc::Conv(_) | LayerDesc::Fc(_)))
            .count()
    }

    pub fn param_len(&self) -> usize {
        self.layers.iter().map(LayerDesc::param_len).sum()
    }

    /// Conv layers with their 1-based index and input extent.
    pub fn conv_layers(&self) -> Result<Vec<(usize, ConvLayerSpec, Shape3)>> {
        Ok(self
            .layers
            .iter()
            .zip(self.shapes()?)
            .enumerate()
            .filter_map(|(i, (l, (input, _)))| match l {
                LayerDesc::Conv(c) => Some((i + 1, c.spec(), input)),
                _ => None,
            })
            .collect())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("architecture serialises")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let arch: Architecture = serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        arch.validate()?;
        Ok(arch)
    }

    /// Draws every parameter from a seeded stream (He-uniform weights, small
    /// uniform biases), in declaration order.
    pub fn materialize_random(&self, seed: u64) -> Result<Model> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw =
            |len: usize, bound: f32| -> Vec<f32> { (0..len).map(|_| rng.gen_range(-bound..bound)).collect() };
        self.materialize_with(|fan_in, weights, bias| {
            let w = draw(weights, (6.0 / fan_in as f32).sqrt());
            let b = draw(bias, 0.05);
            Ok((w, b))
        })
    }

    /// Builds a model from a flat parameter array laid out as in the sidecar.
    pub fn materialize_from(&self, params: &[f32]) -> Result<Model> {
        if params.len() != self.param_len() {
            return Err(Error::Parse(format!(
                "weight sidecar holds {} values, model needs {}",
                params.len(),
                self.param_len()
            )));
        }
        let mut rest = params;
        self.materialize_with(|_, weights, bias| {
            let (w, tail) = rest.split_at(weights);
            let (b, tail) = tail.split_at(bias);
            rest = tail;
            Ok((w.to_vec(), b.to_vec()))
        })
    }

    fn materialize_with(
        &self,
        mut params: impl FnMut(usize, usize, usize) -> Result<(Vec<f32>, Vec<f32>)>,
    ) -> Result<Model> {
        self.validate()?;
        let mut layers = Vec::with_capacity(self.layers.len());
        for (i, desc) in self.layers.iter().enumerate() {
            let layer = match desc {
                LayerDesc::Conv(c) => {
                    let spec = c.spec();
                    let (w, b) = params(spec.patch_len(), spec.weight_len(), spec.bias_len())?;
                    let bias = spec.has_bias.then_some(b);
                    Layer::Conv {
                        layer: ConvLayer::new(spec, w, bias).map_err(|e| e.at_layer(i + 1))?,
                        activation: c.activation,
                    }
                }
                LayerDesc::Fc(f) => {
                    let spec = f.spec();
                    let (w, b) = params(spec.in_features, spec.weight_len(), spec.bias_len())?;
                    let bias = spec.has_bias.then_some(b);
                    Layer::Fc {
                        layer: FcLayer::new(spec, w, bias).map_err(|e| e.at_layer(i + 1))?,
                        activation: f.activation,
                    }
                }
                LayerDesc::Maxpool(p) => Layer::MaxPool(*p),
                LayerDesc::Activation(a) => Layer::Activation(a.kind),
            };
            layers.push(layer);
        }
        Ok(Model {
            name: self.name.clone(),
            input: self.input,
            layers,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv {
        layer: ConvLayer,
        activation: Option<ActivationKind>,
    },
    MaxPool(PoolSpec),
    Fc {
        layer: FcLayer,
        activation: Option<ActivationKind>,
    },
    Activation(ActivationKind),
}

impl Layer {
    pub fn desc(&self) -> LayerDesc {
        match self {
            Layer::Conv { layer, activation } => LayerDesc::Conv(ConvDesc {
                in_channels: layer.spec.in_channels,
                out_channels: layer.spec.out_channels,
                kernel: layer.spec.kernel,
                stride: layer.spec.stride,
                padding: layer.spec.padding,
                bias: layer.spec.has_bias,
                activation: *activation,
            }),
            Layer::MaxPool(p) => LayerDesc::Maxpool(*p),
            Layer::Fc { layer, activation } => LayerDesc::Fc(FcDesc {
                in_features: layer.spec.in_features,
                out_features: layer.spec.out_features,
                bias: layer.spec.has_bias,
                activation: *activation,
            }),
            Layer::Activation(kind) => LayerDesc::Activation(ActivationDesc { kind: *kind }),
        }
    }

    /// Reference forward pass of this layer alone.
    pub fn forward_reference(&self, input: &Tensor3D) -> Result<Tensor3D> {
        match self {
            Layer::Conv { layer, activation } => {
                let mut out = conv2d_direct(input, &layer.weights, layer.bias(), &layer.spec)?;
                if let Some(a) = activation {
                    a.apply_slice(out.data_mut());
                }
                Ok(out)
            }
            Layer::MaxPool(p) => maxpool(input, p),
            Layer::Fc { layer, activation } => {
                let mut out = fc_direct(input.data(), &layer.weights, layer.bias(), &layer.spec)?;
                if let Some(a) = activation {
                    a.apply_slice(&mut out);
                }
                Tensor3D::from_vec(Shape3::new(layer.spec.out_features, 1, 1), out)
            }
            Layer::Activation(kind) => {
                let mut out = input.clone();
                kind.apply_slice(out.data_mut());
                Ok(out)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub name: String,
    pub input: Shape3,
    pub layers: Vec<Layer>,
}

impl Model {
    pub fn architecture(&self) -> Architecture {
        Architecture {
            name: self.name.clone(),
            input: self.input,
            weights: WeightSource::default(),
            layers: self.layers.iter().map(Layer::desc).collect(),
        }
    }

    /// Flat parameter array in sidecar order.
    pub fn params(&self) -> Vec<f32> {
        let mut out = Vec::new();
        for layer in &self.layers {
            let (w, b) = match layer {
                Layer::Conv { layer, .. } => (&layer.weights, &layer.bias),
                Layer::Fc { layer, .. } => (&layer.weights, &layer.bias),
                _ => continue,
            };
            out.extend_from_slice(w);
            if let Some(b) = b {
                out.extend_from_slice(b);
            }
        }
        out
    }

    /// Writes `json_path` and a sidecar `bin_path` (referenced by file name).
    pub fn save(&self, json_path: &Path, bin_path: &Path) -> Result<()> {
        let mut arch = self.architecture();
        let file_name = bin_path
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| Error::Parse(format!("bad sidecar path {}", bin_path.display())))?;
        arch.weights = WeightSource::File {
            path: file_name.to_string(),
        };
        fs::write(json_path, arch.to_json())?;
        let mut f = std::io::BufWriter::new(fs::File::create(bin_path)?);
        for v in self.params() {
            f.write_all(&v.to_le_bytes())?;
        }
        f.flush()?;
        Ok(())
    }
}

/// Reads a model description without materialising its weights.
pub fn load_architecture(path: &Path) -> Result<Architecture> {
    let text = fs::read_to_string(path)?;
    Architecture::from_json(&text)
}

/// Reads a model description and materialises its weights from the sidecar
/// or the seeded generator.
pub fn load_model(path: &Path) -> Result<Model> {
    let arch = load_architecture(path)?;
    match &arch.weights {
        WeightSource::Random { seed } => arch.materialize_random(*seed),
        WeightSource::File { path: rel } => {
            let bin = path.parent().unwrap_or_else(|| Path::new(".")).join(rel);
            let bytes = fs::read(&bin)?;
            if bytes.len() % 4 != 0 {
                return Err(Error::Parse(format!(
                    "{}: length {} is not a multiple of 4",
                    bin.display(),
                    bytes.len()
                )));
            }
            let params: Vec<f32> = bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            arch.materialize_from(&params)
        }
    }
}

/// Runs the model through the per-layer reference oracles and returns the
/// flattened final activation.
pub fn model_infer_reference(model: &Model, input: &Tensor3D) -> Result<Vec<f32>> {
    if model.layers.is_empty() {
        return Err(Error::Parse("model has no layers".into()));
    }
    if input.shape() != model.input {
        return Err(Error::shape("model input", model.input, input.shape()));
    }
    let mut cur = input.clone();
    for (i, layer) in model.layers.iter().enumerate() {
        cur = layer.forward_reference(&cur).map_err(|e| e.at_layer(i + 1))?;
    }
    Ok(cur.into_vec())
}

/// Deterministic input tensor in `[0, 1)`.
pub fn random_input(shape: Shape3, seed: u64) -> Tensor3D {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let data = (0..shape.len()).map(|_| rng.gen::<f32>()).collect();
    Tensor3D::from_vec(shape, data).expect("length matches")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::maxpool_direct;

    fn toy() -> Architecture {
        Architecture::new(
            "toy",
            Shape3::new(2, 6, 6),
            vec![
                LayerDesc::conv(2, 3, 3, 1, 1),
                LayerDesc::Maxpool(PoolSpec::new(2, 2)),
                LayerDesc::fc(27, 4),
            ],
        )
        .unwrap()
    }

    #[test]
    fn single_conv_model_is_conv_oracle() {
        let arch = Architecture::new(
            "c",
            Shape3::new(2, 5, 5),
            vec![LayerDesc::Conv(ConvDesc {
                activation: None,
                ..match LayerDesc::conv(2, 3, 3, 1, 0) {
                    LayerDesc::Conv(c) => c,
                    _ => unreachable!(),
                }
            })],
        )
        .unwrap();
        let model = arch.materialize_random(3).unwrap();
        let input = random_input(arch.input, 1);
        let Layer::Conv { layer, .. } = &model.layers[0] else {
            unreachable!()
        };
        let direct = conv2d_direct(&input, &layer.weights, layer.bias(), &layer.spec).unwrap();
        assert_eq!(model_infer_reference(&model, &input).unwrap(), direct.into_vec());
    }

    #[test]
    fn conv_pool_fc_composes() {
        let model = toy().materialize_random(42).unwrap();
        let input = random_input(model.input, 2);
        let (Layer::Conv { layer: conv, .. }, Layer::Fc { layer: fc, .. }) = (&model.layers[0], &model.layers[2])
        else {
            unreachable!()
        };
        let mut a = conv2d_direct(&input, &conv.weights, conv.bias(), &conv.spec).unwrap();
        ActivationKind::Relu.apply_slice(a.data_mut());
        let b = maxpool_direct(&a, 2, 2).unwrap();
        let c = fc_direct(b.data(), &fc.weights, fc.bias(), &fc.spec).unwrap();
        assert_eq!(model_infer_reference(&model, &input).unwrap(), c);
    }

    #[test]
    fn shape_errors_carry_layer_index() {
        let bad = Architecture {
            name: "bad".into(),
            input: Shape3::new(2, 6, 6),
            weights: WeightSource::default(),
            layers: vec![LayerDesc::conv(2, 3, 3, 1, 1), LayerDesc::fc(100, 4)],
        };
        let err = bad.validate().unwrap_err();
        assert!(matches!(err, Error::Layer { index: 2, .. }), "{err}");

        let model = toy().materialize_random(1).unwrap();
        let err = model_infer_reference(&model, &Tensor3D::zeros(Shape3::new(1, 6, 6))).unwrap_err();
        assert!(err.to_string().contains("model input"));
    }

    #[test]
    fn json_names_offending_field() {
        let text = r#"{"name":"x","input":{"channels":1,"height":4,"width":4},
            "layers":[{"type":"conv","in_channels":1,"out_channels":2,"kernel":3,"stride":1,"padding":1,"strides":2}]}"#;
        let err = Architecture::from_json(text).unwrap_err().to_string();
        assert!(err.contains("strides"), "{err}");

        let text = r#"{"name":"x","input":{"channels":1,"height":4,"width":4},
            "layers":[{"type":"conv","in_channels":1,"out_channels":2,"stride":1,"padding":1}]}"#;
        let err = Architecture::from_json(text).unwrap_err().to_string();
        assert!(err.contains("kernel"), "{err}");
    }

    #[test]
    fn random_weights_are_seeded() {
        let a = toy().materialize_random(9).unwrap();
        let b = toy().materialize_random(9).unwrap();
        let c = toy().materialize_random(10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn sidecar_round_trip() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path();
        let model = toy().materialize_random(5).unwrap();
        model.save(&dir.join("toy.json"), &dir.join("toy.bin")).unwrap();
        let loaded = load_model(&dir.join("toy.json")).unwrap();
        assert_eq!(loaded, model);
        let len = fs::metadata(dir.join("toy.bin")).unwrap().len();
        assert_eq!(len as usize, toy().param_len() * 4);
    }
}
