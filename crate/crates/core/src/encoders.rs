//! Toy dual encoders: a two-layer perceptron plus a linear projection per
//! modality, emitting unit-norm embeddings in a shared space.

use std::fmt;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Parameter, Tensor, Var};
use crate::error::{Error, Result};
use crate::seed;

/// Row norms of an [`EmbeddingBatch`] must be within this of 1.
pub const NORM_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Network {
    Teacher,
    Student,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Image,
    Text,
}

impl fmt::Display for Network {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Network::Teacher => "teacher",
            Network::Student => "student",
        })
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::Image => "image",
            Modality::Text => "text",
        })
    }
}

/// Hidden-layer nonlinearity. `Identity` exists for tests that need the
/// encoder to be linear in its input.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Activation {
    #[default]
    Tanh,
    Identity,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Widths {
    pub input: usize,
    pub hidden: usize,
    pub output: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    /// `fan_in × fan_out`
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Weights of one modality's encoder: `input → hidden → hidden → d`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub widths: Widths,
    pub layers: Vec<Layer>,
    /// `hidden × d`, no bias.
    pub projection: Tensor,
    pub activation: Activation,
}

/// Number of tensors an encoder contributes to a parameter list.
pub const TENSORS_PER_ENCODER: usize = 5;

fn uniform_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    let bound = 1.0 / (rows as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-bound..=bound))
        .collect();
    Tensor::matrix(rows, cols, data).expect("sized by construction")
}

/// Fresh encoder with weights uniform in `±1/√fan_in` and zero biases.
pub fn init_encoder(
    input_dim: usize,
    hidden_dim: usize,
    d: usize,
    seed: u64,
) -> Result<EncoderParams> {
    if input_dim == 0 || hidden_dim == 0 || d == 0 {
        return Err(Error::Config(format!(
            "encoder widths must be positive, got ({input_dim}, {hidden_dim}, {d})"
        )));
    }
    let mut rng = seed::rng(seed);
    let layers = [(input_dim, hidden_dim), (hidden_dim, hidden_dim)]
        .into_iter()
        .map(|(fan_in, fan_out)| Layer {
            weight: uniform_matrix(&mut rng, fan_in, fan_out),
            bias: Tensor::zeros(&[fan_out]),
        })
        .collect();
    let projection = uniform_matrix(&mut rng, hidden_dim, d);
    Ok(EncoderParams {
        widths: Widths {
            input: input_dim,
            hidden: hidden_dim,
            output: d,
        },
        layers,
        projection,
        activation: Activation::Tanh,
    })
}

/// Graph handles for an encoder bound into a [`Graph`].
#[derive(Clone, Debug)]
pub struct EncoderVars {
    layers: Vec<(Var, Var)>,
    projection: Var,
    activation: Activation,
}

impl EncoderParams {
    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let w = self.widths;
        if w.input == 0 || w.hidden == 0 || w.output == 0 {
            return Err(Error::Config(format!("zero width in {w:?}")));
        }
        if self.layers.len() != 2 {
            return Err(Error::Config(format!(
                "expected 2 layers, found {}",
                self.layers.len()
            )));
        }
        let mut fan_in = w.input;
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.weight.shape() != [fan_in, w.hidden] || layer.bias.shape() != [w.hidden] {
                return Err(Error::Config(format!(
                    "layer {i} has weight {:?} and bias {:?}, expected [{fan_in}, {}] and [{}]",
                    layer.weight.shape(),
                    layer.bias.shape(),
                    w.hidden,
                    w.hidden
                )));
            }
            fan_in = w.hidden;
        }
        if self.projection.shape() != [w.hidden, w.output] {
            return Err(Error::Config(format!(
                "projection is {:?}, expected [{}, {}]",
                self.projection.shape(),
                w.hidden,
                w.output
            )));
        }
        let finite = self.tensors().iter().all(|t| t.is_finite());
        if !finite {
            return Err(Error::Config("non-finite encoder weight".into()));
        }
        Ok(())
    }

    /// Tensors in binding order: layer weights and biases, then projection.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = Vec::with_capacity(TENSORS_PER_ENCODER);
        for l in &self.layers {
            out.push(&l.weight);
            out.push(&l.bias);
        }
        out.push(&self.projection);
        out
    }

    /// Parameters named `{prefix}.layer{i}.weight` etc.; biases skip decay.
    pub fn parameters(&self, prefix: &str) -> Vec<Parameter> {
        let mut out = Vec::with_capacity(TENSORS_PER_ENCODER);
        for (i, l) in self.layers.iter().enumerate() {
            out.push(Parameter::new(
                format!("{prefix}.layer{i}.weight"),
                l.weight.clone(),
            ));
            out.push(
                Parameter::new(format!("{prefix}.layer{i}.bias"), l.bias.clone()).without_decay(),
            );
        }
        out.push(Parameter::new(
            format!("{prefix}.projection"),
            self.projection.clone(),
        ));
        out
    }

    /// Overwrites weights from tensors in [`EncoderParams::tensors`] order.
    pub fn load_tensors<'a>(
        &mut self,
        tensors: impl IntoIterator<Item = &'a Tensor>,
    ) -> Result<()> {
        let mut it = tensors.into_iter();
        let mut next = || {
            it.next()
                .map(Tensor::detached)
                .ok_or_else(|| Error::Contract("too few tensors for encoder".into()))
        };
        for l in &mut self.layers {
            l.weight = next()?;
            l.bias = next()?;
        }
        self.projection = next()?;
        self.validate()
    }

    /// Binds the encoder's tensors from `vars`, which must follow
    /// [`EncoderParams::tensors`] order.
    pub fn vars_from(&self, vars: &[Var]) -> Result<EncoderVars> {
        if vars.len() != TENSORS_PER_ENCODER {
            return Err(Error::Contract(format!(
                "encoder needs {TENSORS_PER_ENCODER} vars, got {}",
                vars.len()
            )));
        }
        Ok(EncoderVars {
            layers: vec![(vars[0], vars[1]), (vars[2], vars[3])],
            projection: vars[4],
            activation: self.activation,
        })
    }

    /// Registers the encoder's tensors as leaves of `g`.
    pub fn bind(&self, g: &mut Graph) -> EncoderVars {
        let vars: Vec<Var> = self.tensors().into_iter().map(|t| g.leaf(t)).collect();
        self.vars_from(&vars)
            .expect("tensors() yields one tensor per slot")
    }
}

/// Forward pass of a bound encoder: unit-norm `B × d` embeddings.
pub fn encode_on(g: &mut Graph, enc: &EncoderVars, features: Var) -> Result<Var> {
    let mut h = features;
    for &(w, b) in &enc.layers {
        let z = g.matmul(h, w)?;
        let z = g.add_row(z, b)?;
        h = match enc.activation {
            Activation::Tanh => g.tanh(z),
            Activation::Identity => z,
        };
    }
    let out = g.matmul(h, enc.projection)?;
    g.l2_normalize_rows(out)
}

/// Non-differentiable forward pass.
pub fn encode(
    params: &EncoderParams,
    features: &Tensor,
    network: Network,
    modality: Modality,
) -> Result<EmbeddingBatch> {
    if features.rank() != 2 || features.cols() != params.widths.input {
        return Err(Error::shape(
            "encode",
            format!(
                "features {:?} for input width {}",
                features.shape(),
                params.widths.input
            ),
        ));
    }
    if features.rows() == 0 {
        return Err(Error::Data("empty feature batch".into()));
    }
    if !features.is_finite() {
        return Err(Error::Data("non-finite input feature".into()));
    }
    let mut g = Graph::new();
    let enc = params.bind(&mut g);
    let x = g.leaf(features);
    let out = encode_on(&mut g, &enc, x)?;
    EmbeddingBatch::new(g.value(out).detached(), network, modality)
}

/// Image and text encoders that project into one shared `d`.
#[derive(Clone, Debug, PartialEq)]
pub struct DualEncoder {
    pub image: EncoderParams,
    pub text: EncoderParams,
    pub network: Network,
}

impl DualEncoder {
    pub fn init(
        network: Network,
        image_dim: usize,
        text_dim: usize,
        hidden: usize,
        d: usize,
        seed: u64,
    ) -> Result<Self> {
        Ok(Self {
            image: init_encoder(image_dim, hidden, d, seed::derive(seed, 1))?,
            text: init_encoder(text_dim, hidden, d, seed::derive(seed, 2))?,
            network,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.image.validate()?;
        self.text.validate()?;
        if self.image.widths.output != self.text.widths.output {
            return Err(Error::Config(format!(
                "image projects to {} but text to {}",
                self.image.widths.output, self.text.widths.output
            )));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.image.widths.output
    }

    pub fn encode_images(&self, features: &Tensor) -> Result<EmbeddingBatch> {
        encode(&self.image, features, self.network, Modality::Image)
    }

    pub fn encode_texts(&self, features: &Tensor) -> Result<EmbeddingBatch> {
        encode(&self.text, features, self.network, Modality::Text)
    }

    /// Image then text parameters, prefixed by the network tag.
    pub fn parameters(&self) -> Vec<Parameter> {
        let net = self.network.to_string();
        let mut out = self.image.parameters(&format!("{net}.image"));
        out.extend(self.text.parameters(&format!("{net}.text")));
        out
    }

    pub fn load_tensors(&mut self, tensors: &[&Tensor]) -> Result<()> {
        if tensors.len() != 2 * TENSORS_PER_ENCODER {
            return Err(Error::Contract(format!(
                "dual encoder needs {} tensors, got {}",
                2 * TENSORS_PER_ENCODER,
                tensors.len()
            )));
        }
        self.image
            .load_tensors(tensors[..TENSORS_PER_ENCODER].iter().copied())?;
        self.text
            .load_tensors(tensors[TENSORS_PER_ENCODER..].iter().copied())?;
        Ok(())
    }
}

/// `B × d` matrix of unit-norm rows tagged with its origin.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingBatch {
    matrix: Tensor,
    pub network: Network,
    pub modality: Modality,
}

impl EmbeddingBatch {
    pub fn new(matrix: Tensor, network: Network, modality: Modality) -> Result<Self> {
        if matrix.rank() != 2 {
            return Err(Error::shape(
                "embedding_batch",
                format!("{:?}", matrix.shape()),
            ));
        }
        for i in 0..matrix.rows() {
            let norm = crate::autodiff::dot(matrix.row(i), matrix.row(i)).sqrt();
            if (norm - 1.0).abs() > NORM_TOLERANCE {
                return Err(Error::Data(format!("embedding row {i} has norm {norm}")));
            }
        }
        Ok(Self {
            matrix,
            network,
            modality,
        })
    }

    /// Normalizes rows of `raw` before tagging.
    pub fn normalized(raw: Tensor, network: Network, modality: Modality) -> Result<Self> {
        let mut g = Graph::new();
        let x = g.leaf(&raw);
        let y = g.l2_normalize_rows(x)?;
        Self::new(g.value(y).detached(), network, modality)
    }

    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }

    pub fn len(&self) -> usize {
        self.matrix.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.matrix.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.matrix.cols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.matrix.row(i)
    }

    /// Rows `idx` in the given order.
    pub fn select(&self, idx: &[usize]) -> EmbeddingBatch {
        let d = self.dim();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        EmbeddingBatch {
            matrix: Tensor::matrix(idx.len(), d, data).expect("sized by construction"),
            network: self.network,
            modality: self.modality,
        }
    }
}

// On-disk form. Field order is part of the file format.

#[derive(Serialize, Deserialize)]
struct LayerFile {
    weight: Vec<Vec<f64>>,
    bias: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct EncoderFile {
    widths: [usize; 3],
    layers: Vec<LayerFile>,
    projection: Vec<Vec<f64>>,
}

impl Serialize for EncoderParams {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        EncoderFile {
            widths: [self.widths.input, self.widths.hidden, self.widths.output],
            layers: self
                .layers
                .iter()
                .map(|l| LayerFile {
                    weight: l.weight.to_rows(),
                    bias: l.bias.data().to_vec(),
                })
                .collect(),
            projection: self.projection.to_rows(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for EncoderParams {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let file = EncoderFile::deserialize(d)?;
        let [input, hidden, output] = file.widths;
        let matrix =
            |rows: &[Vec<f64>], r: usize, c: usize| -> std::result::Result<Tensor, D::Error> {
                if rows.len() != r {
                    return Err(D::Error::custom(format!(
                        "expected {r} rows, found {}",
                        rows.len()
                    )));
                }
                let t = Tensor::from_rows(rows).map_err(D::Error::custom)?;
                if t.cols() != c && r > 0 {
                    return Err(D::Error::custom(format!(
                        "expected {c} columns, found {}",
                        t.cols()
                    )));
                }
                Ok(t)
            };
        let mut layers = Vec::new();
        let mut fan_in = input;
        for l in &file.layers {
            layers.push(Layer {
                weight: matrix(&l.weight, fan_in, hidden)?,
                bias: Tensor::vector(l.bias.clone()),
            });
            fan_in = hidden;
        }
        let params = EncoderParams {
            widths: Widths {
                input,
                hidden,
                output,
            },
            layers,
            projection: matrix(&file.projection, hidden, output)?,
            activation: Activation::Tanh,
        };
        params.validate().map_err(D::Error::custom)?;
        Ok(params)
    }
}

pub fn save_encoder(params: &EncoderParams, path: &Path) -> Result<()> {
    let text = serde_json::to_string(params)?;
    std::fs::write(path, text)?;
    Ok(())
}

pub fn load_encoder(path: &Path) -> Result<EncoderParams> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn features(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = seed::rng(seed);
        let data = (0..rows * cols)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        Tensor::matrix(rows, cols, data).unwrap()
    }

    #[test]
    fn init_is_deterministic() {
        assert_eq!(
            init_encoder(8, 16, 4, 0).unwrap(),
            init_encoder(8, 16, 4, 0).unwrap()
        );
        assert_ne!(
            init_encoder(8, 16, 4, 0).unwrap(),
            init_encoder(8, 16, 4, 1).unwrap()
        );
    }

    #[test]
    fn init_biases_zero_and_weights_bounded() {
        let p = init_encoder(8, 16, 4, 0).unwrap();
        for l in &p.layers {
            assert!(l.bias.data().iter().all(|&b| b == 0.0));
            let bound = 1.0 / (l.weight.rows() as f64).sqrt();
            assert!(l.weight.data().iter().all(|w| w.abs() <= bound));
        }
        let bound = 1.0 / 16f64.sqrt();
        assert!(p.projection.data().iter().all(|w| w.abs() <= bound));
    }

    #[test]
    fn zero_width_is_config_error() {
        assert!(matches!(init_encoder(0, 4, 4, 0), Err(Error::Config(_))));
        assert!(matches!(init_encoder(4, 4, 0, 0), Err(Error::Config(_))));
    }

    #[test]
    fn outputs_are_unit_norm() {
        let p = init_encoder(8, 16, 4, 3).unwrap();
        let e = encode(&p, &features(10, 8, 5), Network::Student, Modality::Image).unwrap();
        for i in 0..e.len() {
            let n = crate::autodiff::dot(e.row(i), e.row(i)).sqrt();
            assert!((n - 1.0).abs() <= NORM_TOLERANCE);
        }
    }

    #[test]
    fn linear_mode_ignores_positive_scaling() {
        let p = init_encoder(8, 16, 4, 3)
            .unwrap()
            .with_activation(Activation::Identity);
        let x = features(5, 8, 9);
        let mut x2 = x.clone();
        x2.data_mut().iter_mut().for_each(|v| *v *= 2.0);
        let a = encode(&p, &x, Network::Teacher, Modality::Text).unwrap();
        let b = encode(&p, &x2, Network::Teacher, Modality::Text).unwrap();
        for (u, v) in a.matrix().data().iter().zip(b.matrix().data()) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn golden_output() {
        let p = init_encoder(8, 16, 4, 42).unwrap();
        let x = Tensor::matrix(1, 8, vec![0.5, -0.25, 1.0, 0.0, -1.0, 0.75, 0.125, -0.5]).unwrap();
        let e = encode(&p, &x, Network::Student, Modality::Image).unwrap();
        let golden = GOLDEN_1X4;
        for (a, b) in e.matrix().data().iter().zip(golden) {
            assert!((a - b).abs() < 1e-12, "{:?}", e.matrix().data());
        }
    }

    const GOLDEN_1X4: [f64; 4] = [
        -0.2501610843594757,
        -0.8219228924673817,
        0.5117206560180195,
        0.0020398320107215956,
    ];

    #[test]
    fn degenerate_row_is_an_error() {
        let mut p = init_encoder(2, 2, 2, 0).unwrap();
        p.projection = Tensor::zeros(&[2, 2]);
        let x = features(1, 2, 0);
        assert!(matches!(
            encode(&p, &x, Network::Student, Modality::Image),
            Err(Error::DegenerateEmbedding { .. })
        ));
    }

    #[test]
    fn checkpoint_round_trip_and_field_order() {
        let p = init_encoder(3, 4, 2, 11).unwrap();
        let text = serde_json::to_string(&p).unwrap();
        let w = text.find("\"widths\"").unwrap();
        let l = text.find("\"layers\"").unwrap();
        let pr = text.find("\"projection\"").unwrap();
        assert!(w < l && l < pr);
        let back: EncoderParams = serde_json::from_str(&text).unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn checkpoint_with_broken_chain_is_rejected() {
        let p = init_encoder(3, 4, 2, 11).unwrap();
        let mut v: serde_json::Value = serde_json::to_value(&p).unwrap();
        v["widths"][0] = serde_json::json!(5);
        assert!(serde_json::from_value::<EncoderParams>(v).is_err());
    }

    #[test]
    fn frozen_teacher_gets_zero_gradient() {
        let teacher = init_encoder(4, 5, 3, 1).unwrap();
        let student = init_encoder(4, 3, 3, 2).unwrap();
        let mut g = Graph::new();
        let tv = teacher.bind(&mut g);
        let sv = student.bind(&mut g);
        let x = g.leaf(&features(3, 4, 7));
        let t = encode_on(&mut g, &tv, x).unwrap();
        let t = g.stop_gradient(t);
        let s = encode_on(&mut g, &sv, x).unwrap();
        let diff = g.sub(t, s).unwrap();
        let sq = g.square(diff);
        let loss = g.sum(sq);
        let grads = g.backward(loss).unwrap();
        for &(w, b) in &tv.layers {
            assert!(grads.wrt(w).data().iter().all(|&v| v == 0.0));
            assert!(grads.wrt(b).data().iter().all(|&v| v == 0.0));
        }
        assert!(grads.wrt(sv.projection).data().iter().any(|&v| v != 0.0));
    }
}
