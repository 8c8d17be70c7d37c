//! Deterministic desk-scale decoder-only transformer.
//!
//! Architecture (fixed): token embedding, `n_layers` pre-norm blocks, final
//! RMS norm, untied unembedding. Each block is
//!
//! ```text
//! x += O · attn(rope(Q · rms(x)), rope(K · rms(x)), V · rms(x))
//! x += Down · (silu(Gate · rms(x)) ⊙ (Up · rms(x)))
//! ```
//!
//! with causal multi-head softmax attention. RMS norms have no learned gain,
//! and no projection carries a bias. All arithmetic is `f32`.

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::CounterRng;

use super::{Backend, ByteTokenizer, ComponentKind, Tokenizer, DecodeSession, ModelConfig, PositionalScheme, StepOutput};

const RMS_EPS: f32 = 1e-5;
const ROPE_BASE: f32 = 10_000.0;

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    config: ModelConfig,
    embed: Matrix,
    unembed: Matrix,
    layers: Vec<[Matrix; 7]>,
}

impl ToyModel {
    /// Pseudo-random initialisation derived from `config.init_seed`.
    ///
    /// Tensor `t` (in [`ToyModel::tensor_names`] order) draws its entries
    /// from substream `t` of the init seed, uniform in `[-b, b]` with
    /// `b = 1/sqrt(fan_in)` for projections, `b = 1` for the embedding and
    /// `b = 3/sqrt(d_model)` for the unembedding.
    pub fn build(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut index = 0u64;
        let mut init = |rows: usize, cols: usize, bound: f32| {
            let mut rng = CounterRng::substream(config.init_seed, index);
            index += 1;
            let data = (0..rows * cols)
                .map(|_| ((rng.next_f64() * 2.0 - 1.0) as f32) * bound)
                .collect();
            Matrix::from_vec(rows, cols, data).expect("sized")
        };
        let d = config.d_model;
        let embed = init(config.vocab_size, d, 1.0);
        let unembed = init(config.vocab_size, d, 3.0 / (d as f32).sqrt());
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            let mats = ComponentKind::ALL.map(|kind| {
                let (rows, cols) = config.component_shape(kind);
                init(rows, cols, 1.0 / (cols as f32).sqrt())
            });
            layers.push(mats);
        }
        Ok(Self {
            config,
            embed,
            unembed,
            layers,
        })
    }

    /// Every tensor zero; all logits are then exactly zero.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let layers = (0..config.n_layers)
            .map(|_| {
                ComponentKind::ALL.map(|kind| {
                    let (r, c) = config.component_shape(kind);
                    Matrix::zeros(r, c)
                })
            })
            .collect();
        Ok(Self {
            embed: Matrix::zeros(config.vocab_size, config.d_model),
            unembed: Matrix::zeros(config.vocab_size, config.d_model),
            layers,
            config,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn embedding(&self) -> &Matrix {
        &self.embed
    }

    pub fn unembedding(&self) -> &Matrix {
        &self.unembed
    }

    /// Canonical tensor order: `embed`, `unembed`, then
    /// `layers.{i}.{component}` for each layer and component.
    pub fn tensor_names(config: &ModelConfig) -> Vec<String> {
        let mut names = vec!["embed".to_string(), "unembed".to_string()];
        for layer in 0..config.n_layers {
            for kind in ComponentKind::ALL {
                names.push(format!("layers.{layer}.{}", kind.name()));
            }
        }
        names
    }

    pub fn tensors(&self) -> Vec<(String, &Matrix)> {
        let names = Self::tensor_names(&self.config);
        let mut mats: Vec<&Matrix> = vec![&self.embed, &self.unembed];
        for layer in &self.layers {
            mats.extend(layer.iter());
        }
        names.into_iter().zip(mats).collect()
    }

    pub fn set_tensor(&mut self, name: &str, matrix: Matrix) -> Result<()> {
        let slot = match name {
            "embed" => &mut self.embed,
            "unembed" => &mut self.unembed,
            other => {
                let (layer, kind) = parse_layer_tensor(other)?;
                if layer >= self.layers.len() {
                    return Err(Error::Addressing { layer, kind });
                }
                &mut self.layers[layer][kind.index()]
            }
        };
        if slot.shape() != matrix.shape() {
            return Err(Error::Shape {
                expected: slot.shape(),
                got: matrix.shape(),
            });
        }
        *slot = matrix;
        Ok(())
    }

    pub fn set_embedding(&mut self, matrix: Matrix) -> Result<()> {
        self.set_tensor("embed", matrix)
    }

    pub fn set_unembedding(&mut self, matrix: Matrix) -> Result<()> {
        self.set_tensor("unembed", matrix)
    }
}

fn parse_layer_tensor(name: &str) -> Result<(usize, ComponentKind)> {
    let mut parts = name.split('.');
    match (parts.next(), parts.next(), parts.next(), parts.next()) {
        (Some("layers"), Some(layer), Some(kind), None) => {
            let layer = layer
                .parse()
                .map_err(|_| Error::Input(format!("bad layer index in tensor `{name}`")))?;
            Ok((layer, kind.parse()?))
        }
        _ => Err(Error::Input(format!("unknown tensor `{name}`"))),
    }
}

impl Backend for ToyModel {
    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn n_layers(&self) -> usize {
        self.config.n_layers
    }

    fn component(&self, layer: usize, kind: ComponentKind) -> Result<&Matrix> {
        self.layers
            .get(layer)
            .map(|l| &l[kind.index()])
            .ok_or(Error::Addressing { layer, kind })
    }

    fn replace_component(&mut self, layer: usize, kind: ComponentKind, matrix: Matrix) -> Result<Matrix> {
        let slot = self
            .layers
            .get_mut(layer)
            .map(|l| &mut l[kind.index()])
            .ok_or(Error::Addressing { layer, kind })?;
        if slot.shape() != matrix.shape() {
            return Err(Error::Shape {
                expected: slot.shape(),
                got: matrix.shape(),
            });
        }
        Ok(std::mem::replace(slot, matrix))
    }

    fn session(&self) -> Box<dyn DecodeSession + '_> {
        Box::new(ToySession {
            model: self,
            position: 0,
            keys: vec![Vec::new(); self.config.n_layers],
            values: vec![Vec::new(); self.config.n_layers],
        })
    }

    fn tokenizer(&self) -> &dyn Tokenizer {
        &ByteTokenizer
    }
}

struct ToySession<'a> {
    model: &'a ToyModel,
    position: usize,
    // Per layer, flattened `[position][d_model]`.
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
}

fn rms_norm(x: &[f32]) -> Vec<f32> {
    let mean_sq = x.iter().map(|v| v * v).sum::<f32>() / x.len() as f32;
    let scale = 1.0 / (mean_sq + RMS_EPS).sqrt();
    x.iter().map(|v| v * scale).collect()
}

fn silu(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

fn rotate(v: &mut [f32], n_heads: usize, position: usize) {
    let head_dim = v.len() / n_heads;
    let half = head_dim / 2;
    for head in v.chunks_exact_mut(head_dim) {
        for i in 0..half {
            let freq = ROPE_BASE.powf(-(2.0 * i as f32) / head_dim as f32);
            let (sin, cos) = (position as f32 * freq).sin_cos();
            let (a, b) = (head[2 * i], head[2 * i + 1]);
            head[2 * i] = a * cos - b * sin;
            head[2 * i + 1] = a * sin + b * cos;
        }
    }
}

impl DecodeSession for ToySession<'_> {
    fn push(&mut self, token: u32) -> Result<StepOutput> {
        let model = self.model;
        let cfg = &model.config;
        if token as usize >= cfg.vocab_size {
            return Err(Error::Input(format!(
                "token {token} out of range for vocabulary of {}",
                cfg.vocab_size
            )));
        }
        let d = cfg.d_model;
        let n_heads = cfg.n_heads;
        let head_dim = cfg.head_dim();
        let inv_sqrt = 1.0 / (head_dim as f32).sqrt();
        let mut x = model.embed.row(token as usize).to_vec();

        for (l, mats) in model.layers.iter().enumerate() {
            let h = rms_norm(&x);
            let mut q = mats[ComponentKind::Query.index()].matvec(&h);
            let mut k = mats[ComponentKind::Key.index()].matvec(&h);
            let v = mats[ComponentKind::Value.index()].matvec(&h);
            if cfg.positional == PositionalScheme::Rotary {
                rotate(&mut q, n_heads, self.position);
                rotate(&mut k, n_heads, self.position);
            }
            self.keys[l].extend_from_slice(&k);
            self.values[l].extend_from_slice(&v);
            let n_pos = self.position + 1;

            let mut attended = vec![0.0f32; d];
            let mut scores = vec![0.0f32; n_pos];
            for head in 0..n_heads {
                let off = head * head_dim;
                let qh = &q[off..off + head_dim];
                for (p, s) in scores.iter_mut().enumerate() {
                    let kh = &self.keys[l][p * d + off..p * d + off + head_dim];
                    *s = qh.iter().zip(kh).map(|(a, b)| a * b).sum::<f32>() * inv_sqrt;
                }
                let max = scores.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                let mut total = 0.0;
                for s in scores.iter_mut() {
                    *s = (*s - max).exp();
                    total += *s;
                }
                let out = &mut attended[off..off + head_dim];
                for (p, s) in scores.iter().enumerate() {
                    let w = s / total;
                    let vh = &self.values[l][p * d + off..p * d + off + head_dim];
                    for (o, vv) in out.iter_mut().zip(vh) {
                        *o += w * vv;
                    }
                }
            }
            let projected = mats[ComponentKind::Output.index()].matvec(&attended);
            for (xi, a) in x.iter_mut().zip(&projected) {
                *xi += a;
            }

            let h2 = rms_norm(&x);
            let gate = mats[ComponentKind::Gate.index()].matvec(&h2);
            let up = mats[ComponentKind::Up.index()].matvec(&h2);
            let act: Vec<f32> = gate.iter().zip(&up).map(|(g, u)| silu(*g) * u).collect();
            let down = mats[ComponentKind::Down.index()].matvec(&act);
            for (xi, dv) in x.iter_mut().zip(&down) {
                *xi += dv;
            }
        }

        self.position += 1;
        let logits = model.unembed.matvec(&rms_norm(&x));
        if logits.iter().any(|l| !l.is_finite()) {
            return Err(Error::Generation("non-finite logits".into()));
        }
        Ok(StepOutput { logits, hidden: x })
    }
}
