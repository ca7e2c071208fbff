//! Convolutional stem, stacked attention blocks, upsampling decoder and a
//! sigmoid head producing a per-pixel lesion probability.
//!
//! ```text
//! stem     conv3x3(in→d) relu, conv3x3(d→d, stride f) relu
//! block    x + W(LN(H(LN(x))))  then  x + conv1x1(relu(conv1x1(x)))
//! decoder  [upsample2x, conv3x3(d→d), relu] × log2(f)
//! head     conv1x1(d→1), sigmoid
//! ```
//!
//! `H`/`W` are height- and width-axis attention layers (gated for the
//! `GatedAxial` variant). The `Full2D` variant replaces the pair with one
//! dense relative-position layer: `x + F(LN(x))`.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;

use crate::attention::{AxialAttentionLayer, Axis, Full2DAttentionLayer};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionVariant {
    Full2d,
    Axial,
    Gated,
}

impl AttentionVariant {
    pub const NAMES: &'static [&'static str] = &["full2d", "axial", "gated"];

    pub fn name(self) -> &'static str {
        match self {
            AttentionVariant::Full2d => "full2d",
            AttentionVariant::Axial => "axial",
            AttentionVariant::Gated => "gated",
        }
    }
}

impl fmt::Display for AttentionVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AttentionVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full2d" => Ok(AttentionVariant::Full2d),
            "axial" => Ok(AttentionVariant::Axial),
            "gated" => Ok(AttentionVariant::Gated),
            _ => Err(Error::UnknownVariant {
                given: s.to_string(),
                valid: Self::NAMES.join(", "),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegModelConfig {
    pub in_channels: usize,
    pub d_model: usize,
    pub heads: usize,
    pub num_blocks: usize,
    pub downsample_factor: usize,
    pub attention_variant: AttentionVariant,
    /// Input height; fixes the relative-position table lengths.
    pub height: usize,
    pub width: usize,
    pub seed: u64,
}

impl SegModelConfig {
    /// `d_model=16, heads=2, num_blocks=2, downsample=2`.
    pub fn desk(variant: AttentionVariant, size: usize, seed: u64) -> Self {
        SegModelConfig {
            in_channels: 1,
            d_model: 16,
            heads: 2,
            num_blocks: 2,
            downsample_factor: 2,
            attention_variant: variant,
            height: size,
            width: size,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.in_channels == 0 || self.d_model == 0 || self.heads == 0 {
            return bad("in_channels, d_model and heads must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return bad(format!(
                "d_model {} is not divisible by heads {}",
                self.d_model, self.heads
            ));
        }
        let f = self.downsample_factor;
        if f == 0 || !f.is_power_of_two() {
            return bad(format!("downsample_factor {f} is not a power of two"));
        }
        if self.height == 0 || self.width == 0 || !self.height.is_multiple_of(f) || !self.width.is_multiple_of(f) {
            return bad(format!(
                "input {}x{} is not divisible by downsample_factor {f}",
                self.height, self.width
            ));
        }
        Ok(())
    }

    pub fn feature_extent(&self) -> (usize, usize) {
        (
            self.height / self.downsample_factor,
            self.width / self.downsample_factor,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Conv {
    w: ParamId,
    b: ParamId,
    stride: usize,
}

impl Conv {
    fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let bound = 1.0 / ((c_in * k * k) as f64).sqrt();
        Ok(Conv {
            w: store.uniform(format!("{name}.w"), &[c_out, c_in, k, k], bound, rng)?,
            b: store.uniform(format!("{name}.b"), &[c_out], bound, rng)?,
            stride,
        })
    }

    fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        g.conv2d(x, p.var(self.w), Some(p.var(self.b)), self.stride)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Norm {
    gain: ParamId,
    bias: ParamId,
}

impl Norm {
    fn new(store: &mut ParamStore, name: &str, c: usize) -> Result<Self> {
        Ok(Norm {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[c], 1.0)?)?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[c])?)?,
        })
    }

    fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        g.layer_norm_channels(x, p.var(self.gain), p.var(self.bias))
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Mixer {
    Axial {
        norm2: Norm,
        height: AxialAttentionLayer,
        width: AxialAttentionLayer,
    },
    Full(Full2DAttentionLayer),
}

#[derive(Debug, Clone, PartialEq)]
struct Block {
    norm1: Norm,
    mixer: Mixer,
    ffn1: Conv,
    ffn2: Conv,
}

impl Block {
    fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let h = self.norm1.forward(g, p, x)?;
        let h = match &self.mixer {
            Mixer::Axial { norm2, height, width } => {
                let h = height.forward(g, p, h)?;
                let h = norm2.forward(g, p, h)?;
                width.forward(g, p, h)?
            }
            Mixer::Full(layer) => layer.forward(g, p, h)?,
        };
        let x = g.add(x, h)?;
        let f = self.ffn1.forward(g, p, x)?;
        let f = g.relu(f)?;
        let f = self.ffn2.forward(g, p, f)?;
        g.add(x, f)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegModel {
    config: SegModelConfig,
    params: ParamStore,
    stem: [Conv; 2],
    blocks: Vec<Block>,
    decoder: Vec<Conv>,
    head: Conv,
}

impl SegModel {
    /// Deterministic in `config.seed`. Gates are set without consuming
    /// randomness, so `Axial` and `Gated` models with equal seeds share every
    /// other parameter.
    pub fn build(config: SegModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let d = config.d_model;
        let s = &mut store;

        let stem = [
            Conv::new(s, "stem.0", config.in_channels, d, 3, 1, &mut rng)?,
            Conv::new(s, "stem.1", d, d, 3, config.downsample_factor, &mut rng)?,
        ];
        let (fh, fw) = config.feature_extent();
        let mut blocks = Vec::with_capacity(config.num_blocks);
        for i in 0..config.num_blocks {
            let pre = format!("block.{i}");
            let norm1 = Norm::new(s, &format!("{pre}.norm1"), d)?;
            let mixer = match config.attention_variant {
                AttentionVariant::Full2d => Mixer::Full(Full2DAttentionLayer::new(
                    s,
                    &format!("{pre}.full"),
                    d,
                    config.heads,
                    Some((fh, fw)),
                    &mut rng,
                )?),
                v => {
                    let gated = v == AttentionVariant::Gated;
                    let height = AxialAttentionLayer::new(s, &format!("{pre}.height"), Axis::Height, d, config.heads, fh, gated, &mut rng)?;
                    let norm2 = Norm::new(s, &format!("{pre}.norm2"), d)?;
                    let width = AxialAttentionLayer::new(s, &format!("{pre}.width"), Axis::Width, d, config.heads, fw, gated, &mut rng)?;
                    Mixer::Axial { norm2, height, width }
                }
            };
            let ffn1 = Conv::new(s, &format!("{pre}.ffn1"), d, d, 1, 1, &mut rng)?;
            let ffn2 = Conv::new(s, &format!("{pre}.ffn2"), d, d, 1, 1, &mut rng)?;
            blocks.push(Block { norm1, mixer, ffn1, ffn2 });
        }
        let stages = config.downsample_factor.trailing_zeros() as usize;
        let decoder = (0..stages)
            .map(|i| Conv::new(s, &format!("decoder.{i}"), d, d, 3, 1, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let head = Conv::new(s, "head", d, 1, 1, 1, &mut rng)?;

        Ok(SegModel {
            config,
            params: store,
            stem,
            blocks,
            decoder,
            head,
        })
    }

    pub fn config(&self) -> &SegModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Ids of every gate parameter, empty unless the variant is gated.
    pub fn gate_ids(&self) -> Vec<ParamId> {
        self.blocks
            .iter()
            .flat_map(|b| match &b.mixer {
                Mixer::Axial { height, width, .. } => [height, width]
                    .into_iter()
                    .flat_map(|l| l.gates.map(|g| g.ids()).into_iter().flatten())
                    .collect(),
                Mixer::Full(_) => Vec::new(),
            })
            .collect()
    }

    fn check_input(&self, g: &Graph, image: Var) -> Result<()> {
        let dims = g.shape(image).dims();
        let c = &self.config;
        let expect = [c.in_channels, c.height, c.width];
        if dims != expect {
            return Err(Error::dim("segmodel input", dims, &expect));
        }
        Ok(())
    }

    /// Probabilities with the input's spatial shape.
    pub fn forward(&self, g: &mut Graph, p: &Bound, image: Var) -> Result<Var> {
        self.check_input(g, image)?;
        let mut x = image;
        for conv in &self.stem {
            x = conv.forward(g, p, x)?;
            x = g.relu(x)?;
        }
        for block in &self.blocks {
            x = block.forward(g, p, x)?;
        }
        for conv in &self.decoder {
            x = g.upsample_nearest2x(x)?;
            x = conv.forward(g, p, x)?;
            x = g.relu(x)?;
        }
        let logits = self.head.forward(g, p, x)?;
        g.sigmoid(logits)
    }

    /// Forward pass with nothing tracked.
    pub fn predict(&self, image: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let mut frozen = self.params.clone();
        let ids: Vec<ParamId> = frozen.iter().map(|(id, _)| id).collect();
        for id in ids {
            frozen.set_frozen(id, true);
        }
        let p = frozen.bind(&mut g);
        let x = g.constant(image.clone());
        let y = self.forward(&mut g, &p, x)?;
        Ok(g.value(y).clone())
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let json = self.to_checkpoint_json()?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn to_checkpoint_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct ParamOut<'a> {
            name: &'a str,
            shape: &'a [usize],
            data: Vec<Box<RawValue>>,
        }
        #[derive(Serialize)]
        struct Out<'a> {
            version: u64,
            config: &'a SegModelConfig,
            params: Vec<ParamOut<'a>>,
        }
        let params = self
            .params
            .iter()
            .map(|(_, p)| {
                let data = p
                    .value
                    .data()
                    .iter()
                    .map(|v| RawValue::from_string(format!("{v:.16e}")))
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|e| Error::Config(e.to_string()))?;
                Ok(ParamOut {
                    name: &p.name,
                    shape: p.value.dims(),
                    data,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        serde_json::to_string(&Out {
            version: CHECKPOINT_VERSION,
            config: &self.config,
            params,
        })
        .map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_json(&text, path)
    }

    pub fn from_checkpoint_json(text: &str, path: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct ParamIn {
            name: String,
            shape: Vec<usize>,
            data: Vec<f64>,
        }
        #[derive(Deserialize)]
        struct In {
            config: SegModelConfig,
            params: Vec<ParamIn>,
        }
        let malformed = |reason: String| Error::Malformed {
            path: path.to_path_buf(),
            reason,
        };
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| malformed(e.to_string()))?;
        let version = value
            .get("version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| malformed("missing version".into()))?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version(version));
        }
        let file: In = serde_json::from_value(value).map_err(|e| malformed(e.to_string()))?;

        let mut model = SegModel::build(file.config)?;
        if file.params.len() != model.params.len() {
            return Err(malformed(format!(
                "expected {} parameters, found {}",
                model.params.len(),
                file.params.len()
            )));
        }
        for p in file.params {
            let id = model
                .params
                .find(&p.name)
                .ok_or_else(|| malformed(format!("unexpected parameter `{}`", p.name)))?;
            let expected = model.params.get(id).dims().to_vec();
            if p.shape != expected {
                return Err(Error::ParamShape {
                    name: p.name,
                    expected,
                    found: p.shape,
                });
            }
            if p.data.len() != model.params.get(id).len() {
                return Err(malformed(format!("data length mismatch for `{}`", p.name)));
            }
            model.params.get_mut(id).data_mut().copy_from_slice(&p.data);
        }
        Ok(model)
    }
}
