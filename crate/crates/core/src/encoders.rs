//! The dual encoder: a patch-transformer image encoder and a causal text
//! transformer that consumes token embeddings directly.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Result, ScingError};
use crate::imaging::Image;
use crate::nn::{Binder, LayerNorm, Linear, Param, Parameters, TransformerBlock};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ImageEncoderConfig {
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    /// Transformer width, which is also the global feature dimension `D`.
    pub hidden: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Shared embedding dimension `d`.
    pub embed_dim: usize,
    pub pool: Pool,
}

/// Readout of the global feature from the final token states.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pool {
    /// The class token.
    Token,
    /// Mean over all tokens.
    #[default]
    Mean,
}

impl Default for ImageEncoderConfig {
    fn default() -> Self {
        ImageEncoderConfig {
            height: 64,
            width: 32,
            patch: 8,
            hidden: 64,
            depth: 2,
            heads: 4,
            mlp_ratio: 4,
            embed_dim: 32,
            pool: Pool::Mean,
        }
    }
}

impl ImageEncoderConfig {
    /// 256x128 input with 16x16 patches.
    pub fn full_scale() -> Self {
        ImageEncoderConfig {
            height: 256,
            width: 128,
            patch: 16,
            ..Self::default()
        }
    }

    pub fn num_patches(&self) -> usize {
        (self.height / self.patch) * (self.width / self.patch)
    }

    pub fn patch_len(&self) -> usize {
        self.patch * self.patch * 3
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.height % self.patch != 0 || self.width % self.patch != 0 {
            return Err(ScingError::Config(format!(
                "image {}x{} is not divisible into {}-pixel patches",
                self.height, self.width, self.patch
            )));
        }
        if self.heads == 0 || self.hidden % self.heads != 0 {
            return Err(ScingError::Config(format!(
                "hidden width {} is not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        if self.depth == 0 || self.embed_dim == 0 || self.mlp_ratio == 0 {
            return Err(ScingError::Config(
                "depth, embed_dim and mlp_ratio must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TextEncoderConfig {
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl Default for TextEncoderConfig {
    fn default() -> Self {
        TextEncoderConfig {
            depth: 2,
            heads: 2,
            mlp_ratio: 4,
        }
    }
}

/// Output of [`ImageEncoder::encode_image`].
#[derive(Clone, Debug, PartialEq)]
pub struct ImageFeatures {
    /// Pre-projection global feature `V` (length `D`).
    pub global: Vec<f64>,
    /// Projected, unit-norm descriptor `g` (length `d`).
    pub descriptor: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageEncoder {
    pub config: ImageEncoderConfig,
    pub patch_embed: Linear,
    pub cls_token: Param,
    pub pos_embed: Param,
    pub ln_pre: LayerNorm,
    pub blocks: Vec<TransformerBlock>,
    pub ln_post: LayerNorm,
    pub proj: Param,
}

impl ImageEncoder {
    pub fn new<R: Rng + ?Sized>(config: ImageEncoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.hidden;
        let n = config.num_patches();
        let blocks = (0..config.depth)
            .map(|i| {
                TransformerBlock::new(
                    &format!("image.blocks.{i}"),
                    d,
                    config.heads,
                    config.mlp_ratio,
                    config.depth,
                    rng,
                )
            })
            .collect();
        let scale = (d as f64).powf(-0.5);
        Ok(ImageEncoder {
            patch_embed: Linear::new("image.patch_embed", config.patch_len(), d, true, 1.0, rng),
            cls_token: Param::new("image.cls_token", Tensor::randn(1, d, scale, rng)),
            pos_embed: Param::new("image.pos_embed", Tensor::randn(n + 1, d, scale, rng)),
            ln_pre: LayerNorm::new("image.ln_pre", d),
            blocks,
            ln_post: LayerNorm::new("image.ln_post", d),
            proj: Param::new(
                "image.proj",
                Tensor::randn(d, config.embed_dim, scale, rng),
            ),
            config,
        })
    }

    fn check_image(&self, image: &Image) -> Result<()> {
        let (h, w) = (self.config.height, self.config.width);
        if image.height() != h || image.width() != w {
            return Err(ScingError::shape(
                "encode_image",
                format!("{h}x{w}x3 image"),
                format!("{}x{}x3 image", image.height(), image.width()),
            ));
        }
        Ok(())
    }

    /// Patchifies and validates an image for [`ImageEncoder::forward`].
    pub fn prepare(&self, image: &Image) -> Result<Tensor> {
        self.check_image(image)?;
        Ok(image.patches(self.config.patch))
    }

    /// Records the forward pass. Returns `(V, g)` as `1 x D` and `1 x d`
    /// nodes; `g` is unit-norm.
    pub fn forward(&self, g: &mut Graph, b: &mut Binder, patches: Var) -> (Var, Var) {
        let x = self.patch_embed.forward(g, b, patches);
        let cls = b.bind(g, &self.cls_token);
        let x = g.concat_rows(&[cls, x]);
        let pos = b.bind(g, &self.pos_embed);
        let mut x = g.add(x, pos);
        x = self.ln_pre.forward(g, b, x);
        for block in &self.blocks {
            x = block.forward(g, b, x, false);
        }
        let pooled = match self.config.pool {
            Pool::Token => g.slice_rows(x, 0, 1),
            Pool::Mean => {
                let n = self.config.num_patches() + 1;
                let avg = g.constant(Tensor::full(1, n, 1.0 / n as f64));
                g.matmul(avg, x)
            }
        };
        let global = self.ln_post.forward(g, b, pooled);
        let proj = b.bind(g, &self.proj);
        let projected = g.matmul(global, proj);
        let descriptor = g.normalize_rows(projected);
        (global, descriptor)
    }

    pub fn encode_image(&self, image: &Image) -> Result<ImageFeatures> {
        let patches = self.prepare(image)?;
        let mut g = Graph::new();
        let mut b = Binder::frozen();
        let p = g.constant(patches);
        let (global, descriptor) = self.forward(&mut g, &mut b, p);
        Ok(ImageFeatures {
            global: g.value(global).as_slice().to_vec(),
            descriptor: g.value(descriptor).as_slice().to_vec(),
        })
    }
}

impl Parameters for ImageEncoder {
    fn params(&self) -> Vec<&Param> {
        let mut v = self.patch_embed.params();
        v.push(&self.cls_token);
        v.push(&self.pos_embed);
        v.extend(self.ln_pre.params());
        for b in &self.blocks {
            v.extend(b.params());
        }
        v.extend(self.ln_post.params());
        v.push(&self.proj);
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.patch_embed.params_mut();
        v.push(&mut self.cls_token);
        v.push(&mut self.pos_embed);
        v.extend(self.ln_pre.params_mut());
        for b in &mut self.blocks {
            v.extend(b.params_mut());
        }
        v.extend(self.ln_post.params_mut());
        v.push(&mut self.proj);
        v
    }
}

/// The fixed word vocabulary of the text encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(usize)]
pub enum Word {
    Start = 0,
    End = 1,
    A = 2,
    Photo = 3,
    Of = 4,
    Person = 5,
}

pub const VOCAB_SIZE: usize = 6;

/// `<start> a photo of a`
pub const TEMPLATE_PREFIX: [Word; 5] = [Word::Start, Word::A, Word::Photo, Word::Of, Word::A];
/// `person <end>`
pub const TEMPLATE_SUFFIX: [Word; 2] = [Word::Person, Word::End];

/// Fixed template embeddings surrounding the learnable prompt tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct Template {
    pub prefix: Tensor,
    pub suffix: Tensor,
}

impl Template {
    pub fn len(&self) -> usize {
        self.prefix.rows() + self.suffix.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextEncoder {
    pub config: TextEncoderConfig,
    pub dim: usize,
    pub seq_len: usize,
    pub token_embedding: Param,
    pub pos_embed: Param,
    pub blocks: Vec<TransformerBlock>,
    pub ln_final: LayerNorm,
    pub proj: Param,
}

impl TextEncoder {
    /// `dim` is the shared embedding dimension, `seq_len` the fixed
    /// template-plus-prompt length.
    pub fn new<R: Rng + ?Sized>(
        config: TextEncoderConfig,
        dim: usize,
        seq_len: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if config.heads == 0 || dim % config.heads != 0 {
            return Err(ScingError::Config(format!(
                "text width {dim} is not divisible by {} heads",
                config.heads
            )));
        }
        if config.depth == 0 {
            return Err(ScingError::Config("text depth must be positive".into()));
        }
        let blocks = (0..config.depth)
            .map(|i| {
                TransformerBlock::new(
                    &format!("text.blocks.{i}"),
                    dim,
                    config.heads,
                    config.mlp_ratio,
                    config.depth,
                    rng,
                )
            })
            .collect();
        Ok(TextEncoder {
            token_embedding: Param::new(
                "text.token_embedding",
                Tensor::randn(VOCAB_SIZE, dim, 0.02, rng),
            ),
            pos_embed: Param::new("text.pos_embed", Tensor::randn(seq_len, dim, 0.01, rng)),
            blocks,
            ln_final: LayerNorm::new("text.ln_final", dim),
            proj: Param::new(
                "text.proj",
                Tensor::randn(dim, dim, (dim as f64).powf(-0.5), rng),
            ),
            config,
            dim,
            seq_len,
        })
    }

    pub fn word_embedding(&self, word: Word) -> &[f64] {
        self.token_embedding.value.row(word as usize)
    }

    pub fn template(&self) -> Template {
        let rows = |words: &[Word]| {
            let rows: Vec<Vec<f64>> = words
                .iter()
                .map(|w| self.word_embedding(*w).to_vec())
                .collect();
            Tensor::from_rows(&rows).expect("uniform width")
        };
        Template {
            prefix: rows(&TEMPLATE_PREFIX),
            suffix: rows(&TEMPLATE_SUFFIX),
        }
    }

    /// Records the forward pass over a `seq_len x dim` token-embedding
    /// sequence and returns the unit-norm `1 x dim` readout of the final
    /// position.
    pub fn forward(&self, g: &mut Graph, b: &mut Binder, sequence: Var) -> Var {
        let pos = b.bind(g, &self.pos_embed);
        let mut x = g.add(sequence, pos);
        for block in &self.blocks {
            x = block.forward(g, b, x, true);
        }
        let last = g.slice_rows(x, self.seq_len - 1, 1);
        let last = self.ln_final.forward(g, b, last);
        let proj = b.bind(g, &self.proj);
        let out = g.matmul(last, proj);
        g.normalize_rows(out)
    }

    pub fn check_sequence(&self, sequence: &Tensor) -> Result<()> {
        if sequence.shape() != (self.seq_len, self.dim) {
            return Err(ScingError::shape(
                "encode_text",
                format!("{}x{} token sequence", self.seq_len, self.dim),
                format!("{}x{}", sequence.rows(), sequence.cols()),
            ));
        }
        if !sequence.is_finite() {
            return Err(ScingError::Numeric(
                "token sequence contains non-finite entries".into(),
            ));
        }
        Ok(())
    }

    pub fn encode_text(&self, sequence: &Tensor) -> Result<Vec<f64>> {
        self.check_sequence(sequence)?;
        let mut g = Graph::new();
        let mut b = Binder::frozen();
        let s = g.constant(sequence.clone());
        let w = self.forward(&mut g, &mut b, s);
        Ok(g.value(w).as_slice().to_vec())
    }
}

impl Parameters for TextEncoder {
    fn params(&self) -> Vec<&Param> {
        let mut v = vec![&self.token_embedding, &self.pos_embed];
        for b in &self.blocks {
            v.extend(b.params());
        }
        v.extend(self.ln_final.params());
        v.push(&self.proj);
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = vec![&mut self.token_embedding, &mut self.pos_embed];
        for b in &mut self.blocks {
            v.extend(b.params_mut());
        }
        v.extend(self.ln_final.params_mut());
        v.push(&mut self.proj);
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::stream;

    fn tiny_image_config() -> ImageEncoderConfig {
        ImageEncoderConfig {
            height: 16,
            width: 8,
            patch: 4,
            hidden: 16,
            depth: 2,
            heads: 2,
            mlp_ratio: 2,
            embed_dim: 8,
            pool: Pool::Mean,
        }
    }

    #[test]
    fn descriptor_is_unit_norm_and_deterministic() {
        let enc = ImageEncoder::new(ImageEncoderConfig::default(), &mut stream(3, "img", &[])).unwrap();
        let img = Image::filled(64, 32, [0.2, 0.5, 0.9]);
        let a = enc.encode_image(&img).unwrap();
        let b = enc.encode_image(&img).unwrap();
        assert_eq!(a.global.len(), 64);
        assert_eq!(a.descriptor.len(), 32);
        let n: f64 = a.descriptor.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-6);
        assert_eq!(a, b);
        assert!(a.global.iter().zip(&b.global).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn zero_and_one_images_differ() {
        let enc = ImageEncoder::new(tiny_image_config(), &mut stream(4, "img", &[])).unwrap();
        let zero = enc.encode_image(&Image::filled(16, 8, [0.0; 3])).unwrap();
        let one = enc.encode_image(&Image::filled(16, 8, [1.0; 3])).unwrap();
        let dist: f64 = zero
            .global
            .iter()
            .zip(&one.global)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        assert!(dist > 0.0);
    }

    #[test]
    fn wrong_geometry_is_a_shape_error() {
        let enc = ImageEncoder::new(tiny_image_config(), &mut stream(4, "img", &[])).unwrap();
        let err = enc.encode_image(&Image::filled(8, 8, [0.0; 3])).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, ScingError::Shape { .. }));
        assert!(msg.contains("16x8x3") && msg.contains("8x8x3"), "{msg}");
    }

    #[test]
    fn text_encoder_contracts() {
        let enc = TextEncoder::new(TextEncoderConfig::default(), 8, 11, &mut stream(5, "txt", &[])).unwrap();
        let mut rng = stream(6, "seq", &[]);
        let seq = Tensor::randn(11, 8, 0.1, &mut rng);
        let w1 = enc.encode_text(&seq).unwrap();
        let w2 = enc.encode_text(&seq).unwrap();
        assert_eq!(w1, w2);
        let n: f64 = w1.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-6);

        let mut other = seq.clone();
        other.set(6, 3, other.get(6, 3) + 0.05);
        let w3 = enc.encode_text(&other).unwrap();
        let dist: f64 = w1.iter().zip(&w3).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        assert!(dist > 0.0);

        assert!(matches!(
            enc.encode_text(&Tensor::zeros(10, 8)),
            Err(ScingError::Shape { .. })
        ));
        let mut bad = seq;
        bad.set(0, 0, f64::NAN);
        assert!(matches!(enc.encode_text(&bad), Err(ScingError::Numeric(_))));
    }

    #[test]
    fn template_lengths() {
        let enc = TextEncoder::new(TextEncoderConfig::default(), 8, 11, &mut stream(5, "txt", &[])).unwrap();
        let t = enc.template();
        assert_eq!(t.prefix.rows(), 5);
        assert_eq!(t.suffix.rows(), 2);
        // "a" appears twice in the prefix with the same embedding
        assert_eq!(t.prefix.row(1), t.prefix.row(4));
    }
}
