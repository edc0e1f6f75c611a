//! The assembled model: both encoders, the prompt bank, the fusion modules
//! and the learnable temperature.

use std::collections::BTreeMap;

use crate::autograd::{Graph, Var};
use crate::config::{Config, Fusion};
use crate::encoders::{ImageEncoder, TextEncoder};
use crate::error::{Result, ScingError};
use crate::imaging::Image;
use crate::nn::{Binder, Param, Parameters};
use crate::prompts::{init_prompt_bank, PromptBank, PromptShape};
use crate::seed::{derive_seed, stream};
use crate::svip::{fuse_var, MetaNet, SvipParams};
use crate::tensor::Tensor;

pub const LOGIT_SCALE: &str = "logit_scale";

/// Parameter-name prefixes trained in the first stage.
pub const STAGE1_PREFIXES: [&str; 4] = ["prompt.", "svip.", "metanet.", LOGIT_SCALE];
/// Parameter-name prefix of the image encoder.
pub const IMAGE_PREFIX: &str = "image.";

#[derive(Clone, Debug, PartialEq)]
pub struct ScingModel {
    pub image: ImageEncoder,
    pub text: TextEncoder,
    pub prompts: PromptBank,
    pub svip: SvipParams,
    pub metanet: MetaNet,
    /// `ln(1/tau)`, `1 x 1`.
    pub logit_scale: Param,
}

impl ScingModel {
    /// Fresh model for `classes` identities. Every component draws from its
    /// own stream, so all fusion variants share identical encoders and
    /// prompts for a given seed.
    pub fn new(config: &Config, classes: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let image_cfg = config.model.image.clone();
        let d = image_cfg.embed_dim;
        let shape = PromptShape {
            classes,
            tokens: config.prompts.tokens,
            fused: config.prompts.fused,
            dim: d,
        };
        shape.validate()?;
        let image = ImageEncoder::new(image_cfg.clone(), &mut stream(seed, "init.image", &[]))?;
        let probe = TextEncoder::new(config.model.text.clone(), d, 1, &mut stream(0, "probe", &[]))?;
        let seq_len = probe.template().len() + shape.tokens;
        let text = TextEncoder::new(
            config.model.text.clone(),
            d,
            seq_len,
            &mut stream(seed, "init.text", &[]),
        )?;
        let prompts = init_prompt_bank(shape, derive_seed(seed, "init.prompts", &[]), text.template())?;
        let svip = SvipParams::new(
            image_cfg.hidden,
            shape.fused,
            d,
            &mut stream(seed, "init.svip", &[]),
        );
        let metanet = MetaNet::new(image_cfg.hidden, d, &mut stream(seed, "init.metanet", &[]));
        Ok(ScingModel {
            image,
            text,
            prompts,
            svip,
            metanet,
            logit_scale: Param::new(LOGIT_SCALE, Tensor::scalar((1.0 / config.model.tau_init).ln())),
        })
    }

    pub fn classes(&self) -> usize {
        self.prompts.shape().classes
    }

    pub fn embed_dim(&self) -> usize {
        self.prompts.shape().dim
    }

    /// `1/tau`.
    pub fn scale(&self) -> f64 {
        self.logit_scale.value.item().exp()
    }

    pub fn tau(&self) -> f64 {
        1.0 / self.scale()
    }

    /// Records the text embedding of `class_id`. With `global` (a `1 x D`
    /// node holding `V`) the prompts are conditioned according to `fusion`;
    /// without it, or for [`Fusion::Static`], the raw prompts are encoded.
    pub fn text_embedding_var(
        &self,
        g: &mut Graph,
        b: &mut Binder,
        class_id: usize,
        fusion: Fusion,
        global: Option<Var>,
    ) -> Var {
        let m = self.prompts.shape().fused;
        let seq = match (fusion, global) {
            (Fusion::Svip, Some(v)) => {
                let p = b.bind(g, &self.prompts_param(class_id));
                let head = g.slice_rows(p, 0, m);
                let c = self.svip.condition_var(g, b, v);
                let a = self.svip.gate_var(g, b, v);
                let fused = fuse_var(g, head, c, a);
                self.prompts.assemble_var(g, b, class_id, Some(fused))
            }
            (Fusion::MetaNet, Some(v)) => {
                let p = b.bind(g, &self.prompts_param(class_id));
                let c = self.metanet.condition_var(g, b, v);
                let tokens = g.add_row(p, c);
                self.prompts.assemble_full_var(g, tokens)
            }
            _ => self.prompts.assemble_var(g, b, class_id, None),
        };
        self.text.forward(g, b, seq)
    }

    fn prompts_param(&self, class_id: usize) -> Param {
        self.prompts
            .token_param(class_id)
            .expect("class id checked by caller")
            .clone()
    }

    fn check_class(&self, class_id: usize) -> Result<()> {
        if class_id >= self.classes() {
            return Err(ScingError::Index {
                what: "class",
                index: class_id,
                len: self.classes(),
            });
        }
        Ok(())
    }

    /// Text embedding of `class_id` conditioned on the global feature `V`.
    pub fn text_embedding(&self, class_id: usize, fusion: Fusion, global: Option<&[f64]>) -> Result<Vec<f64>> {
        self.check_class(class_id)?;
        let mut g = Graph::new();
        let mut b = Binder::frozen();
        let v = match global {
            Some(v) => {
                if v.len() != self.image.config.hidden {
                    return Err(ScingError::shape("global feature", self.image.config.hidden, v.len()));
                }
                Some(g.constant(Tensor::row_vector(v.to_vec())))
            }
            None => None,
        };
        let w = self.text_embedding_var(&mut g, &mut b, class_id, fusion, v);
        let w = g.value(w);
        if !w.is_finite() {
            return Err(ScingError::Numeric("text embedding is not finite".into()));
        }
        Ok(w.as_slice().to_vec())
    }

    /// The image-conditioned text embedding with selective fusion.
    pub fn svip_text_embedding(&self, class_id: usize, image: &Image) -> Result<Vec<f64>> {
        let f = self.image.encode_image(image)?;
        self.text_embedding(class_id, Fusion::Svip, Some(&f.global))
    }

    /// `K x d` matrix of raw-prompt text embeddings (no image conditioning).
    pub fn class_text_embeddings(&self) -> Result<Tensor> {
        let rows = (0..self.classes())
            .map(|k| self.text_embedding(k, Fusion::Static, None))
            .collect::<Result<Vec<_>>>()?;
        Tensor::from_rows(&rows)
    }

    /// Parameters needed at retrieval time.
    pub fn inference_params(&self) -> Vec<&Param> {
        self.image.params()
    }

    pub fn inference_param_count(&self) -> usize {
        self.image.param_count()
    }

    /// Every parameter value keyed by name.
    pub fn named_arrays(&self) -> BTreeMap<String, Tensor> {
        self.params()
            .into_iter()
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect()
    }

    /// Overwrites parameters from `arrays`. Every model parameter must be
    /// present with a matching shape; extra names are an error too.
    pub fn load_arrays(&mut self, arrays: &BTreeMap<String, Tensor>) -> Result<()> {
        let mut seen = 0usize;
        for p in self.params_mut() {
            let t = arrays
                .get(&p.name)
                .ok_or_else(|| ScingError::Checkpoint(format!("missing array {}", p.name)))?;
            if t.shape() != p.value.shape() {
                return Err(ScingError::Checkpoint(format!(
                    "array {} has shape {}x{}, expected {}x{}",
                    p.name,
                    t.rows(),
                    t.cols(),
                    p.value.rows(),
                    p.value.cols()
                )));
            }
            p.value = t.clone();
            seen += 1;
        }
        if seen != arrays.len() {
            let names: Vec<&str> = self.params().iter().map(|p| p.name.as_str()).collect();
            let extra: Vec<&String> = arrays.keys().filter(|k| !names.contains(&k.as_str())).collect();
            return Err(ScingError::Checkpoint(format!("unexpected arrays {extra:?}")));
        }
        self.prompts.set_template(self.text.template());
        Ok(())
    }
}

impl Parameters for ScingModel {
    fn params(&self) -> Vec<&Param> {
        let mut v = self.image.params();
        v.extend(self.text.params());
        v.extend(self.prompts.params());
        v.extend(self.svip.params());
        v.extend(self.metanet.params());
        v.push(&self.logit_scale);
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.image.params_mut();
        v.extend(self.text.params_mut());
        v.extend(self.prompts.params_mut());
        v.extend(self.svip.params_mut());
        v.extend(self.metanet.params_mut());
        v.push(&mut self.logit_scale);
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> ScingModel {
        ScingModel::new(&Config::default(), 3, 5).unwrap()
    }

    #[test]
    fn names_are_unique_and_prefixed() {
        let m = model();
        let names: Vec<&str> = m.params().iter().map(|p| p.name.as_str()).collect();
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), names.len());
        let image: usize = m
            .params()
            .iter()
            .filter(|p| p.name.starts_with(IMAGE_PREFIX))
            .map(|p| p.value.len())
            .sum();
        assert_eq!(image, m.inference_param_count());
    }

    #[test]
    fn zero_condition_reduces_to_static_prompts() {
        let mut m = model();
        m.svip.mlp_fc2.weight.value.scale_assign(0.0);
        let img = Image::filled(64, 32, [0.3, 0.5, 0.7]);
        let fused = m.svip_text_embedding(1, &img).unwrap();
        let raw = m.text_embedding(1, Fusion::Static, None).unwrap();
        assert_eq!(fused, raw);
    }

    #[test]
    fn distinct_images_give_distinct_embeddings() {
        let m = model();
        let a = m.svip_text_embedding(0, &Image::filled(64, 32, [0.0; 3])).unwrap();
        let b = m.svip_text_embedding(0, &Image::filled(64, 32, [1.0; 3])).unwrap();
        let dist: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum();
        assert!(dist > 0.0);
    }

    #[test]
    fn arrays_round_trip() {
        let a = model();
        let mut b = ScingModel::new(&Config::default(), 3, 99).unwrap();
        assert_ne!(a, b);
        b.load_arrays(&a.named_arrays()).unwrap();
        assert_eq!(a, b);
        let mut arrays = a.named_arrays();
        arrays.remove(LOGIT_SCALE);
        assert!(b.load_arrays(&arrays).is_err());
    }
}
