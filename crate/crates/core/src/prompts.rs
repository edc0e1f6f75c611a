//! Per-class learnable prompt tokens and assembly of the full template
//! sequence `<start> a photo of a [X]_1 ... [X]_L person <end>`.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::encoders::Template;
use crate::error::{Result, ScingError};
use crate::nn::{Binder, Param, Parameters};
use crate::seed;
use crate::tensor::Tensor;

pub const PROMPT_INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptShape {
    /// Number of classes `K`.
    pub classes: usize,
    /// Tokens per class `L`.
    pub tokens: usize,
    /// Leading tokens that take part in visual fusion, `M < L`.
    pub fused: usize,
    /// Token dimension `d`.
    pub dim: usize,
}

impl PromptShape {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 {
            return Err(ScingError::Config("prompt bank needs at least one class".into()));
        }
        if self.fused == 0 || self.fused >= self.tokens {
            return Err(ScingError::Config(format!(
                "fused token count M={} must satisfy 1 <= M < L={}",
                self.fused, self.tokens
            )));
        }
        if self.dim == 0 {
            return Err(ScingError::Config("prompt dimension must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PromptBank {
    shape: PromptShape,
    tokens: Vec<Param>,
    template: Template,
}

/// Draws every `P_k` i.i.d. from `N(0, 0.02^2)`; reproducible from `seed`.
pub fn init_prompt_bank(shape: PromptShape, seed: u64, template: Template) -> Result<PromptBank> {
    shape.validate()?;
    if template.prefix.cols() != shape.dim || template.suffix.cols() != shape.dim {
        return Err(ScingError::shape(
            "init_prompt_bank template",
            format!("width {}", shape.dim),
            format!("{} / {}", template.prefix.cols(), template.suffix.cols()),
        ));
    }
    let mut rng = seed::stream(seed, "prompt.tokens", &[]);
    let tokens = (0..shape.classes)
        .map(|k| {
            Param::new(
                format!("prompt.tokens.{k}"),
                Tensor::randn(shape.tokens, shape.dim, PROMPT_INIT_STD, &mut rng),
            )
        })
        .collect();
    Ok(PromptBank {
        shape,
        tokens,
        template,
    })
}

impl PromptBank {
    /// Rebuilds a bank from stored token matrices.
    pub fn from_tokens(shape: PromptShape, tokens: Vec<Tensor>, template: Template) -> Result<Self> {
        shape.validate()?;
        if tokens.len() != shape.classes {
            return Err(ScingError::shape("prompt bank classes", shape.classes, tokens.len()));
        }
        let tokens = tokens
            .into_iter()
            .enumerate()
            .map(|(k, t)| {
                if t.shape() != (shape.tokens, shape.dim) {
                    return Err(ScingError::shape(
                        format!("prompt.tokens.{k}"),
                        format!("{}x{}", shape.tokens, shape.dim),
                        format!("{}x{}", t.rows(), t.cols()),
                    ));
                }
                if !t.is_finite() {
                    return Err(ScingError::Numeric(format!("prompt.tokens.{k} is not finite")));
                }
                Ok(Param::new(format!("prompt.tokens.{k}"), t))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(PromptBank {
            shape,
            tokens,
            template,
        })
    }

    pub fn shape(&self) -> PromptShape {
        self.shape
    }

    pub fn template(&self) -> &Template {
        &self.template
    }

    pub fn prefix_len(&self) -> usize {
        self.template.prefix.rows()
    }

    /// Total assembled length: prefix + L + suffix.
    pub fn sequence_len(&self) -> usize {
        self.template.len() + self.shape.tokens
    }

    fn check_class(&self, class_id: usize) -> Result<()> {
        if class_id >= self.shape.classes {
            return Err(ScingError::Index {
                what: "prompt class",
                index: class_id,
                len: self.shape.classes,
            });
        }
        Ok(())
    }

    /// `P_k` as an `L x d` matrix.
    pub fn tokens(&self, class_id: usize) -> Result<&Tensor> {
        self.check_class(class_id)?;
        Ok(&self.tokens[class_id].value)
    }

    pub fn token_param(&self, class_id: usize) -> Result<&Param> {
        self.check_class(class_id)?;
        Ok(&self.tokens[class_id])
    }

    /// `[prefix, head, P_k[M..L], suffix]`, where `head` is `fused` if given
    /// and `P_k[0..M]` otherwise.
    pub fn assemble_sequence(&self, class_id: usize, fused: Option<&Tensor>) -> Result<Tensor> {
        let p = self.tokens(class_id)?;
        let m = self.shape.fused;
        let raw_head = p.slice_rows(0, m);
        let head = match fused {
            Some(f) => {
                if f.shape() != (m, self.shape.dim) {
                    return Err(ScingError::shape(
                        "assemble_sequence fused tokens",
                        format!("{m}x{}", self.shape.dim),
                        format!("{}x{}", f.rows(), f.cols()),
                    ));
                }
                f
            }
            None => &raw_head,
        };
        let tail = p.slice_rows(m, self.shape.tokens - m);
        Tensor::vstack(&[&self.template.prefix, head, &tail, &self.template.suffix])
    }

    /// Graph version of [`PromptBank::assemble_sequence`]. `head` replaces the
    /// first `M` tokens when given.
    pub fn assemble_var(
        &self,
        g: &mut Graph,
        b: &mut Binder,
        class_id: usize,
        head: Option<Var>,
    ) -> Var {
        let m = self.shape.fused;
        let p = b.bind(g, &self.tokens[class_id]);
        let head = head.unwrap_or_else(|| g.slice_rows(p, 0, m));
        let tail = g.slice_rows(p, m, self.shape.tokens - m);
        let prefix = g.constant(self.template.prefix.clone());
        let suffix = g.constant(self.template.suffix.clone());
        g.concat_rows(&[prefix, head, tail, suffix])
    }

    /// Sequence with all `L` tokens replaced by `tokens` (used by the
    /// meta-net baseline, which conditions every token).
    pub fn assemble_full_var(&self, g: &mut Graph, tokens: Var) -> Var {
        let prefix = g.constant(self.template.prefix.clone());
        let suffix = g.constant(self.template.suffix.clone());
        g.concat_rows(&[prefix, tokens, suffix])
    }

    pub fn set_template(&mut self, template: Template) {
        self.template = template;
    }
}

impl Parameters for PromptBank {
    fn params(&self) -> Vec<&Param> {
        self.tokens.iter().collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.tokens.iter_mut().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn template(dim: usize) -> Template {
        Template {
            prefix: Tensor::full(5, dim, 0.5),
            suffix: Tensor::full(2, dim, -0.5),
        }
    }

    fn shape() -> PromptShape {
        PromptShape {
            classes: 3,
            tokens: 4,
            fused: 2,
            dim: 8,
        }
    }

    #[test]
    fn init_shapes_and_determinism() {
        let a = init_prompt_bank(shape(), 7, template(8)).unwrap();
        let b = init_prompt_bank(shape(), 7, template(8)).unwrap();
        let c = init_prompt_bank(shape(), 8, template(8)).unwrap();
        for k in 0..3 {
            assert_eq!(a.tokens(k).unwrap().shape(), (4, 8));
        }
        assert_eq!(a, b);
        let differs = (0..3).any(|k| {
            a.tokens(k)
                .unwrap()
                .as_slice()
                .iter()
                .zip(c.tokens(k).unwrap().as_slice())
                .any(|(x, y)| x != y)
        });
        assert!(differs);
    }

    #[test]
    fn invalid_split_is_a_config_error() {
        let bad = PromptShape { fused: 4, ..shape() };
        assert!(matches!(
            init_prompt_bank(bad, 1, template(8)),
            Err(ScingError::Config(_))
        ));
        let zero = PromptShape { fused: 0, ..shape() };
        assert!(init_prompt_bank(zero, 1, template(8)).is_err());
    }

    #[test]
    fn assembly_cases() {
        let bank = init_prompt_bank(shape(), 7, template(8)).unwrap();
        let raw = bank.assemble_sequence(1, None).unwrap();
        assert_eq!(raw.rows(), 11);
        assert_eq!(bank.sequence_len(), 11);
        let p = bank.tokens(1).unwrap();
        for i in 0..4 {
            assert_eq!(raw.row(5 + i), p.row(i));
        }
        let same = bank.assemble_sequence(1, Some(&p.slice_rows(0, 2))).unwrap();
        assert_eq!(same, raw);
        assert!(matches!(
            bank.assemble_sequence(3, None),
            Err(ScingError::Index { .. })
        ));
        assert!(bank.assemble_sequence(0, Some(&Tensor::zeros(3, 8))).is_err());
    }

    #[test]
    fn graph_assembly_matches_values() {
        let bank = init_prompt_bank(shape(), 9, template(8)).unwrap();
        let mut g = Graph::new();
        let mut b = Binder::frozen();
        let v = bank.assemble_var(&mut g, &mut b, 2, None);
        assert_eq!(g.value(v), &bank.assemble_sequence(2, None).unwrap());
    }

    proptest! {
        #[test]
        fn fused_tokens_only_touch_the_head(vals in proptest::collection::vec(-3.0f64..3.0, 16), class in 0usize..3) {
            let bank = init_prompt_bank(shape(), 11, template(8)).unwrap();
            let fused = Tensor::from_vec(2, 8, vals).unwrap();
            let raw = bank.assemble_sequence(class, None).unwrap();
            let out = bank.assemble_sequence(class, Some(&fused)).unwrap();
            for r in 0..out.rows() {
                if (5..7).contains(&r) {
                    prop_assert_eq!(out.row(r), fused.row(r - 5));
                } else {
                    let same = out.row(r).iter().zip(raw.row(r)).all(|(a, b)| a.to_bits() == b.to_bits());
                    prop_assert!(same);
                }
            }
        }
    }
}
