//! Finite-difference check of the gated fusion path on a width-16 model:
//! global feature -> condition MLP and gate -> fused prompt -> text encoder.

use scing::autograd::Var;
use scing::config::Config;
use scing::gradcheck::check_gradients;
use scing::model::ScingModel;
use scing::nn::Binder;
use scing::seed::stream;
use scing::svip::fuse_var;
use scing::tensor::Tensor;

fn main() -> scing::error::Result<()> {
    let mut cfg = Config::default();
    cfg.model.image.hidden = 16;
    cfg.model.image.embed_dim = 16;
    let model = ScingModel::new(&cfg, 2, 0)?;
    let (fused, tokens, dim) = (cfg.prompts.fused, cfg.prompts.tokens, 16);

    let mut rng = stream(0, "example.gradcheck", &[]);
    let v = Tensor::randn(1, cfg.model.image.hidden, 1.0, &mut rng);
    let prompt = model.prompts.tokens(1)?.clone();
    let target = Tensor::randn(1, dim, 1.0, &mut rng);
    let report = check_gradients(&[v, prompt], 1e-5, |g, x: &[Var]| {
        let mut b = Binder::frozen();
        let c = model.svip.condition_var(g, &mut b, x[0]);
        let a = model.svip.gate_var(g, &mut b, x[0]);
        let head = g.slice_rows(x[1], 0, fused);
        let tail = g.slice_rows(x[1], fused, tokens - fused);
        let head = fuse_var(g, head, c, a);
        let toks = g.concat_rows(&[head, tail]);
        let seq = model.prompts.assemble_full_var(g, toks);
        let w = model.text.forward(g, &mut b, seq);
        let t = g.constant(target.clone());
        let d = g.mul(w, t);
        g.sum(d)
    });
    println!("relative error per input: {:?}", report.per_input);
    println!("max {:.2e}, within 1e-4: {}", report.max_rel_error, report.passes(1e-4));
    Ok(())
}
