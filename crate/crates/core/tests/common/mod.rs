#![allow(dead_code)]

use std::path::Path;

use scing::config::Config;
use scing::data::{generate_dataset, Dataset, GenerationParams};

/// A benchmark small enough for a full pipeline in a few seconds.
pub fn tiny_config(root: &Path) -> Config {
    let mut cfg = Config::default();
    cfg.model.image.hidden = 16;
    cfg.model.image.heads = 2;
    cfg.model.image.embed_dim = 16;
    cfg.data.train_identities = 6;
    cfg.data.eval_identities = 3;
    cfg.data.images_per_id_per_cam = 4;
    cfg.data.dir = root.join("data");
    cfg.optim.ids_per_batch = 3;
    cfg.optim.images_per_id = 2;
    cfg.optim.stage1_epochs = 2;
    cfg.optim.stage2_epochs = 2;
    cfg.run.out_dir = root.join("run");
    cfg
}

pub fn tiny_dataset(cfg: &Config) -> Dataset {
    let manifest = generate_dataset(&GenerationParams::from_config(cfg), &cfg.data.dir).unwrap();
    Dataset::from_manifest(manifest).unwrap()
}

use scing::autograd::{Graph, Var};
use scing::gradcheck::{finite_difference, relative_error};
use scing::model::ScingModel;
use scing::nn::{Binder, Parameters, Trainable};
use scing::seed::stream;

/// Width-16, depth-2 model for gradient checks.
pub fn width16_config() -> Config {
    let mut cfg = Config::default();
    cfg.model.image.height = 16;
    cfg.model.image.width = 8;
    cfg.model.image.patch = 4;
    cfg.model.image.hidden = 16;
    cfg.model.image.heads = 2;
    cfg.model.image.depth = 2;
    cfg.model.image.embed_dim = 16;
    cfg.model.text.depth = 2;
    cfg
}

/// Worst relative error over parameters between binder gradients and
/// central differences of `loss`, sampling up to `per_param` entries of
/// each parameter. Returns `(name, error)` of the worst parameter.
pub fn param_gradcheck<F>(model: &ScingModel, per_param: usize, loss: F) -> (String, f64)
where
    F: Fn(&ScingModel, &mut Graph, &mut Binder) -> Var,
{
    let mut g = Graph::new();
    let mut b = Binder::new(Trainable::All);
    let out = loss(model, &mut g, &mut b);
    let grads = b.gradients(&g.backward(out));
    let value = |m: &ScingModel| {
        let mut g = Graph::new();
        let mut b = Binder::frozen();
        let out = loss(m, &mut g, &mut b);
        g.value(out).item()
    };

    let mut worst = (String::new(), 0.0);
    let probe = std::cell::RefCell::new(model.clone());
    for p in model.params() {
        let Some(analytic) = grads.get(&p.name) else {
            continue;
        };
        let n = p.value.len();
        let mut rng = stream(0, "gradcheck.entries", &[n as u64]);
        let entries: Vec<usize> = if n <= per_param {
            (0..n).collect()
        } else {
            rand::seq::index::sample(&mut rng, n, per_param).into_vec()
        };
        let base: Vec<f64> = entries.iter().map(|i| p.value.as_slice()[*i]).collect();
        let numeric = finite_difference(
            |x| {
                {
                    let mut m = probe.borrow_mut();
                    let target = m
                        .params_mut()
                        .into_iter()
                        .find(|q| q.name == p.name)
                        .expect("parameter exists");
                    for (i, v) in entries.iter().zip(x) {
                        target.value.as_mut_slice()[*i] = *v;
                    }
                }
                value(&probe.borrow())
            },
            &base,
            1e-5,
        );
        // restore
        let mut m = probe.borrow_mut();
        let target = m.params_mut().into_iter().find(|q| q.name == p.name).unwrap();
        target.value = p.value.clone();
        let picked: Vec<f64> = entries.iter().map(|i| analytic.as_slice()[*i]).collect();
        let err = relative_error(&picked, &numeric);
        if err > worst.1 {
            worst = (p.name.clone(), err);
        }
    }
    worst
}
