//! Two-stage training.
//!
//! Stage 1 freezes both encoders and learns the prompts, the fusion modules
//! and the temperature under the contrastive loss plus the weighted
//! three-view consistency loss. Stage 2 freezes everything text-side and
//! tunes the whole image encoder with identity cross-entropy against fixed
//! class text embeddings plus the cross-modal triplet loss.
//!
//! Each batch element gets its own graph. The batch loss is built on stacked
//! copies of the per-element outputs, and its gradients seed the element
//! graphs. Elements may be processed on worker threads; gradients are merged
//! in element order so results do not depend on the thread count.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::autograd::{Graph, Var};
use crate::checkpoint::{
    Checkpoint, CheckpointMeta, PromptMeta, Stage, OPTIM_M_PREFIX, OPTIM_V_PREFIX, TARGETS_ARRAY,
};
use crate::config::{Config, Fusion, TargetMode};
use crate::data::{sample_batch, BatchItem, BatchSpec, Dataset};
use crate::encoders::ImageFeatures;
use crate::error::{Result, ScingError};
use crate::losses::{
    ce_var, clip_contrastive_var, consistency_var, stage1_loss, stage2_loss, triplet_var,
};
use crate::model::{ScingModel, IMAGE_PREFIX, LOGIT_SCALE, STAGE1_PREFIXES};
use crate::nn::{Binder, ParamGrads, Parameters, Trainable};
use crate::optim::{lr_at, scale_milestones, Adam};
use crate::perturb::{feature_dropout, perturb_image};
use crate::seed::stream;
use crate::tensor::Tensor;

pub const TRAIN_LOG: &str = "train_log.csv";
pub const EPOCH_LOG: &str = "epochs.csv";
pub const STAGE1_CKPT: &str = "stage1.ckpt";
pub const STAGE2_CKPT: &str = "stage2.ckpt";

/// One row of the per-step training log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepLog {
    pub stage: u8,
    pub epoch: usize,
    pub step: usize,
    pub l_clip: Option<f64>,
    pub l_con: Option<f64>,
    pub l_ce: Option<f64>,
    pub l_trp: Option<f64>,
    pub total: f64,
}

/// Epoch means of the logged losses. `epoch` is 1-based.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochStats {
    pub stage: u8,
    pub epoch: usize,
    pub lr: f64,
    pub l_clip: Option<f64>,
    pub l_con: Option<f64>,
    /// Mean pairwise cosine among the three views, `1 - l_con`.
    pub mean_cos: Option<f64>,
    pub l_ce: Option<f64>,
    pub l_trp: Option<f64>,
    pub total: f64,
}

impl EpochStats {
    fn from_steps(stage: u8, epoch: usize, lr: f64, steps: &[StepLog]) -> Self {
        let mean = |f: &dyn Fn(&StepLog) -> Option<f64>| -> Option<f64> {
            let vals: Vec<f64> = steps.iter().filter_map(f).collect();
            (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
        };
        let l_con = mean(&|s| s.l_con);
        EpochStats {
            stage,
            epoch,
            lr,
            l_clip: mean(&|s| s.l_clip),
            l_con,
            mean_cos: l_con.map(|c| 1.0 - c),
            l_ce: mean(&|s| s.l_ce),
            l_trp: mean(&|s| s.l_trp),
            total: mean(&|s| Some(s.total)).unwrap_or(0.0),
        }
    }
}

#[derive(Clone, Debug)]
pub struct StageOutcome {
    pub model: ScingModel,
    pub checkpoint: Checkpoint,
    pub epochs: Vec<EpochStats>,
    pub checkpoint_path: PathBuf,
}

/// Appends serializable rows to a CSV file, writing the header once.
fn append_csv<T: Serialize>(path: &Path, rows: &[T], truncate: bool) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| ScingError::io(dir, e))?;
    }
    let fresh = truncate || !path.exists();
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(!truncate)
        .truncate(truncate)
        .open(path)
        .map_err(|e| ScingError::io(path, e))?;
    let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
    for r in rows {
        w.serialize(r)
            .map_err(|e| ScingError::Data(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| ScingError::io(path, e))
}

/// Runs `f` over `0..n`, on the pool if one is given, returning results in
/// index order.
fn map_items<T, F>(pool: Option<&rayon::ThreadPool>, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    use rayon::prelude::*;
    match pool {
        Some(p) => p.install(|| (0..n).into_par_iter().map(&f).collect()),
        None => (0..n).map(f).collect(),
    }
}

fn build_pool(threads: usize) -> Result<Option<rayon::ThreadPool>> {
    if threads <= 1 {
        return Ok(None);
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map(Some)
        .map_err(|e| ScingError::Config(format!("thread pool: {e}")))
}

fn stack_values(rows: &[&Tensor]) -> Tensor {
    Tensor::vstack(rows).expect("uniform widths")
}

fn check_finite(step: usize, parts: &[(&str, f64)]) -> Result<()> {
    if parts.iter().all(|(_, v)| v.is_finite()) {
        return Ok(());
    }
    let detail = parts
        .iter()
        .map(|(k, v)| format!("{k}={v}"))
        .collect::<Vec<_>>()
        .join(" ");
    Err(ScingError::NonFiniteLoss { step, detail })
}

fn make_checkpoint(
    model: &ScingModel,
    opt: &Adam,
    stage: Stage,
    epoch: usize,
    epochs_total: usize,
    cfg: &Config,
    class_ids: &[usize],
    metrics: BTreeMap<String, f64>,
    targets: Option<&Tensor>,
) -> Checkpoint {
    let mut arrays = model.named_arrays();
    for (name, t) in &opt.m {
        arrays.insert(format!("{OPTIM_M_PREFIX}{name}"), t.clone());
    }
    for (name, t) in &opt.v {
        arrays.insert(format!("{OPTIM_V_PREFIX}{name}"), t.clone());
    }
    if let Some(t) = targets {
        arrays.insert(TARGETS_ARRAY.to_string(), t.clone());
    }
    let shape = model.prompts.shape();
    Checkpoint {
        meta: CheckpointMeta {
            stage,
            epoch,
            epochs_total,
            optimizer_step: opt.step,
            rng_seed: cfg.run.seed,
            fusion: cfg.svip.fusion,
            prompt: Some(PromptMeta {
                classes: shape.classes,
                tokens: shape.tokens,
                fused: shape.fused,
            }),
            class_ids: class_ids.to_vec(),
            metrics: metrics.into_iter().filter(|(_, v)| v.is_finite()).collect(),
            config: cfg.clone(),
        },
        arrays,
    }
}

/// Rebuilds the model stored in a checkpoint.
pub fn model_from_checkpoint(cfg: &Config, ckpt: &Checkpoint) -> Result<ScingModel> {
    let classes = ckpt
        .meta
        .prompt
        .map(|p| p.classes)
        .ok_or_else(|| ScingError::Checkpoint("field prompt.K is missing".into()))?;
    let mut model = ScingModel::new(cfg, classes, cfg.run.seed)?;
    model.load_arrays(&ckpt.model_arrays())?;
    Ok(model)
}

fn optimizer_from_checkpoint(cfg: &Config, ckpt: &Checkpoint) -> Adam {
    let mut opt = Adam::from_config(&cfg.optim);
    opt.step = ckpt.meta.optimizer_step;
    for (name, t) in &ckpt.arrays {
        if let Some(p) = name.strip_prefix(OPTIM_M_PREFIX) {
            opt.m.insert(p.to_string(), t.clone());
        } else if let Some(p) = name.strip_prefix(OPTIM_V_PREFIX) {
            opt.v.insert(p.to_string(), t.clone());
        }
    }
    opt
}

fn check_resume(ckpt: &Checkpoint, stage: Stage, data: &Dataset) -> Result<()> {
    if ckpt.meta.stage != stage {
        return Err(ScingError::Checkpoint(format!(
            "field stage is {}, expected {}",
            ckpt.meta.stage.as_str(),
            stage.as_str()
        )));
    }
    if ckpt.meta.class_ids != data.class_ids() {
        return Err(ScingError::Checkpoint(
            "field class_ids does not match the dataset".into(),
        ));
    }
    Ok(())
}

/// Clean features of every training image under the (frozen) image encoder.
fn clean_features(
    model: &ScingModel,
    data: &Dataset,
    pool: Option<&rayon::ThreadPool>,
) -> Result<BTreeMap<usize, ImageFeatures>> {
    let rows = data.train_rows();
    let feats = map_items(pool, rows.len(), |i| model.image.encode_image(&data.images[rows[i]]));
    rows.into_iter()
        .zip(feats)
        .map(|(r, f)| f.map(|f| (r, f)))
        .collect()
}

struct Stage1Item {
    graph: Graph,
    binder: Binder,
    w: Var,
    w1: Var,
    w2: Var,
}

/// Forward graph of one stage-1 element: the clean-view text embedding and
/// the two perturbed-view embeddings.
#[allow(clippy::too_many_arguments)]
fn stage1_item(
    model: &ScingModel,
    cfg: &Config,
    data: &Dataset,
    clean: &BTreeMap<usize, ImageFeatures>,
    item: &BatchItem,
    epoch: usize,
    step: usize,
    index: usize,
) -> Result<Stage1Item> {
    let fusion = cfg.svip.fusion;
    let class = data.class_index[&item.identity];
    let mut graph = Graph::new();
    let mut binder = Binder::new(Trainable::prefixes(STAGE1_PREFIXES));
    let v = graph.constant(Tensor::row_vector(clean[&item.row].global.clone()));
    let w = model.text_embedding_var(&mut graph, &mut binder, class, fusion, Some(v));
    if fusion == Fusion::Static {
        // prompts ignore the image, so every view gives the same embedding
        return Ok(Stage1Item {
            graph,
            binder,
            w,
            w1: w,
            w2: w,
        });
    }
    let mut views = [w; 2];
    for (k, view) in views.iter_mut().enumerate() {
        let mut rng = stream(
            cfg.run.seed,
            "stage1.view",
            &[epoch as u64, step as u64, index as u64, k as u64],
        );
        let img = perturb_image(&data.images[item.row], &cfg.perturb, &mut rng);
        let global = model.image.encode_image(&img)?.global;
        let global = feature_dropout(&global, cfg.perturb.feature_dropout, &mut rng)?;
        let vk = graph.constant(Tensor::row_vector(global));
        *view = model.text_embedding_var(&mut graph, &mut binder, class, fusion, Some(vk));
    }
    Ok(Stage1Item {
        graph,
        binder,
        w,
        w1: views[0],
        w2: views[1],
    })
}

/// Stage 1: prompts, fusion modules and temperature; encoders frozen.
pub fn run_stage1(cfg: &Config, data: &Dataset, resume: Option<&Checkpoint>) -> Result<StageOutcome> {
    cfg.validate()?;
    let pool = build_pool(cfg.run.threads)?;
    let pool = pool.as_ref();
    let (mut model, mut opt, start) = match resume {
        Some(ck) => {
            check_resume(ck, Stage::Stage1, data)?;
            (model_from_checkpoint(cfg, ck)?, optimizer_from_checkpoint(cfg, ck), ck.meta.epoch)
        }
        None => (
            ScingModel::new(cfg, data.classes(), cfg.run.seed)?,
            Adam::from_config(&cfg.optim),
            0,
        ),
    };
    let out = &cfg.run.out_dir;
    let epochs = cfg.optim.stage1_epochs;
    let milestones = scale_milestones(&cfg.optim.milestones, cfg.optim.reference_epochs, epochs);
    let spec = BatchSpec {
        identities: cfg.optim.ids_per_batch,
        images_per_identity: cfg.optim.images_per_id,
    };
    let steps = data.steps_per_epoch(spec.size());
    let lambda = cfg.losses.lambda;
    let clean = clean_features(&model, data, pool)?;
    let mut history = Vec::new();

    for epoch in start..epochs {
        let lr = lr_at(cfg.optim.stage1_lr, cfg.optim.decay, &milestones, epoch);
        let mut logs = Vec::with_capacity(steps);
        for step in 0..steps {
            let items = sample_batch(
                &data.manifest,
                spec,
                &mut stream(cfg.run.seed, "stage1.batch", &[epoch as u64, step as u64]),
            )?;
            let built = map_items(pool, items.len(), |i| {
                stage1_item(&model, cfg, data, &clean, &items[i], epoch, step, i)
            })
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
            let labels: Vec<usize> = items.iter().map(|it| data.class_index[&it.identity]).collect();

            let mut bg = Graph::new();
            let gmat = Tensor::from_rows(
                &items
                    .iter()
                    .map(|it| clean[&it.row].descriptor.clone())
                    .collect::<Vec<_>>(),
            )?;
            let gv = bg.constant(gmat);
            let wv = bg.leaf(stack_rows_multi(&built, |b| b.w));
            let w1v = bg.leaf(stack_rows_multi(&built, |b| b.w1));
            let w2v = bg.leaf(stack_rows_multi(&built, |b| b.w2));
            let scale_log = bg.leaf(model.logit_scale.value.clone());
            let scale = bg.exp(scale_log);
            let clip = clip_contrastive_var(&mut bg, gv, wv, &labels, scale);
            let con = consistency_var(&mut bg, wv, w1v, w2v);
            let total = if lambda == 0.0 {
                clip
            } else {
                let weighted = bg.scale(con, lambda);
                bg.add(clip, weighted)
            };
            let (l_clip, l_con) = (bg.value(clip).item(), bg.value(con).item());
            let l_total = stage1_loss(l_clip, l_con, lambda);
            let global_step = epoch * steps + step;
            check_finite(global_step, &[("l_clip", l_clip), ("l_con", l_con), ("total", l_total)])?;

            let bgrads = bg.backward(total);
            let dw = bgrads.get(wv).cloned().unwrap_or_else(|| Tensor::zeros(items.len(), model.embed_dim()));
            let dw1 = bgrads.get(w1v).cloned();
            let dw2 = bgrads.get(w2v).cloned();
            let per_item = map_items(pool, built.len(), |i| {
                let b = &built[i];
                let mut seeds = vec![(b.w, dw.slice_rows(i, 1))];
                if let Some(d) = &dw1 {
                    seeds.push((b.w1, d.slice_rows(i, 1)));
                }
                if let Some(d) = &dw2 {
                    seeds.push((b.w2, d.slice_rows(i, 1)));
                }
                b.binder.gradients(&b.graph.backward_with(&seeds))
            });
            let mut grads = ParamGrads::default();
            for g in &per_item {
                grads.merge(g);
            }
            if let Some(ds) = bgrads.get(scale_log) {
                grads.accumulate(LOGIT_SCALE, ds);
            }
            opt.update(model.params_mut(), &grads, lr);

            logs.push(StepLog {
                stage: 1,
                epoch: epoch + 1,
                step: global_step,
                l_clip: Some(l_clip),
                l_con: Some(l_con),
                l_ce: None,
                l_trp: None,
                total: l_total,
            });
        }
        let stats = EpochStats::from_steps(1, epoch + 1, lr, &logs);
        log::info!(
            "stage 1 epoch {}/{}: l_clip {:.4} l_con {:.4} total {:.4}",
            epoch + 1,
            epochs,
            stats.l_clip.unwrap_or(f64::NAN),
            stats.l_con.unwrap_or(f64::NAN),
            stats.total
        );
        let fresh = resume.is_none() && epoch == 0;
        append_csv(&out.join(TRAIN_LOG), &logs, fresh)?;
        append_csv(&out.join(EPOCH_LOG), std::slice::from_ref(&stats), fresh)?;
        history.push(stats);
        if cfg.run.checkpoint_every_epoch && epoch + 1 < epochs {
            let ck = make_checkpoint(
                &model,
                &opt,
                Stage::Stage1,
                epoch + 1,
                epochs,
                cfg,
                &data.class_ids(),
                stage1_metrics(&model, &history),
                None,
            );
            ck.save(&out.join("stage1.latest.ckpt"))?;
        }
    }
    let ck = make_checkpoint(
        &model,
        &opt,
        Stage::Stage1,
        epochs,
        epochs,
        cfg,
        &data.class_ids(),
        stage1_metrics(&model, &history),
        None,
    );
    let path = out.join(STAGE1_CKPT);
    ck.save(&path)?;
    Ok(StageOutcome {
        model,
        checkpoint: ck,
        epochs: history,
        checkpoint_path: path,
    })
}

fn stack_rows_multi(built: &[Stage1Item], pick: impl Fn(&Stage1Item) -> Var) -> Tensor {
    let rows: Vec<&Tensor> = built.iter().map(|b| b.graph.value(pick(b))).collect();
    stack_values(&rows)
}

fn stage1_metrics(model: &ScingModel, history: &[EpochStats]) -> BTreeMap<String, f64> {
    let mut m = BTreeMap::new();
    m.insert("tau".to_string(), model.tau());
    if let (Some(first), Some(last)) = (history.first(), history.last()) {
        for (k, v) in [
            ("l_clip_first", first.l_clip),
            ("l_clip_last", last.l_clip),
            ("l_con_first", first.l_con),
            ("l_con_last", last.l_con),
            ("mean_cos_first", first.mean_cos),
            ("mean_cos_last", last.mean_cos),
        ] {
            if let Some(v) = v {
                m.insert(k.to_string(), v);
            }
        }
    }
    m
}

/// Frozen class text embeddings for stage 2, `K x d`.
pub fn stage2_targets(
    model: &ScingModel,
    cfg: &Config,
    data: &Dataset,
    pool: Option<&rayon::ThreadPool>,
) -> Result<Tensor> {
    match cfg.svip.stage2_targets {
        TargetMode::Raw => model.class_text_embeddings(),
        TargetMode::FusedMean => {
            let clean = clean_features(model, data, pool)?;
            let rows: Vec<usize> = clean.keys().copied().collect();
            let embs = map_items(pool, rows.len(), |i| {
                let r = rows[i];
                model.text_embedding(data.class_of(r), cfg.svip.fusion, Some(&clean[&r].global))
            })
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
            let d = model.embed_dim();
            let mut sums = Tensor::zeros(model.classes(), d);
            for (r, e) in rows.iter().zip(&embs) {
                let k = data.class_of(*r);
                for (s, x) in sums.row_mut(k).iter_mut().zip(e) {
                    *s += x;
                }
            }
            for k in 0..model.classes() {
                let row = sums.row_mut(k);
                let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                if n == 0.0 {
                    return Err(ScingError::Numeric(format!("class {k} has a zero mean embedding")));
                }
                row.iter_mut().for_each(|x| *x /= n);
            }
            Ok(sums)
        }
    }
}

struct Stage2Item {
    graph: Graph,
    binder: Binder,
    g: Var,
}

/// Stage 2: full image-encoder tuning against frozen text embeddings.
pub fn run_stage2(
    cfg: &Config,
    data: &Dataset,
    stage1: &Checkpoint,
    resume: Option<&Checkpoint>,
) -> Result<StageOutcome> {
    cfg.validate()?;
    let pool = build_pool(cfg.run.threads)?;
    let pool = pool.as_ref();
    let (mut model, mut opt, start, targets) = match resume {
        Some(ck) => {
            check_resume(ck, Stage::Stage2, data)?;
            let targets = ck
                .arrays
                .get(TARGETS_ARRAY)
                .cloned()
                .ok_or_else(|| ScingError::Checkpoint(format!("field {TARGETS_ARRAY} is missing")))?;
            (
                model_from_checkpoint(cfg, ck)?,
                optimizer_from_checkpoint(cfg, ck),
                ck.meta.epoch,
                targets,
            )
        }
        None => {
            if stage1.meta.stage != Stage::Stage1 {
                return Err(ScingError::Checkpoint(format!(
                    "field stage is {}, expected stage1",
                    stage1.meta.stage.as_str()
                )));
            }
            check_resume(stage1, Stage::Stage1, data)?;
            let model = model_from_checkpoint(cfg, stage1)?;
            let targets = stage2_targets(&model, cfg, data, pool)?;
            (model, Adam::from_config(&cfg.optim), 0, targets)
        }
    };
    let out = &cfg.run.out_dir;
    let epochs = cfg.optim.stage2_epochs;
    let milestones = scale_milestones(&cfg.optim.milestones, cfg.optim.reference_epochs, epochs);
    let spec = BatchSpec {
        identities: cfg.optim.ids_per_batch,
        images_per_identity: cfg.optim.images_per_id,
    };
    let steps = data.steps_per_epoch(spec.size());
    let scale = cfg.optim.stage2_scale.unwrap_or_else(|| model.scale());
    let aug = cfg.perturb.without_occlusion();
    let mut history = Vec::new();

    for epoch in start..epochs {
        let lr = lr_at(cfg.optim.stage2_lr, cfg.optim.decay, &milestones, epoch);
        let mut logs = Vec::with_capacity(steps);
        for step in 0..steps {
            let items = sample_batch(
                &data.manifest,
                spec,
                &mut stream(cfg.run.seed, "stage2.batch", &[epoch as u64, step as u64]),
            )?;
            let built = map_items(pool, items.len(), |i| -> Result<Stage2Item> {
                let mut rng = stream(
                    cfg.run.seed,
                    "stage2.aug",
                    &[epoch as u64, step as u64, i as u64],
                );
                let img = perturb_image(&data.images[items[i].row], &aug, &mut rng);
                let patches = model.image.prepare(&img)?;
                let mut graph = Graph::new();
                let mut binder = Binder::new(Trainable::prefixes([IMAGE_PREFIX]));
                let p = graph.constant(patches);
                let (_, g) = model.image.forward(&mut graph, &mut binder, p);
                Ok(Stage2Item { graph, binder, g })
            })
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
            let labels: Vec<usize> = items.iter().map(|it| data.class_index[&it.identity]).collect();

            let mut bg = Graph::new();
            let gmat = stack_values(&built.iter().map(|b| b.graph.value(b.g)).collect::<Vec<_>>());
            let gv = bg.leaf(gmat);
            let tv = bg.constant(targets.clone());
            let sv = bg.constant(Tensor::scalar(scale));
            let wy: Vec<&[f64]> = labels.iter().map(|k| targets.row(*k)).collect();
            let wy = Tensor::from_rows(&wy.iter().map(|r| r.to_vec()).collect::<Vec<_>>())?;
            let wyv = bg.constant(wy);
            let ce = ce_var(&mut bg, gv, tv, &labels, sv);
            let trp = triplet_var(&mut bg, gv, wyv, &labels, &cfg.losses);
            let weighted = bg.scale(trp, cfg.losses.gamma);
            let total = bg.add(ce, weighted);
            let (l_ce, l_trp) = (bg.value(ce).item(), bg.value(trp).item());
            let l_total = stage2_loss(l_ce, l_trp, cfg.losses.gamma);
            let global_step = epoch * steps + step;
            check_finite(global_step, &[("l_ce", l_ce), ("l_trp", l_trp), ("total", l_total)])?;

            let bgrads = bg.backward(total);
            let dg = bgrads
                .get(gv)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(items.len(), model.embed_dim()));
            let per_item = map_items(pool, built.len(), |i| {
                let b = &built[i];
                b.binder
                    .gradients(&b.graph.backward_with(&[(b.g, dg.slice_rows(i, 1))]))
            });
            let mut grads = ParamGrads::default();
            for g in &per_item {
                grads.merge(g);
            }
            opt.update(model.params_mut(), &grads, lr);

            logs.push(StepLog {
                stage: 2,
                epoch: epoch + 1,
                step: global_step,
                l_clip: None,
                l_con: None,
                l_ce: Some(l_ce),
                l_trp: Some(l_trp),
                total: l_total,
            });
        }
        let stats = EpochStats::from_steps(2, epoch + 1, lr, &logs);
        log::info!(
            "stage 2 epoch {}/{}: l_ce {:.4} l_trp {:.4} total {:.4}",
            epoch + 1,
            epochs,
            stats.l_ce.unwrap_or(f64::NAN),
            stats.l_trp.unwrap_or(f64::NAN),
            stats.total
        );
        append_csv(&out.join(TRAIN_LOG), &logs, false)?;
        append_csv(&out.join(EPOCH_LOG), std::slice::from_ref(&stats), false)?;
        history.push(stats);
        if cfg.run.checkpoint_every_epoch && epoch + 1 < epochs {
            let ck = make_checkpoint(
                &model,
                &opt,
                Stage::Stage2,
                epoch + 1,
                epochs,
                cfg,
                &data.class_ids(),
                stage2_metrics(&history),
                Some(&targets),
            );
            ck.save(&out.join("stage2.latest.ckpt"))?;
        }
    }
    let ck = make_checkpoint(
        &model,
        &opt,
        Stage::Stage2,
        epochs,
        epochs,
        cfg,
        &data.class_ids(),
        stage2_metrics(&history),
        Some(&targets),
    );
    let path = out.join(STAGE2_CKPT);
    ck.save(&path)?;
    Ok(StageOutcome {
        model,
        checkpoint: ck,
        epochs: history,
        checkpoint_path: path,
    })
}

fn stage2_metrics(history: &[EpochStats]) -> BTreeMap<String, f64> {
    let mut m = BTreeMap::new();
    if let (Some(first), Some(last)) = (history.first(), history.last()) {
        for (k, v) in [
            ("l_ce_first", first.l_ce),
            ("l_ce_last", last.l_ce),
            ("l_trp_first", first.l_trp),
            ("l_trp_last", last.l_trp),
        ] {
            if let Some(v) = v {
                m.insert(k.to_string(), v);
            }
        }
    }
    m
}

/// Both stages back to back.
pub fn run_pipeline(cfg: &Config, data: &Dataset) -> Result<(StageOutcome, StageOutcome)> {
    let s1 = run_stage1(cfg, data, None)?;
    let s2 = run_stage2(cfg, data, &s1.checkpoint, None)?;
    Ok((s1, s2))
}
