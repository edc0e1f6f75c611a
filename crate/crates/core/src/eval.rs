//! Retrieval evaluation: cosine ranking with the same-camera exclusion
//! protocol, CMC Rank-1 and mAP, the image-text modality gap, inference
//! exports, and a 2-D PCA projection for plots.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, Stage};
use crate::config::Fusion;
use crate::data::{Dataset, Split};
use crate::encoders::ImageEncoder;
use crate::error::{Result, ScingError};
use crate::losses::cosine;
use crate::model::{ScingModel, IMAGE_PREFIX};
use crate::nn::Parameters;
use crate::seed::stream;
use crate::tensor::Tensor;

/// `1 - cos(a, b)`, in `[0, 2]`.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    Ok(1.0 - cosine(a, b)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Protocol {
    /// Mask gallery entries sharing identity and camera with the query.
    pub exclude_same_camera: bool,
}

impl Default for Protocol {
    fn default() -> Self {
        Protocol {
            exclude_same_camera: true,
        }
    }
}

/// Identity and camera of one retrieval item.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Label {
    pub identity: usize,
    pub camera: usize,
}

/// Gallery indices in ascending distance with per-position masks.
#[derive(Clone, Debug, PartialEq)]
pub struct Ranking {
    pub order: Vec<usize>,
    pub distances: Vec<f64>,
    pub valid: Vec<bool>,
    pub positive: Vec<bool>,
}

/// Sorts the gallery by cosine distance to `query`, ties by gallery index.
pub fn rank_gallery(
    query: &[f64],
    query_label: Label,
    gallery: &[Vec<f64>],
    gallery_labels: &[Label],
    protocol: Protocol,
) -> Result<Ranking> {
    if gallery.is_empty() {
        return Err(ScingError::Config("gallery is empty".into()));
    }
    if gallery.len() != gallery_labels.len() {
        return Err(ScingError::shape("gallery labels", gallery.len(), gallery_labels.len()));
    }
    let dist = gallery
        .iter()
        .map(|g| cosine_distance(query, g))
        .collect::<Result<Vec<f64>>>()?;
    let mut order: Vec<usize> = (0..gallery.len()).collect();
    order.sort_by(|a, b| dist[*a].total_cmp(&dist[*b]).then(a.cmp(b)));
    let mut valid = Vec::with_capacity(order.len());
    let mut positive = Vec::with_capacity(order.len());
    for &j in &order {
        let l = gallery_labels[j];
        let same_id = l.identity == query_label.identity;
        valid.push(!(protocol.exclude_same_camera && same_id && l.camera == query_label.camera));
        positive.push(same_id);
    }
    Ok(Ranking {
        distances: order.iter().map(|j| dist[*j]).collect(),
        order,
        valid,
        positive,
    })
}

/// Average precision over the valid entries of a ranking, `None` when it
/// has no valid positive.
pub fn average_precision(r: &Ranking) -> Option<f64> {
    let mut rank = 0usize;
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (v, p) in r.valid.iter().zip(&r.positive) {
        if !v {
            continue;
        }
        rank += 1;
        if *p {
            hits += 1;
            sum += hits as f64 / rank as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

/// Whether a valid positive appears among the first `k` valid entries.
pub fn hit_at(r: &Ranking, k: usize) -> bool {
    r.valid
        .iter()
        .zip(&r.positive)
        .filter(|(v, _)| **v)
        .take(k)
        .any(|(_, p)| *p)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CmcMap {
    pub rank1: f64,
    pub map: f64,
    /// AP of each query, `None` for queries without a valid positive.
    pub per_query: Vec<Option<f64>>,
    pub evaluated: usize,
    pub skipped: usize,
}

/// Rank-1 and mAP over the queries that have at least one valid positive.
pub fn cmc_map(rankings: &[Ranking]) -> Result<CmcMap> {
    let per_query: Vec<Option<f64>> = rankings.iter().map(average_precision).collect();
    let evaluated = per_query.iter().filter(|a| a.is_some()).count();
    if evaluated == 0 {
        return Err(ScingError::EmptyReport(format!(
            "none of {} queries has a valid gallery positive",
            rankings.len()
        )));
    }
    let map = per_query.iter().flatten().sum::<f64>() / evaluated as f64;
    let rank1 = rankings
        .iter()
        .zip(&per_query)
        .filter(|(_, ap)| ap.is_some())
        .filter(|(r, _)| hit_at(r, 1))
        .count() as f64
        / evaluated as f64;
    Ok(CmcMap {
        rank1,
        map,
        per_query,
        evaluated,
        skipped: rankings.len() - evaluated,
    })
}

/// CMC at rank `k` over evaluable queries.
pub fn cmc_at(rankings: &[Ranking], k: usize) -> f64 {
    let eval: Vec<&Ranking> = rankings.iter().filter(|r| average_precision(r).is_some()).collect();
    if eval.is_empty() {
        return 0.0;
    }
    eval.iter().filter(|r| hit_at(r, k)).count() as f64 / eval.len() as f64
}

/// Mean cosine distance between each image descriptor and the text
/// embedding of its identity.
pub fn modality_gap(
    descriptors: &[Vec<f64>],
    identities: &[usize],
    text: &BTreeMap<usize, Vec<f64>>,
) -> Result<f64> {
    if descriptors.len() != identities.len() {
        return Err(ScingError::shape("modality_gap labels", descriptors.len(), identities.len()));
    }
    if descriptors.is_empty() {
        return Err(ScingError::Data("modality_gap needs at least one image".into()));
    }
    let mut sum = 0.0;
    for (g, id) in descriptors.iter().zip(identities) {
        let w = text
            .get(id)
            .ok_or_else(|| ScingError::Key(format!("no text embedding for identity {id}")))?;
        sum += cosine_distance(g, w)?;
    }
    Ok(sum / descriptors.len() as f64)
}

/// Modality gap of a full model over the training images. For conditioned
/// fusion each image is paired with the text embedding built from its own
/// feature; static prompts use the class embedding.
pub fn model_modality_gap(model: &ScingModel, fusion: Fusion, data: &Dataset) -> Result<f64> {
    let mut sum = 0.0;
    let rows = data.train_rows();
    let raw = model.class_text_embeddings()?;
    for &r in &rows {
        let f = model.image.encode_image(&data.images[r])?;
        let k = data.class_of(r);
        let w = match fusion {
            Fusion::Static => raw.row(k).to_vec(),
            _ => model.text_embedding(k, fusion, Some(&f.global))?,
        };
        sum += cosine_distance(&f.descriptor, &w)?;
    }
    Ok(sum / rows.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryAp {
    /// Manifest row of the query image.
    pub row: usize,
    pub ap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rank1: f64,
    pub map: f64,
    pub modality_gap: Option<f64>,
    pub per_query_ap: Vec<QueryAp>,
    pub queries: usize,
    pub gallery: usize,
    pub skipped_queries: usize,
    pub protocol: Protocol,
    pub stage: Stage,
    pub seed: u64,
    /// SHA-256 of the evaluated checkpoint bytes.
    pub checkpoint: String,
    /// Only present when requested.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub rank5: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub rank10: Option<f64>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| ScingError::io(path, e))
    }

    pub fn save_per_query_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)
            .map_err(|e| ScingError::Data(format!("{}: {e}", path.display())))?;
        for q in &self.per_query_ap {
            w.serialize(q)
                .map_err(|e| ScingError::Data(format!("{}: {e}", path.display())))?;
        }
        w.flush().map_err(|e| ScingError::io(path, e))
    }
}

/// Rebuilds only the image encoder from any checkpoint.
pub fn image_encoder_from_checkpoint(ckpt: &Checkpoint) -> Result<ImageEncoder> {
    let cfg = ckpt.meta.config.model.image.clone();
    let mut enc = ImageEncoder::new(cfg, &mut stream(0, "eval.placeholder", &[]))?;
    let arrays = ckpt.arrays_with_prefix(IMAGE_PREFIX);
    let mut seen = 0;
    for p in enc.params_mut() {
        let t = arrays
            .get(&p.name)
            .ok_or_else(|| ScingError::Checkpoint(format!("missing array {}", p.name)))?;
        if t.shape() != p.value.shape() {
            return Err(ScingError::Checkpoint(format!("array {} has the wrong shape", p.name)));
        }
        p.value = t.clone();
        seen += 1;
    }
    if seen != arrays.len() {
        return Err(ScingError::Checkpoint("unexpected image arrays".into()));
    }
    Ok(enc)
}

/// Image-encoder-only slice of a checkpoint.
pub fn export_inference(ckpt: &Checkpoint) -> Checkpoint {
    let mut meta = ckpt.meta.clone();
    meta.stage = Stage::Inference;
    meta.prompt = None;
    meta.optimizer_step = 0;
    meta.class_ids.clear();
    Checkpoint {
        meta,
        arrays: ckpt.arrays_with_prefix(IMAGE_PREFIX),
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EvalOptions {
    pub protocol: Protocol,
    /// Also report Rank-5 and Rank-10.
    pub extended_cmc: bool,
    /// Skip the modality gap even when text parameters are present.
    pub skip_gap: bool,
}

/// Descriptors of the manifest rows in `split`, in manifest order.
pub fn embed_split(enc: &ImageEncoder, data: &Dataset, split: Split) -> Result<(Vec<usize>, Vec<Vec<f64>>)> {
    let rows: Vec<usize> = data.manifest.rows_in(split).map(|(i, _)| i).collect();
    let descs = rows
        .iter()
        .map(|r| enc.encode_image(&data.images[*r]).map(|f| f.descriptor))
        .collect::<Result<Vec<_>>>()?;
    Ok((rows, descs))
}

/// Retrieval metrics of a checkpoint on the query/gallery splits. Only the
/// image encoder is used for ranking; the modality gap needs the full model
/// and is `None` for inference exports.
pub fn evaluate(ckpt: &Checkpoint, data: &Dataset, opts: EvalOptions) -> Result<EvalReport> {
    let enc = image_encoder_from_checkpoint(ckpt)?;
    let (q_rows, q_desc) = embed_split(&enc, data, Split::Query)?;
    let (g_rows, g_desc) = embed_split(&enc, data, Split::Gallery)?;
    if q_rows.is_empty() || g_rows.is_empty() {
        return Err(ScingError::Data("dataset has no query or gallery images".into()));
    }
    let label = |r: usize| {
        let row = &data.manifest.rows[r];
        Label {
            identity: row.identity,
            camera: row.camera,
        }
    };
    let g_labels: Vec<Label> = g_rows.iter().map(|r| label(*r)).collect();
    let rankings = q_rows
        .iter()
        .zip(&q_desc)
        .map(|(r, q)| rank_gallery(q, label(*r), &g_desc, &g_labels, opts.protocol))
        .collect::<Result<Vec<_>>>()?;
    let metrics = cmc_map(&rankings)?;

    let gap = match ckpt.meta.stage {
        Stage::Inference => None,
        _ if opts.skip_gap => None,
        _ => {
            let mut cfg = ckpt.meta.config.clone();
            cfg.run.seed = ckpt.meta.rng_seed;
            let model = crate::trainer::model_from_checkpoint(&cfg, ckpt)?;
            Some(model_modality_gap(&model, ckpt.meta.fusion, data)?)
        }
    };

    Ok(EvalReport {
        rank1: metrics.rank1,
        map: metrics.map,
        modality_gap: gap,
        per_query_ap: q_rows
            .iter()
            .zip(&metrics.per_query)
            .filter_map(|(r, ap)| ap.map(|ap| QueryAp { row: *r, ap }))
            .collect(),
        queries: q_rows.len(),
        gallery: g_rows.len(),
        skipped_queries: metrics.skipped,
        protocol: opts.protocol,
        stage: ckpt.meta.stage,
        seed: ckpt.meta.rng_seed,
        checkpoint: ckpt.digest(),
        rank5: opts.extended_cmc.then(|| cmc_at(&rankings, 5)),
        rank10: opts.extended_cmc.then(|| cmc_at(&rankings, 10)),
    })
}

/// Projects points onto their top two principal components.
pub fn pca_2d(points: &[Vec<f64>]) -> Result<Vec<[f64; 2]>> {
    let n = points.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let d = points[0].len();
    let mut mean = vec![0.0; d];
    for p in points {
        if p.len() != d {
            return Err(ScingError::shape("pca_2d", d, p.len()));
        }
        for (m, x) in mean.iter_mut().zip(p) {
            *m += x / n as f64;
        }
    }
    let centered = DMatrix::from_fn(n, d, |i, j| points[i][j] - mean[j]);
    let cov = centered.transpose() * &centered / (n.max(2) - 1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut idx: Vec<usize> = (0..d).collect();
    idx.sort_by(|a, b| eig.eigenvalues[*b].total_cmp(&eig.eigenvalues[*a]));
    let axes: Vec<Vec<f64>> = idx
        .iter()
        .take(2)
        .map(|&k| {
            let col: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
            // fix the sign so the largest-magnitude entry is positive
            let pivot = col.iter().copied().fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a });
            col.iter().map(|x| if pivot < 0.0 { -x } else { *x }).collect()
        })
        .collect();
    Ok((0..n)
        .map(|i| {
            let mut out = [0.0; 2];
            for (o, axis) in out.iter_mut().zip(&axes) {
                *o = centered.row(i).iter().zip(axis).map(|(a, b)| a * b).sum();
            }
            out
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectedPoint {
    pub kind: String,
    pub identity: usize,
    pub x: f64,
    pub y: f64,
}

/// PCA of training-image descriptors together with their class text
/// embeddings, written as `kind,identity,x,y`.
pub fn write_embedding_projection(model: &ScingModel, data: &Dataset, path: &Path) -> Result<()> {
    let rows = data.train_rows();
    let text = model.class_text_embeddings()?;
    let class_ids = data.class_ids();
    let mut points = Vec::new();
    let mut meta = Vec::new();
    for &r in &rows {
        points.push(model.image.encode_image(&data.images[r])?.descriptor);
        meta.push(("image", data.manifest.rows[r].identity));
    }
    for (k, id) in class_ids.iter().enumerate() {
        points.push(text.row(k).to_vec());
        meta.push(("text", *id));
    }
    let proj = pca_2d(&points)?;
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| ScingError::Data(format!("{}: {e}", path.display())))?;
    for ((kind, id), [x, y]) in meta.into_iter().zip(proj) {
        w.serialize(ProjectedPoint {
            kind: kind.to_string(),
            identity: id,
            x,
            y,
        })
        .map_err(|e| ScingError::Data(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| ScingError::io(path, e))
}

/// `N x d` matrix from descriptor rows.
pub fn stack(descs: &[Vec<f64>]) -> Result<Tensor> {
    Tensor::from_rows(descs)
}
