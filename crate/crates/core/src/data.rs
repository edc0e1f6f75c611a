//! Synthetic person-retrieval benchmark: procedural figures rendered per
//! camera, a CSV manifest with train/query/gallery splits, and the
//! identity-balanced batch sampler.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, ScingError};
use crate::imaging::Image;
use crate::perturb::occlude;
use crate::seed::stream;

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const SIDECAR_FILE: &str = "gen.json";
pub const IMAGE_DIR: &str = "images";

/// Minimum per-channel separation between any two identities.
pub const MIN_COLOR_SEPARATION: f32 = 0.15;
const OCCLUDER_AREA: [f64; 2] = [0.2, 0.4];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Query,
    Gallery,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Query => "query",
            Split::Gallery => "gallery",
        }
    }
}

/// Appearance of one synthetic person.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentitySpec {
    pub id: usize,
    pub head: [f32; 3],
    pub torso: [f32; 3],
    pub legs: [f32; 3],
    pub accent: [f32; 3],
    /// 0 solid, 1 stripes, 2 split, 3 chest block.
    pub pattern: u8,
    /// Body width as a fraction of image width.
    pub body_width: f32,
    /// Fraction of body height taken by the torso.
    pub torso_ratio: f32,
}

impl IdentitySpec {
    fn colors(&self) -> [f32; 12] {
        let mut out = [0.0; 12];
        for (i, c) in [self.head, self.torso, self.legs, self.accent].iter().enumerate() {
            out[i * 3..i * 3 + 3].copy_from_slice(c);
        }
        out
    }

    /// Largest per-channel color difference to `other`.
    pub fn separation(&self, other: &IdentitySpec) -> f32 {
        self.colors()
            .iter()
            .zip(other.colors())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    fn sample<R: Rng + ?Sized>(id: usize, rng: &mut R) -> Self {
        let mut color = || [rng.random::<f32>(), rng.random::<f32>(), rng.random::<f32>()];
        let (head, torso, legs, accent) = (color(), color(), color(), color());
        // skin-like head tones are shared by many identities
        let head = [0.55 + 0.4 * head[0], 0.4 + 0.3 * head[1], 0.3 + 0.3 * head[2]];
        IdentitySpec {
            id,
            head,
            torso,
            legs,
            accent,
            pattern: rng.random_range(0..4),
            body_width: rng.random_range(0.38..0.55),
            torso_ratio: rng.random_range(0.4..0.55),
        }
    }
}

/// Per-camera rendering conditions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraSpec {
    pub background: [f32; 3],
    pub tint: [f32; 3],
    pub brightness: f32,
    /// Horizontal squeeze of the figure, 1 for a frontal view.
    pub view_scale: f32,
}

impl CameraSpec {
    fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        CameraSpec {
            background: [
                rng.random_range(0.2..0.8),
                rng.random_range(0.2..0.8),
                rng.random_range(0.2..0.8),
            ],
            tint: [
                rng.random_range(0.85..1.15),
                rng.random_range(0.85..1.15),
                rng.random_range(0.85..1.15),
            ],
            brightness: rng.random_range(0.8..1.2),
            view_scale: rng.random_range(0.7..1.0),
        }
    }
}

/// Parameters of [`generate_dataset`], echoed into the JSON sidecar.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationParams {
    pub train_identities: usize,
    pub eval_identities: usize,
    pub cameras: usize,
    pub images_per_id_per_cam: usize,
    pub queries_per_id_per_cam: usize,
    pub occluded_fraction: f64,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
}

impl GenerationParams {
    pub fn from_config(cfg: &crate::config::Config) -> Self {
        GenerationParams {
            train_identities: cfg.data.train_identities,
            eval_identities: cfg.data.eval_identities,
            cameras: cfg.data.cameras,
            images_per_id_per_cam: cfg.data.images_per_id_per_cam,
            queries_per_id_per_cam: cfg.data.queries_per_id_per_cam,
            occluded_fraction: cfg.data.occluded_fraction,
            height: cfg.model.image.height,
            width: cfg.model.image.width,
            seed: cfg.data.seed,
        }
    }

    pub fn total_identities(&self) -> usize {
        self.train_identities + self.eval_identities
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_identities() < 2 {
            return Err(ScingError::Config("dataset needs at least 2 identities".into()));
        }
        if self.cameras == 0 || self.images_per_id_per_cam == 0 {
            return Err(ScingError::Config("cameras and images per camera must be positive".into()));
        }
        if self.eval_identities > 0 && self.queries_per_id_per_cam >= self.images_per_id_per_cam {
            return Err(ScingError::Config("queries must leave gallery images".into()));
        }
        if !(0.0..=1.0).contains(&self.occluded_fraction) {
            return Err(ScingError::Config("occluded_fraction must be in [0, 1]".into()));
        }
        if self.height < 16 || self.width < 8 {
            return Err(ScingError::Config("images must be at least 16x8".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub path: String,
    pub identity: usize,
    pub camera: usize,
    pub occluded: bool,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub params: GenerationParams,
    pub identities: Vec<IdentitySpec>,
    pub cameras: Vec<CameraSpec>,
}

/// A generated dataset on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub rows: Vec<ManifestRow>,
    pub params: GenerationParams,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ManifestSummary {
    pub rows: usize,
    pub train: usize,
    pub query: usize,
    pub gallery: usize,
    pub occluded: usize,
    pub train_identities: usize,
    pub eval_identities: usize,
}

impl std::fmt::Display for ManifestSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} images ({} train / {} query / {} gallery), {} occluded, {} train ids, {} eval ids",
            self.rows,
            self.train,
            self.query,
            self.gallery,
            self.occluded,
            self.train_identities,
            self.eval_identities
        )
    }
}

impl DatasetManifest {
    pub fn load(root: &Path) -> Result<Self> {
        let manifest_path = root.join(MANIFEST_FILE);
        let file = fs::File::open(&manifest_path).map_err(|e| ScingError::io(&manifest_path, e))?;
        let mut reader = csv::Reader::from_reader(file);
        let rows = reader
            .deserialize()
            .collect::<std::result::Result<Vec<ManifestRow>, _>>()
            .map_err(|e| ScingError::Data(format!("{}: {e}", manifest_path.display())))?;
        let sidecar_path = root.join(SIDECAR_FILE);
        let text = fs::read_to_string(&sidecar_path).map_err(|e| ScingError::io(&sidecar_path, e))?;
        let sidecar: Sidecar = serde_json::from_str(&text)
            .map_err(|e| ScingError::Data(format!("{}: {e}", sidecar_path.display())))?;
        Ok(DatasetManifest {
            root: root.to_path_buf(),
            rows,
            params: sidecar.params,
        })
    }

    pub fn rows_in(&self, split: Split) -> impl Iterator<Item = (usize, &ManifestRow)> {
        self.rows.iter().enumerate().filter(move |(_, r)| r.split == split)
    }

    /// Sorted identity ids of the training split.
    pub fn train_identities(&self) -> Vec<usize> {
        let ids: BTreeSet<usize> = self.rows_in(Split::Train).map(|(_, r)| r.identity).collect();
        ids.into_iter().collect()
    }

    /// Maps training identity ids to dense class indices `0..K`.
    pub fn class_index(&self) -> BTreeMap<usize, usize> {
        self.train_identities()
            .into_iter()
            .enumerate()
            .map(|(k, id)| (id, k))
            .collect()
    }

    pub fn summary(&self) -> ManifestSummary {
        let count = |s: Split| self.rows.iter().filter(|r| r.split == s).count();
        let eval: BTreeSet<usize> = self
            .rows
            .iter()
            .filter(|r| r.split != Split::Train)
            .map(|r| r.identity)
            .collect();
        ManifestSummary {
            rows: self.rows.len(),
            train: count(Split::Train),
            query: count(Split::Query),
            gallery: count(Split::Gallery),
            occluded: self.rows.iter().filter(|r| r.occluded).count(),
            train_identities: self.train_identities().len(),
            eval_identities: eval.len(),
        }
    }

    /// Checks split integrity and that every image exists.
    pub fn validate(&self) -> Result<()> {
        let ids = |s: Split| -> BTreeSet<usize> { self.rows_in(s).map(|(_, r)| r.identity).collect() };
        let (train, query, gallery) = (ids(Split::Train), ids(Split::Query), ids(Split::Gallery));
        if !query.is_subset(&gallery) {
            return Err(ScingError::Data("query identities missing from the gallery".into()));
        }
        if !train.is_disjoint(&gallery) {
            return Err(ScingError::Data("train and evaluation identities overlap".into()));
        }
        for r in &self.rows {
            let p = self.root.join(&r.path);
            if !p.is_file() {
                return Err(ScingError::Data(format!("missing image {}", p.display())));
            }
        }
        Ok(())
    }

    pub fn load_image(&self, row: usize) -> Result<Image> {
        Image::load_png(&self.root.join(&self.rows[row].path))
    }

    /// Decodes every image in manifest order.
    pub fn load_all_images(&self) -> Result<Vec<Image>> {
        (0..self.rows.len()).map(|i| self.load_image(i)).collect()
    }
}

/// A loaded dataset with decoded images and the class index of the
/// training identities.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub images: Vec<Image>,
    pub class_index: BTreeMap<usize, usize>,
}

impl Dataset {
    pub fn load(root: &Path) -> Result<Self> {
        Self::from_manifest(DatasetManifest::load(root)?)
    }

    pub fn from_manifest(manifest: DatasetManifest) -> Result<Self> {
        let images = manifest.load_all_images()?;
        let class_index = manifest.class_index();
        if class_index.is_empty() {
            return Err(ScingError::Data("dataset has no training images".into()));
        }
        Ok(Dataset {
            manifest,
            images,
            class_index,
        })
    }

    pub fn classes(&self) -> usize {
        self.class_index.len()
    }

    /// Identity id of every class index.
    pub fn class_ids(&self) -> Vec<usize> {
        self.class_index.keys().copied().collect()
    }

    pub fn train_rows(&self) -> Vec<usize> {
        self.manifest.rows_in(Split::Train).map(|(i, _)| i).collect()
    }

    pub fn class_of(&self, row: usize) -> usize {
        self.class_index[&self.manifest.rows[row].identity]
    }

    /// `floor(n_train / batch)`, at least 1.
    pub fn steps_per_epoch(&self, batch: usize) -> usize {
        (self.train_rows().len() / batch).max(1)
    }
}

fn sample_identities(params: &GenerationParams) -> Vec<IdentitySpec> {
    let mut specs: Vec<IdentitySpec> = Vec::with_capacity(params.total_identities());
    for id in 0..params.total_identities() {
        let mut attempt = 0u64;
        loop {
            let mut rng = stream(params.seed, "identity", &[id as u64, attempt]);
            let spec = IdentitySpec::sample(id, &mut rng);
            if specs.iter().all(|s| s.separation(&spec) >= MIN_COLOR_SEPARATION) {
                specs.push(spec);
                break;
            }
            attempt += 1;
        }
    }
    specs
}

fn shade(c: [f32; 3], cam: &CameraSpec, light: f32) -> [f32; 3] {
    let mut out = [0.0; 3];
    for i in 0..3 {
        out[i] = (c[i] * cam.tint[i] * cam.brightness * light).clamp(0.0, 1.0);
    }
    out
}

/// Renders one image of `person` seen by `cam`.
pub fn render_person<R: Rng + ?Sized>(
    person: &IdentitySpec,
    cam: &CameraSpec,
    height: usize,
    width: usize,
    rng: &mut R,
) -> Image {
    let (hf, wf) = (height as f32, width as f32);
    let noise = Normal::new(0.0f32, 0.02).expect("valid std");
    let mut img = Image::filled(height, width, [0.0; 3]);
    let grad = rng.random_range(-0.15f32..0.15);
    for y in 0..height {
        let t = y as f32 / hf - 0.5;
        for x in 0..width {
            let mut p = cam.background;
            for c in &mut p {
                *c = (*c + grad * t + noise.sample(rng)).clamp(0.0, 1.0);
            }
            img.set_pixel(y, x, p);
        }
    }

    let light = rng.random_range(0.85f32..1.15);
    let scale = rng.random_range(0.88f32..1.0);
    let body_h = hf * 0.92 * scale;
    let top = (hf - body_h) * rng.random_range(0.2f32..0.8);
    let cx = wf / 2.0 + rng.random_range(-0.12f32..0.12) * wf;
    let half_w = person.body_width * wf * cam.view_scale * scale / 2.0;

    let head_h = body_h * 0.16;
    let torso_h = body_h * person.torso_ratio;
    let legs_h = body_h - head_h - torso_h;
    let torso_top = top + head_h;
    let legs_top = torso_top + torso_h;

    // head ellipse
    let (hcy, hcx) = (top + head_h / 2.0, cx);
    let (ry, rx) = (head_h / 2.0, half_w * 0.55);
    let head = shade(person.head, cam, light);
    for y in 0..height {
        for x in 0..width {
            let dy = (y as f32 + 0.5 - hcy) / ry;
            let dx = (x as f32 + 0.5 - hcx) / rx;
            if dy * dy + dx * dx <= 1.0 {
                img.set_pixel(y, x, head);
            }
        }
    }

    let torso = shade(person.torso, cam, light);
    let accent = shade(person.accent, cam, light);
    let x0 = (cx - half_w).max(0.0);
    let x1 = (cx + half_w).min(wf);
    for y in torso_top.max(0.0) as usize..(legs_top.min(hf) as usize) {
        let ty = (y as f32 - torso_top) / torso_h;
        for x in x0 as usize..x1 as usize {
            let tx = (x as f32 + 0.5 - x0) / (x1 - x0);
            let use_accent = match person.pattern {
                1 => ((ty * 5.0) as usize) % 2 == 1,
                2 => tx > 0.5,
                3 => (0.3..0.7).contains(&tx) && (0.2..0.6).contains(&ty),
                _ => false,
            };
            img.set_pixel(y, x, if use_accent { accent } else { torso });
        }
    }

    let legs = shade(person.legs, cam, light);
    let gap = (half_w * 0.2).max(0.5);
    for y in legs_top.max(0.0) as usize..((legs_top + legs_h).min(hf) as usize) {
        for x in x0 as usize..x1 as usize {
            let xc = x as f32 + 0.5;
            if (xc - cx).abs() >= gap / 2.0 {
                img.set_pixel(y, x, legs);
            }
        }
    }
    img
}

/// Renders and writes a dataset under `out`: `images/`, `manifest.csv`
/// and `gen.json`. Identities `0..train` form the training split; the rest
/// are split per camera into query and gallery images.
pub fn generate_dataset(params: &GenerationParams, out: &Path) -> Result<DatasetManifest> {
    params.validate()?;
    let identities = sample_identities(params);
    let cameras: Vec<CameraSpec> = (0..params.cameras)
        .map(|c| CameraSpec::sample(&mut stream(params.seed, "camera", &[c as u64])))
        .collect();

    let mut rows = Vec::new();
    for person in &identities {
        let train = person.id < params.train_identities;
        for cam in 0..params.cameras {
            for n in 0..params.images_per_id_per_cam {
                let split = if train {
                    Split::Train
                } else if n < params.queries_per_id_per_cam {
                    Split::Query
                } else {
                    Split::Gallery
                };
                rows.push(ManifestRow {
                    path: format!(
                        "{IMAGE_DIR}/{}/{:04}_c{}_{:02}.png",
                        split.as_str(),
                        person.id,
                        cam,
                        n
                    ),
                    identity: person.id,
                    camera: cam,
                    occluded: false,
                    split,
                });
            }
        }
    }

    // an exact share of the query images carries an occluder
    let query_rows: Vec<usize> = (0..rows.len()).filter(|i| rows[*i].split == Split::Query).collect();
    let n_occluded = (params.occluded_fraction * query_rows.len() as f64).round() as usize;
    let mut order = query_rows.clone();
    order.shuffle(&mut stream(params.seed, "occlusion", &[]));
    for i in order.into_iter().take(n_occluded) {
        rows[i].occluded = true;
    }

    for split in [Split::Train, Split::Query, Split::Gallery] {
        let dir = out.join(IMAGE_DIR).join(split.as_str());
        fs::create_dir_all(&dir).map_err(|e| ScingError::io(&dir, e))?;
    }
    for (i, row) in rows.iter().enumerate() {
        let mut rng = stream(params.seed, "render", &[i as u64]);
        let mut img = render_person(
            &identities[row.identity],
            &cameras[row.camera],
            params.height,
            params.width,
            &mut rng,
        );
        if row.occluded {
            let area = rng.random_range(OCCLUDER_AREA[0]..OCCLUDER_AREA[1]);
            occlude(&mut img, area, &mut rng);
        }
        img.save_png(&out.join(&row.path))?;
    }

    let manifest_path = out.join(MANIFEST_FILE);
    let mut writer = csv::Writer::from_path(&manifest_path)
        .map_err(|e| ScingError::Data(format!("{}: {e}", manifest_path.display())))?;
    for row in &rows {
        writer
            .serialize(row)
            .map_err(|e| ScingError::Data(format!("{}: {e}", manifest_path.display())))?;
    }
    writer.flush().map_err(|e| ScingError::io(&manifest_path, e))?;

    let sidecar = Sidecar {
        params: params.clone(),
        identities,
        cameras,
    };
    let sidecar_path = out.join(SIDECAR_FILE);
    let json = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
    fs::write(&sidecar_path, json).map_err(|e| ScingError::io(&sidecar_path, e))?;

    Ok(DatasetManifest {
        root: out.to_path_buf(),
        rows,
        params: params.clone(),
    })
}

/// `P` identities with `K` images each.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchSpec {
    pub identities: usize,
    pub images_per_identity: usize,
}

impl BatchSpec {
    pub fn size(&self) -> usize {
        self.identities * self.images_per_identity
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchItem {
    /// Index into the manifest rows.
    pub row: usize,
    pub identity: usize,
    pub camera: usize,
}

/// Draws `P` distinct training identities, then `K` images of each,
/// sampling with replacement only when an identity has fewer than `K`.
pub fn sample_batch<R: Rng + ?Sized>(
    manifest: &DatasetManifest,
    spec: BatchSpec,
    rng: &mut R,
) -> Result<Vec<BatchItem>> {
    let mut by_id: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, r) in manifest.rows_in(Split::Train) {
        by_id.entry(r.identity).or_default().push(i);
    }
    if by_id.len() < spec.identities {
        return Err(ScingError::Config(format!(
            "batch needs {} identities but the training split has {}",
            spec.identities,
            by_id.len()
        )));
    }
    let ids: Vec<usize> = by_id.keys().copied().collect();
    let chosen: Vec<usize> = ids.choose_multiple(rng, spec.identities).copied().collect();
    let mut items = Vec::with_capacity(spec.size());
    for id in chosen {
        let pool = &by_id[&id];
        let picks: Vec<usize> = if pool.len() >= spec.images_per_identity {
            pool.choose_multiple(rng, spec.images_per_identity).copied().collect()
        } else {
            (0..spec.images_per_identity)
                .map(|_| *pool.choose(rng).expect("nonempty pool"))
                .collect()
        };
        for row in picks {
            items.push(BatchItem {
                row,
                identity: id,
                camera: manifest.rows[row].camera,
            });
        }
    }
    Ok(items)
}
