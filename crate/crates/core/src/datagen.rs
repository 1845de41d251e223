//! Episode generation: CRP partitions, 2D mixtures of Gaussians, and
//! instance-discrimination episodes over precomputed embeddings.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::partitions::num_clusters;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrpConfig {
    pub alpha: f64,
    pub n_min: usize,
    pub n_max: usize,
    pub fixed_k: Option<usize>,
    pub max_rejections: usize,
}

impl Default for CrpConfig {
    fn default() -> Self {
        Self { alpha: 1.0, n_min: 100, n_max: 1000, fixed_k: None, max_rejections: 10_000 }
    }
}

impl CrpConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("CRP concentration must be > 0, got {}", self.alpha)));
        }
        if self.n_min < 1 || self.n_min > self.n_max {
            return Err(Error::Config(format!("need 1 <= n_min <= n_max, got ({}, {})", self.n_min, self.n_max)));
        }
        if let Some(k) = self.fixed_k {
            if k < 1 || k > self.n_min {
                return Err(Error::Config(format!("fixed K = {k} outside 1..={}", self.n_min)));
            }
        }
        Ok(())
    }

    pub fn sample_size<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        rng.gen_range(self.n_min..=self.n_max)
    }
}

/// Sequential CRP draw of `n` canonical labels. With `fixed_k` set, draws
/// are rejected until exactly that many clusters appear.
pub fn crp_sample<R: Rng + ?Sized>(cfg: &CrpConfig, n: usize, rng: &mut R) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(Error::Config("CRP needs at least one customer".into()));
    }
    if !(cfg.alpha > 0.0) {
        return Err(Error::Config(format!("CRP concentration must be > 0, got {}", cfg.alpha)));
    }
    let attempts = if cfg.fixed_k.is_some() { cfg.max_rejections.max(1) } else { 1 };
    for _ in 0..attempts {
        let labels = crp_once(cfg.alpha, n, rng);
        match cfg.fixed_k {
            Some(k) if num_clusters(&labels) != k => continue,
            _ => return Ok(labels),
        }
    }
    Err(Error::RejectionBudget { target: cfg.fixed_k.unwrap_or(0), budget: attempts })
}

fn crp_once<R: Rng + ?Sized>(alpha: f64, n: usize, rng: &mut R) -> Vec<usize> {
    let mut labels = Vec::with_capacity(n);
    let mut counts: Vec<usize> = Vec::new();
    for i in 0..n {
        // Customer i + 1 sees i seated customers.
        let u = rng.gen::<f64>() * (i as f64 + alpha);
        let mut acc = 0.0;
        let mut pick = counts.len();
        for (k, &c) in counts.iter().enumerate() {
            acc += c as f64;
            if u < acc {
                pick = k;
                break;
            }
        }
        if pick == counts.len() {
            counts.push(0);
        }
        counts[pick] += 1;
        labels.push(pick);
    }
    labels
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Mog,
    EmbeddingDiscrimination,
    EmbeddingOriginal,
}

/// A point set with canonical ground-truth labels (in point order).
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub points: Tensor,
    pub labels: Vec<usize>,
    pub provenance: Provenance,
    pub seed: Option<u64>,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_clusters(&self) -> usize {
        num_clusters(&self.labels)
    }
}

/// 2D mixture of Gaussians: centroids `mu_k ~ N(0, sigma^2 I)`, points
/// `x_i ~ N(mu_{c_i}, I)`. The set size is uniform in `[n_min, n_max]`.
pub fn mog_episode<R: Rng + ?Sized>(cfg: &CrpConfig, sigma: f64, rng: &mut R) -> Result<Episode> {
    cfg.validate()?;
    let n = cfg.sample_size(rng);
    mog_episode_sized(cfg, n, sigma, rng)
}

pub fn mog_episode_sized<R: Rng + ?Sized>(cfg: &CrpConfig, n: usize, sigma: f64, rng: &mut R) -> Result<Episode> {
    if !(sigma > 0.0) {
        return Err(Error::Config(format!("centroid scale must be > 0, got {sigma}")));
    }
    let labels = crp_sample(cfg, n, rng)?;
    let k = num_clusters(&labels);
    let centroid = Normal::new(0.0, sigma).map_err(|e| Error::Config(e.to_string()))?;
    let centroids: Vec<[f64; 2]> = (0..k).map(|_| [centroid.sample(rng), centroid.sample(rng)]).collect();
    let mut data = Vec::with_capacity(2 * n);
    for &c in &labels {
        for mu in centroids[c] {
            let z: f64 = StandardNormal.sample(rng);
            data.push(mu + z);
        }
    }
    Ok(Episode { points: Tensor::matrix(n, 2, data)?, labels, provenance: Provenance::Mog, seed: None })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingItem {
    pub id: String,
    pub vector: Vec<f64>,
    pub class: Option<String>,
}

/// Precomputed embedding vectors of one common dimension.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EmbeddingStore {
    items: Vec<EmbeddingItem>,
    dim: usize,
}

impl EmbeddingStore {
    pub fn new(items: Vec<EmbeddingItem>) -> Result<Self> {
        let dim = items.first().map_or(0, |i| i.vector.len());
        let mut ids = std::collections::HashSet::new();
        for item in &items {
            if item.vector.len() != dim {
                return Err(Error::Store(format!("item `{}` has dimension {}, expected {dim}", item.id, item.vector.len())));
            }
            if !ids.insert(item.id.as_str()) {
                return Err(Error::Store(format!("duplicate id `{}`", item.id)));
            }
        }
        Ok(Self { items, dim })
    }

    pub fn items(&self) -> &[EmbeddingItem] {
        &self.items
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Distinct class tags in first-appearance order, with member indices.
    pub fn classes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out: Vec<(String, Vec<usize>)> = Vec::new();
        for (i, item) in self.items.iter().enumerate() {
            if let Some(tag) = &item.class {
                match out.iter_mut().find(|(t, _)| t == tag) {
                    Some((_, m)) => m.push(i),
                    None => out.push((tag.clone(), vec![i])),
                }
            }
        }
        out
    }
}

/// Training episode without class tags: each cluster is one anchor item
/// followed by `n_k - 1` copies perturbed with isotropic noise `aug_std`.
pub fn discrimination_episode<R: Rng + ?Sized>(
    store: &EmbeddingStore,
    cfg: &CrpConfig,
    aug_std: f64,
    rng: &mut R,
) -> Result<Episode> {
    cfg.validate()?;
    if !(aug_std >= 0.0) {
        return Err(Error::Config(format!("augmentation scale must be >= 0, got {aug_std}")));
    }
    if store.is_empty() {
        return Err(Error::Store("empty embedding store".into()));
    }
    let n = cfg.sample_size(rng);
    let labels = crp_sample(cfg, n, rng)?;
    let k = num_clusters(&labels);
    if store.len() < k {
        return Err(Error::Store(format!("{} items cannot anchor {k} clusters", store.len())));
    }
    let anchors = sample_indices(rng, store.len(), k).into_vec();
    let mut seen = vec![false; k];
    let mut data = Vec::with_capacity(n * store.dim());
    for &c in &labels {
        let anchor = &store.items[anchors[c]].vector;
        if std::mem::replace(&mut seen[c], true) && aug_std > 0.0 {
            for v in anchor {
                let z: f64 = StandardNormal.sample(rng);
                data.push(v + aug_std * z);
            }
        } else {
            data.extend_from_slice(anchor);
        }
    }
    Ok(Episode {
        points: Tensor::matrix(n, store.dim(), data)?,
        labels,
        provenance: Provenance::EmbeddingDiscrimination,
        seed: None,
    })
}

/// Evaluation episode from class-tagged items: `K` distinct classes, each
/// cluster filled with distinct original items of its class.
pub fn class_episode<R: Rng + ?Sized>(store: &EmbeddingStore, cfg: &CrpConfig, n: usize, rng: &mut R) -> Result<Episode> {
    let classes = store.classes();
    for _ in 0..cfg.max_rejections.max(1) {
        let labels = crp_sample(cfg, n, rng)?;
        let sizes = crate::partitions::cluster_sizes(&labels);
        let k = sizes.len();
        if classes.len() < k {
            return Err(Error::Store(format!("{} classes cannot fill {k} clusters", classes.len())));
        }
        let picked = sample_indices(rng, classes.len(), k).into_vec();
        if picked.iter().zip(&sizes).any(|(&c, &s)| classes[c].1.len() < s) {
            continue;
        }
        let members: Vec<Vec<usize>> = picked
            .iter()
            .zip(&sizes)
            .map(|(&c, &s)| {
                let pool = &classes[c].1;
                sample_indices(rng, pool.len(), s).into_iter().map(|i| pool[i]).collect()
            })
            .collect();
        let mut cursor = vec![0; k];
        let mut data = Vec::with_capacity(n * store.dim());
        for &c in &labels {
            data.extend_from_slice(&store.items[members[c][cursor[c]]].vector);
            cursor[c] += 1;
        }
        return Ok(Episode {
            points: Tensor::matrix(n, store.dim(), data)?,
            labels,
            provenance: Provenance::EmbeddingOriginal,
            seed: None,
        });
    }
    Err(Error::Store("classes too small for the sampled cluster sizes".into()))
}

/// Reads the tab-separated embedding format:
///
/// ```text
/// #dim=<d>
/// <id>\t<class tag or empty>\t<v1>,<v2>,...,<vd>
/// ```
pub fn load_embeddings(path: &Path, expected_dim: Option<usize>) -> Result<EmbeddingStore> {
    let text = fs::read_to_string(path)?;
    let parse_err = |line: usize, msg: String| Error::Parse { path: path.to_path_buf(), line, msg };
    let mut header_dim = None;
    let mut items = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            if let Some(d) = rest.trim().strip_prefix("dim=") {
                header_dim = Some(d.trim().parse::<usize>().map_err(|e| parse_err(line_no, format!("bad dim header: {e}")))?);
            }
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(parse_err(line_no, format!("expected 3 tab-separated fields, got {}", fields.len())));
        }
        let vector = fields[2]
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<Result<Vec<f64>, _>>()
            .map_err(|e| parse_err(line_no, format!("bad value: {e}")))?;
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(parse_err(line_no, "non-finite value".into()));
        }
        if let Some(d) = header_dim {
            if vector.len() != d {
                return Err(parse_err(line_no, format!("dimension {} does not match header {d}", vector.len())));
            }
        }
        let class = (!fields[1].is_empty()).then(|| fields[1].to_string());
        items.push(EmbeddingItem { id: fields[0].to_string(), vector, class });
    }
    if items.is_empty() {
        return Err(Error::Store(format!("{} contains no items", path.display())));
    }
    let store = EmbeddingStore::new(items)?;
    if let Some(d) = expected_dim {
        if store.dim() != d {
            return Err(Error::Store(format!("dimension {} does not match expected {d}", store.dim())));
        }
    }
    Ok(store)
}

pub fn write_embeddings(path: &Path, store: &EmbeddingStore) -> Result<()> {
    let mut out = fs::File::create(path)?;
    writeln!(out, "#dim={}", store.dim())?;
    for item in store.items() {
        let values: Vec<String> = item.vector.iter().map(|v| format!("{v:?}")).collect();
        writeln!(out, "{}\t{}\t{}", item.id, item.class.as_deref().unwrap_or(""), values.join(","))?;
    }
    Ok(())
}

/// Derives an independent 64-bit seed for stream `stream`, index `index`
/// from a run seed (SplitMix64 finalizer applied to a mixed key).
pub fn split_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed
        ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03).rotate_left(17);
    for _ in 0..2 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A stateless generator of training or test episodes.
pub trait EpisodeSource: Sync {
    fn sample(&self, seed: u64) -> Result<Episode>;
    fn point_dim(&self) -> usize;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MogSource {
    pub crp: CrpConfig,
    pub sigma: f64,
}

impl EpisodeSource for MogSource {
    fn sample(&self, seed: u64) -> Result<Episode> {
        let mut rng = rng_from_seed(seed);
        let mut ep = mog_episode(&self.crp, self.sigma, &mut rng)?;
        ep.seed = Some(seed);
        Ok(ep)
    }

    fn point_dim(&self) -> usize {
        2
    }
}

#[derive(Debug, Clone)]
pub struct DiscriminationSource {
    pub store: EmbeddingStore,
    pub crp: CrpConfig,
    pub aug_std: f64,
}

impl EpisodeSource for DiscriminationSource {
    fn sample(&self, seed: u64) -> Result<Episode> {
        let mut rng = rng_from_seed(seed);
        let mut ep = discrimination_episode(&self.store, &self.crp, self.aug_std, &mut rng)?;
        ep.seed = Some(seed);
        Ok(ep)
    }

    fn point_dim(&self) -> usize {
        self.store.dim()
    }
}

/// Replays stored episodes; seed `s` selects episode `s mod len`.
#[derive(Debug, Clone)]
pub struct EpisodeFileSource {
    episodes: Vec<Episode>,
    dim: usize,
}

impl EpisodeFileSource {
    pub fn new(episodes: Vec<Episode>) -> Result<Self> {
        let dim = episodes.first().map(|e| e.points.cols()).ok_or_else(|| Error::Store("no episodes".into()))?;
        if episodes.iter().any(|e| e.points.cols() != dim) {
            return Err(Error::Store("episodes disagree on point dimension".into()));
        }
        Ok(Self { episodes, dim })
    }
}

impl EpisodeSource for EpisodeFileSource {
    fn sample(&self, seed: u64) -> Result<Episode> {
        Ok(self.episodes[(seed % self.episodes.len() as u64) as usize].clone())
    }

    fn point_dim(&self) -> usize {
        self.dim
    }
}

/// Class-structured unit vectors standing in for precomputed features:
/// random unit class centers, items at center + `spread` noise, renormalized.
pub fn synthetic_store<R: Rng + ?Sized>(classes: usize, per_class: usize, dim: usize, spread: f64, rng: &mut R) -> Result<EmbeddingStore> {
    let unit = |v: Vec<f64>| {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        v.into_iter().map(|x| x / norm).collect::<Vec<f64>>()
    };
    let mut items = Vec::with_capacity(classes * per_class);
    for c in 0..classes {
        let center = unit((0..dim).map(|_| StandardNormal.sample(rng)).collect());
        for i in 0..per_class {
            let v = center.iter().map(|x| x + spread * Distribution::<f64>::sample(&StandardNormal, rng) / (dim as f64).sqrt()).collect();
            items.push(EmbeddingItem { id: format!("c{c}_{i}"), vector: unit(v), class: Some(format!("class{c}")) });
        }
    }
    EmbeddingStore::new(items)
}

/// Reproducibility dump of generated episodes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpisodeDump {
    pub seed: u64,
    pub config: serde_json::Value,
    pub episodes: Vec<DumpedEpisode>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DumpedEpisode {
    pub seed: Option<u64>,
    pub provenance: Provenance,
    pub labels: Vec<usize>,
    pub points: Vec<Vec<f64>>,
}

impl From<&Episode> for DumpedEpisode {
    fn from(ep: &Episode) -> Self {
        Self {
            seed: ep.seed,
            provenance: ep.provenance,
            labels: ep.labels.clone(),
            points: (0..ep.points.rows()).map(|i| ep.points.row(i).to_vec()).collect(),
        }
    }
}

impl DumpedEpisode {
    pub fn to_episode(&self) -> Result<Episode> {
        crate::partitions::check_canonical(&self.labels)?;
        if self.labels.len() != self.points.len() {
            return Err(Error::Labels(format!("{} labels for {} points", self.labels.len(), self.points.len())));
        }
        Ok(Episode {
            points: Tensor::from_rows(&self.points)?,
            labels: self.labels.clone(),
            provenance: self.provenance,
            seed: self.seed,
        })
    }
}
