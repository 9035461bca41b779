//! Synthetic feed market with a known click model.
//!
//! A fixed catalogue of organic items and ads is drawn once per seed. Each
//! request samples items from it, draws fresh bids and GMV-per-click values,
//! and orders the organic items by expected GMV. True CTRs follow
//! `base(item) * position(j) * (1 + kappa * interaction)`, where the
//! interaction is the mean cosine similarity of the item's style vector to
//! its neighbours in the list, so a point-wise model cannot capture it.

mod avito;

use std::collections::HashMap;
use std::io::{BufRead, Write};

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::{AdCandidate, Allocation, ItemFeatures, OrganicItem, Request, Slot};
use crate::epm::LabeledList;
use crate::error::{Error, Result};
use crate::numerics::sigmoid;

pub use avito::{
    ingest_avito_sessions, simulated_ctr_means, AvitoDataset, AvitoOptions, AvitoSession, LOGGED_POSITIONS,
};

pub const CTR_FLOOR: f64 = 1e-4;
pub const CTR_CEIL: f64 = 1.0 - 1e-4;
pub const STYLE_DIM: usize = 2;
pub const QUALITY_DIM: usize = 2;
/// Dense features per item: style then quality.
pub const DENSE_DIM: usize = STYLE_DIM + QUALITY_DIM;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UniformRange {
    pub low: f64,
    pub high: f64,
}

impl UniformRange {
    pub const fn new(low: f64, high: f64) -> Self {
        Self { low, high }
    }

    fn validate(&self, what: &str) -> Result<()> {
        if self.low < self.high && self.low.is_finite() && self.high.is_finite() {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "{what}: need low < high, got [{}, {}]",
                self.low, self.high
            )))
        }
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        rng.random_range(self.low..self.high)
    }

    pub fn mean(&self) -> f64 {
        0.5 * (self.low + self.high)
    }

    pub fn std(&self) -> f64 {
        (self.high - self.low) / 12f64.sqrt()
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.low && x <= self.high
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MarketConfig {
    /// Candidate ads per request.
    pub num_ads: usize,
    /// List length `m`.
    pub list_len: usize,
    pub bid_dist: UniformRange,
    pub organic_gmv_dist: UniformRange,
    pub ad_gmv_dist: UniformRange,
    /// Position effect per slot; its length must be at least `list_len`.
    pub position_multipliers: Vec<f64>,
    pub context_coefficient: f64,
    pub catalog_organic: usize,
    pub catalog_ads: usize,
    pub categories: usize,
    pub user_dim: usize,
    pub request_dim: usize,
    pub seed: u64,
}

impl Default for MarketConfig {
    fn default() -> Self {
        Self {
            num_ads: 3,
            list_len: 4,
            bid_dist: UniformRange::new(0.5, 1.0),
            organic_gmv_dist: UniformRange::new(3.5, 6.0),
            ad_gmv_dist: UniformRange::new(2.0, 4.0),
            position_multipliers: vec![1.0, 0.85, 0.72, 0.62, 0.55],
            context_coefficient: 0.8,
            catalog_organic: 400,
            catalog_ads: 100,
            categories: 8,
            user_dim: 4,
            request_dim: 4,
            seed: 1,
        }
    }
}

impl MarketConfig {
    pub fn validate(&self) -> Result<()> {
        self.bid_dist.validate("bid_dist")?;
        self.organic_gmv_dist.validate("organic_gmv_dist")?;
        self.ad_gmv_dist.validate("ad_gmv_dist")?;
        if self.bid_dist.low <= 0.0 {
            return Err(Error::invalid("bids must be positive"));
        }
        if self.num_ads == 0 || self.list_len == 0 {
            return Err(Error::invalid("num_ads and list_len must be positive"));
        }
        if self.position_multipliers.len() < self.list_len || self.position_multipliers.iter().any(|&p| !(p > 0.0)) {
            return Err(Error::invalid("need a positive position multiplier for every slot"));
        }
        if !(self.context_coefficient >= 0.0) {
            return Err(Error::invalid("context_coefficient must be non-negative"));
        }
        if self.catalog_organic < self.list_len - 1 || self.catalog_ads < self.num_ads || self.categories == 0 {
            return Err(Error::invalid("catalogue too small for the requested list"));
        }
        Ok(())
    }

    /// Vocabulary sizes of the two sparse fields (item id, category).
    pub fn vocab_sizes(&self) -> Vec<usize> {
        vec![self.catalog_organic + self.catalog_ads, self.categories]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CatalogItem {
    /// Global sparse id: organic items first, then ads.
    pub id: usize,
    pub category: usize,
    pub style: Vec<f64>,
    pub quality: Vec<f64>,
    pub base_ctr: f64,
}

impl CatalogItem {
    fn features(&self) -> ItemFeatures {
        ItemFeatures {
            sparse_ids: vec![self.id, self.category],
            dense: self.style.iter().chain(&self.quality).copied().collect(),
            position_hint: None,
        }
    }
}

/// Ground-truth CTR of any item in any list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthClickModel {
    /// Indexed by global sparse id.
    pub base_ctr: Vec<f64>,
    pub position_multipliers: Vec<f64>,
    pub context_coefficient: f64,
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

impl GroundTruthClickModel {
    fn item_of<'a>(&self, request: &'a Request, slot: Slot) -> Result<Option<&'a ItemFeatures>> {
        Ok(match slot {
            Slot::Ad(i) => Some(
                &request
                    .ads
                    .get(i.wrapping_sub(1))
                    .ok_or_else(|| Error::invalid(format!("ad index {i} out of range")))?
                    .features,
            ),
            Slot::Organic(k) => Some(
                &request
                    .organic
                    .get(k)
                    .ok_or_else(|| Error::invalid(format!("organic offset {k} out of range")))?
                    .features,
            ),
            Slot::Empty => None,
        })
    }

    fn style(features: &ItemFeatures) -> &[f64] {
        &features.dense[..STYLE_DIM.min(features.dense.len())]
    }

    /// Mean cosine similarity of slot `j`'s style to its non-empty neighbours.
    pub fn interaction(&self, request: &Request, allocation: &Allocation, j: usize) -> Result<f64> {
        let Some(me) = self.item_of(request, allocation.slots[j])? else {
            return Ok(0.0);
        };
        let mut total = 0.0;
        let mut count = 0;
        for k in [j.wrapping_sub(1), j + 1] {
            if let Some(&slot) = allocation.slots.get(k) {
                if let Some(other) = self.item_of(request, slot)? {
                    total += cosine(Self::style(me), Self::style(other));
                    count += 1;
                }
            }
        }
        Ok(if count == 0 { 0.0 } else { total / count as f64 })
    }

    /// True CTR of slot `j` (0-based); empty slots never click.
    pub fn true_ctr(&self, request: &Request, allocation: &Allocation, j: usize) -> Result<f64> {
        let Some(item) = self.item_of(request, allocation.slots[j])? else {
            return Ok(0.0);
        };
        let id = item.sparse_ids.first().copied().unwrap_or(usize::MAX);
        let base = *self
            .base_ctr
            .get(id)
            .ok_or_else(|| Error::invalid(format!("item {id} is not in the catalogue")))?;
        let pos = *self
            .position_multipliers
            .get(j)
            .ok_or_else(|| Error::invalid(format!("no position multiplier for slot {}", j + 1)))?;
        let ctx = 1.0 + self.context_coefficient * self.interaction(request, allocation, j)?;
        Ok((base * pos * ctx).clamp(CTR_FLOOR, CTR_CEIL))
    }

    pub fn true_ctrs(&self, request: &Request, allocation: &Allocation) -> Result<Vec<f64>> {
        (0..allocation.len())
            .map(|j| self.true_ctr(request, allocation, j))
            .collect()
    }
}

/// Independent Bernoulli draw per slot.
pub fn simulate_clicks<R: Rng + ?Sized>(ctrs: &[f64], rng: &mut R) -> Vec<bool> {
    ctrs.iter().map(|&c| rng.random::<f64>() < c).collect()
}

/// Catalogue plus click model for one market seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub config: MarketConfig,
    pub organic: Vec<CatalogItem>,
    pub ads: Vec<CatalogItem>,
    pub click_model: GroundTruthClickModel,
}

/// Stream reserved for catalogue generation.
const CATALOG_STREAM: u64 = u64::MAX;
/// Salt mixed into the seed for evaluation-time click draws.
const CLICK_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

impl World {
    pub fn new(config: MarketConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(CATALOG_STREAM);
        let residual = Normal::new(0.0, 0.3).expect("valid normal");
        let make = |id: usize, rng: &mut ChaCha8Rng| {
            let style: Vec<f64> = (0..STYLE_DIM).map(|_| rng.sample(StandardNormal)).collect();
            let quality: Vec<f64> = (0..QUALITY_DIM).map(|_| rng.sample(StandardNormal)).collect();
            let logit = -2.2 + 0.5 * quality[0] + 0.3 * quality[1] + residual.sample(rng);
            CatalogItem {
                id,
                category: rng.random_range(0..config.categories),
                style,
                quality,
                base_ctr: sigmoid(logit),
            }
        };
        let organic: Vec<CatalogItem> = (0..config.catalog_organic).map(|k| make(k, &mut rng)).collect();
        let ads: Vec<CatalogItem> = (0..config.catalog_ads)
            .map(|k| make(config.catalog_organic + k, &mut rng))
            .collect();
        let base_ctr = organic.iter().chain(&ads).map(|c| c.base_ctr).collect();
        let click_model = GroundTruthClickModel {
            base_ctr,
            position_multipliers: config.position_multipliers[..config.list_len].to_vec(),
            context_coefficient: config.context_coefficient,
        };
        Ok(Self {
            config,
            organic,
            ads,
            click_model,
        })
    }

    /// Generator for request `index`, independent of every other index.
    pub fn request_rng(&self, index: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(index);
        rng
    }

    /// Generator for evaluation clicks of request `index` under `salt`.
    pub fn click_rng(&self, index: u64, salt: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ CLICK_SALT ^ salt.rotate_left(17));
        rng.set_stream(index);
        rng
    }

    pub fn request_id(index: u64) -> String {
        format!("req-{index:07}")
    }

    /// Parses the index back out of an id made by [`World::request_id`].
    pub fn request_index(id: &str) -> Option<u64> {
        id.strip_prefix("req-")?.parse().ok()
    }
}

/// Draws request `index` from the world's per-request stream.
pub fn sample_request<R: Rng + ?Sized>(world: &World, index: u64, rng: &mut R) -> Request {
    let cfg = &world.config;
    let user_features = (0..cfg.user_dim).map(|_| rng.sample(StandardNormal)).collect();
    let request_features = (0..cfg.request_dim).map(|_| rng.sample(StandardNormal)).collect();
    let mut organic: Vec<(f64, OrganicItem)> = sample_indices(rng, world.organic.len(), cfg.list_len - 1)
        .into_iter()
        .map(|k| {
            let item = &world.organic[k];
            let gmv = cfg.organic_gmv_dist.sample(rng);
            (
                gmv * item.base_ctr,
                OrganicItem {
                    item_id: format!("o{}", item.id),
                    features: item.features(),
                    gmv_per_click: gmv,
                },
            )
        })
        .collect();
    // the platform's organic ranking: expected GMV, descending
    organic.sort_by(|a, b| b.0.total_cmp(&a.0));
    let value_dist_features = vec![cfg.bid_dist.mean(), cfg.bid_dist.std()];
    let ads = sample_indices(rng, world.ads.len(), cfg.num_ads)
        .into_iter()
        .map(|k| {
            let item = &world.ads[k];
            let value = cfg.bid_dist.sample(rng);
            AdCandidate {
                ad_id: format!("a{}", item.id),
                bid: value,
                true_value: Some(value),
                value_dist_features: value_dist_features.clone(),
                gmv_per_click: cfg.ad_gmv_dist.sample(rng),
                features: item.features(),
            }
        })
        .collect();
    Request {
        request_id: World::request_id(index),
        user_features,
        request_features,
        organic: organic.into_iter().map(|x| x.1).collect(),
        ads,
    }
}

/// Shows one uniformly chosen ad at a uniformly chosen position and draws clicks.
pub fn log_request<R: Rng + ?Sized>(world: &World, request: Request, rng: &mut R) -> Result<LabeledList> {
    let i = rng.random_range(1..=request.num_ads());
    let j = rng.random_range(1..=request.list_len());
    let allocation = Allocation::insert(request.organic.len(), i, j)?;
    let ctrs = world.click_model.true_ctrs(&request, &allocation)?;
    let clicks = simulate_clicks(&ctrs, rng);
    let realized_gmv = realized_gmv(&request, &allocation, &clicks)?;
    Ok(LabeledList {
        request,
        allocation,
        clicks,
        realized_gmv,
    })
}

/// `click * gmv_per_click` per slot.
pub fn realized_gmv(request: &Request, allocation: &Allocation, clicks: &[bool]) -> Result<Vec<f64>> {
    allocation
        .slots
        .iter()
        .zip(clicks)
        .map(|(&slot, &c)| {
            let gmv = match slot {
                Slot::Ad(i) => request.ads[i - 1].gmv_per_click,
                Slot::Organic(k) => request.organic[k].gmv_per_click,
                Slot::Empty => 0.0,
            };
            Ok(if c { gmv } else { 0.0 })
        })
        .collect()
}

/// Requests `start..start + count`, generated in parallel, in index order.
pub fn generate_requests(world: &World, start: u64, count: usize) -> Vec<Request> {
    (start..start + count as u64)
        .into_par_iter()
        .map(|index| sample_request(world, index, &mut world.request_rng(index)))
        .collect()
}

/// Logged lists for requests `start..start + count`.
pub fn generate_logs(world: &World, start: u64, count: usize) -> Result<Vec<LabeledList>> {
    (start..start + count as u64)
        .into_par_iter()
        .map(|index| {
            let mut rng = world.request_rng(index);
            let request = sample_request(world, index, &mut rng);
            log_request(world, request, &mut rng)
        })
        .collect()
}

/// One line of the logged-feedback JSONL file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub request_id: String,
    pub allocation: Allocation,
    pub clicks: Vec<bool>,
    pub realized_gmv: Vec<f64>,
}

pub fn write_logs_jsonl<W: Write>(mut out: W, lists: &[LabeledList]) -> Result<()> {
    for l in lists {
        let rec = LogRecord {
            request_id: l.request.request_id.clone(),
            allocation: l.allocation.clone(),
            clicks: l.clicks.clone(),
            realized_gmv: l.realized_gmv.clone(),
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Reads log records and joins them with `requests` by id.
pub fn read_logs_jsonl<R: BufRead>(input: R, requests: &[Request]) -> Result<Vec<LabeledList>> {
    let by_id: HashMap<&str, &Request> = requests.iter().map(|r| (r.request_id.as_str(), r)).collect();
    let mut out = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: LogRecord =
            serde_json::from_str(&line).map_err(|e| Error::invalid(format!("log line {}: {e}", n + 1)))?;
        let request = by_id
            .get(rec.request_id.as_str())
            .ok_or_else(|| Error::invalid(format!("log line {}: unknown request {}", n + 1, rec.request_id)))?;
        out.push(LabeledList {
            request: (*request).clone(),
            allocation: rec.allocation,
            clicks: rec.clicks,
            realized_gmv: rec.realized_gmv,
        });
    }
    Ok(out)
}
