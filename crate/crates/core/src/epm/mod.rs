//! Externality-aware prediction: a list-wise model that reads a whole
//! allocation and predicts CTR and GMV-per-click for every slot.
//!
//! Each slot becomes a row `z_j = [sparse embeddings | position embedding |
//! dense features | gmv per click | is-ad]`. A single self-attention block
//! mixes the rows, the result is flattened, joined with the user and request
//! vectors and passed through a shared MLP. One linear head per position
//! produces the CTR logit and another the GMV-per-click (softplus).
//!
//! Bids never enter the features.

mod pointwise;
mod train;

use std::io::{Read, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{Allocation, ItemFeatures, Request, Slot};
use crate::error::{Error, Result};
use crate::numerics::checkpoint::take_group;
use crate::numerics::{read_checkpoint, write_checkpoint, Graph, Mlp, ParameterStore, Tensor, Var};

pub use pointwise::{pointwise_forward, train_pointwise, PointwiseConfig, PointwiseModel};
pub use train::{train_epm, EpmTrainConfig, EpochRecord, LabeledList, TrainedModel};

/// Predictions are kept strictly inside the unit interval.
pub const PCTR_CLIP: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpmConfig {
    /// List length `m`; one output head per position.
    pub list_len: usize,
    /// Vocabulary size per sparse field. Each table gets one extra OOV row.
    pub vocab_sizes: Vec<usize>,
    pub embedding_dim: usize,
    pub position_dim: usize,
    /// Number of dense features per item.
    pub dense_dim: usize,
    pub user_dim: usize,
    pub request_dim: usize,
    /// Widths of the shared MLP.
    pub hidden: Vec<usize>,
}

impl Default for EpmConfig {
    fn default() -> Self {
        Self {
            list_len: 4,
            vocab_sizes: vec![512, 8],
            embedding_dim: 8,
            position_dim: 8,
            dense_dim: 6,
            user_dim: 4,
            request_dim: 4,
            hidden: vec![64, 32],
        }
    }
}

impl EpmConfig {
    /// Width `d` of one item row.
    pub fn item_width(&self) -> usize {
        self.vocab_sizes.len() * self.embedding_dim + self.position_dim + self.dense_dim + 2
    }

    pub fn context_width(&self) -> usize {
        self.user_dim + self.request_dim
    }

    fn validate(&self) -> Result<()> {
        if self.list_len == 0 || self.embedding_dim == 0 || self.position_dim == 0 || self.hidden.is_empty() {
            return Err(Error::invalid("EPM dimensions must be positive"));
        }
        Ok(())
    }
}

/// Per-slot predictions for one allocation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpmPrediction {
    /// `q_j(a)`, strictly inside (0, 1).
    pub pctr: Vec<f64>,
    /// `g_j(a)`, non-negative.
    pub pgmv_per_click: Vec<f64>,
}

impl EpmPrediction {
    pub fn list_len(&self) -> usize {
        self.pctr.len()
    }

    /// Expected GMV of the list, `sum_j g_j q_j`.
    pub fn expected_gmv(&self) -> f64 {
        self.pctr.iter().zip(&self.pgmv_per_click).map(|(q, g)| q * g).sum()
    }
}

/// Allocations of one request with their predictions, index-aligned.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictedRequest {
    pub allocations: Vec<Allocation>,
    pub predictions: Vec<EpmPrediction>,
}

impl PredictedRequest {
    pub fn new(allocations: Vec<Allocation>, predictions: Vec<EpmPrediction>) -> Result<Self> {
        if allocations.len() != predictions.len() {
            return Err(Error::invalid("allocations and predictions must align"));
        }
        Ok(Self {
            allocations,
            predictions,
        })
    }

    pub fn len(&self) -> usize {
        self.allocations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.allocations.is_empty()
    }

    /// pCTR of the ad in allocation `k` (0 for the ad-free list).
    pub fn ad_ctr(&self, k: usize) -> f64 {
        match self.allocations[k].ad_slot() {
            Some(j) => self.predictions[k].pctr[j],
            None => 0.0,
        }
    }

    /// Index of allocation `a(ad_index, position)`, both 1-based.
    pub fn index_of(&self, ad_index: usize, position: usize) -> Option<usize> {
        self.allocations
            .iter()
            .position(|a| a.ad_index() == Some(ad_index) && a.ad_position() == Some(position))
    }

    pub fn ad_free_index(&self) -> Option<usize> {
        self.allocations.iter().position(|a| a.placement.is_none())
    }
}

/// Binary cross-entropy summed over positions, `q` clipped to [1e-7, 1 - 1e-7].
pub fn ce_loss(prediction: &EpmPrediction, clicks: &[bool]) -> Result<f64> {
    if prediction.pctr.len() != clicks.len() {
        return Err(Error::Shape {
            op: "ce_loss",
            left: vec![prediction.pctr.len()],
            right: vec![clicks.len()],
        });
    }
    Ok(prediction
        .pctr
        .iter()
        .zip(clicks)
        .map(|(&q, &y)| {
            let q = q.clamp(PCTR_CLIP, 1.0 - PCTR_CLIP);
            if y {
                -q.ln()
            } else {
                -(1.0 - q).ln()
            }
        })
        .sum())
}

/// Raw slot attributes shared by the list-wise and point-wise models.
pub(crate) struct SlotView<'a> {
    pub features: Option<&'a ItemFeatures>,
    pub gmv_per_click: f64,
    pub is_ad: bool,
}

pub(crate) fn slot_view<'a>(request: &'a Request, slot: Slot) -> Result<SlotView<'a>> {
    Ok(match slot {
        Slot::Ad(i) => {
            let ad = request
                .ads
                .get(i.wrapping_sub(1))
                .ok_or_else(|| Error::invalid(format!("ad index {i} out of range")))?;
            SlotView {
                features: Some(&ad.features),
                gmv_per_click: ad.gmv_per_click,
                is_ad: true,
            }
        }
        Slot::Organic(k) => {
            let item = request
                .organic
                .get(k)
                .ok_or_else(|| Error::invalid(format!("organic offset {k} out of range")))?;
            SlotView {
                features: Some(&item.features),
                gmv_per_click: item.gmv_per_click,
                is_ad: false,
            }
        }
        Slot::Empty => SlotView {
            features: None,
            gmv_per_click: 0.0,
            is_ad: false,
        },
    })
}

/// Sparse id with out-of-vocabulary ids mapped to the reserved last row.
pub(crate) fn vocab_index(id: usize, vocab: usize) -> usize {
    id.min(vocab)
}

/// Accumulated model inputs for a batch of allocations.
#[derive(Clone, Debug, Default)]
pub struct FeatureBatch {
    lists: usize,
    sparse: Vec<Vec<usize>>,
    positions: Vec<usize>,
    dense: Vec<f64>,
    context: Vec<f64>,
}

impl FeatureBatch {
    pub fn len(&self) -> usize {
        self.lists
    }

    pub fn is_empty(&self) -> bool {
        self.lists == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpmModel {
    config: EpmConfig,
    params: ParameterStore,
}

impl EpmModel {
    pub fn new<R: Rng + ?Sized>(config: EpmConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut params = ParameterStore::new();
        for (f, &vocab) in config.vocab_sizes.iter().enumerate() {
            params.insert_xavier(format!("emb.{f}"), vocab + 1, config.embedding_dim, rng)?;
        }
        params.insert_xavier("pos_emb", config.list_len, config.position_dim, rng)?;
        let d = config.item_width();
        for name in ["attn.wq", "attn.wk", "attn.wv"] {
            params.insert_xavier(name, d, d, rng)?;
        }
        Mlp::new("mlp", &mlp_dims(&config)).init(&mut params, rng)?;
        let last = *config.hidden.last().expect("validated non-empty");
        for head in ["head.ctr", "head.gmv"] {
            params.insert_xavier(format!("{head}.w"), last, config.list_len, rng)?;
            params.insert_zeros(format!("{head}.b"), &[1, config.list_len])?;
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &EpmConfig {
        &self.config
    }

    pub fn params(&self) -> &ParameterStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterStore {
        &mut self.params
    }

    fn mlp(&self) -> Mlp {
        Mlp::new("mlp", &mlp_dims(&self.config))
    }

    /// Appends the rows of one allocation to `batch`.
    pub fn featurize_into(&self, batch: &mut FeatureBatch, request: &Request, allocation: &Allocation) -> Result<()> {
        let cfg = &self.config;
        if allocation.len() != cfg.list_len {
            return Err(Error::invalid(format!(
                "allocation has {} slots, model expects {}",
                allocation.len(),
                cfg.list_len
            )));
        }
        if request.user_features.len() != cfg.user_dim || request.request_features.len() != cfg.request_dim {
            return Err(Error::invalid(format!(
                "request {}: context widths {}+{} do not match model {}+{}",
                request.request_id,
                request.user_features.len(),
                request.request_features.len(),
                cfg.user_dim,
                cfg.request_dim
            )));
        }
        if batch.sparse.is_empty() {
            batch.sparse = vec![Vec::new(); cfg.vocab_sizes.len()];
        }
        for (j, &slot) in allocation.slots.iter().enumerate() {
            let view = slot_view(request, slot)?;
            for (f, &vocab) in cfg.vocab_sizes.iter().enumerate() {
                let id = view
                    .features
                    .and_then(|feat| feat.sparse_ids.get(f).copied())
                    .unwrap_or(usize::MAX);
                batch.sparse[f].push(vocab_index(id, vocab));
            }
            batch.positions.push(j);
            match view.features {
                Some(feat) if feat.dense.len() == cfg.dense_dim => batch.dense.extend_from_slice(&feat.dense),
                Some(feat) => {
                    return Err(Error::invalid(format!(
                        "item has {} dense features, model expects {}",
                        feat.dense.len(),
                        cfg.dense_dim
                    )))
                }
                None => batch.dense.extend(std::iter::repeat_n(0.0, cfg.dense_dim)),
            }
            batch.dense.push(view.gmv_per_click);
            batch.dense.push(if view.is_ad { 1.0 } else { 0.0 });
        }
        batch.context.extend_from_slice(&request.user_features);
        batch.context.extend_from_slice(&request.request_features);
        batch.lists += 1;
        Ok(())
    }

    /// Item rows `Z^a` (shape `(lists * m) x d`) on the tape.
    fn item_rows(&self, g: &mut Graph, batch: &FeatureBatch) -> Result<Var> {
        let cfg = &self.config;
        let rows = batch.lists * cfg.list_len;
        let mut parts = Vec::with_capacity(cfg.vocab_sizes.len() + 2);
        for (f, ids) in batch.sparse.iter().enumerate() {
            let table = g.param(&self.params, &format!("emb.{f}"))?;
            parts.push(g.gather_rows(table, ids)?);
        }
        let pos = g.param(&self.params, "pos_emb")?;
        parts.push(g.gather_rows(pos, &batch.positions)?);
        parts.push(g.constant(Tensor::matrix(rows, cfg.dense_dim + 2, batch.dense.clone())?));
        g.concat_cols(&parts)
    }

    /// Feature matrix `Z^a` (m x d) for one allocation.
    pub fn featurize(&self, request: &Request, allocation: &Allocation) -> Result<Tensor> {
        let mut batch = FeatureBatch::default();
        self.featurize_into(&mut batch, request, allocation)?;
        let mut g = Graph::new();
        let z = self.item_rows(&mut g, &batch)?;
        Ok(g.value(z).clone())
    }

    /// Forward pass on the tape. Returns (pctr, pgmv), each `lists x m`.
    pub fn forward_graph(&self, g: &mut Graph, batch: &FeatureBatch) -> Result<(Var, Var)> {
        if batch.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let cfg = &self.config;
        let m = cfg.list_len;
        let d = cfg.item_width();
        let z = self.item_rows(g, batch)?;
        let wq = g.param(&self.params, "attn.wq")?;
        let wk = g.param(&self.params, "attn.wk")?;
        let wv = g.param(&self.params, "attn.wv")?;
        let q = g.matmul(z, wq)?;
        let k = g.matmul(z, wk)?;
        let v = g.matmul(z, wv)?;
        let h = g.attention(q, k, v, m)?;
        let flat = g.reshape(h, batch.lists, m * d)?;
        let input = if cfg.context_width() > 0 {
            let ctx = g.constant(Tensor::matrix(batch.lists, cfg.context_width(), batch.context.clone())?);
            g.concat_cols(&[flat, ctx])?
        } else {
            flat
        };
        let hidden = self.mlp().forward(g, &self.params, input)?;
        let hidden = g.relu(hidden)?;
        let ctr = self.head(g, hidden, "head.ctr")?;
        let ctr = g.sigmoid(ctr)?;
        let gmv = self.head(g, hidden, "head.gmv")?;
        let gmv = g.softplus(gmv)?;
        Ok((ctr, gmv))
    }

    fn head(&self, g: &mut Graph, hidden: Var, name: &str) -> Result<Var> {
        let w = g.param(&self.params, &format!("{name}.w"))?;
        let b = g.param(&self.params, &format!("{name}.b"))?;
        let z = g.matmul(hidden, w)?;
        g.add_row(z, b)
    }

    /// Predictions for several allocations of one request in one batch.
    pub fn predict(&self, request: &Request, allocations: &[Allocation]) -> Result<Vec<EpmPrediction>> {
        let mut batch = FeatureBatch::default();
        for a in allocations {
            self.featurize_into(&mut batch, request, a)?;
        }
        self.predict_batch(&batch)
    }

    pub fn predict_batch(&self, batch: &FeatureBatch) -> Result<Vec<EpmPrediction>> {
        let mut g = Graph::new();
        let (ctr, gmv) = self.forward_graph(&mut g, batch)?;
        let m = self.config.list_len;
        let (cv, gv) = (g.value(ctr).data(), g.value(gmv).data());
        Ok((0..batch.lists)
            .map(|b| EpmPrediction {
                pctr: cv[b * m..(b + 1) * m]
                    .iter()
                    .map(|q| q.clamp(PCTR_CLIP, 1.0 - PCTR_CLIP))
                    .collect(),
                pgmv_per_click: gv[b * m..(b + 1) * m].to_vec(),
            })
            .collect())
    }

    /// Enumerated allocations of `request` with their predictions.
    pub fn predict_request(&self, request: &Request, allocations: Vec<Allocation>) -> Result<PredictedRequest> {
        let predictions = self.predict(request, &allocations)?;
        PredictedRequest::new(allocations, predictions)
    }

    pub fn save<W: Write>(&self, out: W) -> Result<()> {
        write_checkpoint(
            out,
            "epm",
            serde_json::to_value(&self.config)?,
            &[("epm", &self.params)],
        )
    }

    pub fn load<R: Read>(input: R) -> Result<Self> {
        let (header, mut groups) = read_checkpoint(input)?;
        if header.kind != "epm" {
            return Err(Error::Checkpoint(format!(
                "expected an epm checkpoint, found `{}`",
                header.kind
            )));
        }
        let config: EpmConfig = serde_json::from_value(header.meta)?;
        let params = take_group(&mut groups, "epm")?;
        Ok(Self { config, params })
    }
}

fn mlp_dims(config: &EpmConfig) -> Vec<usize> {
    let mut dims = vec![config.list_len * config.item_width() + config.context_width()];
    dims.extend(&config.hidden);
    dims
}

/// Single-allocation forward pass.
pub fn epm_forward(model: &EpmModel, request: &Request, allocation: &Allocation) -> Result<EpmPrediction> {
    Ok(model
        .predict(request, std::slice::from_ref(allocation))?
        .pop()
        .expect("one prediction per allocation"))
}
