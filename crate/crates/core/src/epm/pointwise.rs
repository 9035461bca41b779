//! Point-wise CTR baseline: one item and its position, no list context.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::train::{fit, ClickModel, EpmTrainConfig, LabeledList, TrainedModel};
use super::{slot_view, vocab_index, EpmPrediction, PCTR_CLIP};
use crate::domain::{Allocation, Request, Slot};
use crate::error::{Error, Result};
use crate::numerics::checkpoint::take_group;
use crate::numerics::{read_checkpoint, write_checkpoint, Graph, Mlp, ParameterStore, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointwiseConfig {
    pub list_len: usize,
    pub vocab_sizes: Vec<usize>,
    pub embedding_dim: usize,
    pub dense_dim: usize,
    /// Hidden widths; the output layer of width 1 is appended.
    pub hidden: Vec<usize>,
}

impl Default for PointwiseConfig {
    fn default() -> Self {
        Self {
            list_len: 4,
            vocab_sizes: vec![512, 8],
            embedding_dim: 8,
            dense_dim: 6,
            hidden: vec![64, 32],
        }
    }
}

impl PointwiseConfig {
    /// Layer sizes of the larger production-style network.
    pub fn wide_hidden() -> Vec<usize> {
        vec![256, 128, 64, 32]
    }

    fn input_width(&self) -> usize {
        self.vocab_sizes.len() * self.embedding_dim + self.list_len + self.dense_dim + 2
    }

    fn mlp(&self) -> Mlp {
        let mut dims = vec![self.input_width()];
        dims.extend(&self.hidden);
        dims.push(1);
        Mlp::new("pw", &dims)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PointwiseModel {
    config: PointwiseConfig,
    params: ParameterStore,
}

impl PointwiseModel {
    pub fn new<R: Rng + ?Sized>(config: PointwiseConfig, rng: &mut R) -> Result<Self> {
        if config.list_len == 0 || config.embedding_dim == 0 {
            return Err(Error::invalid("point-wise dimensions must be positive"));
        }
        let mut params = ParameterStore::new();
        for (f, &vocab) in config.vocab_sizes.iter().enumerate() {
            params.insert_xavier(format!("emb.{f}"), vocab + 1, config.embedding_dim, rng)?;
        }
        config.mlp().init(&mut params, rng)?;
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &PointwiseConfig {
        &self.config
    }

    pub fn params(&self) -> &ParameterStore {
        &self.params
    }

    /// Input rows for `(slot, 1-based position)` pairs.
    fn forward_graph(&self, g: &mut Graph, request: &[&Request], slots: &[(Slot, usize)]) -> Result<Var> {
        let cfg = &self.config;
        let mut ids = vec![Vec::with_capacity(slots.len()); cfg.vocab_sizes.len()];
        let tail = cfg.list_len + cfg.dense_dim + 2;
        let mut rest = Vec::with_capacity(slots.len() * tail);
        for (r, &(slot, position)) in request.iter().zip(slots) {
            if position == 0 || position > cfg.list_len {
                return Err(Error::invalid(format!(
                    "position {position} outside 1..={}",
                    cfg.list_len
                )));
            }
            let view = slot_view(r, slot)?;
            for (f, &vocab) in cfg.vocab_sizes.iter().enumerate() {
                let id = view
                    .features
                    .and_then(|x| x.sparse_ids.get(f).copied())
                    .unwrap_or(usize::MAX);
                ids[f].push(vocab_index(id, vocab));
            }
            rest.extend((1..=cfg.list_len).map(|p| if p == position { 1.0 } else { 0.0 }));
            match view.features {
                Some(x) if x.dense.len() == cfg.dense_dim => rest.extend_from_slice(&x.dense),
                Some(x) => {
                    return Err(Error::invalid(format!(
                        "item has {} dense features, model expects {}",
                        x.dense.len(),
                        cfg.dense_dim
                    )))
                }
                None => rest.extend(std::iter::repeat_n(0.0, cfg.dense_dim)),
            }
            rest.push(view.gmv_per_click);
            rest.push(if view.is_ad { 1.0 } else { 0.0 });
        }
        let mut parts = Vec::new();
        for (f, col) in ids.iter().enumerate() {
            let table = g.param(&self.params, &format!("emb.{f}"))?;
            parts.push(g.gather_rows(table, col)?);
        }
        parts.push(g.constant(Tensor::matrix(slots.len(), tail, rest)?));
        let x = g.concat_cols(&parts)?;
        let logit = cfg.mlp().forward(g, &self.params, x)?;
        g.sigmoid(logit)
    }

    fn predict_slots(&self, requests: &[&Request], slots: &[(Slot, usize)]) -> Result<Vec<f64>> {
        if slots.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = Graph::new();
        let out = self.forward_graph(&mut g, requests, slots)?;
        Ok(g.value(out)
            .data()
            .iter()
            .map(|q| q.clamp(PCTR_CLIP, 1.0 - PCTR_CLIP))
            .collect())
    }

    /// Each slot of `allocation` scored on its own. GMV-per-click is the
    /// item's catalogue value since this model has no GMV head.
    pub fn predict_allocation(&self, request: &Request, allocation: &Allocation) -> Result<EpmPrediction> {
        let slots: Vec<(Slot, usize)> = allocation.slots.iter().enumerate().map(|(j, &s)| (s, j + 1)).collect();
        let reqs = vec![request; slots.len()];
        let pctr = self.predict_slots(&reqs, &slots)?;
        let pgmv_per_click = allocation
            .slots
            .iter()
            .map(|&s| slot_view(request, s).map(|v| v.gmv_per_click))
            .collect::<Result<_>>()?;
        Ok(EpmPrediction { pctr, pgmv_per_click })
    }

    pub fn save<W: Write>(&self, out: W) -> Result<()> {
        write_checkpoint(
            out,
            "pointwise",
            serde_json::to_value(&self.config)?,
            &[("pointwise", &self.params)],
        )
    }

    pub fn load<R: Read>(input: R) -> Result<Self> {
        let (header, mut groups) = read_checkpoint(input)?;
        if header.kind != "pointwise" {
            return Err(Error::Checkpoint(format!(
                "expected a pointwise checkpoint, found `{}`",
                header.kind
            )));
        }
        let config = serde_json::from_value(header.meta)?;
        let params = take_group(&mut groups, "pointwise")?;
        Ok(Self { config, params })
    }

    /// Slot-level AUC and PCOC on labelled lists.
    pub fn score(&self, lists: &[LabeledList]) -> Result<(Option<f64>, Option<f64>)> {
        super::train::score_lists(self, lists)
    }
}

/// pCTR of one item shown at `position` (1-based).
pub fn pointwise_forward(model: &PointwiseModel, request: &Request, slot: Slot, position: usize) -> Result<f64> {
    Ok(model.predict_slots(&[request], &[(slot, position)])?[0])
}

fn flatten_lists<'a>(lists: &[&'a LabeledList]) -> (Vec<&'a Request>, Vec<(Slot, usize)>) {
    let mut reqs = Vec::new();
    let mut slots = Vec::new();
    for l in lists {
        for (j, &s) in l.allocation.slots.iter().enumerate() {
            reqs.push(&l.request);
            slots.push((s, j + 1));
        }
    }
    (reqs, slots)
}

impl ClickModel for PointwiseModel {
    fn store_mut(&mut self) -> &mut ParameterStore {
        &mut self.params
    }

    fn batch_loss(&self, g: &mut Graph, lists: &[&LabeledList], _gmv_weight: f64) -> Result<Var> {
        let (reqs, slots) = flatten_lists(lists);
        let targets: Vec<f64> = lists
            .iter()
            .flat_map(|l| l.clicks.iter().map(|&c| if c { 1.0 } else { 0.0 }))
            .collect();
        let q = self.forward_graph(g, &reqs, &slots)?;
        g.binary_cross_entropy(q, &targets, PCTR_CLIP)
    }

    fn predict_ctr(&self, lists: &[&LabeledList]) -> Result<Vec<Vec<f64>>> {
        let (reqs, slots) = flatten_lists(lists);
        let flat = self.predict_slots(&reqs, &slots)?;
        let mut out = Vec::with_capacity(lists.len());
        let mut offset = 0;
        for l in lists {
            let m = l.allocation.len();
            out.push(flat[offset..offset + m].to_vec());
            offset += m;
        }
        Ok(out)
    }
}

pub fn train_pointwise(
    data: &[LabeledList],
    model_config: PointwiseConfig,
    config: &EpmTrainConfig,
) -> Result<TrainedModel<PointwiseModel>> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let model = PointwiseModel::new(model_config, &mut rng)?;
    fit(model, data, config, &mut rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::fixtures;

    fn model(hidden: Vec<usize>) -> PointwiseModel {
        let config = PointwiseConfig {
            list_len: 3,
            vocab_sizes: vec![200, 4],
            embedding_dim: 3,
            dense_dim: 2,
            hidden,
        };
        PointwiseModel::new(config, &mut ChaCha8Rng::seed_from_u64(9)).unwrap()
    }

    #[test]
    fn output_in_unit_interval_and_context_free() {
        let m = model(vec![8, 4]);
        let r = fixtures::request(2, 3);
        let q = pointwise_forward(&m, &r, Slot::Ad(1), 2).unwrap();
        assert!(q > 0.0 && q < 1.0);
        // the ad's score at position 2 is the same whatever surrounds it
        let mut other = r.clone();
        other.organic.reverse();
        other.organic[0].features.dense = vec![9.0, -9.0];
        assert_eq!(pointwise_forward(&m, &other, Slot::Ad(1), 2).unwrap(), q);
        let a = Allocation::insert(2, 1, 2).unwrap();
        assert_eq!(m.predict_allocation(&r, &a).unwrap().pctr[1], q);
        assert!(pointwise_forward(&m, &r, Slot::Ad(1), 4).is_err());
    }

    #[test]
    fn wide_layers_are_configurable() {
        let m = model(PointwiseConfig::wide_hidden());
        let dims = m.config().mlp().dims().to_vec();
        assert_eq!(&dims[1..], &[256, 128, 64, 32, 1]);
        let r = fixtures::request(1, 3);
        let q = pointwise_forward(&m, &r, Slot::Organic(0), 1).unwrap();
        assert!(q > 0.0 && q < 1.0);
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = model(vec![4]);
        let mut buf = Vec::new();
        m.save(&mut buf).unwrap();
        assert_eq!(PointwiseModel::load(buf.as_slice()).unwrap(), m);
        assert!(crate::epm::EpmModel::load(buf.as_slice()).is_err());
    }
}
