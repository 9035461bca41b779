use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{EpmConfig, EpmModel, FeatureBatch, PCTR_CLIP};
use crate::domain::{Allocation, Request};
use crate::error::{Error, Result};
use crate::metrics::{auc, pcoc};
use crate::numerics::{Graph, ParameterStore, Var};

/// One displayed list with its observed feedback.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledList {
    pub request: Request,
    pub allocation: Allocation,
    pub clicks: Vec<bool>,
    /// Realized GMV per slot (0 when not clicked).
    pub realized_gmv: Vec<f64>,
}

impl LabeledList {
    fn validate(&self) -> Result<()> {
        let m = self.allocation.len();
        if self.clicks.len() != m || self.realized_gmv.len() != m {
            return Err(Error::invalid(format!(
                "request {}: labels do not match list length {m}",
                self.request.request_id
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EpmTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Weight of the GMV-per-click squared error relative to cross-entropy.
    pub gmv_weight: f64,
    /// Share of lists held out for checkpoint selection.
    pub valid_fraction: f64,
    pub seed: u64,
}

impl Default for EpmTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 128,
            learning_rate: 2e-3,
            gmv_weight: 0.05,
            valid_fraction: 0.1,
            seed: 7,
        }
    }
}

/// Per-epoch training curve row. Epoch 0 is the untrained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: Option<f64>,
    pub valid_loss: f64,
    pub valid_auc: Option<f64>,
    pub valid_pcoc: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainedModel<M> {
    pub model: M,
    pub curve: Vec<EpochRecord>,
    pub best_epoch: usize,
}

impl<M> TrainedModel<M> {
    pub fn write_curve_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.curve {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// What the shared training loop needs from a click model.
pub(crate) trait ClickModel {
    fn store_mut(&mut self) -> &mut ParameterStore;
    /// Summed loss of the lists on the tape.
    fn batch_loss(&self, g: &mut Graph, lists: &[&LabeledList], gmv_weight: f64) -> Result<Var>;
    /// Per-slot pCTR for each list.
    fn predict_ctr(&self, lists: &[&LabeledList]) -> Result<Vec<Vec<f64>>>;
}

impl ClickModel for EpmModel {
    fn store_mut(&mut self) -> &mut ParameterStore {
        self.params_mut()
    }

    fn batch_loss(&self, g: &mut Graph, lists: &[&LabeledList], gmv_weight: f64) -> Result<Var> {
        let mut batch = FeatureBatch::default();
        let mut clicks = Vec::new();
        let mut gmv = Vec::new();
        let mut mask = Vec::new();
        for l in lists {
            self.featurize_into(&mut batch, &l.request, &l.allocation)?;
            for (&c, &v) in l.clicks.iter().zip(&l.realized_gmv) {
                clicks.push(if c { 1.0 } else { 0.0 });
                gmv.push(if c { v } else { 0.0 });
                mask.push(if c { 1.0 } else { 0.0 });
            }
        }
        let (ctr, pgmv) = self.forward_graph(g, &batch)?;
        let ce = g.binary_cross_entropy(ctr, &clicks, PCTR_CLIP)?;
        if gmv_weight == 0.0 {
            return Ok(ce);
        }
        let se = g.masked_squared_error(pgmv, &gmv, &mask)?;
        let se = g.scale(se, gmv_weight)?;
        g.add(ce, se)
    }

    fn predict_ctr(&self, lists: &[&LabeledList]) -> Result<Vec<Vec<f64>>> {
        let mut batch = FeatureBatch::default();
        for l in lists {
            self.featurize_into(&mut batch, &l.request, &l.allocation)?;
        }
        Ok(self.predict_batch(&batch)?.into_iter().map(|p| p.pctr).collect())
    }
}

/// Fits the list-wise model on displayed lists and returns the checkpoint
/// with the lowest validation cross-entropy.
pub fn train_epm(
    data: &[LabeledList],
    model_config: EpmConfig,
    config: &EpmTrainConfig,
) -> Result<TrainedModel<EpmModel>> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let model = EpmModel::new(model_config, &mut rng)?;
    fit(model, data, config, &mut rng)
}

pub(crate) fn fit<M: ClickModel + Clone>(
    mut model: M,
    data: &[LabeledList],
    config: &EpmTrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<TrainedModel<M>> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if config.batch_size == 0 || !(0.0..1.0).contains(&config.valid_fraction) {
        return Err(Error::invalid(
            "batch_size must be positive and valid_fraction in [0, 1)",
        ));
    }
    for l in data {
        l.validate()?;
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(rng);
    let n_valid = ((data.len() as f64) * config.valid_fraction).round() as usize;
    let n_valid = n_valid.min(data.len() - 1);
    let valid: Vec<&LabeledList> = order[..n_valid].iter().map(|&i| &data[i]).collect();
    let mut train: Vec<usize> = order[n_valid..].to_vec();
    // without a holdout the training set doubles as the selection set
    let selection: Vec<&LabeledList> = if valid.is_empty() {
        train.iter().map(|&i| &data[i]).collect()
    } else {
        valid
    };

    let mut curve = Vec::with_capacity(config.epochs + 1);
    let first = evaluate(&model, &selection, None)?;
    let mut best = (first.valid_loss, 0, model.clone());
    curve.push(first);
    for epoch in 1..=config.epochs {
        train.shuffle(rng);
        let mut total = 0.0;
        for chunk in train.chunks(config.batch_size) {
            let lists: Vec<&LabeledList> = chunk.iter().map(|&i| &data[i]).collect();
            let mut g = Graph::new();
            let loss = model.batch_loss(&mut g, &lists, config.gmv_weight)?;
            total += g.value(loss).item()?;
            let mean = g.scale(loss, 1.0 / lists.len() as f64)?;
            g.backward(mean, model.store_mut())?;
            model.store_mut().optimizer_step(config.learning_rate)?;
        }
        let record = evaluate(&model, &selection, Some(total / train.len() as f64))?;
        record_epoch(&mut best, &record, epoch, &model);
        curve.push(EpochRecord { epoch, ..record });
    }
    Ok(TrainedModel {
        model: best.2,
        curve,
        best_epoch: best.1,
    })
}

fn record_epoch<M: Clone>(best: &mut (f64, usize, M), record: &EpochRecord, epoch: usize, model: &M) {
    if record.valid_loss < best.0 {
        *best = (record.valid_loss, epoch, model.clone());
    }
}

fn evaluate<M: ClickModel>(model: &M, lists: &[&LabeledList], train_loss: Option<f64>) -> Result<EpochRecord> {
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for chunk in lists.chunks(512) {
        for (ctr, l) in model.predict_ctr(chunk)?.into_iter().zip(chunk) {
            scores.extend(ctr);
            labels.extend(l.clicks.iter().copied());
        }
    }
    let ce: f64 = scores
        .iter()
        .zip(&labels)
        .map(|(&q, &y)| {
            let q = q.clamp(PCTR_CLIP, 1.0 - PCTR_CLIP);
            if y {
                -q.ln()
            } else {
                -(1.0 - q).ln()
            }
        })
        .sum();
    let observed: Vec<f64> = labels.iter().map(|&y| if y { 1.0 } else { 0.0 }).collect();
    Ok(EpochRecord {
        epoch: 0,
        train_loss,
        valid_loss: ce / lists.len() as f64,
        valid_auc: auc(&scores, &labels),
        valid_pcoc: pcoc(&scores, &observed),
    })
}

/// AUC and PCOC of a model's per-slot predictions on labelled lists.
pub(crate) fn score_lists<M: ClickModel>(model: &M, lists: &[LabeledList]) -> Result<(Option<f64>, Option<f64>)> {
    let refs: Vec<&LabeledList> = lists.iter().collect();
    let r = evaluate(model, &refs, None)?;
    Ok((r.valid_auc, r.valid_pcoc))
}

impl EpmModel {
    /// Slot-level AUC and PCOC on labelled lists.
    pub fn score(&self, lists: &[LabeledList]) -> Result<(Option<f64>, Option<f64>)> {
        score_lists(self, lists)
    }

    /// Summed training loss of `lists` and its gradient with respect to the
    /// flattened parameters.
    pub fn loss_and_gradient(&self, lists: &[&LabeledList], gmv_weight: f64) -> Result<(f64, Vec<f64>)> {
        let mut work = self.clone();
        work.params_mut().zero_grad();
        let mut g = Graph::new();
        let loss = work.batch_loss(&mut g, lists, gmv_weight)?;
        let value = g.value(loss).item()?;
        g.backward(loss, work.params_mut())?;
        Ok((value, work.params().flatten_grad()))
    }
}
