//! Softmax relaxation of winner selection and end-to-end training of the
//! mechanism networks against expected revenue plus weighted GMV.
//!
//! Every allocation is priced as if it had won (its ad pays against the same
//! counterfactual welfare the hard auction would use), clamped to `[0, b_i]`.
//! The loss is `-sum_k Pr_k (Rev_k + alpha Gmv_k)` with
//! `Pr = softmax(SW / tau)` per request.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aam::{
    bid_regret, counterfactual, lambda_graph, lambda_inputs, mu_graph, mu_inputs, score_request, settle,
    AuctionOptions, MechanismConfig, MechanismParams, WelfareScores, MIN_PRICE_NORMALIZER,
};
use crate::domain::{enumerate_allocations, Request};
use crate::epm::{EpmModel, PredictedRequest};
use crate::error::{Error, Result};
use crate::numerics::{softmax_slice, Graph, Tensor, Var};

/// A request with frozen list-wise predictions for all its allocations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub request: Request,
    pub predicted: PredictedRequest,
}

impl Sample {
    /// Enumerates and predicts every request in parallel, keeping input order.
    pub fn predict_all(epm: &EpmModel, requests: &[Request], options: &AuctionOptions) -> Result<Vec<Sample>> {
        requests
            .par_iter()
            .map(|r| {
                let allocations = enumerate_allocations(r, options.enumeration())?;
                Ok(Sample {
                    request: r.clone(),
                    predicted: epm.predict_request(r, allocations)?,
                })
            })
            .collect()
    }
}

/// `softmax(sw / tau)`.
pub fn winning_probs(sw: &[f64], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) {
        return Err(Error::invalid(format!("temperature must be positive, got {tau}")));
    }
    if sw.is_empty() {
        return Err(Error::NoCandidateAds);
    }
    Ok(softmax_slice(sw, tau))
}

/// Per-allocation (Rev, Gmv) with every allocation priced as the winner.
pub fn allocation_objectives(
    params: &MechanismParams,
    request: &Request,
    predicted: &PredictedRequest,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let scores = score_request(params, request, predicted)?;
    objectives_from_scores(&scores, &request.bids(), predicted, 0.0)
}

/// As [`allocation_objectives`] with prices clamped to `[-floor * b_i, b_i]`.
pub fn objectives_from_scores(
    scores: &WelfareScores,
    bids: &[f64],
    predicted: &PredictedRequest,
    floor: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let sw = scores.welfare_all(bids);
    let gmv = predicted.predictions.iter().map(|p| p.expected_gmv()).collect();
    let mut rev = vec![0.0; sw.len()];
    for (k, r) in rev.iter_mut().enumerate() {
        let Some(i) = scores.ad[k] else { continue };
        let (_, sw_cf) = counterfactual(scores, &sw, i)?;
        let norm = scores.mu[i - 1] * scores.ad_ctr[k];
        if norm < MIN_PRICE_NORMALIZER {
            continue;
        }
        let p = ((sw_cf - scores.lambda[k]) / norm).clamp(-floor * bids[i - 1], bids[i - 1]);
        *r = p * scores.ad_ctr[k];
    }
    Ok((rev, gmv))
}

/// `-sum_k Pr_k (Rev_k + alpha Gmv_k)`.
pub fn reward_loss(pr: &[f64], rev: &[f64], gmv: &[f64], alpha: f64) -> Result<f64> {
    if pr.len() != rev.len() || pr.len() != gmv.len() {
        return Err(Error::Shape {
            op: "reward_loss",
            left: vec![pr.len()],
            right: vec![rev.len(), gmv.len()],
        });
    }
    Ok(-pr
        .iter()
        .zip(rev.iter().zip(gmv))
        .map(|(p, (r, g))| p * (r + alpha * g))
        .sum::<f64>())
}

/// Mean relaxed loss over `samples` on the tape. Prices are clamped to
/// `[-floor * b_i, b_i]`.
pub fn batch_loss_graph(
    g: &mut Graph,
    params: &MechanismParams,
    samples: &[&Sample],
    tau: f64,
    floor: f64,
) -> Result<Var> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let alpha = params.alpha();
    let mut mu_x = Vec::new();
    let mut lam_x = Vec::new();
    let mut n_ads = 0;
    let mut n_allocs = 0;
    let mut segments = Vec::with_capacity(samples.len());
    // per allocation: mu row, b*q, q used in the price denominator, counterfactual row, price bounds, GMV
    let mut mu_row = Vec::new();
    let mut bq = Vec::new();
    let mut q_den = Vec::new();
    let mut cf_row = Vec::new();
    let mut lo = Vec::new();
    let mut hi = Vec::new();
    let mut q_rev = Vec::new();
    let mut gmv = Vec::new();
    for s in samples {
        let (r, pred) = (&s.request, &s.predicted);
        mu_x.extend(mu_inputs(params, r)?);
        lam_x.extend(lambda_inputs(params, r, pred)?);
        // counterfactual choice is made on forward values and then held fixed
        let scores = score_request(params, r, pred)?;
        let bids = r.bids();
        let sw = scores.welfare_all(&bids);
        for k in 0..pred.len() {
            gmv.push(pred.predictions[k].expected_gmv());
            match scores.ad[k] {
                Some(i) => {
                    let q = scores.ad_ctr[k];
                    let (cf, _) = counterfactual(&scores, &sw, i)?;
                    mu_row.push(n_ads + i - 1);
                    bq.push(bids[i - 1] * q);
                    cf_row.push(n_allocs + cf);
                    q_rev.push(q);
                    if scores.mu[i - 1] * q < MIN_PRICE_NORMALIZER {
                        q_den.push(1.0);
                        lo.push(0.0);
                        hi.push(0.0);
                    } else {
                        q_den.push(q);
                        lo.push(-floor * bids[i - 1]);
                        hi.push(bids[i - 1]);
                    }
                }
                None => {
                    mu_row.push(n_ads);
                    bq.push(0.0);
                    cf_row.push(n_allocs + k);
                    q_den.push(1.0);
                    q_rev.push(0.0);
                    lo.push(0.0);
                    hi.push(0.0);
                }
            }
        }
        n_ads += r.num_ads();
        n_allocs += pred.len();
        segments.push(pred.len());
    }
    let col = |v: Vec<f64>| Tensor::matrix(v.len(), 1, v);
    let mu = mu_graph(g, params, mu_x, n_ads)?;
    let lambda = lambda_graph(g, params, lam_x, n_allocs)?;
    let mu_k = g.gather_rows(mu, &mu_row)?;
    let bq = g.constant(col(bq)?);
    let weighted = g.mul(mu_k, bq)?;
    let sw = g.add(weighted, lambda)?;
    let pr = g.segment_softmax(sw, &segments, tau)?;

    let sw_cf = g.gather_rows(sw, &cf_row)?;
    let num = g.sub(sw_cf, lambda)?;
    let q_den = g.constant(col(q_den)?);
    let den = g.mul(mu_k, q_den)?;
    let price = g.div(num, den)?;
    let price = g.clamp(price, &lo, &hi)?;
    let q_rev = g.constant(col(q_rev)?);
    let rev = g.mul(price, q_rev)?;
    let gmv = g.constant(col(gmv)?);
    let gmv = g.scale(gmv, alpha)?;
    let objective = g.add(rev, gmv)?;
    let weighted = g.mul(pr, objective)?;
    let total = g.sum(weighted)?;
    g.scale(total, -1.0 / samples.len() as f64)
}

/// Relaxed loss and its gradient with respect to the flattened mechanism parameters.
pub fn loss_and_gradient(
    params: &MechanismParams,
    samples: &[&Sample],
    tau: f64,
    floor: f64,
) -> Result<(f64, Vec<f64>)> {
    let mut work = params.clone();
    work.store_mut().zero_grad();
    let mut g = Graph::new();
    let loss = batch_loss_graph(&mut g, &work, samples, tau, floor)?;
    let value = g.value(loss).item()?;
    g.backward(loss, work.store_mut())?;
    Ok((value, work.store().flatten_grad()))
}

/// Hard-argmax evaluation of a mechanism on predicted samples.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct HardEval {
    /// Mean expected revenue per request.
    pub rev: f64,
    /// Mean expected GMV per request.
    pub gmv: f64,
    pub objective: f64,
    pub negative_payment_rate: f64,
}

pub fn evaluate_hard(params: &MechanismParams, samples: &[Sample], options: &AuctionOptions) -> Result<HardEval> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let per: Vec<(f64, f64, bool)> = samples
        .par_iter()
        .map(|s| {
            let scores = score_request(params, &s.request, &s.predicted)?;
            let st = settle(&scores, &s.request.bids(), options)?;
            let k = st.allocation_index;
            let gmv = s.predicted.predictions[k].expected_gmv();
            Ok(match st.winner {
                Some((_, p, _)) => (p * scores.ad_ctr[k], gmv, p < 0.0),
                None => (0.0, gmv, false),
            })
        })
        .collect::<Result<_>>()?;
    let n = samples.len() as f64;
    let rev = per.iter().map(|x| x.0).sum::<f64>() / n;
    let gmv = per.iter().map(|x| x.1).sum::<f64>() / n;
    Ok(HardEval {
        rev,
        gmv,
        objective: rev + params.alpha() * gmv,
        negative_payment_rate: per.iter().filter(|x| x.2).count() as f64 / n,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DsmConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub tau_start: f64,
    pub tau_end: f64,
    /// Training prices are clamped below at `-payment_floor * b_i`.
    pub payment_floor: f64,
    pub valid_fraction: f64,
    pub seed: u64,
    /// Validation requests used for the per-epoch regret spot check.
    pub ic_spot_requests: usize,
    pub ic_grid_points: usize,
}

impl Default for DsmConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 64,
            learning_rate: 3e-3,
            // welfare values are of order b * q ~ 0.05, so the temperature is too
            tau_start: 0.03,
            tau_end: 0.003,
            payment_floor: 0.0,
            valid_fraction: 0.2,
            seed: 13,
            ic_spot_requests: 50,
            ic_grid_points: 20,
        }
    }
}

impl DsmConfig {
    /// Geometric schedule from `tau_start` (epoch 1) to `tau_end` (last epoch).
    pub fn tau(&self, epoch: usize) -> f64 {
        if self.epochs <= 1 || epoch <= 1 {
            return self.tau_start;
        }
        let t = (epoch - 1) as f64 / (self.epochs - 1) as f64;
        self.tau_start * (self.tau_end / self.tau_start).powf(t.min(1.0))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DsmEpoch {
    pub epoch: usize,
    pub tau: f64,
    /// Mean relaxed training loss; empty before the first epoch.
    pub loss: Option<f64>,
    pub rev: f64,
    pub gmv: f64,
    pub objective: f64,
    /// Largest bid regret over the spot-check requests.
    pub ic_regret: f64,
    pub negative_payment_rate: f64,
}

#[derive(Clone, Debug)]
pub struct TrainedMechanism {
    pub params: MechanismParams,
    pub curve: Vec<DsmEpoch>,
    pub best_epoch: usize,
}

impl TrainedMechanism {
    pub fn write_curve_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.curve {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn spot_regret(params: &MechanismParams, samples: &[Sample], cfg: &DsmConfig, options: &AuctionOptions) -> Result<f64> {
    let regrets: Vec<f64> = samples
        .par_iter()
        .take(cfg.ic_spot_requests)
        .map(|s| {
            let scores = score_request(params, &s.request, &s.predicted)?;
            let bids = s.request.bids();
            let mut worst: f64 = 0.0;
            for (i, ad) in s.request.ads.iter().enumerate() {
                let value = ad.true_value.unwrap_or(ad.bid);
                let r = bid_regret(&scores, &bids, i + 1, value, options, cfg.ic_grid_points)?;
                worst = worst.max(r.regret);
            }
            Ok(worst)
        })
        .collect::<Result<_>>()?;
    Ok(regrets.into_iter().fold(0.0, f64::max))
}

/// Trains the mechanism networks on frozen predictions and returns the
/// checkpoint with the best hard-argmax validation objective.
pub fn train_mechanism(
    samples: &[Sample],
    mechanism: MechanismConfig,
    alpha: f64,
    config: &DsmConfig,
    options: &AuctionOptions,
) -> Result<TrainedMechanism> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = MechanismParams::new(mechanism, alpha, &mut rng)?;
    // start from a welfare-maximizing (VCG-like) allocation rule
    params.zero_lambda_output()?;
    train_from(params, samples, config, options, &mut rng)
}

pub fn train_from(
    mut params: MechanismParams,
    samples: &[Sample],
    config: &DsmConfig,
    options: &AuctionOptions,
    rng: &mut ChaCha8Rng,
) -> Result<TrainedMechanism> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if config.batch_size == 0 || !(config.tau_start > 0.0 && config.tau_end > 0.0) {
        return Err(Error::invalid("batch_size and temperatures must be positive"));
    }
    if !(0.0..1.0).contains(&config.valid_fraction) {
        return Err(Error::invalid("valid_fraction must lie in [0, 1)"));
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(rng);
    let n_valid = (((samples.len() as f64) * config.valid_fraction).round() as usize).min(samples.len() - 1);
    let valid: Vec<Sample> = if n_valid == 0 {
        samples.to_vec()
    } else {
        order[..n_valid].iter().map(|&i| samples[i].clone()).collect()
    };
    let mut train: Vec<usize> = order[n_valid..].to_vec();

    let record = |params: &MechanismParams, epoch: usize, tau: f64, loss: Option<f64>| -> Result<DsmEpoch> {
        let hard = evaluate_hard(params, &valid, options)?;
        Ok(DsmEpoch {
            epoch,
            tau,
            loss,
            rev: hard.rev,
            gmv: hard.gmv,
            objective: hard.objective,
            ic_regret: spot_regret(params, &valid, config, options)?,
            negative_payment_rate: hard.negative_payment_rate,
        })
    };

    let first = record(&params, 0, config.tau(1), None)?;
    let mut best = (first.objective, 0, params.clone());
    let mut curve = vec![first];
    for epoch in 1..=config.epochs {
        let tau = config.tau(epoch);
        train.shuffle(rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in train.chunks(config.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &samples[i]).collect();
            let mut g = Graph::new();
            let loss = batch_loss_graph(&mut g, &params, &batch, tau, config.payment_floor)?;
            total += g.value(loss).item()?;
            batches += 1;
            g.backward(loss, params.store_mut())?;
            params.store_mut().optimizer_step(config.learning_rate)?;
        }
        let row = record(&params, epoch, tau, Some(total / batches.max(1) as f64))?;
        if row.objective > best.0 {
            best = (row.objective, epoch, params.clone());
        }
        curve.push(row);
    }
    Ok(TrainedMechanism {
        params: best.2,
        curve,
        best_epoch: best.1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aam::tests::{config, random_instance};
    use crate::aam::{run_auction, AuctionOptions};
    use crate::domain::{fixtures, Allocation, EnumerationOptions};
    use crate::epm::EpmPrediction;
    use crate::numerics::graph::tests::relative_error;
    use rand::Rng;

    fn sample(seed: u64, n: usize, m: usize) -> Sample {
        let (request, predicted, _) = random_instance(seed, n, m, false);
        Sample { request, predicted }
    }

    #[test]
    fn winning_prob_examples() {
        let p = winning_probs(&[1.0, 2.0, 3.0], 1.0).unwrap();
        assert!((p[0] - 0.0900).abs() < 1e-4 && (p[1] - 0.2447).abs() < 1e-4 && (p[2] - 0.6652).abs() < 1e-4);
        assert_eq!(winning_probs(&[0.3; 4], 0.5).unwrap(), vec![0.25; 4]);
        assert!(winning_probs(&[1.0, 2.0, 3.0], 0.001).unwrap()[2] >= 0.999);
        assert!(winning_probs(&[1.0], 0.0).is_err());
        assert!(winning_probs(&[1.0], -1.0).is_err());
    }

    #[test]
    fn soft_welfare_approaches_hard_max() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let sw: Vec<f64> = (0..8).map(|_| rng.random_range(-2.0..2.0)).collect();
            let max = sw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let pr = winning_probs(&sw, 1e-3).unwrap();
            let soft: f64 = pr.iter().zip(&sw).map(|(p, s)| p * s).sum();
            // entries drawn from a continuum are distinct; skip near-ties explicitly
            let second = sw
                .iter()
                .cloned()
                .filter(|&v| v < max)
                .fold(f64::NEG_INFINITY, f64::max);
            if max - second < 0.05 {
                continue;
            }
            assert!((max - soft).abs() <= 1e-6 * max.abs().max(1.0));
        }
    }

    #[test]
    fn reward_loss_examples() {
        assert_eq!(reward_loss(&[0.5, 0.5], &[1.0, 0.0], &[0.0, 2.0], 0.5).unwrap(), -1.0);
        assert_eq!(reward_loss(&[0.0, 1.0], &[1.0, 3.0], &[0.0, 2.0], 0.5).unwrap(), -4.0);
        assert_eq!(reward_loss(&[0.0, 1.0], &[1.0, 3.0], &[0.0, 2.0], 0.0).unwrap(), -3.0);
        assert!(reward_loss(&[1.0], &[1.0, 2.0], &[0.0], 0.0).is_err());
    }

    #[test]
    fn zero_gmv_gives_zero_vector() {
        let mut s = sample(2, 3, 3);
        for p in &mut s.predicted.predictions {
            p.pgmv_per_click.iter_mut().for_each(|g| *g = 0.0);
        }
        let p = MechanismParams::new(config(3), 0.5, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let (_, gmv) = allocation_objectives(&p, &s.request, &s.predicted).unwrap();
        assert!(gmv.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn hand_built_objectives_match_spreadsheet() {
        let mut request = fixtures::request(2, 2);
        request.ads[0].bid = 1.0;
        request.ads[1].bid = 0.9;
        let allocations = enumerate_allocations(&request, EnumerationOptions::default()).unwrap();
        let q = [[0.30, 0.10], [0.05, 0.20], [0.25, 0.12], [0.08, 0.18]];
        let g = [[3.0, 4.0], [4.0, 3.0], [3.0, 4.0], [4.0, 3.0]];
        let predictions: Vec<EpmPrediction> = q
            .iter()
            .zip(&g)
            .map(|(q, g)| EpmPrediction {
                pctr: q.to_vec(),
                pgmv_per_click: g.to_vec(),
            })
            .collect();
        let pred = PredictedRequest::new(allocations, predictions).unwrap();
        let mu = vec![0.7, 0.9];
        let lambda = vec![0.05, 0.20, -0.10, 0.15];
        let scores = WelfareScores::forced(mu.clone(), lambda.clone(), &pred);
        let (rev, gmv) = objectives_from_scores(&scores, &request.bids(), &pred, 0.0).unwrap();

        let ad = [1usize, 1, 2, 2];
        let q_ad = [0.30, 0.20, 0.25, 0.18];
        let bids = [1.0, 0.9];
        let sw: Vec<f64> = (0..4)
            .map(|k| mu[ad[k] - 1] * bids[ad[k] - 1] * q_ad[k] + lambda[k])
            .collect();
        for k in 0..4 {
            let cf = (0..4)
                .filter(|&c| ad[c] != ad[k])
                .map(|c| sw[c])
                .fold(f64::MIN, f64::max);
            let p = ((cf - lambda[k]) / (mu[ad[k] - 1] * q_ad[k]))
                .max(0.0)
                .min(bids[ad[k] - 1]);
            assert!((rev[k] - p * q_ad[k]).abs() < 1e-12, "rev {k}");
            let expect_gmv = q[k][0] * g[k][0] + q[k][1] * g[k][1];
            assert!((gmv[k] - expect_gmv).abs() < 1e-12, "gmv {k}");
        }
        // a(2,1) would pay above its bid without the clamp
        assert!((rev[2] - 0.9 * 0.25).abs() < 1e-12);
    }

    #[test]
    fn winner_revenue_matches_hard_auction() {
        for seed in 0..50 {
            let (r, pred, p) = random_instance(seed, 3, 4, false);
            let out = run_auction(&p, &r, &pred, &AuctionOptions::default()).unwrap();
            let (rev, _) = allocation_objectives(&p, &r, &pred).unwrap();
            let w = out.winner.unwrap();
            if w.payment_per_click >= 0.0 {
                assert_eq!(rev[out.allocation_index], w.payment_per_click * w.pctr);
            }
        }
    }

    #[test]
    fn soft_and_hard_agree_on_the_winner() {
        for seed in 0..50 {
            let (r, pred, p) = random_instance(seed, 3, 3, false);
            let scores = score_request(&p, &r, &pred).unwrap();
            let sw = scores.welfare_all(&r.bids());
            let pr = winning_probs(&sw, 0.3).unwrap();
            let soft = (0..pr.len()).fold(0, |b, k| if pr[k] > pr[b] { k } else { b });
            let hard = settle(&scores, &r.bids(), &AuctionOptions::default())
                .unwrap()
                .allocation_index;
            let sw_arg = (0..sw.len()).fold(0, |b, k| if sw[k] > sw[b] { k } else { b });
            if soft == sw_arg {
                assert_eq!(soft, hard);
            }
        }
    }

    #[test]
    fn tape_loss_matches_plain_evaluation() {
        let samples: Vec<Sample> = (0..4).map(|s| sample(10 + s, 2 + s as usize % 3, 3)).collect();
        let refs: Vec<&Sample> = samples.iter().collect();
        let p = MechanismParams::new(config(3), 0.5, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let tau = 0.7;
        let mut plain = 0.0;
        for s in &samples {
            let scores = score_request(&p, &s.request, &s.predicted).unwrap();
            let sw = scores.welfare_all(&s.request.bids());
            let pr = winning_probs(&sw, tau).unwrap();
            let (rev, gmv) = allocation_objectives(&p, &s.request, &s.predicted).unwrap();
            plain += reward_loss(&pr, &rev, &gmv, 0.5).unwrap();
        }
        plain /= samples.len() as f64;
        let (loss, _) = loss_and_gradient(&p, &refs, tau, 0.0).unwrap();
        assert!((loss - plain).abs() < 1e-12, "{loss} vs {plain}");
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let samples: Vec<Sample> = (0..3).map(|s| sample(20 + s, 2, 2)).collect();
        let refs: Vec<&Sample> = samples.iter().collect();
        let mut p = MechanismParams::new(config(2), 0.5, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let (_, grad) = loss_and_gradient(&p, &refs, 0.5, 1.0).unwrap();
        let theta = p.store().flatten();
        let h = 1e-5;
        let mut numeric = vec![0.0; theta.len()];
        for k in 0..theta.len() {
            let mut t = theta.clone();
            t[k] += h;
            p.store_mut().assign_flat(&t).unwrap();
            let up = loss_and_gradient(&p, &refs, 0.5, 1.0).unwrap().0;
            t[k] -= 2.0 * h;
            p.store_mut().assign_flat(&t).unwrap();
            let down = loss_and_gradient(&p, &refs, 0.5, 1.0).unwrap().0;
            numeric[k] = (up - down) / (2.0 * h);
        }
        assert!(relative_error(&grad, &numeric) < 1e-3);
    }

    #[test]
    fn tau_schedule_is_geometric() {
        let c = DsmConfig {
            epochs: 3,
            tau_start: 1.0,
            tau_end: 0.1,
            ..DsmConfig::default()
        };
        assert_eq!(c.tau(1), 1.0);
        assert!((c.tau(2) - 0.1f64.sqrt()).abs() < 1e-12);
        assert!((c.tau(3) - 0.1).abs() < 1e-12);
    }

    /// Ad 1 has the highest bid, CTR and GMV at every position.
    fn dominance_samples(count: usize, seed: u64) -> Vec<Sample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|k| {
                let mut request = fixtures::request(3, 3);
                request.request_id = format!("d{k}");
                request.ads[0].bid = rng.random_range(1.5..2.0);
                request.ads[1].bid = rng.random_range(0.3..1.0);
                request.ads[2].bid = rng.random_range(0.3..1.0);
                for (i, ad) in request.ads.iter_mut().enumerate() {
                    ad.value_dist_features = vec![ad.bid, 0.1];
                    ad.gmv_per_click = if i == 0 { 5.0 } else { 2.0 };
                }
                let allocations = enumerate_allocations(&request, EnumerationOptions::default()).unwrap();
                let predictions = allocations
                    .iter()
                    .map(|a: &Allocation| {
                        let strong = a.ad_index() == Some(1);
                        let pctr: Vec<f64> = (0..3)
                            .map(|j| {
                                if Some(j) == a.ad_slot() {
                                    if strong {
                                        0.3
                                    } else {
                                        0.1
                                    }
                                } else {
                                    0.1
                                }
                            })
                            .collect();
                        let pgmv_per_click = (0..3)
                            .map(|j| {
                                if Some(j) == a.ad_slot() {
                                    if strong {
                                        5.0
                                    } else {
                                        2.0
                                    }
                                } else {
                                    4.0
                                }
                            })
                            .collect();
                        EpmPrediction { pctr, pgmv_per_click }
                    })
                    .collect();
                Sample {
                    request,
                    predicted: PredictedRequest::new(allocations, predictions).unwrap(),
                }
            })
            .collect()
    }

    #[test]
    fn dominant_ad_is_selected() {
        let data = dominance_samples(300, 5);
        let cfg = DsmConfig {
            epochs: 4,
            ic_spot_requests: 5,
            ..DsmConfig::default()
        };
        let t = train_mechanism(&data, config(3), 0.5, &cfg, &AuctionOptions::default()).unwrap();
        let wins = data
            .iter()
            .filter(|s| {
                let out = run_auction(&t.params, &s.request, &s.predicted, &AuctionOptions::default()).unwrap();
                out.winner.is_some_and(|w| w.ad_index == 1)
            })
            .count();
        assert!(wins as f64 / data.len() as f64 >= 0.99);
        // the selected checkpoint is the best one recorded
        let best = t.curve.iter().map(|r| r.objective).fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(t.curve[t.best_epoch].objective, best);
        assert!(t.curve.iter().all(|r| r.ic_regret <= 1e-9));
    }

    #[test]
    fn training_is_deterministic() {
        let data = dominance_samples(60, 6);
        let cfg = DsmConfig {
            epochs: 2,
            ic_spot_requests: 3,
            ..DsmConfig::default()
        };
        let a = train_mechanism(&data, config(3), 0.5, &cfg, &AuctionOptions::default()).unwrap();
        let b = train_mechanism(&data, config(3), 0.5, &cfg, &AuctionOptions::default()).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.curve, b.curve);
        let mut out = Vec::new();
        a.write_curve_csv(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert!(text.starts_with("epoch,tau,loss,rev,gmv,objective,ic_regret,negative_payment_rate\n"));
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let cfg = DsmConfig::default();
        assert!(matches!(
            train_mechanism(&[], config(3), 0.5, &cfg, &AuctionOptions::default()),
            Err(Error::EmptyDataset)
        ));
    }
}
