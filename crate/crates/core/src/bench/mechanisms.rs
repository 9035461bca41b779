use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::aam::{score_request, settle, AuctionOptions, AuctionOutcome, MechanismParams, WelfareScores, WinnerInfo};
use crate::domain::{Request, Slot};
use crate::epm::{pointwise_forward, PointwiseModel, PredictedRequest};
use crate::error::{Error, Result};

/// An allocation rule plus payment rule.
///
/// `prepare` does all bid-free work once per request so that audits can
/// rerun the auction under many bid vectors cheaply.
pub trait Mechanism: Send + Sync {
    fn name(&self) -> &str;

    fn prepare<'a>(
        &'a self,
        request: &'a Request,
        predicted: &'a PredictedRequest,
    ) -> Result<Box<dyn PreparedAuction + 'a>>;
}

pub trait PreparedAuction: Send + Sync {
    /// Runs the auction with `bids` in place of the request's own bids.
    fn run(&self, bids: &[f64]) -> Result<AuctionOutcome>;
}

/// Learned affine maximizer.
#[derive(Clone, Debug)]
pub struct Miaa {
    pub params: MechanismParams,
    pub options: AuctionOptions,
}

/// Affine maximizer with `mu = 1`, `lambda = 0`.
#[derive(Clone, Copy, Debug, Default)]
pub struct Vcg {
    pub options: AuctionOptions,
}

struct ScoredAuction<'a> {
    request: &'a Request,
    predicted: &'a PredictedRequest,
    scores: WelfareScores,
    options: AuctionOptions,
}

impl PreparedAuction for ScoredAuction<'_> {
    fn run(&self, bids: &[f64]) -> Result<AuctionOutcome> {
        let s = settle(&self.scores, bids, &self.options)?;
        Ok(AuctionOutcome::from_settlement(self.request, self.predicted, bids, &s))
    }
}

impl Mechanism for Miaa {
    fn name(&self) -> &str {
        "miaa"
    }

    fn prepare<'a>(
        &'a self,
        request: &'a Request,
        predicted: &'a PredictedRequest,
    ) -> Result<Box<dyn PreparedAuction + 'a>> {
        Ok(Box::new(ScoredAuction {
            request,
            predicted,
            scores: score_request(&self.params, request, predicted)?,
            options: self.options,
        }))
    }
}

impl Mechanism for Vcg {
    fn name(&self) -> &str {
        "vcg"
    }

    fn prepare<'a>(
        &'a self,
        request: &'a Request,
        predicted: &'a PredictedRequest,
    ) -> Result<Box<dyn PreparedAuction + 'a>> {
        Ok(Box::new(ScoredAuction {
            request,
            predicted,
            scores: WelfareScores::vcg(request.num_ads(), predicted),
            options: self.options,
        }))
    }
}

/// Point-wise ranking shared by both GSP variants.
#[derive(Clone, Debug)]
pub struct GspRanking {
    pub pointwise: Arc<PointwiseModel>,
    /// 1-based position at which ads are scored (and shown, for the fixed variant).
    pub position: usize,
}

/// `(winner, payment per click)` from eCPM ranking. The payment is the
/// runner-up's eCPM over the winner's pCTR, capped at the winner's bid, and 0
/// without a runner-up.
pub fn gsp_rank(bids: &[f64], pctr: &[f64]) -> Result<(usize, f64)> {
    if bids.is_empty() || bids.len() != pctr.len() {
        return Err(Error::NoCandidateAds);
    }
    let ecpm: Vec<f64> = bids.iter().zip(pctr).map(|(b, q)| b * q).collect();
    let mut w = 0;
    for k in 1..ecpm.len() {
        if ecpm[k] > ecpm[w] {
            w = k;
        }
    }
    let second = (0..ecpm.len())
        .filter(|&k| k != w)
        .map(|k| ecpm[k])
        .fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.max(v))));
    let payment = match second {
        Some(s) => (s / pctr[w]).min(bids[w]),
        None => 0.0,
    };
    Ok((w + 1, payment))
}

impl GspRanking {
    fn position_for(&self, request: &Request) -> usize {
        self.position.clamp(1, request.list_len())
    }

    fn scores(&self, request: &Request) -> Result<Vec<f64>> {
        let pos = self.position_for(request);
        (1..=request.num_ads())
            .map(|i| pointwise_forward(&self.pointwise, request, Slot::Ad(i), pos))
            .collect()
    }
}

fn gsp_outcome(
    request: &Request,
    predicted: &PredictedRequest,
    bids: &[f64],
    ad_index: usize,
    position: usize,
    payment: f64,
) -> Result<AuctionOutcome> {
    let k = predicted
        .index_of(ad_index, position)
        .ok_or_else(|| Error::invalid(format!("allocation a({ad_index},{position}) was not enumerated")))?;
    Ok(AuctionOutcome {
        request_id: request.request_id.clone(),
        allocation_index: k,
        allocation: predicted.allocations[k].clone(),
        winner: Some(WinnerInfo {
            ad_index,
            ad_id: request.ads[ad_index - 1].ad_id.clone(),
            position,
            bid: bids[ad_index - 1],
            payment_per_click: payment,
            pctr: predicted.ad_ctr(k),
            sw_ledger: None,
        }),
    })
}

/// GSP winner shown at a fixed position.
#[derive(Clone, Debug)]
pub struct GspFixed {
    pub ranking: GspRanking,
}

struct PreparedGsp<'a> {
    request: &'a Request,
    predicted: &'a PredictedRequest,
    pctr: Vec<f64>,
    position: usize,
}

impl PreparedAuction for PreparedGsp<'_> {
    fn run(&self, bids: &[f64]) -> Result<AuctionOutcome> {
        let (w, p) = gsp_rank(bids, &self.pctr)?;
        gsp_outcome(self.request, self.predicted, bids, w, self.position, p)
    }
}

impl Mechanism for GspFixed {
    fn name(&self) -> &str {
        "gsp_fixed"
    }

    fn prepare<'a>(
        &'a self,
        request: &'a Request,
        predicted: &'a PredictedRequest,
    ) -> Result<Box<dyn PreparedAuction + 'a>> {
        Ok(Box::new(PreparedGsp {
            request,
            predicted,
            pctr: self.ranking.scores(request)?,
            position: self.ranking.position_for(request),
        }))
    }
}

/// What the dynamic positioner trades off against GMV.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionRule {
    /// `payment * q + alpha * Gmv`: the position ignores the winner's bid.
    #[default]
    Payment,
    /// `bid * q + alpha * Gmv`: a bid-aware positioner, which rewards overbidding.
    Bid,
}

/// GSP winner and price, then a greedy choice of position on list-wise predictions.
#[derive(Clone, Debug)]
pub struct GspDynamic {
    pub ranking: GspRanking,
    pub alpha: f64,
    pub rule: PositionRule,
}

struct PreparedDynamic<'a> {
    inner: PreparedGsp<'a>,
    alpha: f64,
    rule: PositionRule,
}

/// Best position (1-based) for `ad_index`: first index wins ties.
pub fn best_position(predicted: &PredictedRequest, ad_index: usize, per_click: f64, alpha: f64) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (k, a) in predicted.allocations.iter().enumerate() {
        if a.ad_index() != Some(ad_index) {
            continue;
        }
        let value = per_click * predicted.ad_ctr(k) + alpha * predicted.predictions[k].expected_gmv();
        let j = a.ad_position().expect("ad allocation");
        if best.is_none_or(|(bj, bv)| value > bv || (value == bv && j < bj)) {
            best = Some((j, value));
        }
    }
    best.map(|b| b.0)
}

impl PreparedAuction for PreparedDynamic<'_> {
    fn run(&self, bids: &[f64]) -> Result<AuctionOutcome> {
        let (w, p) = gsp_rank(bids, &self.inner.pctr)?;
        let per_click = match self.rule {
            PositionRule::Payment => p,
            PositionRule::Bid => bids[w - 1],
        };
        let j = best_position(self.inner.predicted, w, per_click, self.alpha)
            .ok_or_else(|| Error::invalid(format!("no allocation holds ad {w}")))?;
        gsp_outcome(self.inner.request, self.inner.predicted, bids, w, j, p)
    }
}

impl Mechanism for GspDynamic {
    fn name(&self) -> &str {
        match self.rule {
            PositionRule::Payment => "gsp_dynamic",
            PositionRule::Bid => "gsp_dynamic_bid",
        }
    }

    fn prepare<'a>(
        &'a self,
        request: &'a Request,
        predicted: &'a PredictedRequest,
    ) -> Result<Box<dyn PreparedAuction + 'a>> {
        Ok(Box::new(PreparedDynamic {
            inner: PreparedGsp {
                request,
                predicted,
                pctr: self.ranking.scores(request)?,
                position: self.ranking.position_for(request),
            },
            alpha: self.alpha,
            rule: self.rule,
        }))
    }
}

/// Convenience: run a mechanism once at the request's reported bids.
pub fn run_once(mechanism: &dyn Mechanism, request: &Request, predicted: &PredictedRequest) -> Result<AuctionOutcome> {
    mechanism.prepare(request, predicted)?.run(&request.bids())
}
