//! Learned affine maximizer auction.
//!
//! Each allocation `a` gets a welfare score
//! `SW(a) = mu_i * (b_i * q_i(a)) + lambda(a)`, where `i` is the ad in `a`,
//! `mu_i in (0, 1)` depends only on the ad and the context, and `lambda(a)`
//! depends on the whole list and its predictions. Neither network sees a bid.
//! The highest-scoring allocation wins and the ad pays
//! `(SW(best allocation without i) - lambda(a*)) / (mu_i * q_i(a*))` per click.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::domain::{Allocation, EnumerationOptions, Request, Slot};
use crate::epm::{EpmPrediction, PredictedRequest};
use crate::error::{Error, Result};
use crate::numerics::checkpoint::take_group;
use crate::numerics::{read_checkpoint, sigmoid, write_checkpoint, Graph, Mlp, ParameterStore, Tensor, Var};

/// Smallest accepted price normalizer `mu_i * q_i`.
pub const MIN_PRICE_NORMALIZER: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MechanismConfig {
    pub list_len: usize,
    /// Width of `AdCandidate::value_dist_features`.
    pub value_dim: usize,
    pub user_dim: usize,
    pub request_dim: usize,
    pub mu_hidden: Vec<usize>,
    pub lambda_hidden: Vec<usize>,
}

impl Default for MechanismConfig {
    fn default() -> Self {
        Self {
            list_len: 4,
            value_dim: 2,
            user_dim: 4,
            request_dim: 4,
            mu_hidden: vec![16],
            lambda_hidden: vec![32, 16],
        }
    }
}

impl MechanismConfig {
    /// Width of the ad vector `x_i`: value features plus GMV per click.
    pub fn ad_width(&self) -> usize {
        self.value_dim + 1
    }

    fn context_width(&self) -> usize {
        self.user_dim + self.request_dim
    }

    pub fn mu_input_width(&self) -> usize {
        self.ad_width() + self.context_width()
    }

    /// Slot vector `o_j = x_j | q_j | g_j`, repeated `m` times, then context.
    pub fn lambda_input_width(&self) -> usize {
        self.list_len * (self.ad_width() + 2) + self.context_width()
    }

    pub(crate) fn mu_mlp(&self) -> Mlp {
        let mut dims = vec![self.mu_input_width()];
        dims.extend(&self.mu_hidden);
        dims.push(1);
        Mlp::new("mu", &dims)
    }

    pub(crate) fn lambda_mlp(&self) -> Mlp {
        let mut dims = vec![self.lambda_input_width()];
        dims.extend(&self.lambda_hidden);
        dims.push(1);
        Mlp::new("lambda", &dims)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MechanismParams {
    config: MechanismConfig,
    /// Both networks, prefixed `mu.` and `lambda.`.
    store: ParameterStore,
    alpha: f64,
}

impl MechanismParams {
    pub fn new<R: Rng + ?Sized>(config: MechanismConfig, alpha: f64, rng: &mut R) -> Result<Self> {
        check_alpha(alpha)?;
        let mut store = ParameterStore::new();
        config.mu_mlp().init(&mut store, rng)?;
        config.lambda_mlp().init(&mut store, rng)?;
        Ok(Self { config, store, alpha })
    }

    /// All weights zero: `mu = 0.5` for every ad and `lambda = 0`.
    pub fn zeroed(config: MechanismConfig, alpha: f64) -> Result<Self> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut p = Self::new(config, alpha, &mut rng)?;
        p.config.mu_mlp().zero(&mut p.store)?;
        p.config.lambda_mlp().zero(&mut p.store)?;
        Ok(p)
    }

    /// Makes `lambda` identically zero while keeping its hidden layers random.
    pub fn zero_lambda_output(&mut self) -> Result<()> {
        self.config.lambda_mlp().zero_output(&mut self.store)
    }

    pub fn config(&self) -> &MechanismConfig {
        &self.config
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn set_alpha(&mut self, alpha: f64) -> Result<()> {
        check_alpha(alpha)?;
        self.alpha = alpha;
        Ok(())
    }

    pub fn store(&self) -> &ParameterStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParameterStore {
        &mut self.store
    }

    pub fn save<W: Write>(&self, out: W) -> Result<()> {
        let meta = serde_json::json!({ "config": self.config, "alpha": self.alpha });
        write_checkpoint(out, "mechanism", meta, &[("mechanism", &self.store)])
    }

    pub fn load<R: Read>(input: R) -> Result<Self> {
        let (header, mut groups) = read_checkpoint(input)?;
        if header.kind != "mechanism" {
            return Err(Error::Checkpoint(format!(
                "expected a mechanism checkpoint, found `{}`",
                header.kind
            )));
        }
        #[derive(Deserialize)]
        struct Meta {
            config: MechanismConfig,
            alpha: f64,
        }
        let meta: Meta = serde_json::from_value(header.meta)?;
        check_alpha(meta.alpha)?;
        Ok(Self {
            config: meta.config,
            store: take_group(&mut groups, "mechanism")?,
            alpha: meta.alpha,
        })
    }

    fn check_request(&self, request: &Request) -> Result<()> {
        let cfg = &self.config;
        if request.user_features.len() != cfg.user_dim || request.request_features.len() != cfg.request_dim {
            return Err(Error::invalid(format!(
                "request {}: context widths do not match the mechanism",
                request.request_id
            )));
        }
        if let Some(ad) = request
            .ads
            .iter()
            .find(|a| a.value_dist_features.len() != cfg.value_dim)
        {
            return Err(Error::invalid(format!(
                "ad {}: expected {} value features, got {}",
                ad.ad_id,
                cfg.value_dim,
                ad.value_dist_features.len()
            )));
        }
        Ok(())
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha >= 0.0 && alpha.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "alpha must be a finite non-negative number, got {alpha}"
        )))
    }
}

/// Ad vector `x_i`.
fn ad_vector(request: &Request, ad_index: usize) -> impl Iterator<Item = f64> + '_ {
    let ad = &request.ads[ad_index - 1];
    ad.value_dist_features
        .iter()
        .copied()
        .chain(std::iter::once(ad.gmv_per_click))
}

fn context(request: &Request) -> impl Iterator<Item = f64> + '_ {
    request.user_features.iter().chain(&request.request_features).copied()
}

/// Row-major `n x mu_input_width` matrix of `x_i | z^u | z^r`.
pub fn mu_inputs(params: &MechanismParams, request: &Request) -> Result<Vec<f64>> {
    params.check_request(request)?;
    let mut out = Vec::with_capacity(request.num_ads() * params.config.mu_input_width());
    for i in 1..=request.num_ads() {
        out.extend(ad_vector(request, i));
        out.extend(context(request));
    }
    Ok(out)
}

/// Row-major `K x lambda_input_width` matrix, one row per allocation.
pub fn lambda_inputs(params: &MechanismParams, request: &Request, predicted: &PredictedRequest) -> Result<Vec<f64>> {
    params.check_request(request)?;
    let cfg = &params.config;
    let mut out = Vec::with_capacity(predicted.len() * cfg.lambda_input_width());
    for (a, p) in predicted.allocations.iter().zip(&predicted.predictions) {
        push_lambda_row(&mut out, cfg, request, a, p)?;
    }
    Ok(out)
}

fn push_lambda_row(
    out: &mut Vec<f64>,
    cfg: &MechanismConfig,
    request: &Request,
    allocation: &Allocation,
    prediction: &EpmPrediction,
) -> Result<()> {
    if allocation.len() != cfg.list_len || prediction.list_len() != cfg.list_len {
        return Err(Error::invalid(format!(
            "mechanism expects lists of length {}, got {}",
            cfg.list_len,
            allocation.len()
        )));
    }
    for (j, slot) in allocation.slots.iter().enumerate() {
        match slot {
            Slot::Ad(i) => out.extend(ad_vector(request, *i)),
            _ => out.extend(std::iter::repeat_n(0.0, cfg.ad_width())),
        }
        out.push(prediction.pctr[j]);
        out.push(prediction.pgmv_per_click[j]);
    }
    out.extend(context(request));
    Ok(())
}

/// `f^mu = sigmoid(MLP(x_i | z^u | z^r))` for ad `ad_index` (1-based).
pub fn mu_forward(params: &MechanismParams, request: &Request, ad_index: usize) -> Result<f64> {
    if ad_index == 0 || ad_index > request.num_ads() {
        return Err(Error::invalid(format!("ad index {ad_index} out of range")));
    }
    params.check_request(request)?;
    let mut row: Vec<f64> = ad_vector(request, ad_index).collect();
    row.extend(context(request));
    Ok(sigmoid(params.config.mu_mlp().eval(&params.store, &row, 1)?[0]))
}

/// `f^lambda(a)`, unbounded.
pub fn lambda_forward(
    params: &MechanismParams,
    request: &Request,
    allocation: &Allocation,
    prediction: &EpmPrediction,
) -> Result<f64> {
    params.check_request(request)?;
    let mut row = Vec::new();
    push_lambda_row(&mut row, &params.config, request, allocation, prediction)?;
    Ok(params.config.lambda_mlp().eval(&params.store, &row, 1)?[0])
}

/// `mu * (bid * q) + lambda`. Organic slots bid zero so only the ad contributes.
pub fn welfare(mu: f64, bid: f64, pctr: f64, lambda: f64) -> f64 {
    mu * (bid * pctr) + lambda
}

pub fn social_welfare(
    params: &MechanismParams,
    request: &Request,
    allocation: &Allocation,
    prediction: &EpmPrediction,
    bids: &[f64],
) -> Result<f64> {
    let lambda = lambda_forward(params, request, allocation, prediction)?;
    Ok(match (allocation.ad_index(), allocation.ad_slot()) {
        (Some(i), Some(j)) => welfare(mu_forward(params, request, i)?, bids[i - 1], prediction.pctr[j], lambda),
        _ => lambda,
    })
}

/// Bid-free ingredients of every allocation's welfare.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WelfareScores {
    /// `f^mu` per ad (index `i - 1`).
    pub mu: Vec<f64>,
    /// Ad of each allocation, `None` for the ad-free list.
    pub ad: Vec<Option<usize>>,
    /// `q` of the ad in each allocation (0 for the ad-free list).
    pub ad_ctr: Vec<f64>,
    pub lambda: Vec<f64>,
}

impl WelfareScores {
    /// Scores with `mu = 1` and `lambda = 0`, i.e. plain expected-eCPM ranking.
    pub fn vcg(num_ads: usize, predicted: &PredictedRequest) -> Self {
        Self::forced(vec![1.0; num_ads], vec![0.0; predicted.len()], predicted)
    }

    pub fn forced(mu: Vec<f64>, lambda: Vec<f64>, predicted: &PredictedRequest) -> Self {
        Self {
            mu,
            ad: predicted.allocations.iter().map(Allocation::ad_index).collect(),
            ad_ctr: (0..predicted.len()).map(|k| predicted.ad_ctr(k)).collect(),
            lambda,
        }
    }

    pub fn len(&self) -> usize {
        self.lambda.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lambda.is_empty()
    }

    /// `SW(a_k)` under `bids`.
    pub fn welfare_at(&self, k: usize, bids: &[f64]) -> f64 {
        match self.ad[k] {
            Some(i) => welfare(self.mu[i - 1], bids[i - 1], self.ad_ctr[k], self.lambda[k]),
            None => self.lambda[k],
        }
    }

    pub fn welfare_all(&self, bids: &[f64]) -> Vec<f64> {
        (0..self.len()).map(|k| self.welfare_at(k, bids)).collect()
    }
}

/// Runs both networks on every ad and allocation of a request.
pub fn score_request(
    params: &MechanismParams,
    request: &Request,
    predicted: &PredictedRequest,
) -> Result<WelfareScores> {
    let cfg = &params.config;
    let mu_x = mu_inputs(params, request)?;
    let mu = cfg
        .mu_mlp()
        .eval(&params.store, &mu_x, request.num_ads())?
        .into_iter()
        .map(sigmoid)
        .collect();
    let lam_x = lambda_inputs(params, request, predicted)?;
    let lambda = cfg.lambda_mlp().eval(&params.store, &lam_x, predicted.len())?;
    Ok(WelfareScores::forced(mu, lambda, predicted))
}

/// Tape versions of the two networks over stacked inputs.
pub(crate) fn mu_graph(g: &mut Graph, params: &MechanismParams, inputs: Vec<f64>, rows: usize) -> Result<Var> {
    let x = g.constant(Tensor::matrix(rows, params.config.mu_input_width(), inputs)?);
    let logit = params.config.mu_mlp().forward(g, &params.store, x)?;
    g.sigmoid(logit)
}

pub(crate) fn lambda_graph(g: &mut Graph, params: &MechanismParams, inputs: Vec<f64>, rows: usize) -> Result<Var> {
    let x = g.constant(Tensor::matrix(rows, params.config.lambda_input_width(), inputs)?);
    params.config.lambda_mlp().forward(g, &params.store, x)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuctionOptions {
    /// Add the ad-free list as a candidate and as the counterfactual for a lone ad.
    #[serde(default)]
    pub allow_no_ad: bool,
    /// Floor payments at zero. Breaks incentive compatibility when it binds.
    #[serde(default)]
    pub clamp_payment_at_zero: bool,
}

impl AuctionOptions {
    pub fn enumeration(&self) -> EnumerationOptions {
        EnumerationOptions {
            allow_no_ad: self.allow_no_ad,
            ..EnumerationOptions::default()
        }
    }
}

/// Everything needed to recompute a payment by hand.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SwLedger {
    pub sw_winner: f64,
    pub sw_counterfactual: f64,
    pub counterfactual_index: usize,
    pub lambda_winner: f64,
    pub mu_winner: f64,
    pub pctr_winner: f64,
}

impl SwLedger {
    /// Unclamped per-click payment.
    pub fn payment(&self) -> f64 {
        (self.sw_counterfactual - self.lambda_winner) / (self.mu_winner * self.pctr_winner)
    }
}

/// Index-level result of winner selection and pricing.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Settlement {
    pub allocation_index: usize,
    /// `(ad_index, payment_per_click, ledger)`; `None` when the ad-free list wins.
    pub winner: Option<(usize, f64, SwLedger)>,
}

/// First index of the maximum over `candidates`.
fn argmax<I: Iterator<Item = usize>>(sw: &[f64], candidates: I) -> Option<usize> {
    let mut best: Option<usize> = None;
    for k in candidates {
        if best.is_none_or(|b| sw[k] > sw[b]) {
            best = Some(k);
        }
    }
    best
}

/// Highest welfare over allocations that do not contain `ad_index`.
pub fn counterfactual(scores: &WelfareScores, sw: &[f64], ad_index: usize) -> Result<(usize, f64)> {
    argmax(sw, (0..scores.len()).filter(|&k| scores.ad[k] != Some(ad_index)))
        .map(|k| (k, sw[k]))
        .ok_or(Error::EmptyCounterfactual)
}

pub fn settle(scores: &WelfareScores, bids: &[f64], options: &AuctionOptions) -> Result<Settlement> {
    if scores.is_empty() {
        return Err(Error::NoCandidateAds);
    }
    if bids.len() != scores.mu.len() {
        return Err(Error::invalid(format!(
            "{} bids for {} ads",
            bids.len(),
            scores.mu.len()
        )));
    }
    let sw = scores.welfare_all(bids);
    if sw.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("social welfare"));
    }
    let k = argmax(&sw, 0..sw.len()).expect("non-empty");
    let Some(i) = scores.ad[k] else {
        return Ok(Settlement {
            allocation_index: k,
            winner: None,
        });
    };
    let (cf, sw_cf) = counterfactual(scores, &sw, i)?;
    let ledger = SwLedger {
        sw_winner: sw[k],
        sw_counterfactual: sw_cf,
        counterfactual_index: cf,
        lambda_winner: scores.lambda[k],
        mu_winner: scores.mu[i - 1],
        pctr_winner: scores.ad_ctr[k],
    };
    let norm = ledger.mu_winner * ledger.pctr_winner;
    if !(norm >= MIN_PRICE_NORMALIZER) {
        return Err(Error::DegeneratePrice {
            ad_index: i,
            value: norm,
        });
    }
    let mut payment = ledger.payment();
    if options.clamp_payment_at_zero {
        payment = payment.max(0.0);
    }
    Ok(Settlement {
        allocation_index: k,
        winner: Some((i, payment, ledger)),
    })
}

/// Evenly spaced misreports over `[0.1 v, 3 v]`.
pub fn misreport_grid(value: f64, points: usize) -> Vec<f64> {
    let (lo, hi) = (0.1 * value, 3.0 * value);
    match points {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..points)
            .map(|k| lo + (hi - lo) * k as f64 / (points - 1) as f64)
            .collect(),
    }
}

/// Truthful utility against the best misreport on the grid for one ad.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegretCheck {
    pub truthful_utility: f64,
    pub best_misreport: f64,
    pub best_utility: f64,
    /// `max(0, best_utility - truthful_utility)`.
    pub regret: f64,
}

/// Expected utility `(value - p) * q` of ad `ad_index` when it bids `bids[ad_index - 1]`.
pub fn utility_at(
    scores: &WelfareScores,
    bids: &[f64],
    ad_index: usize,
    value: f64,
    options: &AuctionOptions,
) -> Result<f64> {
    let s = settle(scores, bids, options)?;
    Ok(match s.winner {
        Some((w, p, _)) if w == ad_index => (value - p) * scores.ad_ctr[s.allocation_index],
        _ => 0.0,
    })
}

pub fn bid_regret(
    scores: &WelfareScores,
    bids: &[f64],
    ad_index: usize,
    value: f64,
    options: &AuctionOptions,
    grid_points: usize,
) -> Result<RegretCheck> {
    let mut bids = bids.to_vec();
    bids[ad_index - 1] = value;
    let truthful = utility_at(scores, &bids, ad_index, value, options)?;
    let mut best = (value, truthful);
    for b in misreport_grid(value, grid_points) {
        bids[ad_index - 1] = b;
        let u = utility_at(scores, &bids, ad_index, value, options)?;
        if u > best.1 {
            best = (b, u);
        }
    }
    Ok(RegretCheck {
        truthful_utility: truthful,
        best_misreport: best.0,
        best_utility: best.1,
        regret: (best.1 - truthful).max(0.0),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WinnerInfo {
    pub ad_index: usize,
    pub ad_id: String,
    pub position: usize,
    pub bid: f64,
    pub payment_per_click: f64,
    /// Predicted CTR of the ad in the displayed list.
    pub pctr: f64,
    /// Present for welfare-based mechanisms.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sw_ledger: Option<SwLedger>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuctionOutcome {
    pub request_id: String,
    pub allocation_index: usize,
    pub allocation: Allocation,
    /// `None` when the ad-free list is shown.
    pub winner: Option<WinnerInfo>,
}

impl AuctionOutcome {
    pub fn from_settlement(request: &Request, predicted: &PredictedRequest, bids: &[f64], s: &Settlement) -> Self {
        let allocation = predicted.allocations[s.allocation_index].clone();
        let winner = s.winner.map(|(i, payment, ledger)| WinnerInfo {
            ad_index: i,
            ad_id: request.ads[i - 1].ad_id.clone(),
            position: allocation.ad_position().expect("winning allocation holds the ad"),
            bid: bids[i - 1],
            payment_per_click: payment,
            pctr: predicted.ad_ctr(s.allocation_index),
            sw_ledger: Some(ledger),
        });
        Self {
            request_id: request.request_id.clone(),
            allocation_index: s.allocation_index,
            allocation,
            winner,
        }
    }

    /// Payment per click, 0 without an ad.
    pub fn payment(&self) -> f64 {
        self.winner.as_ref().map_or(0.0, |w| w.payment_per_click)
    }
}

/// Scores, selects and prices one request at its reported bids.
pub fn run_auction(
    params: &MechanismParams,
    request: &Request,
    predicted: &PredictedRequest,
    options: &AuctionOptions,
) -> Result<AuctionOutcome> {
    let scores = score_request(params, request, predicted)?;
    let bids = request.bids();
    let s = settle(&scores, &bids, options)?;
    Ok(AuctionOutcome::from_settlement(request, predicted, &bids, &s))
}
