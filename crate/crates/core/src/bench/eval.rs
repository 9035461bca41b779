use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::audit::{IcAudit, IrAudit};
use super::mechanisms::Mechanism;
use crate::dsm::Sample;
use crate::error::{Error, Result};
use crate::metrics::{auc, mean_std, pcoc};
use crate::simgen::{realized_gmv, simulate_clicks, World};

/// Where clicks come from when scoring outcomes.
#[derive(Clone, Copy, Debug)]
pub enum ClickSource<'a> {
    /// Clicks are the list-wise pCTRs and GMV is `sum q * pGMV`.
    Expected,
    /// Clicks are drawn from the world's ground-truth model under `salt`.
    Realized { world: &'a World, salt: u64 },
}

impl ClickSource<'_> {
    pub fn mode(&self) -> &'static str {
        match self {
            ClickSource::Expected => "expected",
            ClickSource::Realized { .. } => "realized",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mechanism: String,
    pub mode: String,
    pub seed: u64,
    pub requests: usize,
    pub alpha: f64,
    /// Per-request mean of `Rev + alpha * Gmv`.
    pub objective: f64,
    pub rev: f64,
    pub gmv: f64,
    pub rpm: f64,
    pub gpm: f64,
    pub auc: Option<f64>,
    pub pcoc: Option<f64>,
    pub ic_max_regret: Option<f64>,
    pub ic_mean_regret: Option<f64>,
    pub ir_violations: Option<usize>,
    pub negative_payment_rate: f64,
}

impl EvalReport {
    pub fn with_audits(mut self, ic: Option<&IcAudit>, ir: Option<&IrAudit>) -> Self {
        if let Some(ic) = ic {
            self.ic_max_regret = Some(ic.max_regret);
            self.ic_mean_regret = Some(ic.mean_regret);
        }
        if let Some(ir) = ir {
            self.ir_violations = Some(ir.violations);
        }
        self
    }
}

/// Per-request contribution; summed in request order so the report is
/// reproducible bit for bit.
#[derive(Default)]
struct Tally {
    rev: f64,
    gmv: f64,
    negative: bool,
    pctr: Vec<f64>,
    clicks: Vec<f64>,
}

/// `Σ revenue / impressions * 1000`, one impression per request.
pub fn per_mille(total: f64, impressions: usize) -> Result<f64> {
    if impressions == 0 {
        return Err(Error::EmptyDataset);
    }
    Ok(total / impressions as f64 * 1000.0)
}

fn click_index(request_id: &str) -> u64 {
    World::request_index(request_id).unwrap_or_else(|| {
        // FNV-1a
        request_id.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
            (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
        })
    })
}

fn tally(mechanism: &dyn Mechanism, sample: &Sample, source: ClickSource<'_>) -> Result<Tally> {
    let (request, predicted) = (&sample.request, &sample.predicted);
    let outcome = mechanism.prepare(request, predicted)?.run(&request.bids())?;
    let k = outcome.allocation_index;
    let pred = &predicted.predictions[k];
    let payment = outcome.winner.as_ref().map(|w| w.payment_per_click);
    let ad_slot = outcome.allocation.ad_slot();
    let mut t = Tally {
        negative: payment.is_some_and(|p| p < 0.0),
        ..Tally::default()
    };
    match source {
        ClickSource::Expected => {
            t.gmv = pred.expected_gmv();
            if let (Some(p), Some(j)) = (payment, ad_slot) {
                t.rev = p * pred.pctr[j];
            }
        }
        ClickSource::Realized { world, salt } => {
            let ctr = world.click_model.true_ctrs(request, &outcome.allocation)?;
            let mut rng = world.click_rng(click_index(&request.request_id), salt);
            let clicks = simulate_clicks(&ctr, &mut rng);
            t.gmv = realized_gmv(request, &outcome.allocation, &clicks)?.iter().sum();
            if let (Some(p), Some(j)) = (payment, ad_slot) {
                if clicks[j] {
                    t.rev = p;
                }
            }
            t.pctr = pred.pctr.clone();
            t.clicks = clicks.iter().map(|&c| if c { 1.0 } else { 0.0 }).collect();
        }
    }
    Ok(t)
}

/// Runs `mechanism` on every sample at reported bids and aggregates.
pub fn evaluate(
    mechanism: &dyn Mechanism,
    samples: &[Sample],
    source: ClickSource<'_>,
    alpha: f64,
    seed: u64,
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let tallies: Vec<Tally> = samples
        .par_iter()
        .map(|s| tally(mechanism, s, source))
        .collect::<Result<_>>()?;
    let n = samples.len();
    let rev_total: f64 = tallies.iter().map(|t| t.rev).sum();
    let gmv_total: f64 = tallies.iter().map(|t| t.gmv).sum();
    let (auc_v, pcoc_v) = match source {
        ClickSource::Expected => (None, None),
        ClickSource::Realized { .. } => {
            let pctr: Vec<f64> = tallies.iter().flat_map(|t| t.pctr.iter().copied()).collect();
            let clicks: Vec<f64> = tallies.iter().flat_map(|t| t.clicks.iter().copied()).collect();
            let labels: Vec<bool> = clicks.iter().map(|&c| c > 0.5).collect();
            (auc(&pctr, &labels), pcoc(&pctr, &clicks))
        }
    };
    let rev = rev_total / n as f64;
    let gmv = gmv_total / n as f64;
    let report = EvalReport {
        mechanism: mechanism.name().to_string(),
        mode: source.mode().to_string(),
        seed,
        requests: n,
        alpha,
        objective: rev + alpha * gmv,
        rev,
        gmv,
        rpm: per_mille(rev_total, n)?,
        gpm: per_mille(gmv_total, n)?,
        auc: auc_v,
        pcoc: pcoc_v,
        ic_max_regret: None,
        ic_mean_regret: None,
        ir_violations: None,
        negative_payment_rate: tallies.iter().filter(|t| t.negative).count() as f64 / n as f64,
    };
    let finite = [report.objective, report.rpm, report.gpm, report.negative_payment_rate]
        .iter()
        .chain(report.auc.iter())
        .chain(report.pcoc.iter())
        .all(|v| v.is_finite());
    if !finite {
        return Err(Error::NonFinite("evaluation report"));
    }
    Ok(report)
}

pub fn write_reports_csv<W: Write>(out: W, reports: &[EvalReport]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in reports {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_reports_json<W: Write>(mut out: W, reports: &[EvalReport]) -> Result<()> {
    serde_json::to_writer_pretty(&mut out, reports)?;
    out.write_all(b"\n")?;
    Ok(())
}

/// Mean and sample standard deviation of one metric across seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mechanism: String,
    pub mode: String,
    pub metric: String,
    pub seeds: usize,
    pub mean: f64,
    pub std: f64,
}

fn metric_values(r: &EvalReport) -> Vec<(&'static str, Option<f64>)> {
    vec![
        ("objective", Some(r.objective)),
        ("rev", Some(r.rev)),
        ("gmv", Some(r.gmv)),
        ("rpm", Some(r.rpm)),
        ("gpm", Some(r.gpm)),
        ("auc", r.auc),
        ("pcoc", r.pcoc),
        ("ic_max_regret", r.ic_max_regret),
        ("ir_violations", r.ir_violations.map(|v| v as f64)),
        ("negative_payment_rate", Some(r.negative_payment_rate)),
    ]
}

/// Groups reports by (mechanism, mode) in first-seen order and summarizes each metric.
pub fn summarize(reports: &[EvalReport]) -> Vec<MetricSummary> {
    let mut keys: Vec<(&str, &str)> = Vec::new();
    for r in reports {
        let key = (r.mechanism.as_str(), r.mode.as_str());
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    let mut out = Vec::new();
    for (mech, mode) in keys {
        let group: Vec<&EvalReport> = reports
            .iter()
            .filter(|r| r.mechanism == mech && r.mode == mode)
            .collect();
        for (i, (metric, _)) in metric_values(group[0]).into_iter().enumerate() {
            let values: Vec<f64> = group.iter().filter_map(|r| metric_values(r)[i].1).collect();
            if values.is_empty() {
                continue;
            }
            let (mean, std) = mean_std(&values);
            out.push(MetricSummary {
                mechanism: mech.to_string(),
                mode: mode.to_string(),
                metric: metric.to_string(),
                seeds: values.len(),
                mean,
                std,
            });
        }
    }
    out
}

pub fn write_summary_csv<W: Write>(out: W, rows: &[MetricSummary]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
