use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::mechanisms::{Mechanism, PreparedAuction};
use crate::aam::misreport_grid;
use crate::dsm::Sample;
use crate::error::Result;

/// Payments above the bid by more than this count as IR violations.
pub const IR_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegretRow {
    pub request_id: String,
    pub ad_id: String,
    pub truthful_utility: f64,
    pub best_misreport: f64,
    pub regret: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IcAudit {
    pub rows: Vec<RegretRow>,
    pub max_regret: f64,
    pub mean_regret: f64,
}

impl IcAudit {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Expected utility `(value - p) * q` of ad `ad_index` under `bids`.
pub fn utility(auction: &dyn PreparedAuction, bids: &[f64], ad_index: usize, value: f64) -> Result<f64> {
    let out = auction.run(bids)?;
    Ok(match out.winner {
        Some(w) if w.ad_index == ad_index => (value - w.payment_per_click) * w.pctr,
        _ => 0.0,
    })
}

/// Sweeps each ad's bid over the misreport grid while the others keep their reports.
pub fn request_regret(mechanism: &dyn Mechanism, sample: &Sample, grid_points: usize) -> Result<Vec<RegretRow>> {
    let request = &sample.request;
    let auction = mechanism.prepare(request, &sample.predicted)?;
    let reported = request.bids();
    let mut rows = Vec::with_capacity(request.num_ads());
    for (idx, ad) in request.ads.iter().enumerate() {
        let i = idx + 1;
        let value = ad.true_value.unwrap_or(ad.bid);
        let mut bids = reported.clone();
        bids[idx] = value;
        let truthful = utility(auction.as_ref(), &bids, i, value)?;
        let mut best = (value, truthful);
        for b in misreport_grid(value, grid_points) {
            bids[idx] = b;
            let u = utility(auction.as_ref(), &bids, i, value)?;
            if u > best.1 {
                best = (b, u);
            }
        }
        rows.push(RegretRow {
            request_id: request.request_id.clone(),
            ad_id: ad.ad_id.clone(),
            truthful_utility: truthful,
            best_misreport: best.0,
            regret: (best.1 - truthful).max(0.0),
        });
    }
    Ok(rows)
}

pub fn ic_audit(mechanism: &dyn Mechanism, samples: &[Sample], grid_points: usize) -> Result<IcAudit> {
    let per: Vec<Vec<RegretRow>> = samples
        .par_iter()
        .map(|s| request_regret(mechanism, s, grid_points))
        .collect::<Result<_>>()?;
    let rows: Vec<RegretRow> = per.into_iter().flatten().collect();
    let max_regret = rows.iter().map(|r| r.regret).fold(0.0, f64::max);
    let mean_regret = if rows.is_empty() {
        0.0
    } else {
        rows.iter().map(|r| r.regret).sum::<f64>() / rows.len() as f64
    };
    Ok(IcAudit {
        rows,
        max_regret,
        mean_regret,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IrAudit {
    pub instances: usize,
    pub violations: usize,
    /// Ids of violating requests, in input order.
    pub violating_requests: Vec<String>,
}

pub fn ir_audit(mechanism: &dyn Mechanism, samples: &[Sample]) -> Result<IrAudit> {
    let flags: Vec<bool> = samples
        .par_iter()
        .map(|s| {
            let out = mechanism.prepare(&s.request, &s.predicted)?.run(&s.request.bids())?;
            Ok(out.winner.is_some_and(|w| w.payment_per_click > w.bid + IR_TOLERANCE))
        })
        .collect::<Result<_>>()?;
    let violating_requests: Vec<String> = samples
        .iter()
        .zip(&flags)
        .filter(|(_, &f)| f)
        .map(|(s, _)| s.request.request_id.clone())
        .collect();
    Ok(IrAudit {
        instances: samples.len(),
        violations: violating_requests.len(),
        violating_requests,
    })
}
