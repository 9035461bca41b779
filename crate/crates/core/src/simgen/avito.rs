//! Ingestion of Avito context-ad search logs (`trainSearchStream` layout).
//!
//! Only positions 1, 2, 6, 7 and 8 are logged and only the contextual ads at
//! positions 1 and 7 carry click labels. Labels for the other slots are
//! simulated from per-item CTRs drawn once from normals centred between the
//! corpus CTRs of positions 1 and 7. Position 1 and 7 items become the two
//! candidate ads; positions 2, 6 and 8 become the organic list.

use std::collections::HashMap;
use std::io::Read;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{realized_gmv, simulate_clicks, UniformRange, CTR_CEIL, CTR_FLOOR};
use crate::domain::{AdCandidate, Allocation, ItemFeatures, OrganicItem, Request};
use crate::epm::LabeledList;
use crate::error::{Error, Result};

pub const LOGGED_POSITIONS: [usize; 5] = [1, 2, 6, 7, 8];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AvitoOptions {
    pub seed: u64,
    /// Override the corpus CTR of position 1.
    pub ctr1: Option<f64>,
    /// Override the corpus CTR of position 7.
    pub ctr7: Option<f64>,
    pub bid_dist: UniformRange,
    pub organic_gmv_dist: UniformRange,
    pub ad_gmv_dist: UniformRange,
}

impl Default for AvitoOptions {
    fn default() -> Self {
        Self {
            seed: 1,
            ctr1: None,
            ctr7: None,
            bid_dist: UniformRange::new(0.5, 1.0),
            organic_gmv_dist: UniformRange::new(3.5, 6.0),
            ad_gmv_dist: UniformRange::new(2.0, 4.0),
        }
    }
}

/// Means of the simulated position-2 and position-6 CTR distributions.
pub fn simulated_ctr_means(ctr1: f64, ctr7: f64) -> (f64, f64) {
    (0.8 * ctr1 + 0.2 * ctr7, 0.2 * ctr1 + 0.8 * ctr7)
}

/// One search page with labels for every logged slot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AvitoSession {
    pub search_id: u64,
    /// Item at logged positions 1, 2, 6, 7, 8.
    pub ad_ids: [usize; 5],
    pub hist_ctr: [f64; 5],
    /// Observed clicks at positions 1 and 7, simulated elsewhere.
    pub clicks: [bool; 5],
    /// Per-item CTR used for simulated slots (`None` for observed ones).
    pub simulated_ctr: [Option<f64>; 5],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AvitoDataset {
    pub ctr1: f64,
    pub ctr7: f64,
    pub sessions: Vec<AvitoSession>,
    /// Two ads (positions 1 and 7) and three organic items (2, 6, 8) each.
    pub requests: Vec<Request>,
    /// Displayed list `[pos 1 ad, pos 2, pos 6, pos 8]` with its labels.
    pub lists: Vec<LabeledList>,
    pub malformed_rows: usize,
    pub skipped_sessions: usize,
}

struct Row {
    search_id: u64,
    ad_id: usize,
    position: usize,
    hist_ctr: f64,
    click: Option<bool>,
}

fn column(headers: &csv::StringRecord, name: &str) -> Result<usize> {
    headers
        .iter()
        .position(|h| h.trim() == name)
        .ok_or_else(|| Error::MissingColumn(name.to_string()))
}

fn parse_row(rec: &csv::StringRecord, cols: &[usize; 5]) -> Option<Row> {
    let field = |k: usize| rec.get(cols[k]).map(str::trim);
    let click = match field(4)? {
        "" => None,
        "0" => Some(false),
        "1" => Some(true),
        _ => return None,
    };
    let hist_ctr = match field(3)? {
        "" => 0.0,
        s => s.parse::<f64>().ok().filter(|v| v.is_finite())?,
    };
    Some(Row {
        search_id: field(0)?.parse().ok()?,
        ad_id: field(1)?.parse().ok()?,
        position: field(2)?.parse().ok()?,
        hist_ctr,
        click,
    })
}

/// Reads a comma- or tab-separated search stream and applies the labelling recipe.
pub fn ingest_avito_sessions<R: Read>(input: R, options: &AvitoOptions) -> Result<AvitoDataset> {
    let mut text = String::new();
    let mut input = input;
    input.read_to_string(&mut text)?;
    let first = text.lines().next().unwrap_or_default();
    let delimiter = if first.contains('\t') { b'\t' } else { b',' };
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .flexible(true)
        .from_reader(text.as_bytes());
    let headers = reader.headers()?.clone();
    let cols = [
        column(&headers, "SearchID")?,
        column(&headers, "AdID")?,
        column(&headers, "Position")?,
        column(&headers, "HistCTR")?,
        column(&headers, "IsClick")?,
    ];

    let mut malformed_rows = 0;
    let mut order: Vec<u64> = Vec::new();
    let mut groups: HashMap<u64, Vec<Row>> = HashMap::new();
    for rec in reader.records() {
        let Some(row) = rec.ok().as_ref().and_then(|r| parse_row(r, &cols)) else {
            malformed_rows += 1;
            continue;
        };
        let entry = groups.entry(row.search_id).or_insert_with(|| {
            order.push(row.search_id);
            Vec::new()
        });
        entry.push(row);
    }

    // keep pages with exactly the five logged slots and labels at 1 and 7
    let mut skipped_sessions = 0;
    let mut pages: Vec<(u64, [Row; 5])> = Vec::new();
    for id in order {
        let mut rows = groups.remove(&id).expect("grouped id");
        rows.sort_by_key(|r| r.position);
        let positions: Vec<usize> = rows.iter().map(|r| r.position).collect();
        let labelled = rows
            .iter()
            .filter(|r| r.position == 1 || r.position == 7)
            .all(|r| r.click.is_some());
        match <[Row; 5]>::try_from(rows) {
            Ok(arr) if positions == LOGGED_POSITIONS && labelled => pages.push((id, arr)),
            _ => skipped_sessions += 1,
        }
    }
    if pages.is_empty() {
        return Err(Error::EmptyDataset);
    }

    let observed_mean =
        |slot: usize| pages.iter().filter(|p| p.1[slot].click == Some(true)).count() as f64 / pages.len() as f64;
    let ctr1 = options.ctr1.unwrap_or_else(|| observed_mean(0));
    let ctr7 = options.ctr7.unwrap_or_else(|| observed_mean(3));
    let (mean2, mean6) = simulated_ctr_means(ctr1, ctr7);
    let near_top = Normal::new(mean2, 0.1 * ctr1).map_err(|e| Error::invalid(e.to_string()))?;
    let near_bottom = Normal::new(mean6, 0.1 * ctr7).map_err(|e| Error::invalid(e.to_string()))?;

    // one CTR per (item, logged position), drawn in order of first appearance
    let mut item_rng = ChaCha8Rng::seed_from_u64(options.seed);
    item_rng.set_stream(u64::MAX);
    let mut item_ctr: HashMap<(usize, usize), f64> = HashMap::new();
    for (_, rows) in &pages {
        for slot in [1, 2, 4] {
            let dist = if slot == 1 { &near_top } else { &near_bottom };
            item_ctr
                .entry((rows[slot].ad_id, LOGGED_POSITIONS[slot]))
                .or_insert_with(|| dist.sample(&mut item_rng).clamp(CTR_FLOOR, CTR_CEIL));
        }
    }

    let mut sessions = Vec::with_capacity(pages.len());
    let mut requests = Vec::with_capacity(pages.len());
    let mut lists = Vec::with_capacity(pages.len());
    for (index, (search_id, rows)) in pages.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
        rng.set_stream(index as u64);
        let mut simulated_ctr = [None; 5];
        let mut clicks = [false; 5];
        for (slot, row) in rows.iter().enumerate() {
            match row.click.filter(|_| slot == 0 || slot == 3) {
                Some(c) => clicks[slot] = c,
                None => {
                    let c = item_ctr[&(row.ad_id, LOGGED_POSITIONS[slot])];
                    simulated_ctr[slot] = Some(c);
                    clicks[slot] = simulate_clicks(&[c], &mut rng)[0];
                }
            }
        }
        let features = |row: &Row| ItemFeatures {
            sparse_ids: vec![row.ad_id, 0],
            dense: vec![row.hist_ctr],
            position_hint: Some(row.position),
        };
        let ads = [0, 3]
            .into_iter()
            .map(|slot| {
                let value = rng.random_range(options.bid_dist.low..options.bid_dist.high);
                AdCandidate {
                    ad_id: rows[slot].ad_id.to_string(),
                    bid: value,
                    true_value: Some(value),
                    value_dist_features: vec![options.bid_dist.mean(), options.bid_dist.std()],
                    gmv_per_click: rng.random_range(options.ad_gmv_dist.low..options.ad_gmv_dist.high),
                    features: features(&rows[slot]),
                }
            })
            .collect();
        let organic = [1, 2, 4]
            .into_iter()
            .map(|slot| OrganicItem {
                item_id: rows[slot].ad_id.to_string(),
                features: features(&rows[slot]),
                gmv_per_click: rng.random_range(options.organic_gmv_dist.low..options.organic_gmv_dist.high),
            })
            .collect();
        let request = Request {
            request_id: format!("avito-{search_id}"),
            user_features: Vec::new(),
            request_features: Vec::new(),
            organic,
            ads,
        };
        let allocation = Allocation::insert(3, 1, 1)?;
        let list_clicks = vec![clicks[0], clicks[1], clicks[2], clicks[4]];
        lists.push(LabeledList {
            realized_gmv: realized_gmv(&request, &allocation, &list_clicks)?,
            request: request.clone(),
            allocation,
            clicks: list_clicks,
        });
        requests.push(request);
        sessions.push(AvitoSession {
            search_id: *search_id,
            ad_ids: std::array::from_fn(|k| rows[k].ad_id),
            hist_ctr: std::array::from_fn(|k| rows[k].hist_ctr),
            clicks,
            simulated_ctr,
        });
    }

    Ok(AvitoDataset {
        ctr1,
        ctr7,
        sessions,
        requests,
        lists,
        malformed_rows,
        skipped_sessions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stream(pages: usize, click1_every: usize, click7_every: usize) -> String {
        let mut s = String::from("SearchID\tAdID\tPosition\tObjectType\tHistCTR\tIsClick\n");
        for p in 0..pages {
            for (k, pos) in LOGGED_POSITIONS.iter().enumerate() {
                let ad = 1000 + (p * 5 + k) % 40;
                let (ty, ctr, click) = match pos {
                    1 => (3, "0.05", if p % click1_every == 0 { "1" } else { "0" }),
                    7 => (3, "0.01", if p % click7_every == 0 { "1" } else { "0" }),
                    _ => (1, "", ""),
                };
                s.push_str(&format!("{p}\t{ad}\t{pos}\t{ty}\t{ctr}\t{click}\n"));
            }
        }
        s
    }

    #[test]
    fn recipe_means() {
        let (m2, m6) = simulated_ctr_means(0.10, 0.02);
        assert!((m2 - 0.084).abs() < 1e-12);
        assert!((m6 - 0.036).abs() < 1e-12);
    }

    #[test]
    fn corpus_ctrs_and_split() {
        let text = stream(200, 10, 50);
        let d = ingest_avito_sessions(text.as_bytes(), &AvitoOptions::default()).unwrap();
        assert!((d.ctr1 - 0.10).abs() < 1e-12);
        assert!((d.ctr7 - 0.02).abs() < 1e-12);
        assert_eq!(d.requests.len(), 200);
        for r in &d.requests {
            assert_eq!(r.num_ads(), 2);
            assert_eq!(r.organic.len(), 3);
        }
        for s in &d.sessions {
            assert!(s.simulated_ctr[0].is_none() && s.simulated_ctr[3].is_none());
            assert!(s.simulated_ctr[1].unwrap() >= CTR_FLOOR);
        }
    }

    #[test]
    fn malformed_rows_and_incomplete_pages_are_counted() {
        let mut text = stream(3, 2, 2);
        text.push_str("oops\t1\t1\t3\t0.1\t1\n");
        text.push_str("99\t5\t1\t3\t0.1\t1\n");
        let d = ingest_avito_sessions(text.as_bytes(), &AvitoOptions::default()).unwrap();
        assert_eq!(d.malformed_rows, 1);
        assert_eq!(d.skipped_sessions, 1);
        assert_eq!(d.sessions.len(), 3);
    }

    #[test]
    fn missing_click_column_is_an_error() {
        let text = "SearchID,AdID,Position,ObjectType,HistCTR\n1,2,1,3,0.1\n";
        let err = ingest_avito_sessions(text.as_bytes(), &AvitoOptions::default()).unwrap_err();
        assert!(matches!(err, Error::MissingColumn(ref c) if c == "IsClick"));
    }

    #[test]
    fn ingestion_is_deterministic() {
        let text = stream(50, 3, 7);
        let a = ingest_avito_sessions(text.as_bytes(), &AvitoOptions::default()).unwrap();
        let b = ingest_avito_sessions(text.as_bytes(), &AvitoOptions::default()).unwrap();
        assert_eq!(a, b);
    }
}
