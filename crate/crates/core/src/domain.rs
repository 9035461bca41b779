//! Requests, ads, organic items and allocations.
//!
//! Ad indices and positions are 1-based everywhere in this crate's public
//! surface. Use [`Allocation::ad_offset`] and friends to index vectors.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest list length accepted under the default configuration.
pub const DEFAULT_MAX_LIST_LEN: usize = 5;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ItemFeatures {
    /// Categorical identifiers (item id, category, ...).
    pub sparse_ids: Vec<usize>,
    /// Real-valued attributes (historical CTR, sales volume, ...).
    pub dense: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub position_hint: Option<usize>,
}

impl ItemFeatures {
    pub fn validate(&self) -> Result<()> {
        if self.dense.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("dense features must be finite"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdCandidate {
    pub ad_id: String,
    /// Reported bid per click; strictly positive.
    pub bid: f64,
    /// Private value per click, only known in simulation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub true_value: Option<f64>,
    /// Summary of the advertiser's value distribution. Never contains the bid.
    pub value_dist_features: Vec<f64>,
    pub gmv_per_click: f64,
    pub features: ItemFeatures,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrganicItem {
    pub item_id: String,
    pub features: ItemFeatures,
    pub gmv_per_click: f64,
}

/// One page view.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub request_id: String,
    #[serde(rename = "user")]
    pub user_features: Vec<f64>,
    #[serde(rename = "req")]
    pub request_features: Vec<f64>,
    /// Organic items, already ordered by estimated GMV. Never reordered.
    pub organic: Vec<OrganicItem>,
    pub ads: Vec<AdCandidate>,
}

impl Request {
    /// List length `m` (organic items plus the single ad slot).
    pub fn list_len(&self) -> usize {
        self.organic.len() + 1
    }

    pub fn num_ads(&self) -> usize {
        self.ads.len()
    }

    pub fn bids(&self) -> Vec<f64> {
        self.ads.iter().map(|a| a.bid).collect()
    }

    /// Copy of this request with ad `ad_index` (1-based) bidding `bid`.
    pub fn with_bid(&self, ad_index: usize, bid: f64) -> Self {
        let mut out = self.clone();
        out.ads[ad_index - 1].bid = bid;
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.ads.is_empty() {
            return Err(Error::NoCandidateAds);
        }
        if self
            .user_features
            .iter()
            .chain(&self.request_features)
            .any(|v| !v.is_finite())
        {
            return Err(Error::invalid(format!(
                "request {}: non-finite context features",
                self.request_id
            )));
        }
        for ad in &self.ads {
            if !(ad.bid > 0.0) || !ad.bid.is_finite() {
                return Err(Error::invalid(format!(
                    "ad {}: bid must be positive, got {}",
                    ad.ad_id, ad.bid
                )));
            }
            if let Some(v) = ad.true_value {
                if !(v > 0.0) || !v.is_finite() {
                    return Err(Error::invalid(format!("ad {}: true value must be positive", ad.ad_id)));
                }
            }
            if ad.value_dist_features.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("ad {}: non-finite value features", ad.ad_id)));
            }
            ad.features.validate()?;
        }
        for item in &self.organic {
            item.features.validate()?;
        }
        Ok(())
    }
}

/// Content of one list slot.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "index", rename_all = "snake_case")]
pub enum Slot {
    /// 1-based ad index.
    Ad(usize),
    /// 0-based offset into `Request::organic`.
    Organic(usize),
    /// Padding used by the ad-free allocation to keep the list length `m`.
    Empty,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdPlacement {
    /// 1-based ad index `i`.
    pub ad_index: usize,
    /// 1-based position `sigma(i)`.
    pub position: usize,
}

/// An ordered list of `m` slots holding at most one ad.
///
/// `placement` is `None` only for the optional ad-free reserve allocation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Allocation {
    pub placement: Option<AdPlacement>,
    pub slots: Vec<Slot>,
}

impl Allocation {
    /// Allocation `a(i, j)`: ad `ad_index` inserted at `position` (both 1-based).
    pub fn insert(num_organic: usize, ad_index: usize, position: usize) -> Result<Self> {
        if ad_index == 0 || position == 0 || position > num_organic + 1 {
            return Err(Error::invalid(format!(
                "invalid placement ad={ad_index} position={position} for {num_organic} organic items"
            )));
        }
        let mut slots: Vec<Slot> = (0..num_organic).map(Slot::Organic).collect();
        slots.insert(position - 1, Slot::Ad(ad_index));
        Ok(Self {
            placement: Some(AdPlacement { ad_index, position }),
            slots,
        })
    }

    /// The pure organic list padded with one empty slot at the end.
    pub fn ad_free(num_organic: usize) -> Self {
        let mut slots: Vec<Slot> = (0..num_organic).map(Slot::Organic).collect();
        slots.push(Slot::Empty);
        Self { placement: None, slots }
    }

    pub fn ad_index(&self) -> Option<usize> {
        self.placement.map(|p| p.ad_index)
    }

    pub fn ad_position(&self) -> Option<usize> {
        self.placement.map(|p| p.position)
    }

    /// 0-based index of the ad in `Request::ads`.
    pub fn ad_offset(&self) -> Option<usize> {
        self.ad_index().map(|i| i - 1)
    }

    /// 0-based slot index of the ad.
    pub fn ad_slot(&self) -> Option<usize> {
        self.ad_position().map(|j| j - 1)
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Organic offsets in display order, with the ad and padding removed.
    pub fn organic_order(&self) -> Vec<usize> {
        self.slots
            .iter()
            .filter_map(|s| match s {
                Slot::Organic(k) => Some(*k),
                _ => None,
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnumerationOptions {
    /// Append the ad-free organic list as a reserve allocation.
    pub allow_no_ad: bool,
    /// Upper bound on `m`.
    pub max_list_len: usize,
}

impl Default for EnumerationOptions {
    fn default() -> Self {
        Self {
            allow_no_ad: false,
            max_list_len: DEFAULT_MAX_LIST_LEN,
        }
    }
}

/// All `m x n` allocations ordered by (ad index, position), plus the
/// ad-free list last when `allow_no_ad` is set.
pub fn enumerate_allocations(request: &Request, options: EnumerationOptions) -> Result<Vec<Allocation>> {
    if request.ads.is_empty() {
        return Err(Error::NoCandidateAds);
    }
    let m = request.list_len();
    if m > options.max_list_len {
        return Err(Error::invalid(format!(
            "list length {m} exceeds the configured maximum {}",
            options.max_list_len
        )));
    }
    let k = request.organic.len();
    let mut out = Vec::with_capacity(m * request.ads.len() + usize::from(options.allow_no_ad));
    for i in 1..=request.ads.len() {
        for j in 1..=m {
            out.push(Allocation::insert(k, i, j)?);
        }
    }
    if options.allow_no_ad {
        out.push(Allocation::ad_free(k));
    }
    Ok(out)
}

/// The allocations that do not display ad `ad_index` (1-based).
pub fn allocations_excluding(allocations: &[Allocation], ad_index: usize) -> Vec<Allocation> {
    allocations
        .iter()
        .filter(|a| a.ad_index() != Some(ad_index))
        .cloned()
        .collect()
}

/// Read one request per line; blank lines are skipped.
pub fn read_requests_jsonl<R: BufRead>(reader: R) -> Result<Vec<Request>> {
    let mut out = Vec::new();
    for (line_no, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let request: Request =
            serde_json::from_str(&line).map_err(|e| Error::invalid(format!("line {}: {e}", line_no + 1)))?;
        request.validate()?;
        out.push(request);
    }
    Ok(out)
}

pub fn write_requests_jsonl<W: Write>(mut writer: W, requests: &[Request]) -> Result<()> {
    for request in requests {
        serde_json::to_writer(&mut writer, request)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}


#[cfg(test)]
mod tests {
    use super::fixtures::request;
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn counts() {
        let all = enumerate_allocations(&request(2, 4), EnumerationOptions::default()).unwrap();
        assert_eq!(all.len(), 8);
        let single = enumerate_allocations(&request(1, 1), EnumerationOptions::default()).unwrap();
        assert_eq!(single.len(), 1);
        assert_eq!(single[0].slots, vec![Slot::Ad(1)]);
    }

    #[test]
    fn list_length_bounded_by_default() {
        assert!(enumerate_allocations(&request(2, 5), EnumerationOptions::default()).is_ok());
        assert!(enumerate_allocations(&request(2, 6), EnumerationOptions::default()).is_err());
        let relaxed = EnumerationOptions {
            max_list_len: 8,
            ..Default::default()
        };
        assert_eq!(enumerate_allocations(&request(2, 6), relaxed).unwrap().len(), 12);
    }

    #[test]
    fn no_ads_is_an_error() {
        let mut r = request(1, 3);
        r.ads.clear();
        assert!(matches!(
            enumerate_allocations(&r, EnumerationOptions::default()),
            Err(Error::NoCandidateAds)
        ));
    }

    #[test]
    fn excluding() {
        let all = enumerate_allocations(&request(2, 4), EnumerationOptions::default()).unwrap();
        let rest = allocations_excluding(&all, 1);
        assert_eq!(rest.len(), 4);
        assert!(rest.iter().all(|a| a.ad_index() == Some(2)));

        let one = enumerate_allocations(&request(1, 3), EnumerationOptions::default()).unwrap();
        assert!(allocations_excluding(&one, 1).is_empty());

        let three = enumerate_allocations(&request(3, 2), EnumerationOptions::default()).unwrap();
        let rest = allocations_excluding(&three, 2);
        assert_eq!(rest.len(), 4);
        assert!(rest.iter().all(|a| matches!(a.ad_index(), Some(1) | Some(3))));
    }

    #[test]
    fn ad_free_reserve_is_last() {
        let opts = EnumerationOptions {
            allow_no_ad: true,
            ..Default::default()
        };
        let all = enumerate_allocations(&request(1, 3), opts).unwrap();
        assert_eq!(all.len(), 4);
        assert_eq!(all[3].placement, None);
        assert_eq!(all[3].slots, vec![Slot::Organic(0), Slot::Organic(1), Slot::Empty]);
        assert_eq!(allocations_excluding(&all, 1).len(), 1);
    }

    #[test]
    fn jsonl_round_trip_uses_schema_names() {
        let reqs = vec![request(2, 3), request(1, 1)];
        let mut buf = Vec::new();
        write_requests_jsonl(&mut buf, &reqs).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.contains("\"user\":") && text.contains("\"req\":"));
        assert!(text.contains("\"organic\":") && text.contains("\"ads\":"));
        assert_eq!(read_requests_jsonl(buf.as_slice()).unwrap(), reqs);
    }

    #[test]
    fn jsonl_reports_line_numbers() {
        let input = b"\n{\"request_id\": 3}\n";
        let err = read_requests_jsonl(&input[..]).unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
    }

    #[test]
    fn validation_rejects_non_positive_bids() {
        let mut r = request(2, 3);
        r.ads[1].bid = 0.0;
        assert!(r.validate().is_err());
    }

    proptest! {
        #[test]
        fn enumeration_is_a_bijection_preserving_organic_order(n in 1usize..6, m in 1usize..6) {
            let r = request(n, m);
            let all = enumerate_allocations(&r, EnumerationOptions::default()).unwrap();
            prop_assert_eq!(all.len(), n * m);
            for (k, a) in all.iter().enumerate() {
                let p = a.placement.unwrap();
                prop_assert_eq!((p.ad_index, p.position), (k / m + 1, k % m + 1));
                prop_assert_eq!(a.slots[p.position - 1], Slot::Ad(p.ad_index));
                prop_assert_eq!(a.slots.iter().filter(|s| matches!(s, Slot::Ad(_))).count(), 1);
                prop_assert_eq!(a.organic_order(), (0..m - 1).collect::<Vec<_>>());
                prop_assert_eq!(&Allocation::insert(m - 1, p.ad_index, p.position).unwrap(), a);
            }
        }
    }
}
