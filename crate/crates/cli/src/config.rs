use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use miaa::aam::{AuctionOptions, MechanismConfig};
use miaa::dsm::DsmConfig;
use miaa::epm::{EpmConfig, EpmTrainConfig, PointwiseConfig};
use miaa::simgen::{MarketConfig, DENSE_DIM};
use serde::{Deserialize, Serialize};

/// Request counts per split. Index ranges are consecutive and disjoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Logged lists (uniformly random allocations) for the click models.
    pub epm_train_requests: usize,
    pub mechanism_requests: usize,
    pub test_requests: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            epm_train_requests: 80_000,
            mechanism_requests: 4_000,
            test_requests: 2_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpmSection {
    pub embedding_dim: usize,
    pub position_dim: usize,
    pub hidden: Vec<usize>,
    pub train: EpmTrainConfig,
}

impl Default for EpmSection {
    fn default() -> Self {
        let model = EpmConfig::default();
        Self {
            embedding_dim: model.embedding_dim,
            position_dim: model.position_dim,
            hidden: model.hidden,
            train: EpmTrainConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PointwiseSection {
    pub embedding_dim: usize,
    pub hidden: Vec<usize>,
    pub train: EpmTrainConfig,
}

impl Default for PointwiseSection {
    fn default() -> Self {
        Self {
            embedding_dim: 8,
            hidden: vec![64, 32],
            train: EpmTrainConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MechanismSection {
    pub mu_hidden: Vec<usize>,
    pub lambda_hidden: Vec<usize>,
    pub dsm: DsmConfig,
}

impl Default for MechanismSection {
    fn default() -> Self {
        Self {
            mu_hidden: vec![16],
            lambda_hidden: vec![32, 16],
            dsm: DsmConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Click-simulation salts for the realized mode.
    pub click_seeds: u64,
    /// Slot used by the fixed-position GSP baseline (1-based).
    pub gsp_position: usize,
    pub ic_requests: usize,
    pub ic_grid_points: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            click_seeds: 3,
            gsp_position: 2,
            ic_requests: 500,
            ic_grid_points: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeSection {
    pub requests: usize,
}

impl Default for ServeSection {
    fn default() -> Self {
        Self { requests: 200 }
    }
}

/// One experiment. Component seeds are derived from `seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// GMV weight in the platform objective `Rev + alpha * Gmv`.
    pub alpha: f64,
    /// Output directory. Not written back, so a run's files do not depend on where it lives.
    #[serde(skip_serializing)]
    pub out: PathBuf,
    pub market: MarketConfig,
    pub data: DataConfig,
    pub epm: EpmSection,
    pub pointwise: PointwiseSection,
    pub mechanism: MechanismSection,
    pub auction: AuctionOptions,
    pub eval: EvalSection,
    pub serve: ServeSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            alpha: 0.5,
            out: PathBuf::from("runs/default"),
            market: MarketConfig::default(),
            data: DataConfig::default(),
            epm: EpmSection::default(),
            pointwise: PointwiseSection::default(),
            mechanism: MechanismSection::default(),
            auction: AuctionOptions::default(),
            eval: EvalSection::default(),
            serve: ServeSection::default(),
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub alpha: Option<f64>,
    pub allow_no_ad: bool,
    pub clamp_payment_at_zero: bool,
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

impl ExperimentConfig {
    pub fn parse(text: &str, origin: &str) -> anyhow::Result<Self> {
        toml::from_str(text).map_err(|e| match e.span() {
            Some(span) => anyhow::anyhow!("{origin}: line {}: {}", line_of(text, span.start), e.message()),
            None => anyhow::anyhow!("{origin}: {}", e.message()),
        })
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn to_toml(&self) -> anyhow::Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// Applies overrides, derives component seeds and checks consistency.
    pub fn resolve(mut self, o: &Overrides) -> anyhow::Result<Self> {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(out) = &o.out {
            self.out = out.clone();
        }
        if let Some(a) = o.alpha {
            self.alpha = a;
        }
        self.auction.allow_no_ad |= o.allow_no_ad;
        self.auction.clamp_payment_at_zero |= o.clamp_payment_at_zero;

        self.market.seed = self.seed;
        self.epm.train.seed = self.seed.wrapping_mul(31).wrapping_add(1);
        self.pointwise.train.seed = self.seed.wrapping_mul(31).wrapping_add(2);
        self.mechanism.dsm.seed = self.seed.wrapping_mul(31).wrapping_add(3);

        if !self.alpha.is_finite() || self.alpha < 0.0 {
            bail!("alpha must be a non-negative number, got {}", self.alpha);
        }
        self.market.validate()?;
        if self.data.epm_train_requests == 0 || self.data.mechanism_requests == 0 || self.data.test_requests == 0 {
            bail!("every data split needs at least one request");
        }
        if self.eval.gsp_position == 0 || self.eval.gsp_position > self.market.list_len {
            bail!("gsp_position must lie in 1..={}", self.market.list_len);
        }
        Ok(self)
    }

    pub fn epm_model(&self) -> EpmConfig {
        EpmConfig {
            list_len: self.market.list_len,
            vocab_sizes: self.market.vocab_sizes(),
            embedding_dim: self.epm.embedding_dim,
            position_dim: self.epm.position_dim,
            dense_dim: DENSE_DIM,
            user_dim: self.market.user_dim,
            request_dim: self.market.request_dim,
            hidden: self.epm.hidden.clone(),
        }
    }

    pub fn pointwise_model(&self) -> PointwiseConfig {
        PointwiseConfig {
            list_len: self.market.list_len,
            vocab_sizes: self.market.vocab_sizes(),
            embedding_dim: self.pointwise.embedding_dim,
            dense_dim: DENSE_DIM,
            hidden: self.pointwise.hidden.clone(),
        }
    }

    pub fn mechanism_model(&self) -> MechanismConfig {
        MechanismConfig {
            list_len: self.market.list_len,
            value_dim: 2,
            user_dim: self.market.user_dim,
            request_dim: self.market.request_dim,
            mu_hidden: self.mechanism.mu_hidden.clone(),
            lambda_hidden: self.mechanism.lambda_hidden.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = ExperimentConfig::parse("", "inline").unwrap();
        assert_eq!(c, ExperimentConfig::default());
    }

    #[test]
    fn errors_name_the_line() {
        let text = "seed = 3\n\n[market]\nnum_ads = \"three\"\n";
        let err = ExperimentConfig::parse(text, "bad.toml").unwrap_err().to_string();
        assert!(err.starts_with("bad.toml: line 4:"), "{err}");
        let err = ExperimentConfig::parse("seed = 1\nunknown_key = 2\n", "x")
            .unwrap_err()
            .to_string();
        assert!(err.contains("line 2"), "{err}");
    }

    #[test]
    fn overrides_win_and_seeds_follow_master() {
        let c = ExperimentConfig::parse("seed = 3\nalpha = 0.3\n", "inline").unwrap();
        let r = c
            .resolve(&Overrides {
                seed: Some(9),
                alpha: Some(0.5),
                allow_no_ad: true,
                ..Overrides::default()
            })
            .unwrap();
        assert_eq!((r.seed, r.market.seed, r.alpha), (9, 9, 0.5));
        assert!(r.auction.allow_no_ad && !r.auction.clamp_payment_at_zero);
        assert_ne!(r.epm.train.seed, r.mechanism.dsm.seed);
    }

    #[test]
    fn shipped_default_file_matches_builtins() {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.toml");
        let c = ExperimentConfig::load(&path).unwrap();
        let o = Overrides::default();
        assert_eq!(c.resolve(&o).unwrap(), ExperimentConfig::default().resolve(&o).unwrap());
    }

    #[test]
    fn round_trips_through_toml() {
        let c = ExperimentConfig::default().resolve(&Overrides::default()).unwrap();
        let back = ExperimentConfig::parse(&c.to_toml().unwrap(), "round").unwrap();
        assert_eq!(c, back);
    }
}
