use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use anyhow::{bail, Context};
use miaa::aam::{run_auction, AuctionOutcome, MechanismParams};
use miaa::bench::{
    evaluate as eval_mechanism, ic_audit, ir_audit, summarize, write_reports_csv, write_reports_json,
    write_summary_csv, ClickSource, EvalReport, GspDynamic, GspFixed, GspRanking, Mechanism, MetricSummary, Miaa,
    PositionRule, Vcg,
};
use miaa::domain::{enumerate_allocations, read_requests_jsonl, write_requests_jsonl};
use miaa::dsm::{train_mechanism as train_dsm, Sample, TrainedMechanism};
use miaa::epm::{train_epm as fit_epm, train_pointwise, EpmModel, LabeledList, PointwiseModel, TrainedModel};
use miaa::simgen::{generate_logs, generate_requests, read_logs_jsonl, write_logs_jsonl, World};
use miaa::Request;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;

/// File locations inside a run directory.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.toml")
    }
    pub fn world(&self) -> PathBuf {
        self.root.join("world.json")
    }
    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }
    pub fn data(&self, name: &str) -> PathBuf {
        self.root.join("data").join(name)
    }
    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.root.join("checkpoints").join(format!("{name}.ckpt"))
    }
    pub fn report(&self, name: &str) -> PathBuf {
        self.root.join("reports").join(name)
    }
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("writing {}", path.display()))?,
    ))
}

fn open(path: &Path, hint: &str) -> anyhow::Result<BufReader<File>> {
    match File::open(path) {
        Ok(f) => Ok(BufReader::new(f)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => bail!("{} not found: {hint}", path.display()),
        Err(e) => Err(e).with_context(|| format!("opening {}", path.display())),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn save_with<F>(path: &Path, f: F) -> anyhow::Result<()>
where
    F: FnOnce(&mut BufWriter<File>) -> miaa::Result<()>,
{
    let mut w = create(path)?;
    f(&mut w)?;
    w.flush()?;
    Ok(())
}

/// Split index ranges `(start, count)`.
struct Splits {
    epm_train: (u64, usize),
    mechanism: (u64, usize),
    test: (u64, usize),
}

fn splits(cfg: &ExperimentConfig) -> Splits {
    let d = &cfg.data;
    let a = d.epm_train_requests as u64;
    let b = a + d.mechanism_requests as u64;
    Splits {
        epm_train: (0, d.epm_train_requests),
        mechanism: (a, d.mechanism_requests),
        test: (b, d.test_requests),
    }
}

fn write_logs(layout: &Layout, name: &str, lists: &[LabeledList]) -> anyhow::Result<()> {
    let requests: Vec<Request> = lists.iter().map(|l| l.request.clone()).collect();
    save_with(&layout.data(&format!("{name}_requests.jsonl")), |w| {
        write_requests_jsonl(w, &requests)
    })?;
    save_with(&layout.data(&format!("{name}_logs.jsonl")), |w| {
        write_logs_jsonl(w, lists)
    })
}

/// All splits of one experiment, in memory.
pub struct Datasets {
    pub epm_train: Vec<LabeledList>,
    pub mechanism: Vec<Request>,
    pub test: Vec<LabeledList>,
}

impl Datasets {
    pub fn generate(cfg: &ExperimentConfig) -> anyhow::Result<Self> {
        let world = World::new(cfg.market.clone())?;
        let s = splits(cfg);
        Ok(Self {
            epm_train: generate_logs(&world, s.epm_train.0, s.epm_train.1)?,
            mechanism: generate_requests(&world, s.mechanism.0, s.mechanism.1),
            test: generate_logs(&world, s.test.0, s.test.1)?,
        })
    }

    pub fn test_requests(&self) -> Vec<Request> {
        self.test.iter().map(|l| l.request.clone()).collect()
    }
}

/// Samples the world and writes every split.
pub fn generate(cfg: &ExperimentConfig) -> anyhow::Result<()> {
    let layout = Layout::new(&cfg.out);
    let data = Datasets::generate(cfg)?;
    write_logs(&layout, "epm_train", &data.epm_train)?;
    save_with(&layout.data("mechanism_requests.jsonl"), |w| {
        write_requests_jsonl(w, &data.mechanism)
    })?;
    write_logs(&layout, "test", &data.test)?;
    write_json(&layout.world(), &cfg.market)?;
    finish(cfg, &layout)
}

fn read_requests(layout: &Layout, name: &str) -> anyhow::Result<Vec<Request>> {
    let path = layout.data(&format!("{name}_requests.jsonl"));
    Ok(read_requests_jsonl(open(&path, "run `generate` first")?)?)
}

fn read_logs(layout: &Layout, name: &str) -> anyhow::Result<Vec<LabeledList>> {
    let requests = read_requests(layout, name)?;
    let path = layout.data(&format!("{name}_logs.jsonl"));
    Ok(read_logs_jsonl(open(&path, "run `generate` first")?, &requests)?)
}

/// AUC and PCOC of one click model on held-out logs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CtrScore {
    pub model: String,
    pub auc: Option<f64>,
    pub pcoc: Option<f64>,
    pub best_epoch: usize,
}

pub struct ClickModels {
    pub epm: TrainedModel<EpmModel>,
    pub pointwise: TrainedModel<PointwiseModel>,
    /// Held-out AUC and PCOC, EPM first.
    pub scores: Vec<CtrScore>,
}

pub fn fit_click_models(
    cfg: &ExperimentConfig,
    train: &[LabeledList],
    test: &[LabeledList],
) -> anyhow::Result<ClickModels> {
    let epm = fit_epm(train, cfg.epm_model(), &cfg.epm.train)?;
    let pointwise = train_pointwise(train, cfg.pointwise_model(), &cfg.pointwise.train)?;
    let (auc, pcoc) = epm.model.score(test)?;
    let (pw_auc, pw_pcoc) = pointwise.model.score(test)?;
    let scores = vec![
        CtrScore {
            model: "epm".into(),
            auc,
            pcoc,
            best_epoch: epm.best_epoch,
        },
        CtrScore {
            model: "pointwise".into(),
            auc: pw_auc,
            pcoc: pw_pcoc,
            best_epoch: pointwise.best_epoch,
        },
    ];
    Ok(ClickModels { epm, pointwise, scores })
}

/// Trains the list-wise EPM and the point-wise baseline on logged lists.
pub fn train_epm(cfg: &ExperimentConfig) -> anyhow::Result<Vec<CtrScore>> {
    let layout = Layout::new(&cfg.out);
    let train = read_logs(&layout, "epm_train")?;
    let test = read_logs(&layout, "test")?;
    let fitted = fit_click_models(cfg, &train, &test)?;
    save_with(&layout.checkpoint("epm"), |w| fitted.epm.model.save(w))?;
    save_with(&layout.report("epm_curve.csv"), |w| fitted.epm.write_curve_csv(w))?;
    save_with(&layout.checkpoint("pointwise"), |w| fitted.pointwise.model.save(w))?;
    save_with(&layout.report("pointwise_curve.csv"), |w| {
        fitted.pointwise.write_curve_csv(w)
    })?;
    write_json(&layout.report("ctr_models.json"), &fitted.scores)?;
    finish(cfg, &layout)?;
    Ok(fitted.scores)
}

fn load_epm(layout: &Layout) -> anyhow::Result<EpmModel> {
    let path = layout.checkpoint("epm");
    if !path.exists() {
        bail!(
            "no EPM checkpoint at {}: train EPM first (`miaa train-epm`)",
            path.display()
        );
    }
    Ok(EpmModel::load(open(&path, "train EPM first")?)?)
}

fn load_pointwise(layout: &Layout) -> anyhow::Result<PointwiseModel> {
    let path = layout.checkpoint("pointwise");
    if !path.exists() {
        bail!(
            "no point-wise checkpoint at {}: train EPM first (`miaa train-epm`)",
            path.display()
        );
    }
    Ok(PointwiseModel::load(open(&path, "train EPM first")?)?)
}

fn load_mechanism(layout: &Layout) -> anyhow::Result<MechanismParams> {
    let path = layout.checkpoint("mechanism");
    if !path.exists() {
        bail!(
            "no mechanism checkpoint at {}: train the mechanism first (`miaa train-mechanism`)",
            path.display()
        );
    }
    Ok(MechanismParams::load(open(&path, "train the mechanism first")?)?)
}

pub fn fit_mechanism(cfg: &ExperimentConfig, epm: &EpmModel, requests: &[Request]) -> anyhow::Result<TrainedMechanism> {
    let samples = Sample::predict_all(epm, requests, &cfg.auction)?;
    Ok(train_dsm(
        &samples,
        cfg.mechanism_model(),
        cfg.alpha,
        &cfg.mechanism.dsm,
        &cfg.auction,
    )?)
}

/// Trains the mechanism networks on frozen EPM predictions.
pub fn train_mechanism(cfg: &ExperimentConfig) -> anyhow::Result<MechanismParams> {
    let layout = Layout::new(&cfg.out);
    let epm = load_epm(&layout)?;
    let requests = read_requests(&layout, "mechanism")?;
    let trained = fit_mechanism(cfg, &epm, &requests)?;
    save_with(&layout.checkpoint("mechanism"), |w| trained.params.save(w))?;
    save_with(&layout.report("dsm_curve.csv"), |w| trained.write_curve_csv(w))?;
    finish(cfg, &layout)?;
    Ok(trained.params)
}

/// Every mechanism under comparison, MIAA first.
pub fn mechanisms(
    cfg: &ExperimentConfig,
    params: MechanismParams,
    pointwise: PointwiseModel,
) -> Vec<Box<dyn Mechanism>> {
    let ranking = GspRanking {
        pointwise: Arc::new(pointwise),
        position: cfg.eval.gsp_position,
    };
    vec![
        Box::new(Miaa {
            params,
            options: cfg.auction,
        }),
        Box::new(Vcg { options: cfg.auction }),
        Box::new(GspFixed {
            ranking: ranking.clone(),
        }),
        Box::new(GspDynamic {
            ranking,
            alpha: cfg.alpha,
            rule: PositionRule::Payment,
        }),
    ]
}

fn test_samples(cfg: &ExperimentConfig, layout: &Layout, epm: &EpmModel) -> anyhow::Result<Vec<Sample>> {
    let requests = read_requests(layout, "test")?;
    Ok(Sample::predict_all(epm, &requests, &cfg.auction)?)
}

/// One expected-mode report per mechanism, then `eval.click_seeds` realized ones.
pub fn evaluate_all(
    cfg: &ExperimentConfig,
    epm: &EpmModel,
    pointwise: PointwiseModel,
    params: MechanismParams,
    requests: &[Request],
) -> anyhow::Result<Vec<EvalReport>> {
    let samples = Sample::predict_all(epm, requests, &cfg.auction)?;
    let world = World::new(cfg.market.clone())?;
    let mut reports = Vec::new();
    for m in mechanisms(cfg, params, pointwise) {
        reports.push(eval_mechanism(
            m.as_ref(),
            &samples,
            ClickSource::Expected,
            cfg.alpha,
            cfg.seed,
        )?);
        for salt in 0..cfg.eval.click_seeds {
            let source = ClickSource::Realized { world: &world, salt };
            reports.push(eval_mechanism(m.as_ref(), &samples, source, cfg.alpha, salt)?);
        }
    }
    Ok(reports)
}

/// Runs all mechanisms on the test split in expected and realized modes.
pub fn evaluate(cfg: &ExperimentConfig) -> anyhow::Result<Vec<EvalReport>> {
    let layout = Layout::new(&cfg.out);
    let epm = load_epm(&layout)?;
    let pointwise = load_pointwise(&layout)?;
    let params = load_mechanism(&layout)?;
    let requests = read_requests(&layout, "test")?;
    let reports = evaluate_all(cfg, &epm, pointwise, params, &requests)?;
    save_with(&layout.report("eval.csv"), |w| write_reports_csv(w, &reports))?;
    save_with(&layout.report("eval.json"), |w| write_reports_json(w, &reports))?;
    save_with(&layout.report("eval_summary.csv"), |w| {
        write_summary_csv(w, &summarize(&reports))
    })?;
    finish(cfg, &layout)?;
    Ok(reports)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditSummary {
    pub mechanism: String,
    pub requests: usize,
    pub ic_max_regret: f64,
    pub ic_mean_regret: f64,
    pub ir_violations: usize,
}

/// IC and IR audits on the first `eval.ic_requests` test requests.
pub fn audit(cfg: &ExperimentConfig) -> anyhow::Result<Vec<AuditSummary>> {
    let layout = Layout::new(&cfg.out);
    let epm = load_epm(&layout)?;
    let pointwise = load_pointwise(&layout)?;
    let params = load_mechanism(&layout)?;
    let mut samples = test_samples(cfg, &layout, &epm)?;
    samples.truncate(cfg.eval.ic_requests.max(1));

    let mut all = mechanisms(cfg, params, pointwise.clone());
    all.push(Box::new(GspDynamic {
        ranking: GspRanking {
            pointwise: Arc::new(pointwise),
            position: cfg.eval.gsp_position,
        },
        alpha: cfg.alpha,
        rule: PositionRule::Bid,
    }));
    let mut out = Vec::new();
    for m in &all {
        let ic = ic_audit(m.as_ref(), &samples, cfg.eval.ic_grid_points)?;
        let ir = ir_audit(m.as_ref(), &samples)?;
        save_with(&layout.report(&format!("ic_regret_{}.csv", m.name())), |w| {
            ic.write_csv(w)
        })?;
        out.push(AuditSummary {
            mechanism: m.name().to_string(),
            requests: samples.len(),
            ic_max_regret: ic.max_regret,
            ic_mean_regret: ic.mean_regret,
            ir_violations: ir.violations,
        });
    }
    write_json(&layout.report("audit.json"), &out)?;
    finish(cfg, &layout)?;
    Ok(out)
}

/// Wall-clock cost of serving; printed, never written, so reports stay reproducible.
#[derive(Clone, Debug)]
pub struct Latency {
    pub requests: usize,
    pub mean_us: f64,
    pub p50_us: f64,
    pub p99_us: f64,
}

/// Replays test requests through enumerate, predict, select and price.
pub fn serve_sim(cfg: &ExperimentConfig) -> anyhow::Result<(Vec<AuctionOutcome>, Latency)> {
    let layout = Layout::new(&cfg.out);
    let epm = load_epm(&layout)?;
    let params = load_mechanism(&layout)?;
    let requests = read_requests(&layout, "test")?;
    let mut outcomes = Vec::new();
    let mut micros = Vec::new();
    for r in requests.iter().take(cfg.serve.requests) {
        let start = Instant::now();
        let allocations = enumerate_allocations(r, cfg.auction.enumeration())?;
        let predicted = epm.predict_request(r, allocations)?;
        let outcome = run_auction(&params, r, &predicted, &cfg.auction)?;
        micros.push(start.elapsed().as_secs_f64() * 1e6);
        outcomes.push(outcome);
    }
    let mut w = create(&layout.report("serve_outcomes.jsonl"))?;
    for o in &outcomes {
        serde_json::to_writer(&mut w, o)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    finish(cfg, &layout)?;
    micros.sort_by(f64::total_cmp);
    let pct = |q: f64| {
        micros
            .get(((micros.len() as f64 - 1.0) * q).round() as usize)
            .copied()
            .unwrap_or(0.0)
    };
    let latency = Latency {
        requests: micros.len(),
        mean_us: micros.iter().sum::<f64>() / micros.len().max(1) as f64,
        p50_us: pct(0.5),
        p99_us: pct(0.99),
    };
    Ok((outcomes, latency))
}

/// Pools `reports/eval.json` of several runs (typically one per seed).
pub fn compare(runs: &[PathBuf], out: &Path) -> anyhow::Result<Vec<MetricSummary>> {
    if runs.is_empty() {
        bail!("compare needs at least one run directory");
    }
    let mut reports: Vec<EvalReport> = Vec::new();
    for run in runs {
        let path = Layout::new(run).report("eval.json");
        let rs: Vec<EvalReport> = serde_json::from_reader(open(&path, "run `evaluate` in that directory first")?)
            .with_context(|| format!("parsing {}", path.display()))?;
        // one expected-mode row per mechanism and run, so seeds are runs
        reports.extend(rs.into_iter().filter(|r| r.mode == "expected"));
    }
    let rows = summarize(&reports);
    save_with(&out.join("compare.csv"), |w| write_summary_csv(w, &rows))?;
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_sha256: String,
    pub seed: u64,
    pub seeds: BTreeMap<String, u64>,
    /// Relative path to SHA-256 of every artifact in the run directory.
    pub files: BTreeMap<String, String>,
}

fn sha256_file(path: &Path) -> anyhow::Result<String> {
    let bytes = fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> anyhow::Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            collect_files(&p, out)?;
        } else {
            out.push(p);
        }
    }
    Ok(())
}

/// Rewrites `config.toml` and `manifest.json` for the current state of the run.
fn finish(cfg: &ExperimentConfig, layout: &Layout) -> anyhow::Result<()> {
    let text = cfg.to_toml()?;
    fs::create_dir_all(&layout.root)?;
    fs::write(layout.config(), &text)?;
    let mut files = Vec::new();
    collect_files(&layout.root, &mut files)?;
    let manifest_path = layout.manifest();
    let mut hashes = BTreeMap::new();
    for f in files.iter().filter(|f| **f != manifest_path) {
        let rel = f.strip_prefix(&layout.root)?.to_string_lossy().replace('\\', "/");
        hashes.insert(rel, sha256_file(f)?);
    }
    let seeds = BTreeMap::from([
        ("market".to_string(), cfg.market.seed),
        ("epm".to_string(), cfg.epm.train.seed),
        ("pointwise".to_string(), cfg.pointwise.train.seed),
        ("mechanism".to_string(), cfg.mechanism.dsm.seed),
    ]);
    let manifest = Manifest {
        config_sha256: hex::encode(Sha256::digest(text.as_bytes())),
        seed: cfg.seed,
        seeds,
        files: hashes,
    };
    write_json(&manifest_path, &manifest)
}
