//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. `ACCEPTANCE_ONLY=1,3,9` runs a subset.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::sync::Arc;
use std::time::{Duration, Instant};

use anyhow::{ensure, Context};
use miaa::aam::{
    misreport_grid, run_auction, settle, social_welfare, AuctionOptions, MechanismConfig, MechanismParams,
    WelfareScores,
};
use miaa::bench::{ic_audit, ir_audit, GspDynamic, GspRanking, Mechanism, Miaa, PositionRule, Vcg};
use miaa::domain::{enumerate_allocations, AdCandidate, ItemFeatures};
use miaa::dsm::{
    allocation_objectives, loss_and_gradient, reward_loss, train_mechanism, winning_probs, DsmConfig, Sample,
};
use miaa::epm::{ce_loss, EpmConfig, EpmModel, EpmPrediction, PointwiseConfig, PointwiseModel, PredictedRequest};
use miaa::simgen::{
    generate_logs, generate_requests, ingest_avito_sessions, simulated_ctr_means, AvitoOptions, MarketConfig, World,
    DENSE_DIM, LOGGED_POSITIONS,
};
use miaa::Request;
use miaa_cli::pipeline::{evaluate_all, fit_click_models, fit_mechanism, Datasets};
use miaa_cli::{ExperimentConfig, Overrides};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const IC_TOLERANCE: f64 = 1e-9;
const IR_TOLERANCE: f64 = 1e-9;
const IC_GRID: usize = 50;
const IC_BUDGET: Duration = Duration::from_secs(5 * 60);
const CORPUS_MIN: usize = 10_000;
const VCG_INSTANCES: usize = 1_000;
const EPM_GRAD_TOL: f64 = 1e-4;
const MECH_GRAD_TOL: f64 = 1e-3;
const GRAD_TRIALS: u64 = 100;
const MIN_DELTA_AUC: f64 = 0.01;
const MAX_PCOC_GAP: f64 = 0.1;
const CTR_BUDGET: Duration = Duration::from_secs(15 * 60);
const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
const MONOTONE_TOL: f64 = 1e-12;

/// One auction instance: a request with predictions, scored by `net`.
struct Instance {
    sample: Sample,
    net: usize,
    options: AuctionOptions,
}

/// Random and briefly trained networks over every `(n, m)` in `2..=5`.
struct Corpus {
    nets: Vec<MechanismParams>,
    instances: Vec<Instance>,
    built_in: Duration,
}

fn mechanism_config(m: usize) -> MechanismConfig {
    MechanismConfig {
        list_len: m,
        value_dim: 2,
        user_dim: 4,
        request_dim: 4,
        mu_hidden: vec![8],
        lambda_hidden: vec![8],
    }
}

fn random_predictions(
    request: &Request,
    options: &AuctionOptions,
    rng: &mut ChaCha8Rng,
) -> anyhow::Result<PredictedRequest> {
    let m = request.list_len();
    let allocations = enumerate_allocations(request, options.enumeration())?;
    let predictions = allocations
        .iter()
        .map(|_| EpmPrediction {
            pctr: (0..m).map(|_| rng.random_range(0.01..0.9)).collect(),
            pgmv_per_click: (0..m).map(|_| rng.random_range(0.0..6.0)).collect(),
        })
        .collect();
    Ok(PredictedRequest::new(allocations, predictions)?)
}

fn build_corpus() -> anyhow::Result<Corpus> {
    let start = Instant::now();
    let per_group = CORPUS_MIN.div_ceil(16 * 4);
    let mut nets = Vec::new();
    let mut instances = Vec::new();
    for n in 2..=5 {
        for m in 2..=5 {
            let seed = (n * 10 + m) as u64;
            let world = World::new(MarketConfig {
                num_ads: n,
                list_len: m,
                seed,
                ..MarketConfig::default()
            })?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let plain = AuctionOptions::default();
            let requests = generate_requests(&world, 0, 4 * per_group + 200);
            let train: Vec<Sample> = requests[4 * per_group..]
                .iter()
                .map(|r| {
                    Ok(Sample {
                        request: r.clone(),
                        predicted: random_predictions(r, &plain, &mut rng)?,
                    })
                })
                .collect::<anyhow::Result<_>>()?;

            let random = MechanismParams::new(mechanism_config(m), 0.5, &mut rng)?;
            let dsm = DsmConfig {
                epochs: 3,
                batch_size: 32,
                learning_rate: 1e-2,
                tau_start: 0.1,
                tau_end: 0.03,
                ic_spot_requests: 5,
                seed,
                ..DsmConfig::default()
            };
            let trained = train_mechanism(&train, mechanism_config(m), 0.5, &dsm, &plain)?.params;
            let base = nets.len();
            nets.push(random);
            nets.push(trained);

            for (g, chunk) in requests[..4 * per_group].chunks(per_group).enumerate() {
                let options = AuctionOptions {
                    allow_no_ad: g % 2 == 1,
                    clamp_payment_at_zero: false,
                };
                for r in chunk {
                    instances.push(Instance {
                        sample: Sample {
                            request: r.clone(),
                            predicted: random_predictions(r, &options, &mut rng)?,
                        },
                        net: base + g / 2,
                        options,
                    });
                }
            }
        }
    }
    Ok(Corpus {
        nets,
        instances,
        built_in: start.elapsed(),
    })
}

impl Corpus {
    fn miaa(&self, inst: &Instance) -> Miaa {
        Miaa {
            params: self.nets[inst.net].clone(),
            options: inst.options,
        }
    }

    /// Instances grouped by (network, options) so each mechanism is built once.
    fn groups(&self) -> BTreeMap<(usize, bool), Vec<&Instance>> {
        let mut out: BTreeMap<(usize, bool), Vec<&Instance>> = BTreeMap::new();
        for inst in &self.instances {
            out.entry((inst.net, inst.options.allow_no_ad)).or_default().push(inst);
        }
        out
    }
}

type Verdict = anyhow::Result<(bool, String)>;

fn ic_exactness(corpus: &Corpus) -> Verdict {
    let start = Instant::now();
    let mut max_regret: f64 = 0.0;
    let mut audited = 0;
    for group in corpus.groups().values() {
        let mech = corpus.miaa(group[0]);
        let samples: Vec<Sample> = group.iter().map(|i| i.sample.clone()).collect();
        let audit = ic_audit(&mech, &samples, IC_GRID)?;
        max_regret = max_regret.max(audit.max_regret);
        audited += samples.len();
    }
    let elapsed = start.elapsed() + corpus.built_in;
    Ok((
        audited >= CORPUS_MIN && max_regret <= IC_TOLERANCE && elapsed <= IC_BUDGET,
        format!(
            "max regret {max_regret:.3e} over {audited} instances (tol {IC_TOLERANCE:e}), {:.1} s",
            elapsed.as_secs_f64()
        ),
    ))
}

fn ir_exactness(corpus: &Corpus) -> Verdict {
    let (mut miaa_v, mut vcg_v, mut count) = (0, 0, 0);
    for group in corpus.groups().values() {
        let options = group[0].options;
        let samples: Vec<Sample> = group.iter().map(|i| i.sample.clone()).collect();
        miaa_v += ir_audit(&corpus.miaa(group[0]), &samples)?.violations;
        vcg_v += ir_audit(&Vcg { options }, &samples)?.violations;
        count += samples.len();
    }
    Ok((
        miaa_v == 0 && vcg_v == 0,
        format!("violations MIAA {miaa_v}, VCG {vcg_v} over {count} instances (payment <= bid + {IR_TOLERANCE:e})"),
    ))
}

/// Textbook VCG: the winner pays the best welfare of lists without it over its CTR.
fn vcg_oracle(bids: &[f64], predicted: &PredictedRequest) -> (usize, Option<(usize, f64)>) {
    let w: Vec<f64> = (0..predicted.len())
        .map(|k| match predicted.allocations[k].ad_index() {
            Some(i) => bids[i - 1] * predicted.ad_ctr(k),
            None => 0.0,
        })
        .collect();
    let mut best = 0;
    for k in 1..w.len() {
        if w[k] > w[best] {
            best = k;
        }
    }
    let Some(i) = predicted.allocations[best].ad_index() else {
        return (best, None);
    };
    let others = (0..w.len())
        .filter(|&k| predicted.allocations[k].ad_index() != Some(i))
        .map(|k| w[k])
        .fold(f64::NEG_INFINITY, f64::max);
    (best, Some((i, others / predicted.ad_ctr(best))))
}

fn second_price_request() -> anyhow::Result<(Request, PredictedRequest)> {
    let ad = |id: &str, bid: f64| AdCandidate {
        ad_id: id.into(),
        bid,
        true_value: Some(bid),
        value_dist_features: vec![0.75, 0.14],
        gmv_per_click: 3.0,
        features: ItemFeatures {
            sparse_ids: vec![1, 0],
            dense: vec![0.0; DENSE_DIM],
            position_hint: None,
        },
    };
    let request = Request {
        request_id: "second-price".into(),
        user_features: vec![0.0; 4],
        request_features: vec![0.0; 4],
        organic: Vec::new(),
        ads: vec![ad("a", 0.8), ad("b", 0.5)],
    };
    let allocations = enumerate_allocations(&request, AuctionOptions::default().enumeration())?;
    let predictions = allocations
        .iter()
        .map(|_| EpmPrediction {
            pctr: vec![1.0],
            pgmv_per_click: vec![0.0],
        })
        .collect();
    Ok((request, PredictedRequest::new(allocations, predictions)?))
}

fn vcg_reduction(corpus: &Corpus) -> Verdict {
    let (sp_request, sp_predicted) = second_price_request()?;
    let stride = corpus.instances.len() / VCG_INSTANCES;
    let mut cases: Vec<(&Request, &PredictedRequest, AuctionOptions)> = corpus
        .instances
        .iter()
        .step_by(stride.max(1))
        .take(VCG_INSTANCES - 1)
        .map(|i| (&i.sample.request, &i.sample.predicted, i.options))
        .collect();
    cases.push((&sp_request, &sp_predicted, AuctionOptions::default()));

    let mut mismatches = 0;
    for (request, predicted, options) in &cases {
        let bids = request.bids();
        let (k, winner) = vcg_oracle(&bids, predicted);
        let forced = WelfareScores::forced(vec![1.0; request.num_ads()], vec![0.0; predicted.len()], predicted);
        let s = settle(&forced, &bids, options)?;
        let via_trait = Vcg { options: *options }.prepare(request, predicted)?.run(&bids)?;
        let got = s.winner.map(|(i, p, _)| (i, p.to_bits()));
        let got_trait = via_trait
            .winner
            .as_ref()
            .map(|w| (w.ad_index, w.payment_per_click.to_bits()));
        let want = winner.map(|(i, p)| (i, p.to_bits()));
        if s.allocation_index != k || via_trait.allocation_index != k || got != want || got_trait != want {
            mismatches += 1;
        }
    }
    let sp = Vcg::default()
        .prepare(&sp_request, &sp_predicted)?
        .run(&sp_request.bids())?;
    let sp_payment = sp.payment();
    Ok((
        mismatches == 0 && sp_payment == 0.5,
        format!(
            "{mismatches} bitwise mismatches over {} instances, single-slot payment {sp_payment}",
            cases.len()
        ),
    ))
}

fn argmax_oracle(corpus: &Corpus) -> Verdict {
    let mut mismatches = 0;
    for inst in &corpus.instances {
        let params = &corpus.nets[inst.net];
        let (r, pred) = (&inst.sample.request, &inst.sample.predicted);
        let bids = r.bids();
        let mut best = (0, f64::NEG_INFINITY);
        for k in 0..pred.len() {
            let sw = social_welfare(params, r, &pred.allocations[k], &pred.predictions[k], &bids)?;
            if sw > best.1 {
                best = (k, sw);
            }
        }
        if run_auction(params, r, pred, &inst.options)?.allocation_index != best.0 {
            mismatches += 1;
        }
    }
    Ok((
        mismatches == 0,
        format!("{mismatches} mismatches over {} instances", corpus.instances.len()),
    ))
}

fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / norm(a).max(norm(b)).max(1e-12)
}

/// Central differences of `f` around `x`.
fn numeric_gradient(x: &[f64], mut f: impl FnMut(&[f64]) -> anyhow::Result<f64>) -> anyhow::Result<Vec<f64>> {
    let h = 1e-5;
    let mut work = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for k in 0..x.len() {
        work[k] = x[k] + h;
        let up = f(&work)?;
        work[k] = x[k] - h;
        let down = f(&work)?;
        work[k] = x[k];
        out.push((up - down) / (2.0 * h));
    }
    Ok(out)
}

fn gradient_integrity() -> Verdict {
    let market = MarketConfig {
        num_ads: 3,
        list_len: 3,
        catalog_organic: 12,
        catalog_ads: 6,
        categories: 3,
        user_dim: 2,
        request_dim: 2,
        ..MarketConfig::default()
    };
    let world = World::new(market.clone())?;
    let epm_cfg = EpmConfig {
        list_len: 3,
        vocab_sizes: market.vocab_sizes(),
        embedding_dim: 2,
        position_dim: 2,
        dense_dim: DENSE_DIM,
        user_dim: 2,
        request_dim: 2,
        hidden: vec![4],
    };
    let mech_cfg = MechanismConfig {
        list_len: 3,
        value_dim: 2,
        user_dim: 2,
        request_dim: 2,
        mu_hidden: vec![4],
        lambda_hidden: vec![4],
    };
    let tau = 0.1;
    let (mut epm_worst, mut mech_worst): (f64, f64) = (0.0, 0.0);
    for trial in 0..GRAD_TRIALS {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + trial);

        let model = EpmModel::new(epm_cfg.clone(), &mut rng)?;
        let lists = generate_logs(&world, trial * 3, 3)?;
        let refs: Vec<_> = lists.iter().collect();
        let (_, analytic) = model.loss_and_gradient(&refs, 0.0)?;
        let theta = model.params().flatten();
        let mut probe = model.clone();
        let numeric = numeric_gradient(&theta, |x| {
            probe.params_mut().assign_flat(x)?;
            let mut total = 0.0;
            for l in &lists {
                let p = probe.predict(&l.request, std::slice::from_ref(&l.allocation))?;
                total += ce_loss(&p[0], &l.clicks)?;
            }
            Ok(total)
        })?;
        epm_worst = epm_worst.max(relative_error(&analytic, &numeric));

        let params = MechanismParams::new(mech_cfg.clone(), 0.5, &mut rng)?;
        let options = AuctionOptions::default();
        let samples: Vec<Sample> = generate_requests(&world, 10_000 + trial * 3, 3)
            .into_iter()
            .map(|r| {
                Ok(Sample {
                    predicted: random_predictions(&r, &options, &mut rng)?,
                    request: r,
                })
            })
            .collect::<anyhow::Result<_>>()?;
        let refs: Vec<&Sample> = samples.iter().collect();
        let (_, analytic) = loss_and_gradient(&params, &refs, tau, 0.0)?;
        let theta = params.store().flatten();
        let mut probe = params.clone();
        let numeric = numeric_gradient(&theta, |x| {
            probe.store_mut().assign_flat(x)?;
            let mut total = 0.0;
            for s in &samples {
                let (rev, gmv) = allocation_objectives(&probe, &s.request, &s.predicted)?;
                let scores = miaa::aam::score_request(&probe, &s.request, &s.predicted)?;
                let pr = winning_probs(&scores.welfare_all(&s.request.bids()), tau)?;
                total += reward_loss(&pr, &rev, &gmv, probe.alpha())?;
            }
            Ok(total / samples.len() as f64)
        })?;
        mech_worst = mech_worst.max(relative_error(&analytic, &numeric));
    }
    Ok((
        epm_worst <= EPM_GRAD_TOL && mech_worst <= MECH_GRAD_TOL,
        format!(
            "worst relative error EPM {epm_worst:.2e} (tol {EPM_GRAD_TOL:e}), mechanism {mech_worst:.2e} (tol {MECH_GRAD_TOL:e}) over {GRAD_TRIALS} trials"
        ),
    ))
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, var.sqrt())
}

/// Default-config experiment per seed: click-model scores and expected-mode objectives.
struct SeedRun {
    epm_auc: f64,
    pointwise_auc: f64,
    epm_pcoc: f64,
    objective: BTreeMap<String, f64>,
}

fn run_seeds() -> anyhow::Result<(Vec<SeedRun>, Duration)> {
    let start = Instant::now();
    let mut runs = Vec::new();
    for seed in SEEDS {
        let cfg = ExperimentConfig::default().resolve(&Overrides {
            seed: Some(seed),
            ..Overrides::default()
        })?;
        let data = Datasets::generate(&cfg)?;
        let models = fit_click_models(&cfg, &data.epm_train, &data.test)?;
        let (epm, pw) = (&models.scores[0], &models.scores[1]);
        let mech = fit_mechanism(&cfg, &models.epm.model, &data.mechanism)?;
        let reports = evaluate_all(
            &cfg,
            &models.epm.model,
            models.pointwise.model.clone(),
            mech.params,
            &data.test_requests(),
        )?;
        let objective = reports
            .iter()
            .filter(|r| r.mode == "expected")
            .map(|r| (r.mechanism.clone(), r.objective))
            .collect();
        let run = SeedRun {
            epm_auc: epm.auc.context("EPM AUC undefined")?,
            pointwise_auc: pw.auc.context("point-wise AUC undefined")?,
            epm_pcoc: epm.pcoc.context("EPM PCOC undefined")?,
            objective,
        };
        eprintln!(
            "  seed {seed}: EPM auc {:.4} pcoc {:.3}, point-wise auc {:.4}, objectives {:?}",
            run.epm_auc, run.epm_pcoc, run.pointwise_auc, run.objective
        );
        runs.push(run);
    }
    Ok((runs, start.elapsed()))
}

fn externality_modeling(runs: &[SeedRun], elapsed: Duration) -> Verdict {
    let delta: Vec<f64> = runs.iter().map(|r| r.epm_auc - r.pointwise_auc).collect();
    let pcoc: Vec<f64> = runs.iter().map(|r| r.epm_pcoc).collect();
    let (d, _) = mean_std(&delta);
    let (p, _) = mean_std(&pcoc);
    Ok((
        d >= MIN_DELTA_AUC && (p - 1.0).abs() <= MAX_PCOC_GAP && elapsed <= CTR_BUDGET,
        format!(
            "mean dAUC {d:.4} (min {MIN_DELTA_AUC}), mean PCOC {p:.3} (|x-1| <= {MAX_PCOC_GAP}), {} seeds, {:.0} s",
            runs.len(),
            elapsed.as_secs_f64()
        ),
    ))
}

fn mechanism_lift(runs: &[SeedRun]) -> Verdict {
    let series = |name: &str| -> anyhow::Result<Vec<f64>> {
        runs.iter()
            .map(|r| {
                r.objective
                    .get(name)
                    .copied()
                    .with_context(|| format!("no {name} report"))
            })
            .collect()
    };
    let miaa = series("miaa")?;
    let gsp = series("gsp_fixed")?;
    let vcg = series("vcg")?;
    let dynamic = series("gsp_dynamic")?;
    let lift: Vec<f64> = miaa.iter().zip(&gsp).map(|(a, b)| a - b).collect();
    let (lm, ls) = mean_std(&lift);
    let (m, _) = mean_std(&miaa);
    let (v, _) = mean_std(&vcg);
    let (g, _) = mean_std(&dynamic);
    Ok((
        lm - ls > 0.0 && m >= v && m >= g,
        format!("MIAA - GSP-fixed {lm:.4} +- {ls:.4}; mean objective MIAA {m:.4}, VCG {v:.4}, GSP-dynamic {g:.4}"),
    ))
}

fn avito_stream(pages: usize) -> String {
    let mut s = String::from("SearchID\tAdID\tPosition\tObjectType\tHistCTR\tIsClick\n");
    for p in 0..pages {
        for (k, pos) in LOGGED_POSITIONS.iter().enumerate() {
            // every item appears once so per-item CTR draws are independent
            let ad = 10_000 + p * 5 + k;
            let (ty, ctr, click) = match pos {
                1 => (3, "0.05", if p % 10 == 0 { "1" } else { "0" }),
                7 => (3, "0.01", if p % 50 == 0 { "1" } else { "0" }),
                _ => (1, "", ""),
            };
            s.push_str(&format!("{p}\t{ad}\t{pos}\t{ty}\t{ctr}\t{click}\n"));
        }
    }
    s
}

fn recipe_fidelity() -> Verdict {
    let (m2, m6) = simulated_ctr_means(0.10, 0.02);
    let means_ok = (m2 - 0.084).abs() < 1e-12 && (m6 - 0.036).abs() < 1e-12;
    let pages = 5_000;
    let d = ingest_avito_sessions(avito_stream(pages).as_bytes(), &AvitoOptions::default())?;
    let corpus_ok = (d.ctr1 - 0.10).abs() < 1e-12 && (d.ctr7 - 0.02).abs() < 1e-12;
    let split_ok = d.requests.len() == pages && d.requests.iter().all(|r| r.num_ads() == 2 && r.organic.len() == 3);
    let slot_mean =
        |slot: usize| d.sessions.iter().filter_map(|s| s.simulated_ctr[slot]).sum::<f64>() / d.sessions.len() as f64;
    // sampling error of the per-item draws: std 0.1 * ctr over 5,000 items
    let (s2, s6, s8) = (slot_mean(1), slot_mean(2), slot_mean(4));
    let draws_ok = (s2 - 0.084).abs() < 1e-3 && (s6 - 0.036).abs() < 2e-4 && (s8 - 0.036).abs() < 2e-4;
    Ok((
        means_ok && corpus_ok && split_ok && draws_ok,
        format!(
            "E[CTR_2] {m2}, E[CTR_6] {m6}; corpus CTR_1 {:.3} CTR_7 {:.3}; sampled means {s2:.4}/{s6:.4}/{s8:.4}; {} requests with 2 ads and 3 organic",
            d.ctr1,
            d.ctr7,
            d.requests.len()
        ),
    ))
}

fn files_under(root: &Path) -> anyhow::Result<BTreeMap<PathBuf, Vec<u8>>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir)? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(root)?.to_path_buf(), fs::read(&path)?);
            }
        }
    }
    Ok(out)
}

fn run_pipeline(out: &Path) -> anyhow::Result<()> {
    let config = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.toml");
    for step in [
        "generate",
        "train-epm",
        "train-mechanism",
        "evaluate",
        "audit",
        "serve-sim",
    ] {
        let status = Command::new(env!("CARGO_BIN_EXE_miaa"))
            .arg(step)
            .arg("--config")
            .arg(&config)
            .arg("--out")
            .arg(out)
            .output()?;
        ensure!(
            status.status.success(),
            "`miaa {step}` failed: {}",
            String::from_utf8_lossy(&status.stderr)
        );
    }
    Ok(())
}

fn determinism() -> Verdict {
    let tmp = tempfile::tempdir()?;
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    run_pipeline(&a)?;
    run_pipeline(&b)?;
    let (fa, fb) = (files_under(&a)?, files_under(&b)?);
    let differing: Vec<String> = fa
        .keys()
        .chain(fb.keys())
        .filter(|k| fa.get(*k) != fb.get(*k))
        .map(|k| k.display().to_string())
        .collect();
    let has = |prefix: &str| fa.keys().any(|k| k.starts_with(prefix));
    Ok((
        differing.is_empty() && has("checkpoints") && has("reports") && has("data"),
        format!(
            "{} files compared across two smoke runs, differing: {differing:?}",
            fa.len()
        ),
    ))
}

fn gsp_critique(corpus: &Corpus) -> Verdict {
    let market = MarketConfig {
        num_ads: 3,
        list_len: 4,
        seed: 77,
        ..MarketConfig::default()
    };
    let world = World::new(market.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let pointwise = PointwiseModel::new(
        PointwiseConfig {
            list_len: 4,
            vocab_sizes: market.vocab_sizes(),
            embedding_dim: 4,
            dense_dim: DENSE_DIM,
            hidden: vec![8],
        },
        &mut rng,
    )?;
    let gsp = GspDynamic {
        ranking: GspRanking {
            pointwise: Arc::new(pointwise),
            position: 2,
        },
        alpha: 0.5,
        rule: PositionRule::Payment,
    };
    let options = AuctionOptions::default();
    let mut invariance_failures = 0;
    let requests = generate_requests(&world, 0, 500);
    for r in &requests {
        let predicted = random_predictions(r, &options, &mut rng)?;
        let auction = gsp.prepare(r, &predicted)?;
        let mut bids = r.bids();
        let base = auction.run(&bids)?.winner.context("gsp always shows an ad")?;
        for factor in [1.01, 1.5, 3.0, 10.0] {
            bids[base.ad_index - 1] = r.bids()[base.ad_index - 1] * factor;
            let raised = auction.run(&bids)?.winner.context("gsp always shows an ad")?;
            if (raised.ad_index, raised.position, raised.payment_per_click.to_bits())
                != (base.ad_index, base.position, base.payment_per_click.to_bits())
            {
                invariance_failures += 1;
            }
        }
    }

    // an ad's allocated CTR never drops when it raises its bid
    let mut monotone_failures = 0;
    for inst in &corpus.instances {
        let params = &corpus.nets[inst.net];
        let (r, pred) = (&inst.sample.request, &inst.sample.predicted);
        let scores = miaa::aam::score_request(params, r, pred)?;
        for i in 1..=r.num_ads() {
            let mut bids = r.bids();
            let mut last = 0.0;
            for b in misreport_grid(r.ads[i - 1].bid, IC_GRID) {
                bids[i - 1] = b;
                let s = settle(&scores, &bids, &inst.options)?;
                let q = match s.winner {
                    Some((w, _, _)) if w == i => scores.ad_ctr[s.allocation_index],
                    _ => 0.0,
                };
                if q < last - MONOTONE_TOL {
                    monotone_failures += 1;
                    break;
                }
                last = q;
            }
        }
    }
    Ok((
        invariance_failures == 0 && monotone_failures == 0 && corpus.instances.len() >= CORPUS_MIN,
        format!(
            "GSP-dynamic changed under {invariance_failures} of {} winner raises; MIAA monotonicity violated for {monotone_failures} ads over {} instances",
            requests.len() * 4,
            corpus.instances.len()
        ),
    ))
}

const NAMES: [&str; 10] = [
    "IC exactness",
    "IR exactness",
    "VCG reduction",
    "argmax oracle",
    "gradient integrity",
    "externality modeling",
    "mechanism lift",
    "log recipe fidelity",
    "determinism",
    "GSP critique",
];

fn main() -> ExitCode {
    // libtest flags such as --nocapture are accepted and ignored
    let selected: Vec<usize> = match std::env::var("ACCEPTANCE_ONLY") {
        Ok(list) => list.split(',').filter_map(|s| s.trim().parse().ok()).collect(),
        Err(_) => (1..=10).collect(),
    };
    let wants = |k: usize| selected.contains(&k);

    let corpus = if [1, 2, 3, 4, 10].iter().any(|&k| wants(k)) {
        match build_corpus() {
            Ok(c) => Some(c),
            Err(e) => {
                eprintln!("corpus construction failed: {e:#}");
                None
            }
        }
    } else {
        None
    };
    let seeds = if wants(6) || wants(7) { Some(run_seeds()) } else { None };

    let mut failed = 0;
    for k in selected.iter().copied().filter(|k| (1..=10).contains(k)) {
        let start = Instant::now();
        let verdict: Verdict = match (k, &corpus, &seeds) {
            (1 | 2 | 3 | 4 | 10, None, _) => Err(anyhow::anyhow!("no instance corpus")),
            (1, Some(c), _) => ic_exactness(c),
            (2, Some(c), _) => ir_exactness(c),
            (3, Some(c), _) => vcg_reduction(c),
            (4, Some(c), _) => argmax_oracle(c),
            (5, _, _) => gradient_integrity(),
            (6, _, Some(Ok((runs, t)))) => externality_modeling(runs, *t),
            (7, _, Some(Ok((runs, _)))) => mechanism_lift(runs),
            (6 | 7, _, Some(Err(e))) => Err(anyhow::anyhow!("seed runs failed: {e:#}")),
            (8, _, _) => recipe_fidelity(),
            (9, _, _) => determinism(),
            (10, Some(c), _) => gsp_critique(c),
            _ => unreachable!(),
        };
        let (pass, detail) = verdict.unwrap_or_else(|e| (false, format!("error: {e:#}")));
        if !pass {
            failed += 1;
        }
        println!(
            "criterion {k:>2} {:<22} {} {detail} [{:.1} s]",
            NAMES[k - 1],
            if pass { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64()
        );
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
