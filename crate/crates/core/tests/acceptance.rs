//! Acceptance suite. Runs without the libtest harness so every criterion
//! prints its own pass/fail line; the process fails if any criterion does.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use rand::Rng;
use url::Url;

use cdt_lab_core::adex::{extract_ads, CrawlMeta, CrawlPhase, CrawlType, ExtractOptions};
use cdt_lab_core::categorizer::CategoryDb;
use cdt_lab_core::dom::DomSnapshot;
use cdt_lab_core::detect::{
    auc, auc_bruteforce, permutation_test, Classifier, Decision, GaussianNb, LogisticModel, LogisticObjective, Xy,
};
use cdt_lab_core::ecosim::{ClickEncoding, EcoSim, GroundTruth, SimConfig, World};
use cdt_lab_core::filterlist::{parse_conformance, FilterSet, MatchContext};
use cdt_lab_core::fixtures;
use cdt_lab_core::report::{
    ads_cdf, analyze_runs, build_datasets, evaluate, run_pipeline, simulate, ExperimentConfig, ExperimentStore, GridChoice,
    Resources,
};
use cdt_lab_core::rng::stream;
use cdt_lab_core::scheduler::{AdEcosystem, CookieJar, DeviceKind, RunRecord, SetupCode, VisitRequest};

// criterion 1
const SIGNAL_MIN_AUC: f64 = 0.80;
const NULL_AUC_BAND: (f64, f64) = (0.40, 0.60);
const END_TO_END_BUDGET: Duration = Duration::from_secs(300);
// criterion 2
const SWEEP_STRENGTHS: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];
const SWEEP_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
const SWEEP_SLACK: f64 = 0.03;
// criterion 3
const STATELESS_GAP: f64 = 0.05;
const STATELESS_FLOOR: f64 = 0.55;
// criterion 4
const BOOST_GAIN: f64 = 0.03;
// criterion 5
const CALIBRATION_DRAWS: u64 = 1_000;
const CALIBRATION_PERMS: u64 = 999;
const ALPHA: f64 = 0.05;
const REJECTION_TOLERANCE: f64 = 0.02;
// criterion 6
const AUC_ORACLE_SETS: usize = 200;
// criterion 7
const NB_TOLERANCE: f64 = 1e-9;
const GRADIENT_REL_TOLERANCE: f64 = 1e-6;
// criterion 8
const MIN_CONFORMANCE_CASES: usize = 30;
const RANDOM_URLS: usize = 1_000;
// criterion 9
const PAGES_PER_SEED: usize = 100;
const EXTRACTION_SEEDS: [u64; 3] = [1, 2, 3];
// criterion 10
const SAMPLES_PER_PERSONA: usize = 240;
const COMBINED_SAMPLES: usize = 2_400;
// criterion 11
const MOBILE_UNDER_FIVE_MIN: f64 = 0.90;
const DESKTOP_PER_VISIT: (f64, f64) = (2.0, 4.0);

const MAIN_SEED: u64 = 7;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn config(setup: SetupCode, seed: u64, cdt_strength: f64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig { setup, seed, grid: GridChoice::Fast, ..ExperimentConfig::default() };
    cfg.sim.cdt_strength = cdt_strength;
    cfg
}

/// Mean per-persona outer-fold AUC of a setup.
fn mean_auc(cfg: &ExperimentConfig, res: &Resources) -> f64 {
    let runs = simulate(cfg, res).expect("simulation");
    let datasets = build_datasets(&runs, cfg.setup, &res.db).expect("datasets");
    let evals = evaluate(&datasets, &cfg.grid.specs(), &cfg.cv_options()).expect("nested cv");
    mean(&evals.iter().map(|e| e.report.auc).collect::<Vec<_>>())
}

fn end_to_end(res: &Resources) -> Outcome {
    let started = Instant::now();
    let signal = mean_auc(&config(SetupCode::S1a, MAIN_SEED, 0.9), res);
    let elapsed = started.elapsed();
    let null = mean_auc(&config(SetupCode::S1a, MAIN_SEED, 0.0), res);
    let pass = signal >= SIGNAL_MIN_AUC
        && (NULL_AUC_BAND.0..=NULL_AUC_BAND.1).contains(&null)
        && elapsed <= END_TO_END_BUDGET;
    outcome(
        pass,
        format!(
            "auc(cdt=0.9) {signal:.3} >= {SIGNAL_MIN_AUC}; auc(cdt=0) {null:.3} in [{}, {}]; {:.0}s <= {}s",
            NULL_AUC_BAND.0,
            NULL_AUC_BAND.1,
            elapsed.as_secs_f64(),
            END_TO_END_BUDGET.as_secs()
        ),
    )
}

/// Reduced 1a analog: three personas, two runs, 5x3 nested CV.
fn sweep_config(seed: u64, strength: f64) -> ExperimentConfig {
    ExperimentConfig {
        personas: Some(vec![1, 2, 3]),
        runs: Some(2),
        outer_k: 5,
        inner_k: 3,
        ..config(SetupCode::S1a, seed, strength)
    }
}

fn monotone_sweep(res: &Resources) -> Outcome {
    let curve: Vec<f64> = SWEEP_STRENGTHS
        .iter()
        .map(|&s| mean(&SWEEP_SEEDS.iter().map(|&seed| mean_auc(&sweep_config(seed, s), res)).collect::<Vec<_>>()))
        .collect();
    let pass = curve.windows(2).all(|w| w[1] >= w[0] - SWEEP_SLACK);
    let points: Vec<String> = SWEEP_STRENGTHS.iter().zip(&curve).map(|(s, a)| format!("{s}:{a:.3}")).collect();
    outcome(pass, format!("mean auc by strength [{}], steps >= -{SWEEP_SLACK}", points.join(" ")))
}

fn stateless_attenuation(res: &Resources) -> Outcome {
    let stateless = config(SetupCode::S3a, MAIN_SEED, 0.9);
    let stateful = ExperimentConfig {
        personas: Some(stateless.run_configs().iter().map(|r| r.persona_id).collect::<std::collections::BTreeSet<_>>().into_iter().collect()),
        runs: Some(2),
        ..config(SetupCode::S1a, MAIN_SEED, 0.9)
    };
    let a3 = mean_auc(&stateless, res);
    let a1 = mean_auc(&stateful, res);
    let pass = a3 <= a1 - STATELESS_GAP && a3 >= STATELESS_FLOOR;
    outcome(pass, format!("stateless {a3:.3} <= stateful {a1:.3} - {STATELESS_GAP}; stateless >= {STATELESS_FLOOR}"))
}

fn boosted_amplification(res: &Resources) -> Outcome {
    let plain = mean_auc(&config(SetupCode::S2a, MAIN_SEED, 0.9), res);
    let boosted = mean_auc(&config(SetupCode::S2c, MAIN_SEED, 0.9), res);
    outcome(boosted >= plain + BOOST_GAIN, format!("boosted {boosted:.3} >= plain {plain:.3} + {BOOST_GAIN}"))
}

fn permutation_calibration() -> Outcome {
    let mut rng = stream(MAIN_SEED, "calibration", &[]);
    let mut rejections = 0u64;
    for draw in 0..CALIBRATION_DRAWS {
        let a: Vec<f64> = (0..15).map(|_| rng.gen::<f64>()).collect();
        let b: Vec<f64> = (0..15).map(|_| rng.gen::<f64>()).collect();
        let r = permutation_test(&a, &b, CALIBRATION_PERMS, ALPHA, draw).expect("valid samples");
        if r.decision == Decision::Reject {
            rejections += 1;
        }
    }
    let rate = rejections as f64 / CALIBRATION_DRAWS as f64;
    let small = permutation_test(&[5.0, 6.0, 7.0, 8.0], &[1.0, 2.0, 3.0, 4.0], 0, ALPHA, 0).expect("valid samples");
    let pass = (rate - ALPHA).abs() <= REJECTION_TOLERANCE && small.exhaustive && small.p_value == 2.0 / 70.0;
    outcome(
        pass,
        format!(
            "rejection rate {rate:.3} within {ALPHA} +/- {REJECTION_TOLERANCE}; exhaustive p {} == 2/70",
            small.p_value
        ),
    )
}

fn auc_oracle() -> Outcome {
    let mut rng = stream(MAIN_SEED, "auc-oracle", &[]);
    let mut checked = 0;
    let mut mismatches = 0;
    while checked < AUC_ORACLE_SETS {
        let n = rng.gen_range(2..=20);
        let scores: Vec<f64> = (0..n).map(|_| f64::from(rng.gen_range(0..6u8)) / 5.0).collect();
        let labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2u8)).collect();
        let (Ok(fast), Ok(slow)) = (auc(&scores, &labels), auc_bruteforce(&scores, &labels)) else { continue };
        checked += 1;
        if fast != slow {
            mismatches += 1;
        }
    }
    outcome(mismatches == 0, format!("{checked} sets with ties, {mismatches} rank/pairwise mismatches"))
}

fn classifier_oracles() -> Outcome {
    // per class: means (1,1) and (2,2), unit variances; at the origin the
    // log-likelihoods are -1 and -4, so the class-1 posterior is 1/(1+e^3)
    let rows = vec![vec![0.0, 0.0], vec![2.0, 2.0], vec![1.0, 3.0], vec![3.0, 1.0]];
    let nb = GaussianNb::fit(&Xy::new(&rows, &[0, 0, 1, 1]).expect("xy")).expect("nb fit");
    let want = 1.0 / (1.0 + 3f64.exp());
    let nb_err = (nb.predict_proba(&[0.0, 0.0]) - want).abs();

    let mut rng = stream(MAIN_SEED, "gradient", &[]);
    let mut worst_rel = 0f64;
    for _ in 0..100 {
        let n = rng.gen_range(3..12);
        let x: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)]).collect();
        let y: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2u8)).collect();
        let theta: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.5..1.5)).collect();
        let obj = LogisticObjective::new(x, &y, rng.gen_range(0.01..10.0));
        let g = obj.gradient(&theta);
        for j in 0..theta.len() {
            let h = 1e-5;
            let (mut up, mut down) = (theta.clone(), theta.clone());
            up[j] += h;
            down[j] -= h;
            let fd = (obj.value(&up) - obj.value(&down)) / (2.0 * h);
            worst_rel = worst_rel.max((fd - g[j]).abs() / g[j].abs().max(1.0));
        }
    }

    let mut sep_rows = Vec::new();
    let mut sep_labels = Vec::new();
    for i in 0..10 {
        let t = f64::from(i);
        sep_rows.push(vec![t * 0.3, 1.0 + t * 0.2]);
        sep_labels.push(1);
        sep_rows.push(vec![t * 0.3 + 0.5, -1.0 + t * 0.2]);
        sep_labels.push(0);
    }
    let lr = LogisticModel::fit(&Xy::new(&sep_rows, &sep_labels).expect("xy"), 10.0).expect("lr fit");
    let correct = sep_rows.iter().zip(&sep_labels).filter(|(r, l)| u8::from(lr.predict_proba(r) >= 0.5) == **l).count();
    let accuracy = correct as f64 / sep_rows.len() as f64;
    let pass = nb_err <= NB_TOLERANCE && worst_rel <= GRADIENT_REL_TOLERANCE && accuracy == 1.0;
    outcome(
        pass,
        format!(
            "nb posterior error {nb_err:.1e} <= {NB_TOLERANCE:.0e}; gradient rel error {worst_rel:.1e} <= {GRADIENT_REL_TOLERANCE:.0e}; separable accuracy {accuracy}"
        ),
    )
}

fn filter_conformance() -> Outcome {
    let cases = parse_conformance(fixtures::FILTER_CONFORMANCE).expect("conformance fixture parses");
    let mut failed = 0;
    for c in &cases {
        let set = FilterSet::from_rules(&c.rules);
        let url = Url::parse(&c.url).expect("fixture url");
        let ctx = MatchContext::new(&url, c.page_domain.as_deref());
        if set.matches(&ctx) != c.expected || set.matches_linear(&ctx) != c.expected {
            failed += 1;
        }
    }
    let list = FilterSet::parse(fixtures::EASYLIST);
    let hosts = [
        "cat.criteo.com", "adclick.g.doubleclick.net", "www.accuweather.com", "cdn.weather.com", "ib.adnxs.com",
        "pixel.tapad.com", "static.example.org", "ads.example.com", "www.aurelia-jewels.com", "trc.taboola.com",
    ];
    let segments = ["ads", "aclk", "banner", "img", "news", "px", "track", "creative", "promo", "adserver", "js"];
    let pages = [None, Some("accuweather.com"), Some("weather.com"), Some("criteo.com")];
    let mut rng = stream(MAIN_SEED, "filter-urls", &[]);
    let mut disagreements = 0;
    let mut ads = 0;
    for _ in 0..RANDOM_URLS {
        let mut u = format!("https://{}/", hosts[rng.gen_range(0..hosts.len())]);
        for _ in 0..rng.gen_range(0..4) {
            u.push_str(segments[rng.gen_range(0..segments.len())]);
            u.push(if rng.gen::<bool>() { '/' } else { '-' });
        }
        if rng.gen::<bool>() {
            u.push_str(&format!("?slot={}&adurl=x", rng.gen_range(0..9)));
        }
        let url = Url::parse(&u).expect("generated url");
        let ctx = MatchContext::new(&url, pages[rng.gen_range(0..pages.len())]);
        let indexed = list.matches(&ctx);
        ads += usize::from(indexed);
        if indexed != list.matches_linear(&ctx) {
            disagreements += 1;
        }
    }
    let pass = cases.len() >= MIN_CONFORMANCE_CASES && failed == 0 && disagreements == 0;
    outcome(
        pass,
        format!(
            "{} conformance cases (>= {MIN_CONFORMANCE_CASES}), {failed} failed; index vs scan on {RANDOM_URLS} urls ({ads} ads): {disagreements} disagreements",
            cases.len()
        ),
    )
}

fn extraction_round_trip() -> Outcome {
    let db = CategoryDb::parse(fixtures::CATEGORY_DB).expect("category db");
    let filters = FilterSet::parse(fixtures::EASYLIST);
    let mut pages = 0;
    let mut mismatches = 0;
    let mut redirects = 0;
    let mut ads = 0;
    for seed in EXTRACTION_SEEDS {
        let mut sim = EcoSim::new(World::bundled(), SimConfig::default(), db.clone(), "boosted").expect("ecosim");
        sim.begin_run("extraction", seed).expect("run");
        sim.begin_session(1);
        let control = sim.world().control_set("boosted").expect("control set").pages.clone();
        let mut jars = [CookieJar::default(), CookieJar::default()];
        for i in 0..PAGES_PER_SEED {
            let (device, kind) = if i % 2 == 0 { ("desktop", DeviceKind::Desktop) } else { ("mobile", DeviceKind::Mobile) };
            let req = VisitRequest {
                device_id: device.into(),
                kind,
                ip_label: "ip-home".into(),
                page_domain: control[i % control.len()].domain.clone(),
                is_train: false,
                tick: i as u64 * 240,
            };
            let served = sim.visit(&req, &mut jars[i % 2]).expect("visit");
            let meta = CrawlMeta {
                run_id: "extraction".into(),
                session_id: 1,
                stage_id: "after-1".into(),
                device_id: device.into(),
                crawl_type: CrawlType::Test,
                crawl_phase: CrawlPhase::After,
            };
            let mut want: Vec<String> = served.placements.iter().map(|p| p.landing_domain.clone()).collect();
            want.sort();
            redirects += served.placements.iter().filter(|p| p.encoding == ClickEncoding::DoubleEncodedRedirect).count();
            ads += want.len();
            let reparsed = DomSnapshot::from_html(&served.snapshot.to_html(), served.snapshot.page_url.clone(), req.tick);
            for snapshot in [&served.snapshot, &reparsed] {
                let (obs, _) = extract_ads(snapshot, &filters, &meta, ExtractOptions::default()).expect("extract");
                let mut got: Vec<String> = obs.into_iter().map(|o| o.landing_domain).collect();
                got.sort();
                if got != want {
                    mismatches += 1;
                }
            }
            pages += 1;
        }
    }
    outcome(
        mismatches == 0 && redirects > 0,
        format!("{pages} pages, {ads} ads ({redirects} double-encoded redirects); {mismatches} multiset mismatches in memory or via html"),
    )
}

fn label_errors(runs: &[RunRecord], ds: &cdt_lab_core::features::LabeledDataset) -> usize {
    let truth: BTreeMap<&str, GroundTruth> =
        runs.iter().map(|r| (r.run_id.as_str(), GroundTruth::from_topology(&r.config.topology))).collect();
    ds.keys
        .iter()
        .zip(&ds.labels)
        .filter(|(k, l)| u8::from(truth[k.run_id.as_str()].is_paired(&k.device_id)) != **l)
        .count()
}

fn dataset_shape_and_validation(res: &Resources) -> (Outcome, Outcome) {
    let cfg = config(SetupCode::S1a, MAIN_SEED, 0.9);
    let runs = simulate(&cfg, res).expect("simulation");
    let per_persona = build_datasets(&runs, SetupCode::S1a, &res.db).expect("datasets");
    let combined = build_datasets(&runs, SetupCode::S1b, &res.db).expect("combined");
    let sizes: Vec<usize> = per_persona.iter().map(|(_, d)| d.len()).collect();
    let errors: usize = per_persona.iter().map(|(_, d)| label_errors(&runs, d)).sum::<usize>() + label_errors(&runs, &combined[0].1);
    let shape = outcome(
        sizes.len() == 10 && sizes.iter().all(|&n| n == SAMPLES_PER_PERSONA) && combined[0].1.len() == COMBINED_SAMPLES && errors == 0,
        format!(
            "{} persona datasets of sizes {:?} (want {SAMPLES_PER_PERSONA}); combined {} (want {COMBINED_SAMPLES}); {errors} label errors",
            sizes.len(),
            sizes.iter().collect::<std::collections::BTreeSet<_>>(),
            combined[0].1.len()
        ),
    );
    let cdf = ads_cdf(&runs, &res.db);
    let validation = outcome(
        cdf.mobile_sessions_under_five >= MOBILE_UNDER_FIVE_MIN
            && (DESKTOP_PER_VISIT.0..=DESKTOP_PER_VISIT.1).contains(&cdf.desktop_mean_per_visit),
        format!(
            "mobile sessions under five ads {:.3} >= {MOBILE_UNDER_FIVE_MIN}; desktop ads per visit {:.2} in [{}, {}]",
            cdf.mobile_sessions_under_five, cdf.desktop_mean_per_visit, DESKTOP_PER_VISIT.0, DESKTOP_PER_VISIT.1
        ),
    );
    (shape, validation)
}

fn tree_bytes(dir: &std::path::Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).expect("readable store") {
            let path = entry.expect("entry").path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).expect("inside store").to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&path).expect("readable file"));
            }
        }
    }
    out
}

fn determinism(res: &Resources) -> Outcome {
    let cfg = ExperimentConfig {
        personas: Some(vec![4]),
        runs: Some(2),
        sessions: Some(6),
        outer_k: 4,
        inner_k: 3,
        ..config(SetupCode::S1a, MAIN_SEED, 0.9)
    };
    let dirs = [tempfile::tempdir().expect("tempdir"), tempfile::tempdir().expect("tempdir")];
    let mut reports = Vec::new();
    let mut trees = Vec::new();
    let mut reanalyses = Vec::new();
    for d in &dirs {
        let store = ExperimentStore::open(d.path()).expect("store");
        let out = run_pipeline(&cfg, &store).expect("pipeline");
        let runs = store.load_runs(&out.experiment_id).expect("stored runs");
        reanalyses.push(analyze_runs(&cfg, res, &runs, None).expect("analyze").0);
        reports.push(out.report);
        trees.push(tree_bytes(d.path()));
    }
    let files = trees[0].len();
    let pass = reports[0] == reports[1] && trees[0] == trees[1] && reanalyses[0] == reanalyses[1] && reanalyses[0] == reports[0];
    outcome(pass, format!("two stores: {files} files byte-identical; run and analyze reports identical"))
}

fn main() {
    // `cargo test` passes harness flags; a name filter that excludes this
    // suite skips it
    let args: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    if !args.is_empty() && !args.iter().any(|a| "acceptance".contains(a.as_str())) {
        return;
    }
    let res = Resources::bundled();
    let (shape, validation) = dataset_shape_and_validation(&res);
    let mut results: Vec<(u32, &str, Outcome)> = vec![
        (5, "permutation-test calibration", permutation_calibration()),
        (6, "auc oracle", auc_oracle()),
        (7, "classifier oracles", classifier_oracles()),
        (8, "filter-list conformance", filter_conformance()),
        (9, "extraction round-trip", extraction_round_trip()),
        (10, "dataset shape", shape),
        (11, "validation distributions", validation),
        (12, "determinism", determinism(&res)),
    ];
    results.push((1, "end-to-end signal detection", end_to_end(&res)));
    results.push((3, "stateless attenuation", stateless_attenuation(&res)));
    results.push((4, "boosted-tracker amplification", boosted_amplification(&res)));
    results.push((2, "monotonicity sweep", monotone_sweep(&res)));
    results.sort_by_key(|(n, _, _)| *n);
    let mut failed = 0;
    for (n, name, o) in &results {
        println!("criterion {n:>2} {:<4} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.pass);
    }
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
