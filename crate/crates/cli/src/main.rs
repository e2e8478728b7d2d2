use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use cdt_lab_core::categorizer::{Categorizer, ReviewQueue};
use cdt_lab_core::detect::{nested_cv_grouped, CvOptions};
use cdt_lab_core::features::LabeledDataset;
use cdt_lab_core::filterlist::{FilterSet, MatchContext};
use cdt_lab_core::persona::{
    build_personas, parse_topics, BuildParams, FixtureSearchSource, PersonaCatalog, Taxonomy, TopicSource,
};
use cdt_lab_core::report::{
    ads_cdf, analyze_runs, persona_page_hosts, run_pipeline, tracker_coverage, ExperimentConfig, ExperimentStore,
    GridChoice, Resources,
};
use cdt_lab_core::scheduler::SetupCode;
use cdt_lab_core::{fixtures, rng};

#[derive(Parser)]
#[command(name = "cdt-lab", version, about = "Cross-device tracking measurement experiments")]
struct Cli {
    /// Experiment store root.
    #[arg(long, global = true, env = "CDT_LAB_STORE", default_value = "cdt-lab-store")]
    store: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Persona formation.
    Persona {
        #[command(subcommand)]
        action: PersonaAction,
    },
    /// Filter-list matching.
    Filter {
        #[command(subcommand)]
        action: FilterAction,
    },
    /// Look up landing-domain categories.
    Categorize {
        domains: Vec<String>,
        #[arg(long)]
        category_db: Option<PathBuf>,
        /// Append unknown domains to this review file.
        #[arg(long)]
        review_queue: Option<PathBuf>,
    },
    /// Simulate, extract, build datasets and detect; stores everything.
    Run(RunArgs),
    /// Re-analyze a stored experiment and check its datasets against the stored report.
    Analyze {
        experiment: String,
        /// Also write the rebuilt datasets here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Validation and result tables from a stored experiment.
    Report {
        #[command(subcommand)]
        table: ReportTable,
    },
    /// Classifier evaluation of a dataset file.
    Detect {
        #[command(subcommand)]
        action: DetectAction,
    },
}

#[derive(Subcommand)]
enum PersonaAction {
    /// Build personas from a catalog, topic list, taxonomy and search fixture.
    Build {
        #[arg(long)]
        catalog: Option<PathBuf>,
        #[arg(long)]
        topics: Option<PathBuf>,
        #[arg(long)]
        taxonomy: Option<PathBuf>,
        #[arg(long)]
        search: Option<PathBuf>,
        #[arg(long, default_value_t = 0.5)]
        cluster_threshold: f64,
    },
}

#[derive(Subcommand)]
enum FilterAction {
    /// Decide whether a request URL is an ad, as seen from a page.
    Check {
        url: String,
        /// Page host or domain the request came from.
        #[arg(long)]
        page: Option<String>,
        #[arg(long)]
        list: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum ReportTable {
    /// Ads and keywords per session, as CDF points.
    Cdf { experiment: String },
    /// Tracker organizations embedded on persona pages.
    Trackers {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// The per-dataset AUC table of a stored experiment.
    Auc { experiment: String },
}

#[derive(Subcommand)]
enum DetectAction {
    /// Nested cross-validation over a CSV dataset.
    Analyze {
        dataset: PathBuf,
        #[arg(long, default_value = "1a")]
        setup: String,
        #[arg(long)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = Grid::Default)]
        grid: Grid,
        #[arg(long, default_value_t = 10)]
        outer_k: usize,
        #[arg(long, default_value_t = 10)]
        inner_k: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Grid {
    Default,
    Fast,
}

impl From<Grid> for GridChoice {
    fn from(g: Grid) -> Self {
        match g {
            Grid::Default => GridChoice::Default,
            Grid::Fast => GridChoice::Fast,
        }
    }
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config file; flags override its keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    setup: Option<String>,
    #[arg(long)]
    seed: u64,
    /// Comma-separated persona ids.
    #[arg(long, value_delimiter = ',')]
    personas: Option<Vec<u32>>,
    #[arg(long)]
    runs: Option<u32>,
    #[arg(long)]
    sessions: Option<u32>,
    #[arg(long, value_enum)]
    grid: Option<Grid>,
    #[arg(long)]
    outer_k: Option<usize>,
    #[arg(long)]
    inner_k: Option<usize>,
    #[arg(long)]
    cdt_strength: Option<f64>,
}

fn read_or(path: Option<&Path>, fallback: &str) -> Result<String> {
    match path {
        Some(p) => fs::read_to_string(p).with_context(|| format!("reading {}", p.display())),
        None => Ok(fallback.to_owned()),
    }
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))
        }
        None => Ok(ExperimentConfig::default()),
    }
}

fn run_config(args: &RunArgs) -> Result<ExperimentConfig> {
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(s) = &args.setup {
        cfg.setup = s.parse::<SetupCode>()?;
    }
    cfg.seed = args.seed;
    if let Some(p) = &args.personas {
        cfg.personas = Some(p.clone());
    }
    cfg.runs = args.runs.or(cfg.runs);
    cfg.sessions = args.sessions.or(cfg.sessions);
    if let Some(g) = args.grid {
        cfg.grid = g.into();
    }
    cfg.outer_k = args.outer_k.unwrap_or(cfg.outer_k);
    cfg.inner_k = args.inner_k.unwrap_or(cfg.inner_k);
    if let Some(c) = args.cdt_strength {
        cfg.sim.cdt_strength = c;
    }
    Ok(cfg)
}

fn dataset_lines(report: &str) -> Vec<&str> {
    report.lines().filter(|l| l.starts_with("dataset ")).collect()
}

/// Lines of the AUC table: from its header up to the first blank line.
fn auc_section(report: &str) -> Option<String> {
    let start = report.find("dataset,samples,features")?;
    let rest = &report[start..];
    let end = rest.find("\n\n").map_or(rest.len(), |i| i + 1);
    Some(rest[..end].to_owned())
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Persona { action: PersonaAction::Build { catalog, topics, taxonomy, search, cluster_threshold } } => {
            let catalog = PersonaCatalog::parse(&read_or(catalog.as_deref(), fixtures::PERSONA_CATALOG)?)?;
            let topics = parse_topics(&read_or(topics.as_deref(), fixtures::TOPICS)?, TopicSource::RealUserList);
            let taxonomy = Taxonomy::parse(&read_or(taxonomy.as_deref(), fixtures::TAXONOMY)?);
            let source = FixtureSearchSource::parse(&read_or(search.as_deref(), fixtures::SEARCH_FIXTURE)?)?;
            let params = BuildParams { cluster_threshold, ..BuildParams::default() };
            let build = build_personas(&catalog, &topics, &taxonomy, &source, params);
            println!("{}", serde_json::to_string_pretty(&build)?);
            if build.personas.is_empty() {
                bail!("persona formation: no persona could be formed");
            }
        }
        Command::Filter { action: FilterAction::Check { url, page, list } } => {
            let filters = FilterSet::parse(&read_or(list.as_deref(), fixtures::EASYLIST)?);
            let parsed = url::Url::parse(&url).with_context(|| format!("bad url {url}"))?;
            let ctx = MatchContext::new(&parsed, page.as_deref());
            let verdict = filters.explain(&ctx);
            println!("{}", if verdict.is_ad { "ad" } else { "not-ad" });
            for r in &verdict.blocking {
                println!("blocking: {}", r.raw);
            }
            for r in &verdict.exceptions {
                println!("exception: {}", r.raw);
            }
        }
        Command::Categorize { domains, category_db, review_queue } => {
            let db = cdt_lab_core::categorizer::CategoryDb::parse(&read_or(category_db.as_deref(), fixtures::CATEGORY_DB)?)?;
            let queue = match review_queue {
                Some(p) => ReviewQueue::with_file(p),
                None => ReviewQueue::in_memory(),
            };
            let cat = Categorizer::new(&db, &queue);
            for d in &domains {
                println!("{d}\t{}", cat.categorize(d)?.join(";"));
            }
        }
        Command::Run(args) => {
            let cfg = run_config(&args)?;
            let store = ExperimentStore::open(&cli.store)?;
            let outcome = run_pipeline(&cfg, &store)?;
            print!("{}", outcome.report);
            eprintln!("stored {}", store.experiment_dir(&outcome.experiment_id).display());
        }
        Command::Analyze { experiment, out } => {
            let store = ExperimentStore::open(&cli.store)?;
            let cfg = store.load_config(&experiment)?;
            let res = Resources::load(&cfg.fixtures)?;
            let runs = store.load_runs(&experiment)?;
            if let Some(dir) = &out {
                fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            }
            let (report, _) = analyze_runs(&cfg, &res, &runs, out.as_deref())?;
            let stored = store.load_report(&experiment)?;
            if dataset_lines(&stored) != dataset_lines(&report) {
                bail!("store: rebuilt datasets differ from the ones recorded in report.txt");
            }
            print!("{report}");
        }
        Command::Report { table } => match table {
            ReportTable::Cdf { experiment } => {
                let store = ExperimentStore::open(&cli.store)?;
                let cfg = store.load_config(&experiment)?;
                let res = Resources::load(&cfg.fixtures)?;
                let runs = store.load_runs(&experiment)?;
                print!("{}", ads_cdf(&runs, &res.db).to_csv());
            }
            ReportTable::Trackers { config } => {
                let cfg = load_config(config.as_deref())?;
                let res = Resources::load(&cfg.fixtures)?;
                let pages = persona_page_hosts(&res, &cfg.effective_sim())?;
                print!("{}", tracker_coverage(&res.tracker_list, &pages).to_csv());
            }
            ReportTable::Auc { experiment } => {
                let store = ExperimentStore::open(&cli.store)?;
                let report = store.load_report(&experiment)?;
                match auc_section(&report) {
                    Some(table) => print!("{table}"),
                    None => bail!("report: {experiment} has no AUC table"),
                }
            }
        },
        Command::Detect { action: DetectAction::Analyze { dataset, setup, seed, grid, outer_k, inner_k } } => {
            let setup: SetupCode = setup.parse()?;
            let text = fs::read_to_string(&dataset).with_context(|| format!("reading {}", dataset.display()))?;
            let ds = LabeledDataset::from_csv(&text, setup)?;
            let opts = CvOptions { outer_k, inner_k, seed: rng::derive(seed, "cv", &[]), ..CvOptions::default() };
            let specs = GridChoice::from(grid).specs();
            let report = nested_cv_grouped(&ds.rows, &ds.labels, &ds.groups(), &ds.feature_names, &specs, &opts)?;
            print!("{}", report.to_text());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
