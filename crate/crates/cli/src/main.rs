//! `sparselab` command line: toy data, SAE training, sweeps, transformer
//! evaluation, auto-interpretability scoring, plots and report summaries.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use sparselab::autointerp::{MockKind, Transcript};
use sparselab::checkpoint::{save_tensors, TensorMap};
use sparselab::experiments::{
    reconstruction_metrics, run_autointerp, run_glove_sweep, run_lomax, run_toy_sweep, run_transformer_eval,
    write_json, write_json_lines, write_manifest, AutointerpOutcome, ExperimentConfig, ExperimentKind, FrontierRecord,
    LomaxOutcome, Measure, RunFailure, SweepOutcome,
};
use sparselab::metrics::{mean_and_standard_error, read_jsonl, write_csv, write_jsonl, MetricsReport};
use sparselab::sae::{
    init_standard, init_topk, save_sae, train, AnySae, SaeFamily, SaeProvenance, SaeSidecar, TrainConfig,
};
use sparselab::toygen::{generate_toy_dataset, sample_ground_truth_features, CoefficientModel};
use sparselab::ActivationDataset;

#[derive(Parser, Debug)]
#[command(
    name = "sparselab",
    version,
    about = "Sparse autoencoders on superposed and random-network data"
)]
struct Cli {
    /// Experiment configuration (JSON). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed to run; repeat for several. Overrides the config's list.
    #[arg(long = "seed", global = true)]
    seeds: Vec<u64>,
    /// Output directory. Overrides the config's `out_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Score with an offline mock instead of the configured endpoint.
    #[arg(long, global = true, num_args = 0..=1, default_missing_value = "oracle")]
    mock_llm: Option<MockArg>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum MockArg {
    Oracle,
    CoinFlip,
    Lexical,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FamilyArg {
    Standard,
    TopK,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PlotKind {
    Pareto,
    Roc,
    MetricByLayer,
    #[value(name = "scatter-2d")]
    Scatter2d,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a toy dataset (SLAB1) and its ground-truth features (SLCK1).
    GenToy {
        /// Also write a CSV copy of the rows.
        #[arg(long)]
        csv: bool,
    },
    /// Train one SAE on a dataset file (SLAB1, or CSV by extension).
    TrainSae {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "standard")]
        family: FamilyArg,
        /// Standard SAE width (default: twice the input dimension).
        #[arg(long)]
        n_latents: Option<usize>,
        #[arg(long, default_value_t = 1e-1)]
        l1: f64,
        #[arg(long, default_value_t = 16)]
        expansion: usize,
        #[arg(long, default_value_t = 16)]
        k: usize,
        /// Overrides the toy training epochs from the config.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Toy, word-vector or illustrative Lomax experiment, by config kind.
    Sweep,
    /// Per-layer TopK SAE metrics on random transformer variants.
    EvalTransformer,
    /// Explanation and fuzzing scores for sampled SAE latents.
    Autointerp,
    /// Render an SVG from a result file.
    Plot {
        #[arg(long, value_enum)]
        kind: PlotKind,
        /// frontiers.json, autointerp.json, reports.jsonl or lomax.json.
        #[arg(long)]
        input: PathBuf,
        /// Metric for metric-by-layer.
        #[arg(long, default_value = "token_entropy")]
        metric: String,
        /// Sparsity measure for pareto.
        #[arg(long, default_value = "l1-over-sqrt-l2")]
        measure: MeasureArg,
        /// Output file (default: next to the input).
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// CSV of report lines plus a seed-averaged summary.
    Report {
        #[arg(long)]
        input: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum MeasureArg {
    L0,
    L1,
    L1OverSqrtL2,
    Hoyer,
}

impl From<MeasureArg> for Measure {
    fn from(m: MeasureArg) -> Self {
        match m {
            MeasureArg::L0 => Measure::L0,
            MeasureArg::L1 => Measure::L1,
            MeasureArg::L1OverSqrtL2 => Measure::L1OverSqrtL2,
            MeasureArg::Hoyer => Measure::Hoyer,
        }
    }
}

fn resolve_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    if !cli.seeds.is_empty() {
        cfg.seeds = cli.seeds.clone();
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    if let Some(m) = cli.mock_llm {
        cfg.autointerp.mock = Some(match m {
            MockArg::Oracle => MockKind::Oracle,
            MockArg::CoinFlip => MockKind::CoinFlip { seed: cfg.seeds[0] },
            MockArg::Lexical => MockKind::Lexical,
        });
    }
    cfg.validate()?;
    Ok(cfg)
}

fn prepare_out(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let dir = cfg.out_dir.clone();
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    cfg.save(&dir.join("config.json"))?;
    Ok(dir)
}

fn write_failures(dir: &Path, failures: &[RunFailure]) -> Result<()> {
    write_json_lines(&dir.join("failures.jsonl"), failures)?;
    for f in failures {
        log::error!("run {} failed: {}", f.run_id, f.error);
    }
    Ok(())
}

fn write_svg(path: &Path, svg: Result<String, sparselab::Error>) -> Result<()> {
    match svg {
        Ok(s) => fs::write(path, s)?,
        Err(e) => log::warn!("skipping {}: {e}", path.display()),
    }
    Ok(())
}

fn load_dataset(path: &Path) -> Result<ActivationDataset> {
    let is_csv = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    Ok(if is_csv {
        ActivationDataset::read_csv(fs::File::open(path)?)?
    } else {
        ActivationDataset::load_slab(path)?
    })
}

fn gen_toy(cfg: &ExperimentConfig, csv: bool) -> Result<bool> {
    let dir = prepare_out(cfg)?;
    let t = &cfg.toy;
    for &seed in &cfg.seeds {
        let basis = sample_ground_truth_features(t.n_sparse, t.n_dense, seed)?;
        let model = CoefficientModel::random(t.n_sparse, t.decay, t.mean_active, seed)?;
        let data = generate_toy_dataset(&basis, &model, t.n_samples, seed)?;
        data.save_slab(&dir.join(format!("toy-seed{seed}.slab")))?;
        if csv {
            data.write_csv(fs::File::create(dir.join(format!("toy-seed{seed}.csv")))?)?;
        }
        let mut tensors = TensorMap::new();
        tensors.insert("features".into(), basis.features().mapv(|v| v as f32).into_dyn());
        tensors.insert("covariance".into(), model.covariance().mapv(|v| v as f32).into_dyn());
        save_tensors(&dir.join(format!("toy-seed{seed}-truth.slck")), &tensors)?;
        println!("seed {seed}: {} rows x {} dims", data.n_samples(), data.n_dense());
    }
    write_manifest(&dir)?;
    Ok(true)
}

#[allow(clippy::too_many_arguments)]
fn train_sae_cmd(
    cfg: &ExperimentConfig,
    data_path: &Path,
    family: FamilyArg,
    n_latents: Option<usize>,
    l1: f64,
    expansion: usize,
    k: usize,
    epochs: Option<usize>,
) -> Result<bool> {
    let dir = prepare_out(cfg)?;
    let data = load_dataset(data_path)?;
    let dataset_hash = data.content_hash();
    let mut reports = Vec::new();
    let mut failures = Vec::new();
    for &seed in &cfg.seeds {
        let mut tc = TrainConfig {
            seed,
            ..cfg.toy.train.clone()
        };
        if let Some(e) = epochs {
            tc.epochs = e;
        }
        if let FamilyArg::Standard = family {
            tc.l1_coef = l1;
        }
        let run = || -> Result<MetricsReport> {
            let (sae, sidecar, report) = match family {
                FamilyArg::Standard => {
                    let init = init_standard::<f32>(data.n_dense(), n_latents.unwrap_or(2 * data.n_dense()), seed)?;
                    let (sae, report) = train(init, data.rows(), &tc)?;
                    let sidecar = SaeSidecar {
                        family: SaeFamily::Standard,
                        k: None,
                        l1_coef: Some(l1),
                        config: tc.clone(),
                        provenance: SaeProvenance {
                            dataset_hash: dataset_hash.clone(),
                            seed,
                        },
                    };
                    (AnySae::Standard(sae), sidecar, report)
                }
                FamilyArg::TopK => {
                    let init = init_topk::<f32>(data.n_dense(), expansion, k, seed)?;
                    let (sae, report) = train(init, data.rows(), &tc)?;
                    let sidecar = SaeSidecar {
                        family: SaeFamily::TopK,
                        k: Some(k),
                        l1_coef: None,
                        config: tc.clone(),
                        provenance: SaeProvenance {
                            dataset_hash: dataset_hash.clone(),
                            seed,
                        },
                    };
                    (AnySae::TopK(sae), sidecar, report)
                }
            };
            save_sae(&dir.join(format!("sae-seed{seed}.slck")), &sae, &sidecar)?;
            write_json(&dir.join(format!("train-seed{seed}.json")), &report)?;
            let mut m = match &sae {
                AnySae::Standard(s) => reconstruction_metrics(s, &data)?,
                AnySae::TopK(s) => reconstruction_metrics(s, &data)?,
            };
            m.run_id = format!("{}/seed={seed}", sidecar.family.name());
            m.seed = seed;
            m.l1_coef = sidecar.l1_coef;
            m.k = sidecar.k;
            m.val_mse = report.epochs.last().map(|e| e.val_mse);
            Ok(m)
        };
        match run() {
            Ok(m) => {
                println!("seed {seed}: ev={:.4} l0={:.2}", m.explained_variance, m.mean_l0);
                reports.push(m);
            }
            Err(e) => failures.push(RunFailure {
                run_id: format!("seed={seed}"),
                error: format!("{e:#}"),
            }),
        }
    }
    write_jsonl(&dir.join("reports.jsonl"), &reports)?;
    write_csv(&dir.join("reports.csv"), &reports)?;
    write_failures(&dir, &failures)?;
    write_manifest(&dir)?;
    Ok(failures.is_empty())
}

fn write_sweep(dir: &Path, outcome: &SweepOutcome) -> Result<()> {
    write_jsonl(&dir.join("reports.jsonl"), &outcome.reports)?;
    write_csv(&dir.join("reports.csv"), &outcome.reports)?;
    write_json(&dir.join("frontiers.json"), &outcome.frontiers)?;
    write_failures(dir, &outcome.failures)?;
    for m in Measure::ALL {
        write_svg(
            &dir.join(format!("pareto-{}.svg", m.name())),
            sparselab::plot::pareto_svg(&outcome.frontiers, m),
        )?;
    }
    Ok(())
}

fn sweep(cfg: &ExperimentConfig) -> Result<bool> {
    let dir = prepare_out(cfg)?;
    let ok = match cfg.kind {
        ExperimentKind::ToySweep => {
            let outcome = run_toy_sweep(&cfg.toy, &cfg.seeds)?;
            write_sweep(&dir, &outcome)?;
            println!("{} runs, {} failed", outcome.reports.len(), outcome.failures.len());
            outcome.failures.is_empty()
        }
        ExperimentKind::GloveSweep => {
            let outcome = run_glove_sweep(&cfg.glove, &cfg.seeds)?;
            write_sweep(&dir, &outcome)?;
            println!("{} runs, {} failed", outcome.reports.len(), outcome.failures.len());
            outcome.failures.is_empty()
        }
        ExperimentKind::IllustrativeLomax => {
            let mut failures = Vec::new();
            for &seed in &cfg.seeds {
                match run_lomax(&cfg.lomax, seed) {
                    Ok(outcome) => {
                        write_json(&dir.join(format!("lomax-seed{seed}.json")), &outcome)?;
                        write_svg(
                            &dir.join(format!("lomax-seed{seed}.svg")),
                            sparselab::plot::scatter_panels_svg("Lomax features through a random MLP", &outcome.panels),
                        )?;
                        println!(
                            "seed {seed}: kurtosis in {:?} out {:?}",
                            outcome.kurtosis_in, outcome.kurtosis_out
                        );
                    }
                    Err(e) => failures.push(RunFailure {
                        run_id: format!("lomax/seed={seed}"),
                        error: e.to_string(),
                    }),
                }
            }
            write_failures(&dir, &failures)?;
            failures.is_empty()
        }
        other => bail!("sweep does not handle {other:?}; use the matching subcommand"),
    };
    write_manifest(&dir)?;
    Ok(ok)
}

fn eval_transformer(cfg: &ExperimentConfig) -> Result<bool> {
    let dir = prepare_out(cfg)?;
    let outcome = run_transformer_eval(&cfg.transformer, &cfg.seeds)?;
    write_jsonl(&dir.join("reports.jsonl"), &outcome.reports)?;
    write_csv(&dir.join("reports.csv"), &outcome.reports)?;
    write_failures(&dir, &outcome.failures)?;
    for metric in [
        "token_entropy",
        "explained_variance",
        "cosine_sim",
        "mean_l0",
        "ce_loss_score",
    ] {
        write_svg(
            &dir.join(format!("{metric}-by-layer.svg")),
            sparselab::plot::metric_by_layer_svg(&outcome.reports, metric),
        )?;
    }
    write_manifest(&dir)?;
    println!(
        "{} layer reports, {} failed variants",
        outcome.reports.len(),
        outcome.failures.len()
    );
    Ok(outcome.failures.is_empty())
}

fn autointerp(cfg: &ExperimentConfig) -> Result<bool> {
    let dir = prepare_out(cfg)?;
    let transcript = Transcript::default();
    let outcome = run_autointerp(&cfg.autointerp, &cfg.seeds, &transcript);
    transcript.write_jsonl(&dir.join("transcript.jsonl"))?;
    let outcome = outcome?;
    write_json(&dir.join("autointerp.json"), &outcome)?;
    let rocs: BTreeMap<&str, _> = outcome
        .runs
        .iter()
        .filter_map(|r| r.report.pooled.as_ref().map(|p| (r.label.as_str(), p)))
        .collect();
    write_json(&dir.join("roc.json"), &rocs)?;
    write_svg(&dir.join("roc.svg"), sparselab::plot::autointerp_roc_svg(&outcome.runs))?;
    write_failures(&dir, &outcome.failures)?;
    write_manifest(&dir)?;
    let mut ok = outcome.failures.is_empty();
    for r in &outcome.runs {
        let auroc = r.report.pooled.as_ref().map(|p| p.auroc);
        println!(
            "{}: {} latents scored, {} failed, pooled AUROC {}",
            r.label,
            r.report.latents.len() - r.report.n_failed_latents,
            r.report.n_failed_latents,
            auroc.map_or("n/a".to_string(), |a| format!("{a:.4}"))
        );
        ok &= r.report.n_failed_latents == 0;
    }
    Ok(ok)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn plot(kind: PlotKind, input: &Path, metric: &str, measure: Measure, output: Option<PathBuf>) -> Result<bool> {
    let (svg, suffix) = match kind {
        PlotKind::Pareto => {
            let records: Vec<FrontierRecord> = read_json(input)?;
            (
                sparselab::plot::pareto_svg(&records, measure)?,
                format!("pareto-{}", measure.name()),
            )
        }
        PlotKind::Roc => {
            let outcome: AutointerpOutcome = read_json(input)?;
            (sparselab::plot::autointerp_roc_svg(&outcome.runs)?, "roc".to_string())
        }
        PlotKind::MetricByLayer => {
            let reports = read_jsonl(input)?;
            (
                sparselab::plot::metric_by_layer_svg(&reports, metric)?,
                format!("{metric}-by-layer"),
            )
        }
        PlotKind::Scatter2d => {
            let outcome: LomaxOutcome = read_json(input)?;
            let title = format!("Lomax features through a random MLP (seed {})", outcome.seed);
            (
                sparselab::plot::scatter_panels_svg(&title, &outcome.panels)?,
                "scatter".to_string(),
            )
        }
    };
    let output = output.unwrap_or_else(|| input.with_file_name(format!("{suffix}.svg")));
    fs::write(&output, svg)?;
    println!("wrote {}", output.display());
    Ok(true)
}

/// Group key of a report line: everything in its run id except the seed.
fn group_key(r: &MetricsReport) -> String {
    r.run_id
        .split('/')
        .filter(|part| !part.starts_with("seed="))
        .collect::<Vec<_>>()
        .join("/")
}

fn report(input: &Path) -> Result<bool> {
    let reports = read_jsonl(input)?;
    if reports.is_empty() {
        bail!("{} holds no reports", input.display());
    }
    write_csv(&input.with_extension("csv"), &reports)?;
    let mut groups: BTreeMap<String, Vec<&MetricsReport>> = BTreeMap::new();
    for r in &reports {
        groups.entry(group_key(r)).or_default().push(r);
    }
    let columns: [(&str, fn(&MetricsReport) -> Option<f64>); 8] = [
        ("explained_variance", |r| Some(r.explained_variance)),
        ("cosine_sim", |r| Some(r.cosine_sim)),
        ("mean_l0", |r| Some(r.mean_l0)),
        ("mean_l1_over_sqrt_l2", |r| Some(r.mean_l1_over_sqrt_l2)),
        ("mean_hoyer", |r| Some(r.mean_hoyer)),
        ("mmcs", |r| r.mmcs),
        ("ce_loss_score", |r| r.ce_loss_score),
        ("token_entropy", |r| r.token_entropy),
    ];
    let mut out = String::from("group,n");
    for (name, _) in &columns {
        out.push_str(&format!(",{name}_mean,{name}_se"));
    }
    out.push('\n');
    for (key, rs) in &groups {
        out.push_str(&format!("{key},{}", rs.len()));
        for (_, get) in &columns {
            let vals: Vec<f64> = rs.iter().filter_map(|r| get(r)).collect();
            if vals.is_empty() {
                out.push_str(",,");
            } else {
                let (m, se) = mean_and_standard_error(&vals);
                out.push_str(&format!(",{m},{se}"));
            }
        }
        out.push('\n');
    }
    let summary = input.with_file_name("summary.csv");
    fs::write(&summary, &out)?;
    print!("{out}");
    Ok(true)
}

fn run(cli: Cli) -> Result<bool> {
    if let Some(jobs) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.max(1))
            .build_global()?;
    }
    match &cli.command {
        Command::Plot {
            kind,
            input,
            metric,
            measure,
            output,
        } => plot(*kind, input, metric, (*measure).into(), output.clone()),
        Command::Report { input } => report(input),
        command => {
            let cfg = resolve_config(&cli)?;
            match command {
                Command::GenToy { csv } => gen_toy(&cfg, *csv),
                Command::TrainSae {
                    data,
                    family,
                    n_latents,
                    l1,
                    expansion,
                    k,
                    epochs,
                } => train_sae_cmd(&cfg, data, *family, *n_latents, *l1, *expansion, *k, *epochs),
                Command::Sweep => sweep(&cfg),
                Command::EvalTransformer => eval_transformer(&cfg),
                Command::Autointerp => autointerp(&cfg),
                Command::Plot { .. } | Command::Report { .. } => unreachable!("handled above"),
            }
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
