use std::collections::BTreeMap;

use ndarray::Axis;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{Condition, GloveSweepConfig, ToySweepConfig};
use crate::dataset::ActivationDataset;
use crate::error::{ensure, Error, Result};
use crate::ingestion::{embedding_dataset, load_glove};
use crate::metrics::{
    self, cosine_similarity, explained_variance, mean_and_standard_error, mmcs, pareto_frontier, sparsity_measures,
    MetricsReport, Orientation, ParetoPoint,
};
use crate::randomnets::{init_mlp, mlp_forward, InitScheme, NetParams};
use crate::sae::{init_standard, split_indices, train, SparseAutoencoder, TrainConfig};
use crate::toygen::{
    gaussian_control, generate_toy_dataset, sample_ground_truth_features, CoefficientModel, ControlMatching,
    GroundTruthBasis,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunFailure {
    pub run_id: String,
    pub error: String,
}

/// Sparsity measure plotted against explained variance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Measure {
    L0,
    L1,
    L1OverSqrtL2,
    Hoyer,
}

impl Measure {
    pub const ALL: [Measure; 4] = [Measure::L0, Measure::L1, Measure::L1OverSqrtL2, Measure::Hoyer];

    pub fn name(self) -> &'static str {
        match self {
            Measure::L0 => "l0",
            Measure::L1 => "l1",
            Measure::L1OverSqrtL2 => "l1_over_sqrt_l2",
            Measure::Hoyer => "hoyer",
        }
    }

    pub fn orientation(self) -> Orientation {
        match self {
            Measure::Hoyer => Orientation::HigherIsSparser,
            _ => Orientation::LowerIsSparser,
        }
    }

    pub fn of(self, r: &MetricsReport) -> f64 {
        match self {
            Measure::L0 => r.mean_l0,
            Measure::L1 => r.mean_l1,
            Measure::L1OverSqrtL2 => r.mean_l1_over_sqrt_l2,
            Measure::Hoyer => r.mean_hoyer,
        }
    }
}

/// Seed average of one (condition, l1_coef) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AveragedPoint {
    pub l1_coef: f64,
    pub n_seeds: usize,
    pub sparsity_mean: f64,
    pub sparsity_se: f64,
    pub ev_mean: f64,
    pub ev_se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrontierRecord {
    pub condition: Condition,
    pub measure: Measure,
    pub points: Vec<AveragedPoint>,
    pub frontier: Vec<ParetoPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepOutcome {
    pub reports: Vec<MetricsReport>,
    pub failures: Vec<RunFailure>,
    pub frontiers: Vec<FrontierRecord>,
}

pub fn run_id(condition: Condition, l1_coef: f64, seed: u64) -> String {
    format!("{}/l1={l1_coef:.6e}/seed={seed}", condition.name())
}

/// Condition datasets derived from one base dataset. The two `-out`
/// conditions share one random MLP.
fn derive_conditions(
    base: &ActivationDataset,
    conditions: &[Condition],
    matching: ControlMatching,
    mlp_init: InitScheme,
    seed: u64,
) -> Result<BTreeMap<Condition, ActivationDataset>> {
    let needs_control = conditions
        .iter()
        .any(|c| matches!(c, Condition::GaussianIn | Condition::GaussianOut));
    let control = if needs_control {
        Some(gaussian_control(base, matching, seed)?)
    } else {
        None
    };
    let needs_mlp = conditions
        .iter()
        .any(|c| matches!(c, Condition::SuperposedOut | Condition::GaussianOut));
    let mlp = if needs_mlp {
        Some(init_mlp(base.n_dense(), seed, mlp_init)?)
    } else {
        None
    };
    let mut out = BTreeMap::new();
    for &c in conditions {
        let data = match c {
            Condition::SuperposedIn => base.clone(),
            Condition::GaussianIn => control.clone().expect("control built"),
            Condition::SuperposedOut => mlp_forward(mlp.as_ref().expect("mlp built"), base)?,
            Condition::GaussianOut => mlp_forward(
                mlp.as_ref().expect("mlp built"),
                control.as_ref().expect("control built"),
            )?,
        };
        out.insert(c, data);
    }
    Ok(out)
}

/// Trains one standard SAE and evaluates it on its validation split.
pub fn run_standard(
    data: &ActivationDataset,
    n_latents: usize,
    train_cfg: &TrainConfig,
    truth: Option<&GroundTruthBasis>,
) -> Result<(MetricsReport, crate::sae::StandardSae<f32>)> {
    let sae = init_standard::<f32>(data.n_dense(), n_latents, train_cfg.seed)?;
    let (sae, report) = train(sae, data.rows(), train_cfg)?;
    let (_, val_idx) = split_indices(data.n_samples(), train_cfg.val_fraction, train_cfg.seed);
    let val = data.rows().select(Axis(0), &val_idx);
    let z = sae.encode(val.view());
    let recon = sae.decode(z.view());
    let s = sparsity_measures(z.view())?;
    let metrics = MetricsReport {
        l1_coef: Some(train_cfg.l1_coef),
        seed: train_cfg.seed,
        explained_variance: explained_variance(val.view(), recon.view())?,
        cosine_sim: cosine_similarity(val.view(), recon.view())?,
        mean_l0: s.mean_l0,
        mean_l1: s.mean_l1,
        mean_l1_over_sqrt_l2: s.mean_l1_over_sqrt_l2,
        mean_hoyer: s.mean_hoyer,
        val_mse: report.epochs.last().map(|e| e.val_mse),
        mmcs: truth.map(|t| mmcs(sae.decoder(), t)).transpose()?,
        ..Default::default()
    };
    Ok((metrics, sae))
}

fn sweep_seed(
    datasets: &BTreeMap<Condition, ActivationDataset>,
    l1_coefs: &[f64],
    n_latents: usize,
    base_train: &TrainConfig,
    seed: u64,
    truth: Option<&GroundTruthBasis>,
) -> Vec<std::result::Result<MetricsReport, RunFailure>> {
    let cells: Vec<(Condition, f64)> = datasets
        .keys()
        .flat_map(|&c| l1_coefs.iter().map(move |&l| (c, l)))
        .collect();
    cells
        .par_iter()
        .map(|&(condition, l1_coef)| {
            let id = run_id(condition, l1_coef, seed);
            let cfg = TrainConfig {
                l1_coef,
                seed,
                ..base_train.clone()
            };
            let truth = truth.filter(|_| condition == Condition::SuperposedIn);
            match run_standard(&datasets[&condition], n_latents, &cfg, truth) {
                Ok((mut r, _)) => {
                    r.run_id = id;
                    r.condition = Some(condition.name().to_string());
                    log::info!(
                        "{}: ev={:.4} l1/sqrt(l2)={:.4}",
                        r.run_id,
                        r.explained_variance,
                        r.mean_l1_over_sqrt_l2
                    );
                    Ok(r)
                }
                Err(e) => {
                    log::error!("{id} failed: {e}");
                    Err(RunFailure {
                        run_id: id,
                        error: e.to_string(),
                    })
                }
            }
        })
        .collect()
}

fn collect(
    results: Vec<std::result::Result<MetricsReport, RunFailure>>,
    reports: &mut Vec<MetricsReport>,
    failures: &mut Vec<RunFailure>,
) {
    for r in results {
        match r {
            Ok(r) => reports.push(r),
            Err(f) => failures.push(f),
        }
    }
}

fn finish(mut reports: Vec<MetricsReport>, mut failures: Vec<RunFailure>) -> SweepOutcome {
    reports.sort_by(|a, b| a.run_id.cmp(&b.run_id));
    failures.sort_by(|a, b| a.run_id.cmp(&b.run_id));
    let frontiers = frontiers(&reports);
    SweepOutcome {
        reports,
        failures,
        frontiers,
    }
}

/// Standard SAEs over every (condition, l1_coef, seed) of the toy setup.
/// Data, control, MLP and SAE of a run all derive from its seed.
pub fn run_toy_sweep(cfg: &ToySweepConfig, seeds: &[u64]) -> Result<SweepOutcome> {
    ensure!(!cfg.l1_coefs.is_empty(), "l1 grid is empty");
    let n_latents = cfg.n_latents.unwrap_or(2 * cfg.n_sparse);
    let (mut reports, mut failures) = (Vec::new(), Vec::new());
    for &seed in seeds {
        let prepared = (|| -> Result<_> {
            let basis = sample_ground_truth_features(cfg.n_sparse, cfg.n_dense, seed)?;
            let model = CoefficientModel::random(cfg.n_sparse, cfg.decay, cfg.mean_active, seed)?;
            let base = generate_toy_dataset(&basis, &model, cfg.n_samples, seed)?;
            let data = derive_conditions(&base, &cfg.conditions, cfg.control_matching, cfg.mlp_init, seed)?;
            Ok((basis, data))
        })();
        match prepared {
            Ok((basis, data)) => collect(
                sweep_seed(&data, &cfg.l1_coefs, n_latents, &cfg.train, seed, Some(&basis)),
                &mut reports,
                &mut failures,
            ),
            Err(e) => {
                for &c in &cfg.conditions {
                    for &l in &cfg.l1_coefs {
                        failures.push(RunFailure {
                            run_id: run_id(c, l, seed),
                            error: e.to_string(),
                        });
                    }
                }
            }
        }
    }
    Ok(finish(reports, failures))
}

/// The same four-condition sweep over word vectors (or a checkpoint's
/// embedding matrix) instead of toy data; `superposed` here names the real
/// vectors.
pub fn run_glove_sweep(cfg: &GloveSweepConfig, seeds: &[u64]) -> Result<SweepOutcome> {
    let mut base = match (&cfg.path, &cfg.checkpoint) {
        (Some(p), _) => load_glove(p)?.to_dataset()?,
        (None, Some(c)) => embedding_dataset(&NetParams::load(c, None)?.1)?,
        (None, None) => {
            return Err(Error::InvalidArgument(
                "glove sweep needs a vector file or checkpoint".into(),
            ))
        }
    };
    if let Some(max) = cfg.max_rows {
        if base.n_samples() > max {
            base = base.select(&(0..max).collect::<Vec<_>>());
        }
    }
    let n_latents = cfg.expansion * base.n_dense();
    let (mut reports, mut failures) = (Vec::new(), Vec::new());
    for &seed in seeds {
        let data = derive_conditions(&base, &cfg.conditions, cfg.control_matching, cfg.mlp_init, seed)?;
        collect(
            sweep_seed(&data, &cfg.l1_coefs, n_latents, &cfg.train, seed, None),
            &mut reports,
            &mut failures,
        );
    }
    Ok(finish(reports, failures))
}

/// Seed-averaged points per (condition, l1_coef) and their Pareto frontier,
/// for every sparsity measure.
pub fn frontiers(reports: &[MetricsReport]) -> Vec<FrontierRecord> {
    let mut cells: BTreeMap<(String, u64), Vec<&MetricsReport>> = BTreeMap::new();
    for r in reports {
        let (Some(c), Some(l)) = (&r.condition, r.l1_coef) else {
            continue;
        };
        cells.entry((c.clone(), l.to_bits())).or_default().push(r);
    }
    let mut out = Vec::new();
    for condition in Condition::ALL {
        for measure in Measure::ALL {
            let points: Vec<AveragedPoint> = cells
                .iter()
                .filter(|((c, _), _)| c == condition.name())
                .map(|((_, l), rs)| average(f64::from_bits(*l), rs, measure))
                .collect();
            if points.is_empty() {
                continue;
            }
            let candidates: Vec<ParetoPoint> = points
                .iter()
                .filter(|p| p.sparsity_mean.is_finite() && p.ev_mean.is_finite())
                .map(|p| ParetoPoint {
                    sparsity: p.sparsity_mean,
                    explained_variance: p.ev_mean,
                    run_id: format!("{}/l1={:.6e}", condition.name(), p.l1_coef),
                })
                .collect();
            let frontier = pareto_frontier(&candidates, measure.orientation());
            out.push(FrontierRecord {
                condition,
                measure,
                points,
                frontier,
            });
        }
    }
    out
}

fn average(l1_coef: f64, rs: &[&MetricsReport], measure: Measure) -> AveragedPoint {
    let s: Vec<f64> = rs.iter().map(|r| measure.of(r)).collect();
    let e: Vec<f64> = rs.iter().map(|r| r.explained_variance).collect();
    let (sparsity_mean, sparsity_se) = mean_and_standard_error(&s);
    let (ev_mean, ev_se) = mean_and_standard_error(&e);
    AveragedPoint {
        l1_coef,
        n_seeds: rs.len(),
        sparsity_mean,
        sparsity_se,
        ev_mean,
        ev_se,
    }
}

pub fn frontier_for(records: &[FrontierRecord], condition: Condition, measure: Measure) -> Option<&FrontierRecord> {
    records
        .iter()
        .find(|r| r.condition == condition && r.measure == measure)
}

/// Area between two conditions' frontiers over their shared EV range.
pub fn gap_area(records: &[FrontierRecord], a: Condition, b: Condition, measure: Measure) -> Option<f64> {
    let fa = frontier_for(records, a, measure)?;
    let fb = frontier_for(records, b, measure)?;
    Some(metrics::frontier_gap_area(&fa.frontier, &fb.frontier, 1000))
}
