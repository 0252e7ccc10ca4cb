use std::collections::BTreeMap;

use rayon::prelude::*;

use super::config::StudyConfig;
use super::seed::{derive_seed, derive_stream, Purpose, SeedContext};
use crate::dgm::{
    calibrate_beta0, generate_superpopulation, sample_trials, true_effect, DgmSpec, Strata, SuperPopulation,
};
use crate::error::{Error, Result};
use crate::estimators::{run_estimator, TrialBView};
use crate::inference::BootstrapPlan;
use crate::io::{CellReplicateRow, ResultRow};
use crate::metrics::{summarize_cell, ConvergencePolicy, MetricsCell};
use crate::model::{EstimateRecord, EstimatorSpec, TrialIpd};

/// Iterations handed to the worker pool at a time. Results are written
/// after each batch, so a crashed run keeps every finished batch.
const BATCH: usize = 64;

fn ctx(config: &StudyConfig, dgm: u8, iteration: usize, purpose: Purpose) -> SeedContext {
    SeedContext::new(config.base_seed, dgm, iteration as u64, purpose)
}

/// Calibrates the intercept of one DGM from its dedicated stream.
pub fn calibrated_dgm(config: &StudyConfig, id: u8) -> Result<DgmSpec> {
    let dgm = DgmSpec::new(id)?.with_spread(config.spread);
    let mut rng = derive_stream(ctx(config, id, 0, Purpose::Calibration));
    let beta0 = calibrate_beta0(&dgm, config.calibration_n, config.calibration_tol, &mut rng)?;
    Ok(dgm.with_beta0(beta0))
}

/// True marginal effect of a calibrated DGM, from its dedicated stream.
pub fn dgm_truth(config: &StudyConfig, dgm: &DgmSpec) -> Result<f64> {
    let mut rng = derive_stream(ctx(config, dgm.id, 0, Purpose::Truth));
    true_effect(dgm, config.truth_n, &mut rng)
}

/// Everything an iteration of one DGM needs, built once per study.
#[derive(Debug, Clone)]
pub struct DgmContext {
    pub dgm: DgmSpec,
    pub truth: f64,
    pub population: SuperPopulation,
    strata: Strata,
}

impl DgmContext {
    pub fn build(config: &StudyConfig, id: u8) -> Result<Self> {
        let dgm = calibrated_dgm(config, id)?;
        let truth = dgm_truth(config, &dgm)?;
        let mut rng = derive_stream(ctx(config, id, 0, Purpose::Population));
        let population = generate_superpopulation(&dgm, config.superpop_n, &mut rng)?;
        let strata = Strata::new(&population);
        Ok(Self {
            dgm,
            truth,
            population,
            strata,
        })
    }

    /// The two trials drawn in `iteration`.
    pub fn trials(&self, config: &StudyConfig, iteration: usize) -> Result<(TrialIpd, TrialIpd)> {
        let mut sampling = derive_stream(ctx(config, self.dgm.id, iteration, Purpose::Sampling));
        let mut assignment = derive_stream(ctx(config, self.dgm.id, iteration, Purpose::ArmAssignment));
        sample_trials(
            &self.population,
            &self.strata,
            config.n_per_arm,
            &mut sampling,
            &mut assignment,
        )
    }

    pub fn bootstrap_plan(&self, config: &StudyConfig, iteration: usize) -> BootstrapPlan {
        BootstrapPlan {
            replicates: config.bootstrap,
            seed: derive_seed(ctx(config, self.dgm.id, iteration, Purpose::Bootstrap)),
            keep_replicates: config.dump_bootstrap,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct IterationOutput {
    pub records: Vec<EstimateRecord>,
    pub replicates: Vec<CellReplicateRow>,
}

/// Runs every estimator of the grid on one pair of trials. Summary-only
/// methods see trial b through its aggregate data alone; estimator errors
/// become non-converged records.
pub fn run_iteration(
    ctx: &DgmContext,
    config: &StudyConfig,
    grid: &[EstimatorSpec],
    iteration: usize,
) -> Result<IterationOutput> {
    let (trial_a, trial_b) = ctx.trials(config, iteration)?;
    let plan = ctx.bootstrap_plan(config, iteration);
    let mut out = IterationOutput::default();
    for spec in grid {
        let record = match run_estimator(spec, &trial_a, TrialBView::Ipd(&trial_b), &plan) {
            Ok(run) => {
                if let Some(boot) = run.bootstrap {
                    out.replicates.extend(
                        boot.rows
                            .into_iter()
                            .map(|row| CellReplicateRow::new(ctx.dgm.id, iteration, spec, row)),
                    );
                }
                run.record
            }
            Err(e) => EstimateRecord {
                spec: spec.clone(),
                delta_hat: None,
                se: None,
                ci_low: None,
                ci_high: None,
                ess: 0.0,
                converged: false,
                iteration,
                seed: plan.seed,
                link: "identity".into(),
                diagnostic: Some(e.to_string()),
            },
        };
        out.records.push(EstimateRecord { iteration, ..record });
    }
    Ok(out)
}

#[derive(Debug, Clone, Default)]
pub struct StudyOutput {
    pub rows: Vec<ResultRow>,
    pub truths: BTreeMap<u8, f64>,
    pub beta0: BTreeMap<u8, f64>,
    pub cells: Vec<MetricsCell>,
}

/// Runs the study, calling `sink` with each finished batch of rows (in
/// DGM, iteration, grid order) and its bootstrap replicates.
///
/// Output does not depend on the number of workers.
pub fn run_study_with<F>(config: &StudyConfig, mut sink: F) -> Result<StudyOutput>
where
    F: FnMut(&[ResultRow], &[CellReplicateRow]) -> Result<()>,
{
    config.validate()?;
    let grid = config.grid();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.worker_count())
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    let mut out = StudyOutput::default();
    for &id in &config.dgms {
        let dgm_ctx = DgmContext::build(config, id)?;
        out.truths.insert(id, dgm_ctx.truth);
        out.beta0.insert(id, dgm_ctx.dgm.beta0.unwrap_or_default());
        for start in (0..config.iterations).step_by(BATCH) {
            let end = (start + BATCH).min(config.iterations);
            let batch: Vec<IterationOutput> = pool.install(|| {
                (start..end)
                    .into_par_iter()
                    .map(|it| run_iteration(&dgm_ctx, config, &grid, it))
                    .collect::<Result<_>>()
            })?;
            let rows: Vec<ResultRow> = batch
                .iter()
                .flat_map(|b| b.records.iter().map(|r| ResultRow::from_record(id, r)))
                .collect();
            let replicates: Vec<CellReplicateRow> = batch.into_iter().flat_map(|b| b.replicates).collect();
            sink(&rows, &replicates)?;
            out.rows.extend(rows);
        }
    }
    let expected = config.dgms.len() * config.iterations * grid.len();
    if out.rows.len() != expected {
        return Err(Error::Invalid(format!(
            "integrity check failed: {} result rows, expected {expected}",
            out.rows.len()
        )));
    }
    out.cells = summarize_rows(&out.rows, &out.truths, ConvergencePolicy::default())?;
    Ok(out)
}

pub fn run_study(config: &StudyConfig) -> Result<StudyOutput> {
    run_study_with(config, |_, _| Ok(()))
}

/// One metrics cell per (DGM, estimator), in order of first appearance.
pub fn summarize_rows(
    rows: &[ResultRow],
    truths: &BTreeMap<u8, f64>,
    policy: ConvergencePolicy,
) -> Result<Vec<MetricsCell>> {
    let mut order: Vec<(u8, EstimatorSpec)> = Vec::new();
    let mut groups: BTreeMap<(u8, EstimatorSpec), Vec<EstimateRecord>> = BTreeMap::new();
    for row in rows {
        let key = (row.dgm, row.spec());
        let entry = groups.entry(key.clone()).or_default();
        if entry.is_empty() {
            order.push(key);
        }
        entry.push(row.to_record());
    }
    order
        .into_iter()
        .map(|key| {
            let truth = *truths
                .get(&key.0)
                .ok_or_else(|| Error::Invalid(format!("no true effect for DGM {}", key.0)))?;
            summarize_cell(key.0, &groups[&key], truth, policy)
        })
        .collect()
}
