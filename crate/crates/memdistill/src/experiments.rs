//! The evaluation drivers of the core crate with independent jobs spread
//! over worker threads. Results are identical to the sequential versions.

use memdistill_core::continual::{compress_stream, ClConfig, ClResult, TaskStream};
use memdistill_core::data::LabeledDataset;
use memdistill_core::eval::{
    ablation_row, artifact_train_set, cell_config, retrain_one, run_cell, AblationGrid, AblationRow, EvalProtocol,
    EvalResult, TrainSet,
};
use memdistill_core::memory::DistilledArtifact;
use memdistill_core::models::ModelSpec;

use crate::error::Result;
use crate::parallel::try_par_map;

pub fn retrain_on(spec: &ModelSpec, data: &TrainSet, protocol: &EvalProtocol, test: &LabeledDataset) -> Result<EvalResult> {
    protocol.validate()?;
    spec.validate()?;
    let acc = try_par_map(protocol.n_models, |i| retrain_one(spec, data, protocol, test, i))?;
    Ok(EvalResult::from_accuracies(acc)?)
}

pub fn retrain_eval(
    artifact: &DistilledArtifact,
    spec: &ModelSpec,
    protocol: &EvalProtocol,
    test: &LabeledDataset,
) -> Result<EvalResult> {
    if test.is_empty() {
        return Err(memdistill_core::Error::Empty("test set").into());
    }
    let data = artifact_train_set(artifact, spec, &artifact.queries())?;
    retrain_on(spec, &data, protocol, test)
}

/// Every `(cell, distillation seed)` pair is one job.
pub fn ablation_suite(
    train: &LabeledDataset,
    test: &LabeledDataset,
    base: &memdistill_core::distill::DistillConfig,
    grid: &AblationGrid,
    protocol: &EvalProtocol,
) -> Result<Vec<AblationRow>> {
    let cells = grid.cells();
    let seeds = &grid.distill_seeds;
    if seeds.is_empty() {
        return Err(memdistill_core::Error::Empty("distillation seeds").into());
    }
    let plans = cells
        .iter()
        .map(|c| cell_config(base, c, grid.budget_floats, 0).map(|cfg| cfg.plan))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let per_job = try_par_map(cells.len() * seeds.len(), |j| {
        let (c, s) = (j / seeds.len(), j % seeds.len());
        run_cell(train, test, base, &cells[c], grid.budget_floats, seeds[s], protocol)
    })?;
    Ok(cells
        .into_iter()
        .zip(plans.iter())
        .enumerate()
        .map(|(c, (cell, plan))| ablation_row(cell, plan, per_job[c * seeds.len()..(c + 1) * seeds.len()].to_vec()))
        .collect())
}

/// Compress-then-recall with the per-task test models trained
/// concurrently.
pub fn run_compress_then_recall(stream: &mut TaskStream, capacity: u64, cfg: &ClConfig) -> Result<ClResult> {
    let buffer = compress_stream(stream, capacity, cfg)?;
    let arts = buffer.artifacts();
    let acc = try_par_map(arts.len(), |t| {
        retrain_eval(&arts[t], &cfg.distill.model, &cfg.eval, &stream.tasks[t].test).map(|r| r.mean)
    })?;
    let share = buffer.task_share();
    let mut stored = Vec::new();
    let mut total = 0;
    for a in arts {
        total += a.stored_floats();
        stored.push(total);
    }
    let reserved = (1..=arts.len() as u64).map(|t| t * share).collect();
    Ok(ClResult::new(acc, stored, reserved)?)
}
