use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::episodes::Dataset;
use crate::error::Result;

use super::config::{Ablation, TrainConfig};
use super::eval::{evaluate, EvalOptions};
use super::train::{make_splits, meta_train, pretrain};

pub const CSV_HEADER: &str = "model,iterations,acc_1shot,acc_5shot";

/// One row of the ablation table; accuracies are percentages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub model: String,
    pub iterations: usize,
    pub acc_1shot: f64,
    pub acc_5shot: f64,
}

/// The five table variants: name, ablation and routing iterations (`None` keeps the configured value).
pub fn variants() -> [(&'static str, Ablation, Option<usize>); 5] {
    [
        ("w/o DMM", Ablation::NoDmm, None),
        ("w/o QIM", Ablation::NoQim, None),
        ("DMIN", Ablation::Full, Some(1)),
        ("DMIN", Ablation::Full, Some(2)),
        ("DMIN", Ablation::Full, Some(3)),
    ]
}

/// Pre-trains once, then meta-trains and evaluates every variant at 1 and 5 shots.
pub fn run_ablation_suite(dataset: &Dataset, config: &TrainConfig) -> Result<Vec<AblationRow>> {
    config.validate()?;
    let splits = make_splits(dataset, config)?;
    let (pretrained, _) = pretrain(&splits.base, config)?;
    let mut rows = Vec::new();
    for (name, ablation, iterations) in variants() {
        let mut acc = [0.0; 2];
        let mut used_iterations = config.routing.dmm.iterations;
        for (slot, shot) in [1, 5].into_iter().enumerate() {
            let mut cfg = config.clone();
            cfg.ablation = ablation;
            cfg.stage2.shot = shot;
            if let Some(r) = iterations {
                cfg.routing.dmm.iterations = r;
                cfg.routing.qim.iterations = r;
            }
            used_iterations = if ablation.uses_dmm() {
                cfg.routing.dmm.iterations
            } else {
                cfg.routing.qim.iterations
            };
            let mut model = pretrained.clone();
            model.config = cfg;
            meta_train(&mut model, &splits.meta)?;
            let report = evaluate(
                &model,
                &splits.test,
                &EvalOptions::from_config(&model.config),
            )?;
            acc[slot] = 100.0 * report.mean_accuracy;
            log::info!("{name} r={used_iterations} {shot}-shot: {:.2}%", acc[slot]);
        }
        rows.push(AblationRow {
            model: name.to_string(),
            iterations: used_iterations,
            acc_1shot: acc[0],
            acc_5shot: acc[1],
        });
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = format!("{CSV_HEADER}\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{:.2},{:.2}",
            r.model, r.iterations, r.acc_1shot, r.acc_5shot
        )
        .unwrap();
    }
    out
}

/// Change in accuracy from one to three routing iterations, as `(1-shot, 5-shot)` points.
pub fn iteration_effect(rows: &[AblationRow]) -> Option<(f64, f64)> {
    let find = |r: usize| {
        rows.iter()
            .find(|row| row.model == "DMIN" && row.iterations == r)
    };
    let (one, three) = (find(1)?, find(3)?);
    Some((
        three.acc_1shot - one.acc_1shot,
        three.acc_5shot - one.acc_5shot,
    ))
}
