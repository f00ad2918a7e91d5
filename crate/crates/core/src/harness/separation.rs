use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::episodes::{sample_support, Dataset};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, stream};

use super::model::Model;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeparationOptions {
    pub way: usize,
    pub shot: usize,
    pub seed: u64,
}

impl Default for SeparationOptions {
    fn default() -> Self {
        SeparationOptions {
            way: 10,
            shot: 5,
            seed: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeparationReport {
    pub silhouette_before: f64,
    pub silhouette_after: f64,
    /// Dataset class name of each sampled support item.
    pub labels: Vec<String>,
    /// Encoder outputs `e`.
    pub before: Vec<Vec<f64>>,
    /// The same vectors after base-memory adaptation `e'`.
    pub after: Vec<Vec<f64>>,
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Mean silhouette coefficient under Euclidean distance.
///
/// A point alone in its cluster has `a = 0`; a point with `max(a, b) = 0` scores 0.
pub fn silhouette(points: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if points.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} points but {} labels",
            points.len(),
            labels.len()
        )));
    }
    let clusters = labels.iter().max().map_or(0, |m| m + 1);
    let mut sizes = vec![0usize; clusters];
    for &l in labels {
        sizes[l] += 1;
    }
    if sizes.iter().filter(|&&s| s > 0).count() < 2 {
        return Err(Error::InvalidArgument(
            "silhouette needs at least two clusters".into(),
        ));
    }
    let mut total = 0.0;
    for (i, p) in points.iter().enumerate() {
        let mut sums = vec![0.0; clusters];
        for (j, q) in points.iter().enumerate() {
            if i != j {
                sums[labels[j]] += euclidean(p, q);
            }
        }
        let own = labels[i];
        let a = if sizes[own] > 1 {
            sums[own] / (sizes[own] - 1) as f64
        } else {
            0.0
        };
        let b = (0..clusters)
            .filter(|&c| c != own && sizes[c] > 0)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        total += if m > 0.0 { (b - a) / m } else { 0.0 };
    }
    Ok(total / points.len() as f64)
}

/// Silhouette of a sampled support set before and after DMM adaptation.
pub fn separation_report(
    model: &Model,
    dataset: &Dataset,
    options: &SeparationOptions,
) -> Result<SeparationReport> {
    if model.progress.is_untrained() {
        log::warn!("separation report on an untrained model");
    }
    model.check_data(dataset)?;
    let episode = sample_support(
        dataset,
        options.way,
        options.shot,
        derive_seed(options.seed, stream::SEPARATION),
    )?;
    let mut labels = Vec::new();
    let mut ids = Vec::new();
    let mut before = Vec::new();
    let mut after = Vec::new();
    for (local, items) in episode.support.iter().enumerate() {
        for &i in items {
            let e = model.embed(&dataset.item(i).payload)?;
            after.push(model.adapt(&e)?.into_data());
            before.push(e.into_data());
            ids.push(local);
            labels.push(dataset.class_names()[episode.classes[local]].clone());
        }
    }
    Ok(SeparationReport {
        silhouette_before: silhouette(&before, &ids)?,
        silhouette_after: silhouette(&after, &ids)?,
        labels,
        before,
        after,
    })
}

impl SeparationReport {
    /// Rows `stage,label,x0,..,x{d-1}` with `stage` either `before` or `after`.
    pub fn to_csv(&self) -> String {
        let dim = self.before.first().map_or(0, Vec::len);
        let mut out = String::from("stage,label");
        for k in 0..dim {
            write!(out, ",x{k}").unwrap();
        }
        out.push('\n');
        for (stage, rows) in [("before", &self.before), ("after", &self.after)] {
            for (label, row) in self.labels.iter().zip(rows) {
                write!(out, "{stage},{}", csv_field(label)).unwrap();
                for x in row {
                    write!(out, ",{x}").unwrap();
                }
                out.push('\n');
            }
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}
