use rand_distr::{Distribution, Normal, StandardNormal};

use super::{Dataset, Item, Payload};
use crate::error::{Error, Result};
use crate::rng::seeded;

/// Gaussian clusters around centres drawn uniformly on the sphere of radius
/// `separation * noise_sigma`. Class `c` is named `c{c}`.
pub fn gen_synthetic(
    num_classes: usize,
    per_class: usize,
    dim: usize,
    separation: f64,
    noise_sigma: f64,
    seed: u64,
) -> Result<Dataset> {
    if num_classes == 0 || per_class == 0 || dim == 0 {
        return Err(Error::InvalidArgument(
            "classes, items per class and dimension must be positive".into(),
        ));
    }
    if !(separation > 0.0 && separation.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "separation must be > 0, got {separation}"
        )));
    }
    if !(noise_sigma > 0.0 && noise_sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "noise sigma must be > 0, got {noise_sigma}"
        )));
    }
    let mut rng = seeded(seed);
    let radius = separation * noise_sigma;
    let centres: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| loop {
            let g: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let n = g.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 0.0 {
                break g.into_iter().map(|x| radius * x / n).collect();
            }
        })
        .collect();
    let noise = Normal::new(0.0, noise_sigma).expect("positive sigma");
    let mut items = Vec::with_capacity(num_classes * per_class);
    for (label, centre) in centres.iter().enumerate() {
        for _ in 0..per_class {
            let v = centre.iter().map(|c| c + noise.sample(&mut rng)).collect();
            items.push(Item {
                label,
                payload: Payload::Vector(v),
            });
        }
    }
    let names = (0..num_classes).map(|c| format!("c{c}")).collect();
    Dataset::new(names, items)
}
