//! Classifier placement rules.

use super::config::Placement;
use crate::error::{config_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlacementKind {
    Anytime,
    Budgeted,
}

/// Layer indices (1-based) that carry a classifier.
///
/// * anytime: `2(i+1)` for `i = 1..L/2-1`, i.e. 4, 6, 8, ...
/// * budgeted: triangular numbers 1, 3, 6, 10, ... up to `L`
///
/// The final layer always carries a classifier. With `count = Some(n)` the
/// first `n - 1` rule positions below `L` are kept, followed by `L`.
pub fn classifier_placement(kind: PlacementKind, num_layers: usize, count: Option<usize>) -> Result<Vec<usize>> {
    let rule: Vec<usize> = match kind {
        PlacementKind::Anytime => {
            if num_layers < 4 {
                return Err(config_err(format!(
                    "classifiers: anytime placement needs at least 4 layers, got {num_layers}"
                )));
            }
            (1..num_layers / 2).map(|i| 2 * (i + 1)).collect()
        }
        PlacementKind::Budgeted => (1..)
            .map(|k| k * (k + 1) / 2)
            .take_while(|&t| t <= num_layers)
            .collect(),
    };
    let mut layers: Vec<usize> = match count {
        None => rule,
        Some(0) => return Err(config_err("classifiers: count must be at least 1")),
        Some(n) => {
            let below: Vec<usize> = rule.into_iter().filter(|&l| l < num_layers).collect();
            if below.len() < n - 1 {
                return Err(config_err(format!(
                    "classifiers: {num_layers} layers only fit {} classifiers under this rule, asked for {n}",
                    below.len() + 1
                )));
            }
            below.into_iter().take(n - 1).collect()
        }
    };
    if layers.last() != Some(&num_layers) {
        layers.push(num_layers);
    }
    Ok(layers)
}

pub(crate) fn resolve(p: &Placement, num_layers: usize) -> Result<Vec<usize>> {
    match p {
        Placement::Anytime => classifier_placement(PlacementKind::Anytime, num_layers, None),
        Placement::Budgeted { count } => classifier_placement(PlacementKind::Budgeted, num_layers, *count),
        Placement::Explicit { layers } => {
            if layers.is_empty() {
                return Err(config_err("classifiers: explicit layer list is empty"));
            }
            if layers.windows(2).any(|w| w[0] >= w[1]) {
                return Err(config_err(format!("classifiers: layers {layers:?} are not strictly increasing")));
            }
            if layers[0] == 0 || *layers.last().unwrap() != num_layers {
                return Err(config_err(format!(
                    "classifiers: layers {layers:?} must lie in [1, {num_layers}] and end at {num_layers}"
                )));
            }
            Ok(layers.clone())
        }
    }
}
