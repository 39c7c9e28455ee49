//! Shared oracles for the integration suites. Everything here is an
//! independent re-computation path: finite differences for gradients,
//! and a selection-sort average-precision routine for ranking metrics.

#![allow(dead_code)] // each test target compiles its own copy

use std::collections::BTreeSet;

use milrex::model::Parameters;

/// Max relative error between analytic gradients and central finite
/// differences of `eval`, swept over every element of every parameter
/// tensor whose name passes `keep`. Returns (max error, worst location).
pub fn fd_max_rel_error(
    params: &Parameters<f64>,
    analytic: &[(String, Vec<f64>)],
    keep: impl Fn(&str) -> bool,
    step: f64,
    eval: impl Fn(&Parameters<f64>) -> f64,
) -> (f64, String) {
    let mut worst = (0.0f64, String::from("-"));
    for (idx, (name, tensor)) in params.visit().into_iter().enumerate() {
        if !keep(&name) {
            continue;
        }
        assert_eq!(analytic[idx].0, name, "analytic grads out of order");
        let grads = &analytic[idx].1;
        assert_eq!(grads.len(), tensor.len());
        for (i, &a) in grads.iter().enumerate() {
            let mut plus = params.clone();
            let mut minus = params.clone();
            plus.visit_mut()[idx].1.data_mut()[i] += step;
            minus.visit_mut()[idx].1.data_mut()[i] -= step;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * step);
            // finite differences lose relative accuracy near zero, so
            // floor the denominator to compare tiny gradients absolutely
            let denom = a.abs().max(fd.abs()).max(1e-6);
            let rel = (a - fd).abs() / denom;
            if rel > worst.0 {
                worst = (rel, format!("{name}[{i}] analytic {a} vs fd {fd}"));
            }
        }
    }
    worst
}

pub type Triple = (String, String, String);

/// Average precision computed the slow way: selection-sort the
/// predictions (score descending, ties by ascending triple), then sum
/// precision at every correct rank and divide by the gold count.
pub fn brute_force_average_precision(
    predictions: &[(Triple, f64)],
    gold: &BTreeSet<Triple>,
) -> f64 {
    let order = selection_order(predictions);
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank0, &idx) in order.iter().enumerate() {
        if gold.contains(&predictions[idx].0) {
            hits += 1;
            sum += hits as f64 / (rank0 + 1) as f64;
        }
    }
    sum / gold.len() as f64
}

/// Precision over the top min(n, len) predictions, brute force.
pub fn brute_force_p_at_n(
    predictions: &[(Triple, f64)],
    gold: &BTreeSet<Triple>,
    n: usize,
) -> f64 {
    let order = selection_order(predictions);
    let take = n.min(order.len());
    if take == 0 {
        return 0.0;
    }
    let hits = order[..take]
        .iter()
        .filter(|&&idx| gold.contains(&predictions[idx].0))
        .count();
    hits as f64 / take as f64
}

fn selection_order(predictions: &[(Triple, f64)]) -> Vec<usize> {
    let mut remaining: Vec<usize> = (0..predictions.len()).collect();
    let mut order = Vec::with_capacity(remaining.len());
    while !remaining.is_empty() {
        let mut best = 0;
        for i in 1..remaining.len() {
            let (ref t_i, s_i) = predictions[remaining[i]];
            let (ref t_b, s_b) = predictions[remaining[best]];
            if s_i > s_b || (s_i == s_b && t_i < t_b) {
                best = i;
            }
        }
        order.push(remaining.swap_remove(best));
    }
    order
}
