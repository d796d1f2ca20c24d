//! Per-component importance scores and their exponential moving average.
//!
//! A component's raw score is the share of its update norm in the layer's
//! total update norm: s_i = ||dW_i||_F / ||sum_j dW_j||_F. The denominator
//! runs over all r' components of the site, pruned ones contributing zero.
//! A site whose total update is zero scores every component 0, deferring
//! pruning pressure to informative steps.

use crate::dora::{DoraLinear, LoraComponent};
use crate::error::{Error, Result};

/// Raw scores of every site at one step, in site order.
#[derive(Debug, Clone)]
pub struct ImportanceSnapshot {
    pub step: usize,
    /// Outer index: site; inner: component.
    pub scores: Vec<Vec<f64>>,
}

/// Raw importance scores for one site.
///
/// Numerators use the exact factored norm |c| ||a|| ||b||; the shared
/// denominator materializes the site's total update densely.
pub fn raw_scores(site: &DoraLinear) -> Vec<f64> {
    let total_norm = site.total_delta().frobenius();
    if total_norm == 0.0 {
        return vec![0.0; site.components.len()];
    }
    site.components
        .iter()
        .map(|c| c.delta_norm() / total_norm)
        .collect()
}

/// Eq.-style EMA update; seeds the average with the first observed score
/// so early components are not biased toward zero.
pub fn update_smoothed(
    comp: &mut LoraComponent,
    score: f64,
    beta: f64,
    _step: usize,
) -> Result<f64> {
    if !(0.0..1.0).contains(&beta) {
        return Err(Error::Config(format!(
            "beta must lie in [0, 1), got {beta}"
        )));
    }
    let smoothed = if comp.score_seeded {
        beta * comp.smoothed_score + (1.0 - beta) * score
    } else {
        comp.score_seeded = true;
        score
    };
    comp.smoothed_score = smoothed;
    Ok(smoothed)
}

/// Scores every site and folds the results into each component's EMA.
pub fn score_and_smooth(
    sites: &mut [&mut DoraLinear],
    beta: f64,
    step: usize,
) -> Result<ImportanceSnapshot> {
    let mut scores = Vec::with_capacity(sites.len());
    for site in sites.iter_mut() {
        let raw = raw_scores(site);
        for (comp, &s) in site.components.iter_mut().zip(&raw) {
            update_smoothed(comp, s, beta, step)?;
        }
        scores.push(raw);
    }
    Ok(ImportanceSnapshot { step, scores })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dora::{LayerId, MatrixKind};
    use crate::numerics::Matrix;
    use crate::rng::Rng;

    fn site_with(comps: usize, seed: u64) -> DoraLinear {
        let mut rng = Rng::from_seed(seed);
        let w0 = Matrix::from_fn(4, 4, |_, _| rng.normal());
        let mut site = DoraLinear::new(
            LayerId {
                layer: 0,
                kind: MatrixKind::Value,
            },
            w0,
        );
        site.attach_components(comps, &mut rng);
        site
    }

    #[test]
    fn single_active_component_scores_one() {
        let mut site = site_with(1, 1);
        site.components[0].set_gate(0.3);
        let s = raw_scores(&site);
        assert!((s[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn two_identical_components_score_half() {
        let mut site = site_with(2, 2);
        let clone = site.components[0].clone();
        site.components[1] = clone;
        site.components[0].set_gate(1.0);
        site.components[1].set_gate(1.0);
        let s = raw_scores(&site);
        assert!((s[0] - 0.5).abs() < 1e-12, "{s:?}");
        assert!((s[1] - 0.5).abs() < 1e-12, "{s:?}");
    }

    #[test]
    fn orthogonal_updates_with_norms_three_and_four() {
        // Components along disjoint coordinates: total norm 5, scores 0.6, 0.8.
        let mut site = site_with(2, 3);
        site.components[0].a.value = Matrix::from_rows(&[vec![3.0], vec![0.0], vec![0.0], vec![0.0]]);
        site.components[0].b.value = Matrix::from_rows(&[vec![1.0, 0.0, 0.0, 0.0]]);
        site.components[0].set_gate(1.0);
        site.components[1].a.value = Matrix::from_rows(&[vec![0.0], vec![4.0], vec![0.0], vec![0.0]]);
        site.components[1].b.value = Matrix::from_rows(&[vec![0.0, 1.0, 0.0, 0.0]]);
        site.components[1].set_gate(1.0);

        let s = raw_scores(&site);
        assert!((s[0] - 0.6).abs() < 1e-12, "{s:?}");
        assert!((s[1] - 0.8).abs() < 1e-12, "{s:?}");
    }

    #[test]
    fn zero_denominator_scores_all_zero() {
        let site = site_with(3, 4);
        assert_eq!(raw_scores(&site), vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn pruned_components_score_zero_and_decay() {
        let mut site = site_with(2, 5);
        site.components[0].set_gate(1.0);
        site.components[1].set_gate(1.0);
        // Seed both EMAs.
        let raw = raw_scores(&site);
        for (comp, &s) in site.components.iter_mut().zip(&raw) {
            update_smoothed(comp, s, 0.9, 1).unwrap();
        }
        site.components[1].prune();
        let before = site.components[1].smoothed_score;
        assert!(before > 0.0);
        for step in 2..6 {
            let raw = raw_scores(&site);
            assert_eq!(raw[1], 0.0);
            let prev = site.components[1].smoothed_score;
            for (comp, &s) in site.components.iter_mut().zip(&raw) {
                update_smoothed(comp, s, 0.9, step).unwrap();
            }
            assert!(site.components[1].smoothed_score < prev);
        }
    }

    #[test]
    fn ema_beta_zero_tracks_raw_score() {
        let mut site = site_with(1, 6);
        for (i, &s) in [0.4, 0.9, 0.1].iter().enumerate() {
            let out = update_smoothed(&mut site.components[0], s, 0.0, i).unwrap();
            assert_eq!(out, s);
        }
    }

    #[test]
    fn ema_hand_case() {
        let mut site = site_with(1, 7);
        site.components[0].smoothed_score = 0.5;
        site.components[0].score_seeded = true;
        let out = update_smoothed(&mut site.components[0], 0.7, 0.9, 1).unwrap();
        assert!((out - 0.52).abs() < 1e-12, "{out}");
    }

    #[test]
    fn ema_converges_monotonically_to_constant_stream() {
        let mut site = site_with(1, 8);
        update_smoothed(&mut site.components[0], 0.2, 0.9, 0).unwrap();
        // From below: constant stream of 0.8.
        let mut prev = site.components[0].smoothed_score;
        for step in 1..60 {
            let s = update_smoothed(&mut site.components[0], 0.8, 0.9, step).unwrap();
            assert!(s > prev);
            assert!(s <= 0.8);
            prev = s;
        }
        assert!((prev - 0.8).abs() < 0.01);
    }

    #[test]
    fn invalid_beta_is_a_config_error() {
        let mut site = site_with(1, 9);
        for bad in [1.0, 1.2, -0.1] {
            let err = update_smoothed(&mut site.components[0], 0.5, bad, 0).unwrap_err();
            assert!(matches!(err, Error::Config(_)), "beta {bad}");
            assert!(err.to_string().contains("beta"));
        }
    }

    #[test]
    fn first_event_seeds_ema_with_raw_score() {
        let mut site = site_with(1, 10);
        let out = update_smoothed(&mut site.components[0], 0.63, 0.9, 0).unwrap();
        assert_eq!(out, 0.63);
        assert_eq!(site.components[0].smoothed_score, 0.63);
    }

    #[test]
    fn score_sum_at_least_one_for_nonzero_layers() {
        let mut rng = Rng::from_seed(11);
        for trial in 0..100 {
            let mut site = site_with(4, 100 + trial);
            for comp in &mut site.components {
                comp.set_gate(rng.normal());
            }
            if site.total_delta().frobenius() == 0.0 {
                continue;
            }
            let sum: f64 = raw_scores(&site).iter().sum();
            assert!(sum >= 1.0 - 1e-9, "trial {trial}: sum {sum}");
        }
    }

    #[test]
    fn doubling_a_gate_raises_own_score_and_lowers_others() {
        let mut rng = Rng::from_seed(12);
        let mut checked = 0;
        for trial in 0..20 {
            let mut site = site_with(4, 200 + trial);
            for comp in &mut site.components {
                comp.set_gate(1.0 + rng.uniform());
            }
            if site.total_delta().frobenius() == 0.0 {
                continue;
            }
            let before = raw_scores(&site);
            let g = site.components[0].gate();
            site.components[0].set_gate(2.0 * g);
            if site.total_delta().frobenius() == 0.0 {
                continue;
            }
            let after = raw_scores(&site);
            assert!(after[0] > before[0], "trial {trial}");
            for i in 1..4 {
                assert!(after[i] < before[i], "trial {trial} comp {i}");
            }
            checked += 1;
        }
        assert!(checked >= 15, "too few usable trials: {checked}");
    }
}
