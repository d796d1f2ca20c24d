//! Global ranking of components by smoothed score and budget enforcement.
//!
//! Ranking is global across every adapted site, not per-site: sites compete
//! for the shared cap, which is what lets useful sites keep more components
//! than the average budget. Ties break on higher |gate|, then lower layer
//! index, then lower component index, so a decision is a pure function of
//! model state.

use crate::dora::{DoraLinear, LayerId, MatrixKind};
use crate::error::Result;

/// The outcome of one budget enforcement.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PruneDecision {
    pub step: usize,
    pub cap: usize,
    /// (site, component index) pairs kept under the cap.
    pub kept: Vec<(LayerId, usize)>,
    /// Pairs pruned at this event.
    pub pruned: Vec<(LayerId, usize)>,
}

/// Ranks all components by smoothed score and prunes everything outside
/// the top `cap`. A kept component that is still gated at zero stays inert
/// until a gradient step restores it.
pub fn enforce_budget(sites: &mut [&mut DoraLinear], cap: usize, step: usize) -> PruneDecision {
    struct Entry {
        site: usize,
        comp: usize,
        score: f64,
        gate_abs: f64,
    }

    let mut entries: Vec<Entry> = Vec::new();
    for (si, site) in sites.iter().enumerate() {
        for (ci, comp) in site.components.iter().enumerate() {
            entries.push(Entry {
                site: si,
                comp: ci,
                score: comp.smoothed_score,
                gate_abs: comp.gate().abs(),
            });
        }
    }
    entries.sort_by(|x, y| {
        y.score
            .total_cmp(&x.score)
            .then(y.gate_abs.total_cmp(&x.gate_abs))
            .then(x.site.cmp(&y.site))
            .then(x.comp.cmp(&y.comp))
    });

    let mut kept = Vec::new();
    let mut pruned = Vec::new();
    for (rank, e) in entries.iter().enumerate() {
        let id = sites[e.site].layer_id;
        if rank < cap {
            sites[e.site].components[e.comp].eligible = true;
            kept.push((id, e.comp));
        } else {
            sites[e.site].components[e.comp].prune();
            sites[e.site].components[e.comp].eligible = false;
            pruned.push((id, e.comp));
        }
    }
    kept.sort();
    pruned.sort();
    PruneDecision {
        step,
        cap,
        kept,
        pruned,
    }
}

/// Active/eligible counts per (layer, kind) cell.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AllocationRow {
    pub layer: usize,
    pub kind: MatrixKind,
    /// Components whose active flag is set (contributing or warm).
    pub active: usize,
    /// Components kept by the last enforcement, including inert ones.
    pub eligible: usize,
}

/// Snapshot of the component distribution at one step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AllocationReport {
    pub step: usize,
    pub rows: Vec<AllocationRow>,
}

pub fn allocation_report(sites: &[&DoraLinear], step: usize) -> AllocationReport {
    let mut rows: Vec<AllocationRow> = sites
        .iter()
        .map(|site| AllocationRow {
            layer: site.layer_id.layer,
            kind: site.layer_id.kind,
            active: site.active_count(),
            eligible: site.eligible_count(),
        })
        .collect();
    rows.sort_by_key(|r| (r.layer, r.kind.index()));
    AllocationReport { step, rows }
}

impl AllocationReport {
    pub fn total_active(&self) -> usize {
        self.rows.iter().map(|r| r.active).sum()
    }

    pub fn total_eligible(&self) -> usize {
        self.rows.iter().map(|r| r.eligible).sum()
    }

    pub fn cell(&self, layer: usize, kind: MatrixKind) -> Option<&AllocationRow> {
        self.rows.iter().find(|r| r.layer == layer && r.kind == kind)
    }

    /// Mean active components per site.
    pub fn mean_active(&self) -> f64 {
        if self.rows.is_empty() {
            0.0
        } else {
            self.total_active() as f64 / self.rows.len() as f64
        }
    }

    /// CSV with a run-id comment, a header, and one row per cell.
    pub fn to_csv(&self, run_id: &str) -> String {
        let mut out = format!("# run_id: {run_id}\nlayer,kind,active,eligible\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{}\n", r.layer, r.kind, r.active, r.eligible));
        }
        out
    }
}

/// Convenience used by tests and acceptance checks.
pub fn enforce_budget_ok(
    sites: &mut [&mut DoraLinear],
    cap: usize,
    step: usize,
) -> Result<PruneDecision> {
    Ok(enforce_budget(sites, cap, step))
}
