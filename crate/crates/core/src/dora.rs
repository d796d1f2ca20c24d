//! Gated rank-1 adapter components over a frozen base matrix.
//!
//! Each adapted projection keeps its pretrained matrix `w0` untouched and
//! adds `r'` rank-1 updates, one per [`LoraComponent`]. A component is the
//! triplet (a, b, c): column factor, row factor, and a scalar gate that is
//! trained like any other parameter. Pruning is gentle: it only zeroes the
//! gate, so a later gradient step can bring the component back.

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Node, Tape};
use crate::params::Param;
use crate::rng::Rng;

/// The six adaptation sites of one transformer layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MatrixKind {
    Query,
    Key,
    Value,
    Output,
    Ffn1,
    Ffn2,
}

impl MatrixKind {
    pub const ALL: [MatrixKind; 6] = [
        MatrixKind::Query,
        MatrixKind::Key,
        MatrixKind::Value,
        MatrixKind::Output,
        MatrixKind::Ffn1,
        MatrixKind::Ffn2,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MatrixKind::Query => "query",
            MatrixKind::Key => "key",
            MatrixKind::Value => "value",
            MatrixKind::Output => "output",
            MatrixKind::Ffn1 => "ffn1",
            MatrixKind::Ffn2 => "ffn2",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        MatrixKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown matrix kind `{s}`")))
    }

    pub fn index(self) -> usize {
        MatrixKind::ALL.iter().position(|&k| k == self).unwrap()
    }

    /// (d_in, d_out) of this site given model dims.
    pub fn dims(self, d: usize, d_ff: usize) -> (usize, usize) {
        match self {
            MatrixKind::Ffn1 => (d, d_ff),
            MatrixKind::Ffn2 => (d_ff, d),
            _ => (d, d),
        }
    }
}

impl std::fmt::Display for MatrixKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Identifies one adaptation site: layer index plus matrix kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LayerId {
    pub layer: usize,
    pub kind: MatrixKind,
}

impl std::fmt::Display for LayerId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "L{}.{}", self.layer, self.kind)
    }
}

/// One rank-1 update unit: column factor, row factor, scalar gate.
///
/// Invariant: `active == false` implies the gate is exactly zero.
#[derive(Clone)]
pub struct LoraComponent {
    /// Column factor, d_out x 1.
    pub a: Param,
    /// Row factor, 1 x d_in.
    pub b: Param,
    /// Scalar gate, 1x1; zeroed by pruning.
    pub c: Param,
    /// False while pruned; flips back once the gate is nonzero again.
    pub active: bool,
    /// Kept by the last budget enforcement (or never pruned).
    pub eligible: bool,
    /// Exponential moving average of the raw importance score.
    pub smoothed_score: f64,
    pub(crate) score_seeded: bool,
}

impl LoraComponent {
    /// Kaiming-initialized factors with a zero gate, so the component's
    /// initial contribution is exactly zero.
    pub fn new(d_in: usize, d_out: usize, rng: &mut Rng) -> Self {
        let std = (2.0 / d_in as f64).sqrt();
        let a = Matrix::from_fn(d_out, 1, |_, _| rng.normal_scaled(std));
        let b = Matrix::from_fn(1, d_in, |_, _| rng.normal_scaled(std));
        LoraComponent {
            a: Param::new(a),
            b: Param::new(b),
            c: Param::new(Matrix::scalar(0.0)),
            active: true,
            eligible: true,
            smoothed_score: 0.0,
            score_seeded: false,
        }
    }

    pub fn gate(&self) -> f64 {
        self.c.value.item()
    }

    pub fn set_gate(&mut self, v: f64) {
        self.c.value.set(0, 0, v);
    }

    /// Gentle prune: zero the gate, keep the factors.
    pub fn prune(&mut self) {
        self.set_gate(0.0);
        self.active = false;
    }

    /// Re-activates the component if training made its gate nonzero.
    pub fn restore_check(&mut self) -> bool {
        if self.gate() != 0.0 && !self.active {
            self.active = true;
            self.eligible = true;
        }
        self.active
    }

    /// Frobenius norm of this component's dense update, computed in
    /// factored form: |c| * ||a|| * ||b||, exact for a rank-1 product.
    pub fn delta_norm(&self) -> f64 {
        self.gate().abs() * self.a.value.frobenius() * self.b.value.frobenius()
    }

    /// Dense materialization of the update, shaped d_in x d_out so it can
    /// be added to `w0`. Used by scoring denominators and test oracles.
    pub fn dense_delta(&self) -> Matrix {
        let bt = self.b.value.transpose(); // d_in x 1
        let at = self.a.value.transpose(); // 1 x d_out
        bt.matmul(&at).expect("rank-1 shapes").scale(self.gate())
    }
}

/// Uniform fixed-rank adapter pair, the control arm: x (w0 + A B).
#[derive(Clone)]
pub struct LoraPair {
    /// d_in x r, Kaiming initialized.
    pub a: Param,
    /// r x d_out, zero initialized so the initial update is zero.
    pub b: Param,
}

impl LoraPair {
    pub fn new(d_in: usize, d_out: usize, rank: usize, rng: &mut Rng) -> Self {
        let std = (2.0 / d_in as f64).sqrt();
        LoraPair {
            a: Param::new(Matrix::from_fn(d_in, rank, |_, _| rng.normal_scaled(std))),
            b: Param::new(Matrix::zeros(rank, d_out)),
        }
    }

    pub fn rank(&self) -> usize {
        self.a.value.cols()
    }
}

/// A projection site: frozen base matrix plus its adapter state.
#[derive(Clone)]
pub struct DoraLinear {
    pub layer_id: LayerId,
    /// d_in x d_out; never mutated by adapter training.
    pub w0: Param,
    pub components: Vec<LoraComponent>,
    /// Present only in the uniform-rank control arm.
    pub lora: Option<LoraPair>,
}

/// Per-step tape bindings for one site's parameters.
pub struct SiteNodes {
    pub w0: Node,
    /// (a, b, c) nodes per component, in component order.
    pub components: Vec<(Node, Node, Node)>,
    pub lora: Option<(Node, Node)>,
}

impl SiteNodes {
    /// Adapted projection: x w0 + sum_i c_i (x b_i^T) a_i^T, each rank-1
    /// update applied in factored form. Gradients reach a, b, c but never
    /// w0 unless the base itself was bound trainable.
    pub fn forward(&self, x: &Node) -> Result<Node> {
        let mut out = x.matmul(&self.w0)?;
        for (a, b, c) in &self.components {
            let xb = x.matmul(&b.transpose())?;
            let update = xb.matmul(&a.transpose())?;
            out = out.add(&update.scale_by(c)?)?;
        }
        if let Some((a, b)) = &self.lora {
            out = out.add(&x.matmul(a)?.matmul(b)?)?;
        }
        Ok(out)
    }
}

impl DoraLinear {
    pub fn new(layer_id: LayerId, w0: Matrix) -> Self {
        DoraLinear {
            layer_id,
            w0: Param::new(w0),
            components: Vec::new(),
            lora: None,
        }
    }

    pub fn d_in(&self) -> usize {
        self.w0.value.rows()
    }

    pub fn d_out(&self) -> usize {
        self.w0.value.cols()
    }

    pub fn attach_components(&mut self, count: usize, rng: &mut Rng) {
        self.components = (0..count)
            .map(|_| LoraComponent::new(self.d_in(), self.d_out(), rng))
            .collect();
        self.lora = None;
    }

    pub fn attach_lora(&mut self, rank: usize, rng: &mut Rng) {
        self.lora = Some(LoraPair::new(self.d_in(), self.d_out(), rank, rng));
        self.components.clear();
    }

    /// Creates this step's leaf nodes. `adapters_trainable` and
    /// `base_trainable` choose which leaves receive gradients.
    pub fn bind(&self, tape: &Tape, adapters_trainable: bool, base_trainable: bool) -> SiteNodes {
        SiteNodes {
            w0: tape.leaf(self.w0.value.clone(), base_trainable),
            components: self
                .components
                .iter()
                .map(|comp| {
                    (
                        tape.leaf(comp.a.value.clone(), adapters_trainable),
                        tape.leaf(comp.b.value.clone(), adapters_trainable),
                        tape.leaf(comp.c.value.clone(), adapters_trainable),
                    )
                })
                .collect(),
            lora: self.lora.as_ref().map(|pair| {
                (
                    tape.leaf(pair.a.value.clone(), adapters_trainable),
                    tape.leaf(pair.b.value.clone(), adapters_trainable),
                )
            }),
        }
    }

    /// Adapted projection through this step's bound nodes.
    pub fn forward(&self, nodes: &SiteNodes, x: &Node) -> Result<Node> {
        debug_assert_eq!(nodes.components.len(), self.components.len());
        nodes.forward(x)
    }

    /// Dense sum of all component updates (pruned ones contribute zero).
    pub fn total_delta(&self) -> Matrix {
        let mut total = Matrix::zeros(self.d_in(), self.d_out());
        for comp in &self.components {
            if comp.gate() != 0.0 {
                total.add_assign(&comp.dense_delta());
            }
        }
        total
    }

    pub fn active_count(&self) -> usize {
        self.components.iter().filter(|c| c.active).count()
    }

    pub fn eligible_count(&self) -> usize {
        self.components.iter().filter(|c| c.eligible).count()
    }
}

/// Standard uniform-rank adapter forward: x (w0 + A B).
pub fn lora_forward(w0: &Node, a: &Node, b: &Node, x: &Node) -> Result<Node> {
    let base = x.matmul(w0)?;
    base.add(&x.matmul(a)?.matmul(b)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_site(d_in: usize, d_out: usize, comps: usize, seed: u64) -> DoraLinear {
        let mut rng = Rng::from_seed(seed);
        let w0 = Matrix::from_fn(d_in, d_out, |_, _| rng.normal_scaled(0.5));
        let id = LayerId {
            layer: 0,
            kind: MatrixKind::Query,
        };
        let mut site = DoraLinear::new(id, w0);
        site.attach_components(comps, &mut rng);
        site
    }

    #[test]
    fn zero_gates_give_exact_base_output() {
        let site = test_site(4, 3, 5, 1);
        let mut rng = Rng::from_seed(9);
        let x = Matrix::from_fn(2, 4, |_, _| rng.normal());

        let tape = Tape::new();
        let nodes = site.bind(&tape, true, false);
        let xn = tape.constant(x.clone());
        let out = site.forward(&nodes, &xn).unwrap();
        let base = x.matmul(&site.w0.value).unwrap();
        assert_eq!(out.value(), base);
    }

    #[test]
    fn factored_path_matches_dense_materialization() {
        let mut site = test_site(6, 5, 4, 2);
        let mut rng = Rng::from_seed(11);
        for comp in &mut site.components {
            comp.set_gate(rng.normal());
        }
        let x = Matrix::from_fn(3, 6, |_, _| rng.normal());

        let tape = Tape::new();
        let nodes = site.bind(&tape, true, false);
        let out = site.forward(&nodes, &tape.constant(x.clone())).unwrap();

        let dense_w = site.w0.value.add(&site.total_delta()).unwrap();
        let expected = x.matmul(&dense_w).unwrap();
        let diff = out.value().sub(&expected).unwrap().max_abs();
        assert!(diff < 1e-10, "factored vs dense differ by {diff}");
    }

    #[test]
    fn delta_norm_zero_gate_and_hand_case() {
        let mut site = test_site(2, 2, 1, 3);
        assert_eq!(site.components[0].delta_norm(), 0.0);

        let comp = &mut site.components[0];
        comp.a.value = Matrix::from_rows(&[vec![3.0], vec![4.0]]);
        comp.b.value = Matrix::from_rows(&[vec![1.0, 0.0]]);
        comp.set_gate(2.0);
        assert_eq!(comp.delta_norm(), 10.0);
    }

    #[test]
    fn delta_norm_scales_with_gate_magnitude() {
        let mut site = test_site(5, 4, 1, 4);
        site.components[0].set_gate(0.7);
        let base = site.components[0].delta_norm();
        site.components[0].set_gate(-2.1); // scale by -3
        let scaled = site.components[0].delta_norm();
        assert!((scaled - 3.0 * base).abs() < 1e-12);
    }

    #[test]
    fn delta_norm_matches_dense_frobenius() {
        let mut rng = Rng::from_seed(5);
        for _ in 0..100 {
            let mut comp = LoraComponent::new(7, 5, &mut rng);
            comp.set_gate(rng.normal());
            let factored = comp.delta_norm();
            let dense = comp.dense_delta().frobenius();
            assert!((factored - dense).abs() < 1e-12, "{factored} vs {dense}");
        }
    }

    #[test]
    fn prune_zeroes_contribution_and_is_idempotent() {
        let mut site = test_site(4, 4, 2, 6);
        for comp in &mut site.components {
            comp.set_gate(1.5);
        }
        site.components[0].prune();
        site.components[0].prune();
        assert!(!site.components[0].active);
        assert_eq!(site.components[0].gate(), 0.0);
        // Factors untouched by pruning.
        assert!(site.components[0].a.value.frobenius() > 0.0);

        let x = Matrix::identity(4);
        let tape = Tape::new();
        let nodes = site.bind(&tape, true, false);
        let out = site.forward(&nodes, &tape.constant(x.clone())).unwrap();

        let mut only_second = site.clone();
        only_second.components.remove(0);
        let tape2 = Tape::new();
        let nodes2 = only_second.bind(&tape2, true, false);
        let out2 = only_second.forward(&nodes2, &tape2.constant(x)).unwrap();
        let diff = out.value().sub(&out2.value()).unwrap().max_abs();
        assert_eq!(diff, 0.0);
    }

    #[test]
    fn restore_check_reactivates_on_nonzero_gate() {
        let mut site = test_site(3, 3, 1, 7);
        site.components[0].prune();
        assert!(!site.components[0].restore_check());
        site.components[0].set_gate(1e-4);
        assert!(site.components[0].restore_check());
        assert!(site.components[0].active);
        assert!(site.components[0].eligible);
    }

    #[test]
    fn pruned_component_keeps_gate_gradient_but_not_factor_gradients() {
        let mut site = test_site(4, 4, 1, 8);
        site.components[0].prune();
        let mut rng = Rng::from_seed(12);
        let x = Matrix::from_fn(2, 4, |_, _| rng.normal());

        let tape = Tape::new();
        let nodes = site.bind(&tape, true, false);
        let out = site.forward(&nodes, &tape.constant(x)).unwrap();
        tape.backward(&out.sum()).unwrap();

        let (a, b, c) = &nodes.components[0];
        assert_eq!(a.grad().max_abs(), 0.0);
        assert_eq!(b.grad().max_abs(), 0.0);
        assert!(c.grad().max_abs() > 0.0, "gate keeps its restore channel");
        assert_eq!(nodes.w0.grad().max_abs(), 0.0, "frozen base gets no gradient");
    }

    #[test]
    fn lora_forward_zero_b_is_base() {
        let mut rng = Rng::from_seed(13);
        let w0 = Matrix::from_fn(4, 3, |_, _| rng.normal());
        let x = Matrix::from_fn(2, 4, |_, _| rng.normal());
        let a = Matrix::from_fn(4, 2, |_, _| rng.normal());
        let b = Matrix::zeros(2, 3);

        let tape = Tape::new();
        let out = lora_forward(
            &tape.constant(w0.clone()),
            &tape.constant(a),
            &tape.constant(b),
            &tape.constant(x.clone()),
        )
        .unwrap();
        assert_eq!(out.value(), x.matmul(&w0).unwrap());
    }

    #[test]
    fn lora_equals_dora_with_unit_gates_and_stacked_components() {
        // r' components with c = 1 equal one rank-r' pair built by stacking
        // the same factors: A columns are b_i^T, B rows are a_i^T.
        let mut site = test_site(5, 4, 3, 14);
        for comp in &mut site.components {
            comp.set_gate(1.0);
        }
        let r = site.components.len();
        let a_stacked = Matrix::from_fn(5, r, |row, k| site.components[k].b.value.get(0, row));
        let b_stacked = Matrix::from_fn(r, 4, |k, col| site.components[k].a.value.get(col, 0));

        let mut rng = Rng::from_seed(15);
        let x = Matrix::from_fn(3, 5, |_, _| rng.normal());

        let tape = Tape::new();
        let nodes = site.bind(&tape, true, false);
        let dora_out = site.forward(&nodes, &tape.constant(x.clone())).unwrap();

        let tape2 = Tape::new();
        let lora_out = lora_forward(
            &tape2.constant(site.w0.value.clone()),
            &tape2.constant(a_stacked),
            &tape2.constant(b_stacked),
            &tape2.constant(x),
        )
        .unwrap();

        let diff = dora_out.value().sub(&lora_out.value()).unwrap().max_abs();
        assert!(diff < 1e-10, "dora vs stacked lora differ by {diff}");
    }
}
