//! Toy transformer encoder whose six projection matrices per layer are
//! adaptation sites.
//!
//! Architecture: residual blocks of multi-head attention and a ReLU FFN,
//! no normalization layers, a frozen random input projection, and a
//! trainable mean-pool readout head. Base weights are Kaiming-initialized
//! from `base_seed` and reconstructible from it, which is what lets
//! checkpoints store digests instead of full base tensors.

use crate::dora::{DoraLinear, LayerId, MatrixKind, SiteNodes};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Node, Tape};
use crate::params::Param;
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TransformerConfig {
    /// Hidden dimension.
    pub d: usize,
    /// Attention head count; must divide `d`.
    pub heads: usize,
    /// Encoder block count.
    pub layers: usize,
    /// FFN inner dimension.
    pub d_ff: usize,
    /// Maximum sequence length accepted by forward.
    pub n_max: usize,
    /// Raw input feature dimension.
    pub input_dim: usize,
    /// Readout width: regression dimension or class count.
    pub output_dim: usize,
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("d", self.d),
            ("heads", self.heads),
            ("layers", self.layers),
            ("d_ff", self.d_ff),
            ("n_max", self.n_max),
            ("input_dim", self.input_dim),
            ("output_dim", self.output_dim),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if self.d % self.heads != 0 {
            return Err(Error::Config(format!(
                "heads ({}) must divide d ({})",
                self.heads, self.d
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }
}

/// One encoder block: six adapted projections plus frozen FFN biases.
#[derive(Clone)]
pub struct TransformerBlock {
    /// Indexed by `MatrixKind` order: query, key, value, output, ffn1, ffn2.
    pub sites: Vec<DoraLinear>,
    pub b1: Param,
    pub b2: Param,
}

impl TransformerBlock {
    pub fn site(&self, kind: MatrixKind) -> &DoraLinear {
        &self.sites[kind.index()]
    }

    pub fn site_mut(&mut self, kind: MatrixKind) -> &mut DoraLinear {
        &mut self.sites[kind.index()]
    }
}

#[derive(Clone)]
pub struct Model {
    pub cfg: TransformerConfig,
    pub base_seed: u64,
    /// Frozen random projection from raw features to the hidden space.
    pub embed: Param,
    pub blocks: Vec<TransformerBlock>,
    pub head_w: Param,
    pub head_b: Param,
}

/// Which parameters train this run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainScope {
    /// Adapter factors, gates, and the readout head; base frozen.
    Adapters,
    /// Base projections, FFN biases, and the head; used for the full
    /// fine-tuning oracle and the optional pretraining phase.
    FullBase,
}

pub struct BlockNodes {
    pub sites: Vec<SiteNodes>,
    pub b1: Node,
    pub b2: Node,
}

/// Tape bindings for every model parameter, one per training step.
pub struct ModelNodes {
    pub embed: Node,
    pub blocks: Vec<BlockNodes>,
    pub head_w: Node,
    pub head_b: Node,
    pub scope: TrainScope,
}

/// Row spans of the per-sequence segments inside a stacked input.
#[derive(Debug, Clone, Copy)]
pub struct Span {
    pub start: usize,
    pub len: usize,
}

impl Model {
    /// Builds the frozen base: Kaiming weights drawn deterministically
    /// from `base_seed`, zero biases, no adapters attached.
    pub fn new(cfg: TransformerConfig, base_seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Rng::stream(base_seed, 0xBA5E);
        let embed_std = (2.0 / cfg.input_dim as f64).sqrt();
        let embed = Matrix::from_fn(cfg.input_dim, cfg.d, |_, _| rng.normal_scaled(embed_std));

        let mut blocks = Vec::with_capacity(cfg.layers);
        for layer in 0..cfg.layers {
            let sites = MatrixKind::ALL
                .into_iter()
                .map(|kind| {
                    let (d_in, d_out) = kind.dims(cfg.d, cfg.d_ff);
                    let std = (2.0 / d_in as f64).sqrt();
                    let w0 = Matrix::from_fn(d_in, d_out, |_, _| rng.normal_scaled(std));
                    DoraLinear::new(LayerId { layer, kind }, w0)
                })
                .collect();
            blocks.push(TransformerBlock {
                sites,
                b1: Param::new(Matrix::zeros(1, cfg.d_ff)),
                b2: Param::new(Matrix::zeros(1, cfg.d)),
            });
        }

        let head_std = (2.0 / cfg.d as f64).sqrt();
        let head_w = Matrix::from_fn(cfg.d, cfg.output_dim, |_, _| rng.normal_scaled(head_std));
        Ok(Model {
            cfg,
            base_seed,
            embed: Param::new(embed),
            blocks,
            head_w: Param::new(head_w),
            head_b: Param::new(Matrix::zeros(1, cfg.output_dim)),
        })
    }

    /// Attaches `r_prime` fresh components to every site.
    pub fn attach_dora(&mut self, r_prime: usize, seed: u64) {
        let mut rng = Rng::stream(seed, 0xADA9);
        for block in &mut self.blocks {
            for site in &mut block.sites {
                site.attach_components(r_prime, &mut rng);
            }
        }
    }

    /// Attaches a uniform fixed-rank pair to every site (control arm).
    pub fn attach_lora(&mut self, rank: usize, seed: u64) {
        let mut rng = Rng::stream(seed, 0xADA9);
        for block in &mut self.blocks {
            for site in &mut block.sites {
                site.attach_lora(rank, &mut rng);
            }
        }
    }

    /// A copy with every adapter removed; forwards are pure base.
    pub fn strip_adapters(&self) -> Model {
        let mut clone = self.clone();
        for block in &mut clone.blocks {
            for site in &mut block.sites {
                site.components.clear();
                site.lora = None;
            }
        }
        clone
    }

    pub fn num_sites(&self) -> usize {
        self.cfg.layers * MatrixKind::ALL.len()
    }

    pub fn dora_sites(&self) -> Vec<&DoraLinear> {
        self.blocks
            .iter()
            .flat_map(|b| b.sites.iter())
            .collect()
    }

    pub fn dora_sites_mut(&mut self) -> Vec<&mut DoraLinear> {
        self.blocks
            .iter_mut()
            .flat_map(|b| b.sites.iter_mut())
            .collect()
    }

    pub fn site(&self, layer: usize, kind: MatrixKind) -> &DoraLinear {
        self.blocks[layer].site(kind)
    }

    pub fn site_mut(&mut self, layer: usize, kind: MatrixKind) -> &mut DoraLinear {
        self.blocks[layer].site_mut(kind)
    }

    pub fn total_components(&self) -> usize {
        self.dora_sites().iter().map(|s| s.components.len()).sum()
    }

    pub fn active_components(&self) -> usize {
        self.dora_sites().iter().map(|s| s.active_count()).sum()
    }

    /// Creates this step's leaf nodes under the given scope.
    pub fn bind(&self, tape: &Tape, scope: TrainScope) -> ModelNodes {
        let adapters = scope == TrainScope::Adapters;
        let base = scope == TrainScope::FullBase;
        ModelNodes {
            embed: tape.constant(self.embed.value.clone()),
            blocks: self
                .blocks
                .iter()
                .map(|block| BlockNodes {
                    sites: block
                        .sites
                        .iter()
                        .map(|site| site.bind(tape, adapters, base))
                        .collect(),
                    b1: tape.leaf(block.b1.value.clone(), base),
                    b2: tape.leaf(block.b2.value.clone(), base),
                })
                .collect(),
            head_w: tape.leaf(self.head_w.value.clone(), true),
            head_b: tape.leaf(self.head_b.value.clone(), true),
            scope,
        }
    }

    /// The (a, b) factor nodes of every component, for the regularizer.
    pub fn component_factors(nodes: &ModelNodes) -> Vec<(Node, Node)> {
        nodes
            .blocks
            .iter()
            .flat_map(|b| b.sites.iter())
            .flat_map(|s| s.components.iter())
            .map(|(a, b, _)| (a.clone(), b.clone()))
            .collect()
    }

    /// Multi-head attention over one already-embedded sequence (n x d).
    pub fn mha(&self, bnodes: &BlockNodes, x: &Node) -> Result<Node> {
        let span = Span {
            start: 0,
            len: x.shape().0,
        };
        self.mha_spans(bnodes, x, &[span])
    }

    /// Attention over stacked sequences; each span attends only within itself.
    fn mha_spans(&self, bnodes: &BlockNodes, x: &Node, spans: &[Span]) -> Result<Node> {
        let dh = self.cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let q = bnodes.sites[MatrixKind::Query.index()].forward(x)?;
        let k = bnodes.sites[MatrixKind::Key.index()].forward(x)?;
        let v = bnodes.sites[MatrixKind::Value.index()].forward(x)?;

        let mut per_seq = Vec::with_capacity(spans.len());
        for span in spans {
            let mut heads = Vec::with_capacity(self.cfg.heads);
            for h in 0..self.cfg.heads {
                let qs = q.slice_rows(span.start, span.len)?.slice_cols(h * dh, dh)?;
                let ks = k.slice_rows(span.start, span.len)?.slice_cols(h * dh, dh)?;
                let vs = v.slice_rows(span.start, span.len)?.slice_cols(h * dh, dh)?;
                let scores = qs.matmul(&ks.transpose())?.scale(scale).softmax_rows();
                heads.push(scores.matmul(&vs)?);
            }
            per_seq.push(x.tape().concat_cols(&heads)?);
        }
        let concat = x.tape().concat_rows(&per_seq)?;
        bnodes.sites[MatrixKind::Output.index()].forward(&concat)
    }

    /// Position-wise feed-forward: relu(x wf1 + b1) wf2 + b2.
    pub fn ffn(&self, bnodes: &BlockNodes, x: &Node) -> Result<Node> {
        let inner = bnodes.sites[MatrixKind::Ffn1.index()]
            .forward(x)?
            .add_row(&bnodes.b1)?
            .relu();
        bnodes.sites[MatrixKind::Ffn2.index()]
            .forward(&inner)?
            .add_row(&bnodes.b2)
    }

    /// Runs all blocks over stacked embedded sequences; returns final
    /// hidden states with the same stacked shape.
    pub fn encoder_forward(
        &self,
        nodes: &ModelNodes,
        embedded: &Node,
        spans: &[Span],
    ) -> Result<Node> {
        let mut x = embedded.clone();
        for bnodes in &nodes.blocks {
            let attn = self.mha_spans(bnodes, &x, spans)?;
            x = x.add(&attn)?;
            let ffn = self.ffn(bnodes, &x)?;
            x = x.add(&ffn)?;
        }
        Ok(x)
    }

    /// Mean-pools each span and applies the trainable task head.
    pub fn head_readout(&self, nodes: &ModelNodes, hidden: &Node, spans: &[Span]) -> Result<Node> {
        let mut pooled = Vec::with_capacity(spans.len());
        for span in spans {
            pooled.push(hidden.slice_rows(span.start, span.len)?.mean_rows());
        }
        let stacked = hidden.tape().concat_rows(&pooled)?;
        stacked.matmul(&nodes.head_w)?.add_row(&nodes.head_b)
    }

    /// Full forward over a batch of raw-feature sequences; returns one
    /// readout row per sequence.
    pub fn forward_batch(
        &self,
        tape: &Tape,
        nodes: &ModelNodes,
        inputs: &[&Matrix],
    ) -> Result<Node> {
        if inputs.is_empty() {
            return Err(Error::Contract("forward_batch on an empty batch".into()));
        }
        let mut spans = Vec::with_capacity(inputs.len());
        let mut offset = 0;
        for m in inputs {
            if m.cols() != self.cfg.input_dim {
                return Err(Error::dimension(
                    "forward_batch",
                    (m.rows(), m.cols()),
                    (m.rows(), self.cfg.input_dim),
                ));
            }
            if m.rows() > self.cfg.n_max {
                return Err(Error::Contract(format!(
                    "sequence length {} exceeds n_max {}",
                    m.rows(),
                    self.cfg.n_max
                )));
            }
            spans.push(Span {
                start: offset,
                len: m.rows(),
            });
            offset += m.rows();
        }
        let stacked = Matrix::stack_rows(inputs)?;
        let x = tape.constant(stacked);
        let embedded = x.matmul(&nodes.embed)?;
        let hidden = self.encoder_forward(nodes, &embedded, &spans)?;
        self.head_readout(nodes, &hidden, &spans)
    }

    /// Folds this step's tape gradients into every parameter accumulator.
    pub fn absorb_grads(&mut self, nodes: &ModelNodes) {
        for (block, bnodes) in self.blocks.iter_mut().zip(&nodes.blocks) {
            for (site, snodes) in block.sites.iter_mut().zip(&bnodes.sites) {
                site.w0.grad.add_assign(&snodes.w0.grad());
                for (comp, (a, b, c)) in site.components.iter_mut().zip(&snodes.components) {
                    comp.a.grad.add_assign(&a.grad());
                    comp.b.grad.add_assign(&b.grad());
                    comp.c.grad.add_assign(&c.grad());
                }
                if let (Some(pair), Some((a, b))) = (&mut site.lora, &snodes.lora) {
                    pair.a.grad.add_assign(&a.grad());
                    pair.b.grad.add_assign(&b.grad());
                }
            }
            block.b1.grad.add_assign(&bnodes.b1.grad());
            block.b2.grad.add_assign(&bnodes.b2.grad());
        }
        self.head_w.grad.add_assign(&nodes.head_w.grad());
        self.head_b.grad.add_assign(&nodes.head_b.grad());
    }

    pub fn zero_grads(&mut self) {
        for block in &mut self.blocks {
            for site in &mut block.sites {
                site.w0.zero_grad();
                for comp in &mut site.components {
                    comp.a.zero_grad();
                    comp.b.zero_grad();
                    comp.c.zero_grad();
                }
                if let Some(pair) = &mut site.lora {
                    pair.a.zero_grad();
                    pair.b.zero_grad();
                }
            }
            block.b1.zero_grad();
            block.b2.zero_grad();
        }
        self.head_w.zero_grad();
        self.head_b.zero_grad();
        self.embed.zero_grad();
    }
}

