//! Desk-scale synthetic tasks.
//!
//! The teacher task plants low-rank perturbations of known, per-site rank
//! into a clone of the frozen base and labels random inputs with the
//! perturbed model's outputs; recovering them through adapters is the
//! whole game, and heterogeneous ranks make budget allocation observable.
//! The classification task plants a linear functional of mean token
//! features with a tunable label-noise level.

use serde::{Deserialize, Serialize};

use crate::dora::MatrixKind;
use crate::error::{Error, Result};
use crate::model::{Model, TrainScope};
use crate::numerics::{Matrix, Tape};
use crate::rng::Rng;
use crate::train::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaskKind {
    Teacher,
    Classification,
}

impl TaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Teacher => "teacher",
            TaskKind::Classification => "classification",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "teacher" => Ok(TaskKind::Teacher),
            "classification" => Ok(TaskKind::Classification),
            other => Err(Error::Config(format!(
                "task must be `teacher` or `classification`, got `{other}`"
            ))),
        }
    }
}

/// Labels of a dataset split.
#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    /// One 1 x output_dim row per example.
    Regression(Vec<Matrix>),
    Classes(Vec<usize>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Regression(rows) => rows.len(),
            Targets::Classes(labels) => labels.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One split: a list of n x input_dim sequences and their labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Vec<Matrix>,
    pub targets: Targets,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

/// Train/valid pair generated deterministically from one seed.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub train: Dataset,
    pub valid: Dataset,
}

/// A ready-to-train problem: frozen base plus data.
pub struct Task {
    pub kind: TaskKind,
    pub base: Model,
    pub data: SyntheticDataset,
    /// Disjoint split for the optional full-training warm start.
    pub pretrain: Option<Dataset>,
    /// The labeling model of a teacher task.
    pub teacher: Option<Model>,
}

/// Ground-truth update ranks per adaptation site.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherSpec {
    /// ranks[layer][kind.index()] = r* of that site.
    pub ranks: Vec<Vec<usize>>,
    /// Singular value shared by every planted direction.
    pub magnitude: f64,
    pub seed: u64,
}

impl TeacherSpec {
    pub fn uniform(layers: usize, rank: usize, magnitude: f64, seed: u64) -> Self {
        TeacherSpec {
            ranks: vec![vec![rank; MatrixKind::ALL.len()]; layers],
            magnitude,
            seed,
        }
    }

    pub fn with_site(mut self, layer: usize, kind: MatrixKind, rank: usize) -> Self {
        self.ranks[layer][kind.index()] = rank;
        self
    }

    pub fn rank_at(&self, layer: usize, kind: MatrixKind) -> usize {
        self.ranks[layer][kind.index()]
    }

    fn validate(&self, model: &Model) -> Result<()> {
        if self.ranks.len() != model.cfg.layers {
            return Err(Error::Config(format!(
                "teacher spec covers {} layers, model has {}",
                self.ranks.len(),
                model.cfg.layers
            )));
        }
        for (layer, per_kind) in self.ranks.iter().enumerate() {
            for kind in MatrixKind::ALL {
                let (d_in, d_out) = kind.dims(model.cfg.d, model.cfg.d_ff);
                let r = per_kind[kind.index()];
                if r > d_in.min(d_out) {
                    return Err(Error::Config(format!(
                        "teacher rank {r} at L{layer}.{kind} exceeds min(d_in, d_out) = {}",
                        d_in.min(d_out)
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Orthonormal columns via Gram-Schmidt on Gaussian draws.
pub fn random_orthonormal_cols(rows: usize, k: usize, rng: &mut Rng) -> Matrix {
    assert!(k <= rows, "cannot fit {k} orthonormal columns in {rows} rows");
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(k);
    while cols.len() < k {
        let mut v: Vec<f64> = (0..rows).map(|_| rng.normal()).collect();
        for existing in &cols {
            let dot: f64 = v.iter().zip(existing).map(|(a, b)| a * b).sum();
            for (vi, ei) in v.iter_mut().zip(existing) {
                *vi -= dot * ei;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-8 {
            continue; // essentially collinear draw; try again
        }
        v.iter_mut().for_each(|x| *x /= norm);
        cols.push(v);
    }
    Matrix::from_fn(rows, k, |r, c| cols[c][r])
}

/// Rank-r perturbation with equal singular values: magnitude * U V^T.
fn planted_delta(d_in: usize, d_out: usize, rank: usize, magnitude: f64, rng: &mut Rng) -> Matrix {
    if rank == 0 {
        return Matrix::zeros(d_in, d_out);
    }
    let u = random_orthonormal_cols(d_in, rank, rng);
    let v = random_orthonormal_cols(d_out, rank, rng);
    u.matmul(&v.transpose()).expect("orthonormal shapes").scale(magnitude)
}

/// Builds the perturbed teacher model from the frozen base.
pub fn make_teacher_model(base: &Model, spec: &TeacherSpec) -> Result<Model> {
    spec.validate(base)?;
    let mut rng = Rng::stream(spec.seed, 0x7EAC);
    let mut teacher = base.strip_adapters();
    for layer in 0..teacher.cfg.layers {
        for kind in MatrixKind::ALL {
            let rank = spec.rank_at(layer, kind);
            let site = teacher.site_mut(layer, kind);
            let (d_in, d_out) = (site.d_in(), site.d_out());
            let delta = planted_delta(d_in, d_out, rank, spec.magnitude, &mut rng);
            site.w0.value = site.w0.value.add(&delta)?;
        }
    }
    Ok(teacher)
}

fn random_sequences(count: usize, n: usize, dim: usize, rng: &mut Rng) -> Vec<Matrix> {
    (0..count)
        .map(|_| Matrix::from_fn(n, dim, |_, _| rng.normal()))
        .collect()
}

/// Labels inputs with a model's readout (no gradients involved).
pub fn label_with_model(model: &Model, inputs: &[Matrix], chunk: usize) -> Result<Vec<Matrix>> {
    let mut out = Vec::with_capacity(inputs.len());
    for batch in inputs.chunks(chunk.max(1)) {
        let tape = Tape::new();
        let nodes = model.bind(&tape, TrainScope::Adapters);
        let refs: Vec<&Matrix> = batch.iter().collect();
        let preds = model.forward_batch(&tape, &nodes, &refs)?.value();
        for r in 0..preds.rows() {
            out.push(Matrix::from_fn(1, preds.cols(), |_, c| preds.get(r, c)));
        }
    }
    Ok(out)
}

/// Teacher adaptation task: inputs labeled by the perturbed base, with
/// optional Gaussian label noise. Returns the dataset and the teacher.
pub fn make_teacher_task(
    base: &Model,
    spec: &TeacherSpec,
    train_examples: usize,
    valid_examples: usize,
    seq_len: usize,
    label_noise: f64,
) -> Result<(SyntheticDataset, Model)> {
    let teacher = make_teacher_model(base, spec)?;
    let mut data_rng = Rng::stream(spec.seed, 0xDA7A);
    let mut noise_rng = Rng::stream(spec.seed, 0x0153);

    let mut make_split = |count: usize| -> Result<Dataset> {
        let inputs = random_sequences(count, seq_len, base.cfg.input_dim, &mut data_rng);
        let mut targets = label_with_model(&teacher, &inputs, 32)?;
        if label_noise > 0.0 {
            for t in &mut targets {
                for v in t.data_mut() {
                    *v += noise_rng.normal_scaled(label_noise);
                }
            }
        }
        Ok(Dataset {
            inputs,
            targets: Targets::Regression(targets),
        })
    };

    let train = make_split(train_examples)?;
    let valid = make_split(valid_examples)?;
    Ok((SyntheticDataset { train, valid }, teacher))
}

/// Settings of the planted-functional classification task.
#[derive(Debug, Clone, Copy)]
pub struct ClassificationSpec {
    pub classes: usize,
    /// Label-noise scale; 0 gives perfectly separable labels.
    pub difficulty: f64,
    pub seed: u64,
}

/// Sequence classification with classes decided by a planted linear
/// functional of mean token features. Splits are class-balanced.
pub fn make_classification_task(
    spec: &ClassificationSpec,
    input_dim: usize,
    seq_len: usize,
    train_examples: usize,
    valid_examples: usize,
) -> Result<SyntheticDataset> {
    if spec.classes < 2 {
        return Err(Error::Config(format!(
            "classification needs >= 2 classes, got {}",
            spec.classes
        )));
    }
    let mut rng = Rng::stream(spec.seed, 0xC1A5);
    let planted = random_orthonormal_cols(input_dim, spec.classes.min(input_dim), &mut rng);

    let mut make_split = |count: usize| -> Dataset {
        let per_class = count / spec.classes;
        let mut inputs = Vec::with_capacity(count);
        let mut labels = Vec::with_capacity(count);
        let mut counts = vec![0usize; spec.classes];
        // Margin-filtered rejection sampling keeps classes balanced and,
        // at difficulty 0, the splits linearly separable with a margin.
        let mut guard = 0usize;
        while inputs.len() < count {
            guard += 1;
            if guard > count * 10_000 {
                break;
            }
            let x = Matrix::from_fn(seq_len, input_dim, |_, _| rng.normal());
            let pooled = Matrix::from_fn(1, input_dim, |_, c| {
                (0..seq_len).map(|r| x.get(r, c)).sum::<f64>() / seq_len as f64
            });
            let mut scores: Vec<f64> = pooled
                .matmul(&planted)
                .expect("planted shape")
                .data()
                .to_vec();
            if spec.classes > scores.len() {
                scores.resize(spec.classes, 0.0);
            }
            let (label, margin) = top_with_margin(&scores);
            if margin < 0.05 {
                continue;
            }
            let noisy_label = if spec.difficulty > 0.0 {
                let noisy: Vec<f64> = scores
                    .iter()
                    .map(|s| s + rng.normal_scaled(spec.difficulty))
                    .collect();
                top_with_margin(&noisy).0
            } else {
                label
            };
            let quota = if inputs.len() >= per_class * spec.classes {
                per_class + 1
            } else {
                per_class
            };
            if counts[noisy_label] >= quota {
                continue;
            }
            counts[noisy_label] += 1;
            inputs.push(x);
            labels.push(noisy_label);
        }
        Dataset {
            inputs,
            targets: Targets::Classes(labels),
        }
    };

    let train = make_split(train_examples);
    let valid = make_split(valid_examples);
    Ok(SyntheticDataset { train, valid })
}

fn top_with_margin(scores: &[f64]) -> (usize, f64) {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    let mut second = f64::NEG_INFINITY;
    for (i, &s) in scores.iter().enumerate() {
        if i != best && s > second {
            second = s;
        }
    }
    (best, scores[best] - second)
}

/// Evaluation metrics over one split.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub loss: f64,
    pub accuracy: Option<f64>,
}

/// Deterministic full pass over a split; loss plus accuracy for
/// classification targets.
pub fn evaluate(model: &Model, data: &Dataset, chunk: usize) -> Result<Metrics> {
    if data.is_empty() {
        return Err(Error::Contract("evaluate on an empty dataset".into()));
    }
    let chunk = chunk.max(1);
    let mut weighted_loss = 0.0;
    let mut correct = 0usize;
    let mut total = 0usize;
    let classify = matches!(data.targets, Targets::Classes(_));

    let mut offset = 0;
    while offset < data.len() {
        let end = (offset + chunk).min(data.len());
        let tape = Tape::new();
        let nodes = model.bind(&tape, TrainScope::Adapters);
        let refs: Vec<&Matrix> = data.inputs[offset..end].iter().collect();
        let preds = model.forward_batch(&tape, &nodes, &refs)?;
        match &data.targets {
            Targets::Regression(rows) => {
                let picked: Vec<&Matrix> = rows[offset..end].iter().collect();
                let stacked = Matrix::stack_rows(&picked)?;
                let loss = preds.mean_sq_error(&stacked)?.item();
                weighted_loss += loss * (end - offset) as f64;
            }
            Targets::Classes(labels) => {
                let picked: Vec<usize> = labels[offset..end].to_vec();
                let loss = preds.cross_entropy(&picked)?.item();
                weighted_loss += loss * (end - offset) as f64;
                let values = preds.value();
                for (r, &label) in picked.iter().enumerate() {
                    let row = values.row(r);
                    let mut best = 0;
                    for (c, &v) in row.iter().enumerate() {
                        if v > row[best] {
                            best = c;
                        }
                    }
                    if best == label {
                        correct += 1;
                    }
                }
            }
        }
        total += end - offset;
        offset = end;
    }
    Ok(Metrics {
        loss: weighted_loss / total as f64,
        accuracy: classify.then(|| correct as f64 / total as f64),
    })
}

/// Assembles the task described by a train config.
pub fn build_task(cfg: &TrainConfig) -> Result<Task> {
    cfg.validate()?;
    let base = Model::new(cfg.model_config(), cfg.base_seed)?;
    match cfg.task {
        TaskKind::Teacher => {
            let spec = TeacherSpec::uniform(
                cfg.layers,
                cfg.teacher_default_rank,
                cfg.teacher_magnitude,
                cfg.seed,
            )
            .with_site(cfg.teacher_high_layer, cfg.teacher_high_kind, cfg.teacher_high_rank);
            let (data, teacher) = make_teacher_task(
                &base,
                &spec,
                cfg.train_examples,
                cfg.valid_examples,
                cfg.seq_len,
                cfg.label_noise,
            )?;
            Ok(Task {
                kind: TaskKind::Teacher,
                base,
                data,
                pretrain: None,
                teacher: Some(teacher),
            })
        }
        TaskKind::Classification => {
            let spec = ClassificationSpec {
                classes: cfg.classes,
                difficulty: cfg.difficulty,
                seed: cfg.seed,
            };
            let data = make_classification_task(
                &spec,
                cfg.input_dim,
                cfg.seq_len,
                cfg.train_examples,
                cfg.valid_examples,
            )?;
            let pretrain = if cfg.pretrain_steps > 0 {
                let pre_spec = ClassificationSpec {
                    seed: cfg.seed ^ 0x9E3779B97F4A7C15,
                    ..spec
                };
                Some(
                    make_classification_task(
                        &pre_spec,
                        cfg.input_dim,
                        cfg.seq_len,
                        cfg.train_examples,
                        1,
                    )?
                    .train,
                )
            } else {
                None
            };
            Ok(Task {
                kind: TaskKind::Classification,
                base,
                data,
                pretrain,
                teacher: None,
            })
        }
    }
}
