//! Flat `key = value` run configuration with `#` comments.
//!
//! Keys mirror [`TrainConfig`] field names one-to-one; omitted keys take
//! documented defaults, with the schedule-derived ones (t_i, t_f, b0,
//! lora_rank) recomputed from whatever the file does set. Unknown and
//! duplicated keys are errors so a config diff always means something.

use std::collections::BTreeSet;
use std::path::Path;

use crate::dora::MatrixKind;
use crate::error::{Error, Result};
use crate::schedule::ScheduleMode;
use crate::tasks::TaskKind;
use crate::train::{AdapterKind, OptimizerKind, TrainConfig};

/// Parses a config file from disk.
pub fn load(path: &Path) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path)?;
    parse(&text)
}

/// Parses config text into a validated [`TrainConfig`].
pub fn parse(text: &str) -> Result<TrainConfig> {
    let mut seen: BTreeSet<String> = BTreeSet::new();
    let mut pairs: Vec<(String, String)> = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("line {}: expected `key = value`, got `{raw}`", lineno + 1))
        })?;
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        if !seen.insert(key.clone()) {
            return Err(Error::Config(format!("duplicate key `{key}`")));
        }
        pairs.push((key, value));
    }
    build(&pairs)
}

fn build(pairs: &[(String, String)]) -> Result<TrainConfig> {
    // Steps first: several defaults derive from it.
    let steps = match pairs.iter().find(|(k, _)| k == "steps") {
        Some((_, v)) => parse_num::<usize>("steps", v)?,
        None => 2000,
    };
    let mut cfg = TrainConfig::for_steps(steps);
    let mut saw = ExplicitKeys::default();

    for (key, value) in pairs {
        apply(&mut cfg, &mut saw, key, value)?;
    }

    // Re-derive dependent defaults the file left unset.
    if !saw.t_i {
        cfg.t_i = (cfg.steps * 15).div_ceil(100);
    }
    if !saw.t_f {
        cfg.t_f = (cfg.steps * 50).div_ceil(100);
    }
    if !saw.b0 {
        cfg.b0 = 1.5 * cfg.b_final;
    }
    if !saw.lora_rank {
        cfg.lora_rank = cfg.b_final.round().max(1.0) as usize;
    }
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Default)]
struct ExplicitKeys {
    t_i: bool,
    t_f: bool,
    b0: bool,
    lora_rank: bool,
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse::<T>()
        .map_err(|_| Error::Config(format!("key `{key}`: cannot parse `{value}`")))
}

fn apply(cfg: &mut TrainConfig, saw: &mut ExplicitKeys, key: &str, value: &str) -> Result<()> {
    match key {
        "d" => cfg.d = parse_num(key, value)?,
        "heads" => cfg.heads = parse_num(key, value)?,
        "layers" => cfg.layers = parse_num(key, value)?,
        "d_ff" => cfg.d_ff = parse_num(key, value)?,
        "seq_len" => cfg.seq_len = parse_num(key, value)?,
        "input_dim" => cfg.input_dim = parse_num(key, value)?,
        "output_dim" => cfg.output_dim = parse_num(key, value)?,
        "base_seed" => cfg.base_seed = parse_num(key, value)?,
        "task" => cfg.task = TaskKind::parse(value)?,
        "train_examples" => cfg.train_examples = parse_num(key, value)?,
        "valid_examples" => cfg.valid_examples = parse_num(key, value)?,
        "teacher_default_rank" => cfg.teacher_default_rank = parse_num(key, value)?,
        "teacher_high_rank" => cfg.teacher_high_rank = parse_num(key, value)?,
        "teacher_high_layer" => cfg.teacher_high_layer = parse_num(key, value)?,
        "teacher_high_kind" => cfg.teacher_high_kind = MatrixKind::parse(value)?,
        "teacher_magnitude" => cfg.teacher_magnitude = parse_num(key, value)?,
        "label_noise" => cfg.label_noise = parse_num(key, value)?,
        "classes" => cfg.classes = parse_num(key, value)?,
        "difficulty" => cfg.difficulty = parse_num(key, value)?,
        "adapter" => cfg.adapter = AdapterKind::parse(value)?,
        "lora_rank" => {
            cfg.lora_rank = parse_num(key, value)?;
            saw.lora_rank = true;
        }
        "b0" => {
            cfg.b0 = parse_num(key, value)?;
            saw.b0 = true;
        }
        "b_final" => cfg.b_final = parse_num(key, value)?,
        "t_i" => {
            cfg.t_i = parse_num(key, value)?;
            saw.t_i = true;
        }
        "t_f" => {
            cfg.t_f = parse_num(key, value)?;
            saw.t_f = true;
        }
        "prune_interval" => cfg.prune_interval = parse_num(key, value)?,
        "schedule_mode" => cfg.schedule_mode = ScheduleMode::parse(value)?,
        "gamma" => cfg.gamma = parse_num(key, value)?,
        "eta" => cfg.eta = parse_num(key, value)?,
        "beta" => cfg.beta = parse_num(key, value)?,
        "steps" => cfg.steps = parse_num(key, value)?,
        "batch_size" => cfg.batch_size = parse_num(key, value)?,
        "seed" => cfg.seed = parse_num(key, value)?,
        "optimizer" => cfg.optimizer = OptimizerKind::parse(value)?,
        "pretrain_steps" => cfg.pretrain_steps = parse_num(key, value)?,
        other => return Err(Error::Config(format!("unknown key `{other}`"))),
    }
    Ok(())
}

/// Serializes every key in a fixed order; `parse(serialize(c))` equals `c`.
pub fn serialize(cfg: &TrainConfig) -> String {
    let mut out = String::from("# model\n");
    let kv = |out: &mut String, k: &str, v: String| {
        out.push_str(k);
        out.push_str(" = ");
        out.push_str(&v);
        out.push('\n');
    };
    kv(&mut out, "d", cfg.d.to_string());
    kv(&mut out, "heads", cfg.heads.to_string());
    kv(&mut out, "layers", cfg.layers.to_string());
    kv(&mut out, "d_ff", cfg.d_ff.to_string());
    kv(&mut out, "seq_len", cfg.seq_len.to_string());
    kv(&mut out, "input_dim", cfg.input_dim.to_string());
    kv(&mut out, "output_dim", cfg.output_dim.to_string());
    kv(&mut out, "base_seed", cfg.base_seed.to_string());
    out.push_str("\n# task\n");
    kv(&mut out, "task", cfg.task.as_str().into());
    kv(&mut out, "train_examples", cfg.train_examples.to_string());
    kv(&mut out, "valid_examples", cfg.valid_examples.to_string());
    kv(&mut out, "teacher_default_rank", cfg.teacher_default_rank.to_string());
    kv(&mut out, "teacher_high_rank", cfg.teacher_high_rank.to_string());
    kv(&mut out, "teacher_high_layer", cfg.teacher_high_layer.to_string());
    kv(&mut out, "teacher_high_kind", cfg.teacher_high_kind.as_str().into());
    kv(&mut out, "teacher_magnitude", fmt_f64(cfg.teacher_magnitude));
    kv(&mut out, "label_noise", fmt_f64(cfg.label_noise));
    kv(&mut out, "classes", cfg.classes.to_string());
    kv(&mut out, "difficulty", fmt_f64(cfg.difficulty));
    out.push_str("\n# adapter\n");
    kv(&mut out, "adapter", cfg.adapter.as_str().into());
    kv(&mut out, "lora_rank", cfg.lora_rank.to_string());
    out.push_str("\n# schedule\n");
    kv(&mut out, "b0", fmt_f64(cfg.b0));
    kv(&mut out, "b_final", fmt_f64(cfg.b_final));
    kv(&mut out, "t_i", cfg.t_i.to_string());
    kv(&mut out, "t_f", cfg.t_f.to_string());
    kv(&mut out, "prune_interval", cfg.prune_interval.to_string());
    kv(&mut out, "schedule_mode", cfg.schedule_mode.as_str().into());
    out.push_str("\n# optimization\n");
    kv(&mut out, "gamma", fmt_f64(cfg.gamma));
    kv(&mut out, "eta", fmt_f64(cfg.eta));
    kv(&mut out, "beta", fmt_f64(cfg.beta));
    kv(&mut out, "steps", cfg.steps.to_string());
    kv(&mut out, "batch_size", cfg.batch_size.to_string());
    kv(&mut out, "seed", cfg.seed.to_string());
    kv(&mut out, "optimizer", cfg.optimizer.as_str().into());
    kv(&mut out, "pretrain_steps", cfg.pretrain_steps.to_string());
    out
}

fn fmt_f64(v: f64) -> String {
    // Shortest representation that round-trips through parse().
    let s = format!("{v}");
    debug_assert_eq!(s.parse::<f64>().unwrap(), v);
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_gets_documented_defaults() {
        let cfg = parse("steps = 1000\n").unwrap();
        assert_eq!(cfg.steps, 1000);
        assert_eq!(cfg.t_i, 150);
        assert_eq!(cfg.t_f, 500);
        assert_eq!(cfg.beta, 0.9);
        assert_eq!(cfg.b0, 3.0);
        assert_eq!(cfg.b_final, 2.0);
    }

    #[test]
    fn derived_defaults_follow_explicit_values() {
        let cfg = parse("steps = 200\nb_final = 4\n").unwrap();
        assert_eq!(cfg.b0, 6.0, "b0 defaults to 1.5 x b_final");
        assert_eq!(cfg.lora_rank, 4);
        assert_eq!(cfg.t_i, 30);
        assert_eq!(cfg.t_f, 100);
    }

    #[test]
    fn comments_and_blanks_are_ignored() {
        let cfg = parse("# a comment\n\nsteps = 100 # trailing\n  beta = 0.8\n").unwrap();
        assert_eq!(cfg.steps, 100);
        assert_eq!(cfg.beta, 0.8);
    }

    #[test]
    fn unknown_key_is_an_error_naming_it() {
        let err = parse("stepz = 100\n").unwrap_err();
        assert!(err.to_string().contains("stepz"), "{err}");
    }

    #[test]
    fn duplicate_key_is_an_error() {
        let err = parse("steps = 100\nsteps = 200\n").unwrap_err();
        assert!(err.to_string().contains("duplicate"), "{err}");
    }

    #[test]
    fn invalid_beta_names_the_key() {
        let err = parse("steps = 100\nbeta = 1.2\n").unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("beta"), "{err}");
    }

    #[test]
    fn round_trip_is_semantically_identical() {
        let mut cfg = TrainConfig::for_steps(321);
        cfg.eta = 0.45;
        cfg.seed = 99;
        cfg.schedule_mode = ScheduleMode::Literal;
        cfg.adapter = AdapterKind::Lora;
        cfg.gamma = 7.5e-4;
        let text = serialize(&cfg);
        let back = parse(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn serialize_parse_serialize_is_identical_text() {
        let cfg = TrainConfig::for_steps(2000);
        let once = serialize(&cfg);
        let twice = serialize(&parse(&once).unwrap());
        assert_eq!(once, twice);
    }
}
