//! Flat `key = value` run configuration with `[section]` headers.
//!
//! ```text
//! [run]
//! seed = 3
//! router_mode = learned
//!
//! [train]
//! lr_generator = 0.1
//! ```
//!
//! Blank lines and lines starting with `#` or `;` are ignored. Keys not set
//! keep their defaults. [`to_text`] writes every key, and parsing its output
//! gives back the same config.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::trainer::RunConfig;

fn parse<T: FromStr>(section: &str, key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("[{section}] {key}: cannot parse `{value}`")))
}

fn parse_bool(section: &str, key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(Error::Config(format!("[{section}] {key}: expected a boolean, got `{value}`"))),
    }
}

fn set(cfg: &mut RunConfig, section: &str, key: &str, v: &str) -> Result<()> {
    let s = section;
    match (section, key) {
        ("run", "seed") => cfg.seed = parse(s, key, v)?,
        ("run", "router_mode") => cfg.router_mode = v.parse()?,
        ("run", "nullspace") => cfg.nullspace = parse_bool(s, key, v)?,
        ("stream", "n_tasks") => cfg.stream.n_tasks = parse(s, key, v)?,
        ("stream", "samples_per_task") => cfg.stream.samples_per_task = parse(s, key, v)?,
        ("stream", "visual_tokens") => cfg.stream.visual_tokens = parse(s, key, v)?,
        ("stream", "visual_dim") => cfg.stream.visual_dim = parse(s, key, v)?,
        ("stream", "max_len") => cfg.stream.max_len = parse(s, key, v)?,
        ("stream", "vocab") => cfg.stream.vocab = parse(s, key, v)?,
        ("stream", "subspace_dim") => cfg.stream.subspace_dim = parse(s, key, v)?,
        ("stream", "separation") => cfg.stream.separation = parse(s, key, v)?,
        ("stream", "answer_len") => cfg.stream.answer_len = parse(s, key, v)?,
        ("stream", "answer_classes") => cfg.stream.answer_classes = parse(s, key, v)?,
        ("stream", "intents") => cfg.stream.intents = parse(s, key, v)?,
        ("backbone", "vision_dim") => cfg.vision_dim = parse(s, key, v)?,
        ("backbone", "heads") => cfg.decoder_heads = parse(s, key, v)?,
        ("generator", "width") => cfg.generator.width = parse(s, key, v)?,
        ("generator", "hidden") => cfg.generator.hidden = parse(s, key, v)?,
        ("generator", "heads") => cfg.generator.heads = parse(s, key, v)?,
        ("generator", "prompt_len") => cfg.generator.prompt_len = parse(s, key, v)?,
        ("generator", "dropout") => cfg.generator.dropout = parse(s, key, v)?,
        ("generator", "mode") => cfg.generator.mode = v.parse()?,
        ("generator", "cross_attention") => cfg.generator.cross_attention = parse_bool(s, key, v)?,
        ("generator", "ln_eps") => cfg.generator.ln_eps = parse(s, key, v)?,
        ("projector", "hidden") => cfg.projector_hidden = parse(s, key, v)?,
        ("projector", "eps") => cfg.eps = parse(s, key, v)?,
        ("router", "dim") => cfg.router_dim = parse(s, key, v)?,
        ("router", "tau") => cfg.refine.tau = parse(s, key, v)?,
        ("router", "lr") => cfg.refine.lr = parse(s, key, v)?,
        ("router", "steps") => cfg.refine.steps = parse(s, key, v)?,
        ("train", "lr_generator") => cfg.lr_generator = parse(s, key, v)?,
        ("train", "lr_projector") => cfg.lr_projector = parse(s, key, v)?,
        ("train", "epochs") => cfg.epochs = parse(s, key, v)?,
        ("train", "batch_size") => cfg.batch_size = parse(s, key, v)?,
        ("train", "warmup_ratio") => cfg.warmup_ratio = parse(s, key, v)?,
        _ => return Err(Error::Config(format!("unknown key `{key}` in section [{section}]"))),
    }
    Ok(())
}

/// Applies the settings in `text` on top of `base`.
pub fn parse_onto(base: RunConfig, text: &str) -> Result<RunConfig> {
    let mut cfg = base;
    let mut section = String::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
            continue;
        }
        if let Some(name) = line.strip_prefix('[') {
            let name = name
                .strip_suffix(']')
                .ok_or_else(|| Error::Config(format!("line {}: unterminated section header", n + 1)))?;
            section = name.trim().to_string();
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
        if section.is_empty() {
            return Err(Error::Config(format!("line {}: key outside any section", n + 1)));
        }
        set(&mut cfg, &section, key.trim(), value.trim())?;
    }
    Ok(cfg)
}

pub fn parse_config(text: &str) -> Result<RunConfig> {
    parse_onto(RunConfig::default(), text)
}

pub fn load_config(path: &std::path::Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    parse_config(&text)
}

/// Every setting, in the same format [`parse_config`] reads.
pub fn to_text(cfg: &RunConfig) -> String {
    let mut out = String::new();
    let mut section = |name: &str, items: &[(&str, String)]| {
        writeln!(out, "[{name}]").unwrap();
        for (k, v) in items {
            writeln!(out, "{k} = {v}").unwrap();
        }
        out.push('\n');
    };
    let s = &cfg.stream;
    let g = &cfg.generator;
    section(
        "run",
        &[
            ("seed", cfg.seed.to_string()),
            ("router_mode", cfg.router_mode.to_string()),
            ("nullspace", cfg.nullspace.to_string()),
        ],
    );
    section(
        "stream",
        &[
            ("n_tasks", s.n_tasks.to_string()),
            ("samples_per_task", s.samples_per_task.to_string()),
            ("visual_tokens", s.visual_tokens.to_string()),
            ("visual_dim", s.visual_dim.to_string()),
            ("max_len", s.max_len.to_string()),
            ("vocab", s.vocab.to_string()),
            ("subspace_dim", s.subspace_dim.to_string()),
            ("separation", s.separation.to_string()),
            ("answer_len", s.answer_len.to_string()),
            ("answer_classes", s.answer_classes.to_string()),
            ("intents", s.intents.to_string()),
        ],
    );
    section("backbone", &[("vision_dim", cfg.vision_dim.to_string()), ("heads", cfg.decoder_heads.to_string())]);
    section(
        "generator",
        &[
            ("width", g.width.to_string()),
            ("hidden", g.hidden.to_string()),
            ("heads", g.heads.to_string()),
            ("prompt_len", g.prompt_len.to_string()),
            ("dropout", g.dropout.to_string()),
            ("mode", g.mode.to_string()),
            ("cross_attention", g.cross_attention.to_string()),
            ("ln_eps", g.ln_eps.to_string()),
        ],
    );
    section("projector", &[("hidden", cfg.projector_hidden.to_string()), ("eps", cfg.eps.to_string())]);
    section(
        "router",
        &[
            ("dim", cfg.router_dim.to_string()),
            ("tau", cfg.refine.tau.to_string()),
            ("lr", cfg.refine.lr.to_string()),
            ("steps", cfg.refine.steps.to_string()),
        ],
    );
    section(
        "train",
        &[
            ("lr_generator", cfg.lr_generator.to_string()),
            ("lr_projector", cfg.lr_projector.to_string()),
            ("epochs", cfg.epochs.to_string()),
            ("batch_size", cfg.batch_size.to_string()),
            ("warmup_ratio", cfg.warmup_ratio.to_string()),
        ],
    );
    out.truncate(out.trim_end().len());
    out.push('\n');
    out
}
