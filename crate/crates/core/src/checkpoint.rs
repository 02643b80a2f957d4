//! On-disk container: a plain-text `manifest.txt` listing every named array by
//! shape and byte range, a raw little-endian `f64` blob `arrays.bin`, and
//! `manifest.sha256` holding the manifest's digest. The blob digest is
//! recorded inside the manifest. Writing is deterministic, so
//! save → load → save reproduces identical bytes.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::backbone::Backbone;
use crate::config::{parse_config, to_text};
use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::linalg::{Mat, Vector};
use crate::nullspace::{MomentStats, ProjectionMatrix};
use crate::optim::ParamSet;
use crate::projector::{Projector, LAYERS};
use crate::router::{Router, RouterEncoders, TaskPrototype};
use crate::stream::{Sample, StreamConfig, Task, TaskRule, TaskStream};
use crate::trainer::ContinualState;

pub const FORMAT: &str = "xprompt-checkpoint";
pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.txt";
pub const MANIFEST_DIGEST: &str = "manifest.sha256";
pub const BLOB: &str = "arrays.bin";

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Container {
    pub kind: String,
    pub meta: Vec<(String, String)>,
    pub arrays: Vec<(String, Mat)>,
    /// Free text stored verbatim (the run config echo).
    pub config: Option<String>,
}

impl Container {
    pub fn new(kind: &str) -> Self {
        Self { kind: kind.into(), ..Default::default() }
    }

    pub fn put(&mut self, name: impl Into<String>, value: Mat) {
        self.arrays.push((name.into(), value));
    }

    pub fn put_meta(&mut self, key: &str, value: impl ToString) {
        self.meta.push((key.into(), value.to_string()));
    }

    pub fn array(&self, name: &str) -> Result<&Mat> {
        self.arrays
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, m)| m)
            .ok_or_else(|| Error::Checkpoint(format!("missing array `{name}`")))
    }

    /// Arrays whose names start with `prefix`, in stored order.
    pub fn arrays_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a str, &'a Mat)> + 'a {
        self.arrays
            .iter()
            .filter(move |(n, _)| n.starts_with(prefix))
            .map(|(n, m)| (n.as_str(), m))
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::Checkpoint(format!("missing metadata `{key}`")))
    }

    pub fn meta_parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self.meta(key)?;
        v.parse().map_err(|_| Error::Checkpoint(format!("metadata `{key}` = `{v}` does not parse")))
    }

    /// Manifest text and blob bytes.
    pub fn encode(&self) -> Result<(String, Vec<u8>)> {
        let mut blob = Vec::new();
        let mut lines = String::new();
        for (name, m) in &self.arrays {
            check_token(name)?;
            let offset = blob.len();
            for i in 0..m.nrows() {
                for j in 0..m.ncols() {
                    blob.extend_from_slice(&m[(i, j)].to_le_bytes());
                }
            }
            writeln!(lines, "array {name} {} {} {offset} {}", m.nrows(), m.ncols(), blob.len() - offset).unwrap();
        }
        let mut manifest = String::new();
        writeln!(manifest, "format {FORMAT}").unwrap();
        writeln!(manifest, "format_version {FORMAT_VERSION}").unwrap();
        writeln!(manifest, "crate_version {}", env!("CARGO_PKG_VERSION")).unwrap();
        writeln!(manifest, "kind {}", self.kind).unwrap();
        for (k, v) in &self.meta {
            check_token(k)?;
            if v.contains('\n') {
                return Err(Error::Checkpoint(format!("metadata `{k}` spans lines")));
            }
            writeln!(manifest, "meta {k} {v}").unwrap();
        }
        manifest.push_str(&lines);
        writeln!(manifest, "blob {BLOB} {} {}", blob.len(), hex_digest(&blob)).unwrap();
        if let Some(cfg) = &self.config {
            manifest.push_str("config-begin\n");
            manifest.push_str(cfg);
            if !cfg.ends_with('\n') {
                manifest.push('\n');
            }
            manifest.push_str("config-end\n");
        }
        Ok((manifest, blob))
    }

    pub fn decode(manifest: &str, blob: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::Checkpoint(m);
        let mut c = Container::default();
        let mut lines = manifest.lines();
        let mut blob_checked = false;
        while let Some(line) = lines.next() {
            if line == "config-begin" {
                let mut text = String::new();
                loop {
                    match lines.next() {
                        Some("config-end") => break,
                        Some(l) => {
                            text.push_str(l);
                            text.push('\n');
                        }
                        None => return Err(bad("unterminated config block".into())),
                    }
                }
                c.config = Some(text);
                continue;
            }
            let (tag, rest) = line.split_once(' ').ok_or_else(|| bad(format!("bad manifest line `{line}`")))?;
            match tag {
                "format" if rest == FORMAT => {}
                "format" => return Err(bad(format!("unknown format `{rest}`"))),
                "format_version" => {
                    if rest.parse::<u32>().ok() != Some(FORMAT_VERSION) {
                        return Err(bad(format!("unsupported format version `{rest}`")));
                    }
                }
                "crate_version" => {}
                "kind" => c.kind = rest.to_string(),
                "meta" => {
                    let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                    c.meta.push((k.to_string(), v.to_string()));
                }
                "array" => {
                    let f: Vec<&str> = rest.split(' ').collect();
                    if f.len() != 5 {
                        return Err(bad(format!("bad array line `{line}`")));
                    }
                    let num = |s: &str| s.parse::<usize>().map_err(|_| bad(format!("bad number `{s}` in `{line}`")));
                    let (rows, cols, off, len) = (num(f[1])?, num(f[2])?, num(f[3])?, num(f[4])?);
                    if len != rows * cols * 8 || off + len > blob.len() {
                        return Err(bad(format!("array `{}` has an inconsistent byte range", f[0])));
                    }
                    let data: Vec<f64> = blob[off..off + len]
                        .chunks_exact(8)
                        .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                        .collect();
                    c.arrays.push((f[0].to_string(), Mat::from_row_slice(rows, cols, &data)));
                }
                "blob" => {
                    let f: Vec<&str> = rest.split(' ').collect();
                    if f.len() != 3 || f[1].parse::<usize>().ok() != Some(blob.len()) {
                        return Err(bad("blob length does not match the manifest".into()));
                    }
                    if f[2] != hex_digest(blob) {
                        return Err(bad("blob digest mismatch".into()));
                    }
                    blob_checked = true;
                }
                other => return Err(bad(format!("unknown manifest entry `{other}`"))),
            }
        }
        if !blob_checked {
            return Err(bad("manifest has no blob entry".into()));
        }
        Ok(c)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let (manifest, blob) = self.encode()?;
        fs::create_dir_all(dir)?;
        fs::write(dir.join(BLOB), &blob)?;
        fs::write(dir.join(MANIFEST), &manifest)?;
        fs::write(dir.join(MANIFEST_DIGEST), format!("{}  {MANIFEST}\n", hex_digest(manifest.as_bytes())))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = fs::read_to_string(dir.join(MANIFEST))?;
        let recorded = fs::read_to_string(dir.join(MANIFEST_DIGEST))?;
        if recorded.split_whitespace().next() != Some(hex_digest(manifest.as_bytes()).as_str()) {
            return Err(Error::Checkpoint("manifest digest mismatch".into()));
        }
        let blob = fs::read(dir.join(BLOB))?;
        Self::decode(&manifest, &blob)
    }
}

fn check_token(s: &str) -> Result<()> {
    if s.is_empty() || s.chars().any(char::is_whitespace) {
        return Err(Error::Checkpoint(format!("name `{s}` must be non-empty without whitespace")));
    }
    Ok(())
}

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::with_capacity(64), |mut s, b| {
        write!(s, "{b:02x}").unwrap();
        s
    })
}

fn row(v: &[f64]) -> Mat {
    Mat::from_row_slice(1, v.len(), v)
}

fn ids(v: &[usize]) -> Mat {
    Mat::from_row_slice(1, v.len(), &v.iter().map(|&x| x as f64).collect::<Vec<_>>())
}

fn to_ids<'a>(values: impl IntoIterator<Item = &'a f64>) -> Result<Vec<usize>> {
    values
        .into_iter()
        .map(|&x| {
            if x >= 0.0 && x.fract() == 0.0 {
                Ok(x as usize)
            } else {
                Err(Error::Checkpoint(format!("`{x}` is not a token id")))
            }
        })
        .collect()
}

fn put_params(c: &mut Container, ps: &ParamSet) {
    for (name, m) in ps.iter() {
        c.put(ps.full_name(name), m.clone());
    }
}

fn take_params(c: &Container, prefix: &str) -> Result<ParamSet> {
    let mut ps = ParamSet::new(prefix);
    for (name, m) in c.arrays_with_prefix(prefix) {
        ps.insert(&name[prefix.len()..], m.clone())?;
    }
    if ps.is_empty() {
        return Err(Error::Checkpoint(format!("no arrays under `{prefix}`")));
    }
    Ok(ps)
}

/// Everything needed to resume or serve a trained state.
pub fn state_to_container(state: &ContinualState) -> Container {
    let mut c = Container::new("state");
    c.config = Some(to_text(&state.cfg));
    c.put_meta("seed", state.cfg.seed);
    c.put_meta("tasks_done", state.tasks_done());
    for (l, layer) in LAYERS.iter().enumerate() {
        c.put_meta(&format!("moment_count.{layer}"), state.moments[l].count);
        let p = &state.projections[l];
        c.put_meta(&format!("projection.{layer}.rank"), p.rank);
        c.put_meta(&format!("projection.{layer}.raw_rank"), p.raw_rank);
        c.put_meta(&format!("projection.{layer}.degenerate"), p.degenerate);
    }
    let b = &state.backbone;
    c.put("frozen.phi", b.phi().clone());
    c.put("frozen.token_embedding", b.token_embedding().clone());
    c.put("frozen.position_embedding", b.position_embedding().clone());
    put_params(&mut c, b.decoder_params());
    put_params(&mut c, state.projector.params());
    for g in &state.generators {
        put_params(&mut c, g.params());
    }
    for (l, layer) in LAYERS.iter().enumerate() {
        c.put(format!("moment.{layer}"), state.moments[l].moment.clone());
        let p = &state.projections[l];
        c.put(format!("projection.{layer}.pi"), p.pi.clone());
        c.put(format!("projection.{layer}.v_par"), p.v_par.clone());
        c.put(format!("projection.{layer}.v_perp"), p.v_perp.clone());
        c.put(format!("projection.{layer}.spectrum"), row(&p.spectrum));
    }
    c.put("router.text_table", state.router.encoders.text_table.clone());
    c.put("router.image_map", state.router.encoders.image_map.clone());
    for p in state.router.prototypes() {
        c.put(format!("router.prototype.{}", p.task), row(p.center.as_slice()));
    }
    c
}

pub fn state_from_container(c: &Container) -> Result<ContinualState> {
    if c.kind != "state" {
        return Err(Error::Checkpoint(format!("expected a state checkpoint, found `{}`", c.kind)));
    }
    let cfg = parse_config(c.config.as_deref().ok_or_else(|| Error::Checkpoint("missing config echo".into()))?)?;
    let tasks: usize = c.meta_parse("tasks_done")?;
    let backbone = Backbone::from_parts(
        cfg.backbone_config(),
        c.array("frozen.phi")?.clone(),
        c.array("frozen.token_embedding")?.clone(),
        c.array("frozen.position_embedding")?.clone(),
        take_params(c, "backbone.")?,
    )?;
    let projector = Projector::from_params(take_params(c, "projector.")?)?;
    let generators = (0..tasks)
        .map(|t| {
            let mut g = Generator::from_params(cfg.generator.clone(), take_params(c, &format!("gen{t}."))?)?;
            g.freeze();
            Ok(g)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut moments = vec![];
    let mut projections = vec![];
    for layer in LAYERS {
        moments.push(MomentStats {
            moment: c.array(&format!("moment.{layer}"))?.clone(),
            count: c.meta_parse(&format!("moment_count.{layer}"))?,
        });
        projections.push(ProjectionMatrix {
            pi: c.array(&format!("projection.{layer}.pi"))?.clone(),
            rank: c.meta_parse(&format!("projection.{layer}.rank"))?,
            raw_rank: c.meta_parse(&format!("projection.{layer}.raw_rank"))?,
            v_par: c.array(&format!("projection.{layer}.v_par"))?.clone(),
            v_perp: c.array(&format!("projection.{layer}.v_perp"))?.clone(),
            spectrum: c.array(&format!("projection.{layer}.spectrum"))?.iter().copied().collect(),
            degenerate: c.meta_parse(&format!("projection.{layer}.degenerate"))?,
        });
    }
    let encoders = RouterEncoders {
        text_table: c.array("router.text_table")?.clone(),
        image_map: c.array("router.image_map")?.clone(),
    };
    let prototypes = (0..tasks)
        .map(|t| {
            let m = c.array(&format!("router.prototype.{t}"))?;
            Ok(TaskPrototype { task: t, center: Vector::from_iterator(m.len(), m.iter().copied()) })
        })
        .collect::<Result<Vec<_>>>()?;
    let router = Router::new(encoders, cfg.refine).with_prototypes(prototypes)?;
    Ok(ContinualState { cfg, backbone, projector, generators, moments, projections, router })
}

pub fn save_state(dir: &Path, state: &ContinualState) -> Result<()> {
    state_to_container(state).save(dir)
}

pub fn load_state(dir: &Path) -> Result<ContinualState> {
    state_from_container(&Container::load(dir)?)
}

pub fn stream_to_container(stream: &TaskStream) -> Result<Container> {
    let mut c = Container::new("stream");
    c.put_meta("stream_config", serde_json::to_string(&stream.config)?);
    for task in &stream.tasks {
        let k = task.id;
        c.put(format!("task{k}.basis"), task.basis.clone());
        let r = &task.rule;
        c.put(format!("task{k}.rule.center"), row(r.center.as_slice()));
        c.put(format!("task{k}.rule.topic_tokens"), ids(&r.topic_tokens));
        c.put(format!("task{k}.rule.intent_tokens"), ids(&r.intent_tokens));
        c.put(format!("task{k}.rule.answer_tokens"), ids(&r.answer_tokens));
        for (j, m) in r.readouts.iter().enumerate() {
            c.put(format!("task{k}.rule.readout{j}"), m.clone());
        }
        for (split, samples) in [("train", &task.train), ("test", &task.test)] {
            let cfg = &stream.config;
            let n = samples.len();
            let mut visual = Mat::zeros(n * cfg.visual_tokens, cfg.visual_dim);
            let mut tokens = Mat::zeros(n, cfg.max_len);
            let mut mask = Mat::zeros(n, cfg.max_len);
            let mut answer = Mat::zeros(n, cfg.answer_len);
            let mut start = Mat::zeros(n, 1);
            for (i, s) in samples.iter().enumerate() {
                visual.rows_mut(i * cfg.visual_tokens, cfg.visual_tokens).copy_from(&s.visual);
                for (j, (&t, &v)) in s.tokens.iter().zip(&s.mask).enumerate() {
                    tokens[(i, j)] = t as f64;
                    mask[(i, j)] = f64::from(u8::from(v));
                }
                for (j, &a) in s.answer.iter().enumerate() {
                    answer[(i, j)] = a as f64;
                }
                start[(i, 0)] = s.answer_start as f64;
            }
            c.put(format!("task{k}.{split}.visual"), visual);
            c.put(format!("task{k}.{split}.tokens"), tokens);
            c.put(format!("task{k}.{split}.mask"), mask);
            c.put(format!("task{k}.{split}.answer_start"), start);
            c.put(format!("task{k}.{split}.answer"), answer);
        }
    }
    Ok(c)
}

pub fn stream_from_container(c: &Container) -> Result<TaskStream> {
    if c.kind != "stream" {
        return Err(Error::Checkpoint(format!("expected a stream checkpoint, found `{}`", c.kind)));
    }
    let config: StreamConfig = serde_json::from_str(c.meta("stream_config")?)?;
    let mut tasks = vec![];
    for k in 0..config.n_tasks {
        let get = |name: &str| c.array(&format!("task{k}.{name}"));
        let rule = TaskRule {
            center: Vector::from_iterator(config.subspace_dim, get("rule.center")?.iter().copied()),
            topic_tokens: to_ids(get("rule.topic_tokens")?)?,
            intent_tokens: to_ids(get("rule.intent_tokens")?)?,
            answer_tokens: to_ids(get("rule.answer_tokens")?)?,
            readouts: (0..config.answer_len)
                .map(|j| get(&format!("rule.readout{j}")).cloned())
                .collect::<Result<_>>()?,
        };
        let mut splits = vec![];
        for split in ["train", "test"] {
            let visual = get(&format!("{split}.visual"))?;
            let tokens = get(&format!("{split}.tokens"))?;
            let mask = get(&format!("{split}.mask"))?;
            let start = get(&format!("{split}.answer_start"))?;
            let answer = get(&format!("{split}.answer"))?;
            let samples = (0..tokens.nrows())
                .map(|i| {
                    Ok(Sample {
                        visual: visual.rows(i * config.visual_tokens, config.visual_tokens).clone_owned(),
                        tokens: to_ids(tokens.row(i).iter())?,
                        mask: mask.row(i).iter().map(|&v| v != 0.0).collect(),
                        answer_start: start[(i, 0)] as usize,
                        answer: to_ids(answer.row(i).iter())?,
                        task: k,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            splits.push(samples);
        }
        let test = splits.pop().expect("two splits");
        let train = splits.pop().expect("two splits");
        tasks.push(Task { id: k, train, test, basis: get("basis")?.clone(), rule });
    }
    Ok(TaskStream { config, tasks })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn container_round_trip_is_byte_identical() {
        let mut c = Container::new("test");
        c.put_meta("answer", 42);
        c.put("a", Mat::from_row_slice(2, 2, &[1.0, -0.0, f64::MIN_POSITIVE, 1e300]));
        c.put("empty", Mat::zeros(3, 0));
        c.config = Some("[run]\nseed = 1\n".into());
        let (m1, b1) = c.encode().unwrap();
        let back = Container::decode(&m1, &b1).unwrap();
        assert_eq!(back, c);
        let (m2, b2) = back.encode().unwrap();
        assert_eq!((m1, b1), (m2, b2));
    }

    #[test]
    fn corruption_is_detected() {
        let mut c = Container::new("test");
        c.put("a", Mat::identity(2, 2));
        let (m, mut b) = c.encode().unwrap();
        b[3] ^= 1;
        assert!(matches!(Container::decode(&m, &b), Err(Error::Checkpoint(_))));
        let bad = m.replace("format_version 1", "format_version 9");
        assert!(Container::decode(&bad, &c.encode().unwrap().1).is_err());
    }

    #[test]
    fn names_with_spaces_are_rejected() {
        let mut c = Container::new("test");
        c.put("a b", Mat::identity(1, 1));
        assert!(c.encode().is_err());
    }

    #[test]
    fn stream_round_trip() {
        let cfg = StreamConfig { samples_per_task: 10, n_tasks: 2, ..Default::default() };
        let s = crate::stream::generate_stream(&cfg).unwrap();
        let c = stream_to_container(&s).unwrap();
        let (m, b) = c.encode().unwrap();
        let back = stream_from_container(&Container::decode(&m, &b).unwrap()).unwrap();
        assert_eq!(back, s);
    }
}
