//! Sequential task training and label-free inference.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape};
use crate::backbone::{exact_match, Backbone, BackboneConfig};
use crate::error::{Error, Result};
use crate::generator::{Generator, GeneratorConfig, GeneratorMode};
use crate::gradcheck::{gradcheck, GradcheckOptions, GradcheckReport, HasParams};
use crate::linalg::Mat;
use crate::metrics::AccuracyMatrix;
use crate::nullspace::{compute_projection, update_moment, MomentStats, ProjectionMatrix};
use crate::optim::{step, CosineSchedule, HookSet, ParamSet, RightProjectHook};
use crate::projector::{Projector, LAYERS};
use crate::router::{RefineConfig, Router, RouterEncoders, RoutingMode};
use crate::stream::{generate_stream, Sample, StreamConfig, Task, TaskStream, PAD};

/// Environment variable capping evaluation worker threads.
pub const THREADS_ENV: &str = "DRAPE_THREADS";

pub const ALL_MODES: [RoutingMode; 3] = [RoutingMode::Learned, RoutingMode::Oracle, RoutingMode::None];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub stream: StreamConfig,
    pub generator: GeneratorConfig,
    /// Output width of the frozen vision encoder.
    pub vision_dim: usize,
    pub projector_hidden: usize,
    pub decoder_heads: usize,
    pub router_dim: usize,
    pub refine: RefineConfig,
    pub eps: f64,
    pub lr_generator: f64,
    pub lr_projector: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub warmup_ratio: f64,
    pub router_mode: RoutingMode,
    pub nullspace: bool,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            stream: StreamConfig::default(),
            generator: GeneratorConfig::default(),
            vision_dim: 16,
            projector_hidden: 32,
            decoder_heads: 4,
            router_dim: 16,
            refine: RefineConfig::default(),
            eps: 0.99,
            lr_generator: 0.1,
            lr_projector: 0.01,
            epochs: 1,
            batch_size: 8,
            warmup_ratio: 0.03,
            router_mode: RoutingMode::Learned,
            nullspace: true,
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        self.stream.validate()?;
        self.generator.validate()?;
        if !(self.eps > 0.0 && self.eps <= 1.0) {
            return fail(format!("eps must lie in (0, 1], got {}", self.eps));
        }
        if !(self.lr_generator > 0.0) || !(self.lr_projector > 0.0) {
            return fail("learning rates must be positive".into());
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return fail("epochs and batch_size must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return fail(format!("warmup_ratio must lie in [0, 1), got {}", self.warmup_ratio));
        }
        if self.vision_dim == 0 || self.projector_hidden == 0 || self.router_dim == 0 {
            return fail("vision_dim, projector_hidden and router_dim must be positive".into());
        }
        if self.decoder_heads == 0 || self.generator.width % self.decoder_heads != 0 {
            return fail(format!(
                "decoder heads {} must divide width {}",
                self.decoder_heads, self.generator.width
            ));
        }
        if !(self.refine.tau > 0.0) || self.refine.lr < 0.0 {
            return fail("router temperature must be positive and its learning rate non-negative".into());
        }
        Ok(())
    }

    /// The stream this run trains on; its seed follows the run seed.
    pub fn stream_config(&self) -> StreamConfig {
        StreamConfig { seed: self.seed, ..self.stream.clone() }
    }

    pub fn backbone_config(&self) -> BackboneConfig {
        BackboneConfig {
            visual_dim: self.stream.visual_dim,
            vision_dim: self.vision_dim,
            width: self.generator.width,
            vocab: self.stream.vocab,
            max_len: self.stream.max_len,
            heads: self.decoder_heads,
            seed: derive_seed(self.seed, 1, 0),
        }
    }
}

/// SplitMix64 over `(seed, stream, index)`, so every component gets an
/// independent but reproducible seed.
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// What happened while training one task.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TaskRecord {
    pub task: usize,
    pub batch_losses: Vec<f64>,
    /// Whether projector gradients went through `Π` during this task.
    pub projected: bool,
    pub ranks: Vec<usize>,
    pub raw_ranks: Vec<usize>,
    pub spectra: Vec<Vec<f64>>,
    pub moment_counts: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    pub tokens: Vec<usize>,
    pub routed: usize,
}

#[derive(Debug, Clone)]
pub struct ContinualState {
    pub cfg: RunConfig,
    pub backbone: Backbone,
    pub projector: Projector,
    pub generators: Vec<Generator>,
    pub moments: Vec<MomentStats>,
    /// `Π` after the last completed task, one per projector layer.
    pub projections: Vec<ProjectionMatrix>,
    pub router: Router,
}

impl ContinualState {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let backbone = Backbone::new(cfg.backbone_config())?;
        let projector = Projector::new(
            cfg.vision_dim,
            cfg.projector_hidden,
            cfg.generator.width,
            derive_seed(cfg.seed, 2, 0),
        )?;
        let dims = projector.layer_input_dims();
        let encoders = RouterEncoders::new(
            cfg.stream.vocab,
            cfg.stream.visual_dim,
            cfg.router_dim,
            derive_seed(cfg.seed, 3, 0),
        );
        Ok(Self {
            backbone,
            projector,
            generators: vec![],
            moments: dims.iter().map(|&d| MomentStats::zero(d)).collect(),
            projections: dims.iter().map(|&d| ProjectionMatrix::identity(d)).collect(),
            router: Router::new(encoders, cfg.refine),
            cfg,
        })
    }

    /// Number of completed tasks.
    pub fn tasks_done(&self) -> usize {
        self.generators.len()
    }

    fn sample_loss(
        &mut self,
        gen: &Generator,
        sample: &Sample,
        dropout: &mut ChaCha8Rng,
    ) -> Result<(f64, Gradients)> {
        let mut tape = Tape::new();
        let feats = tape.constant(self.backbone.encode_image(&sample.visual)?);
        let w = self.projector.project(&mut tape, feats, true)?;
        let u = tape.constant(self.backbone.embed_text(&sample.tokens)?);
        let out = gen.generate(&mut tape, w, u, &sample.mask, Some(dropout))?;
        let seq = self.backbone.assemble(&mut tape, Some(out.prompt), w, u)?;
        let loss = self.backbone.nll_loss(&mut tape, &seq, sample.answer_start, &sample.answer)?;
        Ok((tape.scalar(loss), tape.backward(loss)?))
    }

    /// Trains a fresh generator (and the shared projector) on `task`, then
    /// freezes the generator, folds the task's projector inputs into the
    /// moments, recomputes `Π` and registers the task prototype.
    pub fn train_task(&mut self, task: &Task) -> Result<TaskRecord> {
        let t = self.tasks_done();
        if task.id != t {
            return Err(Error::Sequencing(format!("expected task {t}, got task {}", task.id)));
        }
        if task.train.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let mut gen = Generator::new(self.cfg.generator.clone(), derive_seed(self.cfg.seed, 4, t as u64), &format!("gen{t}."))?;
        self.router.begin_task(t)?;

        let mut hooks = HookSet::new();
        let projected = t > 0 && self.cfg.nullspace;
        if projected {
            for (layer, proj) in LAYERS.iter().zip(&self.projections) {
                let name = self.projector.params().full_name(&format!("{layer}.weight"));
                hooks.register(name, Box::new(RightProjectHook { matrix: proj.pi.clone() }));
            }
        }
        let no_hooks = HookSet::new();

        let n = task.train.len();
        let bs = self.cfg.batch_size;
        let per_epoch = n.div_ceil(bs);
        let total = per_epoch * self.cfg.epochs;
        let sched_g = CosineSchedule { peak: self.cfg.lr_generator, total_steps: total, warmup_ratio: self.cfg.warmup_ratio };
        let sched_p = CosineSchedule { peak: self.cfg.lr_projector, total_steps: total, warmup_ratio: self.cfg.warmup_ratio };
        let mut order_rng = ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, 5, t as u64));
        let mut dropout_rng = ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, 6, t as u64));

        let mut batch_losses = Vec::with_capacity(total);
        let mut global = 0;
        for epoch in 0..self.cfg.epochs {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut order_rng);
            for chunk in order.chunks(bs) {
                let mut grads = Gradients::default();
                let mut loss_sum = 0.0;
                let scale = 1.0 / chunk.len() as f64;
                for &i in chunk {
                    let sample = &task.train[i];
                    if epoch == 0 {
                        let e = self.router.encoders.routing_feature(sample)?;
                        self.router.cache_feature(e)?;
                    }
                    let (l, g) = self.sample_loss(&gen, sample, &mut dropout_rng)?;
                    if !l.is_finite() {
                        return Err(Error::Degenerate(format!("non-finite loss on task {t}; lower the learning rates")));
                    }
                    loss_sum += l;
                    grads.accumulate(&g, scale);
                }
                batch_losses.push(loss_sum * scale);
                step(gen.params_mut(), &grads, &no_hooks, sched_g.lr(global))?;
                step(self.projector.params_mut(), &grads, &hooks, sched_p.lr(global))?;
                global += 1;
            }
        }

        gen.freeze();
        self.generators.push(gen);

        let mut ranks = vec![];
        let mut raw_ranks = vec![];
        let mut spectra = vec![];
        let mut counts = vec![];
        for (l, (gram, count)) in self.projector.drain_taps().into_iter().enumerate() {
            self.moments[l] = update_moment(&self.moments[l], &gram, count)?;
            let proj = compute_projection(&self.moments[l].moment, self.cfg.eps)?;
            ranks.push(proj.rank);
            raw_ranks.push(proj.raw_rank);
            spectra.push(proj.spectrum.clone());
            counts.push(self.moments[l].count);
            self.projections[l] = proj;
        }

        self.router.register()?;

        Ok(TaskRecord { task: t, batch_losses, projected, ranks, raw_ranks, spectra, moment_counts: counts })
    }

    pub fn route(&self, sample: &Sample, mode: RoutingMode) -> Result<usize> {
        let n = self.tasks_done();
        if n == 0 {
            return Err(Error::Untrained);
        }
        match mode {
            RoutingMode::Learned => self.router.route_sample(sample),
            RoutingMode::Oracle => {
                if sample.task >= n {
                    Err(Error::Bounds { index: sample.task, len: n })
                } else {
                    Ok(sample.task)
                }
            }
            RoutingMode::None => Ok(n - 1),
        }
    }

    /// Prompt from generator `routed` with dropout off.
    pub fn prompt(&self, sample: &Sample, routed: usize) -> Result<(Mat, Mat, Option<Mat>)> {
        let gen = self.generators.get(routed).ok_or(Error::Bounds { index: routed, len: self.generators.len() })?;
        let w = self.projector.project_value(&self.backbone.encode_image(&sample.visual)?)?;
        let blank = sample.with_answer_slots(&vec![PAD; sample.answer.len()]);
        let u = self.backbone.embed_text(&blank)?;
        let (p, attn) = gen.prompt_for(&w, &u, &sample.mask)?;
        Ok((p, w, attn))
    }

    pub fn infer(&self, sample: &Sample, mode: RoutingMode) -> Result<Inference> {
        let routed = self.route(sample, mode)?;
        let (p, w, _) = self.prompt(sample, routed)?;
        let tokens = self.backbone.greedy_decode(Some(&p), &w, &sample.tokens, sample.answer_start, sample.answer.len())?;
        Ok(Inference { tokens, routed })
    }

    /// Exact-match accuracy (percent) on each seen task's test split, plus the
    /// `(true, routed)` log, for every requested mode.
    pub fn evaluate(&self, stream: &TaskStream, modes: &[RoutingMode]) -> Result<BTreeMap<RoutingMode, StageEval>> {
        let seen = self.tasks_done();
        if seen == 0 {
            return Err(Error::Untrained);
        }
        let samples: Vec<&Sample> = stream.tasks[..seen].iter().flat_map(|t| t.test.iter()).collect();
        let jobs: Vec<(RoutingMode, &Sample)> =
            modes.iter().flat_map(|&m| samples.iter().map(move |&s| (m, s))).collect();
        let results = run_parallel(&jobs, |&(m, s)| self.infer(s, m).map(|r| (exact_match(&r.tokens, &s.answer), r.routed)))?;

        let mut out = BTreeMap::new();
        for (k, &mode) in modes.iter().enumerate() {
            let chunk = &results[k * samples.len()..(k + 1) * samples.len()];
            let mut hits = vec![0usize; seen];
            let mut totals = vec![0usize; seen];
            let mut routing = Vec::with_capacity(samples.len());
            for (s, &(hit, routed)) in samples.iter().zip(chunk) {
                hits[s.task] += hit as usize;
                totals[s.task] += 1;
                routing.push((s.task, routed));
            }
            let accuracy = hits
                .iter()
                .zip(&totals)
                .map(|(&h, &n)| if n == 0 { 0.0 } else { 100.0 * h as f64 / n as f64 })
                .collect();
            out.insert(mode, StageEval { accuracy, routing });
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageEval {
    /// Percent exact match per seen task.
    pub accuracy: Vec<f64>,
    /// `(true task, routed task)` per test sample.
    pub routing: Vec<(usize, usize)>,
}

/// Worker count from `DRAPE_THREADS`, if set to a positive integer.
pub fn thread_cap() -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(Error::Config(format!("{THREADS_ENV} must be a positive integer, got `{v}`"))),
        },
    }
}

#[cfg(feature = "parallel")]
fn run_parallel<J: Sync, R: Send>(jobs: &[J], f: impl Fn(&J) -> Result<R> + Sync) -> Result<Vec<R>> {
    use rayon::prelude::*;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = thread_cap()? {
        builder = builder.num_threads(n);
    }
    let pool = builder.build().map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| jobs.par_iter().map(&f).collect())
}

#[cfg(not(feature = "parallel"))]
fn run_parallel<J, R>(jobs: &[J], f: impl Fn(&J) -> Result<R>) -> Result<Vec<R>> {
    thread_cap()?;
    jobs.iter().map(f).collect()
}

/// Everything produced by a full run over the stream.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub state: ContinualState,
    pub stream: TaskStream,
    pub records: Vec<TaskRecord>,
    pub matrices: BTreeMap<RoutingMode, AccuracyMatrix>,
    /// Routing log of the configured mode after each stage.
    pub routing_logs: Vec<Vec<(usize, usize)>>,
}

impl RunOutcome {
    pub fn matrix(&self) -> &AccuracyMatrix {
        &self.matrices[&self.state.cfg.router_mode]
    }
}

/// Trains on every task in order, evaluating all routing modes after each one.
pub fn run_stream(cfg: RunConfig, mut on_stage: impl FnMut(&ContinualState, &TaskRecord)) -> Result<RunOutcome> {
    let stream = generate_stream(&cfg.stream_config())?;
    let mut state = ContinualState::new(cfg)?;
    let mut records = vec![];
    let mut matrices: BTreeMap<RoutingMode, AccuracyMatrix> = ALL_MODES.iter().map(|&m| (m, AccuracyMatrix::new())).collect();
    let mut routing_logs = vec![];
    for task in &stream.tasks {
        let rec = state.train_task(task)?;
        let evals = state.evaluate(&stream, &ALL_MODES)?;
        for (mode, ev) in &evals {
            matrices.get_mut(mode).expect("all modes").push_stage(ev.accuracy.clone())?;
        }
        routing_logs.push(evals[&state.cfg.router_mode].routing.clone());
        on_stage(&state, &rec);
        records.push(rec);
    }
    Ok(RunOutcome { state, stream, records, matrices, routing_logs })
}

/// Trainable half of the model (projector plus one generator) for gradient checks.
pub struct Trainable {
    pub projector: Projector,
    pub generator: Generator,
}

impl HasParams for Trainable {
    fn param_sets(&self) -> Vec<&ParamSet> {
        vec![self.projector.params(), self.generator.params()]
    }
    fn param_sets_mut(&mut self) -> Vec<&mut ParamSet> {
        vec![self.projector.params_mut(), self.generator.params_mut()]
    }
}

/// Small end-to-end instance: `L_p = 2`, `H = 8`, `d = 16`.
pub fn gradcheck_config(mode: GeneratorMode, seed: u64) -> RunConfig {
    RunConfig {
        stream: StreamConfig {
            n_tasks: 1,
            samples_per_task: 4,
            visual_tokens: 3,
            visual_dim: 6,
            max_len: 6,
            vocab: 10,
            answer_len: 2,
            ..Default::default()
        },
        generator: GeneratorConfig { width: 16, hidden: 8, heads: 2, prompt_len: 2, dropout: 0.0, mode, ..Default::default() },
        vision_dim: 8,
        projector_hidden: 8,
        decoder_heads: 2,
        seed,
        ..Default::default()
    }
}

/// Finite-difference check of the answer loss with respect to every projector
/// and generator parameter on one random sample.
pub fn end_to_end_gradcheck(cfg: &RunConfig, opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let stream = generate_stream(&cfg.stream_config())?;
    let state = ContinualState::new(cfg.clone())?;
    let sample = stream.tasks[0].train[0].clone();
    let mut model = Trainable {
        projector: state.projector.clone(),
        generator: Generator::new(cfg.generator.clone(), derive_seed(cfg.seed, 4, 0), "gen0.")?,
    };
    let backbone = &state.backbone;
    let feats = backbone.encode_image(&sample.visual)?;
    let u = backbone.embed_text(&sample.tokens)?;
    gradcheck(
        &mut model,
        |m, tape| {
            let f = tape.constant(feats.clone());
            let w = m.projector.clone().project(tape, f, false)?;
            let uv = tape.constant(u.clone());
            let out = m.generator.generate(tape, w, uv, &sample.mask, None)?;
            let seq = backbone.assemble(tape, Some(out.prompt), w, uv)?;
            backbone.nll_loss(tape, &seq, sample.answer_start, &sample.answer)
        },
        opts,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> RunConfig {
        RunConfig {
            stream: StreamConfig { n_tasks: 2, samples_per_task: 20, ..Default::default() },
            ..Default::default()
        }
    }

    #[test]
    fn seeds_are_distinct_and_stable() {
        assert_eq!(derive_seed(1, 2, 3), derive_seed(1, 2, 3));
        assert_ne!(derive_seed(1, 2, 3), derive_seed(1, 2, 4));
        assert_ne!(derive_seed(1, 2, 3), derive_seed(1, 3, 3));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(ContinualState::new(RunConfig { eps: 0.0, ..tiny() }).is_err());
        assert!(ContinualState::new(RunConfig { batch_size: 0, ..tiny() }).is_err());
        assert!(ContinualState::new(RunConfig { decoder_heads: 5, ..tiny() }).is_err());
    }

    #[test]
    fn tasks_must_come_in_order() {
        let cfg = tiny();
        let stream = generate_stream(&cfg.stream_config()).unwrap();
        let mut state = ContinualState::new(cfg).unwrap();
        assert!(matches!(state.train_task(&stream.tasks[1]), Err(Error::Sequencing(_))));
        assert!(matches!(state.infer(&stream.tasks[0].test[0], RoutingMode::Learned), Err(Error::Untrained)));
        let rec = state.train_task(&stream.tasks[0]).unwrap();
        assert!(!rec.projected);
        assert!(state.generators[0].is_frozen());
        assert!(matches!(state.generators[0].params_mut().get_mut("head1.weight"), Err(Error::Frozen(_))));
        assert!(matches!(state.train_task(&stream.tasks[0]), Err(Error::Sequencing(_))));
        let rec = state.train_task(&stream.tasks[1]).unwrap();
        assert!(rec.projected);
        assert_eq!(state.router.prototypes().len(), 2);
    }

    #[test]
    fn end_to_end_gradients_match() {
        for mode in [GeneratorMode::Segment, GeneratorMode::Learnable] {
            let r = end_to_end_gradcheck(&gradcheck_config(mode, 3), &GradcheckOptions::default()).unwrap();
            assert!(r.passed, "{mode}: {}", r.max_rel_err);
            assert!(r.params.iter().any(|p| p.name.starts_with("projector.")));
        }
    }

    #[test]
    fn none_mode_uses_last_generator() {
        let cfg = tiny();
        let stream = generate_stream(&cfg.stream_config()).unwrap();
        let mut state = ContinualState::new(cfg).unwrap();
        for t in &stream.tasks {
            state.train_task(t).unwrap();
        }
        for s in stream.tasks.iter().flat_map(|t| &t.test) {
            assert_eq!(state.infer(s, RoutingMode::None).unwrap().routed, 1);
            assert_eq!(state.infer(s, RoutingMode::Oracle).unwrap().routed, s.task);
        }
    }
}
