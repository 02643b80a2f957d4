//! Acceptance criteria, one PASS/FAIL line each.
//!
//! Run with `cargo test --release --test acceptance -- --nocapture` to see the report.

use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use xprompt::checkpoint::{load_state, save_state};
use xprompt::generator::{Generator, GeneratorMode};
use xprompt::gradcheck::GradcheckOptions;
use xprompt::linalg::{gaussian, gaussian_vector, max_abs, Mat, Vector};
use xprompt::metrics::{routing_confusion, AccuracyMatrix};
use xprompt::nullspace::{compute_projection, complement_energy, interference_bound, project_gradient};
use xprompt::report::summarize;
use xprompt::router::{fuse, init_prototype, prototype_loss, refine_prototype, RefineConfig, Router, RoutingMode, TaskPrototype};
use xprompt::stream::generate_stream;
use xprompt::trainer::{end_to_end_gradcheck, gradcheck_config, run_stream, ContinualState, RunConfig, RunOutcome};

struct Report {
    lines: Vec<(usize, bool, String)>,
}

impl Report {
    fn record(&mut self, id: usize, ok: bool, detail: String) {
        println!("criterion {id}: {} {detail}", if ok { "PASS" } else { "FAIL" });
        self.lines.push((id, ok, detail));
    }
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol + 1e-9
}

fn criterion_1(rep: &mut Report) {
    let start = Instant::now();
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/coin_stage_matrix.csv");
    let m = AccuracyMatrix::load_csv(&path).unwrap();
    let s = m.summary().unwrap();
    let bwt = [3.37, 2.48, 1.32, 1.07, 0.83, 0.78, 0.66];
    let ma = [65.11, 74.37, 71.51, 68.07, 68.08, 67.80, 67.48];
    let mut ok = close(s.final_average, 67.48, 0.005);
    for (i, st) in s.stages.iter().skip(1).enumerate() {
        ok &= close(st.bwt.unwrap(), bwt[i], 0.005) && close(st.ma, ma[i], 0.005);
    }
    ok &= close(s.bwt_mean.unwrap(), 1.50, 0.005) && close(s.ma_mean, 68.92, 0.005);
    let elapsed = start.elapsed();
    ok &= elapsed < Duration::from_secs(1);
    rep.record(
        1,
        ok,
        format!(
            "average {:.4}, B_mean {:.4}, M_mean {:.4}, {:?}",
            s.final_average,
            s.bwt_mean.unwrap(),
            s.ma_mean,
            elapsed
        ),
    );
}

fn random_psd(d: usize, rng: &mut ChaCha8Rng) -> Mat {
    let k = rng.gen_range(1..=2 * d);
    let mut a = gaussian(d, k, 1.0, rng);
    for j in 0..k {
        let s = rng.gen_range(0.05..3.0);
        a.column_mut(j).scale_mut(s);
    }
    &a * a.transpose()
}

fn criterion_2(rep: &mut Report) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut ok = true;
    let mut worst_idem = 0.0f64;
    let mut worst_par = 0.0f64;
    let mut checked_bound = 0;
    let mut clamped = 0;
    for d in [4, 8, 16] {
        for _ in 0..100 {
            let m = random_psd(d, &mut rng);
            let mut prev_rank = 0;
            for eps in [0.8, 0.9, 0.99] {
                let p = compute_projection(&m, eps).unwrap();
                worst_idem = worst_idem.max(max_abs(&(&p.pi - p.pi.transpose()))).max(max_abs(&(&p.pi * &p.pi - &p.pi)));
                worst_par = worst_par.max(max_abs(&(&p.pi * &p.v_par)));
                ok &= p.rank >= prev_rank && p.rank <= d - 1;
                prev_rank = p.rank;
                if p.rank == p.raw_rank {
                    checked_bound += 1;
                    ok &= complement_energy(&m, &p) <= (1.0 - eps) * m.trace() + 1e-8;
                } else {
                    // The clamp keeps one direction trainable; what is left is exactly the last eigenvalue.
                    clamped += 1;
                    ok &= close(complement_energy(&m, &p), p.spectrum[d - 1], 1e-8);
                }
            }
        }
        for eps in [0.8, 0.9, 0.99] {
            let p = compute_projection(&Mat::identity(d, d), eps).unwrap();
            ok &= p.rank <= d - 1;
        }
    }
    ok &= worst_idem < 1e-10 && worst_par < 1e-8;
    rep.record(
        2,
        ok,
        format!(
            "max sym/idempotence err {worst_idem:.1e}, max |Π V_par| {worst_par:.1e}, energy bound on {checked_bound} unclamped cases, {clamped} clamped to d-1"
        ),
    );
}

fn criterion_3(rep: &mut Report) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut ok = true;
    let mut worst_ratio = 0.0f64;
    let mut worst_change = 0.0f64;
    for _ in 0..1000 {
        let d_in = rng.gen_range(2..=16);
        let d_out = rng.gen_range(1..=16);
        let eps = rng.gen_range(0.5..0.999);
        let p = compute_projection(&random_psd(d_in, &mut rng), eps).unwrap();
        let grad = gaussian(d_out, d_in, rng.gen_range(0.1..5.0), &mut rng);
        let v = gaussian_vector(d_in, 1.0, &mut rng);
        let eta = rng.gen_range(1e-4..1.0);
        let (lhs, rhs) = interference_bound(&grad, &p, &v, eta).unwrap();
        ok &= lhs <= rhs * (1.0 + 1e-10);
        if rhs > 0.0 {
            worst_ratio = worst_ratio.max(lhs / rhs);
        }

        let w = gaussian(d_out, d_in, 1.0, &mut rng);
        let coeffs = gaussian_vector(p.rank, 1.0, &mut rng);
        let v_old: Vector = &p.v_par * coeffs;
        let stepped = &w - project_gradient(&grad, &p).unwrap() * eta;
        let change = (&stepped * &v_old - &w * &v_old).amax();
        worst_change = worst_change.max(change);
        ok &= change <= 1e-10;
    }
    rep.record(3, ok, format!("max lhs/rhs {worst_ratio:.6}, max output change on retained features {worst_change:.1e}"));
}

fn criterion_4(rep: &mut Report) {
    let start = Instant::now();
    let opts = GradcheckOptions::default();
    let mut worst = 0.0f64;
    let mut entries = 0;
    let mut ok = true;
    for mode in [GeneratorMode::Segment, GeneratorMode::Mean, GeneratorMode::Static, GeneratorMode::Learnable] {
        for seed in 0..20 {
            let r = end_to_end_gradcheck(&gradcheck_config(mode, seed), &opts).unwrap();
            ok &= r.passed;
            worst = worst.max(r.max_rel_err);
            entries += r.entries_checked;
        }
    }
    let elapsed = start.elapsed();
    ok &= worst <= 1e-5 && elapsed < Duration::from_secs(120);
    rep.record(4, ok, format!("{entries} entries over 20 seeds x 4 modes, max rel err {worst:.2e}, {elapsed:?}"));
}

fn criterion_5(rep: &mut Report) {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cfg = RunConfig { stream: xprompt::stream::StreamConfig { samples_per_task: 60, ..Default::default() }, ..Default::default() };
    let stream = generate_stream(&cfg.stream_config()).unwrap();
    let modes = [GeneratorMode::Segment, GeneratorMode::Mean, GeneratorMode::Static, GeneratorMode::Learnable];
    let mut ok = true;
    let mut instances = 0;
    for i in 0..50 {
        let mut c = cfg.clone();
        c.generator.mode = modes[i % modes.len()];
        let mut state = ContinualState::new(c.clone()).unwrap();
        state.generators.push(Generator::new(c.generator.clone(), 100 + i as u64, "gen0.").unwrap());
        let task = &stream.tasks[rng.gen_range(0..stream.tasks.len())];
        let sample = task.test[rng.gen_range(0..task.test.len())].clone();
        let (p0, _, a0) = state.prompt(&sample, 0).unwrap();
        let mut mutated = sample.clone();
        for (pos, valid) in sample.mask.iter().enumerate() {
            if !valid {
                mutated.tokens[pos] = rng.gen_range(0..cfg.stream.vocab);
            }
        }
        mutated.answer = mutated.tokens[sample.answer_start..sample.answer_start + sample.answer.len()].to_vec();
        let (p1, _, a1) = state.prompt(&mutated, 0).unwrap();
        ok &= p0 == p1 && a0 == a1;
        instances += 1;
    }
    rep.record(5, ok, format!("{instances} instances, prompts bit-identical after rewriting answer and padding tokens"));
}

fn accuracy_of_log(out: &RunOutcome) -> f64 {
    let n = out.stream.tasks.len();
    let mut log = vec![];
    for s in out.stream.tasks.iter().flat_map(|t| &t.test) {
        log.push((s.task, out.state.route(s, RoutingMode::Learned).unwrap()));
    }
    routing_confusion(&log, n).unwrap().accuracy()
}

fn criterion_6(rep: &mut Report, full: &[RunOutcome]) {
    let accs: Vec<f64> = full.iter().map(accuracy_of_log).collect();
    let mut ok = accs.iter().all(|&a| a >= 95.0);

    // Refinement loss on a real cache.
    let cfg = RunConfig::default();
    let stream = generate_stream(&cfg.stream_config()).unwrap();
    let state = ContinualState::new(cfg.clone()).unwrap();
    let enc = &state.router.encoders;
    let feats = |t: usize| -> Vec<Vector> {
        stream.tasks[t].train.iter().take(200).map(|s| enc.routing_feature(s).unwrap()).collect()
    };
    let (f0, f1) = (feats(0), feats(1));
    let mixed: Vec<Vector> = f0.iter().chain(&f1).cloned().collect();
    let one = RefineConfig { steps: 1, ..RefineConfig::default() };
    let mut monotone = true;
    let mut trace = vec![];
    // A separated earlier prototype, then one sitting between both tasks.
    for prev in [vec![init_prototype(&f0).unwrap()], vec![init_prototype(&mixed).unwrap()]] {
        let mut c = init_prototype(&f1).unwrap();
        let mut last = prototype_loss(&c, &f1, &prev, one.tau).0;
        let first = last;
        for _ in 0..RefineConfig::default().steps {
            c = refine_prototype(&c, &f1, &prev, &one).unwrap();
            let l = prototype_loss(&c, &f1, &prev, one.tau).0;
            monotone &= l <= last + 1e-12;
            last = l;
        }
        trace.push(format!("{first:.4} -> {last:.4}"));
    }
    ok &= monotone;

    // Scaling invariance.
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let protos: Vec<TaskPrototype> = (0..4)
        .map(|t| TaskPrototype { task: t, center: init_prototype(&feats(t)).unwrap() })
        .collect();
    let router = Router::new(enc.clone(), RefineConfig::default()).with_prototypes(protos).unwrap();
    let mut invariant = true;
    for s in stream.tasks.iter().flat_map(|t| t.test.iter().take(50)) {
        let text = enc.text(&s.tokens, &s.mask).unwrap();
        let image = enc.image(&s.visual).unwrap();
        let base = router.route(&fuse(&text, &image).unwrap()).unwrap();
        let (a, b) = (rng.gen_range(1e-3..1e3), rng.gen_range(1e-3..1e3));
        invariant &= router.route(&fuse(&(text * a), &(image * b)).unwrap()).unwrap() == base;
    }
    ok &= invariant;

    // Confusion rows.
    let mut row_err = 0.0f64;
    for out in full {
        let conf = routing_confusion(out.routing_logs.last().unwrap(), out.stream.tasks.len()).unwrap();
        for row in &conf.percent {
            row_err = row_err.max((row.iter().sum::<f64>() - 100.0).abs());
        }
    }
    let mut random_log = vec![];
    for t in 0..5 {
        for _ in 0..37 {
            random_log.push((t, rng.gen_range(0..5)));
        }
    }
    for row in &routing_confusion(&random_log, 5).unwrap().percent {
        row_err = row_err.max((row.iter().sum::<f64>() - 100.0).abs());
    }
    ok &= row_err <= 1e-6;
    rep.record(
        6,
        ok,
        format!(
            "learned routing accuracy per seed {accs:?}; refinement loss {} (monotone {monotone}); scaling invariant {invariant}; max row-sum error {row_err:.1e}",
            trace.join(", ")
        ),
    );
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.into_iter().collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn final_avg(out: &RunOutcome, mode: RoutingMode) -> f64 {
    out.matrices[&mode].final_average().unwrap()
}

fn criterion_7(rep: &mut Report, full: &[RunOutcome], no_ns: &[RunOutcome], static_gen: &[RunOutcome], slowest: Duration) {
    let bwt = |runs: &[RunOutcome]| mean(runs.iter().map(|o| o.matrix().summary().unwrap().bwt_mean.unwrap()));
    let (b_ns, b_plain) = (bwt(full), bwt(no_ns));
    let oracle = mean(full.iter().map(|o| final_avg(o, RoutingMode::Oracle)));
    let learned = mean(full.iter().map(|o| final_avg(o, RoutingMode::Learned)));
    let none = mean(full.iter().map(|o| final_avg(o, RoutingMode::None)));
    let stat = mean(static_gen.iter().map(|o| final_avg(o, RoutingMode::Learned)));
    let a = b_ns <= b_plain;
    let b = oracle >= learned && learned >= none;
    let c = learned >= stat;
    let t = slowest < Duration::from_secs(600);
    rep.record(
        7,
        a && b && c && t,
        format!(
            "(a) mean BWT {b_ns:.2} with projection vs {b_plain:.2} without: {a}; (b) final average oracle {oracle:.2} / learned {learned:.2} / none {none:.2}: {b}; (c) segment {learned:.2} vs static {stat:.2}: {c}; slowest run {slowest:?}"
        ),
    );
}

fn criterion_8(rep: &mut Report, first: &RunOutcome) {
    let again = run_stream(first.state.cfg.clone(), |_, _| {}).unwrap();
    let j1 = serde_json::to_string(&summarize(first).unwrap()).unwrap();
    let j2 = serde_json::to_string(&summarize(&again).unwrap()).unwrap();
    let same_summary = j1 == j2;

    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    save_state(&a, &first.state).unwrap();
    let restored = load_state(&a).unwrap();
    save_state(&b, &restored).unwrap();
    let mut same_bytes = true;
    for f in ["manifest.txt", "arrays.bin", "manifest.sha256"] {
        same_bytes &= std::fs::read(a.join(f)).unwrap() == std::fs::read(b.join(f)).unwrap();
    }
    let mut same_inference = true;
    let mut compared = 0;
    for s in first.stream.tasks.iter().flat_map(|t| &t.test) {
        for mode in [RoutingMode::Learned, RoutingMode::Oracle, RoutingMode::None] {
            let x = first.state.infer(s, mode).unwrap();
            let y = restored.infer(s, mode).unwrap();
            let (px, _, _) = first.state.prompt(s, x.routed).unwrap();
            let (py, _, _) = restored.prompt(s, y.routed).unwrap();
            same_inference &= x == y && px == py;
            compared += 1;
        }
    }
    rep.record(
        8,
        same_summary && same_bytes && same_inference,
        format!("summary identical {same_summary}; save-load-save bytes identical {same_bytes}; {compared} inferences bit-identical {same_inference}"),
    );
}

#[test]
fn acceptance() {
    let mut rep = Report { lines: vec![] };
    criterion_1(&mut rep);
    criterion_2(&mut rep);
    criterion_3(&mut rep);
    criterion_4(&mut rep);
    criterion_5(&mut rep);

    let mut slowest = Duration::ZERO;
    let mut runs = |f: &dyn Fn(&mut RunConfig)| -> Vec<RunOutcome> {
        (0..5u64)
            .map(|seed| {
                let mut cfg = RunConfig { seed, ..Default::default() };
                f(&mut cfg);
                let start = Instant::now();
                let out = run_stream(cfg, |_, _| {}).unwrap();
                slowest = slowest.max(start.elapsed());
                out
            })
            .collect()
    };
    let full = runs(&|_| {});
    let no_ns = runs(&|c| c.nullspace = false);
    let static_gen = runs(&|c| c.generator.mode = GeneratorMode::Static);

    criterion_6(&mut rep, &full);
    criterion_7(&mut rep, &full, &no_ns, &static_gen, slowest);
    criterion_8(&mut rep, &full[0]);

    let failed: Vec<usize> = rep.lines.iter().filter(|l| !l.1).map(|l| l.0).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
