use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use xprompt::checkpoint::Container;
use xprompt::config::{parse_config, to_text};
use xprompt::generator::{Generator, GeneratorConfig, GeneratorMode};
use xprompt::linalg::{gaussian, max_abs, Mat, Vector};
use xprompt::metrics::AccuracyMatrix;
use xprompt::nullspace::{compute_projection, update_moment, MomentStats};
use xprompt::router::{fuse, refine_prototype, RefineConfig, RoutingMode};
use xprompt::trainer::RunConfig;

fn psd(d: usize, k: usize, seed: u64) -> Mat {
    let a = gaussian(d, k, 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
    &a * a.transpose()
}

fn unit(v: Vec<f64>) -> Option<Vector> {
    let v = Vector::from_vec(v);
    let n = v.norm();
    (n > 1e-3).then(|| v / n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn projection_is_an_orthogonal_projector(d in 2usize..12, k in 1usize..20, seed: u64, eps in 0.05f64..1.0) {
        let m = psd(d, k, seed);
        let p = compute_projection(&m, eps).unwrap();
        prop_assert!(max_abs(&(&p.pi - p.pi.transpose())) < 1e-10);
        prop_assert!(max_abs(&(&p.pi * &p.pi - &p.pi)) < 1e-10);
        prop_assert!(max_abs(&(&p.pi * &p.v_par)) < 1e-8);
        prop_assert!((1..d).contains(&p.rank));
        prop_assert!((p.pi.trace() - (d - p.rank) as f64).abs() < 1e-8);
    }

    #[test]
    fn rank_grows_with_threshold(d in 2usize..12, k in 1usize..20, seed: u64, a in 0.01f64..1.0, b in 0.01f64..1.0) {
        let m = psd(d, k, seed);
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(compute_projection(&m, lo).unwrap().rank <= compute_projection(&m, hi).unwrap().rank);
    }

    #[test]
    fn moment_update_is_a_running_mean(d in 1usize..6, n1 in 1usize..20, n2 in 1usize..20, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x1 = gaussian(n1, d, 1.0, &mut rng);
        let x2 = gaussian(n2, d, 1.0, &mut rng);
        let s1 = update_moment(&MomentStats::zero(d), &(x1.transpose() * &x1), n1).unwrap();
        let s2 = update_moment(&s1, &(x2.transpose() * &x2), n2).unwrap();
        let both = (x1.transpose() * &x1 + x2.transpose() * &x2) / (n1 + n2) as f64;
        prop_assert_eq!(s2.count, n1 + n2);
        prop_assert!(max_abs(&(&s2.moment - both)) < 1e-10);
    }

    #[test]
    fn fusion_ignores_positive_scaling(
        t in prop::collection::vec(-1.0f64..1.0, 5),
        i in prop::collection::vec(-1.0f64..1.0, 5),
        a in 1e-3f64..1e3,
        b in 1e-3f64..1e3,
    ) {
        if let (Some(t), Some(i)) = (unit(t), unit(i)) {
            let base = fuse(&t, &i).unwrap();
            let scaled = fuse(&(&t * a), &(&i * b)).unwrap();
            prop_assert!((base - scaled).amax() < 1e-12);
        }
    }

    #[test]
    fn refined_prototypes_are_unit_norm(seed: u64, steps in 0usize..30, lr in 0.0f64..0.5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cached: Vec<Vector> = (0..6).map(|_| gaussian(4, 1, 1.0, &mut rng).column(0).into()).collect();
        let prev: Vec<Vector> = (0..2).map(|_| gaussian(4, 1, 1.0, &mut rng).column(0).into()).collect();
        let c0: Vector = gaussian(4, 1, 1.0, &mut rng).column(0).into();
        let c = refine_prototype(&c0, &cached, &prev, &RefineConfig { tau: 0.07, lr, steps }).unwrap();
        prop_assert!((c.norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn stage_metrics_ignore_later_task_order(
        t in 2usize..6,
        vals in prop::collection::vec(0.0f64..100.0, 36),
        seed: u64,
    ) {
        use rand::seq::SliceRandom;
        let n = 6;
        let rows: Vec<Vec<f64>> = (0..n).map(|s| vals[s * n..s * n + s + 1].to_vec()).collect();
        let m = AccuracyMatrix::from_stages(rows.clone()).unwrap();
        // Reorder the tasks learned after stage t, together with their stages.
        let mut later: Vec<usize> = (t..n).collect();
        later.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let perm: Vec<usize> = (0..t).chain(later).collect();
        let mut full = vec![vec![0.0; n]; n];
        for s in 0..n {
            for k in 0..=s {
                full[s][k] = rows[s][k];
            }
        }
        let permuted: Vec<Vec<f64>> = (0..n).map(|s| (0..=s).map(|k| full[perm[s].max(perm[k])][perm[k]]).collect()).collect();
        let p = AccuracyMatrix::from_stages(permuted).unwrap();
        for stage in 1..=t {
            prop_assert_eq!(m.mean_accuracy(stage).unwrap(), p.mean_accuracy(stage).unwrap());
            if stage >= 2 {
                prop_assert_eq!(m.backward_transfer(stage).unwrap(), p.backward_transfer(stage).unwrap());
            }
        }
    }

    #[test]
    fn config_text_round_trips(
        seed: u64,
        eps in 0.01f64..1.0,
        tau in 0.001f64..1.0,
        lr in 1e-6f64..1.0,
        prompt_len in 1usize..9,
        nullspace: bool,
        cross: bool,
        mode in prop::sample::select(vec![GeneratorMode::Segment, GeneratorMode::Mean, GeneratorMode::Static, GeneratorMode::Learnable]),
        router in prop::sample::select(vec![RoutingMode::Learned, RoutingMode::Oracle, RoutingMode::None]),
    ) {
        let mut cfg = RunConfig { seed, eps, nullspace, router_mode: router, lr_projector: lr, ..Default::default() };
        cfg.refine.tau = tau;
        cfg.generator.prompt_len = prompt_len;
        cfg.generator.cross_attention = cross;
        cfg.generator.mode = mode;
        let text = to_text(&cfg);
        prop_assert_eq!(parse_config(&text).unwrap(), cfg);
    }

    #[test]
    fn container_encoding_round_trips(
        shapes in prop::collection::vec((0usize..5, 0usize..5), 0..5),
        seed: u64,
        meta in prop::collection::vec(("[a-z_]{1,8}", "[ -~]{0,12}"), 0..4),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut c = Container::new("test");
        for (i, (r, k)) in shapes.iter().enumerate() {
            c.put(format!("a{i}"), gaussian(*r, *k, 1.0, &mut rng));
        }
        for (k, v) in &meta {
            c.put_meta(k, v.trim());
        }
        let (manifest, blob) = c.encode().unwrap();
        let back = Container::decode(&manifest, &blob).unwrap();
        prop_assert_eq!(&back, &c);
        let (m2, b2) = back.encode().unwrap();
        prop_assert_eq!(m2, manifest);
        prop_assert_eq!(b2, blob);
    }

    #[test]
    fn padding_content_never_reaches_the_prompt(
        seed: u64,
        valid in prop::collection::vec(any::<bool>(), 7),
        mode in prop::sample::select(vec![GeneratorMode::Segment, GeneratorMode::Mean, GeneratorMode::Static, GeneratorMode::Learnable]),
        prompt_len in 1usize..5,
    ) {
        let mut valid = valid;
        valid[0] = true;
        let cfg = GeneratorConfig { width: 8, hidden: 8, heads: 2, prompt_len, dropout: 0.3, mode, ..Default::default() };
        let gen = Generator::new(cfg, seed, "g.").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let w = gaussian(3, 8, 1.0, &mut rng);
        let u = gaussian(7, 8, 1.0, &mut rng);
        let mut u2 = u.clone();
        for (i, ok) in valid.iter().enumerate() {
            if !ok {
                u2.row_mut(i).copy_from(&gaussian(1, 8, 10.0, &mut rng));
            }
        }
        let (p1, a1) = gen.prompt_for(&w, &u, &valid).unwrap();
        let (p2, a2) = gen.prompt_for(&w, &u2, &valid).unwrap();
        prop_assert_eq!(p1, p2);
        prop_assert_eq!(a1, a2);
    }
}
