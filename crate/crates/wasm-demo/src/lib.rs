//! Browser bindings. Every function returns a JSON string or throws the
//! error message.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use wasm_bindgen::prelude::*;

use xprompt::linalg::{gaussian, orthonormal_columns, Mat};
use xprompt::metrics::{round_half_up, routing_confusion, AccuracyMatrix};
use xprompt::nullspace::{compute_projection, project_gradient, update_moment, MomentStats};
use xprompt::router::{Router, RouterEncoders, RefineConfig};
use xprompt::stream::{generate_stream, StreamConfig};

fn js_err(e: impl std::fmt::Display) -> JsValue {
    JsValue::from_str(&e.to_string())
}

fn to_json(v: &impl Serialize) -> Result<String, JsValue> {
    serde_json::to_string(v).map_err(js_err)
}

#[derive(Serialize)]
struct NullspaceView {
    spectrum: Vec<f64>,
    energy: Vec<f64>,
    rank: usize,
    raw_rank: usize,
    /// Mean output drift on the old features after one raw gradient step.
    drift_raw: f64,
    /// The same step after projection.
    drift_projected: f64,
    /// Drift on fresh features from the new task's directions, after projection.
    new_task_update: f64,
}

/// Old features span `old_dims` random directions of a `dim`-wide input.
/// Shows the retained spectrum at threshold `eps` and how much a random
/// weight step moves the layer's outputs on those features, with and
/// without projection.
#[wasm_bindgen]
pub fn nullspace_explorer(dim: usize, old_dims: usize, eps: f64, seed: u64) -> Result<String, JsValue> {
    if dim < 2 || old_dims == 0 || old_dims > dim {
        return Err(js_err(format!("need 2 <= dim and 1 <= old_dims <= dim, got {dim} and {old_dims}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let basis = orthonormal_columns(dim, dim, &mut rng);
    let old = basis.columns(0, old_dims).clone_owned();
    let n = 64;
    let feats: Mat = gaussian(n, old_dims, 1.0, &mut rng) * old.transpose() + gaussian(n, dim, 0.02, &mut rng);
    let stats = update_moment(&MomentStats::zero(dim), &(feats.transpose() * &feats), n).map_err(js_err)?;
    let proj = compute_projection(&stats.moment, eps).map_err(js_err)?;

    let grad = gaussian(8, dim, 1.0, &mut rng);
    let eta = 0.1;
    let drift = |step: &Mat, x: &Mat| (x * step.transpose() * eta).row_iter().map(|r| r.norm()).sum::<f64>() / x.nrows() as f64;
    let projected = project_gradient(&grad, &proj).map_err(js_err)?;
    let new_feats: Mat = if old_dims < dim {
        gaussian(n, dim - old_dims, 1.0, &mut rng) * basis.columns(old_dims, dim - old_dims).transpose()
    } else {
        gaussian(n, dim, 1.0, &mut rng)
    };
    let total: f64 = proj.spectrum.iter().sum();
    let mut acc = 0.0;
    let energy = proj
        .spectrum
        .iter()
        .map(|s| {
            acc += s;
            if total > 0.0 { acc / total } else { 0.0 }
        })
        .collect();
    to_json(&NullspaceView {
        spectrum: proj.spectrum.clone(),
        energy,
        rank: proj.rank,
        raw_rank: proj.raw_rank,
        drift_raw: drift(&grad, &feats),
        drift_projected: drift(&projected, &feats),
        new_task_update: drift(&projected, &new_feats),
    })
}

#[derive(Serialize)]
struct RoutingView {
    accuracy: f64,
    per_task: Vec<f64>,
    confusion: Vec<Vec<f64>>,
}

/// Builds task prototypes on a synthetic stream and routes its test split.
#[wasm_bindgen]
pub fn routing_demo(n_tasks: usize, separation: f64, seed: u64) -> Result<String, JsValue> {
    let cfg = StreamConfig { n_tasks, samples_per_task: 150, separation, seed, ..Default::default() };
    let stream = generate_stream(&cfg).map_err(js_err)?;
    let enc = RouterEncoders::new(cfg.vocab, cfg.visual_dim, 16, seed ^ 0x5eed);
    let mut router = Router::new(enc, RefineConfig::default());
    for task in &stream.tasks {
        router.begin_task(task.id).map_err(js_err)?;
        for s in &task.train {
            let f = router.encoders.routing_feature(s).map_err(js_err)?;
            router.cache_feature(f).map_err(js_err)?;
        }
        router.register().map_err(js_err)?;
    }
    let mut log = vec![];
    for s in stream.tasks.iter().flat_map(|t| &t.test) {
        log.push((s.task, router.route_sample(s).map_err(js_err)?));
    }
    let conf = routing_confusion(&log, n_tasks).map_err(js_err)?;
    let r2 = |x: f64| round_half_up(x, 2);
    to_json(&RoutingView {
        accuracy: r2(conf.accuracy()),
        per_task: conf.per_task_accuracy().into_iter().map(r2).collect(),
        confusion: conf.percent.iter().map(|row| row.iter().map(|&x| r2(x)).collect()).collect(),
    })
}

#[derive(Serialize)]
struct StageRow {
    stage: usize,
    bwt: Option<f64>,
    ma: f64,
}

#[derive(Serialize)]
struct MetricsView {
    stages: Vec<StageRow>,
    final_average: f64,
    bwt_mean: Option<f64>,
    ma_mean: f64,
}

/// Backward transfer and mean accuracy per stage of a stage-major accuracy CSV.
#[wasm_bindgen]
pub fn stage_metrics(csv_text: &str) -> Result<String, JsValue> {
    let m = AccuracyMatrix::read_csv(csv_text.as_bytes()).map_err(js_err)?;
    let s = m.summary().map_err(js_err)?;
    let r2 = |x: f64| round_half_up(x, 2);
    to_json(&MetricsView {
        stages: s.stages.iter().map(|st| StageRow { stage: st.stage, bwt: st.bwt.map(r2), ma: r2(st.ma) }).collect(),
        final_average: r2(s.final_average),
        bwt_mean: s.bwt_mean.map(r2),
        ma_mean: r2(s.ma_mean),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metrics_from_csv() {
        let v: serde_json::Value =
            serde_json::from_str(&stage_metrics("stage,a,b\n1,80,\n2,70,60\n").unwrap()).unwrap();
        assert_eq!(v["final_average"], 65.0);
        assert_eq!(v["stages"][1]["bwt"], 10.0);
        assert_eq!(v["ma_mean"], 65.0);
    }

    #[test]
    fn projection_removes_drift_on_old_features() {
        let v: serde_json::Value = serde_json::from_str(&nullspace_explorer(8, 3, 0.95, 1).unwrap()).unwrap();
        assert_eq!(v["rank"], 3);
        let raw = v["drift_raw"].as_f64().unwrap();
        let proj = v["drift_projected"].as_f64().unwrap();
        assert!(proj < 0.05 * raw, "{proj} vs {raw}");
        assert!(v["new_task_update"].as_f64().unwrap() > 0.5 * raw);
    }

    #[test]
    fn separated_tasks_route_well() {
        let v: serde_json::Value = serde_json::from_str(&routing_demo(3, 10.0, 2).unwrap()).unwrap();
        assert!(v["accuracy"].as_f64().unwrap() >= 95.0);
        for row in v["confusion"].as_array().unwrap() {
            let sum: f64 = row.as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).sum();
            assert!((sum - 100.0).abs() < 0.05);
        }
    }
}
