//! Label-free task routing over fused text+image embeddings.
//!
//! Each task keeps one unit prototype in a fixed embedding space. Routing
//! picks the prototype with the highest cosine similarity to the query's
//! fused feature. Per-instance features are cached only while their task is
//! being trained and are dropped once the prototype is registered.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{argmax, cosine, gaussian, row_mean, Mat, Vector};
use crate::stream::Sample;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoutingMode {
    /// Prototype routing.
    Learned,
    /// Ground-truth task id.
    Oracle,
    /// Always the most recently trained generator.
    None,
}

impl fmt::Display for RoutingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RoutingMode::Learned => "learned",
            RoutingMode::Oracle => "oracle",
            RoutingMode::None => "none",
        })
    }
}

impl FromStr for RoutingMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "learned" => Ok(Self::Learned),
            "oracle" => Ok(Self::Oracle),
            "none" => Ok(Self::None),
            other => Err(Error::Config(format!("unknown router mode `{other}`"))),
        }
    }
}

/// Fixed stand-ins for frozen text and image encoders.
#[derive(Debug, Clone, PartialEq)]
pub struct RouterEncoders {
    /// `vocab × d_r` bag-of-tokens table.
    pub text_table: Mat,
    /// `d_r × visual_dim` map applied to the mean visual row.
    pub image_map: Mat,
}

impl RouterEncoders {
    pub fn new(vocab: usize, visual_dim: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            text_table: gaussian(vocab, dim, 1.0, &mut rng),
            image_map: gaussian(dim, visual_dim, 1.0 / (visual_dim as f64).sqrt(), &mut rng),
        }
    }

    /// Mean token embedding over valid positions.
    pub fn text(&self, tokens: &[usize], valid: &[bool]) -> Result<Vector> {
        let mut acc = Vector::zeros(self.text_table.ncols());
        let mut n = 0usize;
        for (&t, &ok) in tokens.iter().zip(valid) {
            if ok {
                if t >= self.text_table.nrows() {
                    return Err(Error::Vocab { id: t, vocab: self.text_table.nrows() });
                }
                acc += self.text_table.row(t).transpose();
                n += 1;
            }
        }
        if n == 0 {
            return Err(Error::Degenerate("no valid instruction token to embed".into()));
        }
        Ok(acc / n as f64)
    }

    pub fn image(&self, visual: &Mat) -> Result<Vector> {
        if visual.ncols() != self.image_map.ncols() {
            return Err(Error::Shape(format!(
                "visual width {} for image encoder width {}",
                visual.ncols(),
                self.image_map.ncols()
            )));
        }
        Ok(&self.image_map * row_mean(visual))
    }

    pub fn routing_feature(&self, sample: &Sample) -> Result<Vector> {
        fuse(&self.text(&sample.tokens, &sample.mask)?, &self.image(&sample.visual)?)
    }
}

fn normalized(v: &Vector, what: &str) -> Result<Vector> {
    let n = v.norm();
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::Degenerate(format!("{what} has zero or non-finite norm")));
    }
    Ok(v / n)
}

/// `norm([norm(ξ); norm(γ)])`
pub fn fuse(text: &Vector, image: &Vector) -> Result<Vector> {
    let t = normalized(text, "text embedding")?;
    let i = normalized(image, "image embedding")?;
    let mut out = Vector::zeros(t.len() + i.len());
    out.rows_mut(0, t.len()).copy_from(&t);
    out.rows_mut(t.len(), i.len()).copy_from(&i);
    normalized(&out, "fused embedding")
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskPrototype {
    pub task: usize,
    pub center: Vector,
}

/// Normalized mean of the cached features.
pub fn init_prototype(features: &[Vector]) -> Result<Vector> {
    let first = features
        .first()
        .ok_or_else(|| Error::MissingCache("no cached features to build a prototype from".into()))?;
    let mut mean = Vector::zeros(first.len());
    for f in features {
        mean += f;
    }
    mean /= features.len() as f64;
    if mean.norm() < 1e-12 {
        return Err(Error::Degenerate("cached features average to zero".into()));
    }
    normalized(&mean, "prototype mean")
}

/// Contrastive prototype loss: each cached feature should be closer to
/// `center` than to any earlier prototype, at temperature `tau`.
/// Returns the loss and its gradient with respect to `center`.
pub fn prototype_loss(center: &Vector, cached: &[Vector], previous: &[Vector], tau: f64) -> (f64, Vector) {
    let c_norm = center.norm();
    let mut loss = 0.0;
    let mut grad = Vector::zeros(center.len());
    let b = cached.len() as f64;
    for e in cached {
        let own = cosine(e, center) / tau;
        let others: Vec<f64> = previous.iter().map(|p| cosine(e, p) / tau).collect();
        let max = others.iter().copied().fold(own, f64::max);
        let z: f64 = (own - max).exp() + others.iter().map(|o| (o - max).exp()).sum::<f64>();
        let log_p = own - max - z.ln();
        loss -= log_p / b;
        let p_own = log_p.exp();
        // d(-log p)/d own_cos = -(1 - p) / tau
        let d_cos = -(1.0 - p_own) / tau / b;
        let cos_ec = cosine(e, center);
        let d_center = e / (e.norm() * c_norm) - center * (cos_ec / (c_norm * c_norm));
        grad += d_center * d_cos;
    }
    (loss, grad)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefineConfig {
    pub tau: f64,
    pub lr: f64,
    pub steps: usize,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self { tau: 0.07, lr: 0.05, steps: 100 }
    }
}

/// Full-batch gradient descent on the prototype loss, renormalizing after every step.
pub fn refine_prototype(
    center: &Vector,
    cached: &[Vector],
    previous: &[Vector],
    cfg: &RefineConfig,
) -> Result<Vector> {
    if cached.is_empty() {
        return Err(Error::MissingCache("refinement needs the current task's cached features".into()));
    }
    if previous.is_empty() {
        return Err(Error::Degenerate("refinement needs at least one earlier prototype".into()));
    }
    if !(cfg.tau > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {}", cfg.tau)));
    }
    let mut c = normalized(center, "prototype")?;
    for _ in 0..cfg.steps {
        let (_, g) = prototype_loss(&c, cached, previous, cfg.tau);
        c = normalized(&(&c - g * cfg.lr), "refined prototype")?;
    }
    Ok(c)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Router {
    pub encoders: RouterEncoders,
    pub refine: RefineConfig,
    prototypes: Vec<TaskPrototype>,
    cache: Option<(usize, Vec<Vector>)>,
}

impl Router {
    pub fn new(encoders: RouterEncoders, refine: RefineConfig) -> Self {
        Self { encoders, refine, prototypes: vec![], cache: None }
    }

    pub fn prototypes(&self) -> &[TaskPrototype] {
        &self.prototypes
    }

    /// Restores registered prototypes (e.g. from a checkpoint).
    pub fn with_prototypes(mut self, prototypes: Vec<TaskPrototype>) -> Result<Self> {
        for (i, p) in prototypes.iter().enumerate() {
            if p.task != i {
                return Err(Error::Sequencing(format!("prototype {i} belongs to task {}", p.task)));
            }
        }
        self.prototypes = prototypes;
        Ok(self)
    }

    pub fn begin_task(&mut self, task: usize) -> Result<()> {
        if task != self.prototypes.len() {
            return Err(Error::Sequencing(format!(
                "router expects task {}, got {task}",
                self.prototypes.len()
            )));
        }
        self.cache = Some((task, vec![]));
        Ok(())
    }

    pub fn cache_feature(&mut self, feature: Vector) -> Result<()> {
        match &mut self.cache {
            Some((_, c)) => {
                c.push(feature);
                Ok(())
            }
            None => Err(Error::MissingCache("no task is open for caching".into())),
        }
    }

    pub fn cached(&self) -> Result<&[Vector]> {
        self.cache
            .as_ref()
            .map(|(_, c)| c.as_slice())
            .ok_or_else(|| Error::MissingCache("cache was discarded".into()))
    }

    /// Refines `center` against the still-cached features of the open task.
    pub fn refine_cached(&self, center: &Vector) -> Result<Vector> {
        let previous: Vec<Vector> = self.prototypes.iter().map(|p| p.center.clone()).collect();
        refine_prototype(center, self.cached()?, &previous, &self.refine)
    }

    /// Builds the open task's prototype (mean init, then refinement when an
    /// earlier prototype exists), stores it and discards the cache.
    pub fn register(&mut self) -> Result<&TaskPrototype> {
        let task = match &self.cache {
            Some((t, _)) => *t,
            None => return Err(Error::MissingCache("no open task to register".into())),
        };
        let mut center = init_prototype(self.cached()?)?;
        if !self.prototypes.is_empty() {
            center = self.refine_cached(&center)?;
        }
        self.prototypes.push(TaskPrototype { task, center });
        self.discard_cache();
        Ok(self.prototypes.last().expect("just pushed"))
    }

    pub fn discard_cache(&mut self) {
        self.cache = None;
    }

    /// Index of the most similar prototype; ties go to the lowest task id.
    pub fn route(&self, feature: &Vector) -> Result<usize> {
        if self.prototypes.is_empty() {
            return Err(Error::Untrained);
        }
        Ok(argmax(self.prototypes.iter().map(|p| cosine(feature, &p.center))).expect("non-empty"))
    }

    pub fn route_sample(&self, sample: &Sample) -> Result<usize> {
        self.route(&self.encoders.routing_feature(sample)?)
    }
}
