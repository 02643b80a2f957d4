//! Trainable parameter collections, gradient hooks and the update rule.

use std::collections::BTreeMap;

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::linalg::Mat;

/// Named trainable arrays. Gradient names are `prefix + name`, so several
/// sets can share one tape.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    prefix: String,
    entries: Vec<(String, Mat)>,
    index: BTreeMap<String, usize>,
    frozen: bool,
}

impl ParamSet {
    pub fn new(prefix: impl Into<String>) -> Self {
        Self { prefix: prefix.into(), entries: vec![], index: BTreeMap::new(), frozen: false }
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn insert(&mut self, name: &str, value: Mat) -> Result<()> {
        if self.frozen {
            return Err(Error::Frozen(self.full_name(name)));
        }
        if self.index.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push((name.to_string(), value));
        Ok(())
    }

    pub fn full_name(&self, name: &str) -> String {
        format!("{}{}", self.prefix, name)
    }

    /// Panics on unknown names: those are programming errors, not data errors.
    pub fn get(&self, name: &str) -> &Mat {
        match self.index.get(name) {
            Some(&i) => &self.entries[i].1,
            None => panic!("unknown parameter `{}`", self.full_name(name)),
        }
    }

    pub fn try_get(&self, name: &str) -> Option<&Mat> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Mat> {
        if self.frozen {
            return Err(Error::Frozen(self.full_name(name)));
        }
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter `{}`", self.full_name(name))))?;
        Ok(&mut self.entries[i].1)
    }

    pub fn set(&mut self, name: &str, value: Mat) -> Result<()> {
        let slot = self.get_mut(name)?;
        if slot.shape() != value.shape() {
            return Err(Error::Shape(format!(
                "parameter `{name}` is {:?}, got {:?}",
                slot.shape(),
                value.shape()
            )));
        }
        *slot = value;
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mat)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, v)| v.len()).sum()
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Puts the parameter on the tape: a named leaf when trainable, a constant when frozen.
    pub fn leaf(&self, tape: &mut Tape, name: &str) -> Var {
        let value = self.get(name);
        if self.frozen {
            tape.constant(value.clone())
        } else {
            tape.param(&self.full_name(name), value)
        }
    }
}

/// Transformation applied to one parameter's gradient before the update.
pub trait GradHook: Send + Sync {
    fn apply(&self, grad: &Mat) -> Result<Mat>;
}

/// Right-multiplies the gradient by a fixed matrix (`∇W ← ∇W Π`).
#[derive(Debug, Clone)]
pub struct RightProjectHook {
    pub matrix: Mat,
}

impl GradHook for RightProjectHook {
    fn apply(&self, grad: &Mat) -> Result<Mat> {
        if grad.ncols() != self.matrix.nrows() {
            return Err(Error::Shape(format!(
                "gradient with {} columns against {}x{} projection",
                grad.ncols(),
                self.matrix.nrows(),
                self.matrix.ncols()
            )));
        }
        Ok(grad * &self.matrix)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityHook;

impl GradHook for IdentityHook {
    fn apply(&self, grad: &Mat) -> Result<Mat> {
        Ok(grad.clone())
    }
}

/// Hooks keyed by full (prefixed) parameter name.
#[derive(Default)]
pub struct HookSet {
    hooks: BTreeMap<String, Box<dyn GradHook>>,
}

impl HookSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, full_name: impl Into<String>, hook: Box<dyn GradHook>) {
        self.hooks.insert(full_name.into(), hook);
    }

    pub fn is_empty(&self) -> bool {
        self.hooks.is_empty()
    }

    pub fn len(&self) -> usize {
        self.hooks.len()
    }

    pub fn contains(&self, full_name: &str) -> bool {
        self.hooks.contains_key(full_name)
    }

    pub fn apply(&self, full_name: &str, grad: &Mat) -> Result<Mat> {
        match self.hooks.get(full_name) {
            Some(h) => h.apply(grad),
            None => Ok(grad.clone()),
        }
    }
}

/// One gradient-descent update of every parameter in `params` that has a
/// gradient, after its hook (if any) has been applied.
pub fn step(params: &mut ParamSet, grads: &Gradients, hooks: &HookSet, lr: f64) -> Result<()> {
    if !(lr > 0.0) {
        return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
    }
    let names: Vec<String> = params.iter().map(|(n, _)| n.to_string()).collect();
    for name in names {
        let full = params.full_name(&name);
        let Some(g) = grads.get(&full) else { continue };
        let g = hooks.apply(&full, g)?;
        let slot = params.get_mut(&name)?;
        if slot.shape() != g.shape() {
            return Err(Error::Shape(format!(
                "gradient for `{full}` is {:?}, parameter is {:?}",
                g.shape(),
                slot.shape()
            )));
        }
        *slot -= g * lr;
    }
    Ok(())
}

/// Linear warmup followed by cosine decay to zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CosineSchedule {
    pub peak: f64,
    pub total_steps: usize,
    pub warmup_ratio: f64,
}

impl CosineSchedule {
    pub fn warmup_steps(&self) -> usize {
        (self.warmup_ratio * self.total_steps as f64).ceil() as usize
    }

    /// Learning rate for the 0-based `step`.
    pub fn lr(&self, step: usize) -> f64 {
        let warm = self.warmup_steps();
        if step < warm {
            return self.peak * (step + 1) as f64 / warm as f64;
        }
        let span = self.total_steps.saturating_sub(warm).max(1) as f64;
        let progress = ((step - warm) as f64 / span).min(1.0);
        self.peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}
