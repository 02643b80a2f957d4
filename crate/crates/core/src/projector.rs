//! The shared two-layer visual projector with input-statistics taps.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{init_linear, linear};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::optim::ParamSet;

/// Names of the projector's linear layers, in forward order.
pub const LAYERS: [&str; 2] = ["layer1", "layer2"];

/// Streaming `∑ ṽṽᵀ` over the rows a layer has seen.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTap {
    pub gram: Mat,
    pub count: usize,
}

impl LayerTap {
    pub fn new(dim: usize) -> Self {
        Self { gram: Mat::zeros(dim, dim), count: 0 }
    }

    pub fn observe(&mut self, rows: &Mat) {
        self.gram += rows.transpose() * rows;
        self.count += rows.nrows();
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Projector {
    params: ParamSet,
    taps: Vec<LayerTap>,
}

impl Projector {
    pub fn new(input_dim: usize, hidden_dim: usize, output_dim: usize, seed: u64) -> Result<Self> {
        if input_dim == 0 || hidden_dim == 0 || output_dim == 0 {
            return Err(Error::Config("projector dimensions must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new("projector.");
        init_linear(&mut params, LAYERS[0], input_dim, hidden_dim, &mut rng)?;
        init_linear(&mut params, LAYERS[1], hidden_dim, output_dim, &mut rng)?;
        Ok(Self { params, taps: vec![LayerTap::new(input_dim), LayerTap::new(hidden_dim)] })
    }

    pub fn from_params(params: ParamSet) -> Result<Self> {
        let mut taps = vec![];
        for l in LAYERS {
            let w = params
                .try_get(&format!("{l}.weight"))
                .ok_or_else(|| Error::Checkpoint(format!("projector is missing {l}.weight")))?;
            taps.push(LayerTap::new(w.ncols()));
        }
        Ok(Self { params, taps })
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn input_dim(&self) -> usize {
        self.params.get("layer1.weight").ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.params.get("layer2.weight").nrows()
    }

    pub fn layer_input_dims(&self) -> Vec<usize> {
        LAYERS.iter().map(|l| self.params.get(&format!("{l}.weight")).ncols()).collect()
    }

    /// `w = W₂ GELU(W₁ x + b₁) + b₂`, row-wise. With `collect`, each layer's
    /// input rows are added to its tap.
    pub fn project(&mut self, tape: &mut Tape, features: Var, collect: bool) -> Result<Var> {
        let x = tape.value(features);
        if x.ncols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "projector input width {} but layer1 expects {}",
                x.ncols(),
                self.input_dim()
            )));
        }
        if collect {
            self.taps[0].observe(x);
        }
        let h = linear(tape, &self.params, LAYERS[0], features)?;
        let h = tape.gelu(h);
        if collect {
            self.taps[1].observe(tape.value(h));
        }
        linear(tape, &self.params, LAYERS[1], h)
    }

    /// Forward pass without taps or tape.
    pub fn project_value(&self, features: &Mat) -> Result<Mat> {
        let mut tape = Tape::new();
        let x = tape.constant(features.clone());
        let mut me = self.clone();
        let out = me.project(&mut tape, x, false)?;
        Ok(tape.value(out).clone())
    }

    pub fn taps(&self) -> &[LayerTap] {
        &self.taps
    }

    /// Returns each layer's `(Gram sum, count)` and zeroes the taps.
    pub fn drain_taps(&mut self) -> Vec<(Mat, usize)> {
        self.taps
            .iter_mut()
            .map(|t| {
                let dim = t.gram.nrows();
                let old = std::mem::replace(t, LayerTap::new(dim));
                (old.gram, old.count)
            })
            .collect()
    }
}

impl crate::gradcheck::HasParams for Projector {
    fn param_sets(&self) -> Vec<&ParamSet> {
        vec![&self.params]
    }
    fn param_sets_mut(&mut self) -> Vec<&mut ParamSet> {
        vec![&mut self.params]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{gaussian, max_abs, sorted_symmetric_eigen};

    #[test]
    fn zero_input_and_biases_give_zero_output() {
        let p = Projector::new(3, 4, 5, 1).unwrap();
        assert_eq!(p.project_value(&Mat::zeros(2, 3)).unwrap(), Mat::zeros(2, 5));
    }

    #[test]
    fn taps_count_rows_only_when_collecting() {
        let mut p = Projector::new(3, 4, 5, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..3 {
            let mut tape = Tape::new();
            let x = tape.constant(gaussian(4, 3, 1.0, &mut rng));
            p.project(&mut tape, x, true).unwrap();
        }
        assert_eq!(p.taps()[0].count, 12);
        assert_eq!(p.taps()[1].count, 12);
        let before = p.taps().to_vec();
        let mut tape = Tape::new();
        let x = tape.constant(gaussian(4, 3, 1.0, &mut rng));
        p.project(&mut tape, x, false).unwrap();
        assert_eq!(p.taps(), &before[..]);
    }

    #[test]
    fn drain_returns_outer_products_and_resets() {
        let mut p = Projector::new(2, 2, 2, 1).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Mat::from_row_slice(1, 2, &[1.0, 0.0]));
        p.project(&mut tape, x, true).unwrap();
        let drained = p.drain_taps();
        assert_eq!(drained[0].0, Mat::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]));
        assert_eq!(drained[0].1, 1);
        let again = p.drain_taps();
        assert_eq!(again[0], (Mat::zeros(2, 2), 0));

        let mut tape = Tape::new();
        let x = tape.constant(Mat::identity(2, 2));
        p.project(&mut tape, x, true).unwrap();
        let drained = p.drain_taps();
        assert_eq!(drained[0], (Mat::identity(2, 2), 2));
    }

    #[test]
    fn drained_grams_are_symmetric_psd_with_matching_trace() {
        let mut p = Projector::new(5, 6, 4, 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut sq_norm = 0.0;
        let mut rows = 0;
        for _ in 0..5 {
            let x = gaussian(3, 5, 2.0, &mut rng);
            sq_norm += x.norm_squared();
            rows += 3;
            let mut tape = Tape::new();
            let xv = tape.constant(x);
            p.project(&mut tape, xv, true).unwrap();
        }
        for (g, n) in p.drain_taps() {
            assert!(max_abs(&(&g - g.transpose())) < 1e-12);
            let e = sorted_symmetric_eigen(&g);
            assert!(*e.values.last().unwrap() >= -1e-10);
            assert_eq!(n, rows);
        }
        // First layer sees the raw features.
        let mut p = Projector::new(5, 6, 4, 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..5 {
            let mut tape = Tape::new();
            let xv = tape.constant(gaussian(3, 5, 2.0, &mut rng));
            p.project(&mut tape, xv, true).unwrap();
        }
        let t = &p.taps()[0];
        assert!((t.gram.trace() / t.count as f64 - sq_norm / rows as f64).abs() < 1e-10);
    }
}
