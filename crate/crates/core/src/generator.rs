//! Task-specific cross-modal prompt generator.
//!
//! Default (`segment`) pipeline:
//!
//! 1. `hᵘ = f_u(u)`; masked mean pooling of `hᵘ` over `L_p` contiguous segments.
//! 2. `Q = LN(MHA(H̄, hᵘ, hᵘ))` with invalid instruction positions masked out.
//! 3. `hᵛ = f_v(w)`; `R = LN(Q + MHA(Q, hᵛ, hᵛ))`, dropout on `R` in training.
//! 4. `P = f_head(R)` with `f_head: H → 2H → d` and a GELU in between.
//!
//! `mean` pools one global masked mean for every query, `learnable` replaces
//! steps 1–2 with a trained query matrix, and `static` ignores the input and
//! returns a trained prompt.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{init_attention, init_layer_norm, init_linear, layer_norm, linear, multi_head_attention, AttentionMask};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::linalg::{gaussian, Mat};
use crate::optim::ParamSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GeneratorMode {
    Segment,
    Mean,
    Static,
    Learnable,
}

impl fmt::Display for GeneratorMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GeneratorMode::Segment => "segment",
            GeneratorMode::Mean => "mean",
            GeneratorMode::Static => "static",
            GeneratorMode::Learnable => "learnable",
        })
    }
}

impl FromStr for GeneratorMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "segment" => Ok(Self::Segment),
            "mean" => Ok(Self::Mean),
            "static" => Ok(Self::Static),
            "learnable" => Ok(Self::Learnable),
            other => Err(Error::Config(format!("unknown generator mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    /// Decoder width `d`.
    pub width: usize,
    /// Hidden width `H`.
    pub hidden: usize,
    pub heads: usize,
    /// Number of prompt vectors `L_p`.
    pub prompt_len: usize,
    pub dropout: f64,
    pub mode: GeneratorMode,
    /// When false, `R = Q` (no visual cross-attention).
    pub cross_attention: bool,
    pub ln_eps: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            width: 32,
            hidden: 32,
            heads: 4,
            prompt_len: 4,
            dropout: 0.1,
            mode: GeneratorMode::Segment,
            cross_attention: true,
            ln_eps: 1e-5,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.prompt_len == 0 {
            return Err(Error::Config("prompt_len must be at least 1".into()));
        }
        if self.heads == 0 || self.hidden < self.heads || self.hidden % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden width {} must be a positive multiple of {} heads",
                self.hidden, self.heads
            )));
        }
        if self.width == 0 {
            return Err(Error::Config("width must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Half-open index range of segment `p` when `len` positions are split into `parts`.
pub fn segment_bounds(len: usize, parts: usize, p: usize) -> (usize, usize) {
    (p * len / parts, (p + 1) * len / parts)
}

/// `L_p × s` matrix whose product with `hᵘ` gives the pooled queries `H̄`.
/// Each row averages its valid positions; a row with none stays zero.
pub fn pooling_matrix(valid: &[bool], prompt_len: usize, mode: GeneratorMode) -> Mat {
    let s = valid.len();
    let mut pool = Mat::zeros(prompt_len, s);
    for p in 0..prompt_len {
        let (lo, hi) = match mode {
            GeneratorMode::Mean => (0, s),
            _ => segment_bounds(s, prompt_len, p),
        };
        let count = (lo..hi).filter(|&j| valid[j]).count().max(1) as f64;
        for j in lo..hi {
            if valid[j] {
                pool[(p, j)] = 1.0 / count;
            }
        }
    }
    pool
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    cfg: GeneratorConfig,
    params: ParamSet,
}

/// Prompt node plus the head-averaged cross-attention weights (`L_p × m`).
pub struct GeneratorOutput {
    pub prompt: Var,
    pub cross_attention: Option<Mat>,
}

impl Generator {
    pub fn new(cfg: GeneratorConfig, seed: u64, prefix: &str) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new(prefix);
        let (d, h) = (cfg.width, cfg.hidden);
        match cfg.mode {
            GeneratorMode::Static => {
                ps.insert("static_prompt", gaussian(cfg.prompt_len, d, 1.0 / (d as f64).sqrt(), &mut rng))?;
            }
            mode => {
                if mode == GeneratorMode::Learnable {
                    ps.insert("learnable_queries", gaussian(cfg.prompt_len, h, 1.0, &mut rng))?;
                } else {
                    init_linear(&mut ps, "f_u", d, h, &mut rng)?;
                    init_attention(&mut ps, "query_attn", h, &mut rng)?;
                    init_layer_norm(&mut ps, "query_ln", h)?;
                }
                if cfg.cross_attention {
                    init_linear(&mut ps, "f_v", d, h, &mut rng)?;
                    init_attention(&mut ps, "cross_attn", h, &mut rng)?;
                    init_layer_norm(&mut ps, "cross_ln", h)?;
                }
                init_linear(&mut ps, "head1", h, 2 * h, &mut rng)?;
                init_linear(&mut ps, "head2", 2 * h, d, &mut rng)?;
            }
        }
        Ok(Self { cfg, params: ps })
    }

    pub fn from_params(cfg: GeneratorConfig, params: ParamSet) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg, params })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn freeze(&mut self) {
        self.params.freeze();
    }

    pub fn is_frozen(&self) -> bool {
        self.params.is_frozen()
    }

    /// Instruction-aware queries `Q` (`L_p × H`).
    pub fn init_queries(&self, tape: &mut Tape, u: Var, valid: &[bool]) -> Result<Var> {
        let s = tape.value(u).nrows();
        if s == 0 {
            return Err(Error::Degenerate("empty instruction sequence".into()));
        }
        if valid.len() != s {
            return Err(Error::Shape(format!("mask of length {} for {s} instruction rows", valid.len())));
        }
        if !valid.iter().any(|&v| v) {
            return Err(Error::Degenerate("no valid instruction position".into()));
        }
        let hu = linear(tape, &self.params, "f_u", u)?;
        let pool = tape.constant(pooling_matrix(valid, self.cfg.prompt_len, self.cfg.mode));
        let pooled = tape.matmul(pool, hu)?;
        let attn = multi_head_attention(
            tape,
            &self.params,
            "query_attn",
            pooled,
            hu,
            hu,
            self.cfg.heads,
            AttentionMask::KeyPadding(valid),
        )?;
        layer_norm(tape, &self.params, "query_ln", attn.out, self.cfg.ln_eps)
    }

    /// Vision-guided synthesis `P = f_head(dropout(LN(Q + MHA(Q, f_v(w), f_v(w)))))`.
    /// Dropout is active only when `dropout_rng` is given.
    pub fn synthesize(
        &self,
        tape: &mut Tape,
        queries: Var,
        w: Var,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<GeneratorOutput> {
        let q_shape = tape.value(queries).shape();
        if q_shape != (self.cfg.prompt_len, self.cfg.hidden) {
            return Err(Error::Shape(format!("queries {q_shape:?}")));
        }
        if tape.value(w).ncols() != self.cfg.width {
            return Err(Error::Shape(format!(
                "visual rows of width {} for generator width {}",
                tape.value(w).ncols(),
                self.cfg.width
            )));
        }
        let (mut r, weights) = if self.cfg.cross_attention {
            let hv = linear(tape, &self.params, "f_v", w)?;
            let attn = multi_head_attention(
                tape,
                &self.params,
                "cross_attn",
                queries,
                hv,
                hv,
                self.cfg.heads,
                AttentionMask::None,
            )?;
            let res = tape.add(queries, attn.out)?;
            (layer_norm(tape, &self.params, "cross_ln", res, self.cfg.ln_eps)?, Some(attn.weights))
        } else {
            (queries, None)
        };
        if let Some(rng) = dropout_rng {
            if self.cfg.dropout > 0.0 {
                let keep = 1.0 - self.cfg.dropout;
                let (rows, cols) = tape.value(r).shape();
                let mask = Mat::from_fn(rows, cols, |_, _| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 });
                r = tape.mul_const(r, mask)?;
            }
        }
        let h = linear(tape, &self.params, "head1", r)?;
        let h = tape.gelu(h);
        let prompt = linear(tape, &self.params, "head2", h)?;
        Ok(GeneratorOutput { prompt, cross_attention: weights })
    }

    /// `P = G(w, u)` according to the configured mode.
    pub fn generate(
        &self,
        tape: &mut Tape,
        w: Var,
        u: Var,
        valid: &[bool],
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<GeneratorOutput> {
        match self.cfg.mode {
            GeneratorMode::Static => {
                Ok(GeneratorOutput { prompt: self.params.leaf(tape, "static_prompt"), cross_attention: None })
            }
            GeneratorMode::Learnable => {
                let q = self.params.leaf(tape, "learnable_queries");
                self.synthesize(tape, q, w, dropout_rng)
            }
            GeneratorMode::Segment | GeneratorMode::Mean => {
                let q = self.init_queries(tape, u, valid)?;
                self.synthesize(tape, q, w, dropout_rng)
            }
        }
    }

    /// Inference-mode prompt (no dropout, no gradient tracking needed).
    pub fn prompt_for(&self, w: &Mat, u: &Mat, valid: &[bool]) -> Result<(Mat, Option<Mat>)> {
        let mut tape = Tape::new();
        let wv = tape.constant(w.clone());
        let uv = tape.constant(u.clone());
        let out = self.generate(&mut tape, wv, uv, valid, None)?;
        Ok((tape.value(out.prompt).clone(), out.cross_attention))
    }
}

impl crate::gradcheck::HasParams for Generator {
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
    use crate::gradcheck::{gradcheck, GradcheckOptions};

    fn cfg(mode: GeneratorMode) -> GeneratorConfig {
        GeneratorConfig { width: 6, hidden: 8, heads: 2, prompt_len: 3, mode, ..Default::default() }
    }

    fn inputs(seed: u64, s: usize) -> (Mat, Mat) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (gaussian(4, 6, 1.0, &mut rng), gaussian(s, 6, 1.0, &mut rng))
    }

    #[test]
    fn segment_pooling_averages_contiguous_halves() {
        let pool = pooling_matrix(&[true; 4], 2, GeneratorMode::Segment);
        let r = Mat::from_row_slice(4, 1, &[1.0, 3.0, 5.0, 9.0]);
        let pooled = pool * r;
        assert_eq!(pooled, Mat::from_row_slice(2, 1, &[2.0, 7.0]));
    }

    #[test]
    fn invalid_position_drops_out_of_its_segment() {
        let pool = pooling_matrix(&[true, false, true, true], 2, GeneratorMode::Segment);
        let r = Mat::from_row_slice(4, 1, &[1.0, 3.0, 5.0, 9.0]);
        assert_eq!((pool * r)[(0, 0)], 1.0);
    }

    #[test]
    fn empty_segment_pools_to_zero() {
        let pool = pooling_matrix(&[true; 3], 4, GeneratorMode::Segment);
        assert_eq!(segment_bounds(3, 4, 0), (0, 0));
        assert_eq!(pool.row(0).iter().copied().sum::<f64>(), 0.0);
        for p in 1..4 {
            assert_eq!(pool.row(p).iter().copied().sum::<f64>(), 1.0);
        }
    }

    #[test]
    fn mean_pooling_broadcasts_one_global_mean() {
        let pool = pooling_matrix(&[true, false, true], 3, GeneratorMode::Mean);
        for p in 0..3 {
            assert_eq!(pool.row(p).iter().copied().collect::<Vec<_>>(), vec![0.5, 0.0, 0.5]);
        }
    }

    #[test]
    fn all_invalid_mask_is_degenerate() {
        let g = Generator::new(cfg(GeneratorMode::Segment), 1, "g.").unwrap();
        let (w, u) = inputs(1, 4);
        assert!(matches!(g.prompt_for(&w, &u, &[false; 4]), Err(Error::Degenerate(_))));
        assert!(matches!(
            g.prompt_for(&w, &Mat::zeros(0, 6), &[]),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn output_shape_is_prompt_len_by_width() {
        for mode in [GeneratorMode::Segment, GeneratorMode::Mean, GeneratorMode::Static, GeneratorMode::Learnable] {
            let g = Generator::new(cfg(mode), 2, "g.").unwrap();
            let (w, u) = inputs(2, 5);
            let (p, _) = g.prompt_for(&w, &u, &[true, true, true, false, false]).unwrap();
            assert_eq!(p.shape(), (3, 6), "{mode}");
        }
    }

    #[test]
    fn cross_attention_rows_sum_to_one() {
        let g = Generator::new(cfg(GeneratorMode::Segment), 3, "g.").unwrap();
        let (w, u) = inputs(3, 5);
        let (_, attn) = g.prompt_for(&w, &u, &[true; 5]).unwrap();
        let attn = attn.unwrap();
        assert_eq!(attn.shape(), (3, 4));
        for r in attn.row_iter() {
            assert!((r.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn dropout_is_inert_at_inference() {
        let mut c = cfg(GeneratorMode::Segment);
        let g0 = Generator::new(c.clone(), 4, "g.").unwrap();
        c.dropout = 0.5;
        let g5 = Generator::new(c, 4, "g.").unwrap();
        let (w, u) = inputs(4, 5);
        assert_eq!(g0.prompt_for(&w, &u, &[true; 5]).unwrap().0, g5.prompt_for(&w, &u, &[true; 5]).unwrap().0);
    }

    #[test]
    fn static_mode_ignores_input() {
        let g = Generator::new(cfg(GeneratorMode::Static), 5, "g.").unwrap();
        let (w1, u1) = inputs(5, 4);
        let (w2, u2) = inputs(6, 4);
        assert_eq!(g.prompt_for(&w1, &u1, &[true; 4]).unwrap().0, g.prompt_for(&w2, &u2, &[true; 4]).unwrap().0);
    }

    #[test]
    fn segment_prompt_depends_on_image() {
        let g = Generator::new(cfg(GeneratorMode::Segment), 6, "g.").unwrap();
        let (w1, u) = inputs(7, 4);
        let (w2, _) = inputs(8, 4);
        let p1 = g.prompt_for(&w1, &u, &[true; 4]).unwrap().0;
        let p2 = g.prompt_for(&w2, &u, &[true; 4]).unwrap().0;
        assert!((p1 - p2).norm() > 0.0);
    }

    #[test]
    fn masked_rows_do_not_influence_prompt() {
        let g = Generator::new(cfg(GeneratorMode::Segment), 9, "g.").unwrap();
        let (w, mut u) = inputs(9, 5);
        let valid = [true, true, true, false, false];
        let before = g.prompt_for(&w, &u, &valid).unwrap().0;
        u.row_mut(3).fill(123.0);
        u.row_mut(4).fill(-7.0);
        assert_eq!(g.prompt_for(&w, &u, &valid).unwrap().0, before);
    }

    #[test]
    fn frozen_generator_rejects_updates() {
        let mut g = Generator::new(cfg(GeneratorMode::Segment), 1, "g.").unwrap();
        g.freeze();
        assert!(matches!(g.params_mut().get_mut("head1.weight"), Err(Error::Frozen(_))));
    }

    #[test]
    fn prompt_norm_gradients_match_finite_differences() {
        for mode in [GeneratorMode::Segment, GeneratorMode::Mean, GeneratorMode::Learnable, GeneratorMode::Static] {
            let mut g = Generator::new(cfg(mode), 10, "g.").unwrap();
            let (w, u) = inputs(10, 5);
            let valid = vec![true, true, false, true, false];
            let report = gradcheck(
                &mut g,
                |g, t| {
                    let wv = t.constant(w.clone());
                    let uv = t.constant(u.clone());
                    let out = g.generate(t, wv, uv, &valid, None)?;
                    Ok(t.sum_squares(out.prompt))
                },
                &GradcheckOptions::default(),
            )
            .unwrap();
            assert!(report.passed, "{mode}: {:?}", report.params);
        }
    }
}
