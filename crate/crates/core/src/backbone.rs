//! Frozen vision encoder, text embedder and single-block causal decoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{init_attention, multi_head_attention, AttentionMask};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::linalg::{argmax, gaussian, Mat};
use crate::optim::ParamSet;
use crate::stream::PAD;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    /// Raw visual feature width fed to the vision encoder.
    pub visual_dim: usize,
    /// Vision encoder output width (projector input).
    pub vision_dim: usize,
    /// Decoder model width `d`.
    pub width: usize,
    pub vocab: usize,
    pub max_len: usize,
    pub heads: usize,
    pub seed: u64,
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::Config(format!(
                "decoder width {} not divisible by {} heads",
                self.width, self.heads
            )));
        }
        if self.visual_dim == 0 || self.vision_dim == 0 || self.vocab < 2 || self.max_len == 0 {
            return Err(Error::Config("backbone dimensions must be positive".into()));
        }
        Ok(())
    }
}

/// Immutable backbone parameters. Nothing here is ever trained.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    cfg: BackboneConfig,
    /// `vision_dim × visual_dim`
    phi: Mat,
    token_embedding: Mat,
    position_embedding: Mat,
    /// Frozen `attn.*` and `readout` (`width × vocab`).
    decoder: ParamSet,
}

/// `z′ = [P; w; u]` on a tape, with the row offsets needed to read logits.
#[derive(Debug, Clone, Copy)]
pub struct MultimodalSequence {
    pub rows: Var,
    /// Rows before the instruction (`L_p + m`).
    pub prefix_len: usize,
    pub total_len: usize,
}

impl Backbone {
    pub fn new(cfg: BackboneConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let phi = gaussian(cfg.vision_dim, cfg.visual_dim, 1.0 / (cfg.visual_dim as f64).sqrt(), &mut rng);
        let token_embedding = gaussian(cfg.vocab, cfg.width, 1.0, &mut rng);
        let position_embedding = gaussian(cfg.max_len, cfg.width, 0.1, &mut rng);
        let mut decoder = ParamSet::new("backbone.");
        init_attention(&mut decoder, "attn", cfg.width, &mut rng)?;
        decoder.insert("readout", gaussian(cfg.width, cfg.vocab, 1.0 / (cfg.width as f64).sqrt(), &mut rng))?;
        decoder.freeze();
        Ok(Self { cfg, phi, token_embedding, position_embedding, decoder })
    }

    /// Same backbone with some decoder arrays replaced (used to build controlled decoders).
    pub fn with_decoder_overrides(&self, overrides: &[(&str, Mat)]) -> Result<Self> {
        let mut decoder = ParamSet::new("backbone.");
        for (name, value) in self.decoder.iter() {
            let v = overrides
                .iter()
                .find(|(n, _)| *n == name)
                .map(|(_, m)| m.clone())
                .unwrap_or_else(|| value.clone());
            if v.shape() != value.shape() {
                return Err(Error::Shape(format!("override for `{name}` has shape {:?}", v.shape())));
            }
            decoder.insert(name, v)?;
        }
        decoder.freeze();
        Ok(Self { decoder, ..self.clone() })
    }

    /// Rebuilds a backbone from stored arrays.
    pub fn from_parts(
        cfg: BackboneConfig,
        phi: Mat,
        token_embedding: Mat,
        position_embedding: Mat,
        mut decoder: ParamSet,
    ) -> Result<Self> {
        cfg.validate()?;
        let expect = [
            ("phi", phi.shape(), (cfg.vision_dim, cfg.visual_dim)),
            ("token_embedding", token_embedding.shape(), (cfg.vocab, cfg.width)),
            ("position_embedding", position_embedding.shape(), (cfg.max_len, cfg.width)),
        ];
        for (name, got, want) in expect {
            if got != want {
                return Err(Error::Shape(format!("{name} is {got:?}, expected {want:?}")));
            }
        }
        decoder.freeze();
        Ok(Self { cfg, phi, token_embedding, position_embedding, decoder })
    }

    pub fn phi(&self) -> &Mat {
        &self.phi
    }

    pub fn token_embedding(&self) -> &Mat {
        &self.token_embedding
    }

    pub fn position_embedding(&self) -> &Mat {
        &self.position_embedding
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    pub fn decoder_params(&self) -> &ParamSet {
        &self.decoder
    }

    /// `φ(v)`: a fixed linear map applied row-wise.
    pub fn encode_image(&self, visual: &Mat) -> Result<Mat> {
        if visual.ncols() != self.cfg.visual_dim {
            return Err(Error::Shape(format!(
                "visual width {} but encoder expects {}",
                visual.ncols(),
                self.cfg.visual_dim
            )));
        }
        Ok(visual * self.phi.transpose())
    }

    /// `ψ(q)`: token plus positional embedding for every position. The mask is
    /// not applied here; the generator and decoder handle validity downstream.
    pub fn embed_text(&self, tokens: &[usize]) -> Result<Mat> {
        if tokens.len() > self.cfg.max_len {
            return Err(Error::Shape(format!(
                "{} tokens exceed max_len {}",
                tokens.len(),
                self.cfg.max_len
            )));
        }
        let mut out = Mat::zeros(tokens.len(), self.cfg.width);
        for (i, &t) in tokens.iter().enumerate() {
            if t >= self.cfg.vocab {
                return Err(Error::Vocab { id: t, vocab: self.cfg.vocab });
            }
            out.set_row(i, &(self.token_embedding.row(t) + self.position_embedding.row(i)));
        }
        Ok(out)
    }

    pub fn assemble(&self, tape: &mut Tape, prompt: Option<Var>, w: Var, u: Var) -> Result<MultimodalSequence> {
        let mut parts = vec![];
        if let Some(p) = prompt {
            parts.push(p);
        }
        parts.push(w);
        parts.push(u);
        for &p in &parts {
            if tape.value(p).ncols() != self.cfg.width {
                return Err(Error::Shape(format!(
                    "sequence part of width {} for decoder width {}",
                    tape.value(p).ncols(),
                    self.cfg.width
                )));
            }
        }
        let prefix_len = parts[..parts.len() - 1].iter().map(|&p| tape.value(p).nrows()).sum();
        let rows = tape.concat_rows(&parts)?;
        let total_len = tape.value(rows).nrows();
        Ok(MultimodalSequence { rows, prefix_len, total_len })
    }

    /// Residual causal self-attention block output, one row per position.
    pub fn hidden_states(&self, tape: &mut Tape, seq: &MultimodalSequence) -> Result<Var> {
        let attn = multi_head_attention(
            tape,
            &self.decoder,
            "attn",
            seq.rows,
            seq.rows,
            seq.rows,
            self.cfg.heads,
            AttentionMask::Causal,
        )?;
        tape.add(seq.rows, attn.out)
    }

    /// Logits predicting answer tokens `0..len`, read at rows
    /// `prefix_len + answer_start - 1 + j`.
    pub fn answer_logits(
        &self,
        tape: &mut Tape,
        seq: &MultimodalSequence,
        answer_start: usize,
        len: usize,
    ) -> Result<Var> {
        if answer_start == 0 {
            return Err(Error::Shape("answer cannot start before the first instruction token".into()));
        }
        if len == 0 {
            return Err(Error::Shape("answer length must be at least 1".into()));
        }
        let h = self.hidden_states(tape, seq)?;
        let rows = tape.slice_rows(h, seq.prefix_len + answer_start - 1, len)?;
        let readout = self.decoder.leaf(tape, "readout");
        tape.matmul(rows, readout)
    }

    /// Mean negative log-likelihood of the answer under teacher forcing.
    pub fn nll_loss(
        &self,
        tape: &mut Tape,
        seq: &MultimodalSequence,
        answer_start: usize,
        answer: &[usize],
    ) -> Result<Var> {
        let logits = self.answer_logits(tape, seq, answer_start, answer.len())?;
        tape.cross_entropy(logits, answer)
    }

    /// Per-position negative log-likelihoods (diagnostics).
    pub fn position_losses(
        &self,
        prompt: Option<&Mat>,
        w: &Mat,
        tokens: &[usize],
        answer_start: usize,
        answer: &[usize],
    ) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let seq = self.constant_sequence(&mut tape, prompt, w, tokens)?;
        let logits = self.answer_logits(&mut tape, &seq, answer_start, answer.len())?;
        let l = tape.value(logits);
        Ok(answer
            .iter()
            .enumerate()
            .map(|(j, &a)| {
                let row = l.row(j);
                let max = row.max();
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                lse - l[(j, a)]
            })
            .collect())
    }

    fn constant_sequence(
        &self,
        tape: &mut Tape,
        prompt: Option<&Mat>,
        w: &Mat,
        tokens: &[usize],
    ) -> Result<MultimodalSequence> {
        let u = self.embed_text(tokens)?;
        let p = prompt.map(|p| tape.constant(p.clone()));
        let wv = tape.constant(w.clone());
        let uv = tape.constant(u);
        self.assemble(tape, p, wv, uv)
    }

    /// Greedy argmax decoding of `len` answer tokens. Answer slots not yet
    /// decoded hold padding; ties go to the smallest token id.
    pub fn greedy_decode(
        &self,
        prompt: Option<&Mat>,
        w: &Mat,
        tokens: &[usize],
        answer_start: usize,
        len: usize,
    ) -> Result<Vec<usize>> {
        if answer_start + len > tokens.len() {
            return Err(Error::Bounds { index: answer_start + len, len: tokens.len() });
        }
        let mut work = tokens.to_vec();
        for slot in &mut work[answer_start..answer_start + len] {
            *slot = PAD;
        }
        let mut out = Vec::with_capacity(len);
        for j in 0..len {
            let mut tape = Tape::new();
            let seq = self.constant_sequence(&mut tape, prompt, w, &work)?;
            let logits = self.answer_logits(&mut tape, &seq, answer_start, j + 1)?;
            let row = tape.value(logits).row(j).clone_owned();
            let next = argmax(row.iter().copied()).expect("vocab is non-empty");
            work[answer_start + j] = next;
            out.push(next);
        }
        Ok(out)
    }
}

pub fn exact_match(pred: &[usize], gold: &[usize]) -> u8 {
    u8::from(pred == gold)
}
