use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::forward::{ImagePrefix, LayerCache};
use super::{axpy, dot, Checkpoint, Matrix, ModelConfig, NORM_EPS};
use crate::error::{Error, Result};
use crate::par;
use crate::scene::Scene;
use crate::vocab::TokenId;

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|x| (x - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

pub fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + z.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Which parameter blocks receive gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trainable {
    pub embeddings: bool,
    pub lm_head: bool,
}

impl Trainable {
    pub const ALL: Trainable = Trainable { embeddings: true, lm_head: true };
    pub const LM_HEAD: Trainable = Trainable { embeddings: false, lm_head: true };
}

#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub embeddings: Matrix,
    pub lm_head: Matrix,
    pub bias: Vec<f64>,
}

impl Grads {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        Self {
            embeddings: Matrix::zeros(cfg.vocab_size, cfg.hidden_dim),
            lm_head: Matrix::zeros(cfg.hidden_dim, cfg.vocab_size),
            bias: vec![0.0; cfg.vocab_size],
        }
    }

    pub fn add_scaled(&mut self, other: &Grads, scale: f64) {
        axpy(&mut self.embeddings.data, scale, &other.embeddings.data);
        axpy(&mut self.lm_head.data, scale, &other.lm_head.data);
        axpy(&mut self.bias, scale, &other.bias);
    }

    pub fn scale(&mut self, s: f64) {
        for x in self.embeddings.data.iter_mut().chain(&mut self.lm_head.data).chain(&mut self.bias) {
            *x *= s;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.embeddings.data.iter().chain(&self.lm_head.data).chain(&self.bias).all(|x| x.is_finite())
    }
}

/// A token of the sequence that is scored: `tokens[index]` predicted from the
/// state at `index - 1`, contributing `weight · (−log p)` to the loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TargetToken {
    pub index: usize,
    pub weight: f64,
}

#[derive(Debug, Clone)]
pub struct SequenceLoss {
    /// `Σ weight · (−log p)` over the targets.
    pub loss: f64,
    /// `log p` of each target, in target order.
    pub log_probs: Vec<f64>,
    pub grads: Grads,
}

/// Weighted NLL of selected tokens of `tokens`, continuing after `prefix`,
/// with reverse-mode gradients for the trainable blocks.
pub fn sequence_loss_grad(
    ckpt: &Checkpoint,
    prefix: &ImagePrefix,
    tokens: &[TokenId],
    targets: &[TargetToken],
    trainable: Trainable,
) -> Result<SequenceLoss> {
    ckpt.check_tokens(tokens)?;
    let last = match targets.iter().map(|t| t.index).max() {
        Some(i) => i,
        None => return Err(Error::DegenerateBatch("sequence has no target tokens".into())),
    };
    if last >= tokens.len() || targets.iter().any(|t| t.index == 0) {
        return Err(Error::DegenerateBatch("target index outside the predictable range".into()));
    }
    let inputs = &tokens[..last];
    let backbone = &ckpt.backbone;
    let head = &ckpt.head;
    let layers = ckpt.config.layers;

    let mut run = prefix.clone();
    let caches: Vec<Vec<LayerCache>> = inputs.iter().map(|&t| run.push_token(ckpt, t)).collect();

    let mut grads = Grads::zeros(&ckpt.config);
    let mut g_state: Vec<Vec<f64>> = vec![vec![0.0; ckpt.config.hidden_dim]; inputs.len()];
    let mut loss = 0.0;
    let mut log_probs = Vec::with_capacity(targets.len());
    for t in targets {
        let pos = t.index - 1;
        let hidden = &caches[pos][layers - 1].s;
        let z = head.logits(hidden);
        let lse = log_sum_exp(&z);
        let target = tokens[t.index];
        let lp = z[target] - lse;
        log_probs.push(lp);
        loss -= t.weight * lp;
        let mut gz: Vec<f64> = z.iter().map(|zi| t.weight * (zi - lse).exp()).collect();
        gz[target] -= t.weight;
        if trainable.lm_head {
            for (k, &h) in hidden.iter().enumerate() {
                axpy(grads.lm_head.row_mut(k), h, &gz);
            }
            axpy(&mut grads.bias, 1.0, &gz);
        }
        if trainable.embeddings {
            let back = head.lm_head.matvec(&gz);
            axpy(&mut g_state[pos], 1.0, &back);
        }
    }

    if trainable.embeddings {
        let phi = backbone.nonlinearity;
        for l in (0..layers).rev() {
            let a = &backbone.mixing[l];
            let gu: Vec<Vec<f64>> = g_state
                .iter()
                .zip(&caches)
                .map(|(gs, cache)| {
                    let c = &cache[l];
                    let ga: Vec<f64> = gs.iter().zip(&c.s).map(|(g, s)| g * phi.derivative_from_output(*s)).collect();
                    let gv = a.matvec_t(&ga);
                    let denom = c.unorm + NORM_EPS;
                    let mut gu: Vec<f64> = gv.iter().map(|g| g / denom).collect();
                    if c.unorm > 0.0 {
                        let coef = dot(&c.u, &gv) / (c.unorm * denom * denom);
                        axpy(&mut gu, -coef, &c.u);
                    }
                    gu
                })
                .collect();
            // x_j feeds u_j directly and every u_{j'} (j' >= j) through the running mean.
            let mut suffix = vec![0.0; ckpt.config.hidden_dim];
            for j in (0..inputs.len()).rev() {
                let pos = (prefix.count + j + 1) as f64;
                axpy(&mut suffix, 1.0 / pos, &gu[j]);
                let gx = &mut g_state[j];
                gx.copy_from_slice(&gu[j]);
                axpy(gx, 1.0, &suffix);
            }
        }
        for (j, &tok) in inputs.iter().enumerate() {
            axpy(grads.embeddings.row_mut(tok), 1.0, &g_state[j]);
        }
    }
    Ok(SequenceLoss { loss, log_probs, grads })
}

/// Supervised example: `target` is scored given the scene and `prompt`.
#[derive(Debug, Clone)]
pub struct Example {
    pub scene: Arc<Scene>,
    pub prompt: Vec<TokenId>,
    pub target: Vec<TokenId>,
}

impl Example {
    pub fn sequence(&self) -> (Vec<TokenId>, Vec<TargetToken>) {
        let tokens: Vec<TokenId> = self.prompt.iter().chain(&self.target).copied().collect();
        let targets = (self.prompt.len()..tokens.len()).map(|index| TargetToken { index, weight: 1.0 }).collect();
        (tokens, targets)
    }
}

/// Mean per-token NLL of the batch targets and its gradient. Blocks outside
/// `trainable` get exactly zero gradient.
pub fn loss_and_grads(batch: &[Example], ckpt: &Checkpoint, trainable: Trainable) -> Result<(f64, Grads)> {
    if batch.iter().any(|e| e.target.is_empty() || e.prompt.is_empty()) || batch.is_empty() {
        return Err(Error::DegenerateBatch("every example needs a prompt and a non-empty target".into()));
    }
    let parts = par::try_map(batch, |ex| {
        let prefix = ImagePrefix::for_scene(&ex.scene, ckpt)?;
        let (tokens, targets) = ex.sequence();
        sequence_loss_grad(ckpt, &prefix, &tokens, &targets, trainable)
    })?;
    let n_tokens: usize = batch.iter().map(|e| e.target.len()).sum();
    let mut grads = Grads::zeros(&ckpt.config);
    let mut loss = 0.0;
    for p in &parts {
        loss += p.loss;
        grads.add_scaled(&p.grads, 1.0);
    }
    let inv = 1.0 / n_tokens as f64;
    grads.scale(inv);
    Ok((loss * inv, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::forward;

    #[test]
    fn symmetric_two_way_softmax_gradient() {
        let z = [0.0, 0.0];
        let p = softmax(&z);
        let g: Vec<f64> = p.iter().enumerate().map(|(k, pk)| pk - if k == 0 { 1.0 } else { 0.0 }).collect();
        assert_eq!(g, vec![-0.5, 0.5]);
    }

    #[test]
    fn softmax_normalizes() {
        let p = softmax(&[1000.0, -3.0, 2.5, 0.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((log_sum_exp(&[0.0, 0.0]) - 2f64.ln()).abs() < 1e-15);
    }

    fn small() -> (Checkpoint, Arc<Scene>) {
        let mut cfg = ModelConfig::new(4, 3, 20, 7);
        cfg.visual_dim = 6;
        cfg.hidden_dim = 5;
        cfg.layers = 2;
        let c = Checkpoint::init(cfg).unwrap();
        let mut s = Scene::empty("g", 4, 3, 0.2);
        s.place(crate::scene::Placement { class: crate::vocab::ClassId(1), row: 0, col: 0, height: 2, width: 2 })
            .unwrap();
        (c, Arc::new(s))
    }

    #[test]
    fn lm_head_mask_zeroes_embedding_gradient() {
        let (c, s) = small();
        let ex = Example { scene: s, prompt: vec![7, 8], target: vec![15, 4, 0] };
        let (_, g) = loss_and_grads(std::slice::from_ref(&ex), &c, Trainable::LM_HEAD).unwrap();
        assert!(g.embeddings.data.iter().all(|&x| x == 0.0));
        assert!(g.lm_head.data.iter().any(|&x| x != 0.0));
        let (_, g) = loss_and_grads(&[ex], &c, Trainable::ALL).unwrap();
        assert!(g.embeddings.data.iter().any(|&x| x != 0.0));
    }

    #[test]
    fn empty_target_is_degenerate() {
        let (c, s) = small();
        let ex = Example { scene: s, prompt: vec![7], target: vec![] };
        assert!(matches!(loss_and_grads(&[ex], &c, Trainable::ALL), Err(Error::DegenerateBatch(_))));
    }

    #[test]
    fn loss_matches_forward_logits() {
        let (c, s) = small();
        let ex = Example { scene: s.clone(), prompt: vec![7, 8], target: vec![15, 4] };
        let (loss, _) = loss_and_grads(std::slice::from_ref(&ex), &c, Trainable::ALL).unwrap();
        let out = forward::forward(&s, &[7, 8, 15], &c).unwrap();
        let n = out.logits.len();
        let nll = |z: &[f64], t: usize| log_sum_exp(z) - z[t];
        let want = (nll(&out.logits[n - 2], 15) + nll(&out.logits[n - 1], 4)) / 2.0;
        assert!((loss - want).abs() < 1e-12);
    }
}
