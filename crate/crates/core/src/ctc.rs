//! Connectionist temporal classification over `[T, V]` log-probabilities.
//!
//! Token 0 is the blank. The loss is `-ln sum_paths prod_t p_t(path_t)` over
//! all frame paths that collapse (merge repeats, then drop blanks) to the
//! target, computed with the forward-backward recursion in log space.

use crate::graph::{Graph, Var};
use crate::kernels::log_sum_exp;
use crate::tensor::{Tensor, TensorError};

pub const BLANK: usize = 0;

/// Largest problem [`ctc_brute_force`] will enumerate.
pub const BRUTE_FORCE_MAX_FRAMES: usize = 10;
pub const BRUTE_FORCE_MAX_VOCAB: usize = 5;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum CtcError {
    #[error("target of {tokens} tokens with {repeats} adjacent repeats needs more than {frames} frames")]
    InadmissibleTarget { tokens: usize, repeats: usize, frames: usize },
    #[error("target contains the blank token")]
    BlankInTarget,
    #[error("token {token} outside vocabulary of {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },
    #[error("brute force limited to T <= {BRUTE_FORCE_MAX_FRAMES}, V <= {BRUTE_FORCE_MAX_VOCAB}; got T={frames}, V={vocab}")]
    TooLarge { frames: usize, vocab: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Target token sequence, blank-free.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct LabelSeq(Vec<usize>);

impl LabelSeq {
    pub fn new(tokens: Vec<usize>) -> Result<Self, CtcError> {
        if tokens.contains(&BLANK) {
            return Err(CtcError::BlankInTarget);
        }
        Ok(Self(tokens))
    }

    pub fn tokens(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Adjacent equal tokens; each needs a blank frame between them.
    pub fn repeats(&self) -> usize {
        self.0.windows(2).filter(|w| w[0] == w[1]).count()
    }

    /// Minimum frame count for at least one valid alignment.
    pub fn min_frames(&self) -> usize {
        self.len() + self.repeats()
    }

    pub fn admissible(&self, frames: usize) -> bool {
        self.min_frames() <= frames
    }
}

/// Merge repeats, then drop blanks.
pub fn collapse(path: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &p in path {
        if Some(p) != prev && p != BLANK {
            out.push(p);
        }
        prev = Some(p);
    }
    out
}

fn dims(log_probs: &Tensor, target: &LabelSeq) -> Result<(usize, usize), CtcError> {
    let (t, v) = log_probs.dims2().ok_or_else(|| TensorError::ShapeMismatch {
        op: "ctc",
        detail: format!("expected [T, V], got {:?}", log_probs.shape()),
    })?;
    if let Some(&token) = target.tokens().iter().find(|&&x| x >= v) {
        return Err(CtcError::TokenOutOfRange { token, vocab: v });
    }
    Ok((t, v))
}

/// Loss and its gradient with respect to `log_probs`. Inadmissible targets
/// give `+inf` and a zero gradient.
pub fn ctc_forward_backward(log_probs: &Tensor, target: &LabelSeq) -> Result<(f64, Tensor), CtcError> {
    let (frames, vocab) = dims(log_probs, target)?;
    let mut grad = Tensor::zeros(&[frames, vocab]);
    if frames == 0 || !target.admissible(frames) {
        return Ok((f64::INFINITY, grad));
    }
    let lp = |t: usize, k: usize| log_probs.data()[t * vocab + k];
    // blank-interleaved target
    let ext: Vec<usize> = std::iter::once(BLANK)
        .chain(target.tokens().iter().flat_map(|&k| [k, BLANK]))
        .collect();
    let s_len = ext.len();
    let skip = |s: usize| s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2];
    let neg = f64::NEG_INFINITY;

    let mut alpha = vec![neg; frames * s_len];
    alpha[0] = lp(0, ext[0]);
    if s_len > 1 {
        alpha[1] = lp(0, ext[1]);
    }
    for t in 1..frames {
        for s in 0..s_len {
            let prev = &alpha[(t - 1) * s_len..t * s_len];
            let mut terms = [prev[s], neg, neg];
            if s >= 1 {
                terms[1] = prev[s - 1];
            }
            if skip(s) {
                terms[2] = prev[s - 2];
            }
            alpha[t * s_len + s] = log_sum_exp(&terms) + lp(t, ext[s]);
        }
    }

    let mut beta = vec![neg; frames * s_len];
    let last = frames - 1;
    beta[last * s_len + s_len - 1] = lp(last, ext[s_len - 1]);
    if s_len > 1 {
        beta[last * s_len + s_len - 2] = lp(last, ext[s_len - 2]);
    }
    for t in (0..last).rev() {
        for s in 0..s_len {
            let next = &beta[(t + 1) * s_len..(t + 2) * s_len];
            let mut terms = [next[s], neg, neg];
            if s + 1 < s_len {
                terms[1] = next[s + 1];
            }
            if s + 2 < s_len && skip(s + 2) {
                terms[2] = next[s + 2];
            }
            beta[t * s_len + s] = log_sum_exp(&terms) + lp(t, ext[s]);
        }
    }

    let tail = &alpha[last * s_len..];
    let log_p = if s_len > 1 { log_sum_exp(&tail[s_len - 2..]) } else { tail[0] };
    if log_p == neg {
        return Ok((f64::INFINITY, grad));
    }
    for t in 0..frames {
        for s in 0..s_len {
            let a = alpha[t * s_len + s];
            let b = beta[t * s_len + s];
            if a == neg || b == neg {
                continue;
            }
            let occupancy = (a + b - lp(t, ext[s]) - log_p).exp();
            grad.data_mut()[t * vocab + ext[s]] -= occupancy;
        }
    }
    Ok((-log_p, grad))
}

/// Differentiable CTC loss node.
pub fn ctc_loss(g: &mut Graph, log_probs: Var, target: &LabelSeq) -> Result<Var, CtcError> {
    let frames = g.shape(log_probs).first().copied().unwrap_or(0);
    if !target.admissible(frames) {
        return Err(CtcError::InadmissibleTarget { tokens: target.len(), repeats: target.repeats(), frames });
    }
    let (loss, grad) = ctc_forward_backward(g.value(log_probs), target)?;
    Ok(g.custom_loss(log_probs, loss, grad)?)
}

/// Loss value only; `+inf` when no alignment exists.
pub fn ctc_loss_value(log_probs: &Tensor, target: &LabelSeq) -> Result<f64, CtcError> {
    Ok(ctc_forward_backward(log_probs, target)?.0)
}

/// Exhaustive reference: enumerates all `V^T` frame paths.
pub fn ctc_brute_force(log_probs: &Tensor, target: &LabelSeq) -> Result<f64, CtcError> {
    let (frames, vocab) = dims(log_probs, target)?;
    if frames > BRUTE_FORCE_MAX_FRAMES || vocab > BRUTE_FORCE_MAX_VOCAB {
        return Err(CtcError::TooLarge { frames, vocab });
    }
    let total = vocab.pow(frames as u32);
    let mut path = vec![0usize; frames];
    let mut matching = Vec::new();
    for mut code in 0..total {
        for p in path.iter_mut() {
            *p = code % vocab;
            code /= vocab;
        }
        if collapse(&path) == target.tokens() {
            matching.push(path.iter().enumerate().map(|(t, &k)| log_probs.at(t, k)).sum::<f64>());
        }
    }
    Ok(-log_sum_exp(&matching))
}

/// Per-frame argmax (ties to the lower id), then collapse.
pub fn greedy_decode(log_probs: &Tensor) -> LabelSeq {
    let Some((frames, vocab)) = log_probs.dims2() else {
        return LabelSeq::default();
    };
    let best: Vec<usize> = (0..frames)
        .map(|t| {
            let row = &log_probs.data()[t * vocab..(t + 1) * vocab];
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect();
    LabelSeq(collapse(&best))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ln_rows(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.iter().map(|p| p.ln()).collect()).collect::<Vec<_>>())
    }

    fn seq(t: &[usize]) -> LabelSeq {
        LabelSeq::new(t.to_vec()).unwrap()
    }

    #[test]
    fn single_frame() {
        let lp = ln_rows(&[vec![0.25, 0.75]]);
        let expected = -(0.75f64.ln());
        assert!((ctc_loss_value(&lp, &seq(&[1])).unwrap() - expected).abs() < 1e-15);
        assert!((ctc_brute_force(&lp, &seq(&[1])).unwrap() - expected).abs() < 1e-15);
    }

    #[test]
    fn two_frames_three_paths() {
        // paths _1, 1_, 11 at 0.25 each
        let lp = ln_rows(&[vec![0.5, 0.5], vec![0.5, 0.5]]);
        let expected = -(0.75f64.ln());
        assert!((ctc_loss_value(&lp, &seq(&[1])).unwrap() - expected).abs() < 1e-15);
        assert!((ctc_brute_force(&lp, &seq(&[1])).unwrap() - expected).abs() < 1e-15);
    }

    #[test]
    fn empty_target_is_all_blank_path() {
        let lp = ln_rows(&[vec![0.9, 0.1], vec![0.8, 0.2], vec![0.7, 0.3]]);
        let expected = -(0.9f64.ln() + 0.8f64.ln() + 0.7f64.ln());
        let empty = LabelSeq::default();
        assert!((ctc_loss_value(&lp, &empty).unwrap() - expected).abs() < 1e-14);
        assert!((ctc_brute_force(&lp, &empty).unwrap() - expected).abs() < 1e-14);
    }

    #[test]
    fn inadmissible_is_infinite() {
        let lp = ln_rows(&[vec![0.5, 0.5], vec![0.5, 0.5]]);
        let t = seq(&[1, 1]);
        assert!(!t.admissible(2));
        assert_eq!(ctc_loss_value(&lp, &t).unwrap(), f64::INFINITY);
        assert_eq!(ctc_brute_force(&lp, &t).unwrap(), f64::INFINITY);
        let long = seq(&[1, 1, 1]);
        assert_eq!(ctc_brute_force(&lp, &long).unwrap(), f64::INFINITY);
        let mut g = Graph::new();
        let x = g.leaf(lp);
        assert!(matches!(ctc_loss(&mut g, x, &t), Err(CtcError::InadmissibleTarget { .. })));
    }

    #[test]
    fn blank_rejected_in_target() {
        assert_eq!(LabelSeq::new(vec![1, 0]), Err(CtcError::BlankInTarget));
    }

    #[test]
    fn brute_force_size_limit() {
        let lp = Tensor::zeros(&[11, 2]);
        assert!(matches!(ctc_brute_force(&lp, &seq(&[1])), Err(CtcError::TooLarge { .. })));
    }

    #[test]
    fn greedy_cases() {
        let onehot = |ids: &[usize]| {
            Tensor::from_rows(
                &ids.iter().map(|&i| (0..3).map(|k| if k == i { 0.0 } else { -5.0 }).collect()).collect::<Vec<_>>(),
            )
        };
        assert_eq!(greedy_decode(&onehot(&[1, 1, 0, 2])).tokens(), &[1, 2]);
        assert!(greedy_decode(&onehot(&[0, 0, 0])).is_empty());
        assert_eq!(greedy_decode(&onehot(&[1, 0, 1])).tokens(), &[1, 1]);
        // tie goes to the lower id
        assert_eq!(greedy_decode(&Tensor::from_rows(&[vec![-1.0, -0.5, -0.5]])).tokens(), &[1]);
    }
}
