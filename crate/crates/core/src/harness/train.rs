//! Full-batch gradient descent on toy tasks.

use crate::audio::{synth_signal, SignalKind};
use crate::ctc::{ctc_loss, greedy_decode};
use crate::fusion::WeightReport;
use crate::graph::Graph;
use crate::harness::config::{RunConfig, Task};
use crate::harness::data::{ctc_toy_dataset, Utterance, TOY_VOCAB};
use crate::harness::system::System;
use crate::harness::HarnessError;
use crate::nn::Linear;
use crate::rng::SplitMix;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct TrainReport {
    /// Mean loss before each update; the last entry is after the final update.
    pub losses: Vec<f64>,
    /// Share of utterances whose greedy decode equals the label (ctc-toy).
    pub exact_match: Option<f64>,
    pub weight_report: Option<WeightReport>,
}

impl TrainReport {
    pub fn initial_loss(&self) -> f64 {
        self.losses[0]
    }

    pub fn final_loss(&self) -> f64 {
        *self.losses.last().expect("at least one loss")
    }
}

enum Targets {
    Labels(Vec<Utterance>),
    Features(Vec<(crate::audio::AudioBuffer, Tensor)>),
}

fn regress_inputs(cfg: &RunConfig) -> Result<Vec<crate::audio::AudioBuffer>, HarnessError> {
    let rate = cfg.encoders[0].config.sample_rate;
    let kinds = [SignalKind::Chirp, SignalKind::Sine, SignalKind::Noise];
    (0..cfg.train.utterances)
        .map(|i| Ok(synth_signal(kinds[i % kinds.len()], cfg.train.duration_s, rate, cfg.seed.wrapping_add(i as u64))?))
        .collect()
}

/// Trains every parameter of the configured system plus a linear head.
///
/// `ctc-toy` maps the features to `TOY_VOCAB` log-probabilities under CTC.
/// `regress-toy` maps them back onto the untrained system's own output with
/// a mean squared error; its head starts at the identity. `on_step` sees
/// each recorded loss.
pub fn train_toy_with(cfg: &RunConfig, mut on_step: impl FnMut(usize, f64)) -> Result<TrainReport, HarnessError> {
    let mut sys = System::build(cfg)?;
    let dim = sys.dim();
    let mut rng = SplitMix::fork(cfg.seed, 0x4EAD);
    let (head, targets) = match cfg.task {
        Task::Dump => return Err(HarnessError::NotTrainable(Task::Dump)),
        Task::CtcToy => {
            let head = Linear::new(&mut sys.store, "head", dim, TOY_VOCAB, &mut rng);
            let rate = cfg.encoders[0].config.sample_rate;
            (head, Targets::Labels(ctc_toy_dataset(cfg.train.utterances, cfg.train.duration_s, rate, cfg.seed)?))
        }
        Task::RegressToy => {
            let data = regress_inputs(cfg)?
                .into_iter()
                .map(|a| {
                    let t = sys.features(&a)?;
                    Ok((a, t))
                })
                .collect::<Result<Vec<_>, HarnessError>>()?;
            let head = Linear::new(&mut sys.store, "head", dim, dim, &mut rng);
            let w = sys.store.get_mut(head.weight);
            for i in 0..dim {
                for j in 0..dim {
                    w.data_mut()[i * dim + j] = if i == j { 1.0 } else { 0.0 };
                }
            }
            (head, Targets::Features(data))
        }
    };
    let n = match &targets {
        Targets::Labels(d) => d.len(),
        Targets::Features(d) => d.len(),
    };

    // Returns the mean loss and, when `grads` is set, accumulates gradients.
    let evaluate = |sys: &System, grads: Option<&mut Vec<Tensor>>| -> Result<(f64, usize), HarnessError> {
        let mut total = 0.0;
        let mut correct = 0;
        let mut acc = grads;
        for i in 0..n {
            let mut g = Graph::new();
            let p = if acc.is_some() { sys.store.bind(&mut g) } else { sys.store.bind_frozen(&mut g) };
            let (audio, tgt) = match &targets {
                Targets::Labels(d) => (&d[i].audio, None),
                Targets::Features(d) => (&d[i].0, Some(&d[i].1)),
            };
            let feats = sys.forward(&mut g, &p, audio)?;
            let out = head.forward(&mut g, &p, feats)?;
            let loss = match (&targets, tgt) {
                (Targets::Labels(d), _) => {
                    let lp = g.log_softmax(out)?;
                    if greedy_decode(g.value(lp)) == d[i].labels {
                        correct += 1;
                    }
                    ctc_loss(&mut g, lp, &d[i].labels)?
                }
                (Targets::Features(_), Some(t)) => {
                    let t = g.constant(t.clone());
                    g.mse(out, t)?
                }
                _ => unreachable!("targets match their kind"),
            };
            total += g.value(loss).item();
            if let Some(acc) = acc.as_deref_mut() {
                g.backward(loss)?;
                for (a, gr) in acc.iter_mut().zip(sys.store.gradients(&g, &p)) {
                    a.add_scaled(&gr, 1.0 / n as f64);
                }
            }
        }
        Ok((total / n as f64, correct))
    };

    let stop = cfg.train.stop_ratio;
    let mut losses = Vec::with_capacity(cfg.train.steps + 1);
    for step in 0..=cfg.train.steps {
        let last = step == cfg.train.steps;
        let mut grads: Vec<Tensor> = sys.store.ids().map(|id| Tensor::zeros(sys.store.get(id).shape())).collect();
        let (loss, _) = evaluate(&sys, if last { None } else { Some(&mut grads) }).map_err(|e| {
            if e.is_non_finite() {
                HarnessError::Divergence { step, detail: e.to_string() }
            } else {
                e
            }
        })?;
        if !loss.is_finite() {
            return Err(HarnessError::Divergence { step, detail: format!("loss {loss}") });
        }
        losses.push(loss);
        on_step(step, loss);
        if last || stop.is_some_and(|r| loss < r * losses[0]) {
            break;
        }
        sys.store.descend(&grads, cfg.train.step_size);
    }

    let exact_match = match &targets {
        Targets::Labels(_) => Some(evaluate(&sys, None)?.1 as f64 / n as f64),
        Targets::Features(_) => None,
    };
    Ok(TrainReport { losses, exact_match, weight_report: sys.weight_report() })
}

pub fn train_toy(cfg: &RunConfig) -> Result<TrainReport, HarnessError> {
    train_toy_with(cfg, |_, _| {})
}
