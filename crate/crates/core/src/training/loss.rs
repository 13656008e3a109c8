use serde::{Deserialize, Serialize};

use super::{Targets, TrainError};
use crate::networks::{build_causal_mask, NetworkBundle, Segment};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub value: f64,
    pub reward: f64,
    pub policy: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            value: 0.25,
            reward: 1.0,
            policy: 1.0,
        }
    }
}

/// One unroll: the starting observation and its targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub observation: Vec<f64>,
    pub targets: Targets,
}

/// Loss terms as tape scalars.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub value: Var,
    pub reward: Var,
    pub policy: Var,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub value_loss: f64,
    pub reward_loss: f64,
    pub policy_loss: f64,
    /// Global gradient norm before clipping; 0 when no gradient was taken.
    pub grad_norm: f64,
}

/// Builds the unrolled loss on `tape`. Every sample is one causal segment
/// `[root, a_t, .., a_{t+K-1}]`, so the whole batch is a single dynamics
/// pass. Each term is averaged over samples and unroll positions.
pub fn unrolled_loss_on(
    net: &NetworkBundle,
    tape: &mut Tape,
    batch: &[Sample],
    weights: &LossWeights,
) -> Result<LossTerms, TrainError> {
    let first = batch
        .first()
        .ok_or_else(|| TrainError::Config("empty training batch".into()))?;
    let k = first.targets.actions.len();
    if k == 0 {
        return Err(TrainError::Config(
            "unroll length must be at least 1".into(),
        ));
    }
    if let Some(bad) = batch.iter().find(|s| s.targets.actions.len() != k) {
        return Err(TrainError::Config(format!(
            "mixed unroll lengths {k} and {}",
            bad.targets.actions.len()
        )));
    }
    let b = batch.len();
    let rows = k + 1;

    let obs = Tensor::from_rows(
        &batch
            .iter()
            .map(|s| s.observation.clone())
            .collect::<Vec<_>>(),
    )?;
    let obs = tape.input(obs);
    let roots = net.represent_on(tape, obs)?;
    let actions: Vec<usize> = batch
        .iter()
        .flat_map(|s| s.targets.actions.iter().copied())
        .collect();
    let depths: Vec<usize> = (0..b).flat_map(|_| 1..=k).collect();
    let tokens = net.action_tokens_on(tape, &actions, &depths)?;

    // Interleave so each sample's root precedes its own tokens.
    let all = tape.concat_rows(&[roots, tokens])?;
    let order: Vec<usize> = (0..b)
        .flat_map(|i| std::iter::once(i).chain((0..k).map(move |j| b + i * k + j)))
        .collect();
    let x = tape.gather_rows(all, &order)?;
    let mask = build_causal_mask(rows)?;
    let segments: Vec<Segment> = (0..b)
        .map(|i| Segment {
            start: i * rows,
            mask: mask.clone(),
        })
        .collect();
    let latents = net.dynamics_on(tape, x, &segments)?;
    let heads = net.predict_on(tape, latents)?;

    let scale = 1.0 / (b * rows) as f64;
    let mut value_t = Vec::with_capacity(b * rows);
    let mut reward_t = Vec::with_capacity(b * rows);
    let mut reward_w = Vec::with_capacity(b * rows);
    let mut policy_t = Vec::with_capacity(b * rows);
    let mut policy_w = Vec::with_capacity(b * rows);
    for s in batch {
        let t = &s.targets;
        value_t.extend_from_slice(&t.values);
        reward_t.extend_from_slice(&t.rewards);
        reward_w.extend(t.reward_mask.iter().map(|m| m * scale));
        policy_w.extend(t.policy_mask.iter().map(|m| m * scale));
        for p in &t.policies {
            policy_t.push(p.clone());
        }
    }
    let n = b * rows;
    let value = tape.mse(
        heads.value,
        Tensor::new(vec![n, 1], value_t)?,
        &vec![scale; n],
    )?;
    let reward = tape.mse(heads.reward, Tensor::new(vec![n, 1], reward_t)?, &reward_w)?;
    let policy = tape.soft_cross_entropy(heads.logits, Tensor::from_rows(&policy_t)?, &policy_w)?;

    let wv = tape.scale(value, weights.value);
    let wr = tape.scale(reward, weights.reward);
    let wp = tape.scale(policy, weights.policy);
    let total = tape.add(wv, wr)?;
    let total = tape.add(total, wp)?;
    Ok(LossTerms {
        total,
        value,
        reward,
        policy,
    })
}

/// Loss report and per-parameter gradients for one batch.
pub fn unrolled_loss(
    net: &NetworkBundle,
    batch: &[Sample],
    weights: &LossWeights,
) -> Result<(LossReport, Vec<Tensor>), TrainError> {
    let mut tape = Tape::new();
    let terms = unrolled_loss_on(net, &mut tape, batch, weights)?;
    let scalar = |v: Var| tape.value(v).data()[0];
    let mut report = LossReport {
        total: scalar(terms.total),
        value_loss: scalar(terms.value),
        reward_loss: scalar(terms.reward),
        policy_loss: scalar(terms.policy),
        grad_norm: 0.0,
    };
    if !report.total.is_finite() {
        return Err(TrainError::NonFinite(format!(
            "loss total={} value={} reward={} policy={} over {} samples",
            report.total,
            report.value_loss,
            report.reward_loss,
            report.policy_loss,
            batch.len()
        )));
    }
    let grads = tape.backward(terms.total)?;
    let grads = tape.param_gradients(&grads, net.params());
    report.grad_norm = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    Ok((report, grads))
}
