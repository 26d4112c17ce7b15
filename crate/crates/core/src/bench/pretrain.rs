use serde::{Deserialize, Serialize};

use super::world::{Record, World};
use crate::error::{Error, Result};
use crate::model::System;
use crate::tensor::{AdamConfig, AdamState, Scope, Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    /// Full-batch Adam steps.
    pub epochs: usize,
    pub lr: f64,
    /// L2 penalty on the classifier weights (not the bias).
    pub weight_decay: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 100,
            lr: 0.05,
            weight_decay: 1e-3,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("pretrain lr must be positive, weight decay ≥ 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub channel: String,
    pub final_loss: f64,
    /// Accuracy against the (possibly corrupted) training labels.
    pub fit_accuracy: f64,
}

/// Fits the channel's classifier on the training split, with each example
/// labelled by the world's (possibly corrupted) label map. Deterministic.
pub fn pretrain_classifier(
    system: &mut System,
    channel: &str,
    world: &World,
    config: &PretrainConfig,
) -> Result<PretrainReport> {
    config.validate()?;
    let ch = system
        .channel(channel)
        .ok_or_else(|| Error::Config(format!("no channel `{channel}`")))?
        .clone();
    let records = &world.train;
    let mut x = Vec::with_capacity(records.len() * ch.feature_dim);
    let mut labels = Vec::with_capacity(records.len());
    for (i, r) in records.iter().enumerate() {
        let f = r
            .features
            .get(channel)
            .ok_or_else(|| Error::Dataset(format!("{} lacks `{channel}` features", r.id)))?;
        if f.len() != ch.feature_dim {
            return Err(Error::shape("pretrain features", &[ch.feature_dim], &[f.len()]));
        }
        x.extend_from_slice(f);
        labels.push(world.pretrain_label(channel, i)?);
    }
    let x = Tensor::new(vec![records.len(), ch.feature_dim], x)?;
    let mask = vec![true; labels.len()];

    // Only the classifier moves; everything else is frozen for the duration.
    let saved: Vec<bool> = system.store.iter().map(|(_, p)| p.trainable).collect();
    let ids: Vec<_> = system.store.iter().map(|(id, _)| id).collect();
    for &id in &ids {
        system.store.set_trainable(id, false);
    }
    system.store.set_trainable(ch.classifier_w, true);
    system.store.set_trainable(ch.classifier_b, true);
    let mut adam = AdamState::new(
        &system.store,
        AdamConfig {
            lr: config.lr,
            ..AdamConfig::default()
        },
    );
    let mut final_loss = f64::NAN;
    let result = (|| -> Result<()> {
        for _ in 0..config.epochs {
            system.store.zero_grad();
            let grads = {
                let tape = Tape::new();
                let scope = Scope::new(&tape, &system.store);
                let loss = scope
                    .constant(x.clone())
                    .matmul(scope.p(ch.classifier_w))?
                    .add_row(scope.p(ch.classifier_b))?
                    .softmax_cross_entropy(&labels, &mask)?;
                final_loss = loss.item();
                tape.backward(loss)?
            };
            grads.accumulate_into(&mut system.store);
            let w = system.store.get_mut(ch.classifier_w);
            let decay: Vec<f64> = w.value().iter().map(|v| config.weight_decay * v).collect();
            for (g, d) in w.grad.iter_mut().zip(decay) {
                *g += d;
            }
            adam.step(&mut system.store)?;
        }
        Ok(())
    })();
    for (&id, t) in ids.iter().zip(saved) {
        system.store.set_trainable(id, t);
    }
    system.store.zero_grad();
    result?;
    let mut hits = 0;
    for (r, &l) in records.iter().zip(&labels) {
        let p = ch.classify(&system.store, &r.features[channel])?;
        hits += (argmax(&p) == l) as usize;
    }
    Ok(PretrainReport {
        channel: channel.to_string(),
        final_loss,
        fit_accuracy: hits as f64 / records.len() as f64,
    })
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Top-1 accuracy of the channel's classifier against the true categories.
pub fn clean_accuracy(system: &System, channel: &str, records: &[Record]) -> Result<f64> {
    let ch = system
        .channel(channel)
        .ok_or_else(|| Error::Config(format!("no channel `{channel}`")))?;
    if records.is_empty() {
        return Err(Error::Dataset("no records to evaluate".into()));
    }
    let mut hits = 0;
    for r in records {
        let p = ch.classify(&system.store, &r.features[channel])?;
        hits += (argmax(&p) == r.latent[channel]) as usize;
    }
    Ok(hits as f64 / records.len() as f64)
}
