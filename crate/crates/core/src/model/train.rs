use std::borrow::Cow;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::forward::{score_quarter, spatial_encode, Binding, EdgeIndex};
use super::{focal_loss, init_params, Ablation, Dataset, TrainConfig};
use crate::autodiff::{
    adam_step, AdamConfig, AdamState, BatchNormState, DropoutKey, ParamStore, Tape, Tensor, Var,
};
use crate::error::{Error, Result};
use crate::eval::{auprc, SplitSpec};
use crate::panel::QuarterTag;

pub const CHECKPOINT_BN_MEAN: &str = "head.bn.running_mean";
pub const CHECKPOINT_BN_VAR: &str = "head.bn.running_var";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_auprc: f64,
}

/// Parameters at the best validation epoch plus everything needed to score with them.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub params: ParamStore,
    pub bn: BatchNormState,
    pub config: TrainConfig,
    pub split: SplitSpec,
    pub seed: u64,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_auprc: f64,
}

/// JSON sidecar of a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub seed: u64,
    pub ablation: Ablation,
    pub config: TrainConfig,
    pub split: SplitSpec,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_auprc: f64,
    pub epochs_run: usize,
}

impl TrainedModel {
    /// `ABLATION-seed-digest`, the digest being FNV-1a over the checkpoint JSON, so two
    /// models share an identifier only when their weights agree bit for bit.
    pub fn run_id(&self) -> Result<String> {
        let json = self.checkpoint()?.to_json()?;
        let digest = json.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
            (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
        });
        Ok(format!("{}-{}-{digest:016x}", self.config.ablation, self.seed))
    }

    /// Trainable parameters followed by the batchnorm running statistics.
    pub fn checkpoint(&self) -> Result<ParamStore> {
        let mut store = self.params.clone();
        store.insert(CHECKPOINT_BN_MEAN, Tensor::row(&self.bn.running_mean))?;
        store.insert(CHECKPOINT_BN_VAR, Tensor::row(&self.bn.running_var))?;
        Ok(store)
    }

    pub fn metadata(&self) -> RunMetadata {
        RunMetadata {
            seed: self.seed,
            ablation: self.config.ablation,
            config: self.config.clone(),
            split: self.split.clone(),
            log: self.log.clone(),
            best_epoch: self.best_epoch,
            best_val_auprc: self.best_val_auprc,
            epochs_run: self.log.len(),
        }
    }

    pub fn save(&self, checkpoint: &Path, metadata: &Path) -> Result<()> {
        self.checkpoint()?.save(checkpoint)?;
        std::fs::write(
            metadata,
            serde_json::to_string_pretty(&self.metadata())? + "\n",
        )?;
        Ok(())
    }

    pub fn load(checkpoint: &Path, metadata: &Path) -> Result<Self> {
        let missing = |p: &Path| Error::Data(format!("missing file {}", p.display()));
        if !checkpoint.exists() {
            return Err(missing(checkpoint));
        }
        if !metadata.exists() {
            return Err(missing(metadata));
        }
        let store = ParamStore::load(checkpoint)?;
        let meta: RunMetadata = serde_json::from_str(&std::fs::read_to_string(metadata)?)?;
        let mut params = ParamStore::default();
        let mut bn = BatchNormState::new(meta.config.dims.head_hidden);
        for (name, t) in store.iter() {
            match name {
                CHECKPOINT_BN_MEAN => bn.running_mean = t.data().to_vec(),
                CHECKPOINT_BN_VAR => bn.running_var = t.data().to_vec(),
                _ => {
                    params.insert(name, t.clone())?;
                }
            }
        }
        let expected = init_params(&meta.config.dims, meta.config.ablation, 0)?;
        for (name, t) in expected.iter() {
            match params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                _ => {
                    return Err(Error::Data(format!(
                        "checkpoint {} lacks parameter `{name}` with shape {:?}",
                        checkpoint.display(),
                        t.shape()
                    )))
                }
            }
        }
        Ok(Self {
            params,
            bn,
            config: meta.config,
            split: meta.split,
            seed: meta.seed,
            log: meta.log,
            best_epoch: meta.best_epoch,
            best_val_auprc: meta.best_val_auprc,
        })
    }
}

/// Quarters whose embeddings feed the scoring of quarter `t`.
/// Quarters whose snapshots feed the score of quarter `t`.
pub fn history_range(t: usize, cfg: &TrainConfig) -> std::ops::Range<usize> {
    if cfg.ablation.uses_lstm() {
        (t + 1).saturating_sub(cfg.history_window)..t + 1
    } else {
        t..t + 1
    }
}

fn effective_data(data: &Dataset, ablation: Ablation, seed: u64) -> Result<Cow<'_, Dataset>> {
    Ok(if ablation == Ablation::PermEdge {
        Cow::Owned(data.with_permuted_edges(seed)?)
    } else {
        Cow::Borrowed(data)
    })
}

/// Training-mode focal loss of target quarter `t`.
#[allow(clippy::too_many_arguments)]
pub fn quarter_loss(
    tape: &mut Tape,
    bind: &Binding,
    data: &Dataset,
    edge_index: &[EdgeIndex],
    cfg: &TrainConfig,
    t: usize,
    bn: &mut BatchNormState,
    key: DropoutKey,
) -> Result<Var> {
    let mut spatial: Vec<Option<Var>> = vec![None; t + 1];
    for tau in history_range(t, cfg) {
        let out = spatial_encode(
            tape,
            bind,
            &data.snapshots[tau],
            &edge_index[tau],
            &cfg.dims,
            cfg.ablation,
        )?;
        spatial[tau] = Some(out.h);
    }
    let fwd = score_quarter(
        tape,
        bind,
        data,
        &spatial,
        t,
        &cfg.dims,
        cfg.ablation,
        cfg.history_window,
        bn,
        true,
        cfg.dropout,
        key,
    )?;
    focal_loss(
        tape,
        fwd.r,
        &data.snapshots[t].labels,
        cfg.focal_gamma,
        cfg.focal_alpha,
    )
}

/// Fits the model by full-quarter gradient steps over the training quarters in
/// chronological order, with early stopping on pooled validation AUPRC. Returns the
/// parameters of the best validation epoch.
pub fn train(
    data: &Dataset,
    split: &SplitSpec,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainedModel> {
    cfg.validate()?;
    split.validate()?;
    if split.test.end > data.len() {
        return Err(Error::InvalidArgument(format!(
            "split covers {} quarters, dataset has {}",
            split.test.end,
            data.len()
        )));
    }
    if data.positives(split.val.clone()) == 0 {
        return Err(Error::Data(
            "validation quarters contain no distressed institutions; AUPRC is undefined".into(),
        ));
    }
    let data = effective_data(data, cfg.ablation, seed)?;
    let edge_index: Vec<EdgeIndex> = data
        .snapshots
        .iter()
        .map(|s| EdgeIndex::new(&s.edges))
        .collect();
    let adam_cfg = AdamConfig {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        ..AdamConfig::default()
    };
    let mut params = init_params(&cfg.dims, cfg.ablation, seed)?;
    let mut adam = AdamState::new(&params);
    let mut bn = BatchNormState::new(cfg.dims.head_hidden);
    let val_quarters: Vec<usize> = split.val.clone().collect();

    let mut best: Option<(usize, f64, ParamStore, BatchNormState)> = None;
    let mut log = Vec::new();
    let mut wait = 0;
    for epoch in 0..cfg.max_epochs {
        let started = Instant::now();
        let mut loss_sum = 0.0;
        for (step, t) in split.train.clone().enumerate() {
            let mut tape = Tape::new();
            let bind = Binding::bind(&mut tape, &params, true);
            let key = DropoutKey {
                seed,
                epoch: epoch as u64,
                step: step as u64,
                layer: 0,
            };
            let loss = quarter_loss(&mut tape, &bind, &data, &edge_index, cfg, t, &mut bn, key)?;
            loss_sum += tape.value(loss).item();
            let mut grads = tape.backward(loss)?;
            let g: Vec<Option<Tensor>> = bind.vars().iter().map(|&v| grads.take(v)).collect();
            adam_step(&mut params, &g, &mut adam, &adam_cfg).map_err(|e| {
                log::error!("seed {seed} epoch {epoch} quarter {t}: {e}");
                e
            })?;
        }
        let val = predict_on(&data, &edge_index, &params, &bn, cfg, &val_quarters)?;
        let (scores, labels) = val.pooled();
        let val_auprc = auprc(&scores, &labels)?;
        let train_loss = loss_sum / split.train.len() as f64;
        log::info!(
            "{} seed {seed} epoch {epoch}: loss {train_loss:.5} val AUPRC {val_auprc:.4} ({:.1}s)",
            cfg.ablation,
            started.elapsed().as_secs_f64()
        );
        log.push(EpochLog {
            epoch,
            train_loss,
            val_auprc,
        });
        if best.as_ref().map_or(true, |b| val_auprc > b.1) {
            best = Some((epoch, val_auprc, params.clone(), bn.clone()));
            wait = 0;
        } else {
            wait += 1;
            if wait >= cfg.patience {
                break;
            }
        }
    }
    let (best_epoch, best_val_auprc, params, bn) = best.expect("at least one epoch");
    Ok(TrainedModel {
        params,
        bn,
        config: cfg.clone(),
        split: split.clone(),
        seed,
        log,
        best_epoch,
        best_val_auprc,
    })
}

/// Score of one institution in one quarter.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeScore {
    pub cert: String,
    pub score: f64,
    pub label: bool,
    /// Temporal attention over history quarters, oldest first.
    pub beta: Option<Vec<f64>>,
    /// Quarter tags of the history positions, oldest first.
    pub history: Vec<QuarterTag>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuarterPrediction {
    pub index: usize,
    pub quarter: QuarterTag,
    pub nodes: Vec<NodeScore>,
    /// Spatial attention of both layers, aligned with `edge_src`/`edge_dst`.
    pub spatial_alpha: [Tensor; 2],
    pub edge_src: Vec<usize>,
    pub edge_dst: Vec<usize>,
    pub multiplier: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Prediction {
    /// [`TrainedModel::run_id`] of the producing model; empty for internal validation passes.
    pub run_id: String,
    pub quarters: Vec<QuarterPrediction>,
}

impl Prediction {
    /// All scores and labels, quarter by quarter in row order.
    pub fn pooled(&self) -> (Vec<f64>, Vec<bool>) {
        self.quarters
            .iter()
            .flat_map(|q| q.nodes.iter().map(|n| (n.score, n.label)))
            .unzip()
    }

    pub fn get(&self, cert: &str, quarter: QuarterTag) -> Option<&NodeScore> {
        self.quarters
            .iter()
            .find(|q| q.quarter == quarter)
            .and_then(|q| q.nodes.iter().find(|n| n.cert == cert))
    }
}

struct SpatialValues {
    h: Tensor,
    alpha: [Tensor; 2],
    multiplier: Option<f64>,
}

fn predict_on(
    data: &Dataset,
    edge_index: &[EdgeIndex],
    params: &ParamStore,
    bn: &BatchNormState,
    cfg: &TrainConfig,
    quarters: &[usize],
) -> Result<Prediction> {
    if let Some(&t) = quarters.iter().find(|&&t| t >= data.len()) {
        return Err(Error::InvalidArgument(format!(
            "quarter index {t} beyond {} snapshots",
            data.len()
        )));
    }
    let mut needed: Vec<usize> = quarters
        .iter()
        .flat_map(|&t| history_range(t, cfg))
        .collect();
    needed.sort_unstable();
    needed.dedup();
    let computed = crate::par::try_map(&needed, |&tau| -> Result<SpatialValues> {
        let mut tape = Tape::new();
        let bind = Binding::bind(&mut tape, params, false);
        let out = spatial_encode(
            &mut tape,
            &bind,
            &data.snapshots[tau],
            &edge_index[tau],
            &cfg.dims,
            cfg.ablation,
        )?;
        Ok(SpatialValues {
            h: tape.value(out.h).clone(),
            alpha: out.alpha.map(|a| tape.value(a).clone()),
            multiplier: out.multiplier.map(|m| tape.value(m).item()),
        })
    })?;
    let mut spatial: Vec<Option<SpatialValues>> = (0..data.len()).map(|_| None).collect();
    for (tau, v) in needed.into_iter().zip(computed) {
        spatial[tau] = Some(v);
    }
    let out = crate::par::try_map(quarters, |&t| -> Result<QuarterPrediction> {
        let mut tape = Tape::new();
        let bind = Binding::bind(&mut tape, params, false);
        let mut h: Vec<Option<Var>> = vec![None; t + 1];
        for tau in history_range(t, cfg) {
            let v = spatial[tau].as_ref().expect("computed above");
            h[tau] = Some(tape.constant(v.h.clone()));
        }
        let mut bn = bn.clone();
        let key = DropoutKey {
            seed: 0,
            epoch: 0,
            step: 0,
            layer: 0,
        };
        let fwd = score_quarter(
            &mut tape,
            &bind,
            data,
            &h,
            t,
            &cfg.dims,
            cfg.ablation,
            cfg.history_window,
            &mut bn,
            false,
            cfg.dropout,
            key,
        )?;
        let snap = &data.snapshots[t];
        let scores = tape.value(fwd.r).data();
        let nodes = (0..snap.n())
            .map(|i| NodeScore {
                cert: snap.certs[i].clone(),
                score: scores[i],
                label: snap.labels[i],
                beta: fwd.beta[i].clone(),
                history: (t + 1 - fwd.history_len[i]..=t)
                    .map(|tau| data.snapshots[tau].quarter)
                    .collect(),
            })
            .collect();
        let sv = spatial[t].as_ref().expect("computed above");
        Ok(QuarterPrediction {
            index: t,
            quarter: snap.quarter,
            nodes,
            spatial_alpha: sv.alpha.clone(),
            edge_src: edge_index[t].src.clone(),
            edge_dst: edge_index[t].dst.clone(),
            multiplier: sv.multiplier,
        })
    })?;
    Ok(Prediction { run_id: String::new(), quarters: out })
}

/// Scores every institution of each quarter in `quarters` in evaluation mode
/// (no dropout, batchnorm running statistics).
pub fn predict(model: &TrainedModel, data: &Dataset, quarters: &[usize]) -> Result<Prediction> {
    let data = effective_data(data, model.config.ablation, model.seed)?;
    let edge_index: Vec<EdgeIndex> = data
        .snapshots
        .iter()
        .map(|s| EdgeIndex::new(&s.edges))
        .collect();
    let mut p = predict_on(
        &data,
        &edge_index,
        &model.params,
        &model.bn,
        &model.config,
        quarters,
    )?;
    p.run_id = model.run_id()?;
    Ok(p)
}
