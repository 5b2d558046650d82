//! Window corpus assembly and the minibatch training loop.
//!
//! A [`Corpus`] bundles the scaled series, exogenous codes, window plan and
//! the normalized adjacencies so that training, prediction and the baselines
//! all draw windows from the same place. The loss per window is the Huber
//! loss summed over steps, stations and channels; batches average it.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::graphs::{GraphKind, GraphMask, GraphSet};
use crate::matrix::Matrix;
use crate::mgc::normalize_adjacency;
use crate::model::{MgcRnn, WindowInput};
use crate::optim::{adam_step, decayed_lr, AdamState};
use crate::pipeline::{make_windows, PreparedSeries, WindowPlan};
use crate::tape::Tape;

/// Recent-flow features look back this many slots, which bounds the first
/// slot that can carry a recent-flow graph.
pub const RECENT_LOOKBACK: usize = 10;

/// Symmetrically renormalized adjacencies for the active graphs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NormalizedGraphs {
    pub mask: GraphMask,
    statics: Vec<(usize, Matrix)>,
    recent: alloc::collections::BTreeMap<usize, Matrix>,
}

impl NormalizedGraphs {
    /// Normalizes every graph the mask activates out of a built set.
    pub fn from_set(set: &GraphSet, mask: GraphMask) -> Result<Self> {
        let mut statics = Vec::new();
        for kind in mask.kinds() {
            if kind == GraphKind::RecentFlow {
                continue;
            }
            let raw = set.static_graph(kind).ok_or_else(|| {
                CoreError::Config(format!("graph set is missing the {} graph", kind.tag()))
            })?;
            statics.push((kind.index(), normalize_adjacency(raw)?));
        }
        let mut recent = alloc::collections::BTreeMap::new();
        if mask.contains(GraphKind::RecentFlow) {
            for (&slot, raw) in &set.recent {
                recent.insert(slot, normalize_adjacency(raw)?);
            }
        }
        Ok(NormalizedGraphs { mask, statics, recent })
    }

    pub fn static_graph(&self, kind: GraphKind) -> Option<&Matrix> {
        self.statics.iter().find(|(i, _)| *i == kind.index()).map(|(_, m)| m)
    }

    pub fn recent_at(&self, slot: usize) -> Option<&Matrix> {
        self.recent.get(&slot)
    }

    /// Adjacencies for one input slot, in mask order.
    fn step_adjacencies(&self, slot: usize) -> Result<Vec<&Matrix>> {
        self.mask
            .kinds()
            .into_iter()
            .map(|kind| {
                if kind == GraphKind::RecentFlow {
                    self.recent.get(&slot).ok_or_else(|| {
                        CoreError::Contract(format!("no recent-flow graph built for slot {slot}"))
                    })
                } else {
                    Ok(self.static_graph(kind).expect("static graphs normalized at construction"))
                }
            })
            .collect()
    }
}

/// Everything a model run needs: preprocessed series, per-slot exogenous
/// codes, normalized graphs, and the train/test window anchors.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub prep: PreparedSeries,
    pub exo: Vec<(u8, bool)>,
    pub graphs: NormalizedGraphs,
    pub plan: WindowPlan,
}

impl Corpus {
    pub fn assemble(
        prep: PreparedSeries,
        exo: Vec<(u8, bool)>,
        graphs: NormalizedGraphs,
        l: usize,
        p: usize,
        split_slot: usize,
    ) -> Result<Self> {
        let total = prep.last_slot_exclusive();
        if exo.len() < total {
            return Err(CoreError::Contract(format!(
                "exogenous codes cover {} slots, series ends at {total}",
                exo.len()
            )));
        }
        let min_input =
            if graphs.mask.contains(GraphKind::RecentFlow) { RECENT_LOOKBACK } else { 0 };
        let plan = make_windows(prep.first_slot(), total, l, p, split_slot, min_input)?;
        Ok(Corpus { prep, exo, graphs, plan })
    }

    pub fn stations(&self) -> usize {
        self.prep.scaled.stations()
    }

    /// Materializes the forward input of one window anchor.
    pub fn window_input(&self, anchor: usize) -> Result<WindowInput<'_>> {
        let (l, p) = (self.plan.l, self.plan.p);
        let mut steps = Vec::with_capacity(l);
        let mut step_graphs = Vec::with_capacity(l);
        for slot in (anchor - l)..anchor {
            steps.push(self.prep.scaled.slot_matrix(slot - self.prep.offset));
            step_graphs.push(self.graphs.step_adjacencies(slot)?);
        }
        let exo = (anchor..anchor + p).map(|s| self.exo[s]).collect();
        Ok(WindowInput { steps, step_graphs, exo })
    }

    /// Scaled target row (1 x N*S) for step `k` of a window.
    pub fn target_row(&self, anchor: usize, k: usize) -> Matrix {
        self.prep.scaled.slot_row(anchor + k - self.prep.offset)
    }

    /// Flattened scaled input of a window, oldest slot first (for the
    /// linear baselines).
    pub fn flat_input(&self, anchor: usize) -> Vec<f64> {
        let l = self.plan.l;
        let mut out = Vec::with_capacity(l * self.stations() * crate::pipeline::CHANNELS);
        for slot in (anchor - l)..anchor {
            out.extend_from_slice(self.prep.scaled.slot_row(slot - self.prep.offset).data());
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub decay: f64,
    pub huber_delta: f64,
    pub seed: u64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            epochs: 50,
            batch_size: 16,
            lr0: 0.002,
            decay: 0.002,
            huber_delta: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean per-window loss (Huber summed over steps/stations/channels).
    pub loss: f64,
    /// Learning rate used for the last update of the epoch.
    pub lr: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub history: Vec<EpochLog>,
    pub iterations: u64,
    /// Set when training aborted on a non-finite loss or gradient; the
    /// model was restored to the end of the last completed epoch.
    pub aborted: Option<String>,
}

/// Trains in place. Windows are shuffled deterministically per epoch; the
/// batch gradient is the mean of the per-window gradients, reduced in batch
/// order.
pub fn train(
    model: &mut MgcRnn,
    corpus: &Corpus,
    settings: &TrainSettings,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainReport> {
    if model.cfg.graph_mask != corpus.graphs.mask {
        return Err(CoreError::Config(
            "model graph mask differs from the corpus graph mask".into(),
        ));
    }
    if model.cfg.input_len != corpus.plan.l || model.cfg.horizon != corpus.plan.p {
        return Err(CoreError::Config(format!(
            "model expects l={}, p={} but corpus windows are l={}, p={}",
            model.cfg.input_len, model.cfg.horizon, corpus.plan.l, corpus.plan.p
        )));
    }
    if corpus.plan.train.is_empty() {
        return Err(CoreError::Contract("corpus has no training windows".into()));
    }
    if settings.batch_size == 0 {
        return Err(CoreError::Config("batch size must be positive".into()));
    }

    let root = crate::rng::SplitRng::new(settings.seed);
    let mut dropout_rng = root.split(0x64726f70);
    let shuffle_root = root.split(0x73687566);

    let names = model.params.names().to_vec();
    let mut adam = AdamState::new(&model.params.shapes());
    let mut iterations: u64 = 0;
    let mut history = Vec::with_capacity(settings.epochs);
    let mut last_good = model.params.clone();

    for epoch in 0..settings.epochs {
        let mut order = corpus.plan.train.clone();
        shuffle_root.split(epoch as u64).shuffle(&mut order);

        let mut loss_sum = 0.0;
        let mut lr_used = decayed_lr(settings.lr0, settings.decay, iterations);
        for batch in order.chunks(settings.batch_size) {
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape);
            let mut total: Option<crate::tape::NodeId> = None;
            for &anchor in batch {
                let input = corpus.window_input(anchor)?;
                let masks = model.sample_masks(&mut dropout_rng)?;
                let outs = model.forward_on(&mut tape, &bound, &input, masks.as_ref())?;
                for (k, out) in outs.into_iter().enumerate() {
                    let target = corpus.target_row(anchor, k);
                    let elem = tape.huber_loss(out, target, settings.huber_delta)?;
                    let summed = tape.reduce_sum(elem);
                    total = Some(match total {
                        None => summed,
                        Some(acc) => tape.add(acc, summed)?,
                    });
                }
            }
            let loss = tape.scale(total.expect("nonempty batch"), 1.0 / batch.len() as f64);
            let loss_val = tape.scalar(loss);
            if !loss_val.is_finite() {
                model.params = last_good;
                return Ok(TrainReport {
                    history,
                    iterations,
                    aborted: Some(format!(
                        "non-finite loss {loss_val} at epoch {epoch}; restored last completed epoch"
                    )),
                });
            }
            tape.backward(loss)?;
            let grads: Vec<Matrix> = bound
                .all()
                .iter()
                .map(|&id| tape.grad(id).expect("backward populated gradients").clone())
                .collect();
            lr_used = decayed_lr(settings.lr0, settings.decay, iterations);
            match adam_step(model.params.values_mut(), &grads, &names, &mut adam, lr_used) {
                Ok(()) => {}
                Err(CoreError::Numeric(msg)) => {
                    model.params = last_good;
                    return Ok(TrainReport {
                        history,
                        iterations,
                        aborted: Some(format!(
                            "{msg} at epoch {epoch}; restored last completed epoch"
                        )),
                    });
                }
                Err(other) => return Err(other),
            }
            iterations += 1;
            loss_sum += loss_val * batch.len() as f64;
        }

        let log = EpochLog { epoch, loss: loss_sum / order.len() as f64, lr: lr_used };
        on_epoch(&log);
        history.push(log);
        last_good = model.params.clone();
    }

    Ok(TrainReport { history, iterations, aborted: None })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graphs::GraphKind;
    use crate::model::ModelConfig;
    use crate::pipeline::{
        encode_exogenous, prepare_series, FlowTensor, PreprocessSpec, SlotCalendar,
        AGG_SLOTS_PER_DAY, CHANNELS,
    };
    use crate::rng::SplitRng;
    use alloc::collections::BTreeSet;
    use alloc::vec;

    fn tiny_corpus(mask: GraphMask) -> Corpus {
        let stations = 2;
        let days = 3;
        let mut agg = FlowTensor::zeros(days * AGG_SLOTS_PER_DAY, stations);
        for t in 0..agg.slots() {
            for st in 0..stations {
                for ch in 0..CHANNELS {
                    let v = 20.0
                        + 8.0 * ((t % 63) as f64 / 63.0 * core::f64::consts::TAU).sin()
                        + (st + ch) as f64 * 3.0
                        + ((t * 13 + st) as f64 * 0.71).sin();
                    agg.set(t, st, ch, v.max(0.0));
                }
            }
        }
        let split = 2 * AGG_SLOTS_PER_DAY + 30;
        let prep = prepare_series(&agg, PreprocessSpec::default(), split).unwrap();
        let d0 = chrono::NaiveDate::from_ymd_opt(2021, 6, 7).unwrap();
        let cal = SlotCalendar::new(
            (0..days).map(|i| d0 + chrono::Days::new(i as u64)).collect(),
            AGG_SLOTS_PER_DAY,
        );
        let exo = encode_exogenous(&cal, &BTreeSet::new());

        // hand-build a normalized graph set for the active mask
        let mut statics = Vec::new();
        for kind in mask.kinds() {
            if kind == GraphKind::RecentFlow {
                continue;
            }
            let raw = Matrix::from_fn(stations, stations, |i, j| if i == j { 0.0 } else { 0.5 });
            statics.push((kind.index(), normalize_adjacency(&raw).unwrap()));
        }
        let mut recent = alloc::collections::BTreeMap::new();
        if mask.contains(GraphKind::RecentFlow) {
            for slot in 0..agg.slots() {
                let raw = Matrix::from_fn(stations, stations, |i, j| {
                    if i == j {
                        0.0
                    } else {
                        ((slot + i + j) as f64 * 0.37).sin().abs()
                    }
                });
                recent.insert(slot, normalize_adjacency(&raw).unwrap());
            }
        }
        let graphs = NormalizedGraphs { mask, statics, recent };
        Corpus::assemble(prep, exo, graphs, 4, 2, split).unwrap()
    }

    fn tiny_model(mask: GraphMask, seed: u64) -> MgcRnn {
        let cfg = ModelConfig {
            stations: 2,
            input_len: 4,
            horizon: 2,
            gc_units: 3,
            lstm_units: 6,
            embed_dim: 2,
            gcn_depth: 1,
            graph_mask: mask,
            exogenous: false,
            dropout: 0.1,
            recurrent_dropout: 0.1,
        };
        MgcRnn::init(cfg, &mut SplitRng::new(seed)).unwrap()
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let mask = GraphMask::from_kinds(&[GraphKind::Distance, GraphKind::RecentFlow]);
        let corpus = tiny_corpus(mask);
        let settings = TrainSettings {
            epochs: 4,
            batch_size: 8,
            lr0: 0.01,
            decay: 0.0,
            huber_delta: 1.0,
            seed: 3,
        };
        let run = || {
            let mut model = tiny_model(mask, 11);
            let report = train(&mut model, &corpus, &settings, |_| {}).unwrap();
            (report, model)
        };
        let (report_a, model_a) = run();
        let (report_b, model_b) = run();
        assert!(report_a.aborted.is_none());
        assert!(
            report_a.history.last().unwrap().loss < report_a.history[0].loss,
            "loss did not drop: {:?}",
            report_a.history
        );
        for (la, lb) in report_a.history.iter().zip(&report_b.history) {
            assert_eq!(la.loss.to_bits(), lb.loss.to_bits());
        }
        for (a, b) in model_a.params.values().iter().zip(model_b.params.values()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn nan_loss_restores_last_good_params() {
        let mask = GraphMask::from_kinds(&[GraphKind::Distance]);
        let corpus = tiny_corpus(mask);
        let mut model = tiny_model(mask, 5);
        // poison one parameter so the first forward produces a non-finite loss
        let poisoned = Matrix::filled(1, model.cfg.lstm_units * 4, f64::MAX);
        model.params.set("encoder.b", poisoned.clone()).unwrap();
        let before = model.params.clone();
        let settings = TrainSettings { epochs: 2, ..Default::default() };
        let report = train(&mut model, &corpus, &settings, |_| {}).unwrap();
        assert!(report.aborted.is_some());
        // restored snapshot is the pre-training state (no epoch completed)
        for (a, b) in model.params.values().iter().zip(before.values()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn mask_mismatch_is_rejected() {
        let corpus = tiny_corpus(GraphMask::from_kinds(&[GraphKind::Distance]));
        let mut model = tiny_model(GraphMask::all(), 1);
        let err = train(&mut model, &corpus, &TrainSettings::default(), |_| {}).unwrap_err();
        assert!(matches!(err, CoreError::Config(_)));
    }

    #[test]
    fn window_materialization_shapes() {
        let mask = GraphMask::from_kinds(&[GraphKind::Distance, GraphKind::RecentFlow]);
        let corpus = tiny_corpus(mask);
        let anchor = corpus.plan.train[0];
        let input = corpus.window_input(anchor).unwrap();
        assert_eq!(input.steps.len(), 4);
        assert_eq!(input.step_graphs[0].len(), 2);
        assert_eq!(input.exo.len(), 2);
        assert_eq!(corpus.target_row(anchor, 0).shape(), (1, 2 * CHANNELS));
        assert_eq!(corpus.flat_input(anchor).len(), 4 * 2 * CHANNELS);
    }
}
