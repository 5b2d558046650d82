//! The full forecasting model: parallel graph convolutions per input step,
//! learnable fusion, projection, LSTM encoder-decoder, TimeDistributed
//! output layers and optional exogenous offsets.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::graphs::GraphMask;
use crate::matrix::Matrix;
use crate::mgc;
use crate::pipeline::CHANNELS;
use crate::rng::SplitRng;
use crate::seq::{self, ExoKernel, LstmKernel, SeqMasks};
use crate::tape::{NodeId, Tape};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub stations: usize,
    /// Input sequence length l.
    pub input_len: usize,
    /// Forecast horizon p.
    pub horizon: usize,
    /// Graph convolution units U.
    pub gc_units: usize,
    /// Encoder/decoder LSTM units H.
    pub lstm_units: usize,
    /// Width of the exogenous embeddings.
    pub embed_dim: usize,
    /// Graph convolution layers per graph per step.
    pub gcn_depth: usize,
    pub graph_mask: GraphMask,
    pub exogenous: bool,
    pub dropout: f64,
    pub recurrent_dropout: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stations < 2 {
            return Err(CoreError::Config("model needs at least 2 stations".into()));
        }
        if self.input_len == 0 || self.horizon == 0 {
            return Err(CoreError::Config("input_len and horizon must be positive".into()));
        }
        if self.gc_units == 0 || self.lstm_units == 0 || self.embed_dim == 0 || self.gcn_depth == 0 {
            return Err(CoreError::Config("layer widths must be positive".into()));
        }
        if self.graph_mask.is_empty() {
            return Err(CoreError::Config("graph mask must activate at least one graph".into()));
        }
        for rate in [self.dropout, self.recurrent_dropout] {
            if !(0.0..1.0).contains(&rate) {
                return Err(CoreError::Config(format!("dropout rate {rate} outside [0, 1)")));
            }
        }
        Ok(())
    }

    /// Flattened per-step signal width N * S.
    pub fn signal_width(&self) -> usize {
        self.stations * CHANNELS
    }
}

/// Named learnable tensors, ordered by construction. The order is part of
/// the checkpoint contract.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Matrix>,
}

impl ParamSet {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn add(&mut self, name: String, value: Matrix) -> usize {
        self.names.push(name);
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Matrix] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Matrix] {
        &mut self.values
    }

    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.values.iter().map(|m| m.shape()).collect()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.index_of(name).map(|i| &self.values[i])
    }

    pub fn set(&mut self, name: &str, value: Matrix) -> Result<()> {
        let idx = self
            .index_of(name)
            .ok_or_else(|| CoreError::Contract(format!("unknown parameter '{name}'")))?;
        if self.values[idx].shape() != value.shape() {
            return Err(CoreError::Shape {
                op: "param_set",
                detail: format!(
                    "'{name}' expects {}, got {}",
                    self.values[idx].shape_str(),
                    value.shape_str()
                ),
            });
        }
        self.values[idx] = value;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Matrix)> {
        self.names.iter().zip(self.values.iter())
    }
}

/// One input window ready for a forward pass. `step_graphs[j]` holds the
/// normalized adjacency for every active graph (in mask order) at input
/// step j; static graphs simply repeat across steps.
pub struct WindowInput<'a> {
    pub steps: Vec<Matrix>,
    pub step_graphs: Vec<Vec<&'a Matrix>>,
    pub exo: Vec<(u8, bool)>,
}

/// Tape node ids of the bound parameters, aligned with the ParamSet order.
pub struct BoundParams {
    nodes: Vec<NodeId>,
}

impl BoundParams {
    pub fn node(&self, idx: usize) -> NodeId {
        self.nodes[idx]
    }

    pub fn all(&self) -> &[NodeId] {
        &self.nodes
    }
}

fn glorot(rows: usize, cols: usize, fan_in: usize, fan_out: usize, rng: &mut SplitRng) -> Matrix {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| rng.range(-limit, limit))
}

fn lstm_bias(hidden: usize) -> Matrix {
    // forget-gate bias starts at 1 (gate order: input, forget, cell, output)
    let mut b = Matrix::zeros(1, 4 * hidden);
    for i in hidden..2 * hidden {
        b.set(0, i, 1.0);
    }
    b
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MgcRnn {
    pub cfg: ModelConfig,
    pub params: ParamSet,
}

impl MgcRnn {
    /// Fresh model with Glorot-uniform weights, zero biases (forget gate 1)
    /// and fusion weights at 1/(number of active graphs).
    pub fn init(cfg: ModelConfig, rng: &mut SplitRng) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng.split(0x6d6f64656c); // dedicated init stream
        let n = cfg.stations;
        let (u, h, e) = (cfg.gc_units, cfg.lstm_units, cfg.embed_dim);
        let ns = cfg.signal_width();
        let k = cfg.graph_mask.len() as f64;
        let mut params = ParamSet::default();

        for kind in cfg.graph_mask.kinds() {
            let tag = kind.tag();
            params.add(format!("gcn.{tag}.w0"), glorot(CHANNELS, u, CHANNELS, u, &mut rng));
            for layer in 1..cfg.gcn_depth {
                params.add(format!("gcn.{tag}.w{layer}"), glorot(u, u, u, u, &mut rng));
            }
            params.add(format!("fusion.{tag}"), Matrix::filled(n, u, 1.0 / k));
        }
        params.add("proj.w".into(), glorot(n * u, ns, n * u, ns, &mut rng));
        params.add("proj.b".into(), Matrix::zeros(1, ns));
        params.add("encoder.wx".into(), glorot(ns, 4 * h, ns, 4 * h, &mut rng));
        params.add("encoder.wh".into(), glorot(h, 4 * h, h, 4 * h, &mut rng));
        params.add("encoder.b".into(), lstm_bias(h));
        params.add("decoder.wx".into(), glorot(h, 4 * h, h, 4 * h, &mut rng));
        params.add("decoder.wh".into(), glorot(h, 4 * h, h, 4 * h, &mut rng));
        params.add("decoder.b".into(), lstm_bias(h));
        params.add("interp.w".into(), glorot(h, h, h, h, &mut rng));
        params.add("interp.b".into(), Matrix::zeros(1, h));
        params.add("output.w".into(), glorot(h, ns, h, ns, &mut rng));
        params.add("output.b".into(), Matrix::zeros(1, ns));
        if cfg.exogenous {
            params.add("exo.embed_day".into(), glorot(7, e, 7, e, &mut rng));
            params.add("exo.embed_holiday".into(), glorot(2, e, 2, e, &mut rng));
            params.add("exo.dense_day".into(), glorot(e, ns, e, ns, &mut rng));
            params.add("exo.dense_holiday".into(), glorot(e, ns, e, ns, &mut rng));
        }
        Ok(MgcRnn { cfg, params })
    }

    /// Binds every parameter as a tape leaf. One bind serves all windows
    /// recorded on the same tape.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        BoundParams {
            nodes: self.params.values().iter().map(|m| tape.leaf(m.clone())).collect(),
        }
    }

    fn bound(&self, bound: &BoundParams, name: &str) -> NodeId {
        let idx = self.params.index_of(name).expect("parameter registered at init");
        bound.node(idx)
    }

    fn validate_input(&self, input: &WindowInput<'_>) -> Result<()> {
        let cfg = &self.cfg;
        if input.steps.len() != cfg.input_len {
            return Err(CoreError::Contract(format!(
                "window has {} input steps, model expects {}",
                input.steps.len(),
                cfg.input_len
            )));
        }
        if input.step_graphs.len() != cfg.input_len {
            return Err(CoreError::Contract(format!(
                "window has graphs for {} steps, model expects {}",
                input.step_graphs.len(),
                cfg.input_len
            )));
        }
        let active = cfg.graph_mask.len();
        for (j, (step, graphs)) in input.steps.iter().zip(&input.step_graphs).enumerate() {
            if step.shape() != (cfg.stations, CHANNELS) {
                return Err(CoreError::Shape {
                    op: "forward",
                    detail: format!(
                        "input step {j} is {}, expected {}x{CHANNELS}",
                        step.shape_str(),
                        cfg.stations
                    ),
                });
            }
            if graphs.len() != active {
                return Err(CoreError::Contract(format!(
                    "step {j} carries {} adjacencies, mask activates {active}",
                    graphs.len()
                )));
            }
        }
        if cfg.exogenous && input.exo.len() != cfg.horizon {
            return Err(CoreError::Contract(format!(
                "window has {} exogenous codes, horizon is {}",
                input.exo.len(),
                cfg.horizon
            )));
        }
        Ok(())
    }

    /// Records the forward pass for one window on the tape and returns the
    /// `p` output nodes, each 1 x (N*S) in scaled space.
    pub fn forward_on(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        input: &WindowInput<'_>,
        masks: Option<&SeqMasks>,
    ) -> Result<Vec<NodeId>> {
        self.validate_input(input)?;
        let cfg = &self.cfg;
        let kinds = cfg.graph_mask.kinds();
        let proj_w = self.bound(bound, "proj.w");
        let proj_b = self.bound(bound, "proj.b");

        let mut xs = Vec::with_capacity(cfg.input_len);
        for (step, graphs) in input.steps.iter().zip(&input.step_graphs) {
            let signal = tape.leaf(step.clone());
            let mut pairs = Vec::with_capacity(kinds.len());
            for (kind, adj) in kinds.iter().zip(graphs) {
                let adj_node = tape.leaf((*adj).clone());
                let mut g = {
                    let w0 = self.bound(bound, &format!("gcn.{}.w0", kind.tag()));
                    mgc::gcn_forward(tape, adj_node, signal, w0)?
                };
                for layer in 1..cfg.gcn_depth {
                    let w = self.bound(bound, &format!("gcn.{}.w{layer}", kind.tag()));
                    g = mgc::gcn_forward(tape, adj_node, g, w)?;
                }
                let fusion = self.bound(bound, &format!("fusion.{}", kind.tag()));
                pairs.push((g, fusion));
            }
            let merged = mgc::fuse(tape, &pairs)?;
            xs.push(mgc::project_step(tape, merged, proj_w, proj_b)?);
        }

        let enc_kernel = LstmKernel {
            wx: self.bound(bound, "encoder.wx"),
            wh: self.bound(bound, "encoder.wh"),
            bias: self.bound(bound, "encoder.b"),
        };
        let representation = seq::encode(tape, &xs, &enc_kernel)?;

        let dec_kernel = LstmKernel {
            wx: self.bound(bound, "decoder.wx"),
            wh: self.bound(bound, "decoder.wh"),
            bias: self.bound(bound, "decoder.b"),
        };
        let hiddens = seq::decode(tape, representation, cfg.horizon, &dec_kernel, masks)?;

        let mut outs = seq::time_distributed_output(
            tape,
            &hiddens,
            self.bound(bound, "interp.w"),
            self.bound(bound, "interp.b"),
            self.bound(bound, "output.w"),
            self.bound(bound, "output.b"),
        )?;

        if cfg.exogenous {
            let exo_kernel = ExoKernel {
                embed_day: self.bound(bound, "exo.embed_day"),
                embed_holiday: self.bound(bound, "exo.embed_holiday"),
                dense_day: self.bound(bound, "exo.dense_day"),
                dense_holiday: self.bound(bound, "exo.dense_holiday"),
            };
            let offsets = seq::exogenous_offsets(tape, &input.exo, &exo_kernel)?;
            for (out, off) in outs.iter_mut().zip(offsets) {
                *out = tape.add(*out, off)?;
            }
        }
        Ok(outs)
    }

    /// Inference forward pass: dropout disabled, outputs reshaped to N x S
    /// matrices in scaled space.
    pub fn predict(&self, input: &WindowInput<'_>) -> Result<Vec<Matrix>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let outs = self.forward_on(&mut tape, &bound, input, None)?;
        Ok(outs
            .into_iter()
            .map(|id| tape.value(id).reshaped(self.cfg.stations, CHANNELS))
            .collect())
    }

    /// Samples the decoder dropout masks for one training sequence.
    pub fn sample_masks(&self, rng: &mut SplitRng) -> Result<Option<SeqMasks>> {
        if self.cfg.dropout == 0.0 && self.cfg.recurrent_dropout == 0.0 {
            return Ok(None);
        }
        let h = self.cfg.lstm_units;
        Ok(Some(SeqMasks {
            input: crate::optim::dropout_mask(1, h, self.cfg.dropout, rng)?,
            recurrent: crate::optim::dropout_mask(1, h, self.cfg.recurrent_dropout, rng)?,
        }))
    }
}
