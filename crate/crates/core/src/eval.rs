//! Evaluation metrics, baselines and the graph-ablation harness.
//!
//! All learned forecasts are compared in passenger units after the full
//! inverse transform chain. The historical-average baseline works directly
//! on the aggregated flows; the LASSO baseline is a multi-output linear
//! model in scaled space rolled forward recursively.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::graphs::GraphMask;
use crate::matrix::Matrix;
use crate::model::{MgcRnn, ModelConfig};
use crate::pipeline::{inverse_value, FlowTensor, PreprocessSpec, CHANNELS};
use crate::rng::SplitRng;
use crate::train::{train, Corpus, NormalizedGraphs, TrainSettings};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scope {
    Overall,
    /// 1-based forecast step.
    Step(usize),
    Station(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub scope: Scope,
    pub rmse: f64,
    pub mae: f64,
    pub smape: f64,
}

fn check_lengths(y: &[f64], y_hat: &[f64]) -> Result<()> {
    if y.len() != y_hat.len() {
        return Err(CoreError::Contract(format!(
            "metric inputs differ in length: {} vs {}",
            y.len(),
            y_hat.len()
        )));
    }
    if y.is_empty() {
        return Err(CoreError::Contract("metrics need at least one value".into()));
    }
    Ok(())
}

pub fn rmse(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    check_lengths(y, y_hat)?;
    let ss: f64 = y.iter().zip(y_hat).map(|(a, b)| (b - a) * (b - a)).sum();
    Ok((ss / y.len() as f64).sqrt())
}

pub fn mae(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    check_lengths(y, y_hat)?;
    let s: f64 = y.iter().zip(y_hat).map(|(a, b)| (b - a).abs()).sum();
    Ok(s / y.len() as f64)
}

/// Symmetric MAPE: mean of 2|y_hat - y| / (|y_hat| + |y|), bounded by 2.
/// Terms where both values are zero contribute 0 (a perfect forecast of
/// zero, not an undefined ratio).
pub fn smape(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    check_lengths(y, y_hat)?;
    let s: f64 = y
        .iter()
        .zip(y_hat)
        .map(|(a, b)| {
            let denom = a.abs() + b.abs();
            if denom == 0.0 {
                0.0
            } else {
                2.0 * (b - a).abs() / denom
            }
        })
        .sum();
    Ok(s / y.len() as f64)
}

pub fn metric_report(scope: Scope, y: &[f64], y_hat: &[f64]) -> Result<MetricReport> {
    Ok(MetricReport {
        scope,
        rmse: rmse(y, y_hat)?,
        mae: mae(y, y_hat)?,
        smape: smape(y, y_hat)?,
    })
}

/// Historical average with a daily period: the forecast for slot `t` is the
/// mean of all prior slots at the same phase, per station and channel.
pub fn ha_forecast(history: &FlowTensor, t: usize, period: usize) -> Result<Matrix> {
    if period == 0 {
        return Err(CoreError::Config("historical average needs a positive period".into()));
    }
    if t < period {
        return Err(CoreError::Contract(format!(
            "no prior slot at phase {t} mod {period}; earliest forecastable slot is {period}"
        )));
    }
    let n = history.stations();
    let mut out = Matrix::zeros(n, CHANNELS);
    let phase = t % period;
    for st in 0..n {
        for ch in 0..CHANNELS {
            let mut acc = 0.0;
            let mut count = 0usize;
            let mut s = phase;
            while s < t {
                if s < history.slots() {
                    acc += history.get(s, st, ch);
                    count += 1;
                }
                s += period;
            }
            out.set(st, ch, acc / count as f64);
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// LASSO baseline
// ---------------------------------------------------------------------------

/// Multi-output linear map fitted by cyclic coordinate descent on the
/// objective (1/(2n))||y - b0 - X beta||^2 + lambda ||beta||_1 per output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LassoModel {
    /// features x outputs.
    pub coef: Matrix,
    pub intercept: Vec<f64>,
    pub converged: bool,
    pub sweeps: usize,
    /// Total objective after every sweep.
    pub objective_trace: Vec<f64>,
}

pub fn lasso_fit(
    x: &Matrix,
    y: &Matrix,
    lambda: f64,
    tol: f64,
    max_sweeps: usize,
) -> Result<LassoModel> {
    if lambda < 0.0 {
        return Err(CoreError::Config(format!("lambda must be nonnegative, got {lambda}")));
    }
    let n = x.rows();
    if n != y.rows() || n == 0 {
        return Err(CoreError::Contract(format!(
            "design has {n} rows but targets have {}",
            y.rows()
        )));
    }
    let features = x.cols();
    let outputs = y.cols();

    // center columns so the intercept separates from the penalized weights
    let x_mean: Vec<f64> = (0..features)
        .map(|c| (0..n).map(|r| x.at(r, c)).sum::<f64>() / n as f64)
        .collect();
    let y_mean: Vec<f64> = (0..outputs)
        .map(|c| (0..n).map(|r| y.at(r, c)).sum::<f64>() / n as f64)
        .collect();
    let xc = Matrix::from_fn(n, features, |r, c| x.at(r, c) - x_mean[c]);
    let yc = Matrix::from_fn(n, outputs, |r, c| y.at(r, c) - y_mean[c]);

    let gram = xc.transpose().matmul(&xc); // features x features
    let corr = xc.transpose().matmul(&yc); // features x outputs
    let y_sq: Vec<f64> = (0..outputs)
        .map(|j| (0..n).map(|r| yc.at(r, j) * yc.at(r, j)).sum())
        .collect();

    let nf = n as f64;
    let mut beta = Matrix::zeros(features, outputs);
    let objective = |beta: &Matrix| -> f64 {
        // (1/(2n)) (y'y - 2 c'b + b'Gb) + lambda |b|_1, summed over outputs
        let gb = gram.matmul(beta);
        let mut total = 0.0;
        for j in 0..outputs {
            let mut quad = 0.0;
            let mut lin = 0.0;
            let mut l1 = 0.0;
            for k in 0..features {
                quad += beta.at(k, j) * gb.at(k, j);
                lin += corr.at(k, j) * beta.at(k, j);
                l1 += beta.at(k, j).abs();
            }
            total += (y_sq[j] - 2.0 * lin + quad) / (2.0 * nf) + lambda * l1;
        }
        total
    };

    let mut trace = vec![objective(&beta)];
    let mut converged = false;
    let mut sweeps = 0;
    // gb[k][j] tracks (G beta)_kj incrementally
    let mut gb = Matrix::zeros(features, outputs);
    for sweep in 0..max_sweeps {
        sweeps = sweep + 1;
        let mut max_delta = 0.0f64;
        let mut max_coef = 0.0f64;
        for k in 0..features {
            let gkk = gram.at(k, k);
            for j in 0..outputs {
                let old = beta.at(k, j);
                let new = if gkk <= 0.0 {
                    0.0
                } else {
                    let rho = (corr.at(k, j) - gb.at(k, j) + gkk * old) / nf;
                    let soft = rho.signum() * (rho.abs() - lambda).max(0.0);
                    soft / (gkk / nf)
                };
                if new != old {
                    let delta = new - old;
                    for kk in 0..features {
                        let v = gb.at(kk, j) + gram.at(kk, k) * delta;
                        gb.set(kk, j, v);
                    }
                    beta.set(k, j, new);
                    max_delta = max_delta.max(delta.abs());
                }
                max_coef = max_coef.max(new.abs());
            }
        }
        trace.push(objective(&beta));
        if max_delta <= tol * max_coef.max(1.0) {
            converged = true;
            break;
        }
    }

    let intercept: Vec<f64> = (0..outputs)
        .map(|j| y_mean[j] - (0..features).map(|k| x_mean[k] * beta.at(k, j)).sum::<f64>())
        .collect();
    Ok(LassoModel { coef: beta, intercept, converged, sweeps, objective_trace: trace })
}

impl LassoModel {
    pub fn predict_one(&self, x: &[f64]) -> Vec<f64> {
        let features = self.coef.rows();
        debug_assert_eq!(x.len(), features);
        (0..self.intercept.len())
            .map(|j| {
                self.intercept[j]
                    + (0..features).map(|k| x[k] * self.coef.at(k, j)).sum::<f64>()
            })
            .collect()
    }
}

/// Drops the oldest slot of a flattened window and appends the newest one.
pub fn shift_window(flat: &[f64], newest: &[f64]) -> Vec<f64> {
    let mut next = flat[newest.len()..].to_vec();
    next.extend_from_slice(newest);
    next
}

/// Recursive multi-step forecast: each one-step prediction becomes the
/// newest input slot of the next step.
pub fn lasso_recursive_forecast(model: &LassoModel, window: &[f64], p: usize) -> Vec<Vec<f64>> {
    let mut flat = window.to_vec();
    let mut steps = Vec::with_capacity(p);
    for _ in 0..p {
        let pred = model.predict_one(&flat);
        flat = shift_window(&flat, &pred);
        steps.push(pred);
    }
    steps
}

// ---------------------------------------------------------------------------
// Per-step reports and test-set evaluation
// ---------------------------------------------------------------------------

/// Truth/prediction pairs per forecast step, in passenger units.
#[derive(Debug, Clone, Default)]
pub struct StepSeries {
    pub truth: Vec<Vec<f64>>,
    pub pred: Vec<Vec<f64>>,
}

impl StepSeries {
    pub fn new(p: usize) -> Self {
        StepSeries { truth: vec![Vec::new(); p], pred: vec![Vec::new(); p] }
    }

    pub fn push(&mut self, step: usize, truth: f64, pred: f64) {
        self.truth[step].push(truth);
        self.pred[step].push(pred);
    }

    pub fn per_step(&self) -> Result<Vec<MetricReport>> {
        self.truth
            .iter()
            .zip(&self.pred)
            .enumerate()
            .map(|(k, (t, p))| metric_report(Scope::Step(k + 1), t, p))
            .collect()
    }

    pub fn overall(&self) -> Result<MetricReport> {
        let truth: Vec<f64> = self.truth.iter().flatten().copied().collect();
        let pred: Vec<f64> = self.pred.iter().flatten().copied().collect();
        metric_report(Scope::Overall, &truth, &pred)
    }
}

/// Runs the trained model over the corpus test windows and collects
/// inverse-transformed predictions against the aggregated truth.
pub fn evaluate_model(model: &MgcRnn, corpus: &Corpus, truth: &FlowTensor) -> Result<StepSeries> {
    let p = corpus.plan.p;
    let mut series = StepSeries::new(p);
    for &anchor in &corpus.plan.test {
        let input = corpus.window_input(anchor)?;
        let outs = model.predict(&input)?;
        for (k, out) in outs.iter().enumerate() {
            let slot = anchor + k;
            for st in 0..corpus.stations() {
                for ch in 0..CHANNELS {
                    let pred = inverse_value(&corpus.prep, slot, st, ch, out.at(st, ch))?;
                    series.push(k, truth.get(slot, st, ch), pred);
                }
            }
        }
    }
    Ok(series)
}

/// Historical-average baseline over the same test windows, on raw
/// aggregated flows.
pub fn evaluate_ha(corpus: &Corpus, truth: &FlowTensor, period: usize) -> Result<StepSeries> {
    let p = corpus.plan.p;
    let mut series = StepSeries::new(p);
    for &anchor in &corpus.plan.test {
        for k in 0..p {
            let slot = anchor + k;
            let forecast = ha_forecast(truth, slot, period)?;
            for st in 0..corpus.stations() {
                for ch in 0..CHANNELS {
                    series.push(k, truth.get(slot, st, ch), forecast.at(st, ch));
                }
            }
        }
    }
    Ok(series)
}

/// Fits the LASSO on the corpus training windows (flattened scaled inputs
/// to the next scaled slot) and evaluates it recursively on the test
/// windows, in passenger units.
pub fn evaluate_lasso(
    corpus: &Corpus,
    truth: &FlowTensor,
    lambda: f64,
) -> Result<(LassoModel, StepSeries)> {
    let ns = corpus.stations() * CHANNELS;
    let l = corpus.plan.l;
    let rows = corpus.plan.train.len();
    if rows == 0 {
        return Err(CoreError::Contract("no training windows for the lasso baseline".into()));
    }
    let mut x = Matrix::zeros(rows, l * ns);
    let mut y = Matrix::zeros(rows, ns);
    for (r, &anchor) in corpus.plan.train.iter().enumerate() {
        let flat = corpus.flat_input(anchor);
        for (c, v) in flat.iter().enumerate() {
            x.set(r, c, *v);
        }
        let target = corpus.target_row(anchor, 0);
        for c in 0..ns {
            y.set(r, c, target.at(0, c));
        }
    }
    let model = lasso_fit(&x, &y, lambda, 1e-6, 1000)?;
    if !model.converged {
        log::warn!("lasso coordinate descent hit the sweep limit ({})", model.sweeps);
    }

    let p = corpus.plan.p;
    let mut series = StepSeries::new(p);
    for &anchor in &corpus.plan.test {
        let window = corpus.flat_input(anchor);
        let steps = lasso_recursive_forecast(&model, &window, p);
        for (k, step) in steps.iter().enumerate() {
            let slot = anchor + k;
            for st in 0..corpus.stations() {
                for ch in 0..CHANNELS {
                    let pred = inverse_value(&corpus.prep, slot, st, ch, step[st * CHANNELS + ch])?;
                    series.push(k, truth.get(slot, st, ch), pred);
                }
            }
        }
    }
    Ok((model, series))
}

// ---------------------------------------------------------------------------
// Ablation harness
// ---------------------------------------------------------------------------

/// One experiment variant: which graphs feed the model, whether the
/// exogenous branch is on, and whether log/differencing preprocessing is
/// applied.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AblationSpec {
    pub mask: GraphMask,
    pub exogenous: bool,
    pub preprocess: bool,
}

impl AblationSpec {
    pub fn label(&self) -> String {
        let graphs: Vec<String> =
            self.mask.kinds().iter().map(|k| format!("M{}", k.number())).collect();
        format!(
            "{} graphs: {}{}{}",
            self.mask.len(),
            graphs.join("+"),
            if self.exogenous { " +exogenous" } else { "" },
            if self.preprocess { "" } else { " -preprocessing" }
        )
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub overall: MetricReport,
    pub per_step: Vec<MetricReport>,
    pub final_train_loss: f64,
}

/// Inputs shared by every ablation variant.
pub struct AblationContext<'a> {
    pub agg: &'a FlowTensor,
    pub exo: &'a [(u8, bool)],
    /// Graph set built with the union of all masks under test.
    pub graphs: &'a crate::graphs::GraphSet,
    pub split_slot: usize,
    pub l: usize,
    pub p: usize,
    pub base_model: ModelConfig,
    pub settings: TrainSettings,
}

/// Trains one model per spec with identical hyperparameters and seed and
/// reports inverse-transformed test metrics per variant.
pub fn run_ablation(ctx: &AblationContext<'_>, specs: &[AblationSpec]) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(specs.len());
    for spec in specs {
        if spec.mask.is_empty() {
            return Err(CoreError::Config("ablation spec has an empty graph mask".into()));
        }
        let prep_spec = if spec.preprocess {
            PreprocessSpec::default()
        } else {
            PreprocessSpec::disabled()
        };
        let prep = crate::pipeline::prepare_series(ctx.agg, prep_spec, ctx.split_slot)?;
        let graphs = NormalizedGraphs::from_set(ctx.graphs, spec.mask)?;
        let corpus = Corpus::assemble(prep, ctx.exo.to_vec(), graphs, ctx.l, ctx.p, ctx.split_slot)?;

        let cfg = ModelConfig {
            graph_mask: spec.mask,
            exogenous: spec.exogenous,
            ..ctx.base_model
        };
        let mut model = MgcRnn::init(cfg, &mut SplitRng::new(ctx.settings.seed))?;
        let report = train(&mut model, &corpus, &ctx.settings, |_| {})?;
        if let Some(reason) = &report.aborted {
            return Err(CoreError::Numeric(format!(
                "ablation '{}' aborted: {reason}",
                spec.label()
            )));
        }
        let series = evaluate_model(&model, &corpus, ctx.agg)?;
        rows.push(AblationRow {
            label: spec.label(),
            overall: series.overall()?,
            per_step: series.per_step()?,
            final_train_loss: report.history.last().map(|e| e.loss).unwrap_or(f64::NAN),
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_forecast_scores_zero() {
        let y = [1.0, 2.0, 3.5];
        assert_eq!(rmse(&y, &y).unwrap(), 0.0);
        assert_eq!(mae(&y, &y).unwrap(), 0.0);
        assert_eq!(smape(&y, &y).unwrap(), 0.0);
    }

    #[test]
    fn single_pair_formulas() {
        let y = [1.0];
        let y_hat = [3.0];
        assert_eq!(rmse(&y, &y_hat).unwrap(), 2.0);
        assert_eq!(mae(&y, &y_hat).unwrap(), 2.0);
        assert_eq!(smape(&y, &y_hat).unwrap(), 1.0); // 2*2/(1+3)
    }

    #[test]
    fn smape_zero_denominator_contributes_zero() {
        let y = [0.0, 1.0];
        let y_hat = [0.0, 1.0];
        assert_eq!(smape(&y, &y_hat).unwrap(), 0.0);
    }

    #[test]
    fn length_mismatch_is_an_error() {
        assert!(rmse(&[1.0], &[1.0, 2.0]).is_err());
        assert!(mae(&[], &[]).is_err());
    }

    #[test]
    fn ha_means_prior_same_phase_slots() {
        let mut h = FlowTensor::zeros(3 * 63, 1);
        for day in 0..3 {
            h.set(day * 63 + 5, 0, 0, 10.0 + 4.0 * day as f64); // 10, 14, 18 at phase 5
        }
        // one prior day: forecast equals it
        let f1 = ha_forecast(&h, 63 + 5, 63).unwrap();
        assert_eq!(f1.at(0, 0), 10.0);
        // two prior days with 10 and 14: mean 12
        let f2 = ha_forecast(&h, 2 * 63 + 5, 63).unwrap();
        assert_eq!(f2.at(0, 0), 12.0);
        // no prior phase slot
        assert!(ha_forecast(&h, 5, 63).is_err());
    }

    #[test]
    fn ha_is_exact_on_periodic_series() {
        let mut h = FlowTensor::zeros(4 * 63, 2);
        for t in 0..h.slots() {
            for st in 0..2 {
                for ch in 0..CHANNELS {
                    h.set(t, st, ch, ((t % 63) as f64 + st as f64 * 10.0 + ch as f64).sin() + 2.0);
                }
            }
        }
        for t in 3 * 63..4 * 63 {
            let f = ha_forecast(&h, t, 63).unwrap();
            for st in 0..2 {
                for ch in 0..CHANNELS {
                    assert!((f.at(st, ch) - h.get(t, st, ch)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn full_shrinkage_leaves_only_the_intercept() {
        let x = Matrix::from_fn(30, 4, |r, c| ((r * 4 + c) as f64 * 0.17).sin());
        let y = Matrix::from_fn(30, 2, |r, c| ((r + c) as f64 * 0.42).cos() + 1.0);
        let model = lasso_fit(&x, &y, 1e6, 1e-9, 200).unwrap();
        assert_eq!(model.coef.max_abs(), 0.0);
        // forecast is the per-output training mean
        let mean0 = (0..30).map(|r| y.at(r, 0)).sum::<f64>() / 30.0;
        let pred = model.predict_one(&vec![0.3; 4]);
        assert!((pred[0] - mean0).abs() < 1e-12);
    }

    #[test]
    fn lasso_objective_is_nonincreasing() {
        let x = Matrix::from_fn(40, 6, |r, c| ((r * 6 + c) as f64 * 0.71).sin());
        let y = Matrix::from_fn(40, 3, |r, c| ((r * 3 + c) as f64 * 0.13).cos());
        let model = lasso_fit(&x, &y, 0.01, 1e-10, 300).unwrap();
        for pair in model.objective_trace.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-10);
        }
    }

    #[test]
    fn recursion_shifts_predictions_in() {
        let window: Vec<f64> = (0..6).map(|i| i as f64).collect(); // l=3, ns=2
        let newest = [100.0, 200.0];
        let shifted = shift_window(&window, &newest);
        assert_eq!(shifted, vec![2.0, 3.0, 4.0, 5.0, 100.0, 200.0]);
    }

    #[test]
    fn step_series_reports() {
        let mut s = StepSeries::new(2);
        s.push(0, 1.0, 1.0);
        s.push(0, 2.0, 2.0);
        s.push(1, 1.0, 3.0);
        let per_step = s.per_step().unwrap();
        assert_eq!(per_step[0].rmse, 0.0);
        assert_eq!(per_step[1].rmse, 2.0);
        assert_eq!(per_step[0].scope, Scope::Step(1));
        let overall = s.overall().unwrap();
        assert!(overall.rmse > 0.0 && overall.rmse < 2.0);
    }

    #[test]
    fn ablation_labels() {
        use crate::graphs::GraphKind;
        let spec = AblationSpec {
            mask: GraphMask::from_kinds(&[
                GraphKind::Distance,
                GraphKind::Structure,
                GraphKind::RecentFlow,
            ]),
            exogenous: false,
            preprocess: true,
        };
        assert_eq!(spec.label(), "3 graphs: M1+M3+M5");
    }
}
