//! Per-second note-density and loudness regressors over the video feature
//! rows: a timestep-local MLP and (bi)directional LSTM/GRU stacks, each with
//! a two-output head.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ParamId, ParamStore, Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::dataset::FeatureRecord;
use crate::error::{Error, Result};
use crate::metrics::rmse;
use crate::tensor::Matrix;
use crate::train::{Adam, OptimizerSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegressorKind {
    Fc,
    Lstm,
    Bilstm,
    Gru,
    Bigru,
}

impl RegressorKind {
    pub const ALL: [RegressorKind; 5] = [
        RegressorKind::Fc,
        RegressorKind::Lstm,
        RegressorKind::Bilstm,
        RegressorKind::Gru,
        RegressorKind::Bigru,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RegressorKind::Fc => "fc",
            RegressorKind::Lstm => "lstm",
            RegressorKind::Bilstm => "bilstm",
            RegressorKind::Gru => "gru",
            RegressorKind::Bigru => "bigru",
        }
    }

    fn cell(self) -> Option<Cell> {
        match self {
            RegressorKind::Fc => None,
            RegressorKind::Lstm | RegressorKind::Bilstm => Some(Cell::Lstm),
            RegressorKind::Gru | RegressorKind::Bigru => Some(Cell::Gru),
        }
    }

    fn directions(self) -> usize {
        match self {
            RegressorKind::Bilstm | RegressorKind::Bigru => 2,
            _ => 1,
        }
    }
}

impl fmt::Display for RegressorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RegressorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        RegressorKind::ALL
            .into_iter()
            .find(|k| k.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::InvalidInput(format!("unknown regressor kind `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Cell {
    Lstm,
    Gru,
}

impl Cell {
    fn gates(self) -> usize {
        match self {
            Cell::Lstm => 4,
            Cell::Gru => 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegressorConfig {
    pub kind: RegressorKind,
    /// Units per direction for recurrent kinds.
    pub hidden: usize,
    pub layers: usize,
    /// Width of the single hidden layer of the `fc` kind.
    pub fc_hidden: usize,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for RegressorConfig {
    fn default() -> Self {
        RegressorConfig {
            kind: RegressorKind::Bigru,
            hidden: 64,
            layers: 2,
            fc_hidden: 512,
            epochs: 30,
            lr: 1e-3,
            seed: 0,
        }
    }
}

impl RegressorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.layers == 0 || self.fc_hidden == 0 {
            return Err(Error::InvalidInput("regressor widths and depth must be >= 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "regressor lr {} must be positive",
                self.lr
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Rnn {
    w: ParamId,
    u: ParamId,
    b: ParamId,
    /// GRU only: bias added to `h U_n` inside the reset gate product.
    b_hn: Option<ParamId>,
}

#[derive(Debug, Clone)]
enum Body {
    Fc { w1: ParamId, b1: ParamId },
    Recurrent { cell: Cell, layers: Vec<Vec<Rnn>> },
}

#[derive(Debug, Clone)]
pub struct Regressor {
    config: RegressorConfig,
    input_dim: usize,
    params: ParamStore,
    body: Body,
    head_w: ParamId,
    head_b: ParamId,
    /// Per-feature standardization fitted on the training inputs.
    mean: Vec<f64>,
    std: Vec<f64>,
}

/// Per-second predictions, clamped to their valid ranges.
#[derive(Debug, Clone, PartialEq)]
pub struct Expressive {
    pub note_density: Vec<f64>,
    pub loudness: Vec<f64>,
}

fn xavier(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::uniform(rows, cols, (6.0 / (rows + cols) as f64).sqrt(), rng)
}

impl Regressor {
    pub fn new(config: RegressorConfig, input_dim: usize) -> Result<Self> {
        config.validate()?;
        if input_dim == 0 {
            return Err(Error::InvalidInput("regressor input width must be >= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let (body, out_dim) = match config.kind.cell() {
            None => {
                let w1 = params.add("fc.w", xavier(input_dim, config.fc_hidden, &mut rng));
                let b1 = params.add("fc.b", Matrix::zeros(1, config.fc_hidden));
                (Body::Fc { w1, b1 }, config.fc_hidden)
            }
            Some(cell) => {
                let h = config.hidden;
                let g = cell.gates();
                let dirs = config.kind.directions();
                let mut layers = Vec::with_capacity(config.layers);
                let mut fan_in = input_dim;
                for l in 0..config.layers {
                    let mut per_dir = Vec::with_capacity(dirs);
                    for d in 0..dirs {
                        let name = format!("rnn.{l}.{d}");
                        let w = params.add(format!("{name}.w"), xavier(fan_in, g * h, &mut rng));
                        let u = params.add(format!("{name}.u"), xavier(h, g * h, &mut rng));
                        let mut bias = Matrix::zeros(1, g * h);
                        if cell == Cell::Lstm {
                            // forget gate starts open
                            for c in h..2 * h {
                                bias.set(0, c, 1.0);
                            }
                        }
                        let b = params.add(format!("{name}.b"), bias);
                        let b_hn = (cell == Cell::Gru).then(|| params.add(format!("{name}.b_hn"), Matrix::zeros(1, h)));
                        per_dir.push(Rnn { w, u, b, b_hn });
                    }
                    layers.push(per_dir);
                    fan_in = h * dirs;
                }
                (Body::Recurrent { cell, layers }, fan_in)
            }
        };
        let head_w = params.add("head.w", xavier(out_dim, 2, &mut rng));
        let head_b = params.add("head.b", Matrix::zeros(1, 2));
        Ok(Regressor {
            config,
            input_dim,
            params,
            body,
            head_w,
            head_b,
            mean: vec![0.0; input_dim],
            std: vec![1.0; input_dim],
        })
    }

    pub fn config(&self) -> &RegressorConfig {
        &self.config
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    fn standardize(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.input_dim || x.rows() == 0 {
            return Err(Error::Shape(format!(
                "regressor input is {:?}, expected (T >= 1, {})",
                x.shape(),
                self.input_dim
            )));
        }
        let mut out = x.clone();
        for r in 0..out.rows() {
            for (c, v) in out.row_mut(r).iter_mut().enumerate() {
                *v = (*v - self.mean[c]) / self.std[c];
            }
        }
        Ok(out)
    }

    fn fit_standardization(&mut self, inputs: &[Matrix]) {
        let n: usize = inputs.iter().map(Matrix::rows).sum();
        if n == 0 {
            return;
        }
        let d = self.input_dim;
        let mut mean = vec![0.0; d];
        for x in inputs {
            for r in 0..x.rows() {
                for (m, v) in mean.iter_mut().zip(x.row(r)) {
                    *m += v;
                }
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; d];
        for x in inputs {
            for r in 0..x.rows() {
                for ((s, v), m) in var.iter_mut().zip(x.row(r)).zip(&mean) {
                    *s += (v - m) * (v - m);
                }
            }
        }
        self.std = var
            .iter()
            .map(|s| {
                let sd = (s / n as f64).sqrt();
                if sd > 1e-8 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        self.mean = mean;
    }

    /// One direction of one recurrent layer; returns `T x H` hidden states in
    /// time order.
    fn run_direction(&self, tape: &mut Tape, x: Var, rnn: &Rnn, cell: Cell, reverse: bool) -> Var {
        let h_dim = self.config.hidden;
        let t_len = tape.value(x).rows();
        let w = tape.param(rnn.w);
        let u = tape.param(rnn.u);
        let b = tape.param(rnn.b);
        let xw = tape.matmul(x, w);
        let xw = tape.add_row(xw, b);
        let mut h = tape.constant(Matrix::zeros(1, h_dim));
        let mut c = tape.constant(Matrix::zeros(1, h_dim));
        let b_hn = rnn.b_hn.map(|id| tape.param(id));
        let mut outputs = vec![h; t_len];
        let order: Vec<usize> = if reverse {
            (0..t_len).rev().collect()
        } else {
            (0..t_len).collect()
        };
        for t in order {
            let xt = tape.slice_rows(xw, t, 1);
            let hu = tape.matmul(h, u);
            match cell {
                Cell::Lstm => {
                    let pre = tape.add(xt, hu);
                    let i = tape.slice_cols(pre, 0, h_dim);
                    let i = tape.sigmoid(i);
                    let f = tape.slice_cols(pre, h_dim, h_dim);
                    let f = tape.sigmoid(f);
                    let g = tape.slice_cols(pre, 2 * h_dim, h_dim);
                    let g = tape.tanh(g);
                    let o = tape.slice_cols(pre, 3 * h_dim, h_dim);
                    let o = tape.sigmoid(o);
                    let fc = tape.mul(f, c);
                    let ig = tape.mul(i, g);
                    c = tape.add(fc, ig);
                    let tc = tape.tanh(c);
                    h = tape.mul(o, tc);
                }
                Cell::Gru => {
                    let xz = tape.slice_cols(xt, 0, h_dim);
                    let xr = tape.slice_cols(xt, h_dim, h_dim);
                    let xn = tape.slice_cols(xt, 2 * h_dim, h_dim);
                    let hz = tape.slice_cols(hu, 0, h_dim);
                    let hr = tape.slice_cols(hu, h_dim, h_dim);
                    let hn = tape.slice_cols(hu, 2 * h_dim, h_dim);
                    let hn = tape.add_row(hn, b_hn.expect("gru bias"));
                    let z = tape.add(xz, hz);
                    let z = tape.sigmoid(z);
                    let r = tape.add(xr, hr);
                    let r = tape.sigmoid(r);
                    let rh = tape.mul(r, hn);
                    let n = tape.add(xn, rh);
                    let n = tape.tanh(n);
                    let keep = tape.mul(z, h);
                    let one_minus_z = tape.one_minus(z);
                    let fresh = tape.mul(one_minus_z, n);
                    h = tape.add(fresh, keep);
                }
            }
            outputs[t] = h;
        }
        tape.concat_rows(&outputs)
    }

    /// Raw `T x 2` outputs (density, loudness) for standardized input.
    fn graph(&self, tape: &mut Tape, x: &Matrix) -> Var {
        let x = tape.constant(x.clone());
        let features = match &self.body {
            Body::Fc { w1, b1 } => {
                let w = tape.param(*w1);
                let b = tape.param(*b1);
                let h = tape.matmul(x, w);
                let h = tape.add_row(h, b);
                tape.relu(h)
            }
            Body::Recurrent { cell, layers } => {
                let mut h = x;
                for layer in layers {
                    let outs: Vec<Var> = layer
                        .iter()
                        .enumerate()
                        .map(|(d, rnn)| self.run_direction(tape, h, rnn, *cell, d == 1))
                        .collect();
                    h = if outs.len() == 1 {
                        outs[0]
                    } else {
                        tape.concat_cols(&outs)
                    };
                }
                h
            }
        };
        let w = tape.param(self.head_w);
        let b = tape.param(self.head_b);
        let y = tape.matmul(features, w);
        tape.add_row(y, b)
    }

    /// Unclamped outputs; used for training diagnostics.
    pub fn raw_outputs(&self, video: &Matrix) -> Result<Matrix> {
        let x = self.standardize(video)?;
        let mut tape = Tape::new(&self.params);
        let y = self.graph(&mut tape, &x);
        Ok(tape.value(y).clone())
    }

    pub fn predict(&self, video: &Matrix) -> Result<Expressive> {
        let y = self.raw_outputs(video)?;
        Ok(Expressive {
            note_density: (0..y.rows()).map(|t| y.get(t, 0).max(0.0)).collect(),
            loudness: (0..y.rows()).map(|t| y.get(t, 1).clamp(0.0, 1.0)).collect(),
        })
    }

    /// Validation RMSE of (density, loudness) pooled over all steps.
    pub fn evaluate(&self, records: &[FeatureRecord]) -> Result<(f64, f64)> {
        let (mut pd, mut ad, mut pl, mut al) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for r in records {
            let (x, y) = regression_pair(r);
            let p = self.predict(&x)?;
            pd.extend(p.note_density);
            pl.extend(p.loudness);
            ad.extend((0..y.rows()).map(|t| y.get(t, 0)));
            al.extend((0..y.rows()).map(|t| y.get(t, 1)));
        }
        Ok((rmse(&pd, &ad)?, rmse(&pl, &al)?))
    }

    pub fn to_checkpoint(&self, meta: serde_json::Value) -> Result<Checkpoint> {
        let config = serde_json::json!({
            "regressor": serde_json::to_value(self.config)?,
            "input_dim": self.input_dim,
        });
        let mut ck = Checkpoint::new("regressor", config, meta);
        ck.extend_params("param.", &self.params);
        ck.push("norm.mean", Matrix::from_vec(1, self.input_dim, self.mean.clone()));
        ck.push("norm.std", Matrix::from_vec(1, self.input_dim, self.std.clone()));
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind("regressor")?;
        let config: RegressorConfig = serde_json::from_value(ck.config["regressor"].clone())?;
        let input_dim = ck.config["input_dim"]
            .as_u64()
            .ok_or_else(|| Error::Checkpoint("missing input_dim".into()))? as usize;
        let mut reg = Regressor::new(config, input_dim)?;
        let stored = ck.params("param.");
        if stored.len() != reg.params.len() {
            return Err(Error::Checkpoint(format!(
                "regressor checkpoint has {} tensors, expected {}",
                stored.len(),
                reg.params.len()
            )));
        }
        for id in reg.params.ids().collect::<Vec<_>>() {
            let name = reg.params.name(id).to_string();
            let src = stored
                .find(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
            let m = stored.get(src);
            if m.shape() != reg.params.get(id).shape() {
                return Err(Error::Checkpoint(format!("tensor `{name}` has the wrong shape")));
            }
            *reg.params.get_mut(id) = m.clone();
        }
        let row = |name: &str| -> Result<Vec<f64>> {
            let m = ck
                .tensor(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
            if m.shape() != (1, input_dim) {
                return Err(Error::Checkpoint(format!("tensor `{name}` has the wrong shape")));
            }
            Ok(m.data().to_vec())
        };
        reg.mean = row("norm.mean")?;
        reg.std = row("norm.std")?;
        Ok(reg)
    }
}

/// Video features and `T x 2` (density, loudness) targets for one record.
pub fn regression_pair(record: &FeatureRecord) -> (Matrix, Matrix) {
    let ex = crate::dataset::clip_or_pad(record, record.length_s);
    let x = ex.video_features();
    let mut y = Matrix::zeros(record.length_s, 2);
    for t in 0..record.length_s {
        y.set(t, 0, ex.note_density[t]);
        y.set(t, 1, ex.loudness[t]);
    }
    (x, y)
}

/// Per-epoch regressor training summary.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegressorEpoch {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_rmse: Option<(f64, f64)>,
}

impl RegressorEpoch {
    pub fn line(&self) -> String {
        match self.val_rmse {
            Some((d, l)) => format!("{},{:.6},{:.6},{:.6}", self.epoch, self.train_mse, d, l),
            None => format!("{},{:.6},na,na", self.epoch, self.train_mse),
        }
    }
}

/// Trains on mean squared error of both heads, summed with equal weight.
pub fn train_regressor(
    config: RegressorConfig,
    train_set: &[FeatureRecord],
    val_set: &[FeatureRecord],
    mut on_epoch: impl FnMut(&RegressorEpoch),
) -> Result<(Regressor, Vec<RegressorEpoch>)> {
    let first = train_set
        .first()
        .ok_or_else(|| Error::InvalidInput("regressor training set is empty".into()))?;
    let input_dim = crate::dataset::NON_SEMANTIC_FEATURES + first.d_sem();
    let mut reg = Regressor::new(config, input_dim)?;
    let pairs: Vec<(Matrix, Matrix)> = train_set.iter().map(regression_pair).collect();
    if let Some((x, _)) = pairs.iter().find(|(x, _)| x.cols() != input_dim) {
        return Err(Error::Shape(format!(
            "mixed feature widths {} and {input_dim} in the training set",
            x.cols()
        )));
    }
    reg.fit_standardization(&pairs.iter().map(|(x, _)| x.clone()).collect::<Vec<_>>());
    let inputs: Vec<Matrix> = pairs.iter().map(|(x, _)| reg.standardize(x)).collect::<Result<_>>()?;
    let spec = OptimizerSpec {
        base_lr: config.lr,
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
        warmup_steps: 1,
    };
    let mut adam = Adam::new(spec, &reg.params);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x0EE5_5EED);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &i in &order {
            let y = &pairs[i].1;
            let grads = {
                let mut tape = Tape::new(&reg.params);
                let out = reg.graph(&mut tape, &inputs[i]);
                let target = tape.constant(y.clone());
                let neg = tape.scale(target, -1.0);
                let diff = tape.add(out, neg);
                let sq = tape.mul(diff, diff);
                let left = tape.constant(Matrix::filled(1, y.rows(), 1.0 / y.rows() as f64));
                let right = tape.constant(Matrix::filled(2, 1, 1.0));
                let per_head = tape.matmul(left, sq);
                let loss = tape.matmul(per_head, right);
                let value = tape.value(loss).item();
                if !value.is_finite() {
                    return Err(Error::Diverged(format!(
                        "regressor loss {value} at epoch {epoch} on `{}`",
                        train_set[i].id
                    )));
                }
                total += value;
                tape.backward(loss)
            };
            adam.apply(&mut reg.params, &grads, config.lr);
        }
        let val_rmse = if val_set.is_empty() {
            None
        } else {
            Some(reg.evaluate(val_set)?)
        };
        let entry = RegressorEpoch {
            epoch,
            train_mse: total / pairs.len() as f64,
            val_rmse,
        };
        log::info!("{}", entry.line());
        on_epoch(&entry);
        history.push(entry);
    }
    Ok((reg, history))
}

/// RMSE of always predicting the training-set mean, per head.
pub fn constant_baseline_rmse(train_set: &[FeatureRecord], eval_set: &[FeatureRecord]) -> Result<(f64, f64)> {
    let mean = |f: &dyn Fn(&FeatureRecord) -> Vec<f64>| {
        let all: Vec<f64> = train_set.iter().flat_map(f).collect();
        all.iter().sum::<f64>() / all.len().max(1) as f64
    };
    let density = |r: &FeatureRecord| r.note_density.iter().map(|&d| d as f64).collect::<Vec<_>>();
    let loudness = |r: &FeatureRecord| r.loudness.clone();
    let (md, ml) = (mean(&density), mean(&loudness));
    let ad: Vec<f64> = eval_set.iter().flat_map(density).collect();
    let al: Vec<f64> = eval_set.iter().flat_map(loudness).collect();
    Ok((rmse(&vec![md; ad.len()], &ad)?, rmse(&vec![ml; al.len()], &al)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{synthesize_dataset, SynthConfig};

    fn tiny(kind: RegressorKind) -> RegressorConfig {
        RegressorConfig {
            kind,
            hidden: 4,
            layers: 2,
            fc_hidden: 8,
            epochs: 1,
            lr: 1e-2,
            seed: 3,
        }
    }

    fn grad_check(kind: RegressorKind) {
        let reg = Regressor::new(tiny(kind), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Matrix::randn(4, 3, 1.0, &mut rng);
        let w = Matrix::randn(4, 2, 1.0, &mut rng);
        let loss_of = |params: &ParamStore| {
            let mut r = reg.clone();
            r.params = params.clone();
            let mut tape = Tape::new(&r.params);
            let y = r.graph(&mut tape, &x);
            let wv = tape.constant(w.clone());
            let prod = tape.mul(y, wv);
            let ones_l = tape.constant(Matrix::filled(1, 4, 1.0));
            let ones_r = tape.constant(Matrix::filled(2, 1, 1.0));
            let s = tape.matmul(ones_l, prod);
            let s = tape.matmul(s, ones_r);
            (tape.value(s).item(), tape.backward(s))
        };
        let (_, grads) = loss_of(&reg.params);
        let h = 1e-6;
        for id in reg.params.ids().collect::<Vec<_>>() {
            for k in 0..reg.params.get(id).len() {
                let mut plus = reg.params.clone();
                plus.get_mut(id).data_mut()[k] += h;
                let mut minus = reg.params.clone();
                minus.get_mut(id).data_mut()[k] -= h;
                let numeric = (loss_of(&plus).0 - loss_of(&minus).0) / (2.0 * h);
                let analytic = grads[id.index()].data()[k];
                let denom = numeric.abs().max(analytic.abs()).max(1e-6);
                assert!(
                    (numeric - analytic).abs() / denom < 1e-4,
                    "{kind} {} [{k}]: {numeric} vs {analytic}",
                    reg.params.name(id)
                );
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        for kind in RegressorKind::ALL {
            grad_check(kind);
        }
    }

    #[test]
    fn parameter_shapes() {
        let bigru = Regressor::new(RegressorConfig::default(), 24).unwrap();
        // layer 0: 2 x (24*192 + 64*192 + 192 + 64); layer 1 input 128
        let l0 = 2 * (24 * 192 + 64 * 192 + 192 + 64);
        let l1 = 2 * (128 * 192 + 64 * 192 + 192 + 64);
        assert_eq!(bigru.params().scalar_count(), l0 + l1 + 128 * 2 + 2);
        let fc = Regressor::new(
            RegressorConfig {
                kind: RegressorKind::Fc,
                ..Default::default()
            },
            24,
        )
        .unwrap();
        assert_eq!(fc.params().scalar_count(), 24 * 512 + 512 + 512 * 2 + 2);
    }

    #[test]
    fn fc_is_timestep_local() {
        let reg = Regressor::new(tiny(RegressorKind::Fc), 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Matrix::randn(6, 5, 1.0, &mut rng);
        let perm = [3usize, 0, 5, 1, 4, 2];
        let px = Matrix::from_rows(&perm.iter().map(|&i| x.row(i).to_vec()).collect::<Vec<_>>());
        let y = reg.raw_outputs(&x).unwrap();
        let py = reg.raw_outputs(&px).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            assert_eq!(py.row(k), y.row(i));
        }
    }

    #[test]
    fn predictions_are_clamped_and_checkpoint_round_trips() {
        let recs = synthesize_dataset(
            3,
            1,
            &SynthConfig {
                d_sem: 4,
                length_s: 8,
                ..Default::default()
            },
        )
        .unwrap();
        let (reg, log) = train_regressor(tiny(RegressorKind::Gru), &recs[..2], &recs[2..], |_| {}).unwrap();
        assert_eq!(log.len(), 1);
        let (x, _) = regression_pair(&recs[2]);
        let p = reg.predict(&x).unwrap();
        assert!(p.note_density.iter().all(|&d| d >= 0.0));
        assert!(p.loudness.iter().all(|&l| (0.0..=1.0).contains(&l)));
        let ck = reg.to_checkpoint(serde_json::Value::Null).unwrap();
        let back = Regressor::from_checkpoint(&Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap()).unwrap();
        assert_eq!(back.predict(&x).unwrap(), p);
    }

    #[test]
    fn kind_names_parse() {
        for k in RegressorKind::ALL {
            assert_eq!(k.name().parse::<RegressorKind>().unwrap(), k);
        }
        assert!("cnn".parse::<RegressorKind>().is_err());
    }
}
