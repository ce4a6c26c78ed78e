//! Differentiable substitute classifiers used by the gradient attacks.
//!
//! All three models produce a logit `f(x)` with `P(y = 1 | x) = sigmoid(f(x))`
//! and are trained on binary cross-entropy. Parameter layouts (flat vector):
//!
//! * logistic: `[w (d), b]`
//! * mlp: `[W1 (H x d, row-major), b1 (H), w2 (H), b2]`, hidden layer `tanh`
//! * kernel: `[alpha (m), b]` over `m` stored centers, RBF bandwidth `s`,
//!   `K(x, c) = exp(-|x - c|^2 / (2 s^2))`

use std::fmt;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand_distr::{Distribution, StandardNormal};

use crate::data::{class_of, Dataset};
use crate::error::{invalid, GlError, Result};
use crate::rng::{derive_seed, seeded};
use crate::spatial::sq_dist;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Logistic,
    Mlp,
    Kernel,
}

impl ModelKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ModelKind::Logistic => "logistic",
            ModelKind::Mlp => "mlp",
            ModelKind::Kernel => "kernel",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "logistic" => Ok(ModelKind::Logistic),
            "mlp" => Ok(ModelKind::Mlp),
            "kernel" => Ok(ModelKind::Kernel),
            other => Err(invalid(format!("unknown model kind {other:?}"))),
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Training hyperparameters.
///
/// For the full-batch models (logistic, kernel) `learning_rate` is relative to
/// a computed smoothness bound `L` of the loss, so the step is
/// `learning_rate / L` and values `<= 1` never increase the loss. For the MLP
/// it is the raw SGD step.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub l2: f64,
    pub hidden: usize,
    pub momentum: f64,
    /// Upper bound on kernel centers; larger training sets are subsampled.
    pub max_centers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1.0,
            epochs: 300,
            batch_size: 32,
            seed: 0,
            l2: 1e-4,
            hidden: 64,
            momentum: 0.9,
            max_centers: 2000,
        }
    }
}

impl TrainConfig {
    /// Documented defaults per model kind.
    pub fn for_kind(kind: ModelKind) -> Self {
        match kind {
            ModelKind::Logistic => Self { epochs: 500, ..Self::default() },
            ModelKind::Mlp => Self { learning_rate: 0.05, epochs: 200, ..Self::default() },
            ModelKind::Kernel => Self { epochs: 500, ..Self::default() },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateModel {
    pub kind: ModelKind,
    pub input_dim: usize,
    pub hidden: usize,
    pub params: Vec<f64>,
    /// Kernel centers, row-major; empty for other kinds.
    pub centers: Vec<f64>,
    pub bandwidth: f64,
    pub train_config: TrainConfig,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Cross-entropy of logit `f` against label `y`.
fn bce(f: f64, y: f64) -> f64 {
    softplus(f) - y * f
}

impl SurrogateModel {
    /// Logistic model with explicit weights.
    pub fn logistic(w: Vec<f64>, b: f64) -> Self {
        let input_dim = w.len();
        let mut params = w;
        params.push(b);
        Self {
            kind: ModelKind::Logistic,
            input_dim,
            hidden: 0,
            params,
            centers: Vec::new(),
            bandwidth: 0.0,
            train_config: TrainConfig::for_kind(ModelKind::Logistic),
        }
    }

    /// MLP with explicit parameters in the documented layout.
    pub fn mlp(input_dim: usize, hidden: usize, params: Vec<f64>) -> Result<Self> {
        if params.len() != hidden * input_dim + 2 * hidden + 1 {
            return Err(invalid("mlp parameter vector has the wrong length"));
        }
        Ok(Self {
            kind: ModelKind::Mlp,
            input_dim,
            hidden,
            params,
            centers: Vec::new(),
            bandwidth: 0.0,
            train_config: TrainConfig { hidden, ..TrainConfig::for_kind(ModelKind::Mlp) },
        })
    }

    pub fn n_centers(&self) -> usize {
        if self.input_dim == 0 {
            0
        } else {
            self.centers.len() / self.input_dim
        }
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim {
            return Err(invalid(format!(
                "model expects dimension {}, got {}",
                self.input_dim,
                x.len()
            )));
        }
        Ok(())
    }

    /// Logit and its input gradient.
    fn logit_and_grad(&self, x: &[f64], want_grad: bool) -> (f64, Vec<f64>) {
        let d = self.input_dim;
        let p = &self.params;
        match self.kind {
            ModelKind::Logistic => {
                let f = p[..d].iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + p[d];
                (f, if want_grad { p[..d].to_vec() } else { Vec::new() })
            }
            ModelKind::Mlp => {
                let h = self.hidden;
                let (w1, rest) = p.split_at(h * d);
                let (b1, rest) = rest.split_at(h);
                let (w2, b2) = rest.split_at(h);
                let mut f = b2[0];
                let mut grad = if want_grad { vec![0.0; d] } else { Vec::new() };
                for j in 0..h {
                    let row = &w1[j * d..(j + 1) * d];
                    let a = row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b1[j];
                    let t = a.tanh();
                    f += w2[j] * t;
                    if want_grad {
                        let c = w2[j] * (1.0 - t * t);
                        for (g, w) in grad.iter_mut().zip(row) {
                            *g += c * w;
                        }
                    }
                }
                (f, grad)
            }
            ModelKind::Kernel => {
                let m = self.n_centers();
                let inv = 1.0 / (2.0 * self.bandwidth * self.bandwidth);
                let mut f = p[m];
                let mut grad = if want_grad { vec![0.0; d] } else { Vec::new() };
                for c in 0..m {
                    let center = &self.centers[c * d..(c + 1) * d];
                    let k = (-sq_dist(x, center) * inv).exp();
                    f += p[c] * k;
                    if want_grad {
                        let s = -2.0 * inv * p[c] * k;
                        for ((g, xv), cv) in grad.iter_mut().zip(x).zip(center) {
                            *g += s * (xv - cv);
                        }
                    }
                }
                (f, grad)
            }
        }
    }

    pub fn logit(&self, x: &[f64]) -> Result<f64> {
        self.check_dim(x)?;
        Ok(self.logit_and_grad(x, false).0)
    }

    /// `P(y = 1 | x)`, clamped into the open interval (0, 1).
    pub fn predict_proba(&self, x: &[f64]) -> Result<f64> {
        Ok(sigmoid(self.logit(x)?).clamp(1e-15, 1.0 - 1e-15))
    }

    /// Classes for row-major `points`.
    pub fn predict(&self, points: &[f64]) -> Result<Vec<u8>> {
        points
            .chunks(self.input_dim.max(1))
            .map(|x| Ok(u8::from(self.logit(x)? >= 0.0)))
            .collect()
    }

    /// Cross-entropy at `(x, y)`.
    pub fn loss(&self, x: &[f64], y: f64) -> Result<f64> {
        Ok(bce(self.logit(x)?, y))
    }

    /// Input gradient of the logit.
    pub fn logit_gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(x)?;
        Ok(self.logit_and_grad(x, true).1)
    }

    /// `grad_x` of the cross-entropy loss at `(x, target_label)`.
    pub fn gradient_wrt_input(&self, x: &[f64], target_label: f64) -> Result<Vec<f64>> {
        self.check_dim(x)?;
        let (f, g) = self.logit_and_grad(x, true);
        let s = sigmoid(f) - target_label;
        Ok(g.into_iter().map(|v| s * v).collect())
    }

    /// Accuracy on the labeled rows of `ds`.
    pub fn accuracy(&self, ds: &Dataset) -> Result<f64> {
        let idx = ds.labeled_indices();
        if idx.is_empty() {
            return Err(invalid("no labeled rows to score"));
        }
        let mut hit = 0;
        for &i in &idx {
            if u8::from(self.logit(ds.point(i))? >= 0.0) == class_of(ds.labels()[i]) {
                hit += 1;
            }
        }
        Ok(hit as f64 / idx.len() as f64)
    }

    /// Mean training objective (cross-entropy plus L2 penalty).
    pub fn objective(&self, xs: &[f64], ys: &[f64]) -> f64 {
        let d = self.input_dim;
        let n = ys.len();
        let ce: f64 = (0..n).map(|i| bce(self.logit_and_grad(&xs[i * d..(i + 1) * d], false).0, ys[i])).sum();
        ce / n as f64 + 0.5 * self.train_config.l2 * self.penalized_sq_norm()
    }

    fn penalized_sq_norm(&self) -> f64 {
        let d = self.input_dim;
        let p = &self.params;
        match self.kind {
            ModelKind::Logistic => p[..d].iter().map(|v| v * v).sum(),
            ModelKind::Mlp => {
                let h = self.hidden;
                p[..h * d].iter().chain(&p[h * d + h..h * d + 2 * h]).map(|v| v * v).sum()
            }
            ModelKind::Kernel => p[..self.n_centers()].iter().map(|v| v * v).sum(),
        }
    }

    /// Text header followed by little-endian f64 parameters, then centers.
    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.train_config;
        let header = format!(
            "glcert-model 1\nkind {}\ninput_dim {}\nhidden {}\nbandwidth {}\nlearning_rate {}\nepochs {}\nbatch_size {}\nseed {}\nl2 {}\nmomentum {}\nmax_centers {}\nn_params {}\nn_centers {}\nend\n",
            self.kind,
            self.input_dim,
            c.hidden,
            self.bandwidth,
            c.learning_rate,
            c.epochs,
            c.batch_size,
            c.seed,
            c.l2,
            c.momentum,
            c.max_centers,
            self.params.len(),
            self.n_centers(),
        );
        let mut out = header.into_bytes();
        for v in self.params.iter().chain(&self.centers) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| GlError::Load(format!("model file: {m}"));
        let marker = b"end\n";
        let end = bytes
            .windows(marker.len())
            .position(|w| w == marker)
            .ok_or_else(|| bad("missing header terminator"))?
            + marker.len();
        let header = std::str::from_utf8(&bytes[..end]).map_err(|_| bad("header is not UTF-8"))?;
        let mut lines = header.lines();
        if lines.next() != Some("glcert-model 1") {
            return Err(bad("unknown format tag"));
        }
        let mut fields = std::collections::HashMap::new();
        for line in lines {
            if line == "end" {
                break;
            }
            let (k, v) = line.split_once(' ').ok_or_else(|| bad("malformed header line"))?;
            fields.insert(k.to_string(), v.to_string());
        }
        let get = |k: &str| fields.get(k).ok_or_else(|| bad(&format!("missing {k}")));
        fn num<T: std::str::FromStr>(s: &str, k: &str) -> Result<T> {
            s.parse().map_err(|_| GlError::Load(format!("model file: bad {k}")))
        }
        let kind = ModelKind::parse(get("kind")?).map_err(|_| bad("unknown kind"))?;
        let input_dim: usize = num(get("input_dim")?, "input_dim")?;
        let n_params: usize = num(get("n_params")?, "n_params")?;
        let n_centers: usize = num(get("n_centers")?, "n_centers")?;
        let train_config = TrainConfig {
            learning_rate: num(get("learning_rate")?, "learning_rate")?,
            epochs: num(get("epochs")?, "epochs")?,
            batch_size: num(get("batch_size")?, "batch_size")?,
            seed: num(get("seed")?, "seed")?,
            l2: num(get("l2")?, "l2")?,
            hidden: num(get("hidden")?, "hidden")?,
            momentum: num(get("momentum")?, "momentum")?,
            max_centers: num(get("max_centers")?, "max_centers")?,
        };
        let n_floats = n_params + n_centers * input_dim;
        let body = &bytes[end..];
        if body.len() != 8 * n_floats {
            return Err(bad("payload length does not match header"));
        }
        let floats: Vec<f64> = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        let model = Self {
            kind,
            input_dim,
            hidden: train_config.hidden * usize::from(kind == ModelKind::Mlp),
            params: floats[..n_params].to_vec(),
            centers: floats[n_params..].to_vec(),
            bandwidth: num(get("bandwidth")?, "bandwidth")?,
            train_config,
        };
        let expected = match kind {
            ModelKind::Logistic => input_dim + 1,
            ModelKind::Mlp => model.hidden * input_dim + 2 * model.hidden + 1,
            ModelKind::Kernel => n_centers + 1,
        };
        if expected != n_params {
            return Err(bad("parameter count inconsistent with kind"));
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::File::create(path)?.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

fn training_arrays(train: &Dataset) -> Result<(Vec<f64>, Vec<f64>)> {
    let idx = train.labeled_indices();
    if idx.len() < 2 {
        return Err(invalid("training needs at least 2 labeled points"));
    }
    let d = train.dim();
    let mut xs = Vec::with_capacity(idx.len() * d);
    let mut ys = Vec::with_capacity(idx.len());
    for &i in &idx {
        xs.extend_from_slice(train.point(i));
        ys.push(f64::from(class_of(train.labels()[i])));
    }
    if ys.iter().all(|&y| y == ys[0]) {
        return Err(GlError::SingleClass("training data contains a single class".into()));
    }
    Ok((xs, ys))
}

fn check_finite(loss: f64, epoch: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(GlError::Training(format!("loss diverged at epoch {epoch}")))
    }
}

/// Median pairwise distance over at most 1000 seeded-sampled points.
pub fn median_pairwise_distance(xs: &[f64], d: usize, seed: u64) -> f64 {
    let n = xs.len() / d;
    let sample: Vec<usize> = if n > 1000 {
        let mut rng = seeded(seed, 7);
        let mut s = index::sample(&mut rng, n, 1000).into_vec();
        s.sort_unstable();
        s
    } else {
        (0..n).collect()
    };
    let mut dists = Vec::with_capacity(sample.len() * sample.len() / 2);
    for (a, &i) in sample.iter().enumerate() {
        for &j in &sample[a + 1..] {
            dists.push(sq_dist(&xs[i * d..(i + 1) * d], &xs[j * d..(j + 1) * d]).sqrt());
        }
    }
    if dists.is_empty() {
        return 1.0;
    }
    let mid = dists.len() / 2;
    let (_, m, _) = dists.select_nth_unstable_by(mid, f64::total_cmp);
    *m
}

/// Trains a surrogate on the labeled rows of `train`.
pub fn train_surrogate(kind: ModelKind, train: &Dataset, cfg: &TrainConfig) -> Result<SurrogateModel> {
    let (xs, ys) = training_arrays(train)?;
    train_on_arrays(kind, train.dim(), &xs, &ys, cfg)
}

fn train_on_arrays(kind: ModelKind, d: usize, xs: &[f64], ys: &[f64], cfg: &TrainConfig) -> Result<SurrogateModel> {
    if cfg.epochs == 0 || !(cfg.learning_rate > 0.0) || cfg.l2 < 0.0 {
        return Err(invalid("training config needs epochs >= 1, learning_rate > 0, l2 >= 0"));
    }
    match kind {
        ModelKind::Logistic => train_logistic(d, xs, ys, cfg),
        ModelKind::Mlp => train_mlp(d, xs, ys, cfg),
        ModelKind::Kernel => train_kernel(d, xs, ys, cfg),
    }
}

fn train_logistic(d: usize, xs: &[f64], ys: &[f64], cfg: &TrainConfig) -> Result<SurrogateModel> {
    let n = ys.len();
    // Hessian of the mean cross-entropy is bounded by (1/4) max |(x, 1)|^2.
    let max_sq = (0..n).map(|i| xs[i * d..(i + 1) * d].iter().map(|v| v * v).sum::<f64>() + 1.0).fold(0.0, f64::max);
    let step = cfg.learning_rate / (0.25 * max_sq + cfg.l2);
    let mut model = SurrogateModel::logistic(vec![0.0; d], 0.0);
    model.train_config = *cfg;
    let mut grad = vec![0.0; d + 1];
    for epoch in 0..cfg.epochs {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut loss = 0.0;
        for i in 0..n {
            let x = &xs[i * d..(i + 1) * d];
            let f = model.logit_and_grad(x, false).0;
            loss += bce(f, ys[i]);
            let r = sigmoid(f) - ys[i];
            for k in 0..d {
                grad[k] += r * x[k];
            }
            grad[d] += r;
        }
        check_finite(loss, epoch)?;
        for k in 0..=d {
            let reg = if k < d { cfg.l2 * model.params[k] } else { 0.0 };
            model.params[k] -= step * (grad[k] / n as f64 + reg);
        }
    }
    Ok(model)
}

fn train_mlp(d: usize, xs: &[f64], ys: &[f64], cfg: &TrainConfig) -> Result<SurrogateModel> {
    let n = ys.len();
    let h = cfg.hidden.max(1);
    let mut rng = seeded(cfg.seed, 0);
    let mut params = vec![0.0; h * d + 2 * h + 1];
    let s1 = (1.0 / d as f64).sqrt();
    let s2 = (1.0 / h as f64).sqrt();
    for v in &mut params[..h * d] {
        *v = s1 * { let z: f64 = StandardNormal.sample(&mut rng); z };
    }
    for v in &mut params[h * d + h..h * d + 2 * h] {
        *v = s2 * { let z: f64 = StandardNormal.sample(&mut rng); z };
    }
    let mut model = SurrogateModel::mlp(d, h, params)?;
    model.train_config = TrainConfig { hidden: h, ..*cfg };
    let bs = cfg.batch_size.clamp(1, n);
    let mut order: Vec<usize> = (0..n).collect();
    let mut velocity = vec![0.0; model.params.len()];
    let mut grad = vec![0.0; model.params.len()];
    let mut hidden = vec![0.0; h];
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss = 0.0;
        for batch in order.chunks(bs) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let p = &model.params;
            for &i in batch {
                let x = &xs[i * d..(i + 1) * d];
                let mut f = p[h * d + 2 * h];
                for j in 0..h {
                    let a = p[j * d..(j + 1) * d].iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + p[h * d + j];
                    hidden[j] = a.tanh();
                    f += p[h * d + h + j] * hidden[j];
                }
                loss += bce(f, ys[i]);
                let r = sigmoid(f) - ys[i];
                grad[h * d + 2 * h] += r;
                for j in 0..h {
                    grad[h * d + h + j] += r * hidden[j];
                    let da = r * p[h * d + h + j] * (1.0 - hidden[j] * hidden[j]);
                    grad[h * d + j] += da;
                    for (g, v) in grad[j * d..(j + 1) * d].iter_mut().zip(x) {
                        *g += da * v;
                    }
                }
            }
            let scale = 1.0 / batch.len() as f64;
            for k in 0..model.params.len() {
                let weight = k < h * d || (h * d + h..h * d + 2 * h).contains(&k);
                let reg = if weight { cfg.l2 * model.params[k] } else { 0.0 };
                velocity[k] = cfg.momentum * velocity[k] - cfg.learning_rate * (grad[k] * scale + reg);
                model.params[k] += velocity[k];
            }
        }
        check_finite(loss, epoch)?;
    }
    Ok(model)
}

fn train_kernel(d: usize, xs: &[f64], ys: &[f64], cfg: &TrainConfig) -> Result<SurrogateModel> {
    let n = ys.len();
    let bandwidth = median_pairwise_distance(xs, d, cfg.seed).max(1e-12);
    let center_idx: Vec<usize> = if n > cfg.max_centers.max(1) {
        let mut rng = seeded(derive_seed(cfg.seed, 1), 0);
        let mut s = index::sample(&mut rng, n, cfg.max_centers.max(1)).into_vec();
        s.sort_unstable();
        s
    } else {
        (0..n).collect()
    };
    let m = center_idx.len();
    let centers: Vec<f64> = center_idx.iter().flat_map(|&i| xs[i * d..(i + 1) * d].iter().copied()).collect();
    let inv = 1.0 / (2.0 * bandwidth * bandwidth);
    let gram: Vec<f64> = (0..n)
        .flat_map(|i| {
            let x = &xs[i * d..(i + 1) * d];
            let centers = &centers;
            (0..m).map(move |c| (-sq_dist(x, &centers[c * d..(c + 1) * d]) * inv).exp())
        })
        .collect();
    // Smoothness bound from ||[K 1]||_1 ||[K 1]||_inf / (4n).
    let max_row = (0..n).map(|i| gram[i * m..(i + 1) * m].iter().sum::<f64>() + 1.0).fold(0.0, f64::max);
    let mut col = vec![0.0; m];
    for i in 0..n {
        for c in 0..m {
            col[c] += gram[i * m + c];
        }
    }
    let max_col = col.iter().copied().fold(n as f64, f64::max);
    let lip = 0.25 * max_row * max_col / n as f64 + cfg.l2;
    let step = cfg.learning_rate / lip;
    let mut alpha = vec![0.0; m + 1];
    // Nesterov-accelerated gradient descent.
    let mut prev = alpha.clone();
    let mut grad = vec![0.0; m + 1];
    for epoch in 0..cfg.epochs {
        let mom = epoch as f64 / (epoch as f64 + 3.0);
        let look: Vec<f64> = alpha.iter().zip(&prev).map(|(a, p)| a + mom * (a - p)).collect();
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut loss = 0.0;
        for i in 0..n {
            let row = &gram[i * m..(i + 1) * m];
            let f = row.iter().zip(&look[..m]).map(|(k, a)| k * a).sum::<f64>() + look[m];
            loss += bce(f, ys[i]);
            let r = sigmoid(f) - ys[i];
            for c in 0..m {
                grad[c] += r * row[c];
            }
            grad[m] += r;
        }
        check_finite(loss, epoch)?;
        prev = alpha;
        alpha = look
            .iter()
            .enumerate()
            .map(|(k, &a)| {
                let reg = if k < m { cfg.l2 * a } else { 0.0 };
                a - step * (grad[k] / n as f64 + reg)
            })
            .collect();
    }
    Ok(SurrogateModel {
        kind: ModelKind::Kernel,
        input_dim: d,
        hidden: 0,
        params: alpha,
        centers,
        bandwidth,
        train_config: *cfg,
    })
}

/// Result of the query-based substitute training loop.
#[derive(Debug, Clone)]
pub struct SubstituteResult {
    pub model: SurrogateModel,
    /// Total number of points whose label was requested from the victim.
    pub queries: usize,
    /// Size of the pool used for the final fit.
    pub pool_size: usize,
    pub rounds: usize,
}

pub const SUBSTITUTE_POOL_CAP: usize = 10_000;

/// Jacobian-based dataset augmentation: in each round, label the new pool
/// points with the victim, fit a surrogate on the whole pool, and (except after
/// the last fit) add `x + aug_step * sign(grad_x score_label(x))` for every pool
/// point. `victim` maps row-major points to classes.
pub fn substitute_train_loop(
    victim: &mut dyn FnMut(&[f64]) -> Result<Vec<u8>>,
    seed_points: &Dataset,
    rounds: usize,
    aug_step: f64,
    kind: ModelKind,
    cfg: &TrainConfig,
) -> Result<SubstituteResult> {
    if rounds == 0 {
        return Err(invalid("substitute training needs at least one round"));
    }
    if seed_points.is_empty() {
        return Err(invalid("substitute training needs seed points"));
    }
    let d = seed_points.dim();
    let mut xs = seed_points.points().to_vec();
    let mut ys: Vec<f64> = Vec::new();
    let mut queries = 0;
    let mut rng = seeded(derive_seed(cfg.seed, 2), 0);
    let mut model = None;
    for round in 0..rounds {
        let new = &xs[ys.len() * d..];
        let labels = victim(new)?;
        if labels.len() * d != new.len() {
            return Err(GlError::Training("victim returned the wrong number of labels".into()));
        }
        queries += labels.len();
        ys.extend(labels.iter().map(|&c| f64::from(c)));
        if ys.iter().all(|&y| y == ys[0]) {
            return Err(GlError::SingleClass("victim labeled the whole pool with one class".into()));
        }
        let fitted = train_on_arrays(kind, d, &xs, &ys, cfg)?;
        if round + 1 < rounds {
            let n = ys.len();
            let mut fresh = Vec::with_capacity(n * d);
            for i in 0..n {
                let x = &xs[i * d..(i + 1) * d];
                let g = fitted.logit_gradient(x)?;
                let dir = if ys[i] >= 0.5 { 1.0 } else { -1.0 };
                fresh.extend(x.iter().zip(&g).map(|(v, gv)| v + aug_step * dir * sign(*gv)));
            }
            if n * 2 > SUBSTITUTE_POOL_CAP {
                // Keep labeled points first, then cap the new ones.
                let keep_old = n.min(SUBSTITUTE_POOL_CAP);
                if keep_old < n {
                    let pick = sorted_sample(&mut rng, n, keep_old);
                    xs = pick.iter().flat_map(|&i| xs[i * d..(i + 1) * d].to_vec()).collect();
                    ys = pick.iter().map(|&i| ys[i]).collect();
                }
                let room = SUBSTITUTE_POOL_CAP - keep_old;
                let pick = sorted_sample(&mut rng, n, room.min(n));
                for i in pick {
                    xs.extend_from_slice(&fresh[i * d..(i + 1) * d]);
                }
            } else {
                xs.extend(fresh);
            }
        }
        model = Some(fitted);
    }
    Ok(SubstituteResult {
        model: model.expect("at least one round"),
        queries,
        pool_size: ys.len(),
        rounds,
    })
}

fn sorted_sample(rng: &mut crate::rng::Rng, n: usize, k: usize) -> Vec<usize> {
    let mut s = index::sample(rng, n, k).into_vec();
    s.sort_unstable();
    s
}

pub(crate) fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_halfmoon;
    use rand::Rng;

    fn finite_difference(m: &SurrogateModel, x: &[f64], y: f64) -> Vec<f64> {
        let h = 1e-5;
        (0..x.len())
            .map(|k| {
                let mut a = x.to_vec();
                let mut b = x.to_vec();
                a[k] += h;
                b[k] -= h;
                (m.loss(&a, y).unwrap() - m.loss(&b, y).unwrap()) / (2.0 * h)
            })
            .collect()
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let num = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        let den = a.iter().chain(b).map(|v| v.abs()).fold(1e-8, f64::max);
        num / den
    }

    fn xor() -> Dataset {
        Dataset::new(
            "xor",
            2,
            vec![0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0, 1.0],
            vec![true; 4],
        )
        .unwrap()
    }

    fn halfmoon_small() -> Dataset {
        gen_halfmoon(200, 1, 0.2, 4).unwrap().0
    }

    #[test]
    fn separable_pair_logistic() {
        let ds = Dataset::new("p", 1, vec![-1.0, 1.0], vec![0.0, 1.0], vec![true; 2]).unwrap();
        let m = train_surrogate(ModelKind::Logistic, &ds, &TrainConfig::for_kind(ModelKind::Logistic)).unwrap();
        assert_eq!(m.accuracy(&ds).unwrap(), 1.0);
    }

    #[test]
    fn xor_needs_the_mlp() {
        let ds = xor();
        let cfg = TrainConfig { epochs: 2000, batch_size: 4, learning_rate: 0.1, ..TrainConfig::for_kind(ModelKind::Mlp) };
        let mlp = train_surrogate(ModelKind::Mlp, &ds, &cfg).unwrap();
        assert_eq!(mlp.accuracy(&ds).unwrap(), 1.0);
        let lr = train_surrogate(ModelKind::Logistic, &ds, &TrainConfig::for_kind(ModelKind::Logistic)).unwrap();
        assert!(lr.accuracy(&ds).unwrap() <= 0.75);
    }

    #[test]
    fn single_class_rejected() {
        let ds = Dataset::new("p", 1, vec![-1.0, 1.0], vec![1.0, 1.0], vec![true; 2]).unwrap();
        for kind in [ModelKind::Logistic, ModelKind::Mlp, ModelKind::Kernel] {
            assert!(matches!(train_surrogate(kind, &ds, &TrainConfig::for_kind(kind)), Err(GlError::SingleClass(_))));
        }
    }

    #[test]
    fn zero_weight_logistic_has_zero_gradient() {
        let m = SurrogateModel::logistic(vec![0.0; 3], 0.4);
        assert_eq!(m.gradient_wrt_input(&[1.0, 2.0, 3.0], 1.0).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let ds = halfmoon_small();
        let mut rng = seeded(99, 0);
        for kind in [ModelKind::Logistic, ModelKind::Mlp, ModelKind::Kernel] {
            let cfg = TrainConfig { epochs: 30, ..TrainConfig::for_kind(kind) };
            let m = train_surrogate(kind, &ds, &cfg).unwrap();
            let mut worst: f64 = 0.0;
            for _ in 0..50 {
                let x: [f64; 2] = [rng.random_range(-1.5..2.5), rng.random_range(-1.0..1.5)];
                let y = f64::from(rng.random::<bool>() as u8);
                let g = m.gradient_wrt_input(&x, y).unwrap();
                worst = worst.max(rel_err(&g, &finite_difference(&m, &x, y)));
            }
            assert!(worst <= 1e-4, "{kind}: {worst}");
        }
    }

    #[test]
    fn small_mlp_is_nearly_linear() {
        let mut rng = seeded(3, 0);
        let (d, h) = (5, 8);
        let params: Vec<f64> = (0..h * d + 2 * h + 1).map(|_| 1e-3 * rng.random_range(-1.0..1.0)).collect();
        let mlp = SurrogateModel::mlp(d, h, params.clone()).unwrap();
        // Linearization: f ~ w2 . (W1 x + b1) + b2.
        let mut w = vec![0.0; d];
        for j in 0..h {
            for k in 0..d {
                w[k] += params[h * d + h + j] * params[j * d + k];
            }
        }
        let lr = SurrogateModel::logistic(w, 0.0);
        let x: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let a = mlp.gradient_wrt_input(&x, 1.0).unwrap();
        let b = lr.gradient_wrt_input(&x, 1.0).unwrap();
        let cos = a.iter().zip(&b).map(|(p, q)| p * q).sum::<f64>()
            / (a.iter().map(|v| v * v).sum::<f64>().sqrt() * b.iter().map(|v| v * v).sum::<f64>().sqrt());
        assert!(cos >= 0.99, "cos = {cos}");
    }

    #[test]
    fn logistic_loss_is_monotone() {
        let ds = halfmoon_small();
        let (xs, ys) = training_arrays(&ds).unwrap();
        let mut prev = f64::INFINITY;
        for epochs in 1..40 {
            let cfg = TrainConfig { epochs, ..TrainConfig::for_kind(ModelKind::Logistic) };
            let m = train_surrogate(ModelKind::Logistic, &ds, &cfg).unwrap();
            let obj = m.objective(&xs, &ys);
            assert!(obj <= prev + 1e-12);
            prev = obj;
        }
    }

    #[test]
    fn training_is_deterministic() {
        let ds = halfmoon_small();
        for kind in [ModelKind::Logistic, ModelKind::Mlp, ModelKind::Kernel] {
            let cfg = TrainConfig { epochs: 20, seed: 5, ..TrainConfig::for_kind(kind) };
            let a = train_surrogate(kind, &ds, &cfg).unwrap();
            let b = train_surrogate(kind, &ds, &cfg).unwrap();
            assert_eq!(a.params.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.params.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        }
    }

    #[test]
    fn save_load_round_trip() {
        let ds = halfmoon_small();
        let dir = tempfile::tempdir().unwrap();
        for kind in [ModelKind::Logistic, ModelKind::Mlp, ModelKind::Kernel] {
            let cfg = TrainConfig { epochs: 5, ..TrainConfig::for_kind(kind) };
            let m = train_surrogate(kind, &ds, &cfg).unwrap();
            let path = dir.path().join(format!("{kind}.bin"));
            m.save(&path).unwrap();
            assert_eq!(SurrogateModel::load(&path).unwrap(), m);
        }
        assert!(SurrogateModel::from_bytes(b"nonsense").is_err());
    }

    #[test]
    fn one_round_equals_plain_training() {
        let ds = halfmoon_small();
        let cfg = TrainConfig { epochs: 50, ..TrainConfig::for_kind(ModelKind::Logistic) };
        let truth = ds.classes();
        let mut victim = |pts: &[f64]| -> Result<Vec<u8>> {
            Ok(pts.chunks(2).map(|p| ds.points().chunks(2).position(|q| q == p).map(|i| truth[i]).unwrap()).collect())
        };
        let res = substitute_train_loop(&mut victim, &ds.all_unlabeled(), 1, 0.1, ModelKind::Logistic, &cfg).unwrap();
        let direct = train_surrogate(ModelKind::Logistic, &ds, &cfg).unwrap();
        assert_eq!(res.model.params, direct.params);
        assert_eq!(res.queries, ds.len());
        assert_eq!(res.pool_size, ds.len());
    }

    #[test]
    fn pool_doubles_per_augmentation() {
        let ds = halfmoon_small();
        let cfg = TrainConfig { epochs: 10, ..TrainConfig::for_kind(ModelKind::Logistic) };
        let mut victim = |pts: &[f64]| -> Result<Vec<u8>> { Ok(pts.chunks(2).map(|p| u8::from(p[1] < 0.25)).collect()) };
        let res = substitute_train_loop(&mut victim, &ds, 3, 0.1, ModelKind::Logistic, &cfg).unwrap();
        assert_eq!(res.pool_size, ds.len() * 4);
        assert_eq!(res.queries, ds.len() * 4);
    }
}
