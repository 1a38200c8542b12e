//! Small dense network with a dueling head, hand-written backpropagation,
//! SGD/Adam, and hard target copies.
//!
//! The trunk is a stack of ReLU layers (possibly empty). Two linear heads sit
//! on top: a scalar state value `v` and per-action advantages `A`, combined as
//! `q = v + A − mean(A)`.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    /// Row-major `outputs × inputs`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    /// Weights uniform in `±1/√inputs`, zero biases.
    pub fn init<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (inputs.max(1) as f64).sqrt();
        Self {
            inputs,
            outputs,
            weights: (0..inputs * outputs)
                .map(|_| rng.gen_range(-bound..=bound))
                .collect(),
            bias: vec![0.0; outputs],
        }
    }

    fn forward_into(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(
            self.weights
                .chunks_exact(self.inputs)
                .zip(&self.bias)
                .map(|(w, b)| w.iter().zip(x).map(|(w, x)| w * x).sum::<f64>() + b),
        );
    }

    /// Accumulates parameter gradients for upstream `dz` and adds `Wᵀ dz` to `dx`.
    fn backward_into(&self, x: &[f64], dz: &[f64], dw: &mut [f64], db: &mut [f64], dx: &mut [f64]) {
        for (o, &g) in dz.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            db[o] += g;
            let row = o * self.inputs;
            for i in 0..self.inputs {
                dw[row + i] += g * x[i];
                dx[i] += g * self.weights[row + i];
            }
        }
    }
}

/// Parameters of a dueling feedforward network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DuelingNet {
    pub trunk: Vec<Dense>,
    pub value: Dense,
    pub advantage: Dense,
}

pub type NetworkParameters = DuelingNet;

struct Cache {
    /// Input followed by each trunk layer's post-activation output.
    activations: Vec<Vec<f64>>,
    v: f64,
    adv: Vec<f64>,
}

impl DuelingNet {
    pub fn new<R: Rng + ?Sized>(
        input_dim: usize,
        hidden: &[usize],
        num_actions: usize,
        rng: &mut R,
    ) -> Self {
        let mut trunk = Vec::with_capacity(hidden.len());
        let mut width = input_dim;
        for &h in hidden {
            trunk.push(Dense::init(width, h, rng));
            width = h;
        }
        Self {
            trunk,
            value: Dense::init(width, 1, rng),
            advantage: Dense::init(width, num_actions, rng),
        }
    }

    pub fn zeros(input_dim: usize, hidden: &[usize], num_actions: usize) -> Self {
        let mut trunk = Vec::with_capacity(hidden.len());
        let mut width = input_dim;
        for &h in hidden {
            trunk.push(Dense::zeros(width, h));
            width = h;
        }
        Self {
            trunk,
            value: Dense::zeros(width, 1),
            advantage: Dense::zeros(width, num_actions),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.trunk.first().unwrap_or(&self.value).inputs
    }

    pub fn num_actions(&self) -> usize {
        self.advantage.outputs
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() == self.input_dim() {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "input has {} features, network expects {}",
                x.len(),
                self.input_dim()
            )))
        }
    }

    fn run(&self, x: &[f64]) -> Cache {
        let mut activations = Vec::with_capacity(self.trunk.len() + 1);
        activations.push(x.to_vec());
        for layer in &self.trunk {
            let mut h = Vec::with_capacity(layer.outputs);
            layer.forward_into(activations.last().unwrap(), &mut h);
            h.iter_mut().for_each(|z| *z = z.max(0.0));
            activations.push(h);
        }
        let top = activations.last().unwrap();
        let mut v = Vec::with_capacity(1);
        self.value.forward_into(top, &mut v);
        let mut adv = Vec::with_capacity(self.advantage.outputs);
        self.advantage.forward_into(top, &mut adv);
        Cache {
            activations,
            v: v[0],
            adv,
        }
    }

    fn combine(v: f64, adv: &[f64]) -> Vec<f64> {
        let mean = adv.iter().sum::<f64>() / adv.len() as f64;
        adv.iter().map(|a| v + a - mean).collect()
    }

    /// Action values for one feature vector.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let c = self.run(x);
        Ok(Self::combine(c.v, &c.adv))
    }

    /// Loss `½(q[a] − target)²` and its exact gradient.
    pub fn backward(&self, x: &[f64], action: usize, target: f64) -> Result<(f64, GradientSet)> {
        let mut grads = GradientSet::zeros_like(self);
        let loss = self.accumulate(x, action, target, 1.0, &mut grads)?;
        Ok((loss, grads))
    }

    /// Adds `scale · ∇½(q[a] − target)²` into `grads` and returns the unscaled loss.
    pub fn accumulate(
        &self,
        x: &[f64],
        action: usize,
        target: f64,
        scale: f64,
        grads: &mut GradientSet,
    ) -> Result<f64> {
        self.check_input(x)?;
        let n = self.num_actions();
        if action >= n {
            return Err(Error::Shape(format!("action {action} with {n} outputs")));
        }
        grads.check_congruent(self)?;
        let c = self.run(x);
        let q = Self::combine(c.v, &c.adv);
        let delta = q[action] - target;
        let loss = 0.5 * delta * delta;
        let g = delta * scale;

        let top = c.activations.last().unwrap();
        let width = top.len();
        let mut dh = vec![0.0; width];
        let layers = self.trunk.len();
        let (dw_t, rest) = grads.tensors.split_at_mut(2 * layers);
        let (value_g, adv_g) = rest.split_at_mut(2);
        {
            let (dw, db) = value_g.split_at_mut(1);
            self.value
                .backward_into(top, &[g], &mut dw[0], &mut db[0], &mut dh);
        }
        {
            let dadv: Vec<f64> = (0..n)
                .map(|j| g * (if j == action { 1.0 } else { 0.0 } - 1.0 / n as f64))
                .collect();
            let (dw, db) = adv_g.split_at_mut(1);
            self.advantage
                .backward_into(top, &dadv, &mut dw[0], &mut db[0], &mut dh);
        }
        for l in (0..layers).rev() {
            let out = &c.activations[l + 1];
            let dz: Vec<f64> = dh
                .iter()
                .zip(out)
                .map(|(d, &h)| if h > 0.0 { *d } else { 0.0 })
                .collect();
            let input = &c.activations[l];
            let mut dx = vec![0.0; input.len()];
            let (dw, db) = dw_t[2 * l..2 * l + 2].split_at_mut(1);
            self.trunk[l].backward_into(input, &dz, &mut dw[0], &mut db[0], &mut dx);
            dh = dx;
        }
        Ok(loss)
    }

    /// Mean loss and mean gradient over `(features, action, target)` samples.
    pub fn batch_gradient<'a, I>(&self, samples: I) -> Result<(f64, GradientSet)>
    where
        I: IntoIterator<Item = (&'a [f64], usize, f64)>,
        I::IntoIter: ExactSizeIterator,
    {
        let samples = samples.into_iter();
        let count = samples.len();
        if count == 0 {
            return Err(Error::Contract("empty batch".into()));
        }
        let scale = 1.0 / count as f64;
        let mut grads = GradientSet::zeros_like(self);
        let mut total = 0.0;
        for (x, a, y) in samples {
            total += self.accumulate(x, a, y, scale, &mut grads)?;
        }
        Ok((total * scale, grads))
    }

    /// Parameter tensors in a fixed order: each trunk layer's weights and
    /// bias, then the value head, then the advantage head.
    pub fn tensors(&self) -> Vec<&[f64]> {
        self.layers()
            .flat_map(|l| [l.weights.as_slice(), l.bias.as_slice()])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<f64>> {
        self.trunk
            .iter_mut()
            .chain([&mut self.value, &mut self.advantage])
            .flat_map(|l| [&mut l.weights, &mut l.bias])
            .collect()
    }

    fn layers(&self) -> impl Iterator<Item = &Dense> {
        self.trunk.iter().chain([&self.value, &self.advantage])
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.iter().all(|x| x.is_finite()))
    }

    pub fn to_checkpoint(&self) -> String {
        let ckpt = Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            layers: self
                .layers()
                .map(|l| TensorEntry {
                    shape: [l.outputs, l.inputs],
                    weights: l.weights.clone(),
                    bias: l.bias.clone(),
                })
                .collect(),
        };
        serde_json::to_string(&ckpt).expect("checkpoint serializes")
    }

    pub fn from_checkpoint(text: &str) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_str(text)?;
        if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Shape(format!(
                "unsupported checkpoint {} v{}",
                ckpt.format, ckpt.version
            )));
        }
        if ckpt.layers.len() < 2 {
            return Err(Error::Shape("checkpoint needs both heads".into()));
        }
        let mut dense = Vec::with_capacity(ckpt.layers.len());
        for (i, t) in ckpt.layers.into_iter().enumerate() {
            let [outputs, inputs] = t.shape;
            if t.weights.len() != outputs * inputs || t.bias.len() != outputs {
                return Err(Error::Shape(format!("layer {i} does not match its shape")));
            }
            dense.push(Dense {
                inputs,
                outputs,
                weights: t.weights,
                bias: t.bias,
            });
        }
        let advantage = dense.pop().unwrap();
        let value = dense.pop().unwrap();
        let net = Self {
            trunk: dense,
            value,
            advantage,
        };
        let mut width = net.input_dim();
        for l in &net.trunk {
            if l.inputs != width {
                return Err(Error::Shape("trunk layers do not chain".into()));
            }
            width = l.outputs;
        }
        if net.value.inputs != width || net.advantage.inputs != width || net.value.outputs != 1 {
            return Err(Error::Shape("heads do not match the trunk".into()));
        }
        Ok(net)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_checkpoint())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&std::fs::read_to_string(path)?)
    }
}

const CHECKPOINT_FORMAT: &str = "avgrl-dueling";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    layers: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    /// `[outputs, inputs]`.
    shape: [usize; 2],
    weights: Vec<f64>,
    bias: Vec<f64>,
}

/// Hard copy used as the target network.
pub fn sync_target(online: &DuelingNet) -> DuelingNet {
    online.clone()
}

/// One gradient tensor per parameter tensor, in [`DuelingNet::tensors`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientSet {
    pub tensors: Vec<Vec<f64>>,
}

impl GradientSet {
    pub fn zeros_like(net: &DuelingNet) -> Self {
        Self {
            tensors: net.tensors().iter().map(|t| vec![0.0; t.len()]).collect(),
        }
    }

    fn check_congruent(&self, net: &DuelingNet) -> Result<()> {
        let shapes = net.tensors();
        if shapes.len() == self.tensors.len()
            && shapes
                .iter()
                .zip(&self.tensors)
                .all(|(p, g)| p.len() == g.len())
        {
            Ok(())
        } else {
            Err(Error::Shape("gradients do not match parameters".into()))
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors
            .iter()
            .flatten()
            .fold(0.0, |m, g| m.max(g.abs()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Self {
        Self {
            kind,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn sgd() -> Self {
        Self::new(OptimizerKind::Sgd)
    }

    pub fn adam() -> Self {
        Self::new(OptimizerKind::Adam)
    }

    pub fn step(&mut self, params: &mut DuelingNet, grads: &GradientSet, lr: f64) -> Result<()> {
        grads.check_congruent(params)?;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.tensors_mut().into_iter().zip(&grads.tensors) {
                    p.iter_mut().zip(g).for_each(|(p, g)| *p -= lr * g);
                }
            }
            OptimizerKind::Adam => {
                if self.m.is_empty() {
                    self.m = grads.tensors.iter().map(|g| vec![0.0; g.len()]).collect();
                    self.v = self.m.clone();
                }
                self.t += 1;
                let c1 = 1.0 - self.beta1.powi(self.t as i32);
                let c2 = 1.0 - self.beta2.powi(self.t as i32);
                let tensors = params.tensors_mut().into_iter().zip(&grads.tensors);
                for ((p, g), (m, v)) in tensors.zip(self.m.iter_mut().zip(self.v.iter_mut())) {
                    for i in 0..p.len() {
                        m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                        v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                        let m_hat = m[i] / c1;
                        let v_hat = v[i] / c2;
                        p[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
                    }
                }
            }
        }
        Ok(())
    }
}
