use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::checkpoint::Checkpoint;
use super::{Array, GradError, Graph, Real};

const M_PREFIX: &str = "__adam_m/";
const V_PREFIX: &str = "__adam_v/";
const STEP_NAME: &str = "__adam_step";

/// Adam hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
struct Slot<T: Real> {
    value: Array<T>,
    grad: Array<T>,
    m: Array<T>,
    v: Array<T>,
}

/// Named trainable parameters plus Adam state.
///
/// Names iterate in sorted order so every pass over the store is
/// deterministic.
#[derive(Clone, Debug)]
pub struct ParamStore<T: Real> {
    slots: BTreeMap<String, Slot<T>>,
    step: u64,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            slots: BTreeMap::new(),
            step: 0,
        }
    }

    pub fn insert(&mut self, name: &str, value: Array<T>) -> Result<(), GradError> {
        if name.starts_with("__") {
            return Err(GradError::InvalidArgument(format!("reserved parameter name {name:?}")));
        }
        if self.slots.contains_key(name) {
            return Err(GradError::DuplicateParam(name.to_string()));
        }
        let zeros = Array::zeros(value.shape());
        self.slots.insert(
            name.to_string(),
            Slot {
                grad: zeros.clone(),
                m: zeros.clone(),
                v: zeros,
                value,
            },
        );
        Ok(())
    }

    /// Uniform in `±1/sqrt(fan_in)`.
    pub fn insert_uniform(
        &mut self,
        name: &str,
        shape: &[usize],
        fan_in: usize,
        rng: &mut impl Rng,
    ) -> Result<(), GradError> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound);
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::from_f64(dist.sample(rng))).collect();
        self.insert(name, Array::from_vec(shape, data)?)
    }

    pub fn insert_normal(&mut self, name: &str, shape: &[usize], std: f64, rng: &mut impl Rng) -> Result<(), GradError> {
        let dist = Normal::new(0.0, std).map_err(|e| GradError::InvalidArgument(e.to_string()))?;
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::from_f64(dist.sample(rng))).collect();
        self.insert(name, Array::from_vec(shape, data)?)
    }

    pub fn insert_full(&mut self, name: &str, shape: &[usize], value: f64) -> Result<(), GradError> {
        self.insert(name, Array::full(shape, T::from_f64(value)))
    }

    pub fn value(&self, name: &str) -> Option<&Array<T>> {
        self.slots.get(name).map(|s| &s.value)
    }

    pub fn value_mut(&mut self, name: &str) -> Option<&mut Array<T>> {
        self.slots.get_mut(name).map(|s| &mut s.value)
    }

    pub fn grad(&self, name: &str) -> Option<&Array<T>> {
        self.slots.get(name).map(|s| &s.grad)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.slots.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Same parameters and optimizer state in another precision.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            slots: self
                .slots
                .iter()
                .map(|(k, s)| {
                    (
                        k.clone(),
                        Slot {
                            value: s.value.cast(),
                            grad: s.grad.cast(),
                            m: s.m.cast(),
                            v: s.v.cast(),
                        },
                    )
                })
                .collect(),
            step: self.step,
        }
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.slots.values().map(|s| s.value.len()).sum()
    }

    /// Adds the gradients of every parameter bound in `graph` to the stored
    /// gradients. Call once per graph; several graphs may contribute to one
    /// step.
    pub fn accumulate_grads(&mut self, graph: &Graph<T>) -> Result<(), GradError> {
        for (name, var) in graph.param_bindings() {
            let slot = self
                .slots
                .get_mut(name)
                .ok_or_else(|| GradError::UnknownParam(name.clone()))?;
            if let Some(g) = graph.grad(*var) {
                slot.grad.add_assign(g);
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for slot in self.slots.values_mut() {
            slot.grad.fill(T::ZERO);
        }
    }

    /// Scales every stored gradient, e.g. to average over a batch.
    pub fn scale_grads(&mut self, s: f64) {
        let s = T::from_f64(s);
        for slot in self.slots.values_mut() {
            slot.grad.data_mut().iter_mut().for_each(|g| *g *= s);
        }
    }

    pub fn grads_finite(&self) -> bool {
        self.slots.values().all(|s| s.grad.all_finite())
    }

    /// One bias-corrected Adam update of every parameter, then clears grads.
    pub fn adam_step(&mut self, cfg: &AdamConfig) {
        self.step += 1;
        let t = self.step as f64;
        let (b1, b2) = (T::from_f64(cfg.beta1), T::from_f64(cfg.beta2));
        let (c1, c2) = (T::ONE - b1, T::ONE - b2);
        let bc1 = T::from_f64(1.0 - cfg.beta1.powf(t));
        let bc2 = T::from_f64(1.0 - cfg.beta2.powf(t));
        let lr = T::from_f64(cfg.lr);
        let eps = T::from_f64(cfg.eps);
        for slot in self.slots.values_mut() {
            let Slot { value, grad, m, v } = slot;
            for (((p, g), m), v) in value
                .data_mut()
                .iter_mut()
                .zip(grad.data_mut())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = b1 * *m + c1 * *g;
                *v = b2 * *v + c2 * *g * *g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *p -= lr * mhat / (vhat.sqrt() + eps);
                *g = T::ZERO;
            }
        }
    }

    /// Parameters and optimizer state as checkpoint entries (single precision).
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::default();
        for (name, slot) in &self.slots {
            ck.push(name, slot.value.cast());
        }
        for (name, slot) in &self.slots {
            ck.push(&format!("{M_PREFIX}{name}"), slot.m.cast());
            ck.push(&format!("{V_PREFIX}{name}"), slot.v.cast());
        }
        ck.push(STEP_NAME, Array::scalar(self.step as f32));
        ck
    }

    /// Rebuilds a store from checkpoint entries, ignoring entries under other
    /// reserved prefixes.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, GradError> {
        let mut store = Self::new();
        for (name, arr) in ck.entries() {
            if !name.starts_with("__") {
                store.insert(name, arr.cast())?;
            }
        }
        for (name, arr) in ck.entries() {
            let (target, is_m) = if let Some(n) = name.strip_prefix(M_PREFIX) {
                (n, true)
            } else if let Some(n) = name.strip_prefix(V_PREFIX) {
                (n, false)
            } else {
                continue;
            };
            let slot = store
                .slots
                .get_mut(target)
                .ok_or_else(|| GradError::Malformed(format!("optimizer state for unknown {target:?}")))?;
            if arr.shape() != slot.value.shape() {
                return Err(GradError::Shape {
                    op: "from_checkpoint",
                    lhs: slot.value.shape().to_vec(),
                    rhs: arr.shape().to_vec(),
                });
            }
            if is_m {
                slot.m = arr.cast();
            } else {
                slot.v = arr.cast();
            }
        }
        if let Some(step) = ck.get(STEP_NAME) {
            store.step = step.item() as u64;
        }
        Ok(store)
    }
}
