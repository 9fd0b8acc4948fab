//! Parameter storage, layer helpers and the AdamW optimizer.
//!
//! Parameters live in a [`ParamStore`] keyed by slash-separated names
//! (`point_branch/stem0.w`, ...). Each forward pass binds the store onto a
//! fresh tape; gradients are read back by name after `backward`.

use std::collections::BTreeMap;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha20Rng;

use crate::scalar::Scalar;
use crate::tape::{NodeId, Tape};

/// Named parameter tensors. BTreeMap keeps iteration (and therefore
/// serialization and optimizer updates) deterministic.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<S: Scalar> {
    entries: BTreeMap<String, ArrayD<S>>,
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, value: ArrayD<S>) {
        self.entries.insert(name.to_string(), value);
    }

    pub fn get(&self, name: &str) -> &ArrayD<S> {
        self.entries
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter '{name}'"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<S>)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut ArrayD<S>)> {
        self.entries.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|v| v.len()).sum()
    }

    /// Kaiming-normal conv weight + zero bias under `name.w` / `name.b`.
    pub fn init_conv(
        &mut self,
        name: &str,
        cout: usize,
        cin: usize,
        k: usize,
        rng: &mut ChaCha20Rng,
    ) {
        let std = (2.0 / (cin * k * k) as f64).sqrt();
        let w = ArrayD::from_shape_fn(IxDyn(&[cout, cin, k, k]), |_| {
            S::c(sample_normal(rng) * std)
        });
        self.insert(&format!("{name}.w"), w);
        self.insert(&format!("{name}.b"), ArrayD::zeros(IxDyn(&[cout])));
    }

    /// Bind every parameter onto a tape. `trainable` controls whether
    /// gradients flow (frozen teacher parameters bind as constants).
    pub fn bind(&self, tape: &mut Tape<S>, trainable: bool) -> ParamBinding {
        let mut ids = BTreeMap::new();
        for (name, value) in &self.entries {
            let id = if trainable {
                tape.var(value.clone())
            } else {
                tape.constant(value.clone())
            };
            ids.insert(name.clone(), id);
        }
        ParamBinding { ids }
    }

    /// FNV-1a checksum over names and exact value bits; used for the
    /// frozen-teacher contract.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut feed = |byte: u8| {
            h ^= byte as u64;
            h = h.wrapping_mul(0x100000001b3);
        };
        for (name, value) in &self.entries {
            for b in name.bytes() {
                feed(b);
            }
            for v in value.iter() {
                for b in v.to_f64_lossy().to_le_bytes() {
                    feed(b);
                }
            }
        }
        h
    }
}

fn sample_normal(rng: &mut ChaCha20Rng) -> f64 {
    // Box-Muller; two uniforms per normal keeps the stream layout fixed.
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Per-tape node ids for a bound [`ParamStore`].
pub struct ParamBinding {
    ids: BTreeMap<String, NodeId>,
}

impl ParamBinding {
    pub fn id(&self, name: &str) -> NodeId {
        *self
            .ids
            .get(name)
            .unwrap_or_else(|| panic!("parameter '{name}' not bound"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &NodeId)> {
        self.ids.iter()
    }
}

/// conv(k=3 or 1) + bias lookup by base name.
pub fn conv(
    tape: &mut Tape<impl Scalar>,
    bind: &ParamBinding,
    name: &str,
    x: NodeId,
    stride: usize,
    pad: usize,
) -> NodeId {
    tape.conv2d(
        x,
        bind.id(&format!("{name}.w")),
        Some(bind.id(&format!("{name}.b"))),
        stride,
        pad,
    )
}

pub fn conv_relu(
    tape: &mut Tape<impl Scalar>,
    bind: &ParamBinding,
    name: &str,
    x: NodeId,
    stride: usize,
    pad: usize,
) -> NodeId {
    let y = conv(tape, bind, name, x, stride, pad);
    tape.relu(y)
}

/// Accumulated gradients by parameter name.
#[derive(Debug, Clone, Default)]
pub struct GradStore<S: Scalar> {
    entries: BTreeMap<String, ArrayD<S>>,
}

impl<S: Scalar> GradStore<S> {
    pub fn new() -> Self {
        GradStore {
            entries: BTreeMap::new(),
        }
    }

    pub fn accumulate(&mut self, name: &str, grad: ArrayD<S>) {
        match self.entries.get_mut(name) {
            Some(g) => *g += &grad,
            None => {
                self.entries.insert(name.to_string(), grad);
            }
        }
    }

    pub fn scale(&mut self, s: S) {
        for g in self.entries.values_mut() {
            g.mapv_inplace(|v| v * s);
        }
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<S>> {
        self.entries.get(name)
    }
}

/// AdamW: Adam moments plus decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW<S: Scalar> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: BTreeMap<String, ArrayD<S>>,
    v: BTreeMap<String, ArrayD<S>>,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Optimizer state for checkpointing: (step, first moments, second moments).
    pub fn export_state(&self) -> (u64, &BTreeMap<String, ArrayD<S>>, &BTreeMap<String, ArrayD<S>>) {
        (self.step, &self.m, &self.v)
    }

    /// Restore state captured by [`AdamW::export_state`].
    pub fn import_state(
        &mut self,
        step: u64,
        m: BTreeMap<String, ArrayD<S>>,
        v: BTreeMap<String, ArrayD<S>>,
    ) {
        self.step = step;
        self.m = m;
        self.v = v;
    }

    /// Apply one update with the given learning rate (schedules feed the
    /// effective lr here).
    pub fn step(&mut self, params: &mut ParamStore<S>, grads: &GradStore<S>, lr: f64) {
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        let (b1, b2) = (S::c(self.beta1), S::c(self.beta2));
        let one_m_b1 = S::c(1.0 - self.beta1);
        let one_m_b2 = S::c(1.0 - self.beta2);
        let eps = S::c(self.eps);
        let lr_s = S::c(lr);
        let inv_bc1 = S::c(1.0 / bc1);
        let inv_bc2 = S::c(1.0 / bc2);
        let decay = S::c(lr * self.weight_decay);

        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            azip_update(m, g, |m, g| *m = *m * b1 + g * one_m_b1);
            azip_update(v, g, |v, g| *v = *v * b2 + g * g * one_m_b2);
            for ((p, &mv), &vv) in p.iter_mut().zip(m.iter()).zip(v.iter()) {
                let m_hat = mv * inv_bc1;
                let v_hat = vv * inv_bc2;
                *p = *p - lr_s * m_hat / (v_hat.sqrt() + eps) - decay * *p;
            }
        }
    }
}

/// Effective learning rate: linear warmup then cosine decay to zero.
pub fn lr_at(step: u64, base_lr: f64, warmup: u64, horizon: u64) -> f64 {
    if warmup > 0 && step < warmup {
        return base_lr * (step + 1) as f64 / warmup as f64;
    }
    let span = horizon.saturating_sub(warmup).max(1) as f64;
    let progress = ((step - warmup) as f64 / span).min(1.0);
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

fn azip_update<S: Scalar>(dst: &mut ArrayD<S>, src: &ArrayD<S>, f: impl Fn(&mut S, S)) {
    for (d, &s) in dst.iter_mut().zip(src.iter()) {
        f(d, s);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn adamw_minimizes_quadratic() {
        let mut params: ParamStore<f64> = ParamStore::new();
        params.insert("x", ArrayD::from_elem(IxDyn(&[2]), 3.0));
        let mut opt = AdamW::new(0.1, 0.0);
        for _ in 0..500 {
            let mut grads = GradStore::new();
            let g = params.get("x").mapv(|v| 2.0 * (v - 1.5));
            grads.accumulate("x", g);
            opt.step(&mut params, &grads, 0.1);
        }
        for &v in params.get("x").iter() {
            assert!((v - 1.5).abs() < 1e-3, "got {v}");
        }
    }

    #[test]
    fn checksum_tracks_values() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let mut a: ParamStore<f64> = ParamStore::new();
        a.init_conv("c", 2, 3, 3, &mut rng);
        let before = a.checksum();
        assert_eq!(before, a.checksum());
        let mut b = a.clone();
        let name = "c.w".to_string();
        b.iter_mut().find(|(n, _)| **n == name).unwrap().1[[0, 0, 0, 0]] += 1e-12;
        assert_ne!(before, b.checksum());
    }

    #[test]
    fn lr_schedule_shape() {
        let base = 2e-4;
        assert!(lr_at(0, base, 50, 1000) < base * 0.05);
        assert!((lr_at(49, base, 50, 1000) - base).abs() < base * 0.05);
        assert!((lr_at(50, base, 50, 1000) - base).abs() < 1e-12);
        assert!(lr_at(999, base, 50, 1000) < base * 0.01);
        assert!(lr_at(2000, base, 50, 1000) <= lr_at(999, base, 50, 1000));
    }

    #[test]
    fn frozen_binding_gets_no_grad() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let mut params: ParamStore<f64> = ParamStore::new();
        params.init_conv("c", 1, 1, 3, &mut rng);
        let mut tape: Tape<f64> = Tape::new();
        let bind = params.bind(&mut tape, false);
        let x = tape.var(ArrayD::from_elem(IxDyn(&[1, 4, 4]), 0.5));
        let y = conv(&mut tape, &bind, "c", x, 1, 1);
        let s = tape.mean_all(y);
        let g = tape.backward(s);
        assert!(!g.has_grad(bind.id("c.w")));
        assert!(g.has_grad(x));
    }
}
