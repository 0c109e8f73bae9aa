//! Global FGSM/PGD perturbations and their kernel-shaped selective form.
//!
//! All perturbations live in raw pixel space (`[0, 1]`), where `ε` is
//! meaningful. Two sign conventions coexist and are kept apart by name:
//! [`fgsm_delta`] follows the training rule `δ = ε·sign(-∇ₓG)`, while
//! [`fgsm_ascent_delta`], [`fgsm_attack`] and [`pgd`] climb the loss, as an
//! evaluating adversary does.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Classifier;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackMethod {
    None,
    Fgsm,
    Pgd,
}

/// Kernel `k(Mᵃ)` that shapes the perturbation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    /// `k ≡ 1`: the unshaped global attack.
    Global,
    /// `k = Mᵃ`
    IdentityM,
    /// `k = Mᵃ ∘ Mᵃ`
    SquaredM,
    /// `k = 1 - Mᵃ ∘ Mᵃ`, which favours the background.
    OneMinusSquaredM,
}

impl KernelKind {
    pub const ALL: [KernelKind; 4] = [
        KernelKind::Global,
        KernelKind::IdentityM,
        KernelKind::SquaredM,
        KernelKind::OneMinusSquaredM,
    ];

    pub fn name(self) -> &'static str {
        match self {
            KernelKind::Global => "global",
            KernelKind::IdentityM => "identity_m",
            KernelKind::SquaredM => "squared_m",
            KernelKind::OneMinusSquaredM => "one_minus_squared_m",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    pub method: AttackMethod,
    /// ℓ∞ radius in pixel units.
    pub epsilon: f64,
    pub step_size: f64,
    /// PGD iterations.
    pub iterations: usize,
    pub kernel: KernelKind,
    pub random_init: bool,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            method: AttackMethod::Fgsm,
            epsilon: 8.0 / 255.0,
            step_size: 2.0 / 255.0,
            iterations: 10,
            kernel: KernelKind::SquaredM,
            random_init: true,
        }
    }
}

impl AttackConfig {
    pub fn none() -> Self {
        Self {
            method: AttackMethod::None,
            ..Self::default()
        }
    }

    pub fn fgsm(epsilon: f64) -> Self {
        Self {
            method: AttackMethod::Fgsm,
            epsilon,
            kernel: KernelKind::Global,
            ..Self::default()
        }
    }

    pub fn pgd(epsilon: f64, step_size: f64, iterations: usize) -> Self {
        Self {
            method: AttackMethod::Pgd,
            epsilon,
            step_size,
            iterations,
            kernel: KernelKind::Global,
            random_init: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            return Err(Error::InvalidArgument(format!("epsilon must be >= 0, got {}", self.epsilon)));
        }
        if self.method != AttackMethod::None && !(self.step_size > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "step_size must be > 0, got {}",
                self.step_size
            )));
        }
        if self.method == AttackMethod::Pgd && self.iterations == 0 {
            return Err(Error::InvalidArgument("pgd needs at least one iteration".into()));
        }
        Ok(())
    }
}

/// `sign` with `sign(0) = 0`.
#[inline]
pub fn sign0<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// Training perturbation `δ = ε·sign(-∇ₓG)`.
pub fn fgsm_delta<T: Scalar>(grad_x: &Tensor<T>, epsilon: T) -> Result<Tensor<T>> {
    if !grad_x.all_finite() {
        return Err(Error::NonFinite { op: "fgsm_delta" });
    }
    Ok(grad_x.map(|g| epsilon * sign0(-g)))
}

/// Loss-ascent perturbation `ε·sign(∇ₓG)`.
pub fn fgsm_ascent_delta<T: Scalar>(grad_x: &Tensor<T>, epsilon: T) -> Result<Tensor<T>> {
    if !grad_x.all_finite() {
        return Err(Error::NonFinite { op: "fgsm_ascent_delta" });
    }
    Ok(grad_x.map(|g| epsilon * sign0(g)))
}

/// Elementwise `k(Mᵃ)`; `Mᵃ` must already be clamped to `[0, 1]`.
pub fn kernel<T: Scalar>(m_assoc: &Tensor<T>, kind: KernelKind) -> Result<Tensor<T>> {
    if let Some(&bad) = m_assoc
        .data()
        .iter()
        .find(|&&v| !(v >= T::zero() && v <= T::one()))
    {
        return Err(Error::AttentionOutOfRange { value: bad.to_f64() });
    }
    Ok(match kind {
        KernelKind::Global => Tensor::ones(m_assoc.shape().to_vec()),
        KernelKind::IdentityM => m_assoc.clone(),
        KernelKind::SquaredM => m_assoc.map(|v| v * v),
        KernelKind::OneMinusSquaredM => m_assoc.map(|v| T::one() - v * v),
    })
}

/// `k_map ⊙ values`, broadcasting a `[N,1,H,W]` map across channels.
fn broadcast_mul<T: Scalar>(k_map: &Tensor<T>, values: &Tensor<T>, op: &'static str) -> Result<Tensor<T>> {
    let [n, c, h, w] = values.dims4(op)?;
    if k_map.shape() != [n, 1, h, w] {
        return Err(Error::shape(
            op,
            format!("kernel map {:?} does not broadcast over {:?}", k_map.shape(), values.shape()),
        ));
    }
    let plane = h * w;
    let mut out = values.data().to_vec();
    for s in 0..n {
        let k = &k_map.data()[s * plane..][..plane];
        for ch in 0..c {
            for (o, &kv) in out[(s * c + ch) * plane..][..plane].iter_mut().zip(k) {
                *o = kv * *o;
            }
        }
    }
    Tensor::from_vec(values.shape().to_vec(), out)
}

/// Selective perturbation `η = k(Mᵃ) ∘ δ`.
pub fn selective_perturbation<T: Scalar>(k_map: &Tensor<T>, delta: &Tensor<T>) -> Result<Tensor<T>> {
    broadcast_mul(k_map, delta, "selective_perturbation")
}

/// `x' = clip(x + η, 0, 1)`.
pub fn apply_attack<T: Scalar>(x: &Tensor<T>, eta: &Tensor<T>) -> Result<Tensor<T>> {
    x.zip_map(eta, |a, b| (a + b).max(T::zero()).min(T::one()))
}

/// Projects `v` onto `[x - ε, x + ε] ∩ [0, 1]`, guaranteeing
/// `|out - x| <= ε` when evaluated in `T`.
#[inline]
pub(crate) fn project_linf<T: Scalar>(v: T, x: T, eps: T) -> T {
    let mut out = v.max(x - eps).min(x + eps).max(T::zero()).min(T::one());
    while (out - x).abs() > eps {
        out = out.step_toward(x);
    }
    out
}

/// Single-step loss-ascent FGSM with a global kernel.
pub fn fgsm_attack<T: Scalar, M: Classifier<T> + ?Sized>(
    model: &M,
    x: &Tensor<T>,
    labels: &[usize],
    epsilon: T,
) -> Result<Tensor<T>> {
    if !model.is_inference() {
        return Err(Error::NotInferenceMode);
    }
    let (_, grad) = model.loss_and_input_grad(x, labels)?;
    let delta = fgsm_ascent_delta(&grad, epsilon)?;
    apply_attack(x, &delta)
}

/// ℓ∞ PGD ascent. With `k_map` the step is kernel-shaped; otherwise global.
pub fn pgd<T: Scalar, M: Classifier<T> + ?Sized>(
    model: &M,
    x: &Tensor<T>,
    labels: &[usize],
    config: &AttackConfig,
    k_map: Option<&Tensor<T>>,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor<T>> {
    pgd_observed(model, x, labels, config, k_map, rng, |_, _| {})
}

/// [`pgd`] that reports every iterate (including the start point) to
/// `observe`.
pub fn pgd_observed<T: Scalar, M: Classifier<T> + ?Sized>(
    model: &M,
    x: &Tensor<T>,
    labels: &[usize],
    config: &AttackConfig,
    k_map: Option<&Tensor<T>>,
    rng: &mut ChaCha8Rng,
    mut observe: impl FnMut(usize, &Tensor<T>),
) -> Result<Tensor<T>> {
    if config.method != AttackMethod::Pgd {
        return Err(Error::InvalidArgument(format!(
            "pgd called with method {:?}",
            config.method
        )));
    }
    config.validate()?;
    if !model.is_inference() {
        return Err(Error::NotInferenceMode);
    }
    let eps = T::from_f64(config.epsilon);
    let alpha = T::from_f64(config.step_size);

    let mut current = if config.random_init && config.epsilon > 0.0 {
        let data = x
            .data()
            .iter()
            .map(|&xv| {
                let noise = T::from_f64(rng.random_range(-config.epsilon..=config.epsilon));
                project_linf(xv + noise, xv, eps)
            })
            .collect();
        Tensor::from_vec(x.shape().to_vec(), data)?
    } else {
        x.clone()
    };
    observe(0, &current);

    for t in 1..=config.iterations {
        let (_, grad) = model.loss_and_input_grad(&current, labels)?;
        let step = grad.map(|g| alpha * sign0(g));
        let step = match k_map {
            Some(k) => broadcast_mul(k, &step, "pgd")?,
            None => step,
        };
        let data = current
            .data()
            .iter()
            .zip(step.data())
            .zip(x.data())
            .map(|((&c, &s), &x0)| project_linf(c + s, x0, eps))
            .collect();
        current = Tensor::from_vec(x.shape().to_vec(), data)?;
        observe(t, &current);
    }
    Ok(current)
}
