//! Spatial attention and its associative refinement.
//!
//! Three maps live here, all `[N, 1, H, H]`:
//!
//! * `M`, the CBAM-style spatial attention, `sigmoid(conv(channel_pool(f)))`;
//! * `M̂ = M - ξ₁ ∂G/∂M`, the attention after one descent step;
//! * `Mᵃ`, the associative attention: `M̂` backtracked by `ξ₂ γ_m M` at the
//!   positions whose input gradient ranks above `ζ`, then clamped to `[0, 1]`.
//!
//! The backtracking gain `γ` couples attention and perturbation. With
//! `Ĝ = (∂G/∂δ)ᵀ ⊘ M` and the elementwise Jacobian estimate
//! `D = Δδ ⊘ ΔM` taken against the previous step's batch-mean maps,
//! `γ_m = Σ_n (Ĝ ∘ D)[n, m]`. [`trace_gain`] is the general matrix form of the
//! same contraction and is what the column-sum shortcut is tested against.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_ATTENTION_KERNEL: usize = 7;
pub const DEFAULT_EPS_DIV: f64 = 1e-6;

/// Weights of the attention convolution: `[1, 2, k, k]` plus a scalar bias.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialAttentionParams<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> SpatialAttentionParams<T> {
    pub fn zeros(kernel: usize) -> Result<Self> {
        if kernel.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "attention kernel must be odd, got {kernel}"
            )));
        }
        Ok(Self {
            weight: Tensor::zeros([1, 2, kernel, kernel]),
            bias: Tensor::zeros([1]),
        })
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[3]
    }

    pub fn padding(&self) -> usize {
        (self.kernel() - 1) / 2
    }
}

/// Taped spatial attention over `[N, C, H, H]` features.
///
/// `weight` must be `[1, 2, k, k]` with odd `k`; same padding keeps the map
/// at the feature resolution.
pub fn spatial_attention<T: Scalar>(
    tape: &mut Tape<T>,
    features: Var,
    weight: Var,
    bias: Var,
    size: usize,
) -> Result<Var> {
    let [_, _, h, w] = tape.value(features).dims4("spatial_attention")?;
    if h != size || w != size {
        return Err(Error::shape(
            "spatial_attention",
            format!("features are {h}x{w}, attention expects {size}x{size}"),
        ));
    }
    let ws = tape.value(weight).shape();
    if ws.len() != 4 || ws[0] != 1 || ws[1] != 2 || ws[2].is_multiple_of(2) {
        return Err(Error::shape(
            "spatial_attention",
            format!("attention weight must be [1, 2, k, k] with odd k, got {ws:?}"),
        ));
    }
    let padding = (ws[2] - 1) / 2;
    let pooled = tape.channel_pool(features)?;
    let logits = tape.conv2d(pooled, weight, bias, 1, padding)?;
    tape.sigmoid(logits)
}

/// Convenience wrapper that puts `params` on a fresh tape and evaluates the
/// attention map without gradients.
pub fn attention_map<T: Scalar>(
    features: &Tensor<T>,
    params: &SpatialAttentionParams<T>,
) -> Result<Tensor<T>> {
    let [_, _, h, _] = features.dims4("spatial_attention")?;
    let mut tape = Tape::new();
    let f = tape.leaf(features.clone(), false);
    let w = tape.leaf(params.weight.clone(), false);
    let b = tape.leaf(params.bias.clone(), false);
    let m = spatial_attention(&mut tape, f, w, b, h)?;
    Ok(tape.value(m).clone())
}

/// `M̂ = M - ξ₁ ∂G/∂M`, unclamped.
pub fn descend_attention<T: Scalar>(m: &Tensor<T>, grad_m: &Tensor<T>, xi1: T) -> Result<Tensor<T>> {
    if xi1 < T::zero() {
        return Err(Error::InvalidArgument(format!("xi1 must be >= 0, got {xi1}")));
    }
    if !grad_m.all_finite() {
        return Err(Error::NonFinite { op: "descend_attention" });
    }
    m.zip_map(grad_m, |mv, g| mv - xi1 * g)
}

/// Batch-mean `(M, δ)` maps remembered from the previous training step.
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingHistory<T> {
    /// `[1, 1, H, H]`
    pub prev_m: Tensor<T>,
    /// `[1, 1, H, H]`, channel-averaged perturbation
    pub prev_delta: Tensor<T>,
}

impl<T: Scalar> CouplingHistory<T> {
    /// Batch means of this step's maps, kept for the next one.
    pub fn from_batch(m: &Tensor<T>, delta_map: &Tensor<T>) -> Result<Self> {
        m.expect_same_shape(delta_map, "coupling_history")?;
        Ok(Self {
            prev_m: m.mean_rows()?,
            prev_delta: delta_map.mean_rows()?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Coupling<T> {
    /// `Ĝ`, `[N, 1, H, H]`
    pub g_hat: Tensor<T>,
    /// `γ`, `[N, H]`: one gain per row index per sample
    pub gamma: Tensor<T>,
}

/// `sign(x) * max(|x|, eps)`, with zero treated as positive.
#[inline]
fn signed_floor<T: Scalar>(x: T, eps: T) -> T {
    if x < T::zero() {
        x.min(-eps)
    } else {
        x.max(eps)
    }
}

fn square_maps<T: Scalar>(t: &Tensor<T>, op: &'static str) -> Result<(usize, usize)> {
    let [n, c, h, w] = t.dims4(op)?;
    if c != 1 || h != w {
        return Err(Error::shape(op, format!("expected [N, 1, H, H], got {:?}", t.shape())));
    }
    Ok((n, h))
}

/// Coupling gain between attention and perturbation.
///
/// * `grad_delta`: `∂G/∂δ` reduced over channels, `[N, 1, H, H]`
/// * `m`: attention, `[N, 1, H, H]`
/// * `delta`: perturbation reduced over channels, `[N, 1, H, H]`
/// * `history`: previous batch-mean maps; without it `D = 0` and `γ = 0`
pub fn coupling_gain<T: Scalar>(
    grad_delta: &Tensor<T>,
    m: &Tensor<T>,
    delta: &Tensor<T>,
    history: Option<&CouplingHistory<T>>,
    eps_div: T,
) -> Result<Coupling<T>> {
    if eps_div <= T::zero() {
        return Err(Error::InvalidArgument("eps_div must be positive".into()));
    }
    let (n, h) = square_maps(m, "coupling_gain")?;
    grad_delta.expect_same_shape(m, "coupling_gain")?;
    delta.expect_same_shape(m, "coupling_gain")?;
    if !grad_delta.all_finite() || !m.all_finite() || !delta.all_finite() {
        return Err(Error::NonFinite { op: "coupling_gain" });
    }
    if let Some(hist) = history {
        for prev in [&hist.prev_m, &hist.prev_delta] {
            if prev.shape() != [1, 1, h, h] {
                return Err(Error::shape(
                    "coupling_gain",
                    format!("history map {:?} does not match [1, 1, {h}, {h}]", prev.shape()),
                ));
            }
        }
    }

    let plane = h * h;
    let mut g_hat = vec![T::zero(); n * plane];
    let mut gamma = vec![T::zero(); n * h];
    for s in 0..n {
        let gd = &grad_delta.data()[s * plane..][..plane];
        let ms = &m.data()[s * plane..][..plane];
        let ds = &delta.data()[s * plane..][..plane];
        let gh = &mut g_hat[s * plane..][..plane];
        for i in 0..h {
            for j in 0..h {
                gh[i * h + j] = gd[j * h + i] / signed_floor(ms[i * h + j], eps_div);
            }
        }
        let Some(hist) = history else {
            continue;
        };
        let (pm, pd) = (hist.prev_m.data(), hist.prev_delta.data());
        let gs = &mut gamma[s * h..][..h];
        // γ_m = Σ_n Ĝ[n, m] · D[n, m]
        for row in 0..h {
            for (col, g) in gs.iter_mut().enumerate() {
                let idx = row * h + col;
                let jac = (ds[idx] - pd[idx]) / signed_floor(ms[idx] - pm[idx], eps_div);
                *g = *g + gh[idx] * jac;
            }
        }
    }
    let coupling = Coupling {
        g_hat: Tensor::from_vec([n, 1, h, h], g_hat)?,
        gamma: Tensor::from_vec([n, h], gamma)?,
    };
    if !coupling.gamma.all_finite() || !coupling.g_hat.all_finite() {
        return Err(Error::NonFinite { op: "coupling_gain" });
    }
    Ok(coupling)
}

/// Closed-form trace contraction over full `H x H` matrices.
///
/// `jacobian[m * h + n]` holds `∂δ_m / ∂M_{n,m}`, the single non-zero column
/// of `∂δ_m/∂M`. Returns, for every row `m`,
/// `Tr[M Ĝ ∂δ_m/∂M] = Σ_n (M_m · ĝ_n) ∂δ_m/∂M_{n,m}`, where `M_m` is row `m`
/// of `M` and `ĝ_n` is column `n` of `Ĝ`.
pub fn trace_gain<T: Scalar>(m: &[T], g_hat: &[T], jacobian: &[T], h: usize) -> Result<Vec<T>> {
    let plane = h * h;
    if m.len() != plane || g_hat.len() != plane || jacobian.len() != plane {
        return Err(Error::shape(
            "trace_gain",
            format!("all inputs must hold {plane} elements"),
        ));
    }
    let mut out = Vec::with_capacity(h);
    let mut v = vec![T::zero(); h];
    for r in 0..h {
        // v = Σ_n ĝ_n ∂δ_r/∂M_{n,r}
        v.fill(T::zero());
        for n in 0..h {
            let j = jacobian[r * h + n];
            for k in 0..h {
                v[k] = v[k] + g_hat[k * h + n] * j;
            }
        }
        out.push((0..h).fold(T::zero(), |acc, k| acc + m[r * h + k] * v[k]));
    }
    Ok(out)
}

/// Per-sample rank of `|g|`, normalised to `[0, 1)`: the fraction of
/// elements in the same sample with strictly smaller magnitude. Ties share
/// a rank.
pub fn rank_normalize<T: Scalar>(g: &Tensor<T>) -> Result<Tensor<T>> {
    let Some((&n, _)) = g.shape().split_first() else {
        return Err(Error::shape("rank_normalize", "scalar input"));
    };
    if !g.all_finite() {
        return Err(Error::NonFinite { op: "rank_normalize" });
    }
    let per = g.len() / n.max(1);
    let denom = T::from_f64(per as f64);
    let mut out = vec![T::zero(); g.len()];
    let mut order: Vec<usize> = Vec::with_capacity(per);
    for s in 0..n {
        let src = &g.data()[s * per..][..per];
        order.clear();
        order.extend(0..per);
        order.sort_by(|&a, &b| src[a].abs().partial_cmp(&src[b].abs()).unwrap());
        let dst = &mut out[s * per..][..per];
        let mut below = 0;
        for i in 0..per {
            if i > 0 && src[order[i]].abs() > src[order[i - 1]].abs() {
                below = i;
            }
            dst[order[i]] = T::from_f64(below as f64) / denom;
        }
    }
    Tensor::from_vec(g.shape().to_vec(), out)
}

/// Triggered backtracking projection.
///
/// Where `rank(|∂G/∂δ|) > ζ`: `Mᵃ = M̂ - ξ₂ γ_m M`; elsewhere `Mᵃ = M̂`.
/// The result is clamped to `[0, 1]`.
pub fn backtrack<T: Scalar>(
    m_hat: &Tensor<T>,
    m: &Tensor<T>,
    gamma: &Tensor<T>,
    grad_delta: &Tensor<T>,
    xi2: T,
    zeta: T,
) -> Result<Tensor<T>> {
    if zeta < T::zero() || zeta > T::one() {
        return Err(Error::InvalidArgument(format!("zeta must lie in [0, 1], got {zeta}")));
    }
    let (n, h) = square_maps(m, "backtrack")?;
    m_hat.expect_same_shape(m, "backtrack")?;
    grad_delta.expect_same_shape(m, "backtrack")?;
    if gamma.shape() != [n, h] {
        return Err(Error::shape(
            "backtrack",
            format!("gamma {:?} does not match [{n}, {h}]", gamma.shape()),
        ));
    }
    let rank = rank_normalize(grad_delta)?;
    let plane = h * h;
    let mut out = m_hat.data().to_vec();
    for s in 0..n {
        for row in 0..h {
            let step = xi2 * gamma.data()[s * h + row];
            for col in 0..h {
                let idx = s * plane + row * h + col;
                if rank.data()[idx] > zeta {
                    out[idx] = out[idx] - step * m.data()[idx];
                }
            }
        }
    }
    for v in out.iter_mut() {
        *v = v.max(T::zero()).min(T::one());
    }
    Tensor::from_vec(m.shape().to_vec(), out)
}

/// Hyper-parameters of the associative update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AssociationParams {
    pub xi1: f64,
    pub xi2: f64,
    pub zeta: f64,
    pub eps_div: f64,
}

impl Default for AssociationParams {
    fn default() -> Self {
        Self {
            xi1: 0.1,
            xi2: 0.1,
            zeta: 0.1,
            eps_div: DEFAULT_EPS_DIV,
        }
    }
}

/// Every attention quantity computed for one batch.
#[derive(Debug, Clone)]
pub struct AttentionState<T> {
    pub m: Tensor<T>,
    pub m_hat: Tensor<T>,
    pub m_assoc: Tensor<T>,
    pub g_hat: Tensor<T>,
    pub gamma: Tensor<T>,
    pub grad_delta: Tensor<T>,
    pub history: Option<CouplingHistory<T>>,
}

impl<T: Scalar> AttentionState<T> {
    /// Runs descend → couple → backtrack for one batch.
    ///
    /// `delta_map` is the channel-reduced perturbation; `history` is the
    /// previous step's batch-mean maps, if any.
    pub fn associate(
        m: Tensor<T>,
        grad_m: &Tensor<T>,
        grad_delta: Tensor<T>,
        delta_map: &Tensor<T>,
        history: Option<CouplingHistory<T>>,
        params: &AssociationParams,
    ) -> Result<Self> {
        let m_hat = descend_attention(&m, grad_m, T::from_f64(params.xi1))?;
        let Coupling { g_hat, gamma } = coupling_gain(
            &grad_delta,
            &m,
            delta_map,
            history.as_ref(),
            T::from_f64(params.eps_div),
        )?;
        let m_assoc = backtrack(
            &m_hat,
            &m,
            &gamma,
            &grad_delta,
            T::from_f64(params.xi2),
            T::from_f64(params.zeta),
        )?;
        Ok(Self {
            m,
            m_hat,
            m_assoc,
            g_hat,
            gamma,
            grad_delta,
            history,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(h: usize, data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec([data.len() / (h * h), 1, h, h], data.to_vec()).unwrap()
    }

    #[test]
    fn zero_params_give_half() {
        let params = SpatialAttentionParams::<f64>::zeros(7).unwrap();
        let feats = Tensor::from_vec([1, 3, 4, 4], (0..48).map(|v| v as f64).collect()).unwrap();
        let m = attention_map(&feats, &params).unwrap();
        assert_eq!(m.shape(), &[1, 1, 4, 4]);
        assert!(m.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn attention_rejects_wrong_size() {
        let params = SpatialAttentionParams::<f64>::zeros(3).unwrap();
        let mut tape = Tape::new();
        let f = tape.leaf(Tensor::zeros([1, 2, 4, 5]), false);
        let w = tape.leaf(params.weight.clone(), false);
        let b = tape.leaf(params.bias.clone(), false);
        assert!(spatial_attention(&mut tape, f, w, b, 4).is_err());
        assert!(SpatialAttentionParams::<f64>::zeros(4).is_err());
    }

    #[test]
    fn descend_examples() {
        let m = map(1, &[0.5]);
        let g = map(1, &[0.2]);
        let out = descend_attention(&m, &g, 0.1).unwrap();
        assert!((out.data()[0] - 0.48).abs() < 1e-15);
        assert_eq!(descend_attention(&m, &g, 0.0).unwrap(), m);
        assert_eq!(descend_attention(&m, &map(1, &[0.0]), 0.1).unwrap(), m);
        assert!(descend_attention(&m, &map(1, &[f64::NAN]), 0.1).is_err());
        assert!(descend_attention(&m, &g, -1.0).is_err());
    }

    #[test]
    fn coupling_without_history_is_zero() {
        let m = map(2, &[0.2, 0.4, 0.6, 0.8]);
        let gd = map(2, &[1.0, -2.0, 3.0, 0.5]);
        let d = map(2, &[0.03, -0.03, 0.0, 0.03]);
        let c = coupling_gain(&gd, &m, &d, None, 1e-6).unwrap();
        assert!(c.gamma.data().iter().all(|&v| v == 0.0));
        // Ĝ = transpose(grad_delta) / M
        assert!((c.g_hat.data()[1] - 3.0 / 0.4).abs() < 1e-12);
        assert!((c.g_hat.data()[2] + 2.0 / 0.6).abs() < 1e-12);
    }

    #[test]
    fn coupling_one_by_one_example() {
        let hist = CouplingHistory {
            prev_m: map(1, &[0.25]),
            prev_delta: map(1, &[0.0]),
        };
        // D = (0.25 - 0) / (0.5 - 0.25) = 1
        let c = coupling_gain(&map(1, &[0.2]), &map(1, &[0.5]), &map(1, &[0.25]), Some(&hist), 1e-6)
            .unwrap();
        assert!((c.g_hat.data()[0] - 0.4).abs() < 1e-15);
        assert!((c.gamma.data()[0] - 0.4).abs() < 1e-15);
    }

    #[test]
    fn coupling_clamps_small_denominators() {
        let hist = CouplingHistory {
            prev_m: map(1, &[0.5]),
            prev_delta: map(1, &[0.0]),
        };
        let c = coupling_gain(&map(1, &[1.0]), &map(1, &[0.5]), &map(1, &[1e-3]), Some(&hist), 1e-6)
            .unwrap();
        // ΔM = 0 -> +1e-6
        assert!((c.gamma.data()[0] - 2.0 * 1e-3 / 1e-6).abs() < 1e-6);
    }

    #[test]
    fn rank_examples() {
        let r = rank_normalize(&Tensor::from_vec([1, 3], vec![3.0f64, 1.0, -2.0]).unwrap()).unwrap();
        assert_eq!(r.data(), &[2.0 / 3.0, 0.0, 1.0 / 3.0]);
        let r = rank_normalize(&Tensor::<f64>::full([2, 1, 3, 3], 0.7)).unwrap();
        assert!(r.data().iter().all(|&v| v == 0.0));
        let r = rank_normalize(&Tensor::from_vec([1, 4], vec![1.0f64, 1.0, 2.0, 0.5]).unwrap()).unwrap();
        assert_eq!(r.data(), &[0.25, 0.25, 0.75, 0.0]);
    }

    #[test]
    fn backtrack_triggered_arithmetic() {
        // Two elements; the larger gradient ranks 0.5 > ζ = 0.1.
        let m_hat = Tensor::from_vec([1, 1, 1, 1], vec![0.48f64]).unwrap();
        let m = Tensor::from_vec([1, 1, 1, 1], vec![0.5]).unwrap();
        let gamma = Tensor::from_vec([1, 1], vec![0.3]).unwrap();
        let gd = Tensor::from_vec([1, 1, 1, 1], vec![1.0]).unwrap();
        // A single element always ranks 0, so it never triggers.
        let out = backtrack(&m_hat, &m, &gamma, &gd, 0.1, 0.1).unwrap();
        assert_eq!(out.data(), &[0.48]);

        let m_hat = map(2, &[0.48, 0.48, 0.48, 0.48]);
        let m = map(2, &[0.5, 0.5, 0.5, 0.5]);
        let gamma = Tensor::from_vec([1, 2], vec![0.3, 0.3]).unwrap();
        let gd = map(2, &[0.1, 0.2, 0.3, 0.4]);
        let out = backtrack(&m_hat, &m, &gamma, &gd, 0.1, 0.1).unwrap();
        // ranks: 0, .25, .5, .75 -> last three trigger
        let expect = [0.48, 0.465, 0.465, 0.465];
        for (o, e) in out.data().iter().zip(expect) {
            assert!((o - e).abs() < 1e-15, "{o} vs {e}");
        }
    }

    #[test]
    fn backtrack_degenerate_cases_clamp() {
        let m_hat = map(2, &[-0.2, 0.3, 1.4, 0.9]);
        let m = map(2, &[0.5, 0.5, 0.5, 0.5]);
        let gamma = Tensor::from_vec([1, 2], vec![5.0, -5.0]).unwrap();
        let gd = map(2, &[0.1, 0.2, 0.3, 0.4]);
        let clamped = [0.0, 0.3, 1.0, 0.9];
        assert_eq!(backtrack(&m_hat, &m, &gamma, &gd, 0.0, 0.1).unwrap().data(), &clamped);
        assert_eq!(backtrack(&m_hat, &m, &gamma, &gd, 0.1, 1.0).unwrap().data(), &clamped);
        assert!(backtrack(&m_hat, &m, &gamma, &gd, 0.1, 1.5).is_err());
    }

    #[test]
    fn associate_without_history_is_clamped_descent() {
        let m = map(2, &[0.1, 0.5, 0.9, 0.99]);
        let gm = map(2, &[2.0, 0.0, -1.0, -0.5]);
        let gd = map(2, &[0.3, -0.1, 0.2, 0.05]);
        let d = map(2, &[0.03, -0.03, 0.03, 0.03]);
        let st = AttentionState::associate(m.clone(), &gm, gd, &d, None, &AssociationParams::default())
            .unwrap();
        let expect = descend_attention(&m, &gm, 0.1).unwrap().map(|v| v.clamp(0.0, 1.0));
        assert_eq!(st.m_assoc, expect);
        assert!(st.gamma.data().iter().all(|&v| v == 0.0));
    }
}
