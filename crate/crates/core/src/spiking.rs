//! LIF neurons and the dynamic time-step mask.
//!
//! A LIF layer integrates its drive with leak `λ`, fires an output of
//! amplitude `V_th` whenever the pre-reset potential exceeds `V_th`, and then
//! subtracts the emitted amplitude (soft reset):
//!
//! ```text
//! H[t] = λ·U[t-1] + drive[t]
//! O[t] = V_th if H[t] > V_th else 0
//! U[t] = H[t] - O[t]
//! ```
//!
//! The backward pass replaces dO/dH with a triangle of height `γ/V_th`
//! centred on `V_th`, evaluated at the pre-reset potential `H`.
//!
//! Each masked layer owns a non-negative parameter vector `TP` of length
//! `T_max`. Scores are suffix sums `TS[t] = Σ_{i≥t} TP[i]` (the product with an
//! all-ones lower-triangular matrix), so they never increase with `t`. A step
//! is active iff its score is at least 1, which makes every mask a prefix of
//! ones. The mask's backward pass is the window `0 < TS < 2`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Fixed per-layer neuron constants.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LifParams {
    pub leak: f32,
    pub threshold: f32,
    pub gamma: f32,
}

impl Default for LifParams {
    fn default() -> Self {
        LifParams {
            leak: 1.0,
            threshold: 1.0,
            gamma: 1.0,
        }
    }
}

impl LifParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.leak) {
            return Err(Error::config("leak", "must lie in [0, 1]"));
        }
        if !(self.threshold > 0.0) {
            return Err(Error::config("threshold", "must be positive"));
        }
        if !(self.gamma > 0.0) {
            return Err(Error::config("surrogate_gamma", "must be positive"));
        }
        Ok(())
    }
}

/// Surrogate dO/dH: `(γ/V_th)·max(0, 1 − |H/V_th − 1|)`.
pub fn lif_surrogate<T: Element>(h: T, p: &LifParams) -> T {
    let vth = T::from_f32(p.threshold).unwrap();
    let gamma = T::from_f32(p.gamma).unwrap();
    let tri = T::one() - (h / vth - T::one()).abs();
    gamma / vth * tri.max(T::zero())
}

/// Elementwise surrogate over a tensor of saved pre-reset potentials.
pub fn lif_surrogate_grad<T: Element>(h: &Tensor<T>, p: &LifParams) -> Tensor<T> {
    h.map(|v| lif_surrogate(v, p))
}

pub(crate) struct LifKernelOut<T> {
    pub spikes: Vec<T>,
    pub pre_reset: Vec<T>,
    pub membrane: Vec<T>,
}

/// Runs `steps` steps over a stacked `[steps, neurons]` drive buffer.
pub(crate) fn lif_kernel<T: Element>(drive: &[T], steps: usize, p: &LifParams) -> LifKernelOut<T> {
    let n = drive.len() / steps;
    let leak = T::from_f32(p.leak).unwrap();
    let vth = T::from_f32(p.threshold).unwrap();
    let mut u = vec![T::zero(); n];
    let mut spikes = vec![T::zero(); drive.len()];
    let mut pre = vec![T::zero(); drive.len()];
    for t in 0..steps {
        let base = t * n;
        for j in 0..n {
            let h = leak * u[j] + drive[base + j];
            let o = if h > vth { vth } else { T::zero() };
            pre[base + j] = h;
            spikes[base + j] = o;
            u[j] = h - o;
        }
    }
    LifKernelOut {
        spikes,
        pre_reset: pre,
        membrane: u,
    }
}

/// Backpropagation through time for [`lif_kernel`]; returns d(loss)/d(drive).
pub(crate) fn lif_kernel_backward<T: Element>(
    grad_out: &[T],
    pre_reset: &[T],
    steps: usize,
    p: &LifParams,
) -> Vec<T> {
    let n = grad_out.len() / steps;
    let leak = T::from_f32(p.leak).unwrap();
    let mut gu = vec![T::zero(); n];
    let mut gd = vec![T::zero(); grad_out.len()];
    for t in (0..steps).rev() {
        let base = t * n;
        for j in 0..n {
            let s = lif_surrogate(pre_reset[base + j], p);
            let gh = grad_out[base + j] * s + gu[j] * (T::one() - s);
            gd[base + j] = gh;
            gu[j] = leak * gh;
        }
    }
    gd
}

/// Result of simulating a LIF layer over a drive sequence.
#[derive(Clone, Debug)]
pub struct LifTrace<T = f32> {
    pub spikes: Vec<Tensor<T>>,
    /// Pre-reset potentials `H[t]`, kept for the surrogate.
    pub pre_reset: Vec<Tensor<T>>,
    /// Membrane state `U` after the last step.
    pub membrane: Tensor<T>,
}

/// Simulates one LIF layer from a zeroed membrane.
pub fn lif_forward<T: Element>(drive: &[Tensor<T>], p: &LifParams) -> Result<LifTrace<T>> {
    let first = drive
        .first()
        .ok_or_else(|| Error::Argument("LIF drive needs at least one time step".into()))?;
    let shape = first.shape().to_vec();
    if let Some(bad) = drive.iter().find(|d| d.shape() != shape.as_slice()) {
        return Err(Error::Shape {
            op: "lif_forward",
            lhs: shape,
            rhs: bad.shape().to_vec(),
        });
    }
    let steps = drive.len();
    let flat: Vec<T> = drive
        .iter()
        .flat_map(|d| d.data().iter().copied())
        .collect();
    let out = lif_kernel(&flat, steps, p);
    let n = first.numel();
    let split = |v: &[T]| -> Vec<Tensor<T>> {
        v.chunks(n)
            .map(|c| Tensor::new(shape.clone(), c.to_vec()).unwrap())
            .collect()
    };
    Ok(LifTrace {
        spikes: split(&out.spikes),
        pre_reset: split(&out.pre_reset),
        membrane: Tensor::new(shape.clone(), out.membrane).unwrap(),
    })
}

/// Score tensor `TS = TP · coeff`, accumulated left to right.
pub fn dtss_scores<T: Element>(tp: &[T]) -> Result<Vec<T>> {
    if let Some((i, v)) = tp.iter().enumerate().find(|(_, v)| !(**v >= T::zero())) {
        return Err(Error::Invariant(format!(
            "time-step parameter {i} is {v:?}; entries must be non-negative"
        )));
    }
    Ok(suffix_sums(tp))
}

pub(crate) fn suffix_sums<T: Element>(x: &[T]) -> Vec<T> {
    (0..x.len())
        .map(|t| x[t..].iter().fold(T::zero(), |a, &b| a + b))
        .collect()
}

/// Transpose of [`suffix_sums`]: `out[i] = Σ_{t≤i} g[t]`.
pub(crate) fn prefix_sums<T: Element>(g: &[T]) -> Vec<T> {
    (0..g.len())
        .map(|i| g[..=i].iter().fold(T::zero(), |a, &b| a + b))
        .collect()
}

/// Binary mask: 1 where the score reaches 1.
pub fn dtss_mask<T: Element>(ts: &[T]) -> Vec<T> {
    ts.iter()
        .map(|&s| if s >= T::one() { T::one() } else { T::zero() })
        .collect()
}

/// Straight-through window for dTM/dTS.
pub fn mask_surrogate<T: Element>(ts: T) -> T {
    let two = T::one() + T::one();
    if ts > T::zero() && ts < two {
        T::one()
    } else {
        T::zero()
    }
}

pub fn mask_surrogate_grad<T: Element>(ts: &[T]) -> Vec<T> {
    ts.iter().map(|&s| mask_surrogate(s)).collect()
}

/// Number of active steps of a binary prefix mask.
pub fn active_steps<T: Element>(tm: &[T]) -> Result<usize> {
    let mut seen_zero = false;
    let mut count = 0;
    for (t, &m) in tm.iter().enumerate() {
        if m == T::one() {
            if seen_zero {
                return Err(Error::Invariant(format!(
                    "time-step mask re-activates at step {t} after an inactive step"
                )));
            }
            count += 1;
        } else if m == T::zero() {
            seen_zero = true;
        } else {
            return Err(Error::Invariant(format!(
                "time-step mask entry {t} is {m:?}, not binary"
            )));
        }
    }
    Ok(count)
}

/// Multiplies every step of a spike sequence by its mask entry.
pub fn apply_mask<T: Element>(y: &[Tensor<T>], tm: &[T]) -> Result<Vec<Tensor<T>>> {
    if y.len() != tm.len() {
        return Err(Error::Argument(format!(
            "sequence has {} steps but mask has {}",
            y.len(),
            tm.len()
        )));
    }
    Ok(y.iter().zip(tm).map(|(s, &m)| s.map(|v| v * m)).collect())
}

/// Clamps negative entries to zero.
pub fn project_nonneg<T: Element>(tp: &mut [T]) {
    for v in tp.iter_mut() {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// Initial parameter vector giving exactly `t_init` active steps: 1.5 at
/// index `t_init - 1` and 0.01 everywhere else. Active scores land in (1, 2),
/// inside the straight-through window.
pub fn init_time_params(t_max: usize, t_init: usize) -> Result<Vec<f32>> {
    if t_max == 0 {
        return Err(Error::config("t_max", "must be at least 1"));
    }
    if t_init == 0 || t_init > t_max {
        return Err(Error::config(
            "t_init",
            format!("must lie in [1, t_max = {t_max}], got {t_init}"),
        ));
    }
    let mut tp = vec![0.01f32; t_max];
    tp[t_init - 1] = 1.5;
    Ok(tp)
}

/// Trainable time-step parameters of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct DtssParams {
    pub tp: Vec<f32>,
}

impl DtssParams {
    pub fn new(t_max: usize, t_init: usize) -> Result<Self> {
        Ok(DtssParams {
            tp: init_time_params(t_max, t_init)?,
        })
    }

    pub fn t_max(&self) -> usize {
        self.tp.len()
    }

    pub fn scores(&self) -> Result<Vec<f32>> {
        dtss_scores(&self.tp)
    }

    pub fn mask(&self) -> Result<Vec<f32>> {
        Ok(dtss_mask(&self.scores()?))
    }

    pub fn active_steps(&self) -> Result<usize> {
        active_steps(&self.mask()?)
    }
}
