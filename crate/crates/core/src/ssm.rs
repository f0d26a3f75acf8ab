//! Linear state space models: zero-order-hold discretization, the
//! recurrent and convolutional scan forms of a time-invariant system, and
//! the selective (input-dependent) scan used by the fusion blocks.
//!
//! Time-invariant systems use full `N x N` state matrices. The selective
//! scan restricts `A` to a negative diagonal per channel so every token can
//! be discretized elementwise.

use nalgebra::{DMatrix, DVector, RowDVector};

use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

/// Below this norm of `delta * A` the input matrix uses the truncated series.
pub const ZOH_SERIES_NORM: f64 = 1e-4;
/// Number of series terms used below [`ZOH_SERIES_NORM`].
pub const ZOH_SERIES_TERMS: usize = 8;

/// Continuous-time system `h' = A h + B x`, `y = C h`, with step size `delta`.
#[derive(Clone, Debug, PartialEq)]
pub struct ContinuousSsm {
    a: DMatrix<f64>,
    b: DVector<f64>,
    c: RowDVector<f64>,
    delta: f64,
}

impl ContinuousSsm {
    pub fn new(a: DMatrix<f64>, b: DVector<f64>, c: RowDVector<f64>, delta: f64) -> Result<Self> {
        let n = a.nrows();
        if n == 0 || a.ncols() != n {
            return Err(Error::Shape(format!(
                "state matrix must be square and non-empty, got {}x{}",
                a.nrows(),
                a.ncols()
            )));
        }
        if b.len() != n || c.len() != n {
            return Err(Error::Shape(format!(
                "B has {} and C has {} entries for state size {n}",
                b.len(),
                c.len()
            )));
        }
        let finite = a.iter().chain(b.iter()).chain(c.iter()).all(|v| v.is_finite());
        if !finite || !delta.is_finite() {
            return Err(Error::InvalidParameter("non-finite SSM parameter".into()));
        }
        if delta <= 0.0 {
            return Err(Error::InvalidParameter(format!("delta must be positive, got {delta}")));
        }
        Ok(Self { a, b, c, delta })
    }

    /// Scalar system, handy for tests and worked examples.
    pub fn scalar(a: f64, b: f64, c: f64, delta: f64) -> Result<Self> {
        Self::new(
            DMatrix::from_element(1, 1, a),
            DVector::from_element(1, b),
            RowDVector::from_element(1, c),
            delta,
        )
    }

    /// Diagonal state matrix initialised as `A_n = -n`, `n = 1..=N`.
    pub fn hippo_diagonal(n: usize, b: DVector<f64>, c: RowDVector<f64>, delta: f64) -> Result<Self> {
        let a = DMatrix::from_diagonal(&DVector::from_fn(n, |i, _| -((i + 1) as f64)));
        Self::new(a, b, c, delta)
    }

    pub fn state_size(&self) -> usize {
        self.a.nrows()
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DVector<f64> {
        &self.b
    }

    pub fn c(&self) -> &RowDVector<f64> {
        &self.c
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }
}

/// Discrete-time system `h_t = A_bar h_{t-1} + B_bar x_t`, `y_t = C h_t`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteSsm {
    pub a_bar: DMatrix<f64>,
    pub b_bar: DVector<f64>,
    pub c: RowDVector<f64>,
}

impl DiscreteSsm {
    pub fn new(a_bar: DMatrix<f64>, b_bar: DVector<f64>, c: RowDVector<f64>) -> Result<Self> {
        let n = a_bar.nrows();
        if n == 0 || a_bar.ncols() != n || b_bar.len() != n || c.len() != n {
            return Err(Error::Shape("inconsistent discrete SSM dimensions".into()));
        }
        Ok(Self { a_bar, b_bar, c })
    }

    pub fn state_size(&self) -> usize {
        self.a_bar.nrows()
    }
}

/// Hidden state of a running scan plus the number of inputs folded in.
#[derive(Clone, Debug, PartialEq)]
pub struct ScanState {
    pub h: DVector<f64>,
    pub step: usize,
}

impl ScanState {
    pub fn zeros(n: usize) -> Self {
        Self {
            h: DVector::zeros(n),
            step: 0,
        }
    }

    pub fn from_vector(h: DVector<f64>) -> Self {
        Self { h, step: 0 }
    }
}

/// Matrix exponential by scaling and squaring around a Taylor core.
pub fn matrix_exp(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    let norm = m.iter().map(|v| v.abs()).fold(0.0, f64::max) * n as f64;
    let squarings = if norm > 0.5 {
        (norm / 0.5).log2().ceil() as u32
    } else {
        0
    };
    let scaled = m / 2f64.powi(squarings as i32);
    let mut result = DMatrix::<f64>::identity(n, n);
    let mut term = DMatrix::<f64>::identity(n, n);
    for k in 1..=40 {
        term = &term * &scaled / k as f64;
        result += &term;
        if term.iter().all(|v| v.abs() < 1e-20 * (1.0 + result.amax())) {
            break;
        }
    }
    for _ in 0..squarings {
        result = &result * &result;
    }
    result
}

/// `delta * (I + M/2! + M^2/3! + ...) * B` with `M = delta * A`, summed over
/// `terms` terms. This is the `A -> 0` limit form of the ZOH input matrix.
pub fn zoh_input_series(delta_a: &DMatrix<f64>, delta_b: &DVector<f64>, terms: usize) -> DVector<f64> {
    let mut acc = DVector::zeros(delta_b.len());
    let mut power = delta_b.clone();
    let mut factorial = 1.0;
    for k in 0..terms {
        factorial *= (k + 1) as f64;
        acc += &power / factorial;
        power = delta_a * power;
    }
    acc
}

/// `(delta A)^{-1} (exp(delta A) - I) delta B` via an LU solve. `None` when
/// `delta A` is singular.
pub fn zoh_input_explicit(
    delta_a: &DMatrix<f64>,
    a_bar: &DMatrix<f64>,
    delta_b: &DVector<f64>,
) -> Option<DVector<f64>> {
    let n = delta_a.nrows();
    let rhs = (a_bar - DMatrix::<f64>::identity(n, n)) * delta_b;
    let lu = delta_a.clone().lu();
    let diag_max = lu.u().diagonal().amax();
    let diag_min = lu.u().diagonal().iter().map(|v| v.abs()).fold(f64::INFINITY, f64::min);
    if diag_min <= 1e-12 * diag_max.max(1.0) {
        return None;
    }
    lu.solve(&rhs)
}

/// Zero-order-hold discretization.
pub fn discretize_zoh(ssm: &ContinuousSsm) -> Result<DiscreteSsm> {
    let n = ssm.state_size();
    let delta_a = &ssm.a * ssm.delta;
    let delta_b = &ssm.b * ssm.delta;
    let a_bar = matrix_exp(&delta_a);
    let b_bar = if delta_a.norm() < ZOH_SERIES_NORM {
        zoh_input_series(&delta_a, &delta_b, ZOH_SERIES_TERMS)
    } else {
        match zoh_input_explicit(&delta_a, &a_bar, &delta_b) {
            Some(b) => b,
            // Singular but not small: the top-right block of
            // exp([[dA, dB], [0, 0]]) is exactly the series limit.
            None => {
                let mut aug = DMatrix::zeros(n + 1, n + 1);
                aug.view_mut((0, 0), (n, n)).copy_from(&delta_a);
                aug.view_mut((0, n), (n, 1)).copy_from(&delta_b);
                matrix_exp(&aug).view((0, n), (n, 1)).clone_owned().column(0).into()
            }
        }
    };
    if !(a_bar.iter().all(|v| v.is_finite()) && b_bar.iter().all(|v| v.is_finite())) {
        return Err(Error::InvalidParameter("discretization overflowed".into()));
    }
    Ok(DiscreteSsm {
        a_bar,
        b_bar,
        c: ssm.c.clone(),
    })
}

/// Recurrent scan. Returns the outputs and the state after the last input,
/// which can be passed back in to resume.
pub fn scan_recurrent(d: &DiscreteSsm, x: &[f64], h0: Option<&ScanState>) -> Result<(Vec<f64>, ScanState)> {
    let n = d.state_size();
    if x.is_empty() {
        return Err(Error::Shape("scan input must be non-empty".into()));
    }
    let mut state = match h0 {
        Some(s) if s.h.len() != n => {
            return Err(Error::Shape(format!("initial state has {} entries, expected {n}", s.h.len())))
        }
        Some(s) => s.clone(),
        None => ScanState::zeros(n),
    };
    let mut y = Vec::with_capacity(x.len());
    for &xt in x {
        state.h = &d.a_bar * &state.h + &d.b_bar * xt;
        state.step += 1;
        y.push(d.c.dot(&state.h.transpose()));
    }
    Ok((y, state))
}

/// Parameters a scan can run on.
#[derive(Clone, Copy, Debug)]
pub enum ScanParams<'a> {
    TimeInvariant(&'a DiscreteSsm),
    Selective(&'a SelectiveInputs),
}

impl<'a> From<&'a DiscreteSsm> for ScanParams<'a> {
    fn from(d: &'a DiscreteSsm) -> Self {
        ScanParams::TimeInvariant(d)
    }
}

impl<'a> From<&'a SelectiveInputs> for ScanParams<'a> {
    fn from(s: &'a SelectiveInputs) -> Self {
        ScanParams::Selective(s)
    }
}

/// Kernel `K = (C B_bar, C A_bar B_bar, ..., C A_bar^{len-1} B_bar)`.
pub fn ssm_kernel(d: &DiscreteSsm, len: usize) -> Vec<f64> {
    let mut k = Vec::with_capacity(len);
    let mut v = d.b_bar.clone();
    for _ in 0..len {
        k.push(d.c.dot(&v.transpose()));
        v = &d.a_bar * v;
    }
    k
}

/// Convolutional form `y = x * K` with a zero initial state. Only defined
/// for time-invariant parameters.
pub fn scan_convolutional<'a>(params: impl Into<ScanParams<'a>>, x: &[f64]) -> Result<Vec<f64>> {
    let d = match params.into() {
        ScanParams::TimeInvariant(d) => d,
        ScanParams::Selective(_) => {
            return Err(Error::UnsupportedMode(
                "convolutional scan needs time-invariant parameters".into(),
            ))
        }
    };
    if x.is_empty() {
        return Err(Error::Shape("scan input must be non-empty".into()));
    }
    let k = ssm_kernel(d, x.len());
    Ok((0..x.len())
        .map(|t| (0..=t).map(|j| k[j] * x[t - j]).sum())
        .collect())
}

/// `expm1(z) / z`, the scalar ZOH input gain per unit step.
pub fn phi1(z: f64) -> f64 {
    if z.abs() < ZOH_SERIES_NORM {
        let mut acc = 0.0;
        let mut term = 1.0;
        for k in 0..ZOH_SERIES_TERMS {
            term /= (k + 1) as f64;
            acc += term;
            term *= z;
        }
        acc
    } else {
        z.exp_m1() / z
    }
}

/// Derivative of [`phi1`].
pub fn phi1_prime(z: f64) -> f64 {
    if z.abs() < 1e-3 {
        // sum_{k>=1} k z^{k-1} / (k+1)!
        let mut acc = 0.0;
        let mut zpow = 1.0;
        let mut fact = 2.0;
        for k in 1..12 {
            acc += k as f64 * zpow / fact;
            zpow *= z;
            fact *= (k + 2) as f64;
        }
        acc
    } else {
        (z * z.exp() - z.exp_m1()) / (z * z)
    }
}

/// Inputs of one selective scan, all already projected per token.
///
/// Shapes: `x` and `delta` are `L x D`, `b` and `c` are `L x N`, `a` is
/// `D x N` (strictly negative), `h0` is `D x N`.
#[derive(Clone, Debug)]
pub struct SelectiveInputs {
    pub x: Tensor,
    pub delta: Tensor,
    pub b: Tensor,
    pub c: Tensor,
    pub a: Tensor,
    pub h0: Tensor,
}

/// Forward results kept for the backward pass.
#[derive(Clone, Debug)]
pub struct ScanTrace {
    /// `L x D` outputs.
    pub y: Tensor,
    /// States after every step, `L` blocks of `D x N`.
    pub states: Vec<f64>,
}

impl ScanTrace {
    /// Final hidden state bank, `D x N`.
    pub fn final_state(&self, d: usize, n: usize) -> Tensor {
        let len = self.states.len() / (d * n);
        let start = (len - 1) * d * n;
        Tensor::from_vec(&[d, n], self.states[start..].to_vec()).expect("state bank shape")
    }
}

impl SelectiveInputs {
    fn dims(&self) -> Result<(usize, usize, usize)> {
        let (l, d) = (self.x.rows(), self.x.cols());
        let n = self.a.cols();
        let ok = l > 0
            && self.delta.shape() == [l, d]
            && self.b.shape() == [l, n]
            && self.c.shape() == [l, n]
            && self.a.shape() == [d, n]
            && self.h0.shape() == [d, n];
        if !ok {
            return Err(Error::Shape(format!(
                "selective scan inputs x{:?} delta{:?} b{:?} c{:?} a{:?} h0{:?}",
                self.x.shape(),
                self.delta.shape(),
                self.b.shape(),
                self.c.shape(),
                self.a.shape(),
                self.h0.shape()
            )));
        }
        Ok((l, d, n))
    }

    /// Runs the per-channel recurrence with per-token ZOH:
    /// `h_k = exp(delta_k a) h_{k-1} + delta_k phi1(delta_k a) b_k x_k`,
    /// `y_k = c_k . h_k`.
    pub fn forward(&self) -> Result<ScanTrace> {
        let (l, d, n) = self.dims()?;
        if let Some(bad) = self.delta.data().iter().find(|v| !(**v > 0.0)) {
            return Err(Error::Invariant(format!("selective step size {bad} is not positive")));
        }
        let (x, dt, bm, cm, a) = (
            self.x.data(),
            self.delta.data(),
            self.b.data(),
            self.c.data(),
            self.a.data(),
        );
        let mut states = vec![0.0; l * d * n];
        let mut y = Tensor::zeros(&[l, d]);
        let mut prev = self.h0.data().to_vec();
        for k in 0..l {
            let cur = &mut states[k * d * n..(k + 1) * d * n];
            let bk = &bm[k * n..(k + 1) * n];
            let ck = &cm[k * n..(k + 1) * n];
            let yk = y.row_mut(k);
            for ch in 0..d {
                let step = dt[k * d + ch];
                let xin = x[k * d + ch];
                let mut acc = 0.0;
                for s in 0..n {
                    let z = step * a[ch * n + s];
                    let idx = ch * n + s;
                    let h = z.exp() * prev[idx] + step * phi1(z) * bk[s] * xin;
                    cur[idx] = h;
                    acc += ck[s] * h;
                }
                yk[ch] = acc;
            }
            prev.copy_from_slice(cur);
        }
        Ok(ScanTrace { y, states })
    }

    /// Gradients of a scalar objective with respect to `x`, `delta`, `b`,
    /// `c` and `a`, given its gradient `gy` with respect to the outputs.
    pub fn backward(&self, trace: &ScanTrace, gy: &Tensor) -> SelectiveGrads {
        let (l, d, n) = self.dims().expect("validated in forward");
        let (x, dt, bm, cm, a) = (
            self.x.data(),
            self.delta.data(),
            self.b.data(),
            self.c.data(),
            self.a.data(),
        );
        let gyd = gy.data();
        let mut g = SelectiveGrads {
            x: Tensor::zeros(&[l, d]),
            delta: Tensor::zeros(&[l, d]),
            b: Tensor::zeros(&[l, n]),
            c: Tensor::zeros(&[l, n]),
            a: Tensor::zeros(&[d, n]),
        };
        // gradient flowing into h_k from later steps
        let mut gh = vec![0.0; d * n];
        for k in (0..l).rev() {
            let cur = &trace.states[k * d * n..(k + 1) * d * n];
            let prev: &[f64] = if k == 0 {
                self.h0.data()
            } else {
                &trace.states[(k - 1) * d * n..k * d * n]
            };
            for ch in 0..d {
                let step = dt[k * d + ch];
                let xin = x[k * d + ch];
                let gyk = gyd[k * d + ch];
                let mut gx = 0.0;
                let mut gstep = 0.0;
                for s in 0..n {
                    let idx = ch * n + s;
                    let av = a[idx];
                    let z = step * av;
                    let decay = z.exp();
                    let p1 = phi1(z);
                    let bks = bm[k * n + s];
                    // h_k = decay * prev + step * p1 * b * x
                    let ghk = gh[idx] + cm[k * n + s] * gyk;
                    g.c.data_mut()[k * n + s] += gyk * cur[idx];
                    let gain = step * p1;
                    gx += ghk * gain * bks;
                    g.b.data_mut()[k * n + s] += ghk * gain * xin;
                    let g_gain = ghk * bks * xin;
                    let g_decay = ghk * prev[idx];
                    let dp1 = phi1_prime(z);
                    // d decay/d step = a decay; d gain/d step = p1 + step a p1'
                    gstep += g_decay * av * decay + g_gain * (p1 + z * dp1);
                    // d decay/d a = step decay; d gain/d a = step^2 p1'
                    g.a.data_mut()[idx] += g_decay * step * decay + g_gain * step * step * dp1;
                    gh[idx] = ghk * decay;
                }
                g.x.data_mut()[k * d + ch] = gx;
                g.delta.data_mut()[k * d + ch] = gstep;
            }
        }
        g
    }
}

#[derive(Clone, Debug)]
pub struct SelectiveGrads {
    pub x: Tensor,
    pub delta: Tensor,
    pub b: Tensor,
    pub c: Tensor,
    pub a: Tensor,
}

pub fn softplus(v: f64) -> f64 {
    if v > 30.0 {
        v
    } else {
        v.exp().ln_1p()
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Token-to-parameter projections of a selective scan.
///
/// `delta_t = softplus(x_t W_delta + b_delta)`, `B_t = x_t W_b + b_b`,
/// `C_t = x_t W_c + b_c`, `A = -exp(a_log)`.
#[derive(Clone, Debug)]
pub struct SelectiveProjections {
    pub w_delta: Tensor,
    pub b_delta: Tensor,
    pub w_b: Tensor,
    pub b_b: Tensor,
    pub w_c: Tensor,
    pub b_c: Tensor,
    pub a_log: Tensor,
}

impl SelectiveProjections {
    /// All projection weights zero; `delta`, `B`, `C` are then constant per
    /// token and given by the biases.
    pub fn constant(delta_raw: &[f64], b: &[f64], c: &[f64], a_log: Tensor) -> Result<Self> {
        let d = delta_raw.len();
        let n = b.len();
        if c.len() != n || a_log.shape() != [d, n] {
            return Err(Error::Shape("constant projection dimensions".into()));
        }
        Ok(Self {
            w_delta: Tensor::zeros(&[d, d]),
            b_delta: Tensor::from_vec(&[1, d], delta_raw.to_vec())?,
            w_b: Tensor::zeros(&[d, n]),
            b_b: Tensor::from_vec(&[1, n], b.to_vec())?,
            w_c: Tensor::zeros(&[d, n]),
            b_c: Tensor::from_vec(&[1, n], c.to_vec())?,
            a_log,
        })
    }

    pub fn channels(&self) -> usize {
        self.w_delta.rows()
    }

    pub fn state_size(&self) -> usize {
        self.a_log.cols()
    }

    /// Projects a token sequence into scan inputs.
    pub fn project(&self, tokens: &Tensor, h0: Option<&Tensor>) -> Result<SelectiveInputs> {
        let (d, n) = (self.channels(), self.state_size());
        if tokens.cols() != d || tokens.rows() == 0 {
            return Err(Error::Shape(format!(
                "tokens {:?} for {d} channels",
                tokens.shape()
            )));
        }
        let l = tokens.rows();
        let affine = |w: &Tensor, bias: &Tensor| {
            let mut out = Tensor::zeros(&[l, w.cols()]);
            gemm(l, d, w.cols(), tokens.data(), false, w.data(), false, out.data_mut(), false);
            for r in 0..l {
                for (o, b) in out.row_mut(r).iter_mut().zip(bias.data()) {
                    *o += b;
                }
            }
            out
        };
        let delta = affine(&self.w_delta, &self.b_delta).map(softplus);
        let h0 = match h0 {
            Some(h) if h.shape() != [d, n] => {
                return Err(Error::Shape(format!("state bank {:?}, expected [{d}, {n}]", h.shape())))
            }
            Some(h) => h.clone(),
            None => Tensor::zeros(&[d, n]),
        };
        Ok(SelectiveInputs {
            x: tokens.clone(),
            delta,
            b: affine(&self.w_b, &self.b_b),
            c: affine(&self.w_c, &self.b_c),
            a: self.a_log.map(|v| -v.exp()),
            h0,
        })
    }
}

/// Selective scan over `tokens` (`L x D`). Returns the `L x D` outputs and
/// the final `D x N` state bank.
pub fn selective_scan(
    tokens: &Tensor,
    proj: &SelectiveProjections,
    h0: Option<&Tensor>,
) -> Result<(Tensor, Tensor)> {
    let inputs = proj.project(tokens, h0)?;
    let trace = inputs.forward()?;
    let h = trace.final_state(proj.channels(), proj.state_size());
    Ok((trace.y, h))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn lti(n: usize, rng: &mut impl Rng) -> DiscreteSsm {
        let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-0.4..0.4));
        let b = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        let c = RowDVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        DiscreteSsm::new(a, b, c).unwrap()
    }

    #[test]
    fn scalar_zoh_ln2() {
        let b = 0.7;
        let d = discretize_zoh(&ContinuousSsm::scalar(1.0, b, 1.0, 2f64.ln()).unwrap()).unwrap();
        assert!((d.a_bar[(0, 0)] - 2.0).abs() < 1e-12);
        assert!((d.b_bar[0] - b).abs() < 1e-12);
    }

    #[test]
    fn scalar_zoh_singular() {
        let d = discretize_zoh(&ContinuousSsm::scalar(0.0, 3.0, 1.0, 0.1).unwrap()).unwrap();
        assert_eq!(d.a_bar[(0, 0)], 1.0);
        assert!((d.b_bar[0] - 0.3).abs() < 1e-15);
    }

    #[test]
    fn singular_large_matrix_uses_exact_limit() {
        // A = diag(0, -5): B_bar = (delta b0, (1 - e^{-5 delta}) / 5 * b1)
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![0.0, -5.0]));
        let ssm = ContinuousSsm::new(a, DVector::from_vec(vec![1.0, 2.0]), RowDVector::from_vec(vec![1.0, 1.0]), 0.5)
            .unwrap();
        let d = discretize_zoh(&ssm).unwrap();
        assert!((d.b_bar[0] - 0.5).abs() < 1e-12);
        assert!((d.b_bar[1] - 2.0 * (1.0 - (-2.5f64).exp()) / 5.0).abs() < 1e-12);
    }

    #[test]
    fn tiny_delta_goes_to_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = DMatrix::from_fn(3, 3, |_, _| rng.random_range(-2.0..2.0));
        let ssm = ContinuousSsm::new(a, DVector::from_element(3, 1.0), RowDVector::from_element(3, 1.0), 1e-9)
            .unwrap();
        let d = discretize_zoh(&ssm).unwrap();
        assert!((d.a_bar - DMatrix::identity(3, 3)).amax() < 1e-8);
        assert!(d.b_bar.amax() < 1e-8);
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(matches!(
            ContinuousSsm::scalar(1.0, 1.0, 1.0, 0.0),
            Err(Error::InvalidParameter(_))
        ));
        assert!(matches!(
            ContinuousSsm::scalar(f64::NAN, 1.0, 1.0, 0.1),
            Err(Error::InvalidParameter(_))
        ));
        assert!(matches!(
            ContinuousSsm::new(DMatrix::zeros(2, 3), DVector::zeros(2), RowDVector::zeros(2), 0.1),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn matrix_exp_matches_nalgebra() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for n in 1..=6 {
            let m = DMatrix::from_fn(n, n, |_, _| rng.random_range(-3.0..3.0));
            let ours = matrix_exp(&m);
            let theirs = m.clone().exp();
            let scale = theirs.amax().max(1.0);
            assert!((ours - theirs).amax() / scale < 1e-12, "n = {n}");
        }
    }

    #[test]
    fn recurrent_hand_example() {
        let d = DiscreteSsm::new(
            DMatrix::from_element(1, 1, 0.5),
            DVector::from_element(1, 1.0),
            RowDVector::from_element(1, 1.0),
        )
        .unwrap();
        let (y, s) = scan_recurrent(&d, &[1.0, 0.0, 0.0], None).unwrap();
        assert_eq!(y, vec![1.0, 0.5, 0.25]);
        assert_eq!(s.step, 3);
        let yc = scan_convolutional(&d, &[1.0, 0.0, 0.0]).unwrap();
        assert_eq!(yc, vec![1.0, 0.5, 0.25]);
    }

    #[test]
    fn frozen_state_repeats_readout() {
        let n = 3;
        let d = DiscreteSsm::new(
            DMatrix::identity(n, n),
            DVector::zeros(n),
            RowDVector::from_vec(vec![1.0, -2.0, 0.5]),
        )
        .unwrap();
        let v = DVector::from_vec(vec![2.0, 1.0, 4.0]);
        let (y, _) = scan_recurrent(&d, &[3.0, -1.0, 8.0, 0.2], Some(&ScanState::from_vector(v))).unwrap();
        assert!(y.iter().all(|&v| v == 2.0));
    }

    #[test]
    fn convolution_edge_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = lti(4, &mut rng);
        let y = scan_convolutional(&d, &[2.5]).unwrap();
        let cb = d.c.dot(&d.b_bar.transpose());
        assert!((y[0] - cb * 2.5).abs() < 1e-15);

        let mut memoryless = d.clone();
        memoryless.a_bar = DMatrix::zeros(4, 4);
        let x = [1.0, -2.0, 0.5];
        let y = scan_convolutional(&memoryless, &x).unwrap();
        for (yt, xt) in y.iter().zip(x) {
            assert!((yt - cb * xt).abs() < 1e-15);
        }
    }

    #[test]
    fn convolution_rejects_selective() {
        let inputs = SelectiveInputs {
            x: Tensor::zeros(&[2, 1]),
            delta: Tensor::filled(&[2, 1], 0.1),
            b: Tensor::zeros(&[2, 1]),
            c: Tensor::zeros(&[2, 1]),
            a: Tensor::filled(&[1, 1], -1.0),
            h0: Tensor::zeros(&[1, 1]),
        };
        assert!(matches!(
            scan_convolutional(&inputs, &[1.0, 2.0]),
            Err(Error::UnsupportedMode(_))
        ));
    }

    #[test]
    fn scan_shape_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = lti(2, &mut rng);
        assert!(matches!(scan_recurrent(&d, &[], None), Err(Error::Shape(_))));
        let bad = ScanState::zeros(3);
        assert!(matches!(scan_recurrent(&d, &[1.0], Some(&bad)), Err(Error::Shape(_))));
    }

    #[test]
    fn phi1_branches_agree() {
        for z in [-2e-3f64, -1.01e-4, -0.99e-4, 0.0, 0.5e-4, 2e-3] {
            let exact = if z == 0.0 { 1.0 } else { z.exp_m1() / z };
            assert!((phi1(z) - exact).abs() < 1e-12, "z = {z}");
            let h = 1e-6;
            let fd = (phi1(z + h) - phi1(z - h)) / (2.0 * h);
            assert!((phi1_prime(z) - fd).abs() < 1e-6, "z = {z}");
        }
    }

    #[test]
    fn selective_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (l, d, n) = (5, 3, 2);
        let base = SelectiveInputs {
            x: Tensor::randn(&[l, d], 1.0, &mut rng),
            delta: Tensor::randn(&[l, d], 0.3, &mut rng).map(|v| softplus(v) + 0.05),
            b: Tensor::randn(&[l, n], 1.0, &mut rng),
            c: Tensor::randn(&[l, n], 1.0, &mut rng),
            a: Tensor::randn(&[d, n], 0.5, &mut rng).map(|v| -v.exp()),
            h0: Tensor::randn(&[d, n], 1.0, &mut rng),
        };
        let weights = Tensor::randn(&[l, d], 1.0, &mut rng);
        let objective = |inp: &SelectiveInputs| -> f64 {
            let y = inp.forward().unwrap().y;
            y.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum()
        };
        let trace = base.forward().unwrap();
        let g = base.backward(&trace, &weights);
        let eps = 1e-6;
        let fields: [(fn(&mut SelectiveInputs) -> &mut Tensor, &Tensor); 5] = [
            (|s| &mut s.x, &g.x),
            (|s| &mut s.delta, &g.delta),
            (|s| &mut s.b, &g.b),
            (|s| &mut s.c, &g.c),
            (|s| &mut s.a, &g.a),
        ];
        for (field, analytic) in fields {
            for i in 0..analytic.len() {
                let mut plus = base.clone();
                field(&mut plus).data_mut()[i] += eps;
                let mut minus = base.clone();
                field(&mut minus).data_mut()[i] -= eps;
                let fd = (objective(&plus) - objective(&minus)) / (2.0 * eps);
                let an = analytic.data()[i];
                assert!((fd - an).abs() < 1e-6 * (1.0 + an.abs()), "fd {fd} vs {an}");
            }
        }
    }

    #[test]
    fn non_positive_step_is_an_invariant_violation() {
        let inputs = SelectiveInputs {
            x: Tensor::zeros(&[1, 1]),
            delta: Tensor::zeros(&[1, 1]),
            b: Tensor::zeros(&[1, 1]),
            c: Tensor::zeros(&[1, 1]),
            a: Tensor::filled(&[1, 1], -1.0),
            h0: Tensor::zeros(&[1, 1]),
        };
        assert!(matches!(inputs.forward(), Err(Error::Invariant(_))));
    }
}
