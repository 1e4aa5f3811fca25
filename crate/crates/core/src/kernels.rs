//! Covariance functions on the reasoning-level axis and their combination
//! into linear-model-of-coregionalization (LMC) covariance matrices.
//!
//! Inputs are scalar levels. A multi-output covariance over `D` outputs is
//! `Σ = Σ_z B_z ⊗ k_z(X, X')`, laid out with outer blocks indexed by output
//! and inner blocks by input: entry `(d·N + i, d'·M + j)` holds the
//! covariance between output `d` at `X[i]` and output `d'` at `X'[j]`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const SQRT_3: f64 = 1.732_050_807_568_877_2;

/// Length scales of the six Matérn components in the default bank.
pub const DEFAULT_BETAS: [f64; 6] = [0.25, 0.5, 0.75, 1.0, 1.25, 1.5];

/// Upper bound on the number of latent functions per kernel in the default bank.
pub const DEFAULT_MAX_RANK: usize = 7;

/// Matérn kernel with smoothness 3/2.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Matern32Kernel {
    variance: f64,
    length_scale: f64,
}

impl Matern32Kernel {
    pub fn new(variance: f64, length_scale: f64) -> Result<Self> {
        if !(variance > 0.0 && variance.is_finite()) {
            return Err(Error::Parameter(format!("Matérn variance must be positive, got {variance}")));
        }
        if !(length_scale > 0.0 && length_scale.is_finite()) {
            return Err(Error::Parameter(format!(
                "Matérn length scale must be positive, got {length_scale}"
            )));
        }
        Ok(Matern32Kernel {
            variance,
            length_scale,
        })
    }

    pub fn variance(&self) -> f64 {
        self.variance
    }

    pub fn length_scale(&self) -> f64 {
        self.length_scale
    }

    /// `σ²(1 + √3·d/β)·exp(−√3·d/β)` for a non-negative distance `d`.
    pub fn eval(&self, d: f64) -> f64 {
        let r = SQRT_3 * d.abs() / self.length_scale;
        self.variance * (1.0 + r) * (-r).exp()
    }

    /// Derivative of [`eval`](Self::eval) with respect to `ln β`.
    pub(crate) fn d_log_length_scale(&self, d: f64) -> f64 {
        let r = SQRT_3 * d.abs() / self.length_scale;
        self.variance * r * r * (-r).exp()
    }
}

/// Free-function form of the Matérn-3/2 kernel with parameter validation.
pub fn matern32_eval(d: f64, variance: f64, length_scale: f64) -> Result<f64> {
    if d < 0.0 || !d.is_finite() {
        return Err(Error::Parameter(format!("distance must be finite and ≥ 0, got {d}")));
    }
    Ok(Matern32Kernel::new(variance, length_scale)?.eval(d))
}

/// Constant covariance, independent of the inputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiasKernel {
    variance: f64,
}

impl BiasKernel {
    pub fn new(variance: f64) -> Result<Self> {
        if !(variance >= 0.0 && variance.is_finite()) {
            return Err(Error::Parameter(format!("bias variance must be ≥ 0, got {variance}")));
        }
        Ok(BiasKernel { variance })
    }

    pub fn variance(&self) -> f64 {
        self.variance
    }

    pub fn eval(&self) -> f64 {
        self.variance
    }
}

pub fn bias_eval(variance: f64) -> Result<f64> {
    Ok(BiasKernel::new(variance)?.eval())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum BaseKernel {
    Matern32(Matern32Kernel),
    Bias(BiasKernel),
}

impl BaseKernel {
    pub fn eval(&self, x: f64, y: f64) -> f64 {
        match self {
            BaseKernel::Matern32(k) => k.eval((x - y).abs()),
            BaseKernel::Bias(k) => k.eval(),
        }
    }

    pub fn variance(&self) -> f64 {
        match self {
            BaseKernel::Matern32(k) => k.variance(),
            BaseKernel::Bias(k) => k.variance(),
        }
    }

    pub fn gram(&self, xs: &[f64], ys: &[f64]) -> DMatrix<f64> {
        DMatrix::from_fn(xs.len(), ys.len(), |i, j| self.eval(xs[i], ys[j]))
    }
}

/// `B = W·Wᵀ + diag(κ)`, optionally restricted to the zero-sum subspace as
/// `P·B·P` with `P = I − 11ᵀ/D`.
///
/// The restriction makes every output combination drawn from this component
/// sum to zero across outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoregionalizationMatrix {
    w: DMatrix<f64>,
    kappa: DVector<f64>,
    #[serde(default)]
    zero_sum: bool,
}

impl CoregionalizationMatrix {
    pub fn new(w: DMatrix<f64>, kappa: DVector<f64>) -> Result<Self> {
        if w.nrows() != kappa.len() {
            return Err(Error::Configuration(format!(
                "W has {} rows but κ has {} entries",
                w.nrows(),
                kappa.len()
            )));
        }
        if w.nrows() == 0 {
            return Err(Error::Configuration("coregionalization over zero outputs".into()));
        }
        if kappa.iter().any(|k| !(*k >= 0.0 && k.is_finite())) {
            return Err(Error::Parameter("κ entries must be finite and ≥ 0".into()));
        }
        if w.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parameter("W entries must be finite".into()));
        }
        Ok(CoregionalizationMatrix {
            w,
            kappa,
            zero_sum: false,
        })
    }

    pub fn identity(outputs: usize) -> Self {
        CoregionalizationMatrix {
            w: DMatrix::zeros(outputs, 1),
            kappa: DVector::from_element(outputs, 1.0),
            zero_sum: false,
        }
    }

    pub fn with_zero_sum(mut self, zero_sum: bool) -> Self {
        self.zero_sum = zero_sum;
        self
    }

    pub fn outputs(&self) -> usize {
        self.w.nrows()
    }

    pub fn rank(&self) -> usize {
        self.w.ncols()
    }

    pub fn w(&self) -> &DMatrix<f64> {
        &self.w
    }

    pub fn kappa(&self) -> &DVector<f64> {
        &self.kappa
    }

    pub fn is_zero_sum(&self) -> bool {
        self.zero_sum
    }

    pub fn b(&self) -> DMatrix<f64> {
        let raw = &self.w * self.w.transpose() + DMatrix::from_diagonal(&self.kappa);
        if self.zero_sum {
            let p = centering(self.outputs());
            &p * raw * &p
        } else {
            raw
        }
    }
}

/// `I − 11ᵀ/D`.
pub(crate) fn centering(d: usize) -> DMatrix<f64> {
    DMatrix::identity(d, d) - DMatrix::from_element(d, d, 1.0 / d as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankEntry {
    pub kernel: BaseKernel,
    pub coregionalization: CoregionalizationMatrix,
}

/// Ordered list of (base kernel, coregionalization) pairs sharing one output
/// dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelBank {
    entries: Vec<BankEntry>,
}

impl KernelBank {
    pub fn new(entries: Vec<BankEntry>) -> Result<Self> {
        let Some(first) = entries.first() else {
            return Err(Error::Configuration("kernel bank needs at least one entry".into()));
        };
        let d = first.coregionalization.outputs();
        if let Some(bad) = entries.iter().find(|e| e.coregionalization.outputs() != d) {
            return Err(Error::Configuration(format!(
                "bank mixes output dimensions {d} and {}",
                bad.coregionalization.outputs()
            )));
        }
        Ok(KernelBank { entries })
    }

    pub fn entries(&self) -> &[BankEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn outputs(&self) -> usize {
        self.entries[0].coregionalization.outputs()
    }
}

/// Multi-output covariance `Σ_z B_z ⊗ k_z(xs, ys)` in output-major block layout.
pub fn lmc_covariance(xs: &[f64], ys: &[f64], bank: &KernelBank) -> Result<DMatrix<f64>> {
    if xs.iter().chain(ys).any(|x| !x.is_finite()) {
        return Err(Error::Input("levels must be finite".into()));
    }
    Ok(lmc_covariance_unchecked(xs, ys, bank))
}

pub(crate) fn lmc_covariance_unchecked(xs: &[f64], ys: &[f64], bank: &KernelBank) -> DMatrix<f64> {
    let (n, m, d) = (xs.len(), ys.len(), bank.outputs());
    let mut sigma = DMatrix::zeros(n * d, m * d);
    for entry in bank.entries() {
        let k = entry.kernel.gram(xs, ys);
        let b = entry.coregionalization.b();
        add_kron(&mut sigma, &b, &k);
    }
    sigma
}

/// `out += b ⊗ k`.
pub(crate) fn add_kron(out: &mut DMatrix<f64>, b: &DMatrix<f64>, k: &DMatrix<f64>) {
    let (n, m) = k.shape();
    for d1 in 0..b.nrows() {
        for d2 in 0..b.ncols() {
            let scale = b[(d1, d2)];
            if scale == 0.0 {
                continue;
            }
            for j in 0..m {
                for i in 0..n {
                    out[(d1 * n + i, d2 * m + j)] += scale * k[(i, j)];
                }
            }
        }
    }
}

/// One kernel in a bank configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    #[serde(rename = "type")]
    pub kind: KernelKind,
    /// Fixed length scale; `None` makes it trainable. Ignored for bias kernels.
    #[serde(default)]
    pub beta: Option<f64>,
    /// Number of latent functions; `None` means `min(D, 7)`.
    #[serde(default)]
    pub rank: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelKind {
    Matern32,
    Bias,
}

/// Kernel bank layout, read from JSON as a list of [`KernelSpec`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BankConfig(pub Vec<KernelSpec>);

impl Default for BankConfig {
    /// One bias kernel plus six Matérn-3/2 kernels with fixed length scales.
    fn default() -> Self {
        let mut specs = vec![KernelSpec {
            kind: KernelKind::Bias,
            beta: None,
            rank: None,
        }];
        specs.extend(DEFAULT_BETAS.iter().map(|&b| KernelSpec {
            kind: KernelKind::Matern32,
            beta: Some(b),
            rank: None,
        }));
        BankConfig(specs)
    }
}

impl BankConfig {
    pub fn validate(&self) -> Result<()> {
        if self.0.is_empty() {
            return Err(Error::Configuration("bank config lists no kernels".into()));
        }
        for spec in &self.0 {
            if let Some(beta) = spec.beta {
                if !(beta > 0.0 && beta.is_finite()) {
                    return Err(Error::Configuration(format!("β must be positive, got {beta}")));
                }
            }
            if spec.rank == Some(0) {
                return Err(Error::Configuration("rank must be ≥ 1".into()));
            }
        }
        Ok(())
    }

    pub fn rank_for(spec: &KernelSpec, outputs: usize) -> usize {
        spec.rank.unwrap_or(outputs.min(DEFAULT_MAX_RANK))
    }
}

/// Covariance matrix with an explicit `(N, M, D)` header, stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SerializedCovariance {
    pub n: usize,
    pub m: usize,
    pub d: usize,
    pub data: Vec<f64>,
}

impl SerializedCovariance {
    pub fn from_matrix(sigma: &DMatrix<f64>, n: usize, m: usize, d: usize) -> Result<Self> {
        if sigma.shape() != (n * d, m * d) {
            return Err(Error::Input(format!(
                "matrix shape {:?} does not match header ({n}, {m}, {d})",
                sigma.shape()
            )));
        }
        let data = sigma.transpose().as_slice().to_vec();
        Ok(SerializedCovariance { n, m, d, data })
    }

    pub fn to_matrix(&self) -> Result<DMatrix<f64>> {
        let (rows, cols) = (self.n * self.d, self.m * self.d);
        if self.data.len() != rows * cols {
            return Err(Error::Input(format!(
                "{} values for a {rows}×{cols} matrix",
                self.data.len()
            )));
        }
        Ok(DMatrix::from_row_slice(rows, cols, &self.data))
    }
}
