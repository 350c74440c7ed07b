//! Discrete proxy-based code learning.
//!
//! Minimizes `||Y - D E||_F^2 + sigma * ||C - O E||_F^2` subject to
//! `C in {-1,+1}^{k x n}` and `O O^T = I` by cycling exact block updates
//! D -> E -> O -> C. Every block update is a conditional global minimizer, so
//! the objective never increases.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ndtensor::{rank, solve_spd, svd_small, Matrix};

/// Single-label class assignment of `n` samples, viewed as the one-hot
/// `l x n` matrix `Y`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMatrix {
    num_classes: usize,
    labels: Vec<usize>,
}

impl LabelMatrix {
    pub fn new(num_classes: usize, labels: Vec<usize>) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::Validation(
                "label matrix needs at least one class".into(),
            ));
        }
        if let Some((i, &bad)) = labels.iter().enumerate().find(|(_, &c)| c >= num_classes) {
            return Err(Error::Validation(format!(
                "sample {i} has label {bad}, outside [0, {num_classes})"
            )));
        }
        Ok(LabelMatrix {
            num_classes,
            labels,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn to_matrix(&self) -> Matrix {
        let mut y = Matrix::zeros(self.num_classes, self.labels.len());
        for (i, &c) in self.labels.iter().enumerate() {
            y[(c, i)] = 1.0;
        }
        y
    }
}

/// `k x n` matrix over `{-1, +1}`, stored column by column.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct CodeMatrix {
    k: usize,
    n: usize,
    bits: Vec<i8>,
}

impl CodeMatrix {
    pub fn from_columns(k: usize, columns: &[Vec<i8>]) -> Result<Self> {
        let mut bits = Vec::with_capacity(k * columns.len());
        for (i, col) in columns.iter().enumerate() {
            if col.len() != k {
                return Err(Error::dim("code column", &[k], &[col.len()]));
            }
            if let Some(&v) = col.iter().find(|&&v| v != 1 && v != -1) {
                return Err(Error::Validation(format!(
                    "code column {i} holds {v}, not +-1"
                )));
            }
            bits.extend_from_slice(col);
        }
        Ok(CodeMatrix {
            k,
            n: columns.len(),
            bits,
        })
    }

    /// Elementwise sign of a real `k x n` matrix with `sign(0) = +1`.
    pub fn sign_of(m: &Matrix) -> Self {
        let (k, n) = m.shape();
        let mut bits = Vec::with_capacity(k * n);
        for i in 0..n {
            for b in 0..k {
                bits.push(if m[(b, i)] >= 0.0 { 1 } else { -1 });
            }
        }
        CodeMatrix { k, n, bits }
    }

    pub fn bits(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn column(&self, i: usize) -> &[i8] {
        &self.bits[i * self.k..(i + 1) * self.k]
    }

    pub fn columns(&self) -> impl Iterator<Item = &[i8]> {
        self.bits.chunks_exact(self.k.max(1))
    }

    pub fn to_matrix(&self) -> Matrix {
        Matrix::from_fn(self.k, self.n, |b, i| self.bits[i * self.k + b] as f64)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolverConfig {
    pub sigma: f64,
    pub max_iters: usize,
    /// Stop once the relative objective decrease of a full sweep drops below this.
    pub tol: f64,
    pub seed: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            sigma: 1.0,
            max_iters: 100,
            tol: 1e-6,
            seed: 0,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return Err(Error::Config(format!(
                "sigma must be positive, got {}",
                self.sigma
            )));
        }
        if !(self.tol > 0.0) {
            return Err(Error::Config(format!(
                "tol must be positive, got {}",
                self.tol
            )));
        }
        if self.max_iters == 0 {
            return Err(Error::Config("max_iters must be positive".into()));
        }
        Ok(())
    }
}

/// Full block state of the alternating minimization.
#[derive(Clone, Debug)]
pub struct SolverState {
    /// Class proxies, `l x k`.
    pub proxies: Matrix,
    /// Real relaxation of the codes, `k x n`.
    pub relaxed: Matrix,
    /// Orthogonal `k x k`.
    pub rotation: Matrix,
    pub codes: CodeMatrix,
}

/// Which block was just updated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Step {
    Init,
    Proxies,
    Relaxed,
    Rotation,
    Codes,
}

pub struct StepEvent<'a> {
    pub iteration: usize,
    pub step: Step,
    pub objective: f64,
    pub state: &'a SolverState,
}

#[derive(Clone, Debug)]
pub struct SolveOutcome {
    pub state: SolverState,
    /// Objective after initialization, then after each full sweep.
    pub trace: Vec<f64>,
    pub iterations: usize,
}

impl SolveOutcome {
    pub fn final_objective(&self) -> f64 {
        *self
            .trace
            .last()
            .expect("trace holds the initial objective")
    }
}

/// Draws allowed before accepting a degenerate projection.
const PROJECTION_DRAWS: usize = 64;

/// Seeded random `k x l` matrix of `+-1`, redrawn until it has full rank and,
/// when `2^k >= l`, pairwise distinct columns.
///
/// A projection that maps two classes to equal or antipodal codes is a fixed
/// point the alternating updates cannot leave.
pub fn label_projection(k: usize, l: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let need_distinct = k >= usize::BITS as usize || (1usize << k) >= l;
    let mut draw = || Matrix::from_fn(k, l, |_, _| if rng.gen::<bool>() { 1.0 } else { -1.0 });
    let mut p = draw();
    for _ in 1..PROJECTION_DRAWS {
        let distinct = !need_distinct
            || (0..l).all(|a| (a + 1..l).all(|b| (0..k).any(|r| p[(r, a)] != p[(r, b)])));
        if distinct && rank(&p, 1e-12) == k.min(l) {
            break;
        }
        p = draw();
    }
    p
}

/// Seeded label-projection initialization.
///
/// Each class gets the sign pattern of one column of [`label_projection`], so
/// samples sharing a label start with identical codes.
pub fn init_solver(y: &LabelMatrix, k: usize, config: &SolverConfig) -> Result<SolverState> {
    if k == 0 {
        return Err(Error::Config("code length k must be at least 1".into()));
    }
    config.validate()?;
    let projection = label_projection(k, y.num_classes(), config.seed);
    let projected = projection.matmul(&y.to_matrix())?;
    let codes = CodeMatrix::sign_of(&projected);
    let relaxed = codes.to_matrix();
    let proxies = update_proxies(&y.to_matrix(), &relaxed)?;
    Ok(SolverState {
        proxies,
        relaxed,
        rotation: Matrix::identity(k),
        codes,
    })
}

/// Relative cutoff for singular values treated as zero in the proxy step.
const PINV_RTOL: f64 = 1e-12;

/// Minimum-norm least-squares proxies `D = Y E^T (E E^T)^+`.
///
/// `E E^T` is rank deficient whenever `k` exceeds the number of distinct code
/// columns, which is the normal case for class-consistent codes, so the
/// pseudo-inverse is used instead of a plain solve.
pub fn update_proxies(y: &Matrix, relaxed: &Matrix) -> Result<Matrix> {
    if y.cols() != relaxed.cols() {
        return Err(Error::dim(
            "update_proxies",
            &[y.rows(), y.cols()],
            &[relaxed.rows(), relaxed.cols()],
        ));
    }
    let gram = relaxed.matmul_t(relaxed)?;
    let ye = y.matmul_t(relaxed)?;
    let svd = svd_small(&gram)?;
    let cutoff = svd.s.first().copied().unwrap_or(0.0) * PINV_RTOL * gram.rows() as f64;
    let k = gram.rows();
    // G^+ = V diag(1/s) U^T over the retained singular triplets.
    let pinv = Matrix::from_fn(k, k, |r, c| {
        svd.s
            .iter()
            .enumerate()
            .filter(|(_, &s)| s > cutoff)
            .map(|(j, &s)| svd.v[(r, j)] * svd.u[(c, j)] / s)
            .sum()
    });
    ye.matmul(&pinv)
}

/// `E = (D^T D + sigma I)^{-1} (D^T Y + sigma O^T C)`.
pub fn update_relaxed(
    y: &Matrix,
    proxies: &Matrix,
    rotation: &Matrix,
    codes: &CodeMatrix,
    sigma: f64,
) -> Result<Matrix> {
    let mut lhs = proxies.t_matmul(proxies)?;
    lhs.add_diag(sigma);
    let rhs = proxies
        .t_matmul(y)?
        .add(&rotation.t_matmul(&codes.to_matrix())?.scale(sigma))?;
    solve_spd(&lhs, &rhs)
}

/// Orthogonal Procrustes: `O = U V^T` where `C E^T = U S V^T`.
pub fn update_rotation(codes: &CodeMatrix, relaxed: &Matrix) -> Result<Matrix> {
    let cross = codes.to_matrix().matmul_t(relaxed)?;
    let svd = svd_small(&cross)?;
    svd.u.matmul_t(&svd.v)
}

/// `C = sign(O E)` with `sign(0) = +1`.
pub fn update_codes(rotation: &Matrix, relaxed: &Matrix) -> Result<CodeMatrix> {
    Ok(CodeMatrix::sign_of(&rotation.matmul(relaxed)?))
}

/// `||Y - D E||_F^2 + sigma * ||C - O E||_F^2`.
pub fn objective(
    y: &Matrix,
    proxies: &Matrix,
    relaxed: &Matrix,
    rotation: &Matrix,
    codes: &CodeMatrix,
    sigma: f64,
) -> Result<f64> {
    let fit = y.sub(&proxies.matmul(relaxed)?)?.frobenius_sq();
    let quant = codes
        .to_matrix()
        .sub(&rotation.matmul(relaxed)?)?
        .frobenius_sq();
    Ok(fit + sigma * quant)
}

fn state_objective(y: &Matrix, s: &SolverState, sigma: f64) -> Result<f64> {
    objective(y, &s.proxies, &s.relaxed, &s.rotation, &s.codes, sigma)
}

pub fn solve(labels: &LabelMatrix, k: usize, config: &SolverConfig) -> Result<SolveOutcome> {
    solve_with_observer(labels, k, config, |_| {})
}

/// [`solve`], reporting the objective after every block update.
pub fn solve_with_observer(
    labels: &LabelMatrix,
    k: usize,
    config: &SolverConfig,
    mut observe: impl FnMut(&StepEvent<'_>),
) -> Result<SolveOutcome> {
    let mut state = init_solver(labels, k, config)?;
    let y = labels.to_matrix();
    let sigma = config.sigma;
    let mut current = state_objective(&y, &state, sigma)?;
    observe(&StepEvent {
        iteration: 0,
        step: Step::Init,
        objective: current,
        state: &state,
    });
    let mut trace = vec![current];
    let mut iterations = 0;
    while iterations < config.max_iters {
        iterations += 1;
        for step in [Step::Proxies, Step::Relaxed, Step::Rotation, Step::Codes] {
            match step {
                Step::Proxies => state.proxies = update_proxies(&y, &state.relaxed)?,
                Step::Relaxed => {
                    state.relaxed =
                        update_relaxed(&y, &state.proxies, &state.rotation, &state.codes, sigma)?
                }
                Step::Rotation => state.rotation = update_rotation(&state.codes, &state.relaxed)?,
                Step::Codes => state.codes = update_codes(&state.rotation, &state.relaxed)?,
                Step::Init => unreachable!(),
            }
            let value = state_objective(&y, &state, sigma)?;
            observe(&StepEvent {
                iteration: iterations,
                step,
                objective: value,
                state: &state,
            });
            current = value;
        }
        let previous = *trace.last().unwrap();
        trace.push(current);
        let decrease = previous - current;
        if previous <= 0.0 || decrease <= config.tol * previous {
            break;
        }
    }
    Ok(SolveOutcome {
        state,
        trace,
        iterations,
    })
}
