//! The pushing losses: reciprocal eigenvalue-sum class separation, latent
//! covariance penalty, and discriminant-axis alignment, combined as
//! γ·ℓ_lda + λ·ℓ_cov + β·ℓ_align, plus the class-balanced batch sampler the
//! scatter statistics require.
//!
//! Everything is computed on the tape via trace/diagonal forms — the
//! eigenvalue sum equals trace(Σ_w⁻¹Σ_b), so no eigendecomposition is ever
//! differentiated.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::tape::{Tape, Var};

/// ℓ_lda is capped here for batches with no separation instead of going to
/// infinity.
pub const LDA_LOSS_CAP: f64 = 1e6;

/// Weights and thresholds of the combined pushing objective.
#[derive(Clone, Copy, Debug)]
pub struct PushWeights {
    /// ℓ_lda weight.
    pub gamma: f64,
    /// ℓ_cov weight.
    pub lambda: f64,
    /// ℓ_align weight.
    pub beta: f64,
    /// Active dimension count above which ℓ_align is dropped (its d×d solve
    /// is the expensive part, and ℓ_cov subsumes it in high dimension).
    pub align_dim_threshold: usize,
    /// Relative variance below which a dimension counts as dormant.
    pub variance_floor: f64,
}

impl Default for PushWeights {
    fn default() -> Self {
        Self {
            gamma: 1.0,
            lambda: 1e-3,
            beta: 1e-3,
            align_dim_threshold: 128,
            variance_floor: 1e-4,
        }
    }
}

/// Loss component values of one batch, for the per-step log.
#[derive(Clone, Copy, Debug, Default)]
pub struct PushParts {
    pub lda: f64,
    pub cov: f64,
    pub align: f64,
    pub active_dims: usize,
}

/// Dimensions whose batch variance is at least `variance_floor` times the
/// largest dimension variance. Returns the index set; empty when every
/// dimension is dead.
pub fn active_dims(latent: &crate::tensor::Tensor, variance_floor: f64) -> Result<Vec<usize>> {
    if latent.rank() != 2 {
        return Err(Error::Contract(format!(
            "active_dims expects [n×d] latent, got {:?}",
            latent.shape()
        )));
    }
    let (n, d) = (latent.rows(), latent.cols());
    if n < 2 {
        return Err(Error::Contract("active_dims needs at least 2 samples".into()));
    }
    let mut means = vec![0.0; d];
    for i in 0..n {
        for j in 0..d {
            means[j] += latent.at2(i, j);
        }
    }
    for m in means.iter_mut() {
        *m /= n as f64;
    }
    let mut vars = vec![0.0; d];
    for i in 0..n {
        for j in 0..d {
            let dv = latent.at2(i, j) - means[j];
            vars[j] += dv * dv;
        }
    }
    for v in vars.iter_mut() {
        *v /= n as f64;
    }
    let vmax = vars.iter().cloned().fold(0.0, f64::max);
    if vmax == 0.0 {
        return Ok(Vec::new());
    }
    Ok((0..d).filter(|&j| vars[j] >= variance_floor * vmax).collect())
}

/// Scatter matrices built on the tape from a latent batch restricted to the
/// given dimensions. Returns (Σ_a, Σ_w, Σ_b) vars.
pub fn scatter_on_tape(
    tape: &mut Tape,
    latent: Var,
    labels: &[usize],
    dims: &Arc<Vec<usize>>,
) -> Result<(Var, Var, Var)> {
    let n = tape.value(latent).rows();
    if labels.len() != n {
        return Err(Error::Contract(format!(
            "scatter_on_tape got {n} rows and {} labels",
            labels.len()
        )));
    }
    let x = tape.gather_cols(latent, Arc::clone(dims))?;

    // Σ_a: globally centered Gram
    let xc = tape.center(x)?;
    let xct = tape.transpose(xc)?;
    let sigma_a = tape.matmul(xct, xc)?;

    // Σ_w: per-class centered Grams, classes in ascending order
    let mut classes: Vec<usize> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let mut sigma_w: Option<Var> = None;
    for class in classes {
        let rows: Arc<Vec<usize>> = Arc::new(
            labels
                .iter()
                .enumerate()
                .filter(|(_, &l)| l == class)
                .map(|(i, _)| i)
                .collect(),
        );
        if rows.len() < 2 {
            log::warn!("class {class} has {} sample(s) in the push batch", rows.len());
            continue;
        }
        let sub = tape.gather_rows(x, rows)?;
        let subc = tape.center(sub)?;
        let subct = tape.transpose(subc)?;
        let g = tape.matmul(subct, subc)?;
        sigma_w = Some(match sigma_w {
            None => g,
            Some(acc) => tape.add(acc, g)?,
        });
    }
    let sigma_w = match sigma_w {
        Some(v) => v,
        None => {
            let d = dims.len();
            tape.constant(crate::tensor::Tensor::zeros([d, d]))
        }
    };
    let sigma_b = tape.sub(sigma_a, sigma_w)?;
    Ok((sigma_a, sigma_w, sigma_b))
}

/// ℓ_lda = N / Σ_j v_j, computed as N / trace(Σ_w⁻¹Σ_b) over the active
/// submatrices. Returns the capped constant when there is no separation.
pub fn lda_loss(
    tape: &mut Tape,
    sigma_b: Var,
    sigma_w: Var,
    n_active: usize,
    epsilon_rel: f64,
) -> Result<Var> {
    if n_active == 0 {
        return Err(Error::Contract("lda_loss with zero active dimensions".into()));
    }
    let shrunk = tape.shrink(sigma_w, epsilon_rel)?;
    let solved = tape.solve_spd(shrunk, sigma_b)?;
    let tr = tape.trace(solved)?;
    let tr_val = tape.value(tr).item()?;
    if tr_val <= 1e-12 {
        log::warn!("no class separation in batch (trace {tr_val:.3e}); capping ℓ_lda");
        return Ok(tape.constant(crate::tensor::Tensor::scalar(LDA_LOSS_CAP)));
    }
    let inv = tape.recip(tr);
    Ok(tape.scale(inv, n_active as f64))
}

/// ℓ_cov = ‖Σ_a − diag(Σ_a)‖₁ (entrywise off-diagonal 1-norm).
pub fn cov_loss(tape: &mut Tape, sigma_a: Var) -> Result<Var> {
    tape.offdiag_abs_sum(sigma_a)
}

/// ℓ_align = ‖Σ_w⁻¹Σ_b − diag(Σ_w⁻¹Σ_b)‖₁, differentiable through the
/// solve.
pub fn align_loss(tape: &mut Tape, sigma_b: Var, sigma_w: Var, epsilon_rel: f64) -> Result<Var> {
    let shrunk = tape.shrink(sigma_w, epsilon_rel)?;
    let solved = tape.solve_spd(shrunk, sigma_b)?;
    tape.offdiag_abs_sum(solved)
}

/// The combined pushing objective on a post-ReLU latent batch. Restricts to
/// active dimensions, drops ℓ_align above the dimension threshold, and
/// returns a zero constant (with a warning) for dead batches.
pub fn push_loss(
    tape: &mut Tape,
    latent: Var,
    labels: &[usize],
    weights: &PushWeights,
    epsilon_rel: f64,
) -> Result<(Var, PushParts)> {
    let latent_t = tape.value(latent).clone();
    let dims = active_dims(&latent_t, weights.variance_floor)?;
    let n_active = dims.len();
    if n_active == 0 {
        log::warn!("push batch has no active latent dimensions; skipping push losses");
        let zero = tape.constant(crate::tensor::Tensor::scalar(0.0));
        return Ok((zero, PushParts::default()));
    }
    if weights.gamma == 0.0 && weights.lambda == 0.0 && weights.beta == 0.0 {
        let zero = tape.constant(crate::tensor::Tensor::scalar(0.0));
        return Ok((zero, PushParts { active_dims: n_active, ..Default::default() }));
    }

    let dims = Arc::new(dims);
    let (sigma_a, sigma_w, sigma_b) = scatter_on_tape(tape, latent, labels, &dims)?;

    let mut parts = PushParts { active_dims: n_active, ..Default::default() };
    let mut total: Option<Var> = None;
    let mut add_term = |tape: &mut Tape, term: Var, weight: f64| -> Result<Var> {
        let weighted = tape.scale(term, weight);
        let acc = match total {
            None => weighted,
            Some(t) => tape.add(t, weighted)?,
        };
        total = Some(acc);
        Ok(weighted)
    };

    if weights.gamma != 0.0 {
        let l = lda_loss(tape, sigma_b, sigma_w, n_active, epsilon_rel)?;
        let w = add_term(tape, l, weights.gamma)?;
        parts.lda = tape.value(w).item()?;
    }
    if weights.lambda != 0.0 {
        let l = cov_loss(tape, sigma_a)?;
        let w = add_term(tape, l, weights.lambda)?;
        parts.cov = tape.value(w).item()?;
    }
    if weights.beta != 0.0 && n_active <= weights.align_dim_threshold {
        let l = align_loss(tape, sigma_b, sigma_w, epsilon_rel)?;
        let w = add_term(tape, l, weights.beta)?;
        parts.align = tape.value(w).item()?;
    }

    let total = total.expect("at least one nonzero weight handled above");
    Ok((total, parts))
}

// ── balanced batches ─────────────────────────────────────────────────

/// Seeded class-balanced batch sampler: each batch draws a random subset of
/// classes and the same number of samples from each, without replacement
/// within an epoch (falling back to replacement, with a warning, when a
/// class runs dry).
pub struct BalancedBatcher {
    by_class: Vec<(usize, Vec<usize>)>,
    queues: Vec<Vec<usize>>,
    classes_per_batch: usize,
    samples_per_class: usize,
    rng: ChaCha8Rng,
}

impl BalancedBatcher {
    pub fn new(
        labels: &[usize],
        classes_per_batch: usize,
        samples_per_class: usize,
        seed: u64,
    ) -> Result<Self> {
        if samples_per_class == 0 {
            return Err(Error::Contract("samples_per_class must be positive".into()));
        }
        let mut by_class: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
        for (i, &l) in labels.iter().enumerate() {
            by_class.entry(l).or_default().push(i);
        }
        if by_class.is_empty() {
            return Err(Error::Contract("balanced batcher over an empty dataset".into()));
        }
        if classes_per_batch == 0 || classes_per_batch > by_class.len() {
            return Err(Error::Contract(format!(
                "classes_per_batch {classes_per_batch} out of range for {} classes",
                by_class.len()
            )));
        }
        let by_class: Vec<(usize, Vec<usize>)> = by_class.into_iter().collect();
        let queues = vec![Vec::new(); by_class.len()];
        Ok(Self {
            by_class,
            queues,
            classes_per_batch,
            samples_per_class,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn batch_size(&self) -> usize {
        self.classes_per_batch * self.samples_per_class
    }

    /// Next batch: (dataset indices, class labels per index).
    pub fn next_batch(&mut self) -> (Vec<usize>, Vec<usize>) {
        // pick the class subset
        let k = self.by_class.len();
        let mut class_order: Vec<usize> = (0..k).collect();
        if self.classes_per_batch < k {
            class_order.shuffle(&mut self.rng);
        }
        let picked: Vec<usize> = class_order[..self.classes_per_batch].to_vec();

        let mut indices = Vec::with_capacity(self.batch_size());
        let mut labels = Vec::with_capacity(self.batch_size());
        for ci in picked {
            let (class, pool) = (&self.by_class[ci].0, &self.by_class[ci].1);
            for _ in 0..self.samples_per_class {
                if self.queues[ci].is_empty() {
                    let mut refill = pool.clone();
                    refill.shuffle(&mut self.rng);
                    if refill.len() < self.samples_per_class {
                        log::warn!(
                            "class {class} has only {} samples for {}-per-class batches; sampling with replacement",
                            refill.len(),
                            self.samples_per_class
                        );
                    }
                    self.queues[ci] = refill;
                }
                // queue refilled above, pop cannot fail unless the pool is
                // empty, which new() rules out
                let idx = self.queues[ci].pop().unwrap_or_else(|| {
                    pool[self.rng.random_range(0..pool.len())]
                });
                indices.push(idx);
                labels.push(*class);
            }
        }
        (indices, labels)
    }
}
