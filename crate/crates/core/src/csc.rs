//! Cross-domain semantic consistency: per-domain class prototype banks and
//! the prototype-contrastive losses computed against them.
//!
//! Queries are contrasted against every initialized prototype of a bank with
//! a softmax over cosine similarities divided by the temperature. Banks are
//! constants during a step, so gradients flow only to the queries.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Real,
    Synthetic,
}

impl Domain {
    fn tag(self) -> u32 {
        match self {
            Domain::Real => 0,
            Domain::Synthetic => 1,
        }
    }

    fn from_tag(t: u32) -> Option<Self> {
        match t {
            0 => Some(Domain::Real),
            1 => Some(Domain::Synthetic),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CscConfig {
    pub dim: usize,
    pub n_classes: usize,
    pub tau: f64,
    /// Weight of the old prototype in the moving average.
    pub momentum: f64,
    /// Compare L2-normalized queries and prototypes.
    pub normalize: bool,
    /// Contrast real rows only against the real bank and synthetic rows only
    /// against the synthetic bank. Off means every row meets both banks.
    pub mask_by_domain: bool,
}

impl CscConfig {
    pub fn new(dim: usize, n_classes: usize) -> Self {
        Self {
            dim,
            n_classes,
            tau: 0.07,
            momentum: 0.99,
            normalize: true,
            mask_by_domain: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.n_classes == 0 {
            return Err(Error::Schema("dim and n_classes must be at least 1".into()));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Schema(format!("tau must be positive, got {}", self.tau)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Schema(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        Ok(())
    }
}

/// Class prototypes of one domain, one column per class.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeBank {
    pub domain: Domain,
    pub prototypes: DMatrix<f64>,
    pub initialized: Vec<bool>,
}

/// Raw query rows with their class and domain.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingBatch {
    pub queries: DMatrix<f64>,
    pub labels: Vec<usize>,
    pub domains: Vec<Domain>,
}

impl EmbeddingBatch {
    pub fn new(queries: DMatrix<f64>, labels: Vec<usize>, domains: Vec<Domain>) -> Result<Self> {
        if labels.len() != queries.nrows() || domains.len() != queries.nrows() {
            return Err(Error::Shape(format!(
                "{} query rows, {} labels, {} domain tags",
                queries.nrows(),
                labels.len(),
                domains.len()
            )));
        }
        Ok(Self {
            queries,
            labels,
            domains,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

const BANK_MAGIC: &[u8; 4] = b"RBPB";

impl PrototypeBank {
    pub fn new(domain: Domain, dim: usize, n_classes: usize) -> Self {
        Self {
            domain,
            prototypes: DMatrix::zeros(dim, n_classes),
            initialized: vec![false; n_classes],
        }
    }

    pub fn dim(&self) -> usize {
        self.prototypes.nrows()
    }

    pub fn n_classes(&self) -> usize {
        self.prototypes.ncols()
    }

    /// Header (magic, D, C, domain tag as little-endian u32) then the D x C
    /// prototypes as row-major little-endian f32.
    pub fn to_bytes(&self) -> Vec<u8> {
        let (d, c) = self.prototypes.shape();
        let mut out = Vec::with_capacity(16 + 4 * d * c);
        out.extend_from_slice(BANK_MAGIC);
        for v in [d as u32, c as u32, self.domain.tag()] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for r in 0..d {
            for k in 0..c {
                out.extend_from_slice(&(self.prototypes[(r, k)] as f32).to_le_bytes());
            }
        }
        out
    }

    /// Inverse of [`to_bytes`](Self::to_bytes). A class counts as
    /// initialized when its column is not all zero.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..4] != BANK_MAGIC {
            return Err(Error::Format("not a prototype bank blob".into()));
        }
        let word = |i: usize| u32::from_le_bytes([bytes[i], bytes[i + 1], bytes[i + 2], bytes[i + 3]]);
        let (d, c) = (word(4) as usize, word(8) as usize);
        let domain = Domain::from_tag(word(12))
            .ok_or_else(|| Error::Format(format!("unknown domain tag {}", word(12))))?;
        if bytes.len() != 16 + 4 * d * c {
            return Err(Error::Format(format!(
                "bank header says {d}x{c} but the blob has {} payload bytes",
                bytes.len() - 16
            )));
        }
        let prototypes = DMatrix::from_fn(d, c, |r, k| {
            let i = 16 + 4 * (r * c + k);
            f32::from_le_bytes([bytes[i], bytes[i + 1], bytes[i + 2], bytes[i + 3]]) as f64
        });
        let initialized = (0..c).map(|k| prototypes.column(k).iter().any(|&v| v != 0.0)).collect();
        Ok(Self {
            domain,
            prototypes,
            initialized,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn check_shapes(batch: &EmbeddingBatch, bank: &PrototypeBank, cfg: &CscConfig) -> Result<()> {
    cfg.validate()?;
    if batch.queries.ncols() != cfg.dim || bank.dim() != cfg.dim || bank.n_classes() != cfg.n_classes {
        return Err(Error::Shape(format!(
            "queries have {} columns, bank is {}x{}, config expects {}x{}",
            batch.queries.ncols(),
            bank.dim(),
            bank.n_classes(),
            cfg.dim,
            cfg.n_classes
        )));
    }
    if let Some(&y) = batch.labels.iter().find(|&&y| y >= cfg.n_classes) {
        return Err(Error::Schema(format!("class id {y} outside 0..{}", cfg.n_classes)));
    }
    Ok(())
}

/// Row `i` of the queries, normalized when configured, with its norm.
fn query(batch: &EmbeddingBatch, i: usize, normalize: bool) -> Result<(DVector<f64>, f64)> {
    let r = batch.queries.row(i).transpose();
    if !normalize {
        return Ok((r, 1.0));
    }
    let n = r.norm();
    if !(n > 0.0) {
        return Err(Error::Shape(format!("query row {i} has zero norm")));
    }
    Ok((r / n, n))
}

/// Moves each class prototype toward the normalized mean of the batch rows
/// of that class from the bank's domain. A class seen for the first time
/// takes the mean directly.
pub fn update_prototypes(bank: &mut PrototypeBank, batch: &EmbeddingBatch, cfg: &CscConfig) -> Result<()> {
    check_shapes(batch, bank, cfg)?;
    let mut sums = DMatrix::<f64>::zeros(cfg.dim, cfg.n_classes);
    let mut counts = vec![0usize; cfg.n_classes];
    for i in 0..batch.len() {
        if batch.domains[i] != bank.domain {
            continue;
        }
        let (q, _) = query(batch, i, cfg.normalize)?;
        let y = batch.labels[i];
        let mut col = sums.column_mut(y);
        col += &q;
        counts[y] += 1;
    }
    for (k, &n) in counts.iter().enumerate() {
        if n == 0 {
            continue;
        }
        let mean = sums.column(k) / n as f64;
        let mut next = if bank.initialized[k] {
            bank.prototypes.column(k) * cfg.momentum + mean * (1.0 - cfg.momentum)
        } else {
            mean
        };
        if cfg.normalize {
            let norm = next.norm();
            if norm > 0.0 {
                next /= norm;
            }
        }
        bank.prototypes.set_column(k, &next);
        bank.initialized[k] = true;
    }
    Ok(())
}

/// Mean negative log-softmax of each row's own class prototype, and its
/// gradient with respect to the raw query rows.
pub fn contrastive_loss(batch: &EmbeddingBatch, bank: &PrototypeBank, cfg: &CscConfig) -> Result<(f64, DMatrix<f64>)> {
    loss_over(batch, bank, cfg, |_| true)
}

fn loss_over(
    batch: &EmbeddingBatch,
    bank: &PrototypeBank,
    cfg: &CscConfig,
    include: impl Fn(usize) -> bool,
) -> Result<(f64, DMatrix<f64>)> {
    check_shapes(batch, bank, cfg)?;
    let rows: Vec<usize> = (0..batch.len()).filter(|&i| include(i)).collect();
    let mut grad = DMatrix::zeros(batch.len(), cfg.dim);
    if rows.is_empty() {
        return Ok((0.0, grad));
    }
    for &i in &rows {
        let y = batch.labels[i];
        if !bank.initialized[y] {
            return Err(Error::UninitializedPrototype(y));
        }
    }
    let keys: Vec<usize> = (0..cfg.n_classes).filter(|&k| bank.initialized[k]).collect();
    let n = rows.len() as f64;
    let mut loss = 0.0;
    let mut z = vec![0.0; keys.len()];
    for &i in &rows {
        let (q, norm) = query(batch, i, cfg.normalize)?;
        let y = batch.labels[i];
        for (slot, &k) in z.iter_mut().zip(&keys) {
            *slot = bank.prototypes.column(k).dot(&q) / cfg.tau;
        }
        let zmax = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = z.iter().map(|v| (v - zmax).exp()).sum();
        let lse = zmax + sum.ln();
        let zy = bank.prototypes.column(y).dot(&q) / cfg.tau;
        loss += lse - zy;

        // d loss_i / d q = (sum_j s_j P_j - P_y) / tau
        let mut g = -bank.prototypes.column(y).into_owned();
        for (&zk, &k) in z.iter().zip(&keys) {
            g += bank.prototypes.column(k) * ((zk - lse).exp());
        }
        g /= cfg.tau * n;
        if cfg.normalize {
            // d q / d r = (I - q q^T) / |r|
            let proj = q.dot(&g);
            g = (g - q * proj) / norm;
        }
        grad.set_row(i, &g.transpose());
    }
    Ok((loss / n, grad))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CscLoss {
    pub total: f64,
    pub seg: f64,
    pub rc: f64,
    pub sc: f64,
    #[serde(skip)]
    pub grad: DMatrix<f64>,
}

/// `seg + L_rc + L_sc` with gradients summed. `seg_grad` is the gradient of
/// the segmentation loss with respect to the same raw queries.
pub fn csc_loss(
    batch: &EmbeddingBatch,
    real: &PrototypeBank,
    syn: &PrototypeBank,
    cfg: &CscConfig,
    seg_loss: f64,
    seg_grad: &DMatrix<f64>,
) -> Result<CscLoss> {
    if seg_grad.shape() != batch.queries.shape() {
        return Err(Error::Shape(format!(
            "segmentation gradient is {:?}, queries are {:?}",
            seg_grad.shape(),
            batch.queries.shape()
        )));
    }
    let mask = cfg.mask_by_domain;
    let (rc, g_rc) = loss_over(batch, real, cfg, |i| !mask || batch.domains[i] == Domain::Real)?;
    let (sc, g_sc) = loss_over(batch, syn, cfg, |i| !mask || batch.domains[i] == Domain::Synthetic)?;
    Ok(CscLoss {
        total: seg_loss + rc + sc,
        seg: seg_loss,
        rc,
        sc,
        grad: seg_grad + g_rc + g_sc,
    })
}

// ---- self checks -------------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct GradCheck {
    pub instances: usize,
    /// Worst `max|analytic - numeric| / max(max|analytic|, max|numeric|)`.
    pub max_rel_error: f64,
}

/// Random bank with every column initialized.
pub fn random_bank(domain: Domain, cfg: &CscConfig, rng: &mut impl Rng) -> PrototypeBank {
    let mut bank = PrototypeBank::new(domain, cfg.dim, cfg.n_classes);
    for k in 0..cfg.n_classes {
        let mut v = DVector::from_fn(cfg.dim, |_, _| StandardNormal.sample(rng));
        if cfg.normalize {
            v /= v.norm();
        }
        bank.prototypes.set_column(k, &v);
        bank.initialized[k] = true;
    }
    bank
}

/// Random batch with raw query entries drawn from a standard normal.
pub fn random_batch(n: usize, cfg: &CscConfig, rng: &mut impl Rng) -> EmbeddingBatch {
    let queries = DMatrix::from_fn(n, cfg.dim, |_, _| StandardNormal.sample(rng));
    let labels = (0..n).map(|_| rng.random_range(0..cfg.n_classes)).collect();
    let domains = (0..n)
        .map(|_| if rng.random::<bool>() { Domain::Real } else { Domain::Synthetic })
        .collect();
    EmbeddingBatch {
        queries,
        labels,
        domains,
    }
}

/// Compares the analytic gradient with central differences (step 1e-5) on
/// random instances with N <= 32, D <= 16, C <= 8 and tau in
/// {0.05, 0.07, 0.2}.
pub fn gradient_check(instances: usize, seed: u64) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for t in 0..instances {
        let mut cfg = CscConfig::new(rng.random_range(1..=16), rng.random_range(1..=8));
        cfg.tau = [0.05, 0.07, 0.2][t % 3];
        let n = rng.random_range(1..=32);
        let mut batch = random_batch(n, &cfg, &mut rng);
        let bank = random_bank(Domain::Real, &cfg, &mut rng);
        let (_, analytic) = contrastive_loss(&batch, &bank, &cfg)?;
        let mut numeric = DMatrix::zeros(n, cfg.dim);
        for i in 0..n {
            for d in 0..cfg.dim {
                let x = batch.queries[(i, d)];
                batch.queries[(i, d)] = x + h;
                let (lp, _) = contrastive_loss(&batch, &bank, &cfg)?;
                batch.queries[(i, d)] = x - h;
                let (lm, _) = contrastive_loss(&batch, &bank, &cfg)?;
                batch.queries[(i, d)] = x;
                numeric[(i, d)] = (lp - lm) / (2.0 * h);
            }
        }
        let scale = analytic.amax().max(numeric.amax());
        if scale > 0.0 {
            worst = worst.max((&analytic - &numeric).amax() / scale);
        }
    }
    Ok(GradCheck {
        instances,
        max_rel_error: worst,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct ClosedForms {
    /// |loss - ln C| with every logit equal.
    pub uniform_error: f64,
    /// Loss with a single class.
    pub single_class_loss: f64,
    /// |total - (seg + L_rc + L_sc)| on a random instance.
    pub additivity_error: f64,
}

/// Evaluates the closed-form identities of the loss on fixed instances.
pub fn closed_form_checks(seed: u64) -> Result<ClosedForms> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = 6;
    let cfg = CscConfig::new(c + 1, c);
    let mut bank = PrototypeBank::new(Domain::Real, c + 1, c);
    for k in 0..c {
        bank.prototypes[(k, k)] = 1.0;
        bank.initialized[k] = true;
    }
    // queries orthogonal to every prototype
    let mut q = DMatrix::zeros(4, c + 1);
    for i in 0..4 {
        q[(i, c)] = 0.5 + i as f64;
    }
    let batch = EmbeddingBatch::new(q, vec![0, 2, 3, 5], vec![Domain::Real; 4])?;
    let uniform_error = (contrastive_loss(&batch, &bank, &cfg)?.0 - (c as f64).ln()).abs();

    let one = CscConfig::new(5, 1);
    let single_class_loss = contrastive_loss(&random_batch(8, &one, &mut rng), &random_bank(Domain::Real, &one, &mut rng), &one)?.0;

    let cfg = CscConfig::new(8, 5);
    let batch = random_batch(16, &cfg, &mut rng);
    let real = random_bank(Domain::Real, &cfg, &mut rng);
    let syn = random_bank(Domain::Synthetic, &cfg, &mut rng);
    let seg: f64 = rng.random_range(0.0..3.0);
    let seg_grad = DMatrix::from_fn(16, 8, |_, _| gauss(&mut rng));
    let out = csc_loss(&batch, &real, &syn, &cfg, seg, &seg_grad)?;
    let rc = contrastive_loss(&batch, &real, &cfg)?.0;
    let sc = contrastive_loss(&batch, &syn, &cfg)?.0;
    Ok(ClosedForms {
        uniform_error,
        single_class_loss,
        additivity_error: (out.total - (seg + rc + sc)).abs(),
    })
}

// ---- toy two-domain experiment -----------------------------------------

fn gauss(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Seed of the reference toy run.
pub const TOY_SEED: u64 = 7;

/// Two domains share class-conditional Gaussian clusters; the synthetic
/// domain is shifted by a fixed offset. A linear embedder and a linear head
/// are trained by full-batch gradient descent.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ToyConfig {
    pub classes: usize,
    pub input_dim: usize,
    pub embed_dim: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Standard deviation of the class centers.
    pub center_spread: f64,
    pub noise: f64,
    /// Length of the synthetic-domain shift.
    pub domain_offset: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub tau: f64,
    pub momentum: f64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            classes: 4,
            input_dim: 8,
            embed_dim: 8,
            train_per_class: 100,
            test_per_class: 100,
            center_spread: 2.0,
            noise: 1.0,
            domain_offset: 3.0,
            epochs: 300,
            learning_rate: 0.05,
            tau: 0.07,
            momentum: 0.99,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ToyRun {
    /// Cosine between the real and synthetic class-mean embeddings of the
    /// held-out data, per class.
    pub class_cosine: Vec<f64>,
    pub mean_cosine: f64,
    /// Held-out points classified by the nearest class prototype of the
    /// other domain, averaged over both directions.
    pub cross_domain_accuracy: f64,
    /// Held-out accuracy of the trained head over both domains.
    pub head_accuracy: f64,
    /// Training objective after each epoch.
    pub loss_curve: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ToyReport {
    pub config: ToyConfig,
    pub seed: u64,
    pub cross_entropy: ToyRun,
    pub with_csc: ToyRun,
}

struct ToyData {
    x: DMatrix<f64>,
    labels: Vec<usize>,
    domains: Vec<Domain>,
}

fn toy_data(cfg: &ToyConfig, centers: &DMatrix<f64>, offset: &DVector<f64>, per_class: usize, rng: &mut ChaCha8Rng) -> ToyData {
    let n = 2 * cfg.classes * per_class;
    let mut x = DMatrix::zeros(n, cfg.input_dim);
    let mut labels = Vec::with_capacity(n);
    let mut domains = Vec::with_capacity(n);
    let mut row = 0;
    for domain in [Domain::Real, Domain::Synthetic] {
        for c in 0..cfg.classes {
            for _ in 0..per_class {
                for d in 0..cfg.input_dim {
                    let noise: f64 = StandardNormal.sample(rng);
                    let shift = if domain == Domain::Synthetic { offset[d] } else { 0.0 };
                    x[(row, d)] = centers[(c, d)] + shift + cfg.noise * noise;
                }
                labels.push(c);
                domains.push(domain);
                row += 1;
            }
        }
    }
    ToyData { x, labels, domains }
}

/// Cross-entropy of the head `logits = E V^T + b` and its gradients with
/// respect to the embeddings, the head weights and the bias.
fn cross_entropy(e: &DMatrix<f64>, v: &DMatrix<f64>, b: &DVector<f64>, labels: &[usize]) -> (f64, DMatrix<f64>, DMatrix<f64>, DVector<f64>) {
    let n = e.nrows();
    let mut logits = e * v.transpose();
    for i in 0..n {
        for k in 0..b.len() {
            logits[(i, k)] += b[k];
        }
    }
    let mut loss = 0.0;
    let mut dlogits = DMatrix::zeros(n, b.len());
    for i in 0..n {
        let row = logits.row(i);
        let m = row.max();
        let sum: f64 = row.iter().map(|z| (z - m).exp()).sum();
        let lse = m + sum.ln();
        loss += lse - row[labels[i]];
        for k in 0..b.len() {
            dlogits[(i, k)] = (row[k] - lse).exp();
        }
        dlogits[(i, labels[i])] -= 1.0;
    }
    let nf = n as f64;
    dlogits /= nf;
    let de = &dlogits * v;
    let dv = dlogits.transpose() * e;
    let db = DVector::from_fn(b.len(), |k, _| dlogits.column(k).sum());
    (loss / nf, de, dv, db)
}

fn normalized_class_means(e: &DMatrix<f64>, labels: &[usize], domains: &[Domain], domain: Domain, classes: usize) -> Vec<DVector<f64>> {
    let mut sums = vec![DVector::zeros(e.ncols()); classes];
    for i in 0..e.nrows() {
        if domains[i] == domain {
            let r = e.row(i).transpose();
            let n = r.norm();
            if n > 0.0 {
                sums[labels[i]] += r / n;
            }
        }
    }
    sums.into_iter()
        .map(|s| {
            let n = s.norm();
            if n > 0.0 { s / n } else { s }
        })
        .collect()
}

fn evaluate_toy(e: &DMatrix<f64>, v: &DMatrix<f64>, b: &DVector<f64>, data: &ToyData, classes: usize) -> (Vec<f64>, f64, f64) {
    let real = normalized_class_means(e, &data.labels, &data.domains, Domain::Real, classes);
    let syn = normalized_class_means(e, &data.labels, &data.domains, Domain::Synthetic, classes);
    let class_cosine: Vec<f64> = real.iter().zip(&syn).map(|(a, b)| a.dot(b)).collect();
    let mut cross_hits = 0usize;
    let mut head_hits = 0usize;
    for i in 0..e.nrows() {
        let r = e.row(i).transpose();
        let other = if data.domains[i] == Domain::Real { &syn } else { &real };
        let nearest = (0..classes)
            .max_by(|&a, &b| other[a].dot(&r).total_cmp(&other[b].dot(&r)))
            .unwrap_or(0);
        cross_hits += (nearest == data.labels[i]) as usize;
        let logits = v * &r + b;
        head_hits += (logits.argmax().0 == data.labels[i]) as usize;
    }
    let n = e.nrows() as f64;
    (class_cosine, cross_hits as f64 / n, head_hits as f64 / n)
}

fn train_toy(cfg: &ToyConfig, train: &ToyData, test: &ToyData, init: &(DMatrix<f64>, DMatrix<f64>), use_csc: bool) -> Result<ToyRun> {
    let (mut w, mut v) = init.clone();
    let mut b = DVector::zeros(cfg.classes);
    let mut csc = CscConfig::new(cfg.embed_dim, cfg.classes);
    csc.tau = cfg.tau;
    csc.momentum = cfg.momentum;
    let mut real = PrototypeBank::new(Domain::Real, cfg.embed_dim, cfg.classes);
    let mut syn = PrototypeBank::new(Domain::Synthetic, cfg.embed_dim, cfg.classes);
    let embed = |w: &DMatrix<f64>| -> Result<EmbeddingBatch> {
        EmbeddingBatch::new(&train.x * w.transpose(), train.labels.clone(), train.domains.clone())
    };
    if use_csc {
        // every class must have a key before the first loss
        let batch = embed(&w)?;
        update_prototypes(&mut real, &batch, &csc)?;
        update_prototypes(&mut syn, &batch, &csc)?;
    }
    let mut loss_curve = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let batch = embed(&w)?;
        let (ce, de, dv, db) = cross_entropy(&batch.queries, &v, &b, &train.labels);
        let (loss, de) = if use_csc {
            let out = csc_loss(&batch, &real, &syn, &csc, ce, &de)?;
            (out.total, out.grad)
        } else {
            (ce, de)
        };
        let dw = de.transpose() * &train.x;
        w -= dw * cfg.learning_rate;
        v -= dv * cfg.learning_rate;
        b -= db * cfg.learning_rate;
        if use_csc {
            // loss first, then the banks follow the updated embeddings
            let batch = embed(&w)?;
            update_prototypes(&mut real, &batch, &csc)?;
            update_prototypes(&mut syn, &batch, &csc)?;
        }
        loss_curve.push(loss);
    }
    let e = &test.x * w.transpose();
    let (class_cosine, cross_domain_accuracy, head_accuracy) = evaluate_toy(&e, &v, &b, test, cfg.classes);
    let mean_cosine = class_cosine.iter().sum::<f64>() / class_cosine.len() as f64;
    Ok(ToyRun {
        class_cosine,
        mean_cosine,
        cross_domain_accuracy,
        head_accuracy,
        loss_curve,
    })
}

/// Trains the same initialization with cross-entropy alone and with the two
/// contrastive terms added, and reports alignment for both.
pub fn toy_alignment_experiment(cfg: &ToyConfig, seed: u64) -> Result<ToyReport> {
    if cfg.classes < 2 || cfg.input_dim == 0 || cfg.embed_dim == 0 || cfg.train_per_class == 0 || cfg.test_per_class == 0 {
        return Err(Error::Schema("toy experiment needs >= 2 classes and nonempty data".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers = DMatrix::from_fn(cfg.classes, cfg.input_dim, |_, _| {
        cfg.center_spread * gauss(&mut rng)
    });
    let mut offset = DVector::from_fn(cfg.input_dim, |_, _| gauss(&mut rng));
    let len = offset.norm();
    if len > 0.0 {
        offset *= cfg.domain_offset / len;
    }
    let train = toy_data(cfg, &centers, &offset, cfg.train_per_class, &mut rng);
    let test = toy_data(cfg, &centers, &offset, cfg.test_per_class, &mut rng);
    let scale = 1.0 / (cfg.input_dim as f64).sqrt();
    let w0 = DMatrix::from_fn(cfg.embed_dim, cfg.input_dim, |_, _| scale * gauss(&mut rng));
    let v0 = DMatrix::from_fn(cfg.classes, cfg.embed_dim, |_, _| 0.1 * gauss(&mut rng));
    let init = (w0, v0);
    Ok(ToyReport {
        config: cfg.clone(),
        seed,
        cross_entropy: train_toy(cfg, &train, &test, &init, false)?,
        with_csc: train_toy(cfg, &train, &test, &init, true)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn orthonormal_bank(c: usize, d: usize) -> PrototypeBank {
        let mut bank = PrototypeBank::new(Domain::Real, d, c);
        for k in 0..c {
            bank.prototypes[(k, k)] = 1.0;
            bank.initialized[k] = true;
        }
        bank
    }

    #[test]
    fn uniform_logits_give_ln_c() {
        let cfg = CscConfig::new(5, 4);
        let bank = orthonormal_bank(4, 5);
        let mut q = DMatrix::zeros(3, 5);
        for i in 0..3 {
            q[(i, 4)] = 1.0 + i as f64;
        }
        let batch = EmbeddingBatch::new(q, vec![0, 1, 3], vec![Domain::Real; 3]).unwrap();
        let (loss, _) = contrastive_loss(&batch, &bank, &cfg).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn positive_hit_closed_form() {
        let cfg = CscConfig::new(4, 4);
        let bank = orthonormal_bank(4, 4);
        let mut q = DMatrix::zeros(1, 4);
        q[(0, 2)] = 1.0;
        let batch = EmbeddingBatch::new(q, vec![2], vec![Domain::Synthetic]).unwrap();
        let (loss, _) = contrastive_loss(&batch, &bank, &cfg).unwrap();
        let e = (1.0f64 / 0.07).exp();
        assert!((loss - -(e / (e + 3.0)).ln()).abs() < 1e-12);
    }

    #[test]
    fn single_class_is_zero() {
        let cfg = CscConfig::new(3, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let bank = random_bank(Domain::Real, &cfg, &mut rng);
        let batch = random_batch(6, &cfg, &mut rng);
        let (loss, grad) = contrastive_loss(&batch, &bank, &cfg).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.amax() < 1e-15);
    }

    #[test]
    fn uninitialized_positive_is_an_error() {
        let cfg = CscConfig::new(3, 3);
        let mut bank = orthonormal_bank(3, 3);
        bank.initialized[1] = false;
        bank.prototypes.column_mut(1).fill(0.0);
        let batch = EmbeddingBatch::new(DMatrix::from_element(1, 3, 1.0), vec![1], vec![Domain::Real]).unwrap();
        assert!(matches!(contrastive_loss(&batch, &bank, &cfg), Err(Error::UninitializedPrototype(1))));
    }

    #[test]
    fn finite_differences() {
        let r = gradient_check(30, 11).unwrap();
        assert!(r.max_rel_error < 1e-4, "{}", r.max_rel_error);
    }

    #[test]
    fn scale_invariance() {
        let cfg = CscConfig::new(6, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let bank = random_bank(Domain::Real, &cfg, &mut rng);
        let batch = random_batch(10, &cfg, &mut rng);
        let mut scaled = batch.clone();
        scaled.queries *= 7.5;
        let a = contrastive_loss(&batch, &bank, &cfg).unwrap().0;
        let b = contrastive_loss(&scaled, &bank, &cfg).unwrap().0;
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn first_update_takes_the_sample() {
        let cfg = CscConfig::new(3, 2);
        let mut bank = PrototypeBank::new(Domain::Real, 3, 2);
        let q = DMatrix::from_row_slice(1, 3, &[0.6, 0.0, 0.8]);
        let batch = EmbeddingBatch::new(q, vec![1], vec![Domain::Real]).unwrap();
        update_prototypes(&mut bank, &batch, &cfg).unwrap();
        assert_eq!(bank.prototypes.column(1).as_slice(), &[0.6, 0.0, 0.8]);
        assert_eq!(bank.initialized, vec![false, true]);
    }

    #[test]
    fn other_domain_rows_are_skipped() {
        let cfg = CscConfig::new(3, 2);
        let mut bank = PrototypeBank::new(Domain::Real, 3, 2);
        let batch = EmbeddingBatch::new(DMatrix::from_element(2, 3, 1.0), vec![0, 1], vec![Domain::Synthetic; 2]).unwrap();
        let before = bank.clone();
        update_prototypes(&mut bank, &batch, &cfg).unwrap();
        assert_eq!(bank, before);
    }

    #[test]
    fn toy_alignment_improves() {
        let r = toy_alignment_experiment(&ToyConfig::default(), TOY_SEED).unwrap();
        assert!(r.with_csc.mean_cosine > r.cross_entropy.mean_cosine);
        assert!(r.with_csc.cross_domain_accuracy >= r.cross_entropy.cross_domain_accuracy);
        let lc = &r.with_csc.loss_curve;
        assert_eq!(lc.len(), ToyConfig::default().epochs);
        assert!(lc.windows(2).all(|w| w[1] <= w[0] + 1e-3));
    }

    #[test]
    fn toy_without_offset_has_no_gap() {
        let cfg = ToyConfig {
            domain_offset: 0.0,
            ..ToyConfig::default()
        };
        let r = toy_alignment_experiment(&cfg, TOY_SEED).unwrap();
        assert!((r.with_csc.head_accuracy - r.cross_entropy.head_accuracy).abs() <= 0.02);
        assert!((r.with_csc.cross_domain_accuracy - r.cross_entropy.cross_domain_accuracy).abs() <= 0.02);
    }

    #[test]
    fn bank_blob_round_trip() {
        let cfg = CscConfig::new(5, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut bank = random_bank(Domain::Synthetic, &cfg, &mut rng);
        bank.prototypes.column_mut(2).fill(0.0);
        bank.initialized[2] = false;
        let bytes = bank.to_bytes();
        assert_eq!(bytes.len(), 16 + 4 * 15);
        assert_eq!(&bytes[..4], b"RBPB");
        let back = PrototypeBank::from_bytes(&bytes).unwrap();
        assert_eq!(back.domain, Domain::Synthetic);
        assert_eq!(back.initialized, bank.initialized);
        for (a, b) in back.prototypes.iter().zip(bank.prototypes.iter()) {
            assert_eq!(*a, *b as f32 as f64);
        }
        assert!(PrototypeBank::from_bytes(&bytes[..20]).is_err());
    }
}
