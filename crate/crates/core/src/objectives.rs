//! Discriminative losses: label-smoothed identity cross-entropy and the
//! prototypical contrastive loss against a momentum memory bank.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};
use crate::nn::ops;

pub const DEFAULT_SMOOTHING: f64 = 0.1;
pub const DEFAULT_MOMENTUM: f64 = 0.2;
pub const DEFAULT_TEMPERATURE: f64 = 0.01;

/// Smoothed one-hot target: `1 - eps + eps/N` on the label, `eps/N` elsewhere.
pub fn smoothed_target(label: usize, num_classes: usize, smoothing: f64) -> Result<Vec<f64>> {
    if label >= num_classes {
        return Err(Error::LabelOutOfRange { label, num_classes });
    }
    let off = smoothing / num_classes as f64;
    let mut q = vec![off; num_classes];
    q[label] = 1.0 - smoothing + off;
    Ok(q)
}

fn target_matrix(labels: &[usize], num_classes: usize, smoothing: f64, dtype: DType, device: &Device) -> Result<Tensor> {
    let mut q = Vec::with_capacity(labels.len() * num_classes);
    for &y in labels {
        q.extend(smoothed_target(y, num_classes, smoothing)?);
    }
    Ok(Tensor::from_vec(q, (labels.len(), num_classes), device)?.to_dtype(dtype)?)
}

fn soft_cross_entropy(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    let b = logits.dim(0)?;
    let logp = ops::log_softmax_last(logits)?;
    Ok(((logp * targets)?.sum_all()? * (-1.0 / b as f64))?)
}

/// Batch-mean cross-entropy against label-smoothed targets.
pub fn id_loss(logits: &Tensor, labels: &[usize], smoothing: f64) -> Result<Tensor> {
    let (b, n) = logits.dims2()?;
    if b != labels.len() {
        return Err(Error::Shape(format!("{b} logit rows for {} labels", labels.len())));
    }
    if !(0.0..1.0).contains(&smoothing) {
        return Err(Error::InvalidArgument(format!("label smoothing {smoothing} is outside [0, 1)")));
    }
    let q = target_matrix(labels, n, smoothing, logits.dtype(), logits.device())?;
    soft_cross_entropy(logits, &q)
}

fn normalized(v: &[f64]) -> Option<Vec<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    (norm > 1e-12 && norm.is_finite()).then(|| v.iter().map(|x| x / norm).collect())
}

/// Per-identity prototypes, kept unit-norm.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeMemory {
    rows: Vec<f64>,
    num_identities: usize,
    dim: usize,
    initialized: bool,
    pub momentum: f64,
    pub temperature: f64,
}

impl PrototypeMemory {
    /// An empty bank; it must be filled by [`PrototypeMemory::init`] before use.
    pub fn new(num_identities: usize, dim: usize, momentum: f64, temperature: f64) -> Result<Self> {
        if !(momentum > 0.0 && momentum <= 1.0) {
            return Err(Error::InvalidArgument(format!("memory momentum {momentum} is outside (0, 1]")));
        }
        if temperature <= 0.0 {
            return Err(Error::InvalidArgument(format!("temperature {temperature} must be positive")));
        }
        Ok(Self {
            rows: vec![0.0; num_identities * dim],
            num_identities,
            dim,
            initialized: false,
            momentum,
            temperature,
        })
    }

    pub fn num_identities(&self) -> usize {
        self.num_identities
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    pub fn row(&self, identity: usize) -> &[f64] {
        &self.rows[identity * self.dim..(identity + 1) * self.dim]
    }

    /// Sets every prototype to the normalized centroid of that identity's
    /// normalized features. `features` is `[M, d]`.
    pub fn init(&mut self, features: &Tensor, labels: &[usize]) -> Result<()> {
        let (m, d) = features.dims2()?;
        if d != self.dim || m != labels.len() {
            return Err(Error::Shape(format!(
                "memory init expects [{}, {}], got {:?}",
                labels.len(),
                self.dim,
                features.dims()
            )));
        }
        let values = features.to_dtype(DType::F64)?.to_vec2::<f64>()?;
        let mut sums = vec![0.0; self.num_identities * d];
        let mut counts = vec![0usize; self.num_identities];
        for (row, &y) in values.iter().zip(labels) {
            if y >= self.num_identities {
                return Err(Error::LabelOutOfRange { label: y, num_classes: self.num_identities });
            }
            let unit = normalized(row).ok_or(Error::ZeroNorm { which: "feature", row: y })?;
            for (s, u) in sums[y * d..(y + 1) * d].iter_mut().zip(unit) {
                *s += u;
            }
            counts[y] += 1;
        }
        let mut rows = Vec::with_capacity(sums.len());
        for (j, chunk) in sums.chunks(d).enumerate() {
            if counts[j] == 0 {
                return Err(Error::EmptyIdentity(j));
            }
            let mean: Vec<f64> = chunk.iter().map(|s| s / counts[j] as f64).collect();
            rows.extend(normalized(&mean).ok_or(Error::DegenerateCentroid(j))?);
        }
        self.rows = rows;
        self.initialized = true;
        Ok(())
    }

    /// `M[y] <- normalize(momentum * M[y] + (1 - momentum) * normalize(z))`.
    pub fn update(&mut self, identity: usize, z_hard: &[f64]) -> Result<()> {
        self.check_ready()?;
        if identity >= self.num_identities {
            return Err(Error::LabelOutOfRange { label: identity, num_classes: self.num_identities });
        }
        let z = normalized(z_hard).ok_or(Error::ZeroNorm { which: "hardest sample", row: identity })?;
        let g = self.momentum;
        let blended: Vec<f64> = self.row(identity).iter().zip(&z).map(|(m, z)| g * m + (1.0 - g) * z).collect();
        // Antipodal inputs cancel; keep the old prototype rather than divide by zero.
        if let Some(next) = normalized(&blended) {
            self.rows[identity * self.dim..(identity + 1) * self.dim].copy_from_slice(&next);
        }
        Ok(())
    }

    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_vec(self.rows.clone(), (self.num_identities, self.dim), device)?.to_dtype(dtype)?)
    }

    /// Rebuilds an initialized bank from stored rows.
    pub fn from_tensor(rows: &Tensor, momentum: f64, temperature: f64) -> Result<Self> {
        let (n, d) = rows.dims2()?;
        let mut mem = Self::new(n, d, momentum, temperature)?;
        mem.rows = rows.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        mem.initialized = true;
        Ok(mem)
    }

    fn check_ready(&self) -> Result<()> {
        if self.initialized {
            Ok(())
        } else {
            Err(Error::UninitializedMemory)
        }
    }
}

/// Batch-mean contrastive loss of normalized `z` against every prototype.
pub fn pcl_loss(z: &Tensor, labels: &[usize], memory: &PrototypeMemory) -> Result<Tensor> {
    memory.check_ready()?;
    let (b, d) = z.dims2()?;
    if d != memory.dim || b != labels.len() {
        return Err(Error::Shape(format!("pcl expects [{}, {}], got {:?}", labels.len(), memory.dim, z.dims())));
    }
    let protos = memory.to_tensor(z.dtype(), z.device())?;
    let logits = (ops::l2_normalize(z)?.matmul(&protos.t()?)? * (1.0 / memory.temperature))?;
    let q = target_matrix(labels, memory.num_identities, 0.0, z.dtype(), z.device())?;
    soft_cross_entropy(&logits, &q)
}

/// For each identity in the batch, the sample with the lowest cosine
/// similarity to its prototype; ties go to the lower batch index.
pub fn select_hardest(z: &Tensor, labels: &[usize], memory: &PrototypeMemory) -> Result<BTreeMap<usize, Vec<f64>>> {
    memory.check_ready()?;
    let rows = z.detach().to_dtype(DType::F64)?.to_vec2::<f64>()?;
    let mut best: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for (i, (row, &y)) in rows.iter().zip(labels).enumerate() {
        if y >= memory.num_identities {
            return Err(Error::LabelOutOfRange { label: y, num_classes: memory.num_identities });
        }
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        let sim = row.iter().zip(memory.row(y)).map(|(a, b)| a * b).sum::<f64>() / norm;
        match best.get(&y) {
            Some(&(s, _)) if s <= sim => {}
            _ => {
                best.insert(y, (sim, i));
            }
        }
    }
    Ok(best.into_iter().map(|(y, (_, i))| (y, rows[i].clone())).collect())
}

/// Applies one hardest-sample update per identity, in identity order.
pub fn update_memory(memory: &mut PrototypeMemory, hardest: &BTreeMap<usize, Vec<f64>>) -> Result<()> {
    for (&y, z) in hardest {
        memory.update(y, z)?;
    }
    Ok(())
}

pub fn reid_loss(id: &Tensor, pcl: &Tensor) -> Result<Tensor> {
    Ok((id + pcl)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(v: &[&[f64]]) -> Tensor {
        let rows: Vec<Vec<f64>> = v.iter().map(|r| r.to_vec()).collect();
        Tensor::new(rows, &Device::Cpu).unwrap()
    }

    fn scalar(t: &Tensor) -> f64 {
        t.to_scalar::<f64>().unwrap()
    }

    /// Direct evaluation of the smoothed cross-entropy for a single row.
    fn id_oracle(logits: &[f64], y: usize, eps: f64) -> f64 {
        let n = logits.len() as f64;
        let lse = logits.iter().map(|l| l.exp()).sum::<f64>().ln();
        logits
            .iter()
            .enumerate()
            .map(|(j, l)| {
                let q = if j == y { 1.0 - eps + eps / n } else { eps / n };
                -q * (l - lse)
            })
            .sum()
    }

    fn memory(rows: &[&[f64]], tau: f64) -> PrototypeMemory {
        let labels: Vec<usize> = (0..rows.len()).collect();
        let mut m = PrototypeMemory::new(rows.len(), rows[0].len(), 0.2, tau).unwrap();
        m.init(&t2(rows), &labels).unwrap();
        m
    }

    #[test]
    fn smoothed_target_sums_to_one() {
        let q = smoothed_target(2, 7, 0.1).unwrap();
        assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((q[2] - (0.9 + 0.1 / 7.0)).abs() < 1e-15);
        assert!(matches!(smoothed_target(7, 7, 0.1), Err(Error::LabelOutOfRange { .. })));
    }

    #[test]
    fn id_loss_examples() {
        let uniform = t2(&[&[0.0; 4]]);
        assert!((scalar(&id_loss(&uniform, &[1], 0.0).unwrap()) - 4f64.ln()).abs() < 1e-6);
        let confident = t2(&[&[60.0, 0.0, 0.0]]);
        assert!(scalar(&id_loss(&confident, &[0], 0.0).unwrap()) < 1e-12);
        let two = t2(&[&[0.0, 0.0]]);
        assert!((scalar(&id_loss(&two, &[0], 0.1).unwrap()) - 2f64.ln()).abs() < 1e-12);
        assert!(id_loss(&two, &[2], 0.1).is_err());
    }

    #[test]
    fn id_loss_matches_oracle() {
        let rows: [&[f64]; 2] = [&[0.3, -1.2, 2.0], &[1.0, 0.5, -0.5]];
        let got = scalar(&id_loss(&t2(&rows), &[2, 1], 0.1).unwrap());
        let want = (id_oracle(rows[0], 2, 0.1) + id_oracle(rows[1], 1, 0.1)) / 2.0;
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn pcl_examples() {
        let m = memory(&[&[1.0, 0.0], &[0.0, 1.0]], 1.0);
        let loss = scalar(&pcl_loss(&t2(&[&[2.0, 0.0]]), &[0], &m).unwrap());
        let e = std::f64::consts::E;
        assert!((loss - -(e / (e + 1.0)).ln()).abs() < 1e-12);

        let same = PrototypeMemory::from_tensor(&t2(&[&[0.6, 0.8], &[0.6, 0.8]]), 0.2, 0.01).unwrap();
        let loss = scalar(&pcl_loss(&t2(&[&[-3.0, 1.0]]), &[1], &same).unwrap());
        assert!((loss - 2f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn pcl_rejects_uninitialized_memory() {
        let m = PrototypeMemory::new(2, 2, 0.2, 0.01).unwrap();
        assert!(matches!(pcl_loss(&t2(&[&[1.0, 0.0]]), &[0], &m), Err(Error::UninitializedMemory)));
    }

    #[test]
    fn init_memory_examples() {
        let m = memory(&[&[3.0, 4.0], &[0.0, -2.0]], 0.01);
        assert_eq!(m.row(0), &[0.6, 0.8]);
        assert_eq!(m.row(1), &[0.0, -1.0]);

        let mut m = PrototypeMemory::new(1, 2, 0.2, 0.01).unwrap();
        m.init(&t2(&[&[1.0, 1.0], &[2.0, 2.0]]), &[0, 0]).unwrap();
        let h = 0.5f64.sqrt();
        assert!((m.row(0)[0] - h).abs() < 1e-15 && (m.row(0)[1] - h).abs() < 1e-15);

        let mut m = PrototypeMemory::new(1, 2, 0.2, 0.01).unwrap();
        let err = m.init(&t2(&[&[1.0, 0.0], &[-1.0, 0.0]]), &[0, 0]).unwrap_err();
        assert!(matches!(err, Error::DegenerateCentroid(0)));

        let mut m = PrototypeMemory::new(2, 2, 0.2, 0.01).unwrap();
        assert!(matches!(m.init(&t2(&[&[1.0, 0.0]]), &[0]), Err(Error::EmptyIdentity(1))));
    }

    #[test]
    fn hardest_sample_selection() {
        let m = memory(&[&[1.0, 0.0], &[0.0, 1.0]], 0.01);
        let z = t2(&[&[0.9, 0.435_889_894], &[0.1, 0.994_987_437], &[0.0, 5.0]]);
        let h = select_hardest(&z, &[0, 0, 1], &m).unwrap();
        assert_eq!(h[&0], vec![0.1, 0.994_987_437]);
        assert_eq!(h[&1], vec![0.0, 5.0]);

        let tie = t2(&[&[0.0, 1.0], &[0.0, 2.0]]);
        let h = select_hardest(&tie, &[0, 0], &m).unwrap();
        assert_eq!(h[&0], vec![0.0, 1.0]);
    }

    #[test]
    fn memory_update_examples() {
        let mut m = memory(&[&[1.0, 0.0]], 0.01);
        m.update(0, &[0.0, 1.0]).unwrap();
        let want = [0.2 / 0.68f64.sqrt(), 0.8 / 0.68f64.sqrt()];
        assert!((m.row(0)[0] - want[0]).abs() < 1e-12 && (m.row(0)[1] - want[1]).abs() < 1e-12);
        assert!((m.row(0)[0] - 0.2425).abs() < 1e-4 && (m.row(0)[1] - 0.9701).abs() < 1e-4);

        let mut m = memory(&[&[0.6, 0.8]], 0.01);
        m.update(0, &[0.6, 0.8]).unwrap();
        assert!((m.row(0)[0] - 0.6).abs() < 1e-15 && (m.row(0)[1] - 0.8).abs() < 1e-15);

        let mut frozen = PrototypeMemory::new(1, 2, 1.0, 0.01).unwrap();
        frozen.init(&t2(&[&[0.6, 0.8]]), &[0]).unwrap();
        frozen.update(0, &[1.0, -3.0]).unwrap();
        assert_eq!(frozen.row(0), &[0.6, 0.8]);
    }

    #[test]
    fn reid_loss_is_a_plain_sum() {
        let dev = Device::Cpu;
        let a = Tensor::new(1.0f64, &dev).unwrap();
        let b = Tensor::new(0.5f64, &dev).unwrap();
        assert_eq!(scalar(&reid_loss(&a, &b).unwrap()), 1.5);
        let z = Tensor::new(0.0f64, &dev).unwrap();
        assert_eq!(scalar(&reid_loss(&z, &z).unwrap()), 0.0);
    }

    #[test]
    fn memory_round_trips_through_tensor() {
        let m = memory(&[&[3.0, 4.0], &[1.0, 0.0]], 0.01);
        let back = PrototypeMemory::from_tensor(&m.to_tensor(DType::F64, &Device::Cpu).unwrap(), 0.2, 0.01).unwrap();
        assert_eq!(back, m);
    }
}
