//! Model-update arithmetic and the synthetic federated task.
//!
//! An update travels as `(w_i * x_i, w_i)`: the weighted delta with the
//! weight appended as a trailing component. Sums, masking and the final
//! weighted division all happen in modular fixed point so the protocol
//! route and direct weighted averaging land on identical bits.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::crypto::NoiseVector;
use crate::error::{Error, Result};
use crate::fixed::{FixedParams, ParameterVector};

/// `(w_i * x_i, w_i)` — total length dim + 1 on the wire.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedUpdate {
    pub weighted: ParameterVector,
    pub weight: u64,
}

/// x_i = m_i - M (component-wise, modular).
pub fn local_update(local: &ParameterVector, global: &ParameterVector) -> Result<ParameterVector> {
    local.sub(global)
}

/// Encode an update with its weight. The weight is an integer sample count,
/// so the scalar multiplication is exact (no fixed-point rounding).
pub fn encode(update: &ParameterVector, weight: u64) -> EncodedUpdate {
    EncodedUpdate { weighted: update.scale_int(weight), weight: weight & update.params().mask() }
}

impl EncodedUpdate {
    pub fn zeros(dim: usize, params: FixedParams) -> Self {
        EncodedUpdate { weighted: ParameterVector::zeros(dim, params), weight: 0 }
    }

    pub fn dim(&self) -> usize {
        self.weighted.dim()
    }

    pub fn params(&self) -> FixedParams {
        self.weighted.params()
    }

    /// Flat raw view: dim weighted components then the weight slot.
    pub fn to_raw(&self) -> Vec<u64> {
        let mut raw = self.weighted.raw().to_vec();
        raw.push(self.weight);
        raw
    }

    pub fn from_raw(raw: &[u64], params: FixedParams) -> Result<Self> {
        let (&weight, body) = raw
            .split_last()
            .ok_or_else(|| Error::Wire("encoded update needs at least the weight slot".into()))?;
        Ok(EncodedUpdate {
            weighted: ParameterVector::from_raw(body.to_vec(), params),
            weight: weight & params.mask(),
        })
    }

    /// Wire format is the (dim+1)-component parameter-vector format.
    pub fn to_bytes(&self) -> Vec<u8> {
        ParameterVector::from_raw(self.to_raw(), self.params()).to_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let v = ParameterVector::from_bytes(bytes)?;
        Self::from_raw(v.raw(), v.params())
    }

    pub fn add(&self, other: &EncodedUpdate) -> Result<EncodedUpdate> {
        let mask = self.params().mask();
        Ok(EncodedUpdate {
            weighted: self.weighted.add(&other.weighted)?,
            weight: self.weight.wrapping_add(other.weight) & mask,
        })
    }

    pub fn sub(&self, other: &EncodedUpdate) -> Result<EncodedUpdate> {
        let mask = self.params().mask();
        Ok(EncodedUpdate {
            weighted: self.weighted.sub(&other.weighted)?,
            weight: self.weight.wrapping_sub(other.weight) & mask,
        })
    }

    /// Mask covers every slot including the trailing weight.
    pub fn add_noise(&self, noise: &NoiseVector) -> Result<EncodedUpdate> {
        self.with_noise(noise, false)
    }

    pub fn sub_noise(&self, noise: &NoiseVector) -> Result<EncodedUpdate> {
        self.with_noise(noise, true)
    }

    fn with_noise(&self, noise: &NoiseVector, invert: bool) -> Result<EncodedUpdate> {
        if noise.values.len() != self.dim() + 1 {
            return Err(Error::Shape { left: noise.values.len(), right: self.dim() + 1 });
        }
        let params = self.params();
        let nv = EncodedUpdate::from_raw(&noise.values, params)?;
        if invert {
            self.sub(&nv)
        } else {
            self.add(&nv)
        }
    }
}

/// Component-wise modular sum, weight slot included.
pub fn aggregate(updates: &[EncodedUpdate]) -> Result<EncodedUpdate> {
    let first = updates
        .first()
        .ok_or_else(|| Error::parameter("cannot aggregate zero updates"))?;
    let mut acc = first.clone();
    for u in &updates[1..] {
        acc = acc.add(u)?;
    }
    Ok(acc)
}

/// M_{R+1} = (sum w_i x_i) / (sum w_i) + M_R, division in fixed point.
pub fn global_update(agg: &EncodedUpdate, global: &ParameterVector) -> Result<ParameterVector> {
    if agg.weight == 0 {
        return Err(Error::DegenerateRound);
    }
    agg.weighted.check_headroom()?;
    agg.weighted.div_round(agg.weight)?.add(global)
}

/// Plain centralized FedAvg: M_{R+1} = sum (w_i / w) m_i, evaluated as a
/// direct weighted sum and one division. Reference route for the protocol.
pub fn fedavg_reference(locals: &[ParameterVector], weights: &[u64]) -> Result<ParameterVector> {
    if locals.is_empty() || locals.len() != weights.len() {
        return Err(Error::parameter("fedavg needs matching non-empty models and weights"));
    }
    let params = locals[0].params();
    let mut sum = ParameterVector::zeros(locals[0].dim(), params);
    let mut total_weight: u64 = 0;
    for (m, &w) in locals.iter().zip(weights) {
        sum = sum.add(&m.scale_int(w))?;
        total_weight = total_weight.wrapping_add(w) & params.mask();
    }
    if total_weight == 0 {
        return Err(Error::DegenerateRound);
    }
    sum.check_headroom()?;
    sum.div_round(total_weight)
}

/// Synthetic least-squares task standing in for the real training workload:
/// n clients with heterogeneous sample counts over a shared linear model.
#[derive(Debug, Clone)]
pub struct SyntheticTask {
    pub dim: usize,
    pub params: FixedParams,
    /// Per-client (features, labels); weight = sample count.
    pub clients: Vec<ClientData>,
    /// Ground-truth coefficients the labels were generated from.
    pub truth: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ClientData {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<f64>,
}

impl ClientData {
    pub fn sample_count(&self) -> u64 {
        self.labels.len() as u64
    }
}

impl SyntheticTask {
    /// Client sample counts follow a skewed (geometric-ish) distribution.
    pub fn generate(
        n_clients: usize,
        dim: usize,
        params: FixedParams,
        seed: u64,
    ) -> Result<SyntheticTask> {
        if !(2..=8).contains(&dim) {
            return Err(Error::parameter(format!("task dimension {dim} outside 2..=8")));
        }
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let truth: Vec<f64> = (0..dim).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let clients = (0..n_clients)
            .map(|_| {
                let mut count = 2usize;
                while count < 24 && rng.gen::<f64>() < 0.72 {
                    count += 1;
                }
                let mut features = Vec::with_capacity(count);
                let mut labels = Vec::with_capacity(count);
                for _ in 0..count {
                    let x: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
                    let y: f64 = x.iter().zip(&truth).map(|(a, b)| a * b).sum::<f64>()
                        + rng.gen_range(-0.05..0.05);
                    features.push(x);
                    labels.push(y);
                }
                ClientData { features, labels }
            })
            .collect();
        Ok(SyntheticTask { dim, params, clients, truth })
    }

    pub fn weights(&self) -> Vec<u64> {
        self.clients.iter().map(|c| c.sample_count()).collect()
    }

    /// Mean squared error of a model over the pooled data.
    pub fn global_loss(&self, model: &ParameterVector) -> f64 {
        let m = model.to_f64s();
        let mut se = 0.0;
        let mut n = 0usize;
        for c in &self.clients {
            for (x, &y) in c.features.iter().zip(&c.labels) {
                let pred: f64 = x.iter().zip(&m).map(|(a, b)| a * b).sum();
                se += (pred - y).powi(2);
                n += 1;
            }
        }
        se / n as f64
    }

    pub fn local_loss(&self, client: usize, model: &[f64]) -> f64 {
        let c = &self.clients[client];
        let mut se = 0.0;
        for (x, &y) in c.features.iter().zip(&c.labels) {
            let pred: f64 = x.iter().zip(model).map(|(a, b)| a * b).sum();
            se += (pred - y).powi(2);
        }
        se / c.labels.len() as f64
    }
}

/// Run `epochs` deterministic SGD passes on the client's data, starting from
/// the global model, and quantize the result.
///
/// Returns `None` when the client has no samples (it abstains this round).
pub fn train_local(
    task: &SyntheticTask,
    client: usize,
    global: &ParameterVector,
    epochs: usize,
    lr: f64,
) -> Option<ParameterVector> {
    let data = task.clients.get(client)?;
    if data.labels.is_empty() {
        return None;
    }
    let mut m = global.to_f64s();
    for _ in 0..epochs {
        for (x, &y) in data.features.iter().zip(&data.labels) {
            let pred: f64 = x.iter().zip(&m).map(|(a, b)| a * b).sum();
            let err = pred - y;
            for (mj, xj) in m.iter_mut().zip(x) {
                *mj -= lr * 2.0 * err * xj;
            }
        }
    }
    Some(ParameterVector::from_f64s(&m, global.params()))
}
