//! The federated protocol engine.
//!
//! One [`Simulation`] holds the federator's global model and replays global
//! epochs of the configured strategy. Clients `0..n−f` are honest, the last
//! `f` are Byzantine. Client work is independent within an epoch and may run
//! on the rayon pool; results are always consumed in client-index order, so
//! parallel and serial execution give identical bits.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregation::{aggregate, AggregationRule};
use crate::attacks::{label_flip, AttackKind, AttackSpec};
use crate::data::minibatch;
use crate::error::{invalid, Error, Result};
use crate::model::{accuracy, Batch, Dataset, LossSpec};
use crate::rng::{derive_seed, sample_direction, DirectionKind, Seed64, DIRECTION_BITS, EPOCH_BITS, LOCAL_EPOCH_BITS};
use crate::vector::{axpy, dot, DenseVector, Model};
use crate::zo::estimate_along;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtocolStrategy {
    /// Fresh directions every local epoch; one aggregation per local epoch.
    Unbiased,
    /// The first local epoch's directions reused throughout; clients send the
    /// sum of their projections.
    Biased,
    /// Local unbiased steps, then the cumulative update is re-projected onto
    /// a fresh direction set.
    UnbiasedCompressed,
    /// Gradient baseline: clients send full `d`-dimensional updates.
    #[serde(rename = "fedavg")]
    FedAvg,
}

impl ProtocolStrategy {
    pub fn name(self) -> &'static str {
        match self {
            ProtocolStrategy::Unbiased => "unbiased",
            ProtocolStrategy::Biased => "biased",
            ProtocolStrategy::UnbiasedCompressed => "unbiased_compressed",
            ProtocolStrategy::FedAvg => "fedavg",
        }
    }

    /// Scalars each client sends (and receives) per global epoch.
    pub fn scalars_per_epoch(self, k: usize, local_epochs: usize, dim: usize) -> u64 {
        match self {
            ProtocolStrategy::Unbiased => (local_epochs * k) as u64,
            ProtocolStrategy::Biased | ProtocolStrategy::UnbiasedCompressed => k as u64,
            ProtocolStrategy::FedAvg => dim as u64,
        }
    }
}

/// Everything one simulated run needs besides the data.
#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub n: usize,
    pub f: usize,
    pub strategy: ProtocolStrategy,
    pub rule: AggregationRule,
    pub attack: AttackSpec,
    pub k: usize,
    pub local_epochs: usize,
    pub mu: f64,
    pub eta: f64,
    pub batch_size: usize,
    pub kind: DirectionKind,
    pub loss: LossSpec,
    /// Base seed of the perturbation directions.
    pub direction_seed: Seed64,
    /// Seed of the mini-batch draws.
    pub batch_seed: Seed64,
    pub parallel: bool,
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(invalid("n", "need at least one client"));
        }
        if 2 * self.f >= self.n {
            return Err(invalid(
                "f",
                format!("need f < n/2 (honest majority), got f = {}, n = {}", self.f, self.n),
            ));
        }
        if self.k == 0 || self.k >= 1 << DIRECTION_BITS {
            return Err(invalid("k", format!("need 1 <= K < 2^{DIRECTION_BITS}, got {}", self.k)));
        }
        if self.local_epochs == 0 || self.local_epochs + 1 >= 1 << LOCAL_EPOCH_BITS {
            return Err(invalid(
                "local_epochs",
                format!("need 1 <= L < 2^{LOCAL_EPOCH_BITS} - 1, got {}", self.local_epochs),
            ));
        }
        if !(self.mu >= 0.0 && self.mu.is_finite()) {
            return Err(invalid("mu", format!("need mu >= 0, got {}", self.mu)));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(invalid("eta", format!("need eta > 0, got {}", self.eta)));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch_size", "must be positive"));
        }
        self.rule.validate(self.n)?;
        self.attack.validate()
    }

    fn honest(&self) -> usize {
        self.n - self.f
    }

    fn is_byzantine(&self, i: usize) -> bool {
        i >= self.honest()
    }

    fn crafts(&self, i: usize) -> bool {
        self.is_byzantine(i) && self.attack.kind.crafts_vectors()
    }
}

/// Scalars exchanged so far, per client.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommLedger {
    pub uplink_scalars: u64,
    pub downlink_scalars: u64,
    /// `(uplink, downlink)` of every completed global epoch.
    pub per_round: Vec<(u64, u64)>,
}

impl CommLedger {
    fn record(&mut self, up: u64, down: u64) {
        self.uplink_scalars += up;
        self.downlink_scalars += down;
        self.per_round.push((up, down));
    }
}

/// Aggregated coefficients for one set of shared directions.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedLevel {
    /// Local-epoch slot `l` of the direction seeds `(t, l, r)`.
    pub level: u64,
    pub coeffs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum GlobalUpdate {
    /// `w ← w − η Σ_l P_{t,l} ĉ_l`.
    Projected(Vec<ProjectedLevel>),
    /// `w ← w − η û`.
    Dense(Vec<f64>),
}

/// What the federator sends to every client at the end of global epoch `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct Broadcast {
    pub t: u64,
    pub update: GlobalUpdate,
}

impl Broadcast {
    pub fn scalars(&self) -> usize {
        match &self.update {
            GlobalUpdate::Projected(levels) => levels.iter().map(|l| l.coeffs.len()).sum(),
            GlobalUpdate::Dense(u) => u.len(),
        }
    }
}

fn directions(base: Seed64, t: u64, level: u64, k: usize, dim: usize, kind: DirectionKind, parallel: bool) -> Result<Vec<DenseVector>> {
    let one = |r: usize| sample_direction(derive_seed(base, t, level, r as u64), dim, kind);
    if parallel {
        (0..k).into_par_iter().map(one).collect()
    } else {
        (0..k).map(one).collect()
    }
}

/// `acc += Σ_r (η·c_r)·z_r`, in `r` order.
fn accumulate(acc: &mut [f64], dirs: &[DenseVector], coeffs: &[f64], eta: f64) {
    for (z, &c) in dirs.iter().zip(coeffs) {
        axpy(acc, eta * c, z.as_slice());
    }
}

fn subtract(w: &mut Model, delta: &[f64]) {
    for (x, d) in w.as_mut_slice().iter_mut().zip(delta) {
        *x -= d;
    }
}

/// Applies a projected update. The operation order is fixed: the step
/// `Σ_l Σ_r (η·c_{l,r})·z_{l,r}` is accumulated level by level and direction
/// by direction, then subtracted once. Federator and clients both go through
/// here, which is what makes their models agree bit for bit.
fn apply_projected(w: &mut Model, levels: &[(&[DenseVector], &[f64])], eta: f64) {
    let mut delta = vec![0.0; w.dim()];
    for (dirs, coeffs) in levels {
        accumulate(&mut delta, dirs, coeffs, eta);
    }
    subtract(w, &delta);
}

fn apply_dense(w: &mut Model, update: &[f64], eta: f64) {
    for (x, u) in w.as_mut_slice().iter_mut().zip(update) {
        *x -= eta * u;
    }
}

/// A client's reconstruction of `w^{(t+1)}` from `w^{(t)}` and the broadcast,
/// regenerating every direction from the shared base seed.
pub fn client_recover_model(
    previous: &Model,
    broadcast: &Broadcast,
    base: Seed64,
    eta: f64,
    kind: DirectionKind,
) -> Result<Model> {
    let mut w = previous.clone();
    match &broadcast.update {
        GlobalUpdate::Projected(levels) => {
            let dirs = levels
                .iter()
                .map(|l| directions(base, broadcast.t, l.level, l.coeffs.len(), w.dim(), kind, false))
                .collect::<Result<Vec<_>>>()?;
            let pairs: Vec<(&[DenseVector], &[f64])> =
                dirs.iter().zip(levels).map(|(d, l)| (d.as_slice(), l.coeffs.as_slice())).collect();
            apply_projected(&mut w, &pairs, eta);
        }
        GlobalUpdate::Dense(u) => {
            if u.len() != w.dim() {
                return Err(Error::DimensionMismatch {
                    expected: w.dim(),
                    actual: u.len(),
                });
            }
            apply_dense(&mut w, u, eta);
        }
    }
    Ok(w)
}

/// Coefficients of `g` re-projected onto `dirs`: `(s/K)·<z_r, g>` with the
/// estimator scale `s` of `kind`, so that `Σ_r c_r z_r` is an unbiased
/// estimate of `g`.
pub fn reproject(g: &[f64], dirs: &[DenseVector], kind: DirectionKind) -> Vec<f64> {
    let factor = kind.estimator_scale(g.len()) / dirs.len() as f64;
    dirs.iter().map(|z| factor * dot(z.as_slice(), g)).collect()
}

/// One evaluation point of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: u64,
    pub seed: u64,
    pub accuracy: f64,
    pub train_loss: f64,
    pub uplink_scalars: u64,
    pub downlink_scalars: u64,
    pub wall_ms: u64,
}

/// The federator's view of a run.
pub struct Simulation<'a> {
    cfg: SimConfig,
    train: &'a Dataset,
    flipped: Option<Dataset>,
    clients: Vec<Vec<usize>>,
    w: Model,
    t: u64,
    ledger: CommLedger,
}

impl<'a> Simulation<'a> {
    /// Starts from the zero model with the given client partition.
    pub fn new(cfg: SimConfig, train: &'a Dataset, clients: Vec<Vec<usize>>) -> Result<Self> {
        cfg.validate()?;
        if clients.len() != cfg.n {
            return Err(invalid(
                "clients",
                format!("partition has {} clients, config has n = {}", clients.len(), cfg.n),
            ));
        }
        if let Some(i) = clients.iter().position(Vec::is_empty) {
            return Err(Error::Partition(format!("client {i} has no samples")));
        }
        if let Some(&bad) = clients.iter().flatten().find(|&&s| s >= train.len()) {
            return Err(invalid("clients", format!("sample index {bad} out of range")));
        }
        let flipped = if cfg.attack.kind == AttackKind::Lf && cfg.f > 0 {
            Some(label_flip(train)?)
        } else {
            None
        };
        let dim = cfg.loss.model_dim(train);
        Ok(Self {
            cfg,
            train,
            flipped,
            clients,
            w: Model::zeros(dim),
            t: 0,
            ledger: CommLedger::default(),
        })
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    pub fn model(&self) -> &Model {
        &self.w
    }

    /// Replaces the global model, e.g. to start from a non-zero point.
    pub fn set_model(&mut self, w: Model) -> Result<()> {
        self.w.check_dim(&w)?;
        self.w = w;
        Ok(())
    }

    /// Number of completed global epochs.
    pub fn epoch(&self) -> u64 {
        self.t
    }

    pub fn ledger(&self) -> &CommLedger {
        &self.ledger
    }

    fn client_data(&self, i: usize) -> &Dataset {
        match &self.flipped {
            Some(d) if self.cfg.is_byzantine(i) => d,
            _ => self.train,
        }
    }

    fn batch(&self, i: usize, l: usize) -> Result<Batch<'_>> {
        let idx = minibatch(
            &self.clients[i],
            self.cfg.batch_size,
            self.cfg.batch_seed,
            self.t,
            l as u64,
            i as u64,
        );
        Batch::new(self.client_data(i), idx)
    }

    fn per_client<T: Send>(&self, work: impl Fn(usize) -> Result<T> + Sync + Send) -> Result<Vec<T>> {
        if self.cfg.parallel {
            (0..self.cfg.n).into_par_iter().map(work).collect()
        } else {
            (0..self.cfg.n).map(work).collect()
        }
    }

    /// Local ZO epochs of client `i` along `levels[l]`, starting from the
    /// global model. Returns the per-epoch projection vectors and, when
    /// `track_sum` is set, `Σ_l P_l ρ_l`.
    fn zo_local(&self, i: usize, levels: &[Vec<DenseVector>], track_sum: bool) -> Result<(Vec<Vec<f64>>, Option<Vec<f64>>)> {
        let cfg = &self.cfg;
        let mut w = self.w.clone();
        let mut out = Vec::with_capacity(levels.len());
        let mut sum = track_sum.then(|| vec![0.0; w.dim()]);
        for (l, dirs) in levels.iter().enumerate() {
            let batch = self.batch(i, l)?;
            let rho = estimate_along(&cfg.loss, &w, dirs, cfg.mu, &batch, cfg.kind)?
                .projections
                .into_vec();
            if let Some(s) = sum.as_mut() {
                accumulate(s, dirs, &rho, 1.0);
            }
            if l + 1 < levels.len() {
                apply_projected(&mut w, &[(dirs.as_slice(), rho.as_slice())], cfg.eta);
            }
            out.push(rho);
        }
        Ok((out, sum))
    }

    /// Local SGD epochs of client `i`; returns the sum of the gradients.
    fn sgd_local(&self, i: usize) -> Result<Vec<f64>> {
        let cfg = &self.cfg;
        let mut w = self.w.clone();
        let mut sum: Option<Vec<f64>> = None;
        for l in 0..cfg.local_epochs {
            let batch = self.batch(i, l)?;
            let g = cfg.loss.grad(&w, &batch)?.into_vec();
            if l + 1 < cfg.local_epochs {
                apply_dense(&mut w, &g, cfg.eta);
            }
            match sum.as_mut() {
                Some(s) => s.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => sum = Some(g),
            }
        }
        Ok(sum.expect("at least one local epoch"))
    }

    /// Aggregates the submissions of one aggregation point, substituting the
    /// crafted vector for Byzantine clients when the attack crafts one.
    fn aggregate_point(&self, mut submissions: Vec<Option<Vec<f64>>>) -> Result<Vec<f64>> {
        let cfg = &self.cfg;
        let h = cfg.honest();
        let honest: Vec<DenseVector> = submissions[..h]
            .iter_mut()
            .map(|s| DenseVector::from_vec(s.take().expect("honest clients always submit")))
            .collect();
        let crafted = cfg.attack.byzantine_vector(&honest, &cfg.rule, cfg.f, cfg.n)?;
        let mut all = honest;
        for s in submissions.into_iter().skip(h) {
            let v = match (&crafted, s) {
                (Some(c), _) => c.clone(),
                (None, Some(v)) => DenseVector::from_vec(v),
                (None, None) => unreachable!("non-crafting Byzantine clients always compute"),
            };
            all.push(v);
        }
        Ok(aggregate(&cfg.rule, &all)?.into_vec())
    }

    /// Runs one global epoch and returns what the federator broadcasts.
    pub fn step(&mut self) -> Result<Broadcast> {
        let cfg = self.cfg.clone();
        if self.t >= 1 << EPOCH_BITS {
            return Err(invalid("t", format!("global epoch index must stay below 2^{EPOCH_BITS}")));
        }
        let t = self.t;
        let dim = self.w.dim();
        let dirs_at = |level: u64| directions(cfg.direction_seed, t, level, cfg.k, dim, cfg.kind, cfg.parallel);
        let update = match cfg.strategy {
            ProtocolStrategy::Unbiased => {
                let levels = (0..cfg.local_epochs)
                    .map(|l| dirs_at(l as u64 + 1))
                    .collect::<Result<Vec<_>>>()?;
                let per_client = self.per_client(|i| {
                    if cfg.crafts(i) {
                        Ok(None)
                    } else {
                        Ok(Some(self.zo_local(i, &levels, false)?.0))
                    }
                })?;
                let mut per_level: Vec<Vec<Option<Vec<f64>>>> =
                    (0..cfg.local_epochs).map(|_| Vec::with_capacity(cfg.n)).collect();
                for client in per_client {
                    match client {
                        Some(rhos) => {
                            for (slot, rho) in per_level.iter_mut().zip(rhos) {
                                slot.push(Some(rho));
                            }
                        }
                        None => per_level.iter_mut().for_each(|slot| slot.push(None)),
                    }
                }
                let coeffs = per_level
                    .into_iter()
                    .map(|subs| self.aggregate_point(subs))
                    .collect::<Result<Vec<_>>>()?;
                let pairs: Vec<(&[DenseVector], &[f64])> =
                    levels.iter().zip(&coeffs).map(|(d, c)| (d.as_slice(), c.as_slice())).collect();
                apply_projected(&mut self.w, &pairs, cfg.eta);
                GlobalUpdate::Projected(
                    coeffs
                        .into_iter()
                        .enumerate()
                        .map(|(l, c)| ProjectedLevel {
                            level: l as u64 + 1,
                            coeffs: c,
                        })
                        .collect(),
                )
            }
            ProtocolStrategy::Biased => {
                let dirs = dirs_at(1)?;
                let levels = vec![dirs; cfg.local_epochs];
                let subs = self.per_client(|i| {
                    if cfg.crafts(i) {
                        return Ok(None);
                    }
                    let (rhos, _) = self.zo_local(i, &levels, false)?;
                    let mut it = rhos.into_iter();
                    let mut sum = it.next().expect("at least one local epoch");
                    for rho in it {
                        sum.iter_mut().zip(&rho).for_each(|(a, b)| *a += b);
                    }
                    Ok(Some(sum))
                })?;
                let coeffs = self.aggregate_point(subs)?;
                apply_projected(&mut self.w, &[(levels[0].as_slice(), coeffs.as_slice())], cfg.eta);
                GlobalUpdate::Projected(vec![ProjectedLevel { level: 1, coeffs }])
            }
            ProtocolStrategy::UnbiasedCompressed => {
                let levels = (0..cfg.local_epochs)
                    .map(|l| dirs_at(l as u64 + 1))
                    .collect::<Result<Vec<_>>>()?;
                let hat_level = cfg.local_epochs as u64 + 1;
                let hat = dirs_at(hat_level)?;
                let subs = self.per_client(|i| {
                    if cfg.crafts(i) {
                        return Ok(None);
                    }
                    let (_, sum) = self.zo_local(i, &levels, true)?;
                    Ok(Some(reproject(&sum.expect("tracked"), &hat, cfg.kind)))
                })?;
                let coeffs = self.aggregate_point(subs)?;
                apply_projected(&mut self.w, &[(hat.as_slice(), coeffs.as_slice())], cfg.eta);
                GlobalUpdate::Projected(vec![ProjectedLevel {
                    level: hat_level,
                    coeffs,
                }])
            }
            ProtocolStrategy::FedAvg => {
                let subs = self.per_client(|i| {
                    if cfg.crafts(i) {
                        Ok(None)
                    } else {
                        self.sgd_local(i).map(Some)
                    }
                })?;
                let agg = self.aggregate_point(subs)?;
                apply_dense(&mut self.w, &agg, cfg.eta);
                GlobalUpdate::Dense(agg)
            }
        };
        let per_epoch = cfg.strategy.scalars_per_epoch(cfg.k, cfg.local_epochs, dim);
        self.ledger.record(per_epoch, per_epoch);
        self.t += 1;
        Ok(Broadcast { t, update })
    }

    /// Test accuracy and full-training-set loss of the global model.
    pub fn evaluate(&self, test: &Dataset) -> Result<(f64, f64)> {
        let acc = accuracy(&self.cfg.loss, &self.w, test)?;
        let loss = self.cfg.loss.loss(&self.w, &Batch::all(self.train))?;
        Ok((acc, loss))
    }

    /// Runs `epochs` global epochs, evaluating after every `eval_every`-th
    /// and after the last.
    pub fn run(
        &mut self,
        test: &Dataset,
        epochs: u64,
        eval_every: u64,
        seed: u64,
        record_wall_clock: bool,
    ) -> Result<Vec<MetricsRecord>> {
        if eval_every == 0 {
            return Err(invalid("eval_every", "must be positive"));
        }
        let start = std::time::Instant::now();
        let mut records = Vec::new();
        for _ in 0..epochs {
            self.step()?;
            if self.t % eval_every == 0 || self.t == epochs {
                let (acc, loss) = self.evaluate(test)?;
                records.push(MetricsRecord {
                    epoch: self.t,
                    seed,
                    accuracy: acc,
                    train_loss: loss,
                    uplink_scalars: self.ledger.uplink_scalars,
                    downlink_scalars: self.ledger.downlink_scalars,
                    wall_ms: if record_wall_clock {
                        start.elapsed().as_millis() as u64
                    } else {
                        0
                    },
                });
            }
        }
        Ok(records)
    }
}

/// Largest accuracy over a run's records.
pub fn max_accuracy(records: &[MetricsRecord]) -> Option<f64> {
    records.iter().map(|r| r.accuracy).reduce(f64::max)
}
