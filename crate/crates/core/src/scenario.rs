//! Scenario runner: builds a keyed peer network from a config, runs seeded
//! training rounds over it, and reports plot-ready metrics. Everything is a
//! pure function of config + seed.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::crypto::{AeadSuite, CipherSuite, PlainSuite};
use crate::error::{Error, Result};
use crate::fixed::{FixedParams, ParameterVector};
use crate::keying::{
    derive_communication_key, discover_shared_keys, draw_ring, establish_path_key, generate_pool,
    issue_challenges, normalize_pair, Challenge, CommunicationKey, KeyPool, KeyRing,
};
use crate::model::{
    encode, fedavg_reference, local_update, train_local, EncodedUpdate,
    SyntheticTask,
};
use crate::protocol::{FaultPlan, ProtocolConfig, Simulation};
use crate::topology::{
    generate_random_graph, is_connected, is_connected_subset, shared_key_probability,
    threshold_edge_probability, Graph,
};

fn default_confidence() -> f64 {
    0.999
}
fn default_pool() -> u32 {
    2000
}
fn default_ring() -> usize {
    20
}
fn default_candidates() -> usize {
    4
}
fn default_discovery() -> String {
    "challenge".into()
}
fn default_freshness() -> u64 {
    10
}
fn default_width() -> u8 {
    32
}
fn default_scale() -> u8 {
    16
}
fn default_true() -> bool {
    true
}
fn default_rounds() -> u32 {
    10
}
fn default_dim() -> usize {
    4
}
fn default_epochs() -> usize {
    2
}
fn default_lr() -> f64 {
    0.05
}
fn default_deposit() -> i64 {
    1
}
fn default_suite() -> String {
    "aead".into()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TopologyConfig {
    pub n_potential: u32,
    /// Explicit edge probability; omitted means the connectivity-threshold
    /// value for `connectivity_confidence`.
    #[serde(default)]
    pub edge_probability: Option<f64>,
    #[serde(default = "default_confidence")]
    pub connectivity_confidence: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KeyingConfig {
    #[serde(default = "default_pool")]
    pub pool_size: u32,
    #[serde(default = "default_ring")]
    pub ring_size: usize,
    /// Minimum shared keys (exclusive) required for a direct link key.
    #[serde(default)]
    pub threshold_e: usize,
    #[serde(default = "default_candidates")]
    pub path_key_candidates: usize,
    /// "challenge": trial-decryption discovery over real challenge messages.
    /// "direct": ring intersection without the wire exchange (same result,
    /// used by high-repetition suites).
    #[serde(default = "default_discovery")]
    pub discovery: String,
}

impl Default for KeyingConfig {
    fn default() -> Self {
        KeyingConfig {
            pool_size: default_pool(),
            ring_size: default_ring(),
            threshold_e: 0,
            path_key_candidates: default_candidates(),
            discovery: default_discovery(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProtocolSpec {
    pub n_target: u32,
    #[serde(default = "default_rounds")]
    pub rounds: u32,
    /// Stipulated aggregation time T; 0 = 4 * n_target.
    #[serde(default)]
    pub aggregation_time: u64,
    #[serde(default = "default_freshness")]
    pub freshness_window: u64,
    #[serde(default = "default_width")]
    pub width: u8,
    #[serde(default = "default_scale")]
    pub scale: u8,
    #[serde(default = "default_true")]
    pub masking: bool,
    #[serde(default)]
    pub shortcut_return: bool,
    #[serde(default = "default_deposit")]
    pub deposit: i64,
    /// "aead" for the production cipher, "plain" for the transparent test
    /// suite (identical contract, faster in huge sweeps).
    #[serde(default = "default_suite")]
    pub cipher_suite: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskConfig {
    #[serde(default = "default_dim")]
    pub dim: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig { dim: default_dim(), epochs: default_epochs(), learning_rate: default_lr() }
    }
}

/// Per-round dropouts: `count` non-leader-eligible targets drop at seeded
/// ticks inside the round, and recover before the next round starts.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct DropoutConfig {
    #[serde(default)]
    pub count: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub topology: TopologyConfig,
    #[serde(default)]
    pub keying: KeyingConfig,
    pub protocol: ProtocolSpec,
    #[serde(default)]
    pub task: TaskConfig,
    #[serde(default)]
    pub dropout: DropoutConfig,
    #[serde(default)]
    pub output_dir: Option<String>,
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        let t = &self.topology;
        if let Some(p) = t.edge_probability {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("edge probability {p} outside [0,1]")));
            }
        }
        if !(0.0..1.0).contains(&t.connectivity_confidence) {
            return Err(Error::Config("connectivity confidence must be in [0,1)".into()));
        }
        if self.protocol.n_target == 0 || self.protocol.n_target > t.n_potential {
            return Err(Error::Config(format!(
                "n_target {} must be in 1..={}",
                self.protocol.n_target, t.n_potential
            )));
        }
        if 2 * self.keying.ring_size as u32 > self.keying.pool_size {
            return Err(Error::Config("two key rings must fit in the pool".into()));
        }
        if self.dropout.count >= self.protocol.n_target {
            return Err(Error::Config("dropout count must stay below n_target".into()));
        }
        match self.keying.discovery.as_str() {
            "challenge" | "direct" => {}
            other => return Err(Error::Config(format!("unknown discovery mode '{other}'"))),
        }
        match self.protocol.cipher_suite.as_str() {
            "aead" | "plain" => {}
            other => return Err(Error::Config(format!("unknown cipher suite '{other}'"))),
        }
        FixedParams::new(self.protocol.width, self.protocol.scale)?;
        Ok(())
    }

    pub fn fixed_params(&self) -> FixedParams {
        FixedParams::new(self.protocol.width, self.protocol.scale)
            .expect("validated fixed-point parameters")
    }

    /// Physical edge probability. The derived default compensates for key
    /// establishment: the route runs over the keyed overlay induced on the
    /// targets, so the physical graph must be denser by the reciprocal of
    /// the ring-overlap probability to leave that overlay connected.
    pub fn edge_probability(&self) -> f64 {
        if let Some(p) = self.topology.edge_probability {
            return p;
        }
        let threshold = threshold_edge_probability(
            self.protocol.n_target,
            self.topology.connectivity_confidence,
        )
        .expect("validated connectivity confidence");
        let overlap =
            shared_key_probability(self.keying.pool_size as u64, self.keying.ring_size as u64)
                .expect("validated keying sizes");
        (threshold / overlap.max(1e-9)).min(1.0)
    }
}

/// Fully keyed network plus the task, ready to run rounds.
pub struct ScenarioWorld {
    /// Physical peer connectivity.
    pub physical: Graph,
    /// Keyed overlay: physical edges with an established communication key.
    pub secure: Graph,
    pub rings: BTreeMap<u32, KeyRing>,
    pub comm_keys: BTreeMap<(u32, u32), CommunicationKey>,
    pub path_key_pairs: Vec<(u32, u32)>,
    pub targets: BTreeSet<u32>,
    pub server_adjacent: BTreeSet<u32>,
    pub task: SyntheticTask,
    /// Challenge messages exchanged during discovery (challenge mode only).
    pub challenges: Vec<Challenge>,
    /// Seed that produced a connected target overlay (>= config seed).
    pub effective_seed: u64,
}

/// Establish communication keys over the physical edges; pairs with too few
/// shared ring keys fall back to a path key via a common keyed neighbor.
fn establish_overlay(
    physical: &Graph,
    rings: &BTreeMap<u32, KeyRing>,
    pool: &KeyPool,
    cfg: &KeyingConfig,
    suite: &dyn CipherSuite,
    seed: u64,
    challenges_out: &mut Vec<Challenge>,
) -> Result<(BTreeMap<(u32, u32), CommunicationKey>, Vec<(u32, u32)>)> {
    let mut comm_keys = BTreeMap::new();
    let mut needs_path_key = Vec::new();
    let mut nonce = 0u64;
    for (a, b) in physical.edges() {
        let shared: BTreeMap<u32, _> = match cfg.discovery.as_str() {
            "direct" => rings[&a].intersection(&rings[&b]),
            _ => {
                let challenges = issue_challenges(&rings[&a], suite, nonce)?;
                nonce += challenges.len() as u64;
                let ids = discover_shared_keys(&rings[&b], &challenges, suite);
                challenges_out.extend(challenges);
                ids.into_iter()
                    .map(|id| (id, *rings[&b].key(id).expect("discovered key is in the ring")))
                    .collect()
            }
        };
        match derive_communication_key((a, b), &shared, cfg.threshold_e) {
            Ok(key) => {
                comm_keys.insert(normalize_pair(a, b), key);
            }
            Err(Error::InsufficientSharedKeys { .. }) => needs_path_key.push((a, b)),
            Err(e) => return Err(e),
        }
    }
    // path keys: broker = lowest common neighbor already keyed to both ends
    let mut path_key_pairs = Vec::new();
    for (a, b) in needs_path_key {
        let broker = physical.neighbors(a).into_iter().find(|&c| {
            c != b
                && physical.has_edge(c, b)
                && comm_keys.contains_key(&normalize_pair(a, c))
                && comm_keys.contains_key(&normalize_pair(c, b))
        });
        let Some(broker) = broker else {
            continue; // no broker: edge stays unkeyed, overlay just loses it
        };
        let unused: BTreeMap<u32, _> = (0..pool.size())
            .filter(|id| rings[&a].key(*id).is_none() && rings[&b].key(*id).is_none())
            .map(|id| (id, *pool.key(id).expect("pool ids are dense")))
            .collect();
        let outcome =
            establish_path_key(a, b, broker, &unused, cfg.path_key_candidates, seed)?;
        let pair = normalize_pair(a, b);
        let mut key = outcome.key;
        key.pair = pair;
        comm_keys.insert(pair, key);
        path_key_pairs.push(pair);
    }
    Ok((comm_keys, path_key_pairs))
}

/// Build the network: random physical graph, key pre-distribution, link-key
/// establishment, target selection. Retries with incremented seeds until the
/// target set is connected inside the keyed overlay.
pub fn build_world(cfg: &ScenarioConfig) -> Result<ScenarioWorld> {
    cfg.validate()?;
    let n = cfg.topology.n_potential;
    let p = cfg.edge_probability();
    for attempt in 0..64u64 {
        let seed = cfg.seed.wrapping_add(attempt);
        let physical = generate_random_graph(n, p, seed)?;
        let pool = generate_pool(cfg.keying.pool_size, seed ^ 0x6b65_7970)?;
        let rings: BTreeMap<u32, KeyRing> = (0..n)
            .map(|id| {
                draw_ring(&pool, id, cfg.keying.ring_size as u32, seed ^ ((id as u64) << 24))
                    .map(|r| (id, r))
            })
            .collect::<Result<_>>()?;
        let mut challenges = Vec::new();
        let suite = make_suite(&cfg.protocol.cipher_suite);
        let (comm_keys, path_key_pairs) = establish_overlay(
            &physical,
            &rings,
            &pool,
            &cfg.keying,
            suite.as_ref(),
            seed,
            &mut challenges,
        )?;

        let mut secure = Graph::new(n)?;
        for &pair in comm_keys.keys() {
            secure.add_edge(pair.0, pair.1)?;
        }

        let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x7461_7267);
        let mut ids: Vec<u32> = (0..n).collect();
        ids.shuffle(&mut rng);
        let targets: BTreeSet<u32> =
            ids.into_iter().take(cfg.protocol.n_target as usize).collect();
        if !is_connected_subset(&secure, &targets) {
            continue;
        }
        // roughly a tenth of the targets can reach the server directly
        let adjacent_count = (targets.len() / 10).max(1);
        let mut target_ids: Vec<u32> = targets.iter().copied().collect();
        target_ids.shuffle(&mut rng);
        let server_adjacent: BTreeSet<u32> =
            target_ids.into_iter().take(adjacent_count).collect();

        let task = SyntheticTask::generate(
            targets.len(),
            cfg.task.dim,
            cfg.fixed_params(),
            seed ^ 0x7461_736b,
        )?;
        return Ok(ScenarioWorld {
            physical,
            secure,
            rings,
            comm_keys,
            path_key_pairs,
            targets,
            server_adjacent,
            task,
            challenges,
            effective_seed: seed,
        });
    }
    Err(Error::Config(
        "no seed within 64 attempts produced a connected keyed target overlay".into(),
    ))
}

#[derive(Debug, Clone, Serialize)]
pub struct RoundMetrics {
    pub round: u32,
    pub leader: u32,
    pub transmissions: u64,
    pub aggregated: usize,
    pub dropouts: u32,
    pub aborted: Option<String>,
    /// Global-model loss on the pooled task data after this round.
    pub loss: f64,
    /// Protocol result bit-identical to the direct weighted-average oracle
    /// over the same participants?
    pub oracle_equal: bool,
}

#[derive(Debug, Serialize)]
pub struct ScenarioOutcome {
    pub effective_seed: u64,
    pub n_potential: u32,
    pub n_target: u32,
    pub secure_edges: usize,
    pub path_keys: usize,
    pub rounds: Vec<RoundMetrics>,
    pub completed_rounds: u32,
    pub aborted_rounds: u32,
    pub avg_transmissions: f64,
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Every completed round matched its oracle bit-exactly.
    pub oracle_equal: bool,
    pub transcript_hash: String,
    #[serde(skip)]
    pub final_model: ParameterVector,
    #[serde(skip)]
    pub transcript_text: String,
    /// Keying discovery traffic from world building (challenge mode only).
    #[serde(skip)]
    pub challenges: Vec<Challenge>,
}

fn make_suite(name: &str) -> Box<dyn CipherSuite> {
    match name {
        "plain" => Box::new(PlainSuite),
        _ => Box::new(AeadSuite),
    }
}

fn protocol_config(spec: &ProtocolSpec, faults: FaultPlan) -> ProtocolConfig {
    ProtocolConfig {
        freshness_window: spec.freshness_window,
        aggregation_time: spec.aggregation_time,
        masking: spec.masking,
        shortcut_return: spec.shortcut_return,
        noise_generator: 0,
        deposit: spec.deposit,
        faults,
    }
}

/// Execute the full scenario: build the world, run every round, compare each
/// against the direct-averaging oracle, and collect metrics.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<ScenarioOutcome> {
    let world = build_world(cfg)?;
    let params = cfg.fixed_params();
    let target_ids: Vec<u32> = world.targets.iter().copied().collect();
    let task_index: BTreeMap<u32, usize> =
        target_ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();

    let mut sim = Simulation::new(
        world.secure.clone(),
        world.comm_keys.clone(),
        make_suite(&cfg.protocol.cipher_suite),
        protocol_config(&cfg.protocol, FaultPlan::default()),
        world.effective_seed,
    );
    sim.server_adjacent = world.server_adjacent.clone();

    let mut drop_rng = ChaCha20Rng::seed_from_u64(world.effective_seed ^ 0x6472_6f70);
    let mut global = ParameterVector::zeros(cfg.task.dim, params);
    let initial_loss = world.task.global_loss(&global);
    let mut rounds = Vec::new();
    let mut oracle_equal = true;

    for round in 0..cfg.protocol.rounds {
        // schedule this round's dropouts among non-leader-eligible targets
        let mut droppable: Vec<u32> = world
            .targets
            .difference(&world.server_adjacent)
            .copied()
            .collect();
        droppable.shuffle(&mut drop_rng);
        let round_start = sim.clock;
        let horizon = if cfg.protocol.aggregation_time == 0 {
            4 * world.targets.len() as u64
        } else {
            cfg.protocol.aggregation_time
        };
        for &id in droppable.iter().take(cfg.dropout.count as usize) {
            sim.clients.get_mut(&id).unwrap().dropout_tick =
                Some(round_start + drop_rng.gen_range(1..horizon.max(2)));
        }

        // local training on the current global model
        let mut locals = BTreeMap::new();
        let mut updates = BTreeMap::new();
        for &id in &target_ids {
            if !sim.clients[&id].alive {
                continue;
            }
            let i = task_index[&id];
            let m = train_local(&world.task, i, &global, cfg.task.epochs, cfg.task.learning_rate)
                .ok_or_else(|| Error::Config(format!("target {id} has no training data")))?;
            let weight = world.task.clients[i].sample_count();
            updates.insert(id, encode(&local_update(&m, &global)?, weight));
            locals.insert(id, m);
        }

        let mut report = sim.run_round(&updates, &global, vec![]);
        if report.aborted.is_some() {
            // one retry with the dead clients out of the round
            let survivors: BTreeMap<u32, EncodedUpdate> = updates
                .iter()
                .filter(|(id, _)| sim.clients[id].alive)
                .map(|(&id, u)| (id, u.clone()))
                .collect();
            if !survivors.is_empty() {
                let retry = sim.run_round(&survivors, &global, vec![]);
                if retry.aborted.is_none() {
                    report = retry;
                }
            }
        }

        let round_oracle_equal = match (&report.aborted, &report.new_global) {
            (None, Some(new_global)) => {
                let picked: Vec<ParameterVector> =
                    report.aggregated.iter().map(|id| locals[id].clone()).collect();
                let weights: Vec<u64> =
                    report.aggregated.iter().map(|id| updates[id].weight).collect();
                let oracle = fedavg_reference(&picked, &weights)?;
                let equal = *new_global == oracle;
                global = new_global.clone();
                equal
            }
            _ => true, // aborted rounds leave the model untouched
        };
        oracle_equal &= round_oracle_equal;

        rounds.push(RoundMetrics {
            round,
            leader: report.leader,
            transmissions: report.transmissions,
            aggregated: report.aggregated.len(),
            dropouts: report.dropouts,
            aborted: report.aborted.clone(),
            loss: world.task.global_loss(&global),
            oracle_equal: round_oracle_equal,
        });

        // dropped clients recover between rounds
        for client in sim.clients.values_mut() {
            client.alive = true;
            client.dropout_tick = None;
        }
        sim.clock += 1; // round boundary
    }

    let completed: Vec<&RoundMetrics> = rounds.iter().filter(|r| r.aborted.is_none()).collect();
    let avg_transmissions = if completed.is_empty() {
        0.0
    } else {
        completed.iter().map(|r| r.transmissions as f64).sum::<f64>() / completed.len() as f64
    };
    Ok(ScenarioOutcome {
        effective_seed: world.effective_seed,
        n_potential: cfg.topology.n_potential,
        n_target: cfg.protocol.n_target,
        secure_edges: world.comm_keys.len(),
        path_keys: world.path_key_pairs.len(),
        completed_rounds: completed.len() as u32,
        aborted_rounds: (rounds.len() - completed.len()) as u32,
        avg_transmissions,
        initial_loss,
        final_loss: rounds.last().map(|r| r.loss).unwrap_or(initial_loss),
        oracle_equal,
        transcript_hash: sim.transcript.hash(),
        final_model: global,
        transcript_text: sim.transcript.to_text(),
        challenges: world.challenges,
        rounds,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct ConnectivityRow {
    pub pool_size: u32,
    pub ring_size: usize,
    pub analytic_p: f64,
    pub empirical_p: f64,
    pub connected_fraction: f64,
}

/// Analytic vs empirical shared-key probability, plus the fraction of
/// G(n, analytic_p) graphs that come out connected.
pub fn run_connectivity_sweep(
    pool_sizes: &[u32],
    ring_sizes: &[usize],
    n: u32,
    trials: u32,
    seed: u64,
) -> Result<Vec<ConnectivityRow>> {
    let mut rows = Vec::new();
    for &pool_size in pool_sizes {
        for &ring_size in ring_sizes {
            let analytic = shared_key_probability(pool_size as u64, ring_size as u64)?;
            let pool = generate_pool(pool_size, seed)?;
            let mut overlaps = 0u32;
            for t in 0..trials {
                let a = draw_ring(&pool, 0, ring_size as u32, seed ^ (2 * t as u64 + 1))?;
                let b = draw_ring(&pool, 1, ring_size as u32, seed ^ (2 * t as u64 + 2))?;
                if !a.intersection(&b).is_empty() {
                    overlaps += 1;
                }
            }
            let empirical = overlaps as f64 / trials.max(1) as f64;
            let mut connected = 0u32;
            if analytic > 0.0 {
                for t in 0..trials {
                    let g = generate_random_graph(n, analytic, seed ^ (0x1000 + t as u64))?;
                    if is_connected(&g) {
                        connected += 1;
                    }
                }
            }
            rows.push(ConnectivityRow {
                pool_size,
                ring_size,
                analytic_p: analytic,
                empirical_p: empirical,
                connected_fraction: connected as f64 / trials.max(1) as f64,
            });
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, Serialize)]
pub struct DropoutRow {
    pub dropouts: u32,
    pub repetitions: u32,
    pub completed_rounds: u32,
    pub total_rounds: u32,
    pub avg_transmissions: f64,
    /// L2 distance between the final model and the survivor-sum oracle,
    /// averaged over repetitions. Zero when every round is bit-exact.
    pub avg_model_distance: f64,
}

/// Dropout series: the base scenario re-run at each dropout count, averaged
/// over `repetitions` independent seeds (fanned out across threads).
pub fn run_dropout_series(
    base: &ScenarioConfig,
    counts: &[u32],
    repetitions: u32,
) -> Result<Vec<DropoutRow>> {
    let mut rows = Vec::new();
    for &count in counts {
        let mut cfg = base.clone();
        cfg.dropout.count = count;
        let outcomes: Vec<Result<ScenarioOutcome>> = std::thread::scope(|scope| {
            let handles: Vec<_> = (0..repetitions)
                .map(|rep| {
                    let mut rep_cfg = cfg.clone();
                    rep_cfg.seed = base.seed.wrapping_add(1000 * rep as u64);
                    scope.spawn(move || run_scenario(&rep_cfg))
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
        });
        let mut completed = 0u32;
        let mut total = 0u32;
        let mut transmissions = Vec::new();
        let mut distance_sum = 0.0;
        for outcome in outcomes {
            let outcome = outcome?;
            completed += outcome.completed_rounds;
            total += outcome.completed_rounds + outcome.aborted_rounds;
            transmissions.push(outcome.avg_transmissions);
            // bit-exact oracle match means zero distance by construction;
            // report the actual distance so a regression shows up as a number
            distance_sum += if outcome.oracle_equal { 0.0 } else { f64::INFINITY };
        }
        rows.push(DropoutRow {
            dropouts: count,
            repetitions,
            completed_rounds: completed,
            total_rounds: total,
            avg_transmissions: transmissions.iter().sum::<f64>()
                / transmissions.len().max(1) as f64,
            avg_model_distance: distance_sum / repetitions.max(1) as f64,
        });
    }
    Ok(rows)
}

/// Run the protocol and the plain averaging oracle side by side; Ok(()) only
/// when every completed round matched bit-exactly.
pub fn verify_oracle(cfg: &ScenarioConfig) -> Result<ScenarioOutcome> {
    let outcome = run_scenario(cfg)?;
    if !outcome.oracle_equal {
        let bad: Vec<u32> = outcome
            .rounds
            .iter()
            .filter(|r| !r.oracle_equal)
            .map(|r| r.round)
            .collect();
        return Err(Error::Config(format!(
            "protocol result diverged from the averaging oracle in rounds {bad:?}"
        )));
    }
    Ok(outcome)
}

/// Serialize exchanged discovery challenges: issuer u32 LE, ring index
/// u16 LE, ciphertext length u32 LE, ciphertext. Replayable for audits.
pub fn challenges_to_bytes(challenges: &[Challenge]) -> Vec<u8> {
    let mut out = Vec::new();
    for c in challenges {
        out.extend_from_slice(&c.issuer.to_le_bytes());
        out.extend_from_slice(&c.index.to_le_bytes());
        out.extend_from_slice(&(c.ciphertext.len() as u32).to_le_bytes());
        out.extend_from_slice(&c.ciphertext);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> ScenarioConfig {
        ScenarioConfig {
            seed: 7,
            topology: TopologyConfig {
                n_potential: 24,
                edge_probability: Some(0.35),
                connectivity_confidence: default_confidence(),
            },
            keying: KeyingConfig {
                pool_size: 120,
                ring_size: 30,
                threshold_e: 0,
                path_key_candidates: 4,
                discovery: "direct".into(),
            },
            protocol: ProtocolSpec {
                n_target: 12,
                rounds: 3,
                aggregation_time: 0,
                freshness_window: 10,
                width: 32,
                scale: 16,
                masking: true,
                shortcut_return: false,
                deposit: 1,
                cipher_suite: "plain".into(),
            },
            task: TaskConfig::default(),
            dropout: DropoutConfig::default(),
            output_dir: None,
        }
    }

    #[test]
    fn config_validation_catches_bad_fields() {
        let mut cfg = small_config();
        cfg.protocol.n_target = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = small_config();
        cfg.keying.ring_size = 100;
        assert!(cfg.validate().is_err());
        let mut cfg = small_config();
        cfg.dropout.count = 12;
        assert!(cfg.validate().is_err());
        let mut cfg = small_config();
        cfg.keying.discovery = "psychic".into();
        assert!(cfg.validate().is_err());
        assert!(small_config().validate().is_ok());
    }

    #[test]
    fn build_world_produces_connected_keyed_targets() {
        let world = build_world(&small_config()).unwrap();
        assert_eq!(world.targets.len(), 12);
        assert!(is_connected_subset(&world.secure, &world.targets));
        assert!(!world.server_adjacent.is_empty());
        assert!(world.server_adjacent.is_subset(&world.targets));
        // every secure edge is also a physical edge
        for (a, b) in world.secure.edges() {
            assert!(world.physical.has_edge(a, b));
        }
    }

    #[test]
    fn challenge_and_direct_discovery_agree() {
        let mut cfg = small_config();
        cfg.topology.n_potential = 10;
        cfg.protocol.n_target = 5;
        let direct = build_world(&cfg).unwrap();
        cfg.keying.discovery = "challenge".into();
        let challenged = build_world(&cfg).unwrap();
        assert_eq!(direct.effective_seed, challenged.effective_seed);
        let direct_keys: Vec<_> =
            direct.comm_keys.iter().map(|(p, k)| (*p, k.key)).collect();
        let challenged_keys: Vec<_> =
            challenged.comm_keys.iter().map(|(p, k)| (*p, k.key)).collect();
        assert_eq!(direct_keys, challenged_keys);
        assert!(!challenged.challenges.is_empty());
        assert!(direct.challenges.is_empty());
    }

    #[test]
    fn scenario_runs_and_matches_oracle() {
        let outcome = run_scenario(&small_config()).unwrap();
        assert_eq!(outcome.completed_rounds, 3);
        assert!(outcome.oracle_equal);
        assert!(outcome.final_loss < outcome.initial_loss);
        assert!(outcome.avg_transmissions <= (2 * (12 - 1)) as f64);
    }

    #[test]
    fn zero_round_scenario_yields_summary_only() {
        let mut cfg = small_config();
        cfg.protocol.rounds = 0;
        let outcome = run_scenario(&cfg).unwrap();
        assert!(outcome.rounds.is_empty());
        assert_eq!(outcome.final_loss, outcome.initial_loss);
        assert_eq!(outcome.transcript_text, "\n");
    }

    #[test]
    fn same_seed_same_transcript_hash() {
        let a = run_scenario(&small_config()).unwrap();
        let b = run_scenario(&small_config()).unwrap();
        assert_eq!(a.transcript_hash, b.transcript_hash);
        assert_eq!(a.final_model, b.final_model);
        let mut other = small_config();
        other.seed += 1;
        let c = run_scenario(&other).unwrap();
        assert_ne!(a.transcript_hash, c.transcript_hash);
    }

    #[test]
    fn dropouts_still_match_survivor_oracle() {
        let mut cfg = small_config();
        cfg.dropout.count = 3;
        let outcome = run_scenario(&cfg).unwrap();
        assert!(outcome.oracle_equal);
        assert!(outcome.completed_rounds > 0);
    }

    #[test]
    fn connectivity_sweep_rows_behave() {
        let rows = run_connectivity_sweep(&[120], &[0, 10, 20], 20, 60, 5).unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[0].analytic_p, 0.0);
        assert_eq!(rows[0].empirical_p, 0.0);
        assert!(rows[1].analytic_p < rows[2].analytic_p, "monotone in ring size");
        for r in &rows {
            assert!((r.analytic_p - r.empirical_p).abs() < 0.12);
        }
    }

    #[test]
    fn dropout_series_covers_each_count() {
        let mut cfg = small_config();
        cfg.protocol.rounds = 2;
        let rows = run_dropout_series(&cfg, &[0, 2], 3).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].dropouts, 0);
        assert_eq!(rows[0].avg_model_distance, 0.0);
        assert_eq!(rows[1].avg_model_distance, 0.0);
        assert!(rows.iter().all(|r| r.completed_rounds > 0));
    }

    #[test]
    fn verify_oracle_passes_on_honest_run() {
        assert!(verify_oracle(&small_config()).is_ok());
    }

    #[test]
    fn challenge_log_roundtrip_layout() {
        let mut cfg = small_config();
        cfg.topology.n_potential = 8;
        cfg.protocol.n_target = 4;
        cfg.keying.discovery = "challenge".into();
        let world = build_world(&cfg).unwrap();
        let bytes = challenges_to_bytes(&world.challenges);
        // first record: issuer, index, length-prefixed ciphertext
        let first = &world.challenges[0];
        assert_eq!(&bytes[0..4], &first.issuer.to_le_bytes());
        assert_eq!(&bytes[4..6], &first.index.to_le_bytes());
        let len = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
        assert_eq!(len, first.ciphertext.len());
    }
}
