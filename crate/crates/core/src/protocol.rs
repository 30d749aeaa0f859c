//! The aggregation protocol state machines and the deterministic
//! discrete-event simulator that runs them.
//!
//! One round: a server-adjacent leader masks its encoded update with noise,
//! the masked running sum walks a depth-first route over the keyed overlay
//! (one hop = one tick), every target adds its own update exactly once,
//! backtracking returns the payload along the stack, and the leader unmasks
//! and uploads. Every hop is an authenticated envelope; every action lands
//! in a broadcast ledger; dropouts, late joins, and deadline pressure are
//! handled by the complementary rules.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

use crate::crypto::{
    generate_noise, sha256_hex, sign_envelope, verify_envelope, CipherSuite, ClientKeypair,
    SignedEnvelope, SymmetricKey,
};
use crate::error::{Error, Result};
use crate::fixed::ParameterVector;
use crate::keying::CommunicationKey;
use crate::model::{global_update, EncodedUpdate};
use crate::topology::Graph;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Potential,
    Target,
}

/// Plaintext view a client gained during a round; audited for leaks.
#[derive(Debug, Clone)]
pub struct Observation {
    pub tick: u64,
    pub values: Vec<u64>,
}

#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: u32,
    pub role: Role,
    pub update: Option<EncodedUpdate>,
    pub dropout_tick: Option<u64>,
    pub alive: bool,
    pub deposit: i64,
    pub flagged_malicious: bool,
    pub observed: Vec<Observation>,
}

impl ClientState {
    pub fn new(id: u32, role: Role) -> Self {
        ClientState {
            id,
            role,
            update: None,
            dropout_tick: None,
            alive: true,
            deposit: 0,
            flagged_malicious: false,
            observed: Vec::new(),
        }
    }
}

/// Append-only neighborhood broadcast ledger entry. Propagation is modeled
/// as reaching every live client by the next tick.
#[derive(Debug, Clone)]
pub struct BroadcastRecord {
    pub tick: u64,
    pub actor: u32,
    pub action: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransferKind {
    Forward,
    Backtrack,
    Resend,
    ShortcutReturn,
}

/// One delivered payload transfer, with the masked plaintext retained for
/// transcript audits (the simulator is the omniscient observer; real peers
/// only ever see their own decryptions).
#[derive(Debug, Clone)]
pub struct TransferRecord {
    pub tick: u64,
    pub from: u32,
    pub to: u32,
    pub kind: TransferKind,
    /// Did the recipient add its own update on receipt?
    pub aggregated: bool,
    /// Masked running sum as transmitted (raw residues, weight slot last).
    pub plain: Vec<u64>,
}

#[derive(Debug, Default)]
pub struct Transcript {
    pub lines: Vec<String>,
    pub transfers: Vec<TransferRecord>,
}

impl Transcript {
    pub fn record(&mut self, tick: u64, actor: u32, action: &str, payload_hash: &str) {
        self.lines.push(format!("{tick} {actor} {action} {payload_hash}"));
    }

    /// Hash of the whole transcript; a pure function of config + seed.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for line in &self.lines {
            h.update(line.as_bytes());
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }

    pub fn to_text(&self) -> String {
        let mut out = self.lines.join("\n");
        out.push('\n');
        out
    }
}

/// Deterministic fault injection for the adversarial suites.
#[derive(Debug, Clone, Default)]
pub struct FaultPlan {
    /// Flip a ciphertext bit in transit on this (0-based) transmission.
    pub tamper_transmission: Option<u64>,
    /// Tamper the retry as well, forcing the malicious flag.
    pub tamper_persistent: bool,
}

#[derive(Debug, Clone)]
pub struct ProtocolConfig {
    /// Envelope/broadcast timestamp freshness window, in ticks.
    pub freshness_window: u64,
    /// Stipulated aggregation time T; 0 means the 4n default.
    pub aggregation_time: u64,
    /// Leader noise masking on/off (off only for leak-audit positive controls).
    pub masking: bool,
    /// Return the final sum straight to the leader when adjacent instead of
    /// unwinding the stack.
    pub shortcut_return: bool,
    pub noise_generator: u32,
    /// Deposit units collected from every participant.
    pub deposit: i64,
    pub faults: FaultPlan,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            freshness_window: 10,
            aggregation_time: 0,
            masking: true,
            shortcut_return: false,
            noise_generator: 0,
            deposit: 1,
            faults: FaultPlan::default(),
        }
    }
}

/// Where the DFS goes next from the client currently holding the payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NextHop {
    Forward(u32),
    Backtrack,
    Done,
}

/// Live DFS route state for one aggregation round.
#[derive(Debug, Clone)]
pub struct AggregationState {
    /// DFS path from the leader; last element holds the payload.
    pub stack: Vec<u32>,
    /// Per stack entry: (masked running sum, aggregated set) as of the last
    /// time that client held the payload. Restored on holder dropout.
    pub snapshots: Vec<(EncodedUpdate, BTreeSet<u32>)>,
    pub visited: BTreeSet<u32>,
    pub targets: BTreeSet<u32>,
    /// Targets excluded from routing (dropped or unreachable).
    pub excluded: BTreeSet<u32>,
    pub deadline: u64,
    pub forced_backtrack_tick: u64,
    pub join_cutoff: usize,
}

impl AggregationState {
    pub fn running(&self) -> &EncodedUpdate {
        &self.snapshots.last().expect("non-empty route stack").0
    }

    /// New-join requests are refused once half the targets have finished.
    pub fn joins_closed(&self) -> bool {
        self.visited.len() >= self.join_cutoff
    }
}

/// Lowest-id unvisited target neighbor, else backtrack, else done. Forward
/// exploration stops once the forced-backtrack deadline passed, and earlier
/// if going one hop deeper would leave too little time to unwind the stack
/// back to the leader by the stipulated aggregation time.
pub fn next_hop(current: u32, state: &AggregationState, g: &Graph, now: u64) -> NextHop {
    debug_assert_eq!(state.stack.last(), Some(&current));
    let return_in_time = now + 1 + state.stack.len() as u64 <= state.deadline;
    if now < state.forced_backtrack_tick && return_in_time {
        let candidate = g
            .neighbors(current)
            .into_iter()
            .find(|v| {
                state.targets.contains(v)
                    && !state.visited.contains(v)
                    && !state.excluded.contains(v)
            });
        if let Some(v) = candidate {
            return NextHop::Forward(v);
        }
    }
    if state.stack.len() > 1 {
        NextHop::Backtrack
    } else {
        NextHop::Done
    }
}

/// Prefer a candidate that completed the protocol before; uniform otherwise.
pub fn select_leader(
    targets: &BTreeSet<u32>,
    server_adjacent: &BTreeSet<u32>,
    history: &BTreeSet<u32>,
    rng: &mut ChaCha20Rng,
) -> Result<u32> {
    let candidates: Vec<u32> = targets.intersection(server_adjacent).copied().collect();
    if candidates.is_empty() {
        return Err(Error::AbortRound("no server-adjacent target available as leader".into()));
    }
    let preferred: Vec<u32> =
        candidates.iter().copied().filter(|c| history.contains(c)).collect();
    let pick = if preferred.is_empty() { &candidates } else { &preferred };
    Ok(pick[rng.gen_range(0..pick.len())])
}

/// What a completed (or aborted) round produced.
#[derive(Debug)]
pub struct RoundReport {
    pub leader: u32,
    /// Unmasked aggregate as verified server-side; None when aborted.
    pub aggregate: Option<EncodedUpdate>,
    pub new_global: Option<ParameterVector>,
    pub transmissions: u64,
    pub aggregated: BTreeSet<u32>,
    pub dropouts: u32,
    pub admitted_joins: u32,
    pub rejected_joins: u32,
    pub aborted: Option<String>,
}

/// A client asking to join the round mid-flight.
#[derive(Debug, Clone)]
pub struct JoinRequest {
    pub id: u32,
    pub tick: u64,
    /// Key establishment already completed?
    pub keyed: bool,
    /// Encoded update the joiner would contribute if admitted.
    pub update: Option<EncodedUpdate>,
}

/// Single-threaded deterministic simulator owning all per-client state.
pub struct Simulation {
    /// Secure overlay: only edges with an established communication key.
    pub graph: Graph,
    pub clients: BTreeMap<u32, ClientState>,
    pub comm_keys: BTreeMap<(u32, u32), CommunicationKey>,
    pub keypairs: BTreeMap<u32, ClientKeypair>,
    pub server_adjacent: BTreeSet<u32>,
    pub history: BTreeSet<u32>,
    pub ledger: Vec<BroadcastRecord>,
    pub transcript: Transcript,
    pub clock: u64,
    pub cfg: ProtocolConfig,
    suite: Box<dyn CipherSuite>,
    seq: u64,
    rng: ChaCha20Rng,
    /// Link key between the current leader and the server.
    server_key: SymmetricKey,
}

/// Server-side identity sits outside the client id space.
pub const SERVER_ID: u32 = u32::MAX;

impl Simulation {
    pub fn new(
        graph: Graph,
        comm_keys: BTreeMap<(u32, u32), CommunicationKey>,
        suite: Box<dyn CipherSuite>,
        cfg: ProtocolConfig,
        seed: u64,
    ) -> Self {
        let mut clients = BTreeMap::new();
        let mut keypairs = BTreeMap::new();
        for id in 0..graph.node_count() {
            clients.insert(id, ClientState::new(id, Role::Potential));
            keypairs.insert(id, crate::crypto::generate_keypair(seed ^ ((id as u64) << 20)));
        }
        Simulation {
            graph,
            clients,
            comm_keys,
            keypairs,
            server_adjacent: BTreeSet::new(),
            history: BTreeSet::new(),
            ledger: Vec::new(),
            transcript: Transcript::default(),
            clock: 0,
            cfg,
            suite,
            seq: 0,
            rng: ChaCha20Rng::seed_from_u64(seed ^ 0xa5a5_5a5a),
            server_key: {
                let mut rng = ChaCha20Rng::seed_from_u64(seed ^ (1u64 << 63));
                let mut key = [0u8; 16];
                rand::RngCore::fill_bytes(&mut rng, &mut key);
                key
            },
        }
    }

    pub fn comm_key(&self, a: u32, b: u32) -> Option<&CommunicationKey> {
        self.comm_keys.get(&(a.min(b), a.max(b)))
    }

    fn broadcast(&mut self, actor: u32, action: String) {
        self.transcript.record(self.clock, actor, &action, "-");
        self.ledger.push(BroadcastRecord { tick: self.clock, actor, action });
    }

    fn observe(&mut self, id: u32, values: Vec<u64>) {
        if let Some(c) = self.clients.get_mut(&id) {
            c.observed.push(Observation { tick: self.clock, values });
        }
    }

    /// Dropouts take effect when the client is off the route stack or is the
    /// payload holder itself; a client a pending backtrack depends on keeps
    /// running until it leaves the stack.
    fn apply_dropouts(&mut self, state: &mut AggregationState, dropped_now: &mut Vec<u32>) {
        let stack_body: BTreeSet<u32> =
            state.stack[..state.stack.len().saturating_sub(1)].iter().copied().collect();
        let mut newly_dead = Vec::new();
        for client in self.clients.values_mut() {
            if !client.alive {
                continue;
            }
            if let Some(t) = client.dropout_tick {
                if t <= self.clock && !stack_body.contains(&client.id) {
                    client.alive = false;
                    newly_dead.push(client.id);
                }
            }
        }
        for id in newly_dead {
            state.excluded.insert(id);
            self.broadcast(id, "dropout".into());
            dropped_now.push(id);
        }
    }

    fn process_joins(
        &mut self,
        state: &mut AggregationState,
        joins: &mut Vec<JoinRequest>,
        report: &mut RoundReport,
    ) {
        let mut remaining = Vec::new();
        for join in joins.drain(..) {
            if join.tick > self.clock {
                remaining.push(join);
                continue;
            }
            if !join.keyed {
                self.broadcast(join.id, "join-rejected key-establishment-required".into());
                report.rejected_joins += 1;
            } else if state.joins_closed() {
                self.broadcast(join.id, "join-rejected aggregation-half-complete".into());
                report.rejected_joins += 1;
            } else {
                state.targets.insert(join.id);
                if let Some(c) = self.clients.get_mut(&join.id) {
                    c.role = Role::Target;
                    c.update = join.update.clone();
                    c.deposit -= self.cfg.deposit;
                }
                self.broadcast(join.id, "join-accepted".into());
                report.admitted_joins += 1;
            }
        }
        *joins = remaining;
    }

    /// Encrypt, sign, transmit, verify, decrypt: one hop of the payload.
    /// Returns the plaintext accepted by the recipient.
    fn transmit(
        &mut self,
        from: u32,
        to: u32,
        payload: &EncodedUpdate,
        kind: TransferKind,
        transmissions: &mut u64,
    ) -> Result<EncodedUpdate> {
        let key = self
            .comm_key(from, to)
            .ok_or_else(|| Error::AbortRound(format!("no communication key for ({from},{to})")))?
            .key;
        // intent broadcast with timestamp tau, then the signed envelope
        let tau = self.clock;
        self.broadcast(from, format!("intent transmit-to {to}"));
        let tamper_here = self.cfg.faults.tamper_transmission == Some(*transmissions);
        let mut attempt = 0;
        loop {
            let plaintext = payload.to_bytes();
            let ct = self.suite.encrypt(&key, self.seq, plaintext.as_slice());
            self.seq += 1;
            let env = sign_envelope(from, ct, self.clock, &self.keypairs[&from].signing);
            let mut bytes = env.to_bytes();
            let tampered = tamper_here && (attempt == 0 || self.cfg.faults.tamper_persistent);
            if tampered {
                // flip one ciphertext bit in transit
                bytes[20] ^= 1;
            }
            self.clock += 1;
            *transmissions += 1;

            let received = SignedEnvelope::from_bytes(&bytes)
                .map_err(|e| Error::AuthenticationFailure(e.to_string()));
            let verified = received.and_then(|env| {
                let pk = self
                    .keypairs
                    .get(&env.sender)
                    .map(|kp| kp.verifying)
                    .ok_or_else(|| Error::Forgery(format!("unknown sender {}", env.sender)))?;
                verify_envelope(&env, &pk, self.clock, self.cfg.freshness_window)?;
                if self.clock.abs_diff(tau) > self.cfg.freshness_window {
                    return Err(Error::Replay {
                        message: tau,
                        now: self.clock,
                        window: self.cfg.freshness_window,
                    });
                }
                let pt = self.suite.decrypt(&key, &env.ciphertext)?;
                EncodedUpdate::from_bytes(&pt)
            });

            match verified {
                Ok(plain) => {
                    if tampered {
                        // should be unreachable: a tampered envelope must not verify
                        return Err(Error::AuthenticationFailure(
                            "tampered envelope accepted".into(),
                        ));
                    }
                    self.transcript.record(
                        self.clock,
                        from,
                        &format!("{} to {to}", kind_name(kind)),
                        &sha256_hex(&bytes),
                    );
                    self.observe(to, plain.to_raw());
                    return Ok(plain);
                }
                Err(err) => {
                    self.broadcast(to, format!("verification-failed from {from}: {err}"));
                    if attempt >= 1 {
                        if let Some(c) = self.clients.get_mut(&from) {
                            c.flagged_malicious = true;
                        }
                        self.broadcast(to, format!("flagged-malicious {from}"));
                        self.broadcast(to, format!("revocation-trigger {from}"));
                        return Err(Error::AuthenticationFailure(format!(
                            "sender {from} flagged malicious after failed retry"
                        )));
                    }
                    attempt += 1;
                    // recipient waits for the correct data; sender retries once
                }
            }
        }
    }

    /// Run one aggregation round over the given per-target encoded updates.
    pub fn run_round(
        &mut self,
        updates: &BTreeMap<u32, EncodedUpdate>,
        global: &ParameterVector,
        joins: Vec<JoinRequest>,
    ) -> RoundReport {
        match self.run_round_inner(updates, global, joins) {
            Ok(report) => report,
            Err(err) => RoundReport {
                leader: u32::MAX,
                aggregate: None,
                new_global: None,
                transmissions: 0,
                aggregated: BTreeSet::new(),
                dropouts: 0,
                admitted_joins: 0,
                rejected_joins: 0,
                aborted: Some(err.to_string()),
            },
        }
    }

    fn run_round_inner(
        &mut self,
        updates: &BTreeMap<u32, EncodedUpdate>,
        global: &ParameterVector,
        mut joins: Vec<JoinRequest>,
    ) -> Result<RoundReport> {
        let round_start = self.clock;
        let targets: BTreeSet<u32> = updates.keys().copied().collect();
        if targets.is_empty() {
            return Err(Error::AbortRound("no target clients".into()));
        }
        for (&id, update) in updates {
            let client = self
                .clients
                .get_mut(&id)
                .ok_or_else(|| Error::Config(format!("unknown target client {id}")))?;
            client.role = Role::Target;
            client.update = Some(update.clone());
            client.deposit -= self.cfg.deposit;
        }

        let leader = select_leader(&targets, &self.server_adjacent, &self.history, &mut self.rng)?;
        self.broadcast(leader, "leader-selected".into());

        let t_total = if self.cfg.aggregation_time == 0 {
            4 * targets.len() as u64
        } else {
            self.cfg.aggregation_time
        };
        let dim = updates[&leader].dim();
        let params = updates[&leader].params();
        let noise = if self.cfg.masking {
            Some(generate_noise(dim + 1, self.cfg.noise_generator, self.rng.gen(), params)?)
        } else {
            None
        };

        let x0 = updates[&leader].clone();
        let masked = match &noise {
            Some(s) => x0.add_noise(s)?,
            None => x0,
        };
        if let Some(s) = &noise {
            // the leader knows its own mask
            self.observe(leader, s.values.clone());
        }
        let mut state = AggregationState {
            stack: vec![leader],
            snapshots: vec![(masked, BTreeSet::from([leader]))],
            visited: BTreeSet::from([leader]),
            targets: targets.clone(),
            excluded: BTreeSet::new(),
            deadline: round_start + t_total,
            forced_backtrack_tick: round_start + (2 * t_total).div_ceil(3),
            join_cutoff: targets.len().div_ceil(2),
        };
        self.broadcast(leader, "aggregate-own-update".into());

        let mut report = RoundReport {
            leader,
            aggregate: None,
            new_global: None,
            transmissions: 0,
            aggregated: BTreeSet::new(),
            dropouts: 0,
            admitted_joins: 0,
            rejected_joins: 0,
            aborted: None,
        };

        loop {
            let mut dropped_now = Vec::new();
            self.apply_dropouts(&mut state, &mut dropped_now);
            report.dropouts += dropped_now.len() as u32;
            self.process_joins(&mut state, &mut joins, &mut report);

            if !self.clients[&leader].alive {
                return Err(Error::AbortRound("leader dropped out".into()));
            }
            // payload holder dropped: upstream detects the missing broadcast
            // (2 ticks) and resends its last masked sum to a new hop.
            // Contributions recorded only in the lost payload copy are out
            // for this round; the route does not revisit their owners.
            while state.stack.len() > 1 && !self.clients[state.stack.last().unwrap()].alive {
                let dead = state.stack.pop().unwrap();
                state.snapshots.pop();
                let surviving = state.snapshots.last().unwrap().1.clone();
                for lost in state.visited.difference(&surviving) {
                    state.excluded.insert(*lost);
                }
                state.visited = surviving;
                self.clock += 2;
                let upstream = *state.stack.last().unwrap();
                self.broadcast(upstream, format!("dropout-detected {dead}"));
            }
            let current = *state.stack.last().unwrap();
            let hop = next_hop(current, &state, &self.graph, self.clock);
            if hop == NextHop::Done {
                break;
            }
            if self.clock >= state.deadline {
                return Err(Error::AbortRound(
                    "stipulated aggregation time exceeded before the leader got the result".into(),
                ));
            }
            match hop {
                NextHop::Forward(next) => {
                    let running = state.running().clone();
                    let plain = self.transmit(
                        current,
                        next,
                        &running,
                        TransferKind::Forward,
                        &mut report.transmissions,
                    )?;
                    // recipient aggregates its own update exactly once
                    let own = self.clients[&next]
                        .update
                        .clone()
                        .ok_or_else(|| Error::Config(format!("target {next} has no update")))?;
                    let new_running = plain.add(&own)?;
                    state.visited.insert(next);
                    state.stack.push(next);
                    let mut agg_set = state.snapshots.last().unwrap().1.clone();
                    agg_set.insert(next);
                    state.snapshots.push((new_running, agg_set));
                    // keep every snapshot's aggregate set consistent with visited
                    state.snapshots.last_mut().unwrap().1 = state.visited.clone();
                    self.transcript.transfers.push(TransferRecord {
                        tick: self.clock,
                        from: current,
                        to: next,
                        kind: TransferKind::Forward,
                        aggregated: true,
                        plain: plain.to_raw(),
                    });
                    self.broadcast(next, "aggregate-own-update".into());
                }
                NextHop::Backtrack => {
                    let running = state.running().clone();
                    let unvisited_left = state
                        .targets
                        .iter()
                        .any(|t| !state.visited.contains(t) && !state.excluded.contains(t));
                    let (dest, kind) = if self.cfg.shortcut_return
                        && !unvisited_left
                        && current != leader
                        && self.graph.has_edge(current, leader)
                        && self.comm_key(current, leader).is_some()
                    {
                        (leader, TransferKind::ShortcutReturn)
                    } else {
                        (state.stack[state.stack.len() - 2], TransferKind::Backtrack)
                    };
                    let plain =
                        self.transmit(current, dest, &running, kind, &mut report.transmissions)?;
                    self.transcript.transfers.push(TransferRecord {
                        tick: self.clock,
                        from: current,
                        to: dest,
                        kind,
                        aggregated: false,
                        plain: plain.to_raw(),
                    });
                    if kind == TransferKind::ShortcutReturn {
                        state.stack.truncate(1);
                        state.snapshots.truncate(1);
                    } else {
                        state.stack.pop();
                        state.snapshots.pop();
                    }
                    // relay: destination now holds the payload unchanged
                    *state.snapshots.last_mut().unwrap() = (plain, state.visited.clone());
                }
                NextHop::Done => break,
            }
        }

        // leader unmasks and uploads; the server verifies and decodes
        let masked_total = state.running().clone();
        let total = match &noise {
            Some(s) => masked_total.sub_noise(s)?,
            None => masked_total,
        };
        self.observe(leader, total.to_raw());
        let upload_ct = self.suite.encrypt(&self.server_key, self.seq, &total.to_bytes());
        self.seq += 1;
        let upload_env =
            sign_envelope(leader, upload_ct, self.clock, &self.keypairs[&leader].signing);
        // server side: verify under the leader's registered key, then decode
        verify_envelope(
            &upload_env,
            &self.keypairs[&leader].verifying,
            self.clock,
            self.cfg.freshness_window,
        )?;
        let server_view = EncodedUpdate::from_bytes(&self.suite.decrypt(&self.server_key, &upload_env.ciphertext)?)?;
        debug_assert_eq!(server_view, total);
        self.transcript.record(self.clock, leader, "upload to server", &sha256_hex(&upload_env.to_bytes()));
        self.broadcast(leader, "upload-aggregate".into());

        let new_global = global_update(&server_view, global)?;
        self.history.insert(leader);
        for &id in &state.visited {
            if let Some(c) = self.clients.get_mut(&id) {
                if !c.flagged_malicious {
                    c.deposit += self.cfg.deposit; // deposits returned after the round
                }
            }
        }
        report.aggregate = Some(total);
        report.new_global = Some(new_global);
        report.aggregated = state.visited;
        Ok(report)
    }
}

fn kind_name(kind: TransferKind) -> &'static str {
    match kind {
        TransferKind::Forward => "forward",
        TransferKind::Backtrack => "backtrack",
        TransferKind::Resend => "resend",
        TransferKind::ShortcutReturn => "shortcut-return",
    }
}
