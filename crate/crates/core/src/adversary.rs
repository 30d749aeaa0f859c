//! Adversary models against the aggregation protocol: the rational-collusion
//! deposit game, honest-but-curious transcript audits, transcript-arithmetic
//! collusion recovery, and byzantine claim checking against the broadcast
//! ledger.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::fixed::FixedParams;
use crate::model::EncodedUpdate;
use crate::protocol::{BroadcastRecord, Simulation, Transcript};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Strategy {
    Collude,
    Counter,
}

pub const STRATEGIES: [Strategy; 2] = [Strategy::Collude, Strategy::Counter];

/// Two-player symmetric game between potential colluders. `gain` is what a
/// successful collusion is worth to each party; `deposit` is what a detected
/// colluder forfeits to the party that countered.
#[derive(Debug, Clone, Copy)]
pub struct PayoffMatrix {
    pub gain: i64,
    pub deposit: i64,
}

impl PayoffMatrix {
    /// Row player's and column player's payoff for a strategy profile.
    pub fn payoff(&self, row: Strategy, col: Strategy) -> (i64, i64) {
        use Strategy::*;
        match (row, col) {
            (Collude, Collude) => (self.gain, self.gain),
            (Collude, Counter) => (-self.deposit, self.deposit),
            (Counter, Collude) => (self.deposit, -self.deposit),
            (Counter, Counter) => (0, 0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Equilibrium {
    pub profile: (Strategy, Strategy),
    /// False when some unilateral deviation is payoff-neutral.
    pub strict: bool,
}

/// Enumerate all pure-strategy Nash equilibria of the 2x2 game.
pub fn pure_nash_equilibria(m: &PayoffMatrix) -> Vec<Equilibrium> {
    let mut out = Vec::new();
    for row in STRATEGIES {
        for col in STRATEGIES {
            let (ra, ca) = m.payoff(row, col);
            let mut stable = true;
            let mut strict = true;
            for alt in STRATEGIES {
                if alt != row {
                    let (rd, _) = m.payoff(alt, col);
                    if rd > ra {
                        stable = false;
                    }
                    if rd >= ra {
                        strict = false;
                    }
                }
                if alt != col {
                    let (_, cd) = m.payoff(row, alt);
                    if cd > ca {
                        stable = false;
                    }
                    if cd >= ca {
                        strict = false;
                    }
                }
            }
            if stable {
                out.push(Equilibrium { profile: (row, col), strict });
            }
        }
    }
    out
}

/// A rational client counters whenever the deposit at stake covers the
/// collusion gain; ties resolve to countering (no upside to risk).
pub fn rational_strategy(m: &PayoffMatrix) -> Strategy {
    if m.deposit >= m.gain {
        Strategy::Counter
    } else {
        Strategy::Collude
    }
}

/// What two colluding route neighbors reconstruct about the client between
/// them.
#[derive(Debug, Clone)]
pub struct CollusionOutcome {
    pub victim: u32,
    /// (upstream accomplice, downstream accomplice).
    pub accomplices: (u32, u32),
    /// Recovered raw residues of the victim's encoded update, weight slot
    /// last. Exact: the leader's mask cancels in the difference.
    pub recovered: Vec<u64>,
}

/// Recover the victim's encoded update from the round transcript: the
/// plaintext it sent out minus the plaintext it received. Works regardless
/// of masking, which is exactly why the deposit game has to deter it.
pub fn execute_collusion(
    transcript: &Transcript,
    victim: u32,
    params: FixedParams,
) -> Result<CollusionOutcome> {
    let incoming = transcript
        .transfers
        .iter()
        .find(|t| t.to == victim && t.aggregated)
        .ok_or_else(|| {
            Error::AttackInfeasible(format!("client {victim} never aggregated on-route"))
        })?;
    let outgoing = transcript
        .transfers
        .iter()
        .find(|t| t.from == victim && t.tick >= incoming.tick)
        .ok_or_else(|| {
            Error::AttackInfeasible(format!("client {victim} never forwarded the payload"))
        })?;
    if incoming.plain.len() != outgoing.plain.len() {
        return Err(Error::Shape { left: outgoing.plain.len(), right: incoming.plain.len() });
    }
    let mask = params.mask();
    let recovered = outgoing
        .plain
        .iter()
        .zip(&incoming.plain)
        .map(|(o, i)| o.wrapping_sub(*i) & mask)
        .collect();
    Ok(CollusionOutcome {
        victim,
        accomplices: (incoming.from, outgoing.to),
        recovered,
    })
}

/// Collusion attempt gated by the deposit game: rational accomplices only go
/// through with it when the gain exceeds what they stand to forfeit.
pub fn attempt_collusion(
    transcript: &Transcript,
    victim: u32,
    params: FixedParams,
    m: &PayoffMatrix,
) -> Result<CollusionOutcome> {
    if rational_strategy(m) == Strategy::Counter {
        return Err(Error::AttackInfeasible(format!(
            "deposit {} covers collusion gain {}; rational clients counter",
            m.deposit, m.gain
        )));
    }
    execute_collusion(transcript, victim, params)
}

/// Detected collusion settles the game: each colluder forfeits the deposit,
/// which goes to the client that countered.
pub fn punish_colluders(sim: &mut Simulation, colluders: &[u32], counter: u32, m: &PayoffMatrix) {
    for &c in colluders {
        if let Some(client) = sim.clients.get_mut(&c) {
            client.deposit -= m.deposit;
            client.flagged_malicious = true;
        }
        if let Some(client) = sim.clients.get_mut(&counter) {
            client.deposit += m.deposit;
        }
    }
}

/// Honest-but-curious audit: (observer, victim) pairs where a client's
/// recorded plaintext views contain some other client's raw encoded update.
pub fn curious_observer_audit(
    sim: &Simulation,
    updates: &BTreeMap<u32, EncodedUpdate>,
) -> Vec<(u32, u32)> {
    let mut leaks = Vec::new();
    for (&observer, client) in &sim.clients {
        for (&victim, update) in updates {
            if victim == observer {
                continue;
            }
            let raw = update.to_raw();
            if client.observed.iter().any(|o| o.values == raw) {
                leaks.push((observer, victim));
            }
        }
    }
    leaks
}

/// A broadcast a byzantine client tries to slip into the round, e.g. falsely
/// accusing a live client of having dropped out.
#[derive(Debug, Clone)]
pub struct ByzantineClaim {
    pub accuser: u32,
    pub accused: u32,
    pub tick: u64,
    /// Claimed event, matching ledger action vocabulary (e.g. "dropout").
    pub claim: String,
}

/// Accept the claim only when the shared broadcast ledger is consistent with
/// it; everyone holds the same ledger, so fabricated history is checkable.
pub fn inject_byzantine_claim(ledger: &[BroadcastRecord], claim: &ByzantineClaim) -> Result<()> {
    if claim.claim == "dropout" {
        // a genuinely dropped client cannot have broadcast after the fact
        let active_after = ledger
            .iter()
            .any(|r| r.actor == claim.accused && r.tick >= claim.tick);
        if active_after {
            return Err(Error::Forgery(format!(
                "ledger shows client {} broadcasting at or after tick {}",
                claim.accused, claim.tick
            )));
        }
        return Ok(());
    }
    // claims about events the ledger never saw are rejected outright
    let witnessed = ledger
        .iter()
        .any(|r| r.actor == claim.accused && r.tick == claim.tick && r.action == claim.claim);
    if witnessed {
        Ok(())
    } else {
        Err(Error::Forgery(format!(
            "no ledger record supports claim '{}' about client {} at tick {}",
            claim.claim, claim.accused, claim.tick
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::PlainSuite;
    use crate::fixed::ParameterVector;
    use crate::keying::{normalize_pair, CommunicationKey};
    use crate::model::encode;
    use crate::protocol::ProtocolConfig;
    use crate::topology::Graph;
    use std::collections::BTreeSet;

    fn p32() -> FixedParams {
        FixedParams::default()
    }

    fn path_sim(masking: bool) -> (Simulation, BTreeMap<u32, EncodedUpdate>) {
        let mut g = Graph::new(3).unwrap();
        let mut keys = BTreeMap::new();
        for (a, b) in [(0, 1), (1, 2)] {
            g.add_edge(a, b).unwrap();
            let pair = normalize_pair(a, b);
            keys.insert(pair, CommunicationKey { pair, key: [a as u8 + 7; 16], derivation: vec![] });
        }
        let cfg = ProtocolConfig { masking, ..ProtocolConfig::default() };
        let mut sim = Simulation::new(g, keys, Box::new(PlainSuite), cfg, 99);
        sim.server_adjacent = BTreeSet::from([0]);
        let updates: BTreeMap<u32, EncodedUpdate> = (0..3)
            .map(|i| {
                let x = ParameterVector::from_f64s(&[1.5 * i as f64 - 1.0, 0.75], p32());
                (i, encode(&x, i as u64 + 2))
            })
            .collect();
        (sim, updates)
    }

    #[test]
    fn payoff_matrix_matches_the_deposit_game() {
        let m = PayoffMatrix { gain: 2, deposit: 3 };
        assert_eq!(m.payoff(Strategy::Collude, Strategy::Collude), (2, 2));
        assert_eq!(m.payoff(Strategy::Collude, Strategy::Counter), (-3, 3));
        assert_eq!(m.payoff(Strategy::Counter, Strategy::Collude), (3, -3));
        assert_eq!(m.payoff(Strategy::Counter, Strategy::Counter), (0, 0));
    }

    #[test]
    fn deposit_covering_gain_leaves_only_mutual_counter() {
        let eq = pure_nash_equilibria(&PayoffMatrix { gain: 1, deposit: 2 });
        assert_eq!(eq.len(), 1);
        assert_eq!(eq[0].profile, (Strategy::Counter, Strategy::Counter));
        assert!(eq[0].strict);
        assert_eq!(rational_strategy(&PayoffMatrix { gain: 1, deposit: 2 }), Strategy::Counter);
    }

    #[test]
    fn gain_exceeding_deposit_makes_collusion_an_equilibrium_too() {
        let eq = pure_nash_equilibria(&PayoffMatrix { gain: 3, deposit: 1 });
        let profiles: Vec<_> = eq.iter().map(|e| e.profile).collect();
        assert!(profiles.contains(&(Strategy::Collude, Strategy::Collude)));
        assert!(profiles.contains(&(Strategy::Counter, Strategy::Counter)));
        assert_eq!(eq.len(), 2);
        assert!(eq.iter().all(|e| e.strict));
        assert_eq!(rational_strategy(&PayoffMatrix { gain: 3, deposit: 1 }), Strategy::Collude);
    }

    #[test]
    fn equal_gain_and_deposit_makes_collusion_weak() {
        let eq = pure_nash_equilibria(&PayoffMatrix { gain: 2, deposit: 2 });
        for e in &eq {
            match e.profile {
                (Strategy::Collude, Strategy::Collude) => assert!(!e.strict),
                (Strategy::Counter, Strategy::Counter) => assert!(e.strict),
                other => panic!("unexpected equilibrium {other:?}"),
            }
        }
        assert_eq!(eq.len(), 2);
        // ties resolve to the safe side
        assert_eq!(rational_strategy(&PayoffMatrix { gain: 2, deposit: 2 }), Strategy::Counter);
    }

    #[test]
    fn collusion_recovers_the_victims_exact_update_despite_masking() {
        let (mut sim, updates) = path_sim(true);
        let report = sim.run_round(&updates, &ParameterVector::zeros(2, p32()), vec![]);
        assert_eq!(report.aborted, None);
        let outcome = execute_collusion(&sim.transcript, 1, p32()).unwrap();
        assert_eq!(outcome.recovered, updates[&1].to_raw());
        assert_eq!(outcome.accomplices.0, 0);
        // the leader never aggregates on-route, so it cannot be sandwiched
        assert!(matches!(
            execute_collusion(&sim.transcript, 0, p32()),
            Err(Error::AttackInfeasible(_))
        ));
    }

    #[test]
    fn sufficient_deposits_deter_the_collusion_attempt() {
        let (mut sim, updates) = path_sim(true);
        sim.run_round(&updates, &ParameterVector::zeros(2, p32()), vec![]);
        let deterred = PayoffMatrix { gain: 1, deposit: 2 };
        assert!(matches!(
            attempt_collusion(&sim.transcript, 1, p32(), &deterred),
            Err(Error::AttackInfeasible(_))
        ));
        // positive control: deposits out of the picture, the attack lands
        let toothless = PayoffMatrix { gain: 1, deposit: 0 };
        let outcome = attempt_collusion(&sim.transcript, 1, p32(), &toothless).unwrap();
        assert_eq!(outcome.recovered, updates[&1].to_raw());
    }

    #[test]
    fn punishment_moves_deposits_to_the_counter_attacker() {
        let (mut sim, updates) = path_sim(true);
        sim.run_round(&updates, &ParameterVector::zeros(2, p32()), vec![]);
        let m = PayoffMatrix { gain: 1, deposit: 5 };
        punish_colluders(&mut sim, &[0, 2], 1, &m);
        assert_eq!(sim.clients[&0].deposit, -5);
        assert_eq!(sim.clients[&2].deposit, -5);
        assert_eq!(sim.clients[&1].deposit, 10);
        assert!(sim.clients[&0].flagged_malicious);
    }

    #[test]
    fn masking_defeats_the_curious_observer() {
        let (mut sim, updates) = path_sim(true);
        sim.run_round(&updates, &ParameterVector::zeros(2, p32()), vec![]);
        assert!(curious_observer_audit(&sim, &updates).is_empty());
    }

    #[test]
    fn unmasked_two_party_round_leaks_the_leaders_update() {
        // positive control: masking off, the first recipient sees the
        // leader's raw encoded update verbatim
        let mut g = Graph::new(2).unwrap();
        g.add_edge(0, 1).unwrap();
        let pair = (0, 1);
        let keys = BTreeMap::from([(
            pair,
            CommunicationKey { pair, key: [3; 16], derivation: vec![] },
        )]);
        let cfg = ProtocolConfig { masking: false, ..ProtocolConfig::default() };
        let mut sim = Simulation::new(g, keys, Box::new(PlainSuite), cfg, 5);
        sim.server_adjacent = BTreeSet::from([0]);
        let updates: BTreeMap<u32, EncodedUpdate> = (0..2)
            .map(|i| (i, encode(&ParameterVector::from_f64s(&[i as f64 + 0.5], p32()), 3)))
            .collect();
        let report = sim.run_round(&updates, &ParameterVector::zeros(1, p32()), vec![]);
        assert_eq!(report.aborted, None);
        let leaks = curious_observer_audit(&sim, &updates);
        assert!(leaks.contains(&(1, 0)), "leaks: {leaks:?}");
    }

    #[test]
    fn false_dropout_claim_is_rejected_by_the_ledger() {
        let (mut sim, updates) = path_sim(true);
        sim.run_round(&updates, &ParameterVector::zeros(2, p32()), vec![]);
        // client 2 was demonstrably active during the round
        let lie = ByzantineClaim { accuser: 1, accused: 2, tick: 0, claim: "dropout".into() };
        assert!(inject_byzantine_claim(&sim.ledger, &lie).is_err());
        // unsupported event claims are rejected too
        let fabricated =
            ByzantineClaim { accuser: 1, accused: 2, tick: 3, claim: "upload-aggregate".into() };
        assert!(inject_byzantine_claim(&sim.ledger, &fabricated).is_err());
    }

    #[test]
    fn genuine_dropout_claim_is_accepted() {
        let (mut sim, updates) = path_sim(true);
        sim.clients.get_mut(&2).unwrap().dropout_tick = Some(0);
        let report = sim.run_round(&updates, &ParameterVector::zeros(2, p32()), vec![]);
        assert_eq!(report.dropouts, 1);
        let last_tick = sim.ledger.iter().filter(|r| r.actor == 2).map(|r| r.tick).max().unwrap();
        let claim = ByzantineClaim {
            accuser: 1,
            accused: 2,
            tick: last_tick + 1,
            claim: "dropout".into(),
        };
        assert!(inject_byzantine_claim(&sim.ledger, &claim).is_ok());
    }
}
