//! Per-round protocol state machine and the simulated clients.
//!
//! Phases advance monotonically: ADVERTISE -> SHARE_KEYS -> MASKED_INPUT ->
//! UNMASK -> DONE (or FAILED). A client absent in one phase is treated as
//! dropped for all later phases. Messages are value-passed between the
//! in-process parties; the session is the isolation boundary — nothing but
//! the final sum leaves it.

use std::collections::{BTreeMap, BTreeSet};

use super::keys::{derive_pairwise, expand_mask, keygen, pairwise_from_secret, KeyPair, PairwiseSecret, PublicKey};
use super::shamir::{shamir_reconstruct, shamir_share, ShamirShare};
use super::{ClientIndex, FieldSpec, CommGraph, SecAggError, SHAMIR_PRIME};
use crate::rng::{derive_seed, widen_seed, DetRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Advertise,
    ShareKeys,
    MaskedInput,
    Unmask,
    Done,
    Failed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum SecretKind {
    SelfMaskSeed,
    PairwiseKey,
}

/// A Shamir share stamped with whose secret it belongs to and which kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SecretShare {
    pub owner: ClientIndex,
    pub kind: SecretKind,
    pub share: ShamirShare,
}

/// Debug transcript: (phase, sender, message type, payload digest). Payloads
/// themselves are never logged.
#[derive(Debug, Clone, serde::Serialize)]
pub struct TranscriptEntry {
    pub phase: String,
    pub sender: String,
    pub message_type: String,
    pub payload_digest: String,
}

#[derive(Debug, Clone, Default)]
pub struct Transcript(pub Vec<TranscriptEntry>);

impl Transcript {
    fn log(&mut self, phase: Phase, sender: &str, message_type: &str, digest: String) {
        self.0.push(TranscriptEntry {
            phase: format!("{phase:?}"),
            sender: sender.to_string(),
            message_type: message_type.to_string(),
            payload_digest: digest,
        });
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.0 {
            out.push_str(&serde_json::to_string(e).expect("transcript serializes"));
            out.push('\n');
        }
        out
    }
}

/// FNV-1a over little-endian words; debugging digest, not cryptographic.
fn digest_u64s(values: &[u64]) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in values {
        for b in v.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    format!("{h:016x}")
}

/// Client-side masking: `y_i = u_i + expand(b_i) + sum_{j>i} expand(s_ij)
/// - sum_{j<i} expand(s_ij)` over the given mask peers, all mod q.
pub fn mask_update(
    field: &FieldSpec,
    my_index: ClientIndex,
    input: &[u64],
    self_mask_stream_seed: u128,
    pairwise: &BTreeMap<ClientIndex, PairwiseSecret>,
    mask_peers: &BTreeSet<ClientIndex>,
) -> Result<Vec<u64>, SecAggError> {
    field.check_vec(input)?;
    let mut y = input.to_vec();
    field.add_assign_vec(&mut y, &expand_mask(self_mask_stream_seed, field.dim, field.q()));
    for &peer in mask_peers {
        if peer == my_index {
            return Err(SecAggError::SelfPairing(my_index));
        }
        let secret = pairwise
            .get(&peer)
            .ok_or(SecAggError::MissingNeighborSecret { client: my_index, neighbor: peer })?;
        let m = expand_mask(secret.0, field.dim, field.q());
        if my_index < peer {
            field.add_assign_vec(&mut y, &m);
        } else {
            field.sub_assign_vec(&mut y, &m);
        }
    }
    Ok(y)
}

/// One simulated protocol participant.
#[derive(Debug)]
pub struct SecAggClient {
    pub index: ClientIndex,
    keypair: KeyPair,
    /// Self-mask seed: a field element so it Shamir-shares directly; widened
    /// to 128 bits for stream expansion.
    self_mask_seed: u64,
    share_seed: u64,
    pairwise: BTreeMap<ClientIndex, PairwiseSecret>,
    /// Shares this client holds for neighbors, keyed by owner.
    held: BTreeMap<ClientIndex, (SecretShare, SecretShare)>,
}

impl SecAggClient {
    pub fn new(index: ClientIndex, seed: u64) -> SecAggClient {
        let keypair = keygen(index, derive_seed(seed, "dh-key", index as u64));
        let mut rng = DetRng::new(derive_seed(seed, "self-mask", index as u64));
        SecAggClient {
            index,
            keypair,
            self_mask_seed: rng.next_below(SHAMIR_PRIME),
            share_seed: derive_seed(seed, "shamir", index as u64),
            pairwise: BTreeMap::new(),
            held: BTreeMap::new(),
        }
    }

    pub fn public_key(&self) -> PublicKey {
        PublicKey { client: self.index, value: self.keypair.public }
    }

    /// Derive pairwise secrets for every advertised neighbor.
    pub fn learn_publics(
        &mut self,
        broadcast: &BTreeMap<ClientIndex, PublicKey>,
        my_neighbors: &BTreeSet<ClientIndex>,
    ) -> Result<(), SecAggError> {
        for (&who, pk) in broadcast {
            if who == self.index || !my_neighbors.contains(&who) {
                continue;
            }
            self.pairwise.insert(who, derive_pairwise(&self.keypair, pk)?);
        }
        Ok(())
    }

    /// Shamir-share both secrets to the given recipients. The polynomial is
    /// evaluated over all cohort slots (x = global index + 1) and only the
    /// recipients' evaluations leave the client. The dealer keeps its own
    /// slot's shares too, so at the dropout boundary (exactly t survivors) a
    /// survivor's self-mask seed still has t reachable shares.
    pub fn deal_shares(
        &self,
        cohort_size: usize,
        threshold: usize,
        recipients: &BTreeSet<ClientIndex>,
    ) -> Result<BTreeMap<ClientIndex, (SecretShare, SecretShare)>, SecAggError> {
        let key_shares = shamir_share(
            self.keypair.secret,
            cohort_size as u64,
            threshold as u64,
            SHAMIR_PRIME,
            derive_seed(self.share_seed, "pairwise-key", 0),
        )?;
        let mask_shares = shamir_share(
            self.self_mask_seed,
            cohort_size as u64,
            threshold as u64,
            SHAMIR_PRIME,
            derive_seed(self.share_seed, "self-mask-seed", 0),
        )?;
        let mut out = BTreeMap::new();
        for &r in recipients.iter().chain(std::iter::once(&self.index)) {
            out.insert(
                r,
                (
                    SecretShare { owner: self.index, kind: SecretKind::PairwiseKey, share: key_shares[r] },
                    SecretShare { owner: self.index, kind: SecretKind::SelfMaskSeed, share: mask_shares[r] },
                ),
            );
        }
        Ok(out)
    }

    pub fn receive_share(&mut self, pair: (SecretShare, SecretShare)) {
        debug_assert_eq!(pair.0.kind, SecretKind::PairwiseKey);
        debug_assert_eq!(pair.1.kind, SecretKind::SelfMaskSeed);
        self.held.insert(pair.0.owner, pair);
    }

    /// Compute the masked input. `mask_peers` must be the graph neighbors
    /// that completed SHARE_KEYS: secrets with anyone else either do not
    /// exist or could never be unmasked.
    pub fn mask_input(
        &self,
        field: &FieldSpec,
        input: &[u64],
        mask_peers: &BTreeSet<ClientIndex>,
    ) -> Result<Vec<u64>, SecAggError> {
        mask_update(
            field,
            self.index,
            input,
            widen_seed(self.self_mask_seed),
            &self.pairwise,
            mask_peers,
        )
    }

    /// Produce exactly the requested kind of share for each owner the server
    /// asks about. The other kind never leaves this client.
    pub fn reveal_shares(&self, needed: &BTreeMap<ClientIndex, SecretKind>) -> Vec<SecretShare> {
        let mut out = Vec::new();
        for (&owner, &kind) in needed {
            if let Some((key_share, mask_share)) = self.held.get(&owner) {
                out.push(match kind {
                    SecretKind::PairwiseKey => *key_share,
                    SecretKind::SelfMaskSeed => *mask_share,
                });
            }
        }
        out
    }
}

/// Server-side state machine for one round.
#[derive(Debug)]
pub struct SecAggSession {
    pub round_index: u64,
    field: FieldSpec,
    graph: CommGraph,
    threshold: usize,
    phase: Phase,
    pubs: BTreeMap<ClientIndex, PublicKey>,
    keyed: BTreeSet<ClientIndex>,
    masked: BTreeMap<ClientIndex, Vec<u64>>,
    needed: BTreeMap<ClientIndex, SecretKind>,
    revealed: BTreeMap<ClientIndex, Vec<ShamirShare>>,
    transcript: Transcript,
}

impl SecAggSession {
    pub fn new(
        round_index: u64,
        field: FieldSpec,
        graph: CommGraph,
        threshold: usize,
    ) -> Result<SecAggSession, SecAggError> {
        if threshold < 1 {
            return Err(SecAggError::BadShamirParams("threshold must be >= 1".into()));
        }
        if graph.min_degree() < threshold {
            return Err(SecAggError::InfeasibleGraph { k: graph.min_degree(), t: threshold });
        }
        Ok(SecAggSession {
            round_index,
            field,
            graph,
            threshold,
            phase: Phase::Advertise,
            pubs: BTreeMap::new(),
            keyed: BTreeSet::new(),
            masked: BTreeMap::new(),
            needed: BTreeMap::new(),
            revealed: BTreeMap::new(),
            transcript: Transcript::default(),
        })
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn transcript(&self) -> &Transcript {
        &self.transcript
    }

    pub fn survivors(&self) -> BTreeSet<ClientIndex> {
        self.masked.keys().copied().collect()
    }

    fn expect_phase(&mut self, expected: Phase, sender: &str, message: &str) -> Result<(), SecAggError> {
        if self.phase != expected {
            self.transcript.log(self.phase, sender, &format!("rejected:{message}"), String::new());
            return Err(SecAggError::PhaseViolation { expected, actual: self.phase });
        }
        Ok(())
    }

    fn check_client(&self, who: ClientIndex) -> Result<(), SecAggError> {
        if who >= self.graph.n() {
            return Err(SecAggError::UnknownClient(who));
        }
        Ok(())
    }

    pub fn advertise(&mut self, pk: PublicKey) -> Result<(), SecAggError> {
        let sender = format!("client-{}", pk.client);
        self.expect_phase(Phase::Advertise, &sender, "advertise")?;
        self.check_client(pk.client)?;
        self.pubs.insert(pk.client, pk);
        self.transcript.log(Phase::Advertise, &sender, "public-key", digest_u64s(&[pk.value]));
        Ok(())
    }

    /// Close ADVERTISE and broadcast the collected public keys.
    pub fn close_advertise(&mut self) -> Result<BTreeMap<ClientIndex, PublicKey>, SecAggError> {
        self.expect_phase(Phase::Advertise, "server", "close-advertise")?;
        self.phase = Phase::ShareKeys;
        self.transcript.log(Phase::ShareKeys, "server", "broadcast-public-keys",
            digest_u64s(&self.pubs.values().map(|p| p.value).collect::<Vec<_>>()));
        Ok(self.pubs.clone())
    }

    /// Record that a client distributed its shares. Share payloads travel
    /// client-to-client (end-to-end encrypted in the real protocol); only a
    /// digest is logged here.
    pub fn route_shares(&mut self, dealer: ClientIndex, payload_digest: String) -> Result<(), SecAggError> {
        let sender = format!("client-{dealer}");
        self.expect_phase(Phase::ShareKeys, &sender, "route-shares")?;
        self.check_client(dealer)?;
        if !self.pubs.contains_key(&dealer) {
            return Err(SecAggError::UnknownClient(dealer));
        }
        self.keyed.insert(dealer);
        self.transcript.log(Phase::ShareKeys, &sender, "shares", payload_digest);
        Ok(())
    }

    /// Close SHARE_KEYS and broadcast who completed it.
    pub fn close_share_keys(&mut self) -> Result<BTreeSet<ClientIndex>, SecAggError> {
        self.expect_phase(Phase::ShareKeys, "server", "close-share-keys")?;
        self.phase = Phase::MaskedInput;
        self.transcript.log(Phase::MaskedInput, "server", "broadcast-keyed-set",
            digest_u64s(&self.keyed.iter().map(|&c| c as u64).collect::<Vec<_>>()));
        Ok(self.keyed.clone())
    }

    pub fn masked_input(&mut self, from: ClientIndex, y: Vec<u64>) -> Result<(), SecAggError> {
        let sender = format!("client-{from}");
        self.expect_phase(Phase::MaskedInput, &sender, "masked-input")?;
        self.check_client(from)?;
        if !self.keyed.contains(&from) {
            return Err(SecAggError::UnknownClient(from));
        }
        self.field.check_vec(&y)?;
        self.transcript.log(Phase::MaskedInput, &sender, "masked-input", digest_u64s(&y));
        self.masked.insert(from, y);
        Ok(())
    }

    /// Close MASKED_INPUT and compute which share kind each keyed client's
    /// secret requires: survivors reveal their self-mask seed, dropped
    /// clients their pairwise key. The two sets partition `keyed`, so the
    /// session can never request both kinds for one client.
    pub fn begin_unmask(&mut self) -> Result<BTreeMap<ClientIndex, SecretKind>, SecAggError> {
        self.expect_phase(Phase::MaskedInput, "server", "begin-unmask")?;
        if self.masked.len() < self.threshold {
            self.phase = Phase::Failed;
            return Err(SecAggError::ThresholdNotMet {
                survivors: self.masked.len(),
                threshold: self.threshold,
            });
        }
        self.phase = Phase::Unmask;
        self.needed = self
            .keyed
            .iter()
            .map(|&c| {
                let kind = if self.masked.contains_key(&c) {
                    SecretKind::SelfMaskSeed
                } else {
                    SecretKind::PairwiseKey
                };
                (c, kind)
            })
            .collect();
        self.transcript.log(Phase::Unmask, "server", "share-request",
            digest_u64s(&self.needed.keys().map(|&c| c as u64).collect::<Vec<_>>()));
        Ok(self.needed.clone())
    }

    /// Accept revealed shares from a surviving client. A share of the kind
    /// the session did not request is a protocol violation: accepting it
    /// would put both kinds of one client's secret in the server's hands.
    pub fn reveal(&mut self, from: ClientIndex, shares: Vec<SecretShare>) -> Result<(), SecAggError> {
        let sender = format!("client-{from}");
        self.expect_phase(Phase::Unmask, &sender, "reveal")?;
        if !self.masked.contains_key(&from) {
            return Err(SecAggError::UnknownClient(from));
        }
        for s in shares {
            let Some(&needed_kind) = self.needed.get(&s.owner) else {
                return Err(SecAggError::UnknownClient(s.owner));
            };
            if s.kind != needed_kind {
                self.phase = Phase::Failed;
                self.transcript.log(Phase::Failed, &sender, "both-kinds-revealed", String::new());
                return Err(SecAggError::BothKindsRevealed { owner: s.owner });
            }
            if s.share.x != from as u64 + 1 {
                return Err(SecAggError::BadShamirParams(format!(
                    "share for owner {} carries slot {}, expected {}",
                    s.owner,
                    s.share.x,
                    from + 1
                )));
            }
            self.transcript.log(Phase::Unmask, &sender, "share-reveal", digest_u64s(&[s.share.x]));
            self.revealed.entry(s.owner).or_default().push(s.share);
        }
        Ok(())
    }

    /// Reconstruct the needed secrets, strip all masks, and return the sum of
    /// the survivors' inputs mod q.
    pub fn unmask_and_sum(&mut self) -> Result<Vec<u64>, SecAggError> {
        self.expect_phase(Phase::Unmask, "server", "unmask-and-sum")?;

        let mut reconstructed: BTreeMap<ClientIndex, u64> = BTreeMap::new();
        for (&owner, &_kind) in &self.needed {
            let shares = self.revealed.get(&owner).map(Vec::as_slice).unwrap_or(&[]);
            if shares.len() < self.threshold {
                self.phase = Phase::Failed;
                return Err(SecAggError::InsufficientShares {
                    owner,
                    got: shares.len(),
                    need: self.threshold,
                });
            }
            let secret = shamir_reconstruct(shares, self.threshold as u64, SHAMIR_PRIME)?;
            reconstructed.insert(owner, secret);
        }

        let mut sum = vec![0u64; self.field.dim];
        for y in self.masked.values() {
            self.field.add_assign_vec(&mut sum, y);
        }

        for (&owner, &kind) in &self.needed {
            let secret = reconstructed[&owner];
            match kind {
                SecretKind::SelfMaskSeed => {
                    let m = expand_mask(widen_seed(secret), self.field.dim, self.field.q());
                    self.field.sub_assign_vec(&mut sum, &m);
                }
                SecretKind::PairwiseKey => {
                    // Remove the residual pairwise terms that surviving
                    // neighbors added for the dropped client.
                    for &i in self.graph.neighbors(owner) {
                        if !self.masked.contains_key(&i) {
                            continue;
                        }
                        let pk_i = self.pubs[&i].value;
                        let s = pairwise_from_secret(secret, pk_i);
                        let m = expand_mask(s.0, self.field.dim, self.field.q());
                        if i < owner {
                            self.field.sub_assign_vec(&mut sum, &m);
                        } else {
                            self.field.add_assign_vec(&mut sum, &m);
                        }
                    }
                }
            }
        }

        self.phase = Phase::Done;
        self.transcript.log(Phase::Done, "server", "sum", digest_u64s(&sum));
        Ok(sum)
    }
}

/// Which clients disappear between phases. Dropouts only happen at phase
/// boundaries, never mid-message.
#[derive(Debug, Clone, Default)]
pub struct DropoutSchedule {
    pub after_advertise: BTreeSet<ClientIndex>,
    pub after_share_keys: BTreeSet<ClientIndex>,
    pub after_masked_input: BTreeSet<ClientIndex>,
}

/// Outcome of a full protocol run: the modular sum and whose inputs it
/// covers.
#[derive(Debug)]
pub struct SecAggOutcome {
    pub sum: Vec<u64>,
    pub survivors: BTreeSet<ClientIndex>,
    pub transcript: Transcript,
}

/// Drive one full round over in-process clients.
pub fn run_secagg(
    round_index: u64,
    field: &FieldSpec,
    graph: &CommGraph,
    threshold: usize,
    inputs: &BTreeMap<ClientIndex, Vec<u64>>,
    dropouts: &DropoutSchedule,
    seed: u64,
) -> Result<SecAggOutcome, SecAggError> {
    let n = graph.n();
    let mut session = SecAggSession::new(round_index, *field, graph.clone(), threshold)?;
    let mut clients: Vec<SecAggClient> =
        (0..n).map(|i| SecAggClient::new(i, derive_seed(seed, "secagg-client", i as u64))).collect();

    // ADVERTISE: everyone in the cohort is present at the start.
    for c in &clients {
        session.advertise(c.public_key())?;
    }
    let broadcast = session.close_advertise()?;
    let alive1: BTreeSet<ClientIndex> =
        (0..n).filter(|i| !dropouts.after_advertise.contains(i)).collect();

    // SHARE_KEYS: live clients derive pairwise secrets and deal shares to
    // their live neighbors.
    let mut deliveries: Vec<(ClientIndex, ClientIndex, (SecretShare, SecretShare))> = Vec::new();
    for &i in &alive1 {
        let nbrs = graph.neighbors(i).clone();
        clients[i].learn_publics(&broadcast, &nbrs)?;
        let recipients: BTreeSet<ClientIndex> = nbrs.intersection(&alive1).copied().collect();
        let dealt = clients[i].deal_shares(n, threshold, &recipients)?;
        let digest = digest_u64s(&dealt.values().flat_map(|(a, b)| [a.share.y, b.share.y]).collect::<Vec<_>>());
        session.route_shares(i, digest)?;
        for (to, pair) in dealt {
            deliveries.push((i, to, pair));
        }
    }
    for (_, to, pair) in deliveries {
        clients[to].receive_share(pair);
    }
    let keyed = session.close_share_keys()?;
    let alive2: BTreeSet<ClientIndex> =
        alive1.iter().copied().filter(|i| !dropouts.after_share_keys.contains(i)).collect();

    // MASKED_INPUT: live clients upload masked vectors.
    for &i in &alive2 {
        let input = inputs.get(&i).ok_or(SecAggError::MissingInput(i))?;
        let mask_peers: BTreeSet<ClientIndex> =
            graph.neighbors(i).intersection(&keyed).copied().collect();
        let y = clients[i].mask_input(field, input, &mask_peers)?;
        session.masked_input(i, y)?;
    }

    // UNMASK: remaining clients reveal the requested share kinds.
    let needed = session.begin_unmask()?;
    let alive3: BTreeSet<ClientIndex> =
        alive2.iter().copied().filter(|i| !dropouts.after_masked_input.contains(i)).collect();
    for &i in &alive3 {
        let shares = clients[i].reveal_shares(&needed);
        session.reveal(i, shares)?;
    }

    let sum = session.unmask_and_sum()?;
    let survivors = session.survivors();
    Ok(SecAggOutcome { sum, survivors, transcript: session.transcript.clone() })
}
