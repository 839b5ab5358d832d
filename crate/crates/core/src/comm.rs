//! Simulated multi-GPU topology and communication planning.
//!
//! Within one batch group, every data process produces partial values on
//! its projection footprint and the owner of each target element needs
//! their sum. The direct plan sends every partial straight to its owner.
//! The hierarchical plan first reduces overlapping partials inside each
//! socket, then inside each node, and only then sends what is left to the
//! owners.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::engine::{check_partials, OwnedResult, Ownership, PartialResult};
use crate::error::{Error, Result};
use crate::hilbert::Footprint;
use crate::precision::Precision;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Topology {
    pub num_nodes: usize,
    pub sockets_per_node: usize,
    pub gpus_per_socket: usize,
    /// Bytes per second.
    pub bw_socket: f64,
    pub bw_node: f64,
    pub bw_inter: f64,
    /// Seconds per message.
    pub latency: f64,
    /// Per-byte multiplier on inter-node transfers for host staging.
    pub staging: f64,
}

impl Topology {
    pub fn new(
        num_nodes: usize,
        sockets_per_node: usize,
        gpus_per_socket: usize,
        bandwidths: [f64; 3],
        latency: f64,
    ) -> Result<Self> {
        let t = Self {
            num_nodes,
            sockets_per_node,
            gpus_per_socket,
            bw_socket: bandwidths[0],
            bw_node: bandwidths[1],
            bw_inter: bandwidths[2],
            latency,
            staging: 1.0,
        };
        t.validate()?;
        Ok(t)
    }

    /// Two sockets of three GPUs per node.
    pub fn two_by_three(num_nodes: usize) -> Result<Self> {
        Self::new(num_nodes, 2, 3, [50e9, 25e9, 12.5e9], 5e-6)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_nodes == 0 || self.sockets_per_node == 0 || self.gpus_per_socket == 0 {
            return Err(Error::InvalidTopology(
                "every level needs at least one member".into(),
            ));
        }
        let bw_ok =
            self.bw_inter > 0.0 && self.bw_node >= self.bw_inter && self.bw_socket >= self.bw_node;
        if !bw_ok || !self.bw_socket.is_finite() {
            return Err(Error::InvalidTopology(
                "bandwidths must satisfy socket >= node >= inter > 0".into(),
            ));
        }
        if !(self.latency >= 0.0 && self.latency.is_finite()) || !(self.staging >= 1.0) {
            return Err(Error::InvalidTopology(
                "bad latency or staging factor".into(),
            ));
        }
        Ok(())
    }

    pub fn gpus_per_node(&self) -> usize {
        self.sockets_per_node * self.gpus_per_socket
    }

    pub fn total_gpus(&self) -> usize {
        self.num_nodes * self.gpus_per_node()
    }

    fn slot_at(&self, index: usize) -> Slot {
        let gpn = self.gpus_per_node();
        Slot {
            node: index / gpn,
            socket: (index % gpn) / self.gpus_per_socket,
            gpu: index % self.gpus_per_socket,
        }
    }
}

impl fmt::Display for Topology {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "nodes={} sockets={} gpus={} bw_socket={} bw_node={} bw_inter={} lat={}",
            self.num_nodes,
            self.sockets_per_node,
            self.gpus_per_socket,
            self.bw_socket,
            self.bw_node,
            self.bw_inter,
            self.latency
        )?;
        if self.staging != 1.0 {
            write!(f, " staging={}", self.staging)?;
        }
        Ok(())
    }
}

/// `nodes=<n> sockets=<s> gpus=<g> bw_socket=<B/s> bw_node=<B/s>
/// bw_inter=<B/s> lat=<s>`, optionally followed by `staging=<factor>`.
impl FromStr for Topology {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut fields: BTreeMap<&str, &str> = BTreeMap::new();
        for token in s.split_whitespace() {
            let (key, value) = token.split_once('=').ok_or_else(|| {
                Error::InvalidTopology(format!("expected key=value, got `{token}`"))
            })?;
            if fields.insert(key, value).is_some() {
                return Err(Error::InvalidTopology(format!("duplicate key `{key}`")));
            }
        }
        let mut take = |key: &str| -> Result<&str> {
            fields
                .remove(key)
                .ok_or_else(|| Error::InvalidTopology(format!("missing `{key}`")))
        };
        let int = |v: &str, key: &str| {
            v.parse::<usize>()
                .map_err(|_| Error::InvalidTopology(format!("bad integer for `{key}`: {v}")))
        };
        let float = |v: &str, key: &str| {
            v.parse::<f64>()
                .map_err(|_| Error::InvalidTopology(format!("bad number for `{key}`: {v}")))
        };
        let num_nodes = int(take("nodes")?, "nodes")?;
        let sockets = int(take("sockets")?, "sockets")?;
        let gpus = int(take("gpus")?, "gpus")?;
        let bw = [
            float(take("bw_socket")?, "bw_socket")?,
            float(take("bw_node")?, "bw_node")?,
            float(take("bw_inter")?, "bw_inter")?,
        ];
        let latency = float(take("lat")?, "lat")?;
        let staging = match fields.remove("staging") {
            Some(v) => float(v, "staging")?,
            None => 1.0,
        };
        if let Some(key) = fields.keys().next() {
            return Err(Error::InvalidTopology(format!("unknown key `{key}`")));
        }
        let mut t = Topology::new(num_nodes, sockets, gpus, bw, latency)?;
        t.staging = staging;
        t.validate()?;
        Ok(t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Slot {
    pub node: usize,
    pub socket: usize,
    pub gpu: usize,
}

/// Process `b * pd + d` is data process `d` of batch group `b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub pb: usize,
    pub pd: usize,
    pub topology: Topology,
    pub slots: Vec<Slot>,
}

impl Placement {
    /// An explicit placement, checked to be injective and inside the
    /// topology.
    pub fn from_slots(pb: usize, pd: usize, topology: Topology, slots: Vec<Slot>) -> Result<Self> {
        if slots.len() != pb * pd {
            return Err(Error::InvalidConfig(format!(
                "{} slots for {pb} x {pd} processes",
                slots.len()
            )));
        }
        let mut sorted = slots.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidConfig("two processes share a GPU".into()));
        }
        if slots.iter().any(|s| {
            s.node >= topology.num_nodes
                || s.socket >= topology.sockets_per_node
                || s.gpu >= topology.gpus_per_socket
        }) {
            return Err(Error::InvalidConfig("slot outside the topology".into()));
        }
        Ok(Self {
            pb,
            pd,
            topology,
            slots,
        })
    }

    pub fn slot(&self, process: usize) -> Slot {
        self.slots[process]
    }

    /// Slots of batch group `b`, indexed by data process.
    pub fn group(&self, b: usize) -> &[Slot] {
        &self.slots[b * self.pd..(b + 1) * self.pd]
    }
}

/// Fill GPUs socket-first, node-second, in process order. Batch groups get
/// disjoint node sets when the nodes suffice; otherwise groups are packed
/// back to back.
pub fn map_partitions(pb: usize, pd: usize, topology: &Topology) -> Result<Placement> {
    topology.validate()?;
    if pb == 0 || pd == 0 {
        return Err(Error::InvalidConfig("pb and pd must be >= 1".into()));
    }
    let requested = pb * pd;
    if requested > topology.total_gpus() {
        return Err(Error::Oversubscribed {
            requested,
            available: topology.total_gpus(),
        });
    }
    let nodes_per_group = pd.div_ceil(topology.gpus_per_node());
    let disjoint = pb * nodes_per_group <= topology.num_nodes;
    let slots = (0..pb)
        .flat_map(|b| {
            (0..pd).map(move |d| {
                if disjoint {
                    b * nodes_per_group * topology.gpus_per_node() + d
                } else {
                    b * pd + d
                }
            })
        })
        .map(|i| topology.slot_at(i))
        .collect();
    Placement::from_slots(pb, pd, *topology, slots)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Direct,
    Socket,
    Node,
    Global,
}

impl Level {
    pub fn name(self) -> &'static str {
        match self {
            Level::Direct => "direct",
            Level::Socket => "socket",
            Level::Node => "node",
            Level::Global => "global",
        }
    }
}

/// Elements sent from one data process to another, coalesced into one
/// message.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transfer {
    pub from: usize,
    pub to: usize,
    pub elements: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelPlan {
    pub level: Level,
    pub transfers: Vec<Transfer>,
}

impl LevelPlan {
    /// `matrix[p][q]`: elements sent from `p` to `q`.
    pub fn matrix(&self, pd: usize) -> Vec<Vec<usize>> {
        let mut m = vec![vec![0; pd]; pd];
        for t in &self.transfers {
            m[t.from][t.to] += t.elements.len();
        }
        m
    }

    pub fn elements(&self) -> usize {
        self.transfers.iter().map(|t| t.elements.len()).sum()
    }

    pub fn messages(&self) -> usize {
        self.transfers.len()
    }
}

fn coalesce(level: Level, sends: Vec<(usize, usize, usize)>) -> LevelPlan {
    let mut pairs: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for (from, to, e) in sends {
        pairs.entry((from, to)).or_default().push(e);
    }
    LevelPlan {
        level,
        transfers: pairs
            .into_iter()
            .map(|((from, to), mut elements)| {
                elements.sort_unstable();
                Transfer { from, to, elements }
            })
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommPlan {
    pub pd: usize,
    pub levels: Vec<LevelPlan>,
    /// Contributing data processes of every target element, ascending.
    pub contributors: Vec<Vec<usize>>,
    pub owner: Vec<usize>,
    /// Element copies alive before the socket level, before the node level
    /// and before the global level.
    pub retained: [usize; 3],
}

impl CommPlan {
    pub fn level(&self, level: Level) -> Option<&LevelPlan> {
        self.levels.iter().find(|l| l.level == level)
    }

    pub fn is_hierarchical(&self) -> bool {
        self.levels.len() > 1
    }
}

fn contributors(footprints: &[Footprint], ownership: &Ownership) -> Result<Vec<Vec<usize>>> {
    if footprints.len() != ownership.num_processes() {
        return Err(Error::NotAPartition(format!(
            "{} footprints for {} owners",
            footprints.len(),
            ownership.num_processes()
        )));
    }
    let mut c = vec![Vec::new(); ownership.size()];
    for (p, f) in footprints.iter().enumerate() {
        for &e in &f.elements {
            if e >= ownership.size() {
                return Err(Error::OutOfRange {
                    what: "footprint element",
                    index: e,
                    limit: ownership.size(),
                });
            }
            c[e].push(p);
        }
    }
    c.iter_mut().for_each(|v| {
        v.sort_unstable();
        v.dedup();
    });
    Ok(c)
}

fn check_slots(slots: &[Slot], pd: usize) -> Result<()> {
    if slots.len() != pd {
        return Err(Error::InvalidConfig(format!(
            "{} slots for {pd} processes",
            slots.len()
        )));
    }
    Ok(())
}

/// Every partial goes straight to the owner; an owner's own partial stays
/// put.
pub fn plan_direct(
    footprints: &[Footprint],
    ownership: &Ownership,
    slots: &[Slot],
) -> Result<CommPlan> {
    let pd = ownership.num_processes();
    check_slots(slots, pd)?;
    let contributors = contributors(footprints, ownership)?;
    let owner: Vec<usize> = (0..ownership.size())
        .map(|e| ownership.owner_of(e))
        .collect();
    let mut sends = Vec::new();
    for (e, c) in contributors.iter().enumerate() {
        sends.extend(
            c.iter()
                .filter(|&&p| p != owner[e])
                .map(|&p| (p, owner[e], e)),
        );
    }
    let total: usize = contributors.iter().map(Vec::len).sum();
    Ok(CommPlan {
        pd,
        levels: vec![coalesce(Level::Direct, sends)],
        contributors,
        owner,
        retained: [total; 3],
    })
}

/// Socket-level then node-level local reduction, then a global exchange.
/// At each level the reducer of an element is its owner when the owner
/// holds it, otherwise the holder with the smallest running send-load
/// (ties to the lower process id).
pub fn plan_hierarchical(
    footprints: &[Footprint],
    ownership: &Ownership,
    slots: &[Slot],
) -> Result<CommPlan> {
    let pd = ownership.num_processes();
    check_slots(slots, pd)?;
    let contributors = contributors(footprints, ownership)?;
    let owner: Vec<usize> = (0..ownership.size())
        .map(|e| ownership.owner_of(e))
        .collect();
    let mut holders = contributors.clone();
    let mut load = vec![0usize; pd];
    let mut retained = [0; 3];
    retained[0] = holders.iter().map(Vec::len).sum();

    let mut levels = Vec::new();
    for (i, level) in [Level::Socket, Level::Node].into_iter().enumerate() {
        let group_of = |p: usize| match level {
            Level::Socket => (slots[p].node, slots[p].socket),
            _ => (slots[p].node, 0),
        };
        let mut sends = Vec::new();
        for (e, h) in holders.iter_mut().enumerate() {
            let mut groups: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
            for &p in h.iter() {
                groups.entry(group_of(p)).or_default().push(p);
            }
            let mut next = Vec::new();
            for members in groups.into_values() {
                if members.len() < 2 {
                    next.extend(members);
                    continue;
                }
                let reducer = if members.contains(&owner[e]) {
                    owner[e]
                } else {
                    *members.iter().min_by_key(|&&p| (load[p], p)).unwrap()
                };
                for &m in members.iter().filter(|&&m| m != reducer) {
                    sends.push((m, reducer, e));
                    load[m] += 1;
                }
                if reducer != owner[e] {
                    load[reducer] += 1;
                }
                next.push(reducer);
            }
            next.sort_unstable();
            *h = next;
        }
        levels.push(coalesce(level, sends));
        retained[i + 1] = holders.iter().map(Vec::len).sum();
    }

    let mut sends = Vec::new();
    for (e, h) in holders.iter().enumerate() {
        sends.extend(
            h.iter()
                .filter(|&&p| p != owner[e])
                .map(|&p| (p, owner[e], e)),
        );
    }
    levels.push(coalesce(Level::Global, sends));
    Ok(CommPlan {
        pd,
        levels,
        contributors,
        owner,
        retained,
    })
}

/// Run the plan's transfers on per-process state. At every receiver,
/// incoming values and its own value are combined in process-id order.
fn replay<T, R>(
    plan: &CommPlan,
    mut state: Vec<BTreeMap<usize, T>>,
    reduce: R,
) -> Result<Vec<BTreeMap<usize, T>>>
where
    R: Fn(Vec<T>) -> T,
{
    for level in &plan.levels {
        let mut incoming: Vec<BTreeMap<usize, Vec<(usize, T)>>> =
            (0..plan.pd).map(|_| BTreeMap::new()).collect();
        for t in &level.transfers {
            for &e in &t.elements {
                let v = state[t.from].remove(&e).ok_or(Error::MissingContributor {
                    process: t.from,
                    element: e,
                })?;
                incoming[t.to].entry(e).or_default().push((t.from, v));
            }
        }
        for (r, arrivals) in incoming.into_iter().enumerate() {
            for (e, mut list) in arrivals {
                if let Some(own) = state[r].remove(&e) {
                    list.push((r, own));
                }
                list.sort_by_key(|x| x.0);
                state[r].insert(e, reduce(list.into_iter().map(|x| x.1).collect()));
            }
        }
    }
    for (p, s) in state.iter().enumerate() {
        if let Some(&e) = s.keys().find(|&&e| plan.owner[e] != p) {
            return Err(Error::MissingContributor {
                process: p,
                element: e,
            });
        }
    }
    Ok(state)
}

/// Contributor sets as delivered to each element's owner.
pub fn delivered_contributors(plan: &CommPlan) -> Result<Vec<Vec<usize>>> {
    let mut state: Vec<BTreeMap<usize, Vec<usize>>> = vec![BTreeMap::new(); plan.pd];
    for (e, c) in plan.contributors.iter().enumerate() {
        for &p in c {
            state[p].insert(e, vec![p]);
        }
    }
    let state = replay(plan, state, |lists| {
        let mut all: Vec<usize> = lists.concat();
        all.sort_unstable();
        all
    })?;
    let mut out = vec![Vec::new(); plan.owner.len()];
    for s in state {
        for (e, c) in s {
            out[e] = c;
        }
    }
    Ok(out)
}

/// Execute the plan on real partial values. Partials must cover exactly
/// the footprints the plan was built from.
pub fn execute_plan(
    plan: &CommPlan,
    partials: &[PartialResult],
    ownership: &Ownership,
) -> Result<Vec<OwnedResult>> {
    let (f, precision) = check_partials(partials)?;
    let mut state: Vec<BTreeMap<usize, Vec<f64>>> = vec![BTreeMap::new(); plan.pd];
    for p in partials {
        if p.owner >= plan.pd {
            return Err(Error::OutOfRange {
                what: "partial owner",
                index: p.owner,
                limit: plan.pd,
            });
        }
        for (j, &e) in p.elements.iter().enumerate() {
            state[p.owner].insert(e, p.values[j * f..(j + 1) * f].to_vec());
        }
    }
    for (e, c) in plan.contributors.iter().enumerate() {
        for &p in c {
            if !state[p].contains_key(&e) {
                return Err(Error::MissingContributor {
                    process: p,
                    element: e,
                });
            }
        }
    }
    let state = replay(plan, state, |lists| reduce_columns(precision, f, &lists))?;
    Ok((0..ownership.num_processes())
        .map(|q| {
            let elements = ownership.elements(q).to_vec();
            let mut values = vec![0.0; elements.len() * f];
            for (i, e) in elements.iter().enumerate() {
                if let Some(v) = state[q].get(e) {
                    values[i * f..(i + 1) * f].copy_from_slice(v);
                }
            }
            OwnedResult {
                owner: q,
                elements,
                ffactor: f,
                precision,
                values,
            }
        })
        .collect())
}

fn reduce_columns(precision: Precision, f: usize, lists: &[Vec<f64>]) -> Vec<f64> {
    (0..f)
        .map(|k| precision.reduce(lists.iter().map(|v| v[k])))
        .collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LevelVolume {
    pub elements: usize,
    pub messages: usize,
    pub bytes: u64,
    pub inter_node_bytes: u64,
    /// Slowest sender: its bytes over link bandwidth plus its message
    /// latencies.
    pub time_s: f64,
}

/// Byte accounting of the direct and hierarchical plans of one group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeReport {
    pub ffactor: usize,
    pub element_bytes: usize,
    pub direct: LevelVolume,
    pub socket: LevelVolume,
    pub node: LevelVolume,
    pub global: LevelVolume,
    /// Bytes of partial data alive entering the socket, node and global
    /// levels.
    pub retained_bytes: [u64; 3],
    pub reduction_percent: f64,
    pub direct_time_s: f64,
    pub hierarchical_time_s: f64,
    /// Inter-node bytes over the time of the global level.
    pub effective_bandwidth: f64,
}

fn level_volume(
    level: &LevelPlan,
    slots: &[Slot],
    topology: &Topology,
    bytes_per_element: u64,
) -> LevelVolume {
    let mut v = LevelVolume {
        elements: level.elements(),
        messages: level.messages(),
        ..Default::default()
    };
    let mut sender_time: BTreeMap<usize, f64> = BTreeMap::new();
    for t in &level.transfers {
        let bytes = t.elements.len() as u64 * bytes_per_element;
        let (a, b) = (slots[t.from], slots[t.to]);
        let seconds = if a.node != b.node {
            v.inter_node_bytes += bytes;
            bytes as f64 * topology.staging / topology.bw_inter
        } else if a.socket != b.socket {
            bytes as f64 / topology.bw_node
        } else {
            bytes as f64 / topology.bw_socket
        };
        v.bytes += bytes;
        *sender_time.entry(t.from).or_default() += seconds + topology.latency;
    }
    v.time_s = sender_time.values().fold(0.0, |m, &t| m.max(t));
    v
}

pub fn volume_report(
    direct: &CommPlan,
    hierarchical: &CommPlan,
    slots: &[Slot],
    topology: &Topology,
    ffactor: usize,
    precision: Precision,
) -> Result<VolumeReport> {
    check_slots(slots, direct.pd)?;
    let eb = precision.element_bytes();
    let per = (eb * ffactor) as u64;
    let get = |plan: &CommPlan, level: Level| -> Result<LevelVolume> {
        let l = plan
            .level(level)
            .ok_or_else(|| Error::InvalidConfig(format!("plan has no {} level", level.name())))?;
        Ok(level_volume(l, slots, topology, per))
    };
    let d = get(direct, Level::Direct)?;
    let (s, n, g) = (
        get(hierarchical, Level::Socket)?,
        get(hierarchical, Level::Node)?,
        get(hierarchical, Level::Global)?,
    );
    let hier_inter = s.inter_node_bytes + n.inter_node_bytes + g.inter_node_bytes;
    Ok(VolumeReport {
        ffactor,
        element_bytes: eb,
        direct: d,
        socket: s,
        node: n,
        global: g,
        retained_bytes: hierarchical.retained.map(|r| r as u64 * per),
        reduction_percent: if d.inter_node_bytes == 0 {
            0.0
        } else {
            100.0 * (1.0 - hier_inter as f64 / d.inter_node_bytes as f64)
        },
        direct_time_s: d.time_s,
        hierarchical_time_s: s.time_s + n.time_s + g.time_s,
        effective_bandwidth: if g.time_s > 0.0 {
            g.inter_node_bytes as f64 / g.time_s
        } else {
            0.0
        },
    })
}

/// Per-minibatch phase times in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseTimes {
    pub kernel: f64,
    pub local_comm: f64,
    pub global_comm: f64,
}

/// Makespan of `batches` minibatches. With overlap, the global exchange of
/// one minibatch runs under the local work of the next.
pub fn estimate_makespan(times: PhaseTimes, batches: usize, overlap: bool) -> Result<f64> {
    let PhaseTimes {
        kernel,
        local_comm,
        global_comm,
    } = times;
    if batches == 0
        || [kernel, local_comm, global_comm]
            .iter()
            .any(|t| !(*t >= 0.0))
    {
        return Err(Error::InvalidConfig(
            "makespan needs nonnegative times and at least one minibatch".into(),
        ));
    }
    let local = kernel + local_comm;
    let b = batches as f64;
    Ok(if overlap {
        local + global_comm + (b - 1.0) * local.max(global_comm)
    } else {
        b * (local + global_comm)
    })
}
