//! The farm hierarchy: one global manager, L1 regions of boards (each board
//! holding worker DSPs and a front-end CPU) and L2/3 regions of worker PCs.
//!
//! Messages only travel along tree edges; each non-global node has one
//! parent link that can be up or down.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum NodeKind {
    GlobalManager,
    L1RegionalManager,
    L23RegionalManager,
    Board,
    WorkerDSP,
    FrontEndCPU,
    WorkerPC,
}

impl NodeKind {
    pub fn is_regional(self) -> bool {
        matches!(self, NodeKind::L1RegionalManager | NodeKind::L23RegionalManager)
    }

    pub fn is_worker(self) -> bool {
        matches!(self, NodeKind::WorkerDSP | NodeKind::WorkerPC)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Branch {
    Global,
    L1,
    L23,
}

/// Position of a node in the hierarchy. The variant fixes the node kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum NodeAddress {
    Global,
    L1Region { region: u16 },
    Board { region: u16, board: u16 },
    Dsp { region: u16, board: u16, slot: u16 },
    FrontEnd { region: u16, board: u16 },
    L23Region { region: u16 },
    Pc { region: u16, slot: u16 },
}

impl NodeAddress {
    pub fn kind(&self) -> NodeKind {
        match self {
            NodeAddress::Global => NodeKind::GlobalManager,
            NodeAddress::L1Region { .. } => NodeKind::L1RegionalManager,
            NodeAddress::Board { .. } => NodeKind::Board,
            NodeAddress::Dsp { .. } => NodeKind::WorkerDSP,
            NodeAddress::FrontEnd { .. } => NodeKind::FrontEndCPU,
            NodeAddress::L23Region { .. } => NodeKind::L23RegionalManager,
            NodeAddress::Pc { .. } => NodeKind::WorkerPC,
        }
    }

    pub fn branch(&self) -> Branch {
        match self {
            NodeAddress::Global => Branch::Global,
            NodeAddress::L1Region { .. }
            | NodeAddress::Board { .. }
            | NodeAddress::Dsp { .. }
            | NodeAddress::FrontEnd { .. } => Branch::L1,
            NodeAddress::L23Region { .. } | NodeAddress::Pc { .. } => Branch::L23,
        }
    }

    pub fn region(&self) -> Option<u16> {
        match *self {
            NodeAddress::Global => None,
            NodeAddress::L1Region { region }
            | NodeAddress::Board { region, .. }
            | NodeAddress::Dsp { region, .. }
            | NodeAddress::FrontEnd { region, .. }
            | NodeAddress::L23Region { region }
            | NodeAddress::Pc { region, .. } => Some(region),
        }
    }

    pub fn board(&self) -> Option<u16> {
        match *self {
            NodeAddress::Board { board, .. } | NodeAddress::Dsp { board, .. } | NodeAddress::FrontEnd { board, .. } => {
                Some(board)
            }
            _ => None,
        }
    }

    pub fn slot(&self) -> Option<u16> {
        match *self {
            NodeAddress::Dsp { slot, .. } | NodeAddress::Pc { slot, .. } => Some(slot),
            _ => None,
        }
    }

    /// Tree depth: global 0, regional 1, board/PC 2, DSP/front-end 3.
    pub fn depth(&self) -> usize {
        match self {
            NodeAddress::Global => 0,
            NodeAddress::L1Region { .. } | NodeAddress::L23Region { .. } => 1,
            NodeAddress::Board { .. } | NodeAddress::Pc { .. } => 2,
            NodeAddress::Dsp { .. } | NodeAddress::FrontEnd { .. } => 3,
        }
    }

    /// Structural parent, independent of any farm instance.
    pub fn parent_address(&self) -> Option<NodeAddress> {
        match *self {
            NodeAddress::Global => None,
            NodeAddress::L1Region { .. } | NodeAddress::L23Region { .. } => Some(NodeAddress::Global),
            NodeAddress::Board { region, .. } => Some(NodeAddress::L1Region { region }),
            NodeAddress::Dsp { region, board, .. } | NodeAddress::FrontEnd { region, board } => {
                Some(NodeAddress::Board { region, board })
            }
            NodeAddress::Pc { region, .. } => Some(NodeAddress::L23Region { region }),
        }
    }

    /// The regional manager responsible for this node, if any.
    pub fn regional_manager(&self) -> Option<NodeAddress> {
        match self.branch() {
            Branch::Global => None,
            Branch::L1 => self.region().map(|region| NodeAddress::L1Region { region }),
            Branch::L23 => self.region().map(|region| NodeAddress::L23Region { region }),
        }
    }

    /// Smallest set of components lost together: a DSP's board, otherwise itself.
    pub fn failure_domain(&self) -> NodeAddress {
        match *self {
            NodeAddress::Dsp { region, board, .. } | NodeAddress::FrontEnd { region, board } => {
                NodeAddress::Board { region, board }
            }
            other => other,
        }
    }

    /// True if `self` is `other` or lies below it.
    pub fn is_within(&self, other: &NodeAddress) -> bool {
        let mut cur = Some(*self);
        while let Some(node) = cur {
            if node == *other {
                return true;
            }
            cur = node.parent_address();
        }
        false
    }
}

impl fmt::Display for NodeAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NodeAddress::Global => write!(f, "global"),
            NodeAddress::L1Region { region } => write!(f, "L1/r{region}"),
            NodeAddress::Board { region, board } => write!(f, "L1/r{region}/b{board}"),
            NodeAddress::Dsp { region, board, slot } => write!(f, "L1/r{region}/b{board}/s{slot}"),
            NodeAddress::FrontEnd { region, board } => write!(f, "L1/r{region}/b{board}/fe"),
            NodeAddress::L23Region { region } => write!(f, "L23/r{region}"),
            NodeAddress::Pc { region, slot } => write!(f, "L23/r{region}/s{slot}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("malformed node address `{0}`")]
pub struct AddressParseError(pub String);

impl FromStr for NodeAddress {
    type Err = AddressParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || AddressParseError(s.to_string());
        let index = |part: &str, prefix: char| -> Result<u16, AddressParseError> {
            part.strip_prefix(prefix).and_then(|n| n.parse().ok()).ok_or_else(bad)
        };
        if s == "global" {
            return Ok(NodeAddress::Global);
        }
        let parts: Vec<&str> = s.split('/').collect();
        match parts.as_slice() {
            ["L1", r] => Ok(NodeAddress::L1Region { region: index(r, 'r')? }),
            ["L1", r, b] => Ok(NodeAddress::Board { region: index(r, 'r')?, board: index(b, 'b')? }),
            ["L1", r, b, "fe"] => Ok(NodeAddress::FrontEnd { region: index(r, 'r')?, board: index(b, 'b')? }),
            ["L1", r, b, s] => Ok(NodeAddress::Dsp { region: index(r, 'r')?, board: index(b, 'b')?, slot: index(s, 's')? }),
            ["L23", r] => Ok(NodeAddress::L23Region { region: index(r, 'r')? }),
            ["L23", r, s] => Ok(NodeAddress::Pc { region: index(r, 'r')?, slot: index(s, 's')? }),
            _ => Err(bad()),
        }
    }
}

impl Serialize for NodeAddress {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for NodeAddress {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum NodeStatus {
    InService,
    OutOfService,
    Spare,
    /// Pulled from the spare pool (or another duty) to serve in place of a lost node.
    Reassigned,
}

impl NodeStatus {
    pub fn is_dispatchable(self) -> bool {
        matches!(self, NodeStatus::InService | NodeStatus::Reassigned)
    }
}

/// Farm dimensions. `spares_per_region` adds standby PCs (status `Spare`) to
/// each L2/3 region after the regular slots.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FarmConfig {
    pub l1_regions: u16,
    pub boards_per_region: u16,
    pub dsps_per_board: u16,
    pub l23_regions: u16,
    pub pcs_per_region: u16,
    #[serde(default)]
    pub spares_per_region: u16,
}

impl FarmConfig {
    /// Six L1 regions of 100 four-DSP boards; 25 L2/3 regions of 100 PCs.
    pub const FULL_SCALE: FarmConfig = FarmConfig {
        l1_regions: 6,
        boards_per_region: 100,
        dsps_per_board: 4,
        l23_regions: 25,
        pcs_per_region: 100,
        spares_per_region: 0,
    };

    /// One L1 region of six boards (24 DSPs) and one region of 25 PCs.
    pub const DESK: FarmConfig = FarmConfig {
        l1_regions: 1,
        boards_per_region: 6,
        dsps_per_board: 4,
        l23_regions: 1,
        pcs_per_region: 25,
        spares_per_region: 0,
    };

    pub fn validate(&self) -> Result<(), TopologyError> {
        let fields = [
            ("l1_regions", self.l1_regions),
            ("boards_per_region", self.boards_per_region),
            ("dsps_per_board", self.dsps_per_board),
            ("l23_regions", self.l23_regions),
            ("pcs_per_region", self.pcs_per_region),
        ];
        for (name, value) in fields {
            if value == 0 {
                return Err(TopologyError::InvalidConfig(format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }

    pub fn dsp_count(&self) -> usize {
        self.l1_regions as usize * self.boards_per_region as usize * self.dsps_per_board as usize
    }

    pub fn pc_count(&self) -> usize {
        self.l23_regions as usize * (self.pcs_per_region as usize + self.spares_per_region as usize)
    }

    /// Closed-form node count per kind.
    pub fn expected_counts(&self) -> BTreeMap<NodeKind, usize> {
        let boards = self.l1_regions as usize * self.boards_per_region as usize;
        BTreeMap::from([
            (NodeKind::GlobalManager, 1),
            (NodeKind::L1RegionalManager, self.l1_regions as usize),
            (NodeKind::L23RegionalManager, self.l23_regions as usize),
            (NodeKind::Board, boards),
            (NodeKind::WorkerDSP, self.dsp_count()),
            (NodeKind::FrontEndCPU, boards),
            (NodeKind::WorkerPC, self.pc_count()),
        ])
    }

    pub fn contains(&self, addr: &NodeAddress) -> bool {
        let l1 = |r: u16| r < self.l1_regions;
        let l23 = |r: u16| r < self.l23_regions;
        match *addr {
            NodeAddress::Global => true,
            NodeAddress::L1Region { region } => l1(region),
            NodeAddress::Board { region, board } | NodeAddress::FrontEnd { region, board } => {
                l1(region) && board < self.boards_per_region
            }
            NodeAddress::Dsp { region, board, slot } => {
                l1(region) && board < self.boards_per_region && slot < self.dsps_per_board
            }
            NodeAddress::L23Region { region } => l23(region),
            NodeAddress::Pc { region, slot } => l23(region) && slot < self.pcs_per_region + self.spares_per_region,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TopologyError {
    #[error("invalid farm config: {0}")]
    InvalidConfig(String),
    #[error("unknown node address {0}")]
    UnknownAddress(NodeAddress),
    #[error("link above {0} is down")]
    LinkDown(NodeAddress),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeRecord {
    pub kind: NodeKind,
    pub status: NodeStatus,
    /// State of the link to the parent; always true for the global manager.
    pub link_up: bool,
}

#[derive(Debug, Clone)]
pub struct Farm {
    config: FarmConfig,
    nodes: BTreeMap<NodeAddress, NodeRecord>,
}

pub fn build_farm(config: FarmConfig) -> Result<Farm, TopologyError> {
    config.validate()?;
    let mut nodes = BTreeMap::new();
    let mut add = |addr: NodeAddress, status: NodeStatus| {
        nodes.insert(addr, NodeRecord { kind: addr.kind(), status, link_up: true });
    };
    add(NodeAddress::Global, NodeStatus::InService);
    for region in 0..config.l1_regions {
        add(NodeAddress::L1Region { region }, NodeStatus::InService);
        for board in 0..config.boards_per_region {
            add(NodeAddress::Board { region, board }, NodeStatus::InService);
            add(NodeAddress::FrontEnd { region, board }, NodeStatus::InService);
            for slot in 0..config.dsps_per_board {
                add(NodeAddress::Dsp { region, board, slot }, NodeStatus::InService);
            }
        }
    }
    for region in 0..config.l23_regions {
        add(NodeAddress::L23Region { region }, NodeStatus::InService);
        for slot in 0..config.pcs_per_region + config.spares_per_region {
            let status = if slot < config.pcs_per_region { NodeStatus::InService } else { NodeStatus::Spare };
            add(NodeAddress::Pc { region, slot }, status);
        }
    }
    Ok(Farm { config, nodes })
}

impl Farm {
    pub fn config(&self) -> &FarmConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn contains(&self, addr: &NodeAddress) -> bool {
        self.nodes.contains_key(addr)
    }

    pub fn node(&self, addr: &NodeAddress) -> Result<&NodeRecord, TopologyError> {
        self.nodes.get(addr).ok_or(TopologyError::UnknownAddress(*addr))
    }

    pub fn nodes(&self) -> impl Iterator<Item = (&NodeAddress, &NodeRecord)> {
        self.nodes.iter()
    }

    pub fn status(&self, addr: &NodeAddress) -> Result<NodeStatus, TopologyError> {
        self.node(addr).map(|n| n.status)
    }

    pub fn link_up(&self, addr: &NodeAddress) -> Result<bool, TopologyError> {
        self.node(addr).map(|n| n.link_up)
    }

    pub(crate) fn set_status(&mut self, addr: &NodeAddress, status: NodeStatus) -> Result<NodeStatus, TopologyError> {
        let node = self.nodes.get_mut(addr).ok_or(TopologyError::UnknownAddress(*addr))?;
        Ok(std::mem::replace(&mut node.status, status))
    }

    pub(crate) fn set_link(&mut self, addr: &NodeAddress, up: bool) -> Result<(), TopologyError> {
        let node = self.nodes.get_mut(addr).ok_or(TopologyError::UnknownAddress(*addr))?;
        if *addr != NodeAddress::Global {
            node.link_up = up;
        }
        Ok(())
    }

    pub fn parent(&self, addr: &NodeAddress) -> Result<Option<NodeAddress>, TopologyError> {
        self.node(addr)?;
        Ok(addr.parent_address())
    }

    pub fn children(&self, addr: &NodeAddress) -> Result<Vec<NodeAddress>, TopologyError> {
        self.node(addr)?;
        Ok(self.nodes.keys().filter(|n| n.parent_address() == Some(*addr)).copied().collect())
    }

    /// All nodes strictly below `addr`.
    pub fn descendants(&self, addr: &NodeAddress) -> Vec<NodeAddress> {
        self.nodes.keys().filter(|n| *n != addr && n.is_within(addr)).copied().collect()
    }

    pub fn count(&self, kind: NodeKind) -> usize {
        self.nodes.values().filter(|n| n.kind == kind).count()
    }

    pub fn counts(&self) -> BTreeMap<NodeKind, usize> {
        let mut out = BTreeMap::new();
        for node in self.nodes.values() {
            *out.entry(node.kind).or_insert(0) += 1;
        }
        out
    }

    pub fn addresses_of(&self, kind: NodeKind) -> impl Iterator<Item = NodeAddress> + '_ {
        self.nodes.iter().filter(move |(_, n)| n.kind == kind).map(|(a, _)| *a)
    }

    /// Unique tree path from `from` to `to` through their lowest common ancestor,
    /// failing with `LinkDown` on the first failed edge.
    pub fn route(&self, from: &NodeAddress, to: &NodeAddress) -> Result<Vec<NodeAddress>, TopologyError> {
        let path = self.path(from, to)?;
        for pair in path.windows(2) {
            let child = if pair[0].parent_address() == Some(pair[1]) { pair[0] } else { pair[1] };
            if !self.nodes[&child].link_up {
                return Err(TopologyError::LinkDown(child));
            }
        }
        Ok(path)
    }

    /// Tree path ignoring link state.
    pub fn path(&self, from: &NodeAddress, to: &NodeAddress) -> Result<Vec<NodeAddress>, TopologyError> {
        self.node(from)?;
        self.node(to)?;
        let up_from = ancestors(from);
        let up_to = ancestors(to);
        let lca = *up_from.iter().find(|a| up_to.contains(a)).expect("tree shares the global root");
        let mut path: Vec<NodeAddress> = up_from.iter().take_while(|a| **a != lca).copied().collect();
        path.push(lca);
        let down: Vec<NodeAddress> = up_to.iter().take_while(|a| **a != lca).copied().collect();
        path.extend(down.into_iter().rev());
        Ok(path)
    }
}

fn ancestors(addr: &NodeAddress) -> Vec<NodeAddress> {
    let mut out = vec![*addr];
    let mut cur = *addr;
    while let Some(p) = cur.parent_address() {
        out.push(p);
        cur = p;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg(a: u16, b: u16, c: u16, d: u16, e: u16) -> FarmConfig {
        FarmConfig {
            l1_regions: a,
            boards_per_region: b,
            dsps_per_board: c,
            l23_regions: d,
            pcs_per_region: e,
            spares_per_region: 0,
        }
    }

    #[test]
    fn full_scale_counts() {
        let farm = build_farm(FarmConfig::FULL_SCALE).unwrap();
        assert_eq!(farm.count(NodeKind::WorkerPC), 2500);
        assert_eq!(farm.count(NodeKind::WorkerDSP), 2400);
        assert_eq!(farm.count(NodeKind::FrontEndCPU), 600);
        assert_eq!(farm.count(NodeKind::L1RegionalManager) + farm.count(NodeKind::L23RegionalManager), 31);
        assert_eq!(farm.count(NodeKind::GlobalManager), 1);
    }

    #[test]
    fn minimal_config_has_seven_nodes() {
        let farm = build_farm(cfg(1, 1, 1, 1, 1)).unwrap();
        // global, two regionals, board, DSP, front-end, PC
        assert_eq!(farm.len(), 7);
        assert!(farm.nodes().all(|(_, n)| n.status == NodeStatus::InService));
    }

    #[test]
    fn desk_config_counts() {
        let farm = build_farm(FarmConfig::DESK).unwrap();
        assert_eq!(farm.count(NodeKind::WorkerDSP), 24);
        assert_eq!(farm.count(NodeKind::WorkerPC), 25);
    }

    #[test]
    fn zero_counts_are_rejected() {
        assert!(matches!(build_farm(cfg(1, 0, 4, 1, 25)), Err(TopologyError::InvalidConfig(m)) if m.contains("boards_per_region")));
        assert!(build_farm(cfg(1, 1, 1, 0, 1)).is_err());
    }

    #[test]
    fn spares_are_standby_pcs() {
        let farm = build_farm(FarmConfig { spares_per_region: 2, ..FarmConfig::DESK }).unwrap();
        assert_eq!(farm.count(NodeKind::WorkerPC), 27);
        assert_eq!(farm.status(&NodeAddress::Pc { region: 0, slot: 25 }).unwrap(), NodeStatus::Spare);
        assert_eq!(farm.status(&NodeAddress::Pc { region: 0, slot: 24 }).unwrap(), NodeStatus::InService);
    }

    #[test]
    fn parents() {
        let farm = build_farm(FarmConfig { boards_per_region: 6, ..cfg(1, 6, 4, 1, 2) }).unwrap();
        let dsp: NodeAddress = "L1/r0/b3/s2".parse().unwrap();
        assert_eq!(farm.parent(&dsp).unwrap(), Some("L1/r0/b3".parse().unwrap()));
        assert_eq!(farm.parent(&NodeAddress::Global).unwrap(), None);
        assert_eq!(farm.parent(&NodeAddress::L23Region { region: 0 }).unwrap(), Some(NodeAddress::Global));
        assert_eq!(farm.parent(&"L1/r4".parse().unwrap()), Err(TopologyError::UnknownAddress(NodeAddress::L1Region { region: 4 })));
    }

    #[test]
    fn routes() {
        let farm = build_farm(cfg(1, 1, 1, 1, 1)).unwrap();
        let dsp = NodeAddress::Dsp { region: 0, board: 0, slot: 0 };
        let board = NodeAddress::Board { region: 0, board: 0 };
        let l1 = NodeAddress::L1Region { region: 0 };
        let pc = NodeAddress::Pc { region: 0, slot: 0 };
        assert_eq!(farm.route(&dsp, &l1).unwrap(), vec![dsp, board, l1]);
        assert_eq!(farm.route(&dsp, &dsp).unwrap(), vec![dsp]);
        // Hand enumeration on the minimal farm: DSP(3) and PC(2) meet at global.
        let cross = farm.route(&dsp, &pc).unwrap();
        assert_eq!(cross, vec![dsp, board, l1, NodeAddress::Global, NodeAddress::L23Region { region: 0 }, pc]);
        assert_eq!(cross.len(), dsp.depth() + pc.depth() + 1);
    }

    #[test]
    fn route_reports_failed_link() {
        let mut farm = build_farm(cfg(1, 2, 1, 1, 1)).unwrap();
        let board = NodeAddress::Board { region: 0, board: 1 };
        farm.set_link(&board, false).unwrap();
        let dsp = NodeAddress::Dsp { region: 0, board: 1, slot: 0 };
        assert_eq!(farm.route(&dsp, &NodeAddress::L1Region { region: 0 }), Err(TopologyError::LinkDown(board)));
        // Path inside the board is unaffected.
        assert!(farm.route(&dsp, &NodeAddress::FrontEnd { region: 0, board: 1 }).is_ok());
    }

    #[test]
    fn address_text_round_trips() {
        for text in ["global", "L1/r0", "L1/r2/b10", "L1/r0/b3/s2", "L1/r0/b3/fe", "L23/r4", "L23/r0/s99"] {
            let addr: NodeAddress = text.parse().unwrap();
            assert_eq!(addr.to_string(), text);
        }
        assert!("L1/r0/x".parse::<NodeAddress>().is_err());
        assert!("L9".parse::<NodeAddress>().is_err());
    }

    fn arb_config() -> impl Strategy<Value = FarmConfig> {
        (1u16..4, 1u16..6, 1u16..5, 1u16..4, 1u16..8, 0u16..3).prop_map(|(a, b, c, d, e, s)| FarmConfig {
            l1_regions: a,
            boards_per_region: b,
            dsps_per_board: c,
            l23_regions: d,
            pcs_per_region: e,
            spares_per_region: s,
        })
    }

    proptest! {
        #[test]
        fn counts_match_closed_form(config in arb_config()) {
            let farm = build_farm(config).unwrap();
            let counts = farm.counts();
            prop_assert_eq!(&counts, &config.expected_counts());
            prop_assert_eq!(counts.values().sum::<usize>(), farm.len());
        }

        #[test]
        fn routes_are_symmetric_tree_paths(config in arb_config(), i in 0usize..1000, j in 0usize..1000) {
            let farm = build_farm(config).unwrap();
            let all: Vec<NodeAddress> = farm.nodes().map(|(a, _)| *a).collect();
            let a = all[i % all.len()];
            let b = all[j % all.len()];
            let ab = farm.route(&a, &b).unwrap();
            let mut ba = farm.route(&b, &a).unwrap();
            ba.reverse();
            prop_assert_eq!(&ab, &ba);
            for pair in ab.windows(2) {
                prop_assert!(pair[0].parent_address() == Some(pair[1]) || pair[1].parent_address() == Some(pair[0]));
            }
        }
    }
}
