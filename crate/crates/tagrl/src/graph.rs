//! Graph data structures: the immutable physical network, the mutable
//! logical graph used by the encoder, adjacency normalization, all-pairs
//! hop distances, a clustered synthetic topology generator, and topology
//! file I/O.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::linalg::Mat;
use crate::rng;
use crate::Result;

/// Dense node index in `[0, n)`.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default,
)]
#[serde(transparent)]
pub struct NodeId(pub usize);

impl std::fmt::Display for NodeId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Undirected node pair in canonical `(min, max)` order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Edge(pub NodeId, pub NodeId);

impl Edge {
    pub fn new(u: NodeId, v: NodeId) -> Self {
        assert_ne!(u, v, "self-loop edge");
        if u < v {
            Edge(u, v)
        } else {
            Edge(v, u)
        }
    }

    pub fn endpoints(&self) -> (NodeId, NodeId) {
        (self.0, self.1)
    }
}

/// Static per-link attributes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkAttrs {
    /// Demand-units the link can carry per episode.
    pub capacity: f64,
    /// Uncongested latency in milliseconds.
    pub base_latency_ms: f64,
}

impl LinkAttrs {
    fn validate(&self) -> Result<()> {
        if !(self.capacity.is_finite() && self.capacity > 0.0) {
            return Err(Error::InvalidLinkAttr(format!(
                "capacity must be positive and finite, got {}",
                self.capacity
            )));
        }
        if !(self.base_latency_ms.is_finite() && self.base_latency_ms > 0.0) {
            return Err(Error::InvalidLinkAttr(format!(
                "base latency must be positive and finite, got {}",
                self.base_latency_ms
            )));
        }
        Ok(())
    }
}

/// The fixed network: every routing decision is constrained by this graph,
/// regardless of how the logical graph evolves.
#[derive(Debug, Clone, PartialEq)]
pub struct PhysicalTopology {
    n: usize,
    name: String,
    links: Vec<(Edge, LinkAttrs)>,
    /// Per node: (neighbor, link index), sorted by neighbor.
    neighbors: Vec<Vec<(NodeId, usize)>>,
    edge_index: BTreeMap<Edge, usize>,
}

impl PhysicalTopology {
    /// Validates: indices in range, no self-loops, no duplicates, positive
    /// finite attributes, connectivity. Edges are stored in canonical
    /// sorted order.
    pub fn new(n: usize, name: &str, edges: Vec<(usize, usize, LinkAttrs)>) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidParameter("topology needs at least one node".into()));
        }
        let mut links: Vec<(Edge, LinkAttrs)> = Vec::with_capacity(edges.len());
        let mut seen = BTreeSet::new();
        for (u, v, attrs) in edges {
            if u >= n {
                return Err(Error::NodeOutOfRange { index: u, n });
            }
            if v >= n {
                return Err(Error::NodeOutOfRange { index: v, n });
            }
            if u == v {
                return Err(Error::SelfLoop(u));
            }
            attrs.validate()?;
            let edge = Edge::new(NodeId(u), NodeId(v));
            if !seen.insert(edge) {
                return Err(Error::DuplicateEdge(edge.0 .0, edge.1 .0));
            }
            links.push((edge, attrs));
        }
        links.sort_by_key(|(e, _)| *e);

        let mut neighbors = vec![Vec::new(); n];
        let mut edge_index = BTreeMap::new();
        for (idx, (edge, _)) in links.iter().enumerate() {
            neighbors[edge.0 .0].push((edge.1, idx));
            neighbors[edge.1 .0].push((edge.0, idx));
            edge_index.insert(*edge, idx);
        }
        for list in &mut neighbors {
            list.sort();
        }

        let topo = PhysicalTopology {
            n,
            name: name.to_string(),
            links,
            neighbors,
            edge_index,
        };
        if n > 1 && !topo.is_connected() {
            return Err(Error::NotConnected);
        }
        Ok(topo)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn num_edges(&self) -> usize {
        self.links.len()
    }

    pub fn links(&self) -> &[(Edge, LinkAttrs)] {
        &self.links
    }

    pub fn attrs(&self, idx: usize) -> &LinkAttrs {
        &self.links[idx].1
    }

    pub fn edge_idx(&self, edge: Edge) -> Option<usize> {
        self.edge_index.get(&edge).copied()
    }

    pub fn has_edge(&self, edge: Edge) -> bool {
        self.edge_index.contains_key(&edge)
    }

    /// Physical neighbors of `v`, ascending.
    pub fn neighbors(&self, v: NodeId) -> impl Iterator<Item = NodeId> + '_ {
        self.neighbors[v.0].iter().map(|(u, _)| *u)
    }

    pub fn degree(&self, v: NodeId) -> usize {
        self.neighbors[v.0].len()
    }

    pub fn incident_links(&self, v: NodeId) -> impl Iterator<Item = (NodeId, usize)> + '_ {
        self.neighbors[v.0].iter().copied()
    }

    pub fn edge_set(&self) -> BTreeSet<Edge> {
        self.links.iter().map(|(e, _)| *e).collect()
    }

    fn is_connected(&self) -> bool {
        let mut seen = vec![false; self.n];
        let mut queue = VecDeque::from([0usize]);
        seen[0] = true;
        let mut count = 1;
        while let Some(u) = queue.pop_front() {
            for (v, _) in &self.neighbors[u] {
                if !seen[v.0] {
                    seen[v.0] = true;
                    count += 1;
                    queue.push_back(v.0);
                }
            }
        }
        count == self.n
    }

    /// Minimum spanning tree by base latency (Kruskal; ties broken by the
    /// canonical edge order). The logical graph never drops these edges.
    pub fn min_latency_spanning_tree(&self) -> BTreeSet<Edge> {
        let mut order: Vec<usize> = (0..self.links.len()).collect();
        order.sort_by(|&a, &b| {
            self.links[a]
                .1
                .base_latency_ms
                .partial_cmp(&self.links[b].1.base_latency_ms)
                .unwrap()
                .then(self.links[a].0.cmp(&self.links[b].0))
        });
        let mut parent: Vec<usize> = (0..self.n).collect();
        fn find(parent: &mut [usize], mut x: usize) -> usize {
            while parent[x] != x {
                parent[x] = parent[parent[x]];
                x = parent[x];
            }
            x
        }
        let mut tree = BTreeSet::new();
        for idx in order {
            let (edge, _) = self.links[idx];
            let (ra, rb) = (find(&mut parent, edge.0 .0), find(&mut parent, edge.1 .0));
            if ra != rb {
                parent[ra] = rb;
                tree.insert(edge);
            }
        }
        tree
    }

    /// Single-source minimum base-latency distances and predecessors
    /// (Dijkstra; ties relaxed strictly, so the predecessor tree is
    /// deterministic for a given topology).
    pub fn min_latency_paths(&self, src: NodeId) -> (Vec<f64>, Vec<Option<NodeId>>) {
        let mut dist = vec![f64::INFINITY; self.n];
        let mut prev: Vec<Option<NodeId>> = vec![None; self.n];
        let mut done = vec![false; self.n];
        dist[src.0] = 0.0;
        for _ in 0..self.n {
            let mut u = None;
            let mut best = f64::INFINITY;
            for i in 0..self.n {
                if !done[i] && dist[i] < best {
                    best = dist[i];
                    u = Some(i);
                }
            }
            let Some(u) = u else { break };
            done[u] = true;
            for &(v, idx) in &self.neighbors[u] {
                let cand = dist[u] + self.links[idx].1.base_latency_ms;
                if cand < dist[v.0] {
                    dist[v.0] = cand;
                    prev[v.0] = Some(NodeId(u));
                }
            }
        }
        (dist, prev)
    }
}

/// The encoder's message-passing graph. Starts as a copy of the physical
/// edge set and is rewired between epochs; it may contain virtual edges
/// that no packet can traverse.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogicalGraph {
    n: usize,
    edges: BTreeSet<Edge>,
}

impl LogicalGraph {
    pub fn new(n: usize, edges: BTreeSet<Edge>) -> Result<Self> {
        for e in &edges {
            if e.1 .0 >= n {
                return Err(Error::NodeOutOfRange { index: e.1 .0, n });
            }
        }
        Ok(LogicalGraph { n, edges })
    }

    pub fn from_physical(topology: &PhysicalTopology) -> Self {
        LogicalGraph {
            n: topology.n(),
            edges: topology.edge_set(),
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &BTreeSet<Edge> {
        &self.edges
    }

    pub fn contains(&self, edge: Edge) -> bool {
        self.edges.contains(&edge)
    }

    /// Symmetric 0/1 matrix with zero diagonal.
    pub fn adjacency(&self) -> Mat {
        let mut a = Mat::zeros(self.n, self.n);
        for e in &self.edges {
            a[(e.0 .0, e.1 .0)] = 1.0;
            a[(e.1 .0, e.0 .0)] = 1.0;
        }
        a
    }

    /// Neighbor lists (ascending) for attention and mean aggregation.
    pub fn neighbor_lists(&self) -> Vec<Vec<NodeId>> {
        let mut lists = vec![Vec::new(); self.n];
        for e in &self.edges {
            lists[e.0 .0].push(e.1);
            lists[e.1 .0].push(e.0);
        }
        for l in &mut lists {
            l.sort();
        }
        lists
    }

    /// Connectivity of the subgraph restricted to physical edges.
    pub fn physical_restriction_connected(&self, topology: &PhysicalTopology) -> bool {
        let mut adj = vec![Vec::new(); self.n];
        for e in &self.edges {
            if topology.has_edge(*e) {
                adj[e.0 .0].push(e.1 .0);
                adj[e.1 .0].push(e.0 .0);
            }
        }
        let mut seen = vec![false; self.n];
        let mut queue = VecDeque::from([0usize]);
        seen[0] = true;
        let mut count = 1;
        while let Some(u) = queue.pop_front() {
            for &v in &adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    count += 1;
                    queue.push_back(v);
                }
            }
        }
        count == self.n
    }
}

/// All-pairs unweighted hop distances.
#[derive(Debug, Clone, PartialEq)]
pub struct ShortestPathTable {
    n: usize,
    spd: Vec<u32>,
    diameter: u32,
}

impl ShortestPathTable {
    pub fn dist(&self, i: NodeId, j: NodeId) -> u32 {
        self.spd[i.0 * self.n + j.0]
    }

    pub fn diameter(&self) -> u32 {
        self.diameter
    }

    pub fn n(&self) -> usize {
        self.n
    }
}

/// Binary adjacency matrix of the physical topology.
pub fn build_adjacency(topology: &PhysicalTopology) -> Mat {
    let mut a = Mat::zeros(topology.n(), topology.n());
    for (edge, _) in topology.links() {
        a[(edge.0 .0, edge.1 .0)] = 1.0;
        a[(edge.1 .0, edge.0 .0)] = 1.0;
    }
    a
}

/// Symmetric normalization `D̃^{-1/2}(A + I)D̃^{-1/2}` where `D̃` is the
/// degree matrix of `A + I`. An isolated node degenerates to a plain
/// self-loop entry of 1.
pub fn normalize_adjacency(a: &Mat) -> Mat {
    let n = a.rows();
    assert_eq!(n, a.cols(), "adjacency must be square");
    let mut inv_sqrt_deg = vec![0.0; n];
    for i in 0..n {
        let deg: f64 = a.row(i).iter().sum::<f64>() + 1.0;
        inv_sqrt_deg[i] = 1.0 / deg.sqrt();
    }
    Mat::from_fn(n, n, |i, j| {
        let with_loop = if i == j { a[(i, j)] + 1.0 } else { a[(i, j)] };
        with_loop * inv_sqrt_deg[i] * inv_sqrt_deg[j]
    })
}

/// BFS hop distances from every node; errors on a disconnected graph.
pub fn shortest_path_distances(topology: &PhysicalTopology) -> Result<ShortestPathTable> {
    let n = topology.n();
    let mut spd = vec![u32::MAX; n * n];
    for src in 0..n {
        let row = &mut spd[src * n..(src + 1) * n];
        row[src] = 0;
        let mut queue = VecDeque::from([src]);
        while let Some(u) = queue.pop_front() {
            let du = row[u];
            for v in topology.neighbors(NodeId(u)) {
                if row[v.0] == u32::MAX {
                    row[v.0] = du + 1;
                    queue.push_back(v.0);
                }
            }
        }
        if row.contains(&u32::MAX) {
            return Err(Error::NotConnected);
        }
    }
    let diameter = spd.iter().copied().max().unwrap_or(0);
    Ok(ShortestPathTable { n, spd, diameter })
}

/// Knobs for the clustered synthetic generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub n: usize,
    pub clusters: usize,
    /// Edge probability inside a cluster.
    pub p_intra: f64,
    /// Edge probability between clusters (on top of the backbone).
    pub p_inter: f64,
    /// Regenerate until at least this many edges.
    pub min_edges: usize,
    pub capacity_range: (f64, f64),
    pub latency_range_ms: (f64, f64),
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            n: 40,
            clusters: 5,
            p_intra: 0.6,
            p_inter: 0.06,
            min_edges: 100,
            capacity_range: (5.0, 15.0),
            latency_range_ms: (1.0, 10.0),
        }
    }
}

impl GeneratorConfig {
    /// Same densities at a different size; the edge floor scales with the
    /// number of node pairs (100 at the default 40 nodes).
    pub fn for_size(n: usize, clusters: usize) -> Self {
        let default_pairs = 40 * 39 / 2;
        let pairs = n * (n - 1) / 2;
        let min_edges = ((100 * pairs + default_pairs / 2) / default_pairs).max(n - 1);
        GeneratorConfig {
            n,
            clusters,
            min_edges,
            ..GeneratorConfig::default()
        }
    }
}

/// Clustered topology with dense intra-cluster links, sparse inter-cluster
/// links, and a guaranteed backbone joining consecutive clusters.
/// Deterministic for a seed; regenerates with an incremented sub-seed until
/// the result is connected and meets the edge floor.
pub fn generate_geant_like(seed: u64, config: &GeneratorConfig) -> Result<PhysicalTopology> {
    let n = config.n;
    let clusters = config.clusters;
    if clusters < 2 || n < clusters {
        return Err(Error::InvalidParameter(format!(
            "need n >= clusters >= 2, got n={n}, clusters={clusters}"
        )));
    }
    const MAX_ATTEMPTS: usize = 100;
    for attempt in 0..MAX_ATTEMPTS {
        let mut rand = rng::stream(seed, "topology", &[attempt as u64]);
        // Contiguous balanced blocks: node i belongs to cluster i*c/n.
        let cluster_of = |i: usize| i * clusters / n;
        let members: Vec<Vec<usize>> = (0..clusters)
            .map(|c| (0..n).filter(|&i| cluster_of(i) == c).collect())
            .collect();

        let mut edges: BTreeSet<(usize, usize)> = BTreeSet::new();
        // Backbone: one link between each pair of consecutive clusters.
        for c in 0..clusters - 1 {
            let a = members[c][rand.random_range(0..members[c].len())];
            let b = members[c + 1][rand.random_range(0..members[c + 1].len())];
            edges.insert((a.min(b), a.max(b)));
        }
        for i in 0..n {
            for j in i + 1..n {
                let p = if cluster_of(i) == cluster_of(j) {
                    config.p_intra
                } else {
                    config.p_inter
                };
                if rand.random_bool(p) {
                    edges.insert((i, j));
                }
            }
        }

        // Attributes are drawn in canonical edge order so the result does
        // not depend on insertion order.
        let with_attrs: Vec<(usize, usize, LinkAttrs)> = edges
            .iter()
            .map(|&(u, v)| {
                let capacity =
                    rand.random_range(config.capacity_range.0..config.capacity_range.1);
                let base_latency_ms =
                    rand.random_range(config.latency_range_ms.0..config.latency_range_ms.1);
                (
                    u,
                    v,
                    LinkAttrs {
                        capacity,
                        base_latency_ms,
                    },
                )
            })
            .collect();

        if with_attrs.len() < config.min_edges {
            continue;
        }
        let name = format!("geant-like-n{n}-c{clusters}-seed{seed}");
        match PhysicalTopology::new(n, &name, with_attrs) {
            Ok(t) => return Ok(t),
            Err(Error::NotConnected) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(Error::GenerationFailed(MAX_ATTEMPTS))
}

#[derive(Serialize, Deserialize)]
struct TopologyFile {
    name: String,
    n: usize,
    edges: Vec<TopologyFileEdge>,
}

#[derive(Serialize, Deserialize)]
struct TopologyFileEdge {
    u: usize,
    v: usize,
    capacity: f64,
    base_latency_ms: f64,
}

/// Serialize with canonical edge order (u < v, sorted) for byte-stable
/// round trips.
pub fn save_topology(topology: &PhysicalTopology, path: &Path) -> Result<()> {
    let file = TopologyFile {
        name: topology.name().to_string(),
        n: topology.n(),
        edges: topology
            .links()
            .iter()
            .map(|(e, attrs)| TopologyFileEdge {
                u: e.0 .0,
                v: e.1 .0,
                capacity: attrs.capacity,
                base_latency_ms: attrs.base_latency_ms,
            })
            .collect(),
    };
    let json = serde_json::to_string_pretty(&file).expect("topology serialization");
    std::fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
}

pub fn load_topology(path: &Path) -> Result<PhysicalTopology> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: TopologyFile = serde_json::from_str(&text).map_err(|e| Error::MalformedFile {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    PhysicalTopology::new(
        file.n,
        &file.name,
        file.edges
            .iter()
            .map(|e| {
                (
                    e.u,
                    e.v,
                    LinkAttrs {
                        capacity: e.capacity,
                        base_latency_ms: e.base_latency_ms,
                    },
                )
            })
            .collect(),
    )
}

#[cfg(test)]
pub(crate) fn path_topology(n: usize) -> PhysicalTopology {
    let attrs = LinkAttrs {
        capacity: 10.0,
        base_latency_ms: 1.0,
    };
    PhysicalTopology::new(
        n,
        "path",
        (0..n - 1).map(|i| (i, i + 1, attrs)).collect(),
    )
    .unwrap()
}
