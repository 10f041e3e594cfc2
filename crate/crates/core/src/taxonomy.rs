//! Category taxonomy: loading, validation, level indexes and path arithmetic.
//!
//! Nodes are stored in ascending `node_id` order and addressed internally by
//! their dense position in that order. Child lists and level lists inherit the
//! same order, which keeps softmax and beam tie-breaking deterministic.
//!
//! Depths are 1-based: root-level nodes sit at depth 1.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hash::Fnv1a;

/// Deepest level a taxonomy may have.
pub const MAX_DEPTH: usize = 6;

/// Separator between segments of a rendered category path.
pub const PATH_SEPARATOR: &str = "//";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

#[derive(Error, Debug)]
pub enum TaxonomyError {
    #[error("failed to read taxonomy: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("line {line}: duplicate node id {id}")]
    DuplicateId { line: usize, id: u32 },
    #[error("line {line}: node {id} references missing parent {parent}")]
    OrphanParent { line: usize, id: u32, parent: u32 },
    #[error("line {line}: cycle through node ids {ids:?}")]
    Cycle { line: usize, ids: Vec<u32> },
    #[error("line {line}: duplicate name {name:?} under parent {parent:?}")]
    DuplicateSiblingName {
        line: usize,
        name: String,
        parent: Option<u32>,
    },
    #[error("line {line}: node {id} has depth {depth}, maximum is {MAX_DEPTH}")]
    TooDeep { line: usize, id: u32, depth: usize },
    #[error("taxonomy has no nodes")]
    Empty,
}

#[derive(Error, Debug, Clone, PartialEq)]
pub enum PathError {
    #[error("empty category path")]
    Empty,
    #[error("unknown segment {segment:?} at position {position} (resolved prefix {prefix:?})")]
    UnknownSegment {
        position: usize,
        segment: String,
        prefix: String,
    },
    #[error("unknown node id {0}")]
    UnknownNode(NodeId),
    #[error("nodes {0} and {1} are not parent and child")]
    NotContiguous(NodeId, NodeId),
    #[error("path does not start at a root-level node")]
    NotRooted,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaxonomyNode {
    pub id: NodeId,
    pub parent: Option<NodeId>,
    pub name: String,
    pub depth: usize,
}

/// A root-to-node sequence of node ids. May end at an internal node.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CategoryPath(Vec<NodeId>);

impl CategoryPath {
    /// Builds a path without validating it against a taxonomy.
    pub fn from_ids_unchecked(ids: Vec<NodeId>) -> Self {
        CategoryPath(ids)
    }

    pub fn ids(&self) -> &[NodeId] {
        &self.0
    }

    pub fn depth(&self) -> usize {
        self.0.len()
    }

    pub fn terminal(&self) -> NodeId {
        *self.0.last().expect("category paths are non-empty")
    }

    /// First `depth` nodes of the path, or `None` when the path is shallower.
    pub fn truncate(&self, depth: usize) -> Option<CategoryPath> {
        assert!(depth >= 1, "truncation depth is 1-based");
        (self.0.len() >= depth).then(|| CategoryPath(self.0[..depth].to_vec()))
    }

    /// Node at 1-based `depth`, if the path reaches it.
    pub fn at_depth(&self, depth: usize) -> Option<NodeId> {
        depth.checked_sub(1).and_then(|i| self.0.get(i).copied())
    }
}

/// Raw node description before validation.
#[derive(Debug, Clone)]
pub struct NodeSpec {
    pub id: u32,
    pub parent: Option<u32>,
    pub name: String,
    /// Source line for error reporting.
    pub line: usize,
}

#[derive(Debug, Clone)]
pub struct Taxonomy {
    nodes: Vec<TaxonomyNode>,
    index: HashMap<NodeId, usize>,
    parent: Vec<Option<usize>>,
    children: Vec<Vec<usize>>,
    levels: Vec<Vec<usize>>,
    fingerprint: u64,
}

impl Taxonomy {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, TaxonomyError> {
        let file = std::fs::File::open(path)?;
        Self::from_reader(std::io::BufReader::new(file))
    }

    /// Parses the `node_id<TAB>parent_id<TAB>name` format. Blank lines and
    /// lines starting with `#` are ignored.
    pub fn from_reader(reader: impl BufRead) -> Result<Self, TaxonomyError> {
        let mut specs = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line_no = i + 1;
            let line = line?;
            let line = line.strip_suffix('\r').unwrap_or(&line);
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(TaxonomyError::Malformed {
                    line: line_no,
                    reason: format!("expected 3 tab-separated fields, found {}", fields.len()),
                });
            }
            let id = parse_id(fields[0], line_no, "node_id")?;
            let parent = match fields[1].trim() {
                "" => None,
                p => Some(parse_id(p, line_no, "parent_id")?),
            };
            specs.push(NodeSpec {
                id,
                parent,
                name: fields[2].to_string(),
                line: line_no,
            });
        }
        Self::from_specs(specs)
    }

    pub fn from_tsv(text: &str) -> Result<Self, TaxonomyError> {
        Self::from_reader(text.as_bytes())
    }

    /// Validates and indexes a node list.
    pub fn from_specs(mut specs: Vec<NodeSpec>) -> Result<Self, TaxonomyError> {
        if specs.is_empty() {
            return Err(TaxonomyError::Empty);
        }
        for s in &specs {
            if s.id == 0 {
                return Err(TaxonomyError::Malformed {
                    line: s.line,
                    reason: "node_id must be positive".into(),
                });
            }
            if s.name.trim().is_empty() || s.name.contains(PATH_SEPARATOR) || s.name.contains('\t')
            {
                return Err(TaxonomyError::Malformed {
                    line: s.line,
                    reason: format!("invalid node name {:?}", s.name),
                });
            }
        }

        // Duplicate detection reports the later line.
        let mut seen: HashMap<u32, usize> = HashMap::new();
        for s in &specs {
            if seen.insert(s.id, s.line).is_some() {
                return Err(TaxonomyError::DuplicateId { line: s.line, id: s.id });
            }
        }
        specs.sort_by_key(|s| s.id);
        let index: HashMap<NodeId, usize> = specs
            .iter()
            .enumerate()
            .map(|(i, s)| (NodeId(s.id), i))
            .collect();

        let mut parent = Vec::with_capacity(specs.len());
        for s in &specs {
            match s.parent {
                None => parent.push(None),
                Some(p) => match index.get(&NodeId(p)) {
                    Some(&pi) => parent.push(Some(pi)),
                    None => {
                        return Err(TaxonomyError::OrphanParent {
                            line: s.line,
                            id: s.id,
                            parent: p,
                        })
                    }
                },
            }
        }

        let depths = compute_depths(&specs, &parent)?;

        let mut children = vec![Vec::new(); specs.len()];
        for (i, p) in parent.iter().enumerate() {
            if let Some(p) = p {
                children[*p].push(i);
            }
        }

        // Sibling names must be unique so that path parsing is deterministic.
        let mut sibling_names: HashSet<(Option<usize>, &str)> = HashSet::new();
        for (i, s) in specs.iter().enumerate() {
            if !sibling_names.insert((parent[i], s.name.as_str())) {
                return Err(TaxonomyError::DuplicateSiblingName {
                    line: s.line,
                    name: s.name.clone(),
                    parent: s.parent,
                });
            }
        }

        let max_depth = depths.iter().copied().max().unwrap_or(1);
        let mut levels = vec![Vec::new(); max_depth];
        for (i, &d) in depths.iter().enumerate() {
            levels[d - 1].push(i);
        }

        let nodes: Vec<TaxonomyNode> = specs
            .into_iter()
            .zip(&depths)
            .map(|(s, &depth)| TaxonomyNode {
                id: NodeId(s.id),
                parent: s.parent.map(NodeId),
                name: s.name,
                depth,
            })
            .collect();

        let mut tax = Taxonomy {
            nodes,
            index,
            parent,
            children,
            levels,
            fingerprint: 0,
        };
        tax.fingerprint = tax.compute_fingerprint();
        Ok(tax)
    }

    fn compute_fingerprint(&self) -> u64 {
        let mut h = Fnv1a::new(0);
        h.write(self.to_tsv().as_bytes());
        h.finish()
    }

    /// Canonical TSV rendering, one node per line in ascending id order.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for n in &self.nodes {
            let parent = n.parent.map(|p| p.0.to_string()).unwrap_or_default();
            out.push_str(&format!("{}\t{}\t{}\n", n.id, parent, n.name));
        }
        out
    }

    /// Content hash of the canonical rendering. Two taxonomies with the same
    /// nodes, parents and names share a fingerprint regardless of line order.
    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn max_depth(&self) -> usize {
        self.levels.len()
    }

    pub fn nodes(&self) -> &[TaxonomyNode] {
        &self.nodes
    }

    pub fn node(&self, idx: usize) -> &TaxonomyNode {
        &self.nodes[idx]
    }

    pub fn index_of(&self, id: NodeId) -> Option<usize> {
        self.index.get(&id).copied()
    }

    pub fn get(&self, id: NodeId) -> Option<&TaxonomyNode> {
        self.index_of(id).map(|i| &self.nodes[i])
    }

    pub fn parent_index(&self, idx: usize) -> Option<usize> {
        self.parent[idx]
    }

    pub fn children_indices(&self, idx: usize) -> &[usize] {
        &self.children[idx]
    }

    /// Dense indices of nodes at 1-based `depth`, ascending by node id.
    pub fn level(&self, depth: usize) -> &[usize] {
        &self.levels[depth - 1]
    }

    pub fn levels(&self) -> &[Vec<usize>] {
        &self.levels
    }

    /// Root-level node indices.
    pub fn roots(&self) -> &[usize] {
        &self.levels[0]
    }

    pub fn is_leaf(&self, idx: usize) -> bool {
        self.children[idx].is_empty()
    }

    /// Root-to-node path ending at the node with dense index `idx`.
    pub fn path_of_index(&self, idx: usize) -> CategoryPath {
        let mut ids = Vec::with_capacity(self.nodes[idx].depth);
        let mut cur = Some(idx);
        while let Some(i) = cur {
            ids.push(self.nodes[i].id);
            cur = self.parent[i];
        }
        ids.reverse();
        CategoryPath(ids)
    }

    pub fn path_to(&self, id: NodeId) -> Result<CategoryPath, PathError> {
        let idx = self.index_of(id).ok_or(PathError::UnknownNode(id))?;
        Ok(self.path_of_index(idx))
    }

    /// Checks that `ids` forms a rooted parent/child chain.
    pub fn validate_path(&self, ids: &[NodeId]) -> Result<CategoryPath, PathError> {
        let first = *ids.first().ok_or(PathError::Empty)?;
        let first_idx = self.index_of(first).ok_or(PathError::UnknownNode(first))?;
        if self.parent[first_idx].is_some() {
            return Err(PathError::NotRooted);
        }
        for w in ids.windows(2) {
            let child = self.get(w[1]).ok_or(PathError::UnknownNode(w[1]))?;
            if child.parent != Some(w[0]) {
                return Err(PathError::NotContiguous(w[0], w[1]));
            }
        }
        Ok(CategoryPath(ids.to_vec()))
    }

    /// Renders a path as `//`-joined node names.
    pub fn render(&self, path: &CategoryPath) -> String {
        path.ids()
            .iter()
            .map(|id| self.get(*id).map(|n| n.name.as_str()).unwrap_or("?"))
            .collect::<Vec<_>>()
            .join(PATH_SEPARATOR)
    }

    /// Resolves `A//B//C` segment by segment, each under the previous node.
    pub fn parse_path(&self, text: &str) -> Result<CategoryPath, PathError> {
        if text.is_empty() {
            return Err(PathError::Empty);
        }
        let mut ids = Vec::new();
        let mut names: Vec<&str> = Vec::new();
        let mut candidates: &[usize] = self.roots();
        for (position, segment) in text.split(PATH_SEPARATOR).enumerate() {
            let found = candidates
                .iter()
                .copied()
                .find(|&i| self.nodes[i].name == segment);
            match found {
                Some(i) => {
                    ids.push(self.nodes[i].id);
                    names.push(&self.nodes[i].name);
                    candidates = &self.children[i];
                }
                None => {
                    return Err(PathError::UnknownSegment {
                        position,
                        segment: segment.to_string(),
                        prefix: names.join(PATH_SEPARATOR),
                    })
                }
            }
        }
        Ok(CategoryPath(ids))
    }
}

fn parse_id(field: &str, line: usize, what: &str) -> Result<u32, TaxonomyError> {
    field
        .trim()
        .parse::<u32>()
        .map_err(|_| TaxonomyError::Malformed {
            line,
            reason: format!("{what} {field:?} is not a non-negative integer"),
        })
}

/// Depth of each node by walking parent links. Detects cycles and depth overflow.
fn compute_depths(specs: &[NodeSpec], parent: &[Option<usize>]) -> Result<Vec<usize>, TaxonomyError> {
    const UNVISITED: usize = 0;
    let mut depth = vec![UNVISITED; specs.len()];
    let mut on_stack = vec![false; specs.len()];
    for start in 0..specs.len() {
        if depth[start] != UNVISITED {
            continue;
        }
        let mut chain: Vec<usize> = Vec::new();
        let mut cur = start;
        loop {
            if depth[cur] != UNVISITED {
                break;
            }
            if on_stack[cur] {
                let pos = chain.iter().position(|&c| c == cur).unwrap();
                let mut ids: Vec<u32> = chain[pos..].iter().map(|&c| specs[c].id).collect();
                ids.sort_unstable();
                let line = chain[pos..].iter().map(|&c| specs[c].line).min().unwrap();
                return Err(TaxonomyError::Cycle { line, ids });
            }
            on_stack[cur] = true;
            chain.push(cur);
            match parent[cur] {
                Some(p) => cur = p,
                None => break,
            }
        }
        // Unwind: the chain ends at a root or at an already-resolved node.
        for &c in chain.iter().rev() {
            depth[c] = match parent[c] {
                None => 1,
                Some(p) => depth[p] + 1,
            };
            on_stack[c] = false;
            if depth[c] > MAX_DEPTH {
                return Err(TaxonomyError::TooDeep {
                    line: specs[c].line,
                    id: specs[c].id,
                    depth: depth[c],
                });
            }
        }
    }
    Ok(depth)
}
