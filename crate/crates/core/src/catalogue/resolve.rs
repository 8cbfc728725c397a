//! Version resolution over the catalogue.
//!
//! A feasible assignment binds every capability reachable from the roots
//! through `requires`, satisfies every range requested of it, binds nothing
//! that is not needed, and uses one version per module name. Among feasible
//! assignments the resolver picks the lexicographic maximum: capabilities
//! are compared in name order, a higher version beats a lower one (ties by
//! module name), and leaving a capability unbound ranks lowest. For a single
//! capability this is "highest version satisfying every requesting range".

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::{Catalogue, ModuleDescriptor, Requirement, Version, VersionRange};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Binding {
    pub name: String,
    pub version: Version,
    pub checksum: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Resolution {
    /// Capability to the module chosen for it.
    pub bindings: BTreeMap<String, Binding>,
    /// Capabilities, dependencies first.
    pub order: Vec<String>,
}

/// Who asked for a range: a root query or a bound module.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Requester {
    /// `root` or `name@version`.
    pub by: String,
    pub range: VersionRange,
}

impl fmt::Display for Requester {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} (from {})", self.range, self.by)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error, Serialize, Deserialize)]
#[serde(tag = "error", rename_all = "snake_case")]
pub enum ResolutionError {
    #[error("nothing to resolve: no root requirements")]
    EmptyRoots,
    #[error("cannot resolve `{capability}`: {reason}; requested {}", display_requests(.requests))]
    Unsatisfiable { capability: String, reason: String, requests: Vec<Requester> },
    #[error("dependency cycle: {}", .0.join(" -> "))]
    Cycle(Vec<String>),
}

fn display_requests(requests: &[Requester]) -> String {
    if requests.is_empty() {
        return "by nobody".into();
    }
    requests.iter().map(|r| r.to_string()).collect::<Vec<_>>().join(", ")
}

const ROOT: &str = "root";

struct Problem<'a> {
    roots: &'a [Requirement],
    caps: Vec<String>,
    /// Per capability, best candidate first.
    candidates: Vec<Vec<&'a ModuleDescriptor>>,
    root_ranges: Vec<Vec<VersionRange>>,
}

impl<'a> Problem<'a> {
    fn new(catalogue: &'a Catalogue, roots: &'a [Requirement]) -> Self {
        let mut reachable: BTreeSet<String> = roots.iter().map(|r| r.capability.clone()).collect();
        let mut frontier: Vec<String> = reachable.iter().cloned().collect();
        while let Some(cap) = frontier.pop() {
            for m in catalogue.modules().filter(|m| m.provides(&cap)) {
                for r in &m.requires {
                    if reachable.insert(r.capability.clone()) {
                        frontier.push(r.capability.clone());
                    }
                }
            }
        }
        let caps: Vec<String> = reachable.into_iter().collect();
        let candidates = caps
            .iter()
            .map(|cap| {
                let mut c: Vec<&ModuleDescriptor> = catalogue.modules().filter(|m| m.provides(cap)).collect();
                c.sort_by(|a, b| b.version.cmp(&a.version).then_with(|| a.name.cmp(&b.name)));
                c
            })
            .collect();
        let root_ranges = caps
            .iter()
            .map(|cap| roots.iter().filter(|r| &r.capability == cap).map(|r| r.range).collect())
            .collect();
        Problem { roots, caps, candidates, root_ranges }
    }

    fn index(&self, cap: &str) -> Option<usize> {
        self.caps.binary_search_by(|c| c.as_str().cmp(cap)).ok()
    }

    fn search(&self, i: usize, assignment: &mut Vec<Option<&'a ModuleDescriptor>>) -> bool {
        if i == self.caps.len() {
            return self.feasible(assignment);
        }
        for &m in &self.candidates[i] {
            if !self.root_ranges[i].iter().all(|r| r.matches(&m.version)) {
                continue;
            }
            if assignment.iter().flatten().any(|o| o.name == m.name && o.version != m.version) {
                continue;
            }
            assignment.push(Some(m));
            if self.search(i + 1, assignment) {
                return true;
            }
            assignment.pop();
        }
        if self.root_ranges[i].is_empty() {
            assignment.push(None);
            if self.search(i + 1, assignment) {
                return true;
            }
            assignment.pop();
        }
        false
    }

    fn feasible(&self, assignment: &[Option<&ModuleDescriptor>]) -> bool {
        let mut needed = vec![false; self.caps.len()];
        let mut stack: Vec<usize> = self.roots.iter().filter_map(|r| self.index(&r.capability)).collect();
        while let Some(i) = stack.pop() {
            if needed[i] {
                continue;
            }
            needed[i] = true;
            let Some(m) = assignment[i] else { return false };
            for r in &m.requires {
                let Some(j) = self.index(&r.capability) else { return false };
                match assignment[j] {
                    Some(dep) if r.range.matches(&dep.version) => stack.push(j),
                    _ => return false,
                }
            }
        }
        assignment.iter().zip(&needed).all(|(a, n)| a.is_some() == *n)
    }

    /// Best-effort explanation of infeasibility: grow the needed set
    /// greedily with the best candidate for each capability and report the
    /// first capability no candidate can satisfy.
    fn diagnose(&self) -> ResolutionError {
        let mut chosen: BTreeMap<usize, &ModuleDescriptor> = BTreeMap::new();
        for _ in 0..=self.caps.len() * 4 + 4 {
            let requests = self.requests(&chosen);
            let mut next: BTreeMap<usize, &ModuleDescriptor> = BTreeMap::new();
            for (i, reqs) in &requests {
                let pick = self.candidates[*i].iter().copied().find(|m| {
                    reqs.iter().all(|r| r.range.matches(&m.version))
                        && next.values().all(|o| o.name != m.name || o.version == m.version)
                });
                match pick {
                    Some(m) => {
                        next.insert(*i, m);
                    }
                    None => {
                        let reason = if self.candidates[*i].is_empty() {
                            "no registered module provides it".to_string()
                        } else {
                            "no single version satisfies every requested range".to_string()
                        };
                        return ResolutionError::Unsatisfiable {
                            capability: self.caps[*i].clone(),
                            reason,
                            requests: reqs.clone(),
                        };
                    }
                }
            }
            if next == chosen {
                break;
            }
            chosen = next;
        }
        let first = self.roots.iter().map(|r| r.capability.clone()).min().unwrap_or_default();
        let requests = self
            .roots
            .iter()
            .filter(|r| r.capability == first)
            .map(|r| Requester { by: ROOT.into(), range: r.range })
            .collect();
        ResolutionError::Unsatisfiable {
            capability: first,
            reason: "no combination of versions is consistent (one version per module)".into(),
            requests,
        }
    }

    fn requests(&self, chosen: &BTreeMap<usize, &ModuleDescriptor>) -> BTreeMap<usize, Vec<Requester>> {
        let mut out: BTreeMap<usize, Vec<Requester>> = BTreeMap::new();
        for r in self.roots {
            if let Some(i) = self.index(&r.capability) {
                out.entry(i).or_default().push(Requester { by: ROOT.into(), range: r.range });
            }
        }
        let mut visited = BTreeSet::new();
        loop {
            let pending: Vec<usize> = out.keys().copied().filter(|i| !visited.contains(i)).collect();
            if pending.is_empty() {
                break;
            }
            for i in pending {
                visited.insert(i);
                if let Some(m) = chosen.get(&i) {
                    for r in &m.requires {
                        if let Some(j) = self.index(&r.capability) {
                            out.entry(j).or_default().push(Requester { by: m.id().0, range: r.range });
                        }
                    }
                }
            }
        }
        for reqs in out.values_mut() {
            reqs.sort();
            reqs.dedup();
        }
        out
    }
}

impl Catalogue {
    /// Binds every capability needed by `roots`; see the module docs for the
    /// selection policy.
    pub fn resolve(&self, roots: &[Requirement]) -> Result<Resolution, ResolutionError> {
        if roots.is_empty() {
            return Err(ResolutionError::EmptyRoots);
        }
        let problem = Problem::new(self, roots);
        let mut assignment = Vec::with_capacity(problem.caps.len());
        if !problem.search(0, &mut assignment) {
            return Err(problem.diagnose());
        }
        let chosen: BTreeMap<&str, &ModuleDescriptor> = problem
            .caps
            .iter()
            .zip(&assignment)
            .filter_map(|(c, m)| m.map(|m| (c.as_str(), m)))
            .collect();
        let order = dependency_order(&chosen)?;
        let bindings = chosen
            .iter()
            .map(|(cap, m)| {
                (cap.to_string(), Binding { name: m.name.clone(), version: m.version, checksum: m.checksum.clone() })
            })
            .collect();
        Ok(Resolution { bindings, order })
    }
}

/// Kahn's algorithm over bound capabilities; ties broken by
/// `(capability, module name)`.
fn dependency_order(chosen: &BTreeMap<&str, &ModuleDescriptor>) -> Result<Vec<String>, ResolutionError> {
    let deps: BTreeMap<&str, BTreeSet<&str>> = chosen
        .iter()
        .map(|(cap, m)| (*cap, m.requires.iter().map(|r| r.capability.as_str()).filter(|c| chosen.contains_key(c)).collect()))
        .collect();
    let mut remaining: BTreeMap<&str, usize> = deps.iter().map(|(c, d)| (*c, d.len())).collect();
    let mut ready: BTreeSet<(&str, &str)> =
        remaining.iter().filter(|(_, n)| **n == 0).map(|(c, _)| (*c, chosen[c].name.as_str())).collect();
    let mut order = Vec::with_capacity(chosen.len());
    while let Some(next) = ready.pop_first() {
        let cap = next.0;
        remaining.remove(cap);
        order.push(cap.to_string());
        for (dependant, d) in &deps {
            if d.contains(cap) {
                if let Some(n) = remaining.get_mut(dependant) {
                    *n -= 1;
                    if *n == 0 {
                        ready.insert((dependant, chosen[dependant].name.as_str()));
                    }
                }
            }
        }
    }
    if remaining.is_empty() {
        return Ok(order);
    }
    // Every leftover node has an unresolved dependency among the leftovers,
    // so walking first dependencies must revisit a node.
    let mut path: Vec<&str> = vec![*remaining.keys().next().expect("non-empty")];
    loop {
        let last = *path.last().expect("non-empty");
        let next = *deps[last].iter().find(|d| remaining.contains_key(*d)).expect("leftover node has a leftover dependency");
        if let Some(start) = path.iter().position(|p| *p == next) {
            let mut cycle: Vec<String> = path[start..].iter().map(|s| s.to_string()).collect();
            cycle.push(next.to_string());
            return Err(ResolutionError::Cycle(cycle));
        }
        path.push(next);
    }
}
