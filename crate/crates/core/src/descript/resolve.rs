use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::RngCore;

use super::registry::ParamKind;
use super::{ActionRegistry, ExperimentDescription, InventoryNode, Predicate, Selection};

/// Concrete node assignment for one experiment (or one replication of it).
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Resolution {
    pub groups: BTreeMap<String, Vec<String>>,
    /// Nodes referenced by id from actions rather than through a group.
    pub direct: Vec<String>,
    order: Vec<String>,
}

impl Resolution {
    /// Every resolved node once, groups in declaration order followed by direct references.
    pub fn nodes(&self) -> &[String] {
        &self.order
    }

    /// Nodes an action target or `node` parameter stands for.
    pub fn expand<'a>(&'a self, reference: &'a str) -> Vec<&'a str> {
        match self.groups.get(reference) {
            Some(nodes) => nodes.iter().map(String::as_str).collect(),
            None => vec![reference],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ResolveError {
    #[error("group `{group}` needs {wanted} nodes but only {available} match")]
    Unsatisfiable {
        group: String,
        wanted: u32,
        available: usize,
    },
    #[error("node `{0}` is not available")]
    Unavailable(String),
    #[error("node `{0}` is claimed by more than one group")]
    Conflict(String),
}

fn matches(predicate: &Predicate, node: &InventoryNode) -> bool {
    node.up
        && match predicate {
            Predicate::BuildingEq(b) => &node.building == b,
            Predicate::DegreeAtLeast(n) => node.degree >= *n,
            Predicate::Random => true,
        }
}

/// Node references in action targets and `node` parameters that do not name a group.
pub(crate) fn direct_references(
    desc: &ExperimentDescription,
    registry: &ActionRegistry,
) -> Vec<String> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    let mut push = |r: &str| {
        if desc.group(r).is_none() && seen.insert(r.to_string()) {
            out.push(r.to_string());
        }
    };
    for action in desc.actions.iter().chain(&desc.cleanup) {
        push(&action.target);
        if let Some(spec) = registry.get(&action.command) {
            for p in spec.params.iter().filter(|p| p.kind == ParamKind::Node) {
                if let Some(v) = action.params.get(&p.name) {
                    push(v);
                }
            }
        }
    }
    out
}

/// Assigns nodes from `pool` to every group of `desc`.
///
/// Static groups and direct references must appear in the pool, up or not.
/// Dynamic groups draw from up, not yet claimed pool nodes: the most
/// constrained group first, `random` groups last. Deterministic predicates take
/// nodes in pool order; `random` groups shuffle with `rng` when one is given.
pub fn resolve_groups(
    desc: &ExperimentDescription,
    registry: &ActionRegistry,
    pool: &[InventoryNode],
    mut rng: Option<&mut dyn RngCore>,
) -> Result<Resolution, ResolveError> {
    let in_pool: BTreeSet<&str> = pool.iter().map(|n| n.id.as_str()).collect();
    let mut claimed: BTreeSet<String> = BTreeSet::new();
    let mut groups: BTreeMap<String, Vec<String>> = BTreeMap::new();

    for group in &desc.groups {
        if let Selection::Static(nodes) = &group.selection {
            for n in nodes {
                if !in_pool.contains(n.as_str()) {
                    return Err(ResolveError::Unavailable(n.clone()));
                }
                if !claimed.insert(n.clone()) {
                    return Err(ResolveError::Conflict(n.clone()));
                }
            }
            groups.insert(group.name.clone(), nodes.clone());
        }
    }

    let mut direct = Vec::new();
    for r in direct_references(desc, registry) {
        if !in_pool.contains(r.as_str()) {
            return Err(ResolveError::Unavailable(r));
        }
        if claimed.insert(r.clone()) {
            direct.push(r);
        }
    }

    let mut dynamic: Vec<(usize, u32, &Predicate, usize)> = desc
        .groups
        .iter()
        .enumerate()
        .filter_map(|(i, g)| match &g.selection {
            Selection::Dynamic { count, predicate } => {
                let n = pool
                    .iter()
                    .filter(|c| !claimed.contains(&c.id) && matches(predicate, c))
                    .count();
                Some((i, *count, predicate, n))
            }
            Selection::Static(_) => None,
        })
        .collect();
    dynamic.sort_by_key(|&(i, _, p, n)| (matches!(p, Predicate::Random), n, i));

    for (i, count, predicate, _) in dynamic {
        let name = &desc.groups[i].name;
        let mut candidates: Vec<&InventoryNode> = pool
            .iter()
            .filter(|c| !claimed.contains(&c.id) && matches(predicate, c))
            .collect();
        if candidates.len() < count as usize {
            return Err(ResolveError::Unsatisfiable {
                group: name.clone(),
                wanted: count,
                available: candidates.len(),
            });
        }
        if matches!(predicate, Predicate::Random) {
            if let Some(rng) = rng.as_mut() {
                candidates.shuffle(&mut **rng);
            }
        }
        let chosen: Vec<String> = candidates[..count as usize]
            .iter()
            .map(|c| c.id.clone())
            .collect();
        claimed.extend(chosen.iter().cloned());
        groups.insert(name.clone(), chosen);
    }

    let mut order = Vec::new();
    for g in &desc.groups {
        order.extend(groups[&g.name].iter().cloned());
    }
    order.extend(direct.iter().cloned());
    Ok(Resolution {
        groups,
        direct,
        order,
    })
}

#[cfg(test)]
mod tests {
    use super::super::parse;
    use super::*;
    use rand::SeedableRng;

    fn inventory() -> Vec<InventoryNode> {
        (1..=6)
            .map(|i| InventoryNode {
                id: format!("n{i}"),
                building: if i <= 3 { "A" } else { "B" }.into(),
                up: i != 2,
                degree: i,
            })
            .collect()
    }

    fn desc(groups: &str) -> ExperimentDescription {
        parse(&format!(
            "format: 1\n[experiment]\nid: e\nreplications: 1\nduration: 10\n{groups}"
        ))
        .unwrap()
    }

    #[test]
    fn static_and_dynamic() {
        let d = desc(
            "[group s]\nrole: server\nnodes: n2\n\
             [group c]\nrole: client\ncount: 2\nselect: building == A\n\
             [action]\ntarget: n6\ncommand: noop\n",
        );
        let r = resolve_groups(&d, &ActionRegistry::fleet(), &inventory(), None).unwrap();
        // n2 is down but static, so it is kept; building A offers n1, n3 after that
        assert_eq!(r.groups["s"], ["n2"]);
        assert_eq!(r.groups["c"], ["n1", "n3"]);
        assert_eq!(r.direct, ["n6"]);
        assert_eq!(r.nodes(), ["n2", "n1", "n3", "n6"]);
        assert_eq!(r.expand("c"), ["n1", "n3"]);
        assert_eq!(r.expand("n6"), ["n6"]);
    }

    #[test]
    fn most_constrained_first() {
        // declaration-order greedy would hand n6 to `any` and starve `dense`
        let d = desc(
            "[group any]\nrole: client\ncount: 1\nselect: degree >= 1\n\
             [group dense]\nrole: client\ncount: 1\nselect: degree >= 6\n",
        );
        let mut pool = inventory();
        pool.reverse();
        let r = resolve_groups(&d, &ActionRegistry::fleet(), &pool, None).unwrap();
        assert_eq!(r.groups["dense"], ["n6"]);
        assert_eq!(r.groups["any"], ["n5"]);

        let d = desc("[group big]\nrole: client\ncount: 6\nselect: degree >= 1\n");
        assert_eq!(
            resolve_groups(&d, &ActionRegistry::fleet(), &pool, None).unwrap_err(),
            ResolveError::Unsatisfiable {
                group: "big".into(),
                wanted: 6,
                available: 5
            }
        );
    }

    #[test]
    fn random_uses_rng() {
        let d = desc("[group r]\nrole: client\ncount: 3\nselect: random\n");
        let reg = ActionRegistry::fleet();
        let a = resolve_groups(
            &d,
            &reg,
            &inventory(),
            Some(&mut rand_chacha::ChaCha8Rng::seed_from_u64(1)),
        )
        .unwrap();
        let b = resolve_groups(
            &d,
            &reg,
            &inventory(),
            Some(&mut rand_chacha::ChaCha8Rng::seed_from_u64(1)),
        )
        .unwrap();
        assert_eq!(a, b);
        assert_eq!(a.groups["r"].len(), 3);
        assert!(!a.groups["r"].contains(&"n2".to_string()));
    }

    #[test]
    fn unavailable_static() {
        let d = desc("[group s]\nrole: server\nnodes: n9\n");
        assert_eq!(
            resolve_groups(&d, &ActionRegistry::fleet(), &inventory(), None).unwrap_err(),
            ResolveError::Unavailable("n9".into())
        );
    }
}
