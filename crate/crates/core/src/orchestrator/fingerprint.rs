use sha2::{Digest, Sha256};

use crate::fleet::NodeConfig;

/// Hash over the multiset of node configuration tuples. Node identity does
/// not enter, so two equally configured node sets of the same size hash the
/// same. `None` stands for a node whose state could not be read.
pub fn fingerprint(configs: &[Option<NodeConfig>]) -> String {
    let mut lines: Vec<String> = configs
        .iter()
        .map(|c| match c {
            Some(c) => serde_json::to_string(c).expect("configs serialize"),
            None => "unreachable".to_string(),
        })
        .collect();
    lines.sort();
    let mut h = Sha256::new();
    for l in &lines {
        h.update(l.as_bytes());
        h.update(b"\n");
    }
    hex(&h.finalize())
}

/// Fingerprint of `n` nodes in the default configuration.
pub fn baseline_fingerprint(n: usize) -> String {
    fingerprint(&vec![Some(NodeConfig::default()); n])
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_independent_content_sensitive() {
        let a = Some(NodeConfig::default());
        let mut changed = NodeConfig::default();
        changed.channels[1] = 44;
        let b = Some(changed);
        assert_eq!(fingerprint(&[a.clone(), b.clone()]), fingerprint(&[b.clone(), a.clone()]));
        assert_ne!(fingerprint(&[a.clone(), a.clone()]), fingerprint(&[a.clone(), b]));
        assert_ne!(fingerprint(&[a.clone(), None]), baseline_fingerprint(2));
        assert_eq!(fingerprint(&[a.clone(), a]), baseline_fingerprint(2));
        assert_ne!(baseline_fingerprint(2), baseline_fingerprint(3));
        assert_eq!(baseline_fingerprint(1).len(), 64);
    }

    #[test]
    fn flags_matter() {
        let mut t = NodeConfig::default();
        t.temp_data = true;
        assert_ne!(fingerprint(&[Some(t)]), baseline_fingerprint(1));
    }
}
