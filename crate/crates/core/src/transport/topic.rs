//! Topic names and subscription patterns.
//!
//! A topic is one or more segments of `[A-Za-z0-9_]` joined by `/`. A
//! pattern is either a topic (exact match) or a topic prefix followed by
//! `/*`, which matches every topic strictly below that prefix.

/// True iff `pattern` equals `topic`, or `pattern` ends in `/*` and the
/// pattern without its trailing `*` is a proper prefix of `topic`.
pub fn topic_matches(pattern: &str, topic: &str) -> bool {
    if pattern == topic {
        return true;
    }
    match pattern.strip_suffix('*') {
        Some(prefix) if prefix.ends_with('/') => topic.len() > prefix.len() && topic.starts_with(prefix),
        _ => false,
    }
}

pub fn is_wildcard(pattern: &str) -> bool {
    pattern.ends_with("/*")
}

fn valid_segment(seg: &str) -> bool {
    !seg.is_empty() && seg.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'_')
}

pub fn is_valid_topic(name: &str) -> bool {
    !name.is_empty() && name.split('/').all(valid_segment)
}

pub fn is_valid_pattern(pattern: &str) -> bool {
    match pattern.strip_suffix("/*") {
        Some(prefix) => is_valid_topic(prefix),
        None => is_valid_topic(pattern),
    }
}

/// Names starting with `__` are reserved for built-in endpoints such as the
/// parameter services.
pub fn is_reserved(name: &str) -> bool {
    name.starts_with("__")
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Segment-wise reference matcher: a wildcard pattern `p/*` matches any
    /// topic with more segments whose leading segments equal `p`.
    fn reference_match(pattern: &str, topic: &str) -> bool {
        let ps: Vec<&str> = pattern.split('/').collect();
        let ts: Vec<&str> = topic.split('/').collect();
        if ps.last() == Some(&"*") && ps.len() >= 2 {
            let head = &ps[..ps.len() - 1];
            if head.iter().any(|s| s.is_empty()) {
                return ps == ts;
            }
            return ts.len() > head.len() && ts[..head.len()] == *head;
        }
        ps == ts
    }

    fn enumerate(max_segments: usize) -> Vec<String> {
        let alphabet = ["a", "b", "c"];
        let mut out = Vec::new();
        let mut layer: Vec<String> = alphabet.iter().map(|s| s.to_string()).collect();
        for _ in 0..max_segments {
            out.extend(layer.iter().cloned());
            layer = layer
                .iter()
                .flat_map(|p| alphabet.iter().map(move |s| format!("{p}/{s}")))
                .collect();
        }
        out
    }

    #[test]
    fn spot_checks() {
        assert!(topic_matches("a/b", "a/b"));
        assert!(topic_matches("a/*", "a/b/c"));
        assert!(!topic_matches("a/*", "a"));
        assert!(!topic_matches("*", "x"));
        assert!(topic_matches("sensors/*", "sensors/imu"));
        assert!(topic_matches("sensors/*", "sensors/gps"));
        assert!(!topic_matches("sensors/*", "cmd/vel"));
        assert!(!topic_matches("sensors/*", "sensorsX/imu"));
    }

    #[test]
    fn exhaustive_against_reference_up_to_three_segments() {
        let topics = enumerate(3);
        let mut patterns = topics.clone();
        patterns.extend(enumerate(2).into_iter().map(|p| format!("{p}/*")));
        patterns.push("*".to_string());
        for p in &patterns {
            for t in &topics {
                assert_eq!(topic_matches(p, t), reference_match(p, t), "pattern {p} topic {t}");
            }
        }
    }

    #[test]
    fn grammar() {
        assert!(is_valid_topic("chatter"));
        assert!(is_valid_topic("sensors/imu_0"));
        assert!(!is_valid_topic(""));
        assert!(!is_valid_topic("/abs"));
        assert!(!is_valid_topic("a//b"));
        assert!(!is_valid_topic("a-b"));
        assert!(!is_valid_topic("a/"));
        assert!(is_valid_pattern("a/*"));
        assert!(!is_valid_pattern("*"));
        assert!(!is_valid_pattern("a/*/b"));
        assert!(is_reserved("__param/x"));
        assert!(!is_reserved("_x"));
    }
}
