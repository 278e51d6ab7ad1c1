//! Shadow-provenance leak detector.
//!
//! The sandbox records, for every egress write, the ingress conduits the
//! writer's data depends on. A flow is a leak when some ingress conduit's
//! policy does not let the egress audience read it. Monitors never see this
//! bookkeeping.

use crate::meta::MetadataView;
use crate::model::{ConduitId, Principal, Region};
use crate::policy::{eval_conjunct, eval_rule, Facts, Policy};
use crate::sandbox::{EgressWrite, Sandbox};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Leak {
    pub egress: ConduitId,
    pub ingress: ConduitId,
    /// The reader who must not see the data.
    pub principal: Principal,
    pub region: Region,
}

/// Whether `principal` in `region` may receive data derived from a conduit
/// with `policy`, directly or through a satisfied declassification escape.
pub fn permits(policy: &Policy, principal: &str, region: &str, meta: &MetadataView) -> bool {
    let f = Facts::new(principal, region, meta.clock(), meta);
    eval_rule(policy.read(), &f).unwrap_or(false)
        || policy
            .declassify()
            .escapes()
            .any(|e| eval_conjunct(&e.trigger, &f).unwrap_or(false) && eval_rule(&e.result, &f).unwrap_or(false))
}

fn check(
    sb: &Sandbox,
    meta: &MetadataView,
    w: &EgressWrite,
    audience: &[Principal],
    regions: &[Region],
    out: &mut Vec<Leak>,
) {
    let readers: Vec<(Principal, Region)> = match sb.store.get(&w.conduit).and_then(|c| c.session.as_ref()) {
        Some(s) => vec![(s.principal.clone(), s.region.clone())],
        None => audience.iter().flat_map(|p| regions.iter().map(move |r| (p.clone(), r.clone()))).collect(),
    };
    for ingress in &w.provenance {
        let policy = sb.store.get(ingress).and_then(|c| c.resolve_policy(meta));
        for (p, r) in &readers {
            if !policy.as_ref().is_some_and(|pol| permits(pol, p.as_str(), r.as_str(), meta)) {
                out.push(Leak {
                    egress: w.conduit.clone(),
                    ingress: ingress.clone(),
                    principal: p.clone(),
                    region: r.clone(),
                });
                break;
            }
        }
    }
}

/// Leaks among the egress writes from index `from` on. Writes to a conduit
/// without a session are judged against every `audience` member in every
/// region.
pub fn detect_from(
    sb: &Sandbox,
    meta: &MetadataView,
    audience: &[Principal],
    regions: &[Region],
    from: usize,
) -> Vec<Leak> {
    let mut out = Vec::new();
    for w in sb.egress.iter().skip(from) {
        check(sb, meta, w, audience, regions, &mut out);
    }
    out
}

pub fn detect(sb: &Sandbox, meta: &MetadataView, audience: &[Principal], regions: &[Region]) -> Vec<Leak> {
    detect_from(sb, meta, audience, regions, 0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::parse_policy;

    #[test]
    fn escapes_only_count_when_triggered() {
        let meta = MetadataView::new(10);
        let p = parse_policy("read :- key(a); update :- true; declassify :- propagate until fdonly => true;").unwrap();
        assert!(permits(&p, "a", "r0", &meta));
        assert!(!permits(&p, "b", "r0", &meta));
        let t =
            parse_policy("read :- key(a); update :- true; declassify :- propagate until after(5) => true;").unwrap();
        assert!(permits(&t, "b", "r0", &meta));
    }
}
