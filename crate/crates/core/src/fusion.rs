//! Consensus-aware gradient fusion.
//!
//! Fragments from different agents are linked when their cosine similarity
//! reaches `tau_cons`; connected components spanning two or more roles form
//! consensus groups, each represented by its medoid. Ungrouped fragments whose
//! similarity to every representative stays below `tau_unique` are unique
//! views; the rest are near-duplicates of consensus and are discarded. The
//! fusion prompt then merges representatives and unique views into one
//! gradient text.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{AgentRole, Fragment, TextGradient};
use crate::backend::{Backend, BackendError, Purpose};
use crate::embed::{cosine, EmbedError, Embedder};
use crate::templates::{Bindings, TemplateError, TemplateSet};

pub const DEFAULT_TAU_CONS: f64 = 0.8;
pub const DEFAULT_TAU_UNIQUE: f64 = 0.6;

/// Separator between raw gradients when fusion is disabled.
pub const CONCAT_SEPARATOR: &str = "\n\n";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub tau_cons: f64,
    pub tau_unique: f64,
    /// When false, raw gradients are concatenated instead of fused.
    pub enabled: bool,
    /// When false, unique views are left out of the fusion prompt.
    pub unique_integration: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            tau_cons: DEFAULT_TAU_CONS,
            tau_unique: DEFAULT_TAU_UNIQUE,
            enabled: true,
            unique_integration: true,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<(), String> {
        for (name, v) in [("tau_cons", self.tau_cons), ("tau_unique", self.tau_unique)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(format!("fusion.{name} = {v} outside (0, 1]"));
            }
        }
        if self.tau_unique > self.tau_cons {
            return Err(format!(
                "fusion.tau_unique ({}) must not exceed fusion.tau_cons ({})",
                self.tau_unique, self.tau_cons
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("fragment {role}#{ordinal} has no embedding")]
    MissingEmbedding { role: AgentRole, ordinal: usize },
    #[error("fragment {role}#{ordinal} embeds to the zero vector")]
    ZeroEmbedding { role: AgentRole, ordinal: usize },
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Template(#[from] TemplateError),
}

/// Consensus groups over a fragment list, as indices into that list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Consensus {
    /// Member indices of each group, ascending.
    pub groups: Vec<Vec<usize>>,
    /// Medoid of each group, parallel to `groups`.
    pub representatives: Vec<usize>,
}

/// Pairwise cosine similarities of embedded fragments.
pub fn similarity_matrix(fragments: &[Fragment]) -> Result<Vec<Vec<f64>>, FusionError> {
    let vectors = fragments
        .iter()
        .map(|f| {
            let v = f.embedding.as_ref().ok_or(FusionError::MissingEmbedding {
                role: f.source_role,
                ordinal: f.ordinal,
            })?;
            if v.is_zero() {
                return Err(FusionError::ZeroEmbedding {
                    role: f.source_role,
                    ordinal: f.ordinal,
                });
            }
            Ok(v)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let n = vectors.len();
    let mut sim = vec![vec![0.0; n]; n];
    for i in 0..n {
        sim[i][i] = 1.0;
        for j in i + 1..n {
            let s = cosine(vectors[i], vectors[j])?;
            sim[i][j] = s;
            sim[j][i] = s;
        }
    }
    Ok(sim)
}

struct DisjointSet {
    parent: Vec<usize>,
}

impl DisjointSet {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            // smaller root wins so roots are stable across runs
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi] = lo;
        }
    }
}

/// Group fragments by cross-role similarity. `fragments` must be ordered by
/// (role, ordinal); `sim` is their similarity matrix.
pub fn extract_consensus(fragments: &[Fragment], sim: &[Vec<f64>], tau_cons: f64) -> Consensus {
    let n = fragments.len();
    let mut sets = DisjointSet::new(n);
    for i in 0..n {
        for j in i + 1..n {
            if fragments[i].source_role != fragments[j].source_role && sim[i][j] >= tau_cons {
                sets.union(i, j);
            }
        }
    }
    let mut by_root: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for i in 0..n {
        by_root.entry(sets.find(i)).or_default().push(i);
    }
    let mut groups: Vec<Vec<usize>> = by_root
        .into_values()
        .filter(|members| {
            let first = fragments[members[0]].source_role;
            members.iter().any(|&m| fragments[m].source_role != first)
        })
        .collect();
    groups.sort_by_key(|g| g[0]);
    let representatives = groups.iter().map(|g| medoid(fragments, sim, g)).collect();
    Consensus {
        groups,
        representatives,
    }
}

/// Member with the highest mean similarity to the rest of its group; ties go
/// to the longer text, then to the earliest (role, ordinal).
fn medoid(fragments: &[Fragment], sim: &[Vec<f64>], group: &[usize]) -> usize {
    let others = (group.len() - 1) as f64;
    let score = |i: usize| group.iter().filter(|&&j| j != i).map(|&j| sim[i][j]).sum::<f64>() / others;
    let mut best = group[0];
    let mut best_score = score(best);
    for &i in &group[1..] {
        let s = score(i);
        let longer = fragments[i].text.chars().count() > fragments[best].text.chars().count();
        if s > best_score || (s == best_score && longer) {
            best = i;
            best_score = s;
        }
    }
    best
}

/// Split ungrouped fragments into unique views and discarded near-duplicates,
/// both in index order.
pub fn extract_unique(
    fragments: &[Fragment],
    sim: &[Vec<f64>],
    consensus: &Consensus,
    tau_unique: f64,
) -> (Vec<usize>, Vec<usize>) {
    let mut grouped = vec![false; fragments.len()];
    for g in &consensus.groups {
        for &m in g {
            grouped[m] = true;
        }
    }
    (0..fragments.len())
        .filter(|&i| !grouped[i])
        .partition(|&i| consensus.representatives.iter().all(|&r| sim[i][r] < tau_unique))
}

/// Index-level outcome of consensus and unique extraction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub groups: Vec<Vec<usize>>,
    pub representatives: Vec<usize>,
    pub unique: Vec<usize>,
    pub discarded: Vec<usize>,
}

pub fn partition(fragments: &[Fragment], sim: &[Vec<f64>], config: &FusionConfig) -> Partition {
    let consensus = extract_consensus(fragments, sim, config.tau_cons);
    let (unique, discarded) = extract_unique(fragments, sim, &consensus, config.tau_unique);
    Partition {
        groups: consensus.groups,
        representatives: consensus.representatives,
        unique,
        discarded,
    }
}

/// Similarity decisions, recorded in the trace on request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityDetail {
    pub matrix: Vec<Vec<f64>>,
    /// For each ungrouped fragment: (index, max similarity to a representative).
    pub max_to_consensus: Vec<(usize, Option<f64>)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionResult {
    /// All fragments fed to fusion, ordered by (role, ordinal).
    pub fragments: Vec<Fragment>,
    pub groups: Vec<Vec<usize>>,
    pub consensus: Vec<Fragment>,
    pub unique: Vec<Fragment>,
    pub discarded: Vec<Fragment>,
    pub fused_text: String,
    pub fusion_called: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub similarities: Option<SimilarityDetail>,
}

/// Embed every fragment of `gradients`, flattened in (role, ordinal) order.
/// Fragments whose embedding is the zero vector carry no signal and are left
/// out.
pub fn embed_fragments(embedder: &dyn Embedder, gradients: &[TextGradient]) -> Result<Vec<Fragment>, FusionError> {
    let mut all: Vec<Fragment> = gradients.iter().flat_map(|g| g.fragments.iter().cloned()).collect();
    all.sort_by_key(|f| (f.source_role, f.ordinal));
    let texts: Vec<&str> = all.iter().map(|f| f.text.as_str()).collect();
    let vectors = embedder.embed_batch(&texts)?;
    Ok(all
        .into_iter()
        .zip(vectors)
        .filter_map(|(mut f, v)| {
            if v.is_zero() {
                tracing::debug!("dropping fragment {}#{} with empty embedding", f.source_role, f.ordinal);
                return None;
            }
            f.embedding = Some(v);
            Some(f)
        })
        .collect())
}

/// Render the fusion prompt and call the backend. Both lists empty means no
/// signal: returns an empty string without a call.
pub fn fuse_gradients(
    backend: &Backend,
    templates: &TemplateSet,
    consensus: &[Fragment],
    unique: &[Fragment],
    iteration: u32,
) -> Result<Option<String>, FusionError> {
    if consensus.is_empty() && unique.is_empty() {
        return Ok(None);
    }
    let list = |items: Vec<String>| {
        if items.is_empty() {
            "(none)".to_string()
        } else {
            items.join("\n")
        }
    };
    let bindings = Bindings::new()
        .set(
            "consensus",
            list(consensus.iter().map(|f| format!("- {}", f.text)).collect()),
        )
        .set(
            "unique",
            list(
                unique
                    .iter()
                    .map(|f| format!("- [{}] {}", f.source_role, f.text))
                    .collect(),
            ),
        );
    let (system, user) = templates.get(Purpose::Fusion).render(&bindings)?;
    let request = backend.request(Purpose::Fusion, iteration, system, user);
    Ok(Some(backend.complete(&request)?.text.trim().to_string()))
}

/// Raw gradient texts joined in role order.
pub fn concatenate_gradients(gradients: &[TextGradient]) -> String {
    let mut sorted: Vec<&TextGradient> = gradients.iter().collect();
    sorted.sort_by_key(|g| g.role);
    sorted
        .iter()
        .map(|g| g.raw_text.as_str())
        .collect::<Vec<_>>()
        .join(CONCAT_SEPARATOR)
}

/// Full fusion stage for one iteration.
pub fn fuse(
    backend: &Backend,
    templates: &TemplateSet,
    embedder: &dyn Embedder,
    gradients: &[TextGradient],
    config: &FusionConfig,
    iteration: u32,
    record_similarities: bool,
) -> Result<FusionResult, FusionError> {
    let fragments = embed_fragments(embedder, gradients)?;
    let sim = similarity_matrix(&fragments)?;
    let part = partition(&fragments, &sim, config);
    let pick = |idx: &[usize]| idx.iter().map(|&i| fragments[i].clone()).collect::<Vec<_>>();
    let consensus = pick(&part.representatives);
    let unique = pick(&part.unique);
    let discarded = pick(&part.discarded);

    let (fused_text, fusion_called) = if config.enabled {
        let offered: &[Fragment] = if config.unique_integration { &unique } else { &[] };
        match fuse_gradients(backend, templates, &consensus, offered, iteration)? {
            Some(text) => (text, true),
            None => (String::new(), false),
        }
    } else {
        (concatenate_gradients(gradients), false)
    };

    let similarities = record_similarities.then(|| {
        let grouped: std::collections::BTreeSet<usize> = part.groups.iter().flatten().copied().collect();
        SimilarityDetail {
            max_to_consensus: (0..fragments.len())
                .filter(|i| !grouped.contains(i))
                .map(|i| {
                    let best = part
                        .representatives
                        .iter()
                        .map(|&r| sim[i][r])
                        .fold(None, |acc: Option<f64>, s| Some(acc.map_or(s, |a| a.max(s))));
                    (i, best)
                })
                .collect(),
            matrix: sim,
        }
    });

    Ok(FusionResult {
        fragments,
        groups: part.groups,
        consensus,
        unique,
        discarded,
        fused_text,
        fusion_called,
        similarities,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{RequestDefaults, ScriptEntry, ScriptedProvider};
    use crate::embed::LocalEmbedder;
    use std::sync::Arc;

    fn frag(role: AgentRole, ordinal: usize, text: &str) -> Fragment {
        Fragment {
            text: text.into(),
            source_role: role,
            ordinal,
            offset: 0,
            embedding: Some(LocalEmbedder.embed_one(text)),
        }
    }

    fn run(frags: &[Fragment], cfg: &FusionConfig) -> Partition {
        let sim = similarity_matrix(frags).unwrap();
        partition(frags, &sim, cfg)
    }

    #[test]
    fn identical_fragments_form_one_group() {
        let t = "pressure dropped sharply overnight";
        let frags = vec![
            frag(AgentRole::Stat, 0, t),
            frag(AgentRole::Phys, 0, t),
            frag(AgentRole::Met, 0, t),
        ];
        let p = run(&frags, &FusionConfig::default());
        assert_eq!(p.groups, vec![vec![0, 1, 2]]);
        // all tie on score and length: earliest wins
        assert_eq!(p.representatives, vec![0]);
        assert!(p.unique.is_empty() && p.discarded.is_empty());
    }

    #[test]
    fn dissimilar_fragments_are_all_unique() {
        let frags = vec![
            frag(AgentRole::Stat, 0, "mean temperature twelve degrees"),
            frag(AgentRole::Phys, 0, "wind driven by gradient"),
            frag(AgentRole::Met, 0, "frontal passage expected tonight"),
            frag(AgentRole::Met, 1, "issue frost advisory early"),
        ];
        let p = run(&frags, &FusionConfig::default());
        assert!(p.groups.is_empty());
        assert_eq!(p.unique, vec![0, 1, 2, 3]);
    }

    #[test]
    fn same_role_never_forms_consensus() {
        let t = "humidity climbs steadily all afternoon";
        let frags = vec![frag(AgentRole::Stat, 0, t), frag(AgentRole::Stat, 1, t)];
        let p = run(&frags, &FusionConfig::default());
        assert!(p.groups.is_empty());
        assert_eq!(p.unique, vec![0, 1]);
    }

    #[test]
    fn near_duplicate_of_consensus_is_discarded() {
        let t = "pressure dropped sharply overnight";
        let frags = vec![
            frag(AgentRole::Stat, 0, t),
            frag(AgentRole::Phys, 0, t),
            // 4 shared of 4 and 7 tokens: 4 / sqrt(28) ~ 0.756
            frag(
                AgentRole::Met,
                0,
                "pressure dropped sharply overnight then steadied considerably",
            ),
        ];
        let sim = similarity_matrix(&frags).unwrap();
        let s = sim[0][2];
        assert!((0.6..0.8).contains(&s), "constructed similarity {s}");
        let p = partition(&frags, &sim, &FusionConfig::default());
        assert_eq!(p.groups, vec![vec![0, 1]]);
        assert_eq!(p.discarded, vec![2]);
    }

    #[test]
    fn medoid_prefers_central_then_longer() {
        // b is linked to both a and c, which are less similar to each other
        let frags = vec![
            frag(AgentRole::Stat, 0, "alpha beta gamma delta"),
            frag(AgentRole::Phys, 0, "alpha beta gamma delta epsilon zeta"),
            frag(AgentRole::Met, 0, "gamma delta epsilon zeta"),
        ];
        let sim = similarity_matrix(&frags).unwrap();
        let c = extract_consensus(&frags, &sim, 0.7);
        assert_eq!(c.groups, vec![vec![0, 1, 2]]);
        assert_eq!(c.representatives, vec![1]);
    }

    #[test]
    fn threshold_monotonicity() {
        let texts = [
            "rain totals reached ten millimetres",
            "rain totals reached twelve millimetres",
            "wind gusts reached ten metres",
            "pressure fell ahead of the front",
            "the front brought rain totals",
            "pressure fell ahead of rain",
        ];
        let roles = [AgentRole::Stat, AgentRole::Phys, AgentRole::Met];
        let frags: Vec<Fragment> = texts
            .iter()
            .enumerate()
            .map(|(i, t)| frag(roles[i % 3], i / 3, t))
            .collect();
        let mut frags = frags;
        frags.sort_by_key(|f| (f.source_role, f.ordinal));
        let sim = similarity_matrix(&frags).unwrap();
        let mut last = usize::MAX;
        for step in 1..=20 {
            let tau = step as f64 * 0.05;
            let grouped: usize = extract_consensus(&frags, &sim, tau).groups.iter().map(Vec::len).sum();
            assert!(grouped <= last);
            last = grouped;
        }
    }

    #[test]
    fn fuse_calls_backend_only_with_signal() {
        let provider = Arc::new(ScriptedProvider::new(vec![ScriptEntry::role(Purpose::Fusion, 0, " F ")]).unwrap());
        let backend = Backend::new(provider.clone(), RequestDefaults::default());
        let templates = TemplateSet::builtin();
        assert_eq!(fuse_gradients(&backend, &templates, &[], &[], 0).unwrap(), None);
        assert_eq!(provider.calls(), 0);
        let f = frag(AgentRole::Met, 0, "issue a frost advisory");
        assert_eq!(
            fuse_gradients(&backend, &templates, &[], &[f], 0).unwrap(),
            Some("F".into())
        );
        assert_eq!(provider.calls(), 1);
    }

    #[test]
    fn disabled_fusion_concatenates() {
        let g = |role, raw: &str| TextGradient::from_response(role, raw.into(), 0);
        let gradients = vec![
            g(AgentRole::Met, "met says three things."),
            g(AgentRole::Stat, "stat says three things."),
            g(AgentRole::Phys, "phys says three things."),
        ];
        let backend = Backend::new(
            Arc::new(ScriptedProvider::new(vec![]).unwrap()),
            RequestDefaults::default(),
        );
        let cfg = FusionConfig {
            enabled: false,
            ..Default::default()
        };
        let r = fuse(
            &backend,
            &TemplateSet::builtin(),
            &LocalEmbedder,
            &gradients,
            &cfg,
            0,
            true,
        )
        .unwrap();
        assert_eq!(
            r.fused_text,
            "stat says three things.\n\nphys says three things.\n\nmet says three things."
        );
        assert!(!r.fusion_called);
        assert!(r.similarities.is_some());
    }

    #[test]
    fn config_validation() {
        assert!(FusionConfig::default().validate().is_ok());
        let bad = FusionConfig {
            tau_unique: 0.9,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = FusionConfig {
            tau_cons: 0.0,
            tau_unique: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
