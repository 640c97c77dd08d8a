//! Tissue → disease → attribute tree.
//!
//! OncoTree records form the backbone. A disease record whose CUI equals an
//! OncoTree CUI is merged into that node; every other disease record becomes
//! a node of its own under its tissue. Attributes are deduplicated per node
//! and nodes left without any attribute are dropped.

use std::collections::{BTreeMap, HashMap, HashSet};

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus_io::{DiseaseRecord, OncoTreeRecord};
use crate::error::{Error, Result};
use crate::objectives::KnowledgeBatch;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttributeKind {
    Synonym,
    Definition,
    Histology,
    Cytology,
}

impl AttributeKind {
    pub const ALL: [AttributeKind; 4] = [
        AttributeKind::Synonym,
        AttributeKind::Definition,
        AttributeKind::Histology,
        AttributeKind::Cytology,
    ];
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attribute {
    pub kind: AttributeKind,
    pub text: String,
}

/// Lowercase, trim and collapse runs of whitespace.
pub fn normalize_text(text: &str) -> String {
    text.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiseaseNode {
    pub id: usize,
    pub name: String,
    /// Every name merged into this node, `name` first.
    pub names: Vec<String>,
    pub cui: Option<String>,
    pub tissue: String,
    /// Whether the node came from an OncoTree record.
    pub oncotree: bool,
    pub attributes: Vec<Attribute>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BuildLog {
    /// Disease records merged into an OncoTree node by CUI.
    pub merges: usize,
    /// Nodes dropped for having no attributes.
    pub deleted: usize,
    pub deleted_names: Vec<String>,
    /// Tissues introduced by disease records rather than by OncoTree.
    pub created_tissues: Vec<String>,
    pub duplicate_attributes: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeTree {
    pub tissues: BTreeMap<String, Vec<usize>>,
    pub nodes: Vec<DiseaseNode>,
}

/// The on-disk tree file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeFile {
    pub nodes: Vec<DiseaseNode>,
    pub tissues: BTreeMap<String, Vec<usize>>,
    pub build_log: BuildLog,
}

impl TreeFile {
    pub fn new(tree: KnowledgeTree, build_log: BuildLog) -> Self {
        TreeFile {
            nodes: tree.nodes,
            tissues: tree.tissues,
            build_log,
        }
    }

    /// Checks the structural invariants before handing the tree out.
    pub fn into_tree(self) -> Result<KnowledgeTree> {
        let tree = KnowledgeTree {
            tissues: self.tissues,
            nodes: self.nodes,
        };
        tree.validate()?;
        Ok(tree)
    }
}

struct Draft {
    name: String,
    names: Vec<String>,
    cui: Option<String>,
    tissue: String,
    oncotree: bool,
    attributes: Vec<Attribute>,
}

fn record_attributes(r: &DiseaseRecord) -> impl Iterator<Item = Attribute> + '_ {
    [
        (AttributeKind::Synonym, &r.synonyms),
        (AttributeKind::Definition, &r.definitions),
        (AttributeKind::Histology, &r.histology),
        (AttributeKind::Cytology, &r.cytology),
    ]
    .into_iter()
    .flat_map(|(kind, texts)| {
        texts.iter().map(move |t| Attribute {
            kind,
            text: t.trim().to_string(),
        })
    })
}

pub fn build_tree(diseases: &[DiseaseRecord], oncotree: &[OncoTreeRecord]) -> (KnowledgeTree, BuildLog) {
    let mut log = BuildLog::default();
    let mut drafts: Vec<Draft> = Vec::with_capacity(oncotree.len() + diseases.len());
    let mut by_cui: HashMap<&str, usize> = HashMap::new();
    let known_tissues: HashSet<&str> = oncotree.iter().map(|r| r.tissue.as_str()).collect();

    for r in oncotree {
        by_cui.entry(r.cui.as_str()).or_insert(drafts.len());
        drafts.push(Draft {
            name: r.name.clone(),
            names: vec![r.name.clone()],
            cui: Some(r.cui.clone()),
            tissue: r.tissue.clone(),
            oncotree: true,
            attributes: Vec::new(),
        });
    }

    for r in diseases {
        let target = r.cui.as_deref().and_then(|c| by_cui.get(c)).copied();
        match target {
            Some(i) => {
                log.merges += 1;
                let d = &mut drafts[i];
                if !d.names.contains(&r.name) {
                    d.names.push(r.name.clone());
                }
                d.attributes.extend(record_attributes(r));
            }
            None => {
                if !known_tissues.contains(r.tissue.as_str()) && !log.created_tissues.contains(&r.tissue) {
                    log.created_tissues.push(r.tissue.clone());
                }
                drafts.push(Draft {
                    name: r.name.clone(),
                    names: vec![r.name.clone()],
                    cui: r.cui.clone(),
                    tissue: r.tissue.clone(),
                    oncotree: false,
                    attributes: record_attributes(r).collect(),
                });
            }
        }
    }

    let mut tree = KnowledgeTree::default();
    for mut d in drafts {
        let before = d.attributes.len();
        let mut seen = HashSet::new();
        d.attributes
            .retain(|a| seen.insert((a.kind, normalize_text(&a.text))));
        log.duplicate_attributes += before - d.attributes.len();
        // canonical order: grouped by kind, first occurrence within a kind
        d.attributes.sort_by_key(|a| a.kind);

        if d.attributes.is_empty() {
            log.deleted += 1;
            log.deleted_names.push(d.name);
            continue;
        }
        let id = tree.nodes.len();
        tree.tissues.entry(d.tissue.clone()).or_default().push(id);
        tree.nodes.push(DiseaseNode {
            id,
            name: d.name,
            names: d.names,
            cui: d.cui,
            tissue: d.tissue,
            oncotree: d.oncotree,
            attributes: d.attributes,
        });
    }
    (tree, log)
}

impl KnowledgeTree {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let mut owner = vec![None; self.nodes.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            if node.id != i {
                return Err(Error::InvalidRecord {
                    id: node.name.clone(),
                    message: format!("node id {} at position {i}", node.id),
                });
            }
            if node.attributes.is_empty() {
                return Err(Error::InvalidRecord {
                    id: node.name.clone(),
                    message: "node without attributes".into(),
                });
            }
        }
        for (tissue, ids) in &self.tissues {
            for &id in ids {
                let slot = owner.get_mut(id).ok_or_else(|| Error::InvalidRecord {
                    id: tissue.clone(),
                    message: format!("tissue references missing node {id}"),
                })?;
                if slot.replace(tissue).is_some() {
                    return Err(Error::InvalidRecord {
                        id: tissue.clone(),
                        message: format!("node {id} reachable from two tissues"),
                    });
                }
            }
        }
        if let Some(i) = owner.iter().position(Option::is_none) {
            return Err(Error::InvalidRecord {
                id: self.nodes[i].name.clone(),
                message: "node not reachable from any tissue".into(),
            });
        }
        Ok(())
    }

    /// Records that rebuild this tree exactly under [`build_tree`].
    pub fn to_records(&self) -> (Vec<DiseaseRecord>, Vec<OncoTreeRecord>) {
        let mut diseases = Vec::new();
        let mut onco = Vec::new();
        for node in &self.nodes {
            let mut record = DiseaseRecord {
                name: node.name.clone(),
                synonyms: Vec::new(),
                definitions: Vec::new(),
                histology: Vec::new(),
                cytology: Vec::new(),
                tissue: node.tissue.clone(),
                cui: node.cui.clone(),
                source: "tree".into(),
            };
            for a in &node.attributes {
                let list = match a.kind {
                    AttributeKind::Synonym => &mut record.synonyms,
                    AttributeKind::Definition => &mut record.definitions,
                    AttributeKind::Histology => &mut record.histology,
                    AttributeKind::Cytology => &mut record.cytology,
                };
                list.push(a.text.clone());
            }
            if node.oncotree {
                let cui = node.cui.clone().unwrap_or_default();
                onco.push(OncoTreeRecord {
                    name: node.name.clone(),
                    cui,
                    tissue: node.tissue.clone(),
                    parent: None,
                    level: 0,
                });
                // merged names ride along as attribute-free records
                for extra in node.names.iter().skip(1) {
                    diseases.push(DiseaseRecord {
                        name: extra.clone(),
                        synonyms: Vec::new(),
                        definitions: Vec::new(),
                        histology: Vec::new(),
                        cytology: Vec::new(),
                        tissue: node.tissue.clone(),
                        cui: node.cui.clone(),
                        source: "tree".into(),
                    });
                }
            }
            diseases.push(record);
        }
        (diseases, onco)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KindCounts {
    pub synonym: usize,
    pub definition: usize,
    pub histology: usize,
    pub cytology: usize,
}

impl KindCounts {
    fn bump(&mut self, kind: AttributeKind) {
        *match kind {
            AttributeKind::Synonym => &mut self.synonym,
            AttributeKind::Definition => &mut self.definition,
            AttributeKind::Histology => &mut self.histology,
            AttributeKind::Cytology => &mut self.cytology,
        } += 1;
    }

    pub fn total(&self) -> usize {
        self.synonym + self.definition + self.histology + self.cytology
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeStats {
    /// Attributes of each kind.
    pub attributes: KindCounts,
    /// Diseases carrying at least one attribute of each kind.
    pub entities: KindCounts,
    pub tissues: usize,
    pub diseases: usize,
    pub total_attributes: usize,
}

/// Full-scale reference statistics of the original knowledge sources, for
/// comparison when those sources are supplied.
pub const FULL_SCALE_STATS: TreeStats = TreeStats {
    attributes: KindCounts {
        synonym: 30_950,
        definition: 10_097,
        histology: 3_558,
        cytology: 1_117,
    },
    entities: KindCounts {
        synonym: 0,
        definition: 0,
        histology: 0,
        cytology: 0,
    },
    tissues: 32,
    diseases: 4_718,
    total_attributes: 50_470,
};

pub fn tree_stats(tree: &KnowledgeTree) -> TreeStats {
    let mut stats = TreeStats {
        tissues: tree.tissues.values().filter(|ids| !ids.is_empty()).count(),
        diseases: tree.nodes.len(),
        ..TreeStats::default()
    };
    for node in &tree.nodes {
        let mut present = HashSet::new();
        for a in &node.attributes {
            stats.attributes.bump(a.kind);
            if present.insert(a.kind) {
                stats.entities.bump(a.kind);
            }
        }
    }
    stats.total_attributes = stats.attributes.total();
    stats
}

/// Draw `n` distinct entities and `k` attribute texts for each.
///
/// Attributes are drawn without replacement when the entity has at least `k`
/// of them and with replacement otherwise.
pub fn sample_entity_batch<R: Rng + ?Sized>(
    tree: &KnowledgeTree,
    rng: &mut R,
    n: usize,
    k: usize,
) -> Result<KnowledgeBatch> {
    if n < 2 || k < 2 {
        return Err(Error::Config(format!(
            "entity batches need n ≥ 2 and k ≥ 2, got n={n}, k={k}"
        )));
    }
    if tree.len() < n {
        return Err(Error::NotEnoughEntities {
            requested: n,
            available: tree.len(),
        });
    }
    let entity_ids = index::sample(rng, tree.len(), n).into_vec();
    let mut texts = Vec::with_capacity(n * k);
    for &id in &entity_ids {
        let attrs = &tree.nodes[id].attributes;
        if attrs.len() >= k {
            for i in index::sample(rng, attrs.len(), k) {
                texts.push(attrs[i].text.clone());
            }
        } else {
            for _ in 0..k {
                texts.push(attrs[rng.random_range(0..attrs.len())].text.clone());
            }
        }
    }
    KnowledgeBatch::new(n, k, entity_ids, texts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn disease(name: &str, cui: Option<&str>, tissue: &str, attrs: [&[&str]; 4]) -> DiseaseRecord {
        let v = |s: &[&str]| s.iter().map(|x| x.to_string()).collect();
        DiseaseRecord {
            name: name.into(),
            synonyms: v(attrs[0]),
            definitions: v(attrs[1]),
            histology: v(attrs[2]),
            cytology: v(attrs[3]),
            tissue: tissue.into(),
            cui: cui.map(Into::into),
            source: "test".into(),
        }
    }

    fn onco(name: &str, cui: &str, tissue: &str) -> OncoTreeRecord {
        OncoTreeRecord {
            name: name.into(),
            cui: cui.into(),
            tissue: tissue.into(),
            parent: None,
            level: 1,
        }
    }

    #[test]
    fn merge_and_attach() {
        let (tree, log) = build_tree(
            &[
                disease("a", Some("C1"), "lung", [&["s1", "s2"], &[], &[], &[]]),
                disease("b", None, "lung", [&[], &["d1"], &[], &[]]),
            ],
            &[onco("A", "C1", "lung")],
        );
        assert_eq!(tree.len(), 2);
        assert_eq!((log.merges, log.deleted), (1, 0));
        assert_eq!(tree.nodes[0].names, vec!["A", "a"]);
        assert_eq!(tree.nodes[0].attributes.len(), 2);
        tree.validate().unwrap();
    }

    #[test]
    fn attribute_less_record_is_deleted() {
        let (tree, log) = build_tree(&[disease("x", None, "skin", [&[], &[], &[], &[]])], &[]);
        assert!(tree.is_empty());
        assert_eq!(log.deleted, 1);
        assert_eq!(log.deleted_names, vec!["x"]);
    }

    #[test]
    fn oncotree_tissue_wins_and_unknown_tissue_is_logged() {
        let (tree, log) = build_tree(
            &[
                disease("a", Some("C1"), "lungs", [&["s"], &[], &[], &[]]),
                disease("b", None, "kidney", [&["t"], &[], &[], &[]]),
            ],
            &[onco("A", "C1", "lung")],
        );
        assert_eq!(tree.nodes[0].tissue, "lung");
        assert_eq!(log.created_tissues, vec!["kidney"]);
        assert_eq!(tree.tissues.len(), 2);
    }

    #[test]
    fn duplicates_removed_under_normalization() {
        let (tree, log) = build_tree(
            &[disease(
                "a",
                None,
                "t",
                [
                    &["Lung  Cancer", "lung cancer ", "other"],
                    &["lung cancer"],
                    &[],
                    &[],
                ],
            )],
            &[],
        );
        // same text under a different kind is kept
        assert_eq!(tree.nodes[0].attributes.len(), 3);
        assert_eq!(log.duplicate_attributes, 1);
    }

    #[test]
    fn stats_examples() {
        assert_eq!(tree_stats(&KnowledgeTree::default()), TreeStats::default());
        let (tree, _) = build_tree(
            &[
                disease("a", None, "t1", [&["s1", "s2"], &[], &[], &[]]),
                disease("b", None, "t1", [&[], &["d"], &["h"], &[]]),
                disease("c", None, "t2", [&[], &[], &[], &["c"]]),
            ],
            &[],
        );
        let s = tree_stats(&tree);
        assert_eq!(s.total_attributes, 5);
        assert_eq!(s.entities.synonym, 1);
        assert_eq!(s.tissues, 2);
        assert_eq!(s.diseases, 3);
    }

    fn tiny_tree() -> KnowledgeTree {
        build_tree(
            &[
                disease("A", None, "t", [&["a1", "a2", "a3"], &[], &[], &[]]),
                disease("B", None, "t", [&["b1"], &[], &[], &[]]),
            ],
            &[],
        )
        .0
    }

    #[test]
    fn sampling_replacement_rule() {
        let tree = tiny_tree();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let batch = sample_entity_batch(&tree, &mut rng, 2, 2).unwrap();
        let b_pos = batch.entity_ids.iter().position(|&e| e == 1).unwrap();
        assert_eq!(batch.group(b_pos), ["b1", "b1"]);
        let a_pos = 1 - b_pos;
        let a = batch.group(a_pos);
        assert_ne!(a[0], a[1]);
    }

    #[test]
    fn sampling_is_deterministic_and_checks_size() {
        let tree = tiny_tree();
        let a = sample_entity_batch(&tree, &mut ChaCha8Rng::seed_from_u64(9), 2, 3).unwrap();
        let b = sample_entity_batch(&tree, &mut ChaCha8Rng::seed_from_u64(9), 2, 3).unwrap();
        assert_eq!(a, b);
        assert!(matches!(
            sample_entity_batch(&tree, &mut ChaCha8Rng::seed_from_u64(9), 3, 2),
            Err(Error::NotEnoughEntities { .. })
        ));
        assert!(sample_entity_batch(&tree, &mut ChaCha8Rng::seed_from_u64(9), 2, 1).is_err());
    }

    fn arb_records() -> impl Strategy<Value = (Vec<DiseaseRecord>, Vec<OncoTreeRecord>)> {
        let text = prop::sample::select(vec!["x", "X ", "y", "z z", "Z  z", "w"]);
        let list = prop::collection::vec(text, 0..3);
        let rec = (
            "[a-d]",
            prop::option::of(prop::sample::select(vec!["C1", "C2", "C3"])),
            prop::sample::select(vec!["lung", "skin"]),
            list.clone(),
            list.clone(),
            list.clone(),
            list,
        )
            .prop_map(|(name, cui, tissue, s, d, h, c)| {
                let v = |l: Vec<&str>| l.into_iter().map(String::from).collect();
                DiseaseRecord {
                    name,
                    synonyms: v(s),
                    definitions: v(d),
                    histology: v(h),
                    cytology: v(c),
                    tissue: tissue.into(),
                    cui: cui.map(String::from),
                    source: "p".into(),
                }
            });
        let on =
            prop::collection::vec((prop::sample::select(vec!["C1", "C2"]), "[P-R]"), 0..3).prop_map(|v| {
                v.into_iter()
                    .map(|(cui, name)| onco(&name, cui, "lung"))
                    .collect()
            });
        (prop::collection::vec(rec, 0..8), on)
    }

    proptest! {
        #[test]
        fn build_is_idempotent((diseases, oncos) in arb_records()) {
            let (tree, _) = build_tree(&diseases, &oncos);
            tree.validate().unwrap();
            let (d2, o2) = tree.to_records();
            let (again, _) = build_tree(&d2, &o2);
            prop_assert_eq!(again, tree);
        }

        #[test]
        fn attributes_unique_and_stats_consistent((diseases, oncos) in arb_records()) {
            let (tree, _) = build_tree(&diseases, &oncos);
            for node in &tree.nodes {
                let mut seen = HashSet::new();
                for a in &node.attributes {
                    prop_assert!(seen.insert((a.kind, normalize_text(&a.text))));
                }
            }
            let s = tree_stats(&tree);
            prop_assert_eq!(s.total_attributes, s.attributes.total());
            let sum: usize = tree.nodes.iter().map(|n| n.attributes.len()).sum();
            prop_assert_eq!(s.total_attributes, sum);
            for c in [s.entities.synonym, s.entities.definition, s.entities.histology, s.entities.cytology] {
                prop_assert!(c <= s.diseases);
            }
        }

        #[test]
        fn batches_well_formed(seed in 0u64..500, n in 2usize..4, k in 2usize..6) {
            let (tree, _) = build_tree(
                &[
                    disease("A", None, "t", [&["a1", "a2", "a3"], &["a4"], &[], &[]]),
                    disease("B", None, "t", [&["b1"], &[], &[], &[]]),
                    disease("C", None, "t", [&["c1", "c2"], &[], &["c3"], &[]]),
                    disease("D", None, "u", [&[], &[], &[], &["d1", "d2"]]),
                ],
                &[],
            );
            let b = sample_entity_batch(&tree, &mut ChaCha8Rng::seed_from_u64(seed), n, k).unwrap();
            let distinct: HashSet<_> = b.entity_ids.iter().collect();
            prop_assert_eq!(distinct.len(), n);
            prop_assert_eq!(b.texts.len(), n * k);
            for (g, &e) in b.entity_ids.iter().enumerate() {
                let own: HashSet<&str> = tree.nodes[e].attributes.iter().map(|a| a.text.as_str()).collect();
                for t in b.group(g) {
                    prop_assert!(own.contains(t.as_str()));
                }
            }
        }
    }
}
