//! Class hierarchy derived from a folder tree, plus title alias tables for
//! sources that label images by free-text title instead of by folder.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::{Component, Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_normalization::char::is_combining_mark;
use unicode_normalization::UnicodeNormalization;

pub const ROOT_NAME: &str = "artifact";

/// File extensions treated as images when scanning a folder tree.
pub const IMAGE_EXTENSIONS: [&str; 3] = ["ppm", "pgm", "pnm"];

#[derive(Debug, Error)]
pub enum TaxonomyError {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{0} contains no class directories")]
    EmptyRoot(PathBuf),
    #[error("sibling directories `{first}` and `{second}` both normalize to `{normalized}`")]
    DuplicateSibling {
        first: String,
        second: String,
        normalized: String,
    },
    #[error("class `{name}` appears under both `{first_parent}` and `{second_parent}`")]
    DuplicateClass {
        name: String,
        first_parent: String,
        second_parent: String,
    },
    #[error("unknown class `{0}`")]
    UnknownClass(String),
    #[error("{0} is not inside the taxonomy tree")]
    OutsideTree(PathBuf),
    #[error("{0} sits at the taxonomy root; images must live inside a class directory")]
    FileAtRoot(PathBuf),
    #[error("title `{title}` matches several equally long aliases: {candidates:?}")]
    AmbiguousAlias {
        title: String,
        candidates: Vec<String>,
    },
    #[error("taxonomy json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, TaxonomyError>;

/// Lowercase, strip diacritics, trim, and join whitespace runs with `_`.
pub fn normalize_name(raw: &str) -> String {
    let stripped: String = raw
        .nfd()
        .filter(|c| !is_combining_mark(*c))
        .collect::<String>()
        .to_lowercase();
    stripped.split_whitespace().collect::<Vec<_>>().join("_")
}

/// Stable class identifier: the normalized class name.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassId(String);

impl ClassId {
    pub fn new(name: &str) -> Self {
        Self(normalize_name(name))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for ClassId {
    fn from(s: &str) -> Self {
        Self::new(s)
    }
}

#[derive(Debug, Clone)]
struct Node {
    id: ClassId,
    display: String,
    parent: Option<usize>,
    children: Vec<usize>,
    images: Vec<PathBuf>,
}

/// A resolved image label: the deepest class and its ancestors from the top
/// of the tree down to (excluding) the leaf. The synthetic root is omitted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Label {
    pub leaf: ClassId,
    pub ancestors: Vec<ClassId>,
}

#[derive(Debug, Clone)]
pub struct Taxonomy {
    nodes: Vec<Node>,
    index: HashMap<ClassId, usize>,
    root_path: Option<PathBuf>,
    unattached: Vec<PathBuf>,
}

impl Default for Taxonomy {
    fn default() -> Self {
        Self::new()
    }
}

impl Taxonomy {
    /// An empty taxonomy holding only the synthetic root.
    pub fn new() -> Self {
        let root = Node {
            id: ClassId(ROOT_NAME.into()),
            display: "Artifact".into(),
            parent: None,
            children: Vec::new(),
            images: Vec::new(),
        };
        Self {
            nodes: vec![root],
            index: HashMap::new(),
            root_path: None,
            unattached: Vec::new(),
        }
    }

    /// A depth-1 taxonomy with one class per name.
    pub fn flat<S: AsRef<str>>(names: &[S]) -> Result<Self> {
        let mut t = Self::new();
        for name in names {
            t.add_class(name.as_ref(), None)?;
        }
        Ok(t)
    }

    /// Adds a class under `parent` (the root when `None`).
    pub fn add_class(&mut self, display: &str, parent: Option<&ClassId>) -> Result<ClassId> {
        let parent_idx = match parent {
            Some(p) => self.node_index(p)?,
            None => 0,
        };
        let id = ClassId::new(display);
        if let Some(&sibling) = self.nodes[parent_idx]
            .children
            .iter()
            .find(|&&c| self.nodes[c].id == id)
        {
            return Err(TaxonomyError::DuplicateSibling {
                first: self.nodes[sibling].display.clone(),
                second: display.to_string(),
                normalized: id.0,
            });
        }
        if let Some(&existing) = self.index.get(&id) {
            let parent_name = |i: usize| {
                self.nodes[i]
                    .parent
                    .map_or_else(String::new, |p| self.nodes[p].id.0.clone())
            };
            return Err(TaxonomyError::DuplicateClass {
                name: id.0,
                first_parent: parent_name(existing),
                second_parent: self.nodes[parent_idx].id.0.clone(),
            });
        }
        let idx = self.nodes.len();
        self.nodes.push(Node {
            id: id.clone(),
            display: display.to_string(),
            parent: Some(parent_idx),
            children: Vec::new(),
            images: Vec::new(),
        });
        self.nodes[parent_idx].children.push(idx);
        self.index.insert(id.clone(), idx);
        Ok(id)
    }

    fn node_index(&self, id: &ClassId) -> Result<usize> {
        self.index
            .get(id)
            .copied()
            .ok_or_else(|| TaxonomyError::UnknownClass(id.0.clone()))
    }

    pub fn contains(&self, id: &ClassId) -> bool {
        self.index.contains_key(id)
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    /// Folder the taxonomy was loaded from, if any.
    pub fn root_path(&self) -> Option<&Path> {
        self.root_path.as_deref()
    }

    /// Classes in pre-order (parents before children, siblings by insertion).
    pub fn classes(&self) -> Vec<ClassId> {
        let mut out = Vec::with_capacity(self.len());
        let mut stack: Vec<usize> = self.nodes[0].children.iter().rev().copied().collect();
        while let Some(i) = stack.pop() {
            out.push(self.nodes[i].id.clone());
            stack.extend(self.nodes[i].children.iter().rev());
        }
        out
    }

    pub fn display_name(&self, id: &ClassId) -> Result<&str> {
        Ok(&self.nodes[self.node_index(id)?].display)
    }

    pub fn parent(&self, id: &ClassId) -> Result<Option<ClassId>> {
        let p = self.nodes[self.node_index(id)?].parent.expect("non-root has parent");
        Ok((p != 0).then(|| self.nodes[p].id.clone()))
    }

    pub fn children(&self, id: &ClassId) -> Result<Vec<ClassId>> {
        let node = &self.nodes[self.node_index(id)?];
        Ok(node.children.iter().map(|&c| self.nodes[c].id.clone()).collect())
    }

    /// Images attached to `id` while scanning folders, relative to the root.
    pub fn images(&self, id: &ClassId) -> Result<&[PathBuf]> {
        Ok(&self.nodes[self.node_index(id)?].images)
    }

    /// Image files found directly in the root folder (not attached to any class).
    pub fn unattached_images(&self) -> &[PathBuf] {
        &self.unattached
    }

    /// Ancestors of `id` from the top level down to its parent.
    pub fn ancestors(&self, id: &ClassId) -> Result<Vec<ClassId>> {
        let mut chain = Vec::new();
        let mut cur = self.nodes[self.node_index(id)?].parent;
        while let Some(i) = cur {
            if i == 0 {
                break;
            }
            chain.push(self.nodes[i].id.clone());
            cur = self.nodes[i].parent;
        }
        chain.reverse();
        Ok(chain)
    }

    /// Depth of a class; children of the root have depth 0.
    pub fn depth(&self, id: &ClassId) -> Result<usize> {
        Ok(self.ancestors(id)?.len())
    }

    /// The ancestor of `id` at `depth`, or `id` itself when it is shallower.
    pub fn rollup(&self, id: &ClassId, depth: usize) -> Result<ClassId> {
        let ancestors = self.ancestors(id)?;
        Ok(ancestors.get(depth).cloned().unwrap_or_else(|| id.clone()))
    }

    /// Label of an image file from the directories that contain it. Relative
    /// paths are taken relative to the taxonomy root.
    pub fn resolve_label(&self, file_path: &Path) -> Result<Label> {
        let relative = match (&self.root_path, file_path.is_absolute()) {
            (Some(root), true) => file_path
                .strip_prefix(root)
                .map_err(|_| TaxonomyError::OutsideTree(file_path.to_path_buf()))?,
            (None, true) => return Err(TaxonomyError::OutsideTree(file_path.to_path_buf())),
            (_, false) => file_path,
        };
        let mut dirs = Vec::new();
        for comp in relative.parent().into_iter().flat_map(Path::components) {
            match comp {
                Component::Normal(s) => dirs.push(s.to_string_lossy().into_owned()),
                Component::CurDir => {}
                _ => return Err(TaxonomyError::OutsideTree(file_path.to_path_buf())),
            }
        }
        if dirs.is_empty() {
            return Err(TaxonomyError::FileAtRoot(file_path.to_path_buf()));
        }
        let mut node = 0;
        for dir in &dirs {
            let id = ClassId::new(dir);
            node = *self.nodes[node]
                .children
                .iter()
                .find(|&&c| self.nodes[c].id == id)
                .ok_or_else(|| TaxonomyError::OutsideTree(file_path.to_path_buf()))?;
        }
        let leaf = self.nodes[node].id.clone();
        let ancestors = self.ancestors(&leaf)?;
        Ok(Label { leaf, ancestors })
    }

    /// JSON tree export rooted at the synthetic root.
    pub fn to_tree(&self) -> TaxonomyTree {
        self.subtree(0)
    }

    fn subtree(&self, i: usize) -> TaxonomyTree {
        let n = &self.nodes[i];
        TaxonomyTree {
            name: n.id.0.clone(),
            display: n.display.clone(),
            children: n.children.iter().map(|&c| self.subtree(c)).collect(),
        }
    }

    pub fn from_tree(tree: &TaxonomyTree) -> Result<Self> {
        fn add(t: &mut Taxonomy, node: &TaxonomyTree, parent: Option<&ClassId>) -> Result<()> {
            let id = t.add_class(&node.display, parent)?;
            node.children.iter().try_for_each(|c| add(t, c, Some(&id)))
        }
        let mut t = Self::new();
        for child in &tree.children {
            add(&mut t, child, None)?;
        }
        Ok(t)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_tree()).expect("tree serializes")
    }

    pub fn from_json(json: &str) -> Result<Self> {
        Self::from_tree(&serde_json::from_str(json)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaxonomyTree {
    pub name: String,
    pub display: String,
    #[serde(default)]
    pub children: Vec<TaxonomyTree>,
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let io = |source| TaxonomyError::Io {
        path: dir.to_path_buf(),
        source,
    };
    let mut entries = std::fs::read_dir(dir)
        .map_err(io)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<Vec<_>>>()
        .map_err(io)?;
    entries.sort();
    Ok(entries)
}

/// Builds a taxonomy from a folder tree: every directory is a class, nesting
/// is parenthood, and image files attach to the directory that holds them.
pub fn load_taxonomy_from_folders(root: impl AsRef<Path>) -> Result<Taxonomy> {
    let root = root.as_ref();
    let mut taxonomy = Taxonomy::new();
    taxonomy.root_path = Some(root.to_path_buf());

    fn walk(t: &mut Taxonomy, root: &Path, dir: &Path, parent: Option<&ClassId>) -> Result<()> {
        for path in sorted_entries(dir)? {
            if path.is_dir() {
                let name = path.file_name().expect("entry has a name").to_string_lossy();
                let id = t.add_class(&name, parent)?;
                walk(t, root, &path, Some(&id))?;
            } else if is_image(&path) {
                let rel = path.strip_prefix(root).expect("walk stays under root").to_path_buf();
                match parent {
                    Some(p) => {
                        let i = t.node_index(p)?;
                        t.nodes[i].images.push(rel);
                    }
                    None => t.unattached.push(rel),
                }
            }
        }
        Ok(())
    }

    walk(&mut taxonomy, root, root, None)?;
    if taxonomy.is_empty() {
        return Err(TaxonomyError::EmptyRoot(root.to_path_buf()));
    }
    Ok(taxonomy)
}

pub fn resolve_label(file_path: impl AsRef<Path>, taxonomy: &Taxonomy) -> Result<Label> {
    taxonomy.resolve_label(file_path.as_ref())
}

pub fn rollup(class: &ClassId, depth: usize, taxonomy: &Taxonomy) -> Result<ClassId> {
    taxonomy.rollup(class, depth)
}

/// Title patterns mapped to classes. Matching is on normalized text and the
/// longest matching pattern wins.
#[derive(Debug, Clone, Default)]
pub struct AliasTable {
    entries: Vec<(String, ClassId)>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AliasMatch {
    Matched(ClassId),
    Unmatched,
}

impl AliasTable {
    pub fn new<I, P, C>(entries: I) -> Self
    where
        I: IntoIterator<Item = (P, C)>,
        P: AsRef<str>,
        C: AsRef<str>,
    {
        let mut entries: Vec<(String, ClassId)> = entries
            .into_iter()
            .map(|(p, c)| (normalize_name(p.as_ref()), ClassId::new(c.as_ref())))
            .filter(|(p, _)| !p.is_empty())
            .collect();
        entries.sort();
        entries.dedup();
        Self { entries }
    }

    /// Parses a JSON object `{ "title pattern": "class name", ... }`. When a
    /// taxonomy is given every target class must exist in it.
    pub fn from_json(json: &str, taxonomy: Option<&Taxonomy>) -> Result<Self> {
        let map: BTreeMap<String, String> = serde_json::from_str(json)?;
        let table = Self::new(map);
        if let Some(t) = taxonomy {
            if let Some((_, c)) = table.entries.iter().find(|(_, c)| !t.contains(c)) {
                return Err(TaxonomyError::UnknownClass(c.0.clone()));
            }
        }
        Ok(table)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn apply(&self, title: &str) -> Result<AliasMatch> {
        let normalized = normalize_name(title);
        let hits: Vec<&(String, ClassId)> = self
            .entries
            .iter()
            .filter(|(p, _)| normalized.contains(p.as_str()))
            .collect();
        let Some(longest) = hits.iter().map(|(p, _)| p.chars().count()).max() else {
            return Ok(AliasMatch::Unmatched);
        };
        let best: Vec<&&(String, ClassId)> = hits
            .iter()
            .filter(|(p, _)| p.chars().count() == longest)
            .collect();
        let first = &best[0].1;
        if best.iter().any(|(_, c)| c != first) {
            return Err(TaxonomyError::AmbiguousAlias {
                title: title.to_string(),
                candidates: best.iter().map(|(p, c)| format!("{p} -> {c}")).collect(),
            });
        }
        Ok(AliasMatch::Matched(first.clone()))
    }
}

pub fn apply_alias(title: &str, table: &AliasTable) -> Result<AliasMatch> {
    table.apply(title)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    fn touch(path: &Path) {
        fs::create_dir_all(path.parent().unwrap()).unwrap();
        fs::write(path, b"P6\n1 1\n255\n\0\0\0").unwrap();
    }

    fn chest_tree() -> (tempfile::TempDir, Taxonomy) {
        let dir = tempfile::tempdir().unwrap();
        let r = dir.path();
        touch(&r.join("Chest_of_drawers/Semainier/img1.ppm"));
        touch(&r.join("Chest_of_drawers/Wellington_chest/img3.ppm"));
        touch(&r.join("Chest_of_drawers/img0.ppm"));
        touch(&r.join("Chairs/img2.ppm"));
        let t = load_taxonomy_from_folders(r).unwrap();
        (dir, t)
    }

    #[test]
    fn normalization_rules() {
        assert_eq!(normalize_name("  Chest of Drawers "), "chest_of_drawers");
        assert_eq!(normalize_name("Commode à vantaux"), "commode_a_vantaux");
        assert_eq!(normalize_name("Secrétaire  Abattant"), "secretaire_abattant");
        for raw in ["Wellington chest", "Fauteuil à la reine", "x"] {
            let once = normalize_name(raw);
            assert_eq!(normalize_name(&once), once);
        }
    }

    #[test]
    fn nested_folders_become_parent_and_children() {
        let (_d, t) = chest_tree();
        let chest = ClassId::new("chest_of_drawers");
        assert_eq!(
            t.children(&chest).unwrap(),
            vec![ClassId::new("semainier"), ClassId::new("wellington_chest")]
        );
        assert_eq!(t.parent(&ClassId::new("semainier")).unwrap(), Some(chest.clone()));
        assert_eq!(t.images(&chest).unwrap().len(), 1);
        assert_eq!(t.display_name(&ClassId::new("wellington_chest")).unwrap(), "Wellington_chest");
    }

    #[test]
    fn flat_tree_has_depth_one() {
        let dir = tempfile::tempdir().unwrap();
        for c in ["Chairs", "Tables", "Cabinets"] {
            touch(&dir.path().join(c).join("a.ppm"));
        }
        let t = load_taxonomy_from_folders(dir.path()).unwrap();
        assert_eq!(t.len(), 3);
        assert!(t.classes().iter().all(|c| t.depth(c).unwrap() == 0));
    }

    #[test]
    fn normalized_sibling_collision_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("Chest of Drawers")).unwrap();
        fs::create_dir_all(dir.path().join("chest_of_drawers")).unwrap();
        assert!(matches!(
            load_taxonomy_from_folders(dir.path()),
            Err(TaxonomyError::DuplicateSibling { .. })
        ));
    }

    #[test]
    fn empty_root_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        touch(&dir.path().join("stray.ppm"));
        assert!(matches!(
            load_taxonomy_from_folders(dir.path()),
            Err(TaxonomyError::EmptyRoot(_))
        ));
    }

    #[test]
    fn resolve_labels() {
        let (dir, t) = chest_tree();
        let label = t.resolve_label(Path::new("Chest_of_drawers/Semainier/img1.ppm")).unwrap();
        assert_eq!(label.leaf, ClassId::new("semainier"));
        assert_eq!(label.ancestors, vec![ClassId::new("chest_of_drawers")]);

        let label = resolve_label(dir.path().join("Chairs/img2.ppm"), &t).unwrap();
        assert_eq!(label.leaf, ClassId::new("chairs"));
        assert!(label.ancestors.is_empty());

        assert!(matches!(
            t.resolve_label(Path::new("img.ppm")),
            Err(TaxonomyError::FileAtRoot(_))
        ));
        assert!(matches!(
            t.resolve_label(Path::new("Sofas/x.ppm")),
            Err(TaxonomyError::OutsideTree(_))
        ));
        assert!(matches!(
            t.resolve_label(Path::new("/elsewhere/Chairs/x.ppm")),
            Err(TaxonomyError::OutsideTree(_))
        ));
    }

    #[test]
    fn rollup_examples() {
        let (_d, t) = chest_tree();
        let semainier = ClassId::new("semainier");
        let chest = ClassId::new("chest_of_drawers");
        assert_eq!(rollup(&semainier, 0, &t).unwrap(), chest);
        assert_eq!(rollup(&chest, 0, &t).unwrap(), chest);
        assert_eq!(rollup(&semainier, 5, &t).unwrap(), semainier);
        assert!(matches!(
            rollup(&ClassId::new("sofa"), 0, &t),
            Err(TaxonomyError::UnknownClass(_))
        ));
    }

    #[test]
    fn json_tree_round_trip() {
        let (_d, t) = chest_tree();
        let back = Taxonomy::from_json(&t.to_json()).unwrap();
        assert_eq!(back.classes(), t.classes());
        assert_eq!(back.to_tree(), t.to_tree());
    }

    #[test]
    fn alias_examples() {
        let table = AliasTable::new([("side chair", "side_chair")]);
        assert_eq!(
            apply_alias("Side Chair", &table).unwrap(),
            AliasMatch::Matched(ClassId::new("side_chair"))
        );
        assert_eq!(apply_alias("Commode à vantaux", &table).unwrap(), AliasMatch::Unmatched);

        let table = AliasTable::new([("chair", "chairs"), ("side chair", "side_chair")]);
        assert_eq!(
            table.apply("side chair").unwrap(),
            AliasMatch::Matched(ClassId::new("side_chair"))
        );
        assert_eq!(
            table.apply("Arm chair, carved").unwrap(),
            AliasMatch::Matched(ClassId::new("chairs"))
        );
    }

    #[test]
    fn equal_length_aliases_to_different_classes_are_ambiguous() {
        let table = AliasTable::new([("sofa", "sofas"), ("bed", "beds"), ("desk", "desks")]);
        let err = table.apply("Sofa desk").unwrap_err();
        assert!(matches!(err, TaxonomyError::AmbiguousAlias { ref candidates, .. } if candidates.len() == 2));
    }

    #[test]
    fn alias_json_checks_classes() {
        let t = Taxonomy::flat(&["Chairs"]).unwrap();
        assert!(AliasTable::from_json(r#"{"arm chair": "chairs"}"#, Some(&t)).is_ok());
        assert!(matches!(
            AliasTable::from_json(r#"{"sofa": "sofas"}"#, Some(&t)),
            Err(TaxonomyError::UnknownClass(_))
        ));
    }
}
