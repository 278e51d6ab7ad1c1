//! Synthetic corpus, policies, metadata and manifest for the search pipeline.
//!
//! Users get a symmetric friendship graph in which everyone has the same
//! number of friends. Documents are public, private or shared with friends
//! (or friends of friends); a small share of public documents is censored
//! in one region. Text is drawn from a Zipf-distributed vocabulary so that
//! the most frequent words match most documents.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};
use thiserror::Error;

use crate::analyzer::{ClassSpec, Manifest, ManifestError, TaskSpec};
use crate::meta::MetadataView;
use crate::model::{ClassId, ConduitId, ListId, Principal, Region, TaskId};
use crate::policy::{parse_policy_file, ParseError, PolicySet};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("infeasible friendship graph: {users} users with {friends} friends each")]
    Infeasible { users: usize, friends: usize },
    #[error("invalid corpus spec: {0}")]
    BadSpec(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("policies: {0}")]
    Policy(#[from] ParseError),
    #[error("manifest: {0}")]
    Manifest(#[from] ManifestError),
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io { path: path.to_owned(), source }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSpec {
    pub users: usize,
    /// Defaults to `min(100, users / 4)`.
    pub friends_per_user: Option<usize>,
    pub docs: usize,
    /// Public, private and friends-only shares.
    pub mix: [f64; 3],
    /// Share of all documents that is public but censored in one region.
    pub censored_fraction: f64,
    pub regions: usize,
    pub vocabulary: usize,
    pub words_per_doc: usize,
    pub clock: i64,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> CorpusSpec {
        CorpusSpec {
            users: 200,
            friends_per_user: None,
            docs: 5000,
            mix: [0.5, 0.3, 0.2],
            censored_fraction: 0.011,
            regions: 4,
            vocabulary: 400,
            words_per_doc: 24,
            clock: 1000,
            seed: 7,
        }
    }
}

impl CorpusSpec {
    pub fn friends(&self) -> usize {
        self.friends_per_user.unwrap_or_else(|| (self.users / 4).min(100))
    }

    /// Document counts: public (including censored), censored, private,
    /// friends, friends-of-friends.
    pub fn counts(&self) -> [usize; 5] {
        let public = (self.docs as f64 * self.mix[0]).round() as usize;
        let private = ((self.docs as f64 * self.mix[1]).round() as usize).min(self.docs - public);
        let shared = self.docs - public - private;
        let censored = ((self.docs as f64 * self.censored_fraction).round() as usize).min(public);
        let friends = shared.div_ceil(2);
        [public, censored, private, friends, shared - friends]
    }

    fn validate(&self) -> Result<(), CorpusError> {
        let bad = |m: &str| Err(CorpusError::BadSpec(m.to_owned()));
        if self.mix.iter().any(|p| !(0.0..=1.0).contains(p)) || (self.mix.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad("mix shares must be in [0, 1] and sum to 1");
        }
        if !(0.0..=self.mix[0]).contains(&self.censored_fraction) {
            return bad("censored fraction must be between 0 and the public share");
        }
        if self.regions == 0 {
            return bad("at least one region is required");
        }
        if self.docs > 0 && (self.vocabulary == 0 || self.words_per_doc == 0) {
            return bad("documents need a vocabulary and words");
        }
        let [_, _, private, friends, fof] = self.counts();
        if self.users == 0 && private + friends + fof > 0 {
            return bad("owned documents need at least one user");
        }
        let f = self.friends();
        if self.users > 0 && (f >= self.users || (self.users * f) % 2 == 1) {
            return Err(CorpusError::Infeasible { users: self.users, friends: f });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum DocKind {
    Public,
    /// Censored in the given region.
    Censored(Region),
    Private(Principal),
    Friends(Principal),
    Fof(Principal),
}

impl DocKind {
    pub fn class(&self) -> ClassId {
        match self {
            DocKind::Public => ClassId::from("public"),
            DocKind::Censored(r) => ClassId::new(format!("censored.{r}")),
            DocKind::Private(u) => ClassId::new(format!("private.{u}")),
            DocKind::Friends(u) => ClassId::new(format!("friends.{u}")),
            DocKind::Fof(u) => ClassId::new(format!("fof.{u}")),
        }
    }

    fn path(&self) -> String {
        match self {
            DocKind::Public => "docs/public".to_owned(),
            DocKind::Censored(r) => format!("docs/censored/{r}"),
            DocKind::Private(u) => format!("docs/private/{u}"),
            DocKind::Friends(u) => format!("docs/friends/{u}"),
            DocKind::Fof(u) => format!("docs/fof/{u}"),
        }
    }

    /// Parses a document conduit id.
    pub fn of_conduit(id: &str) -> Option<DocKind> {
        let mut parts = id.split('/');
        if parts.next()? != "docs" {
            return None;
        }
        let kind = parts.next()?;
        let owner = parts.next()?;
        if kind == "public" {
            return Some(DocKind::Public);
        }
        parts.next()?;
        match kind {
            "censored" => Some(DocKind::Censored(Region::from(owner))),
            "private" => Some(DocKind::Private(Principal::from(owner))),
            "friends" => Some(DocKind::Friends(Principal::from(owner))),
            "fof" => Some(DocKind::Fof(Principal::from(owner))),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Doc {
    pub id: ConduitId,
    pub kind: DocKind,
    /// First line is the snippet.
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct User {
    pub id: Principal,
    pub home: Region,
}

/// A generated (or loaded) corpus and everything the pipeline needs.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub users: Vec<User>,
    pub regions: Vec<Region>,
    pub docs: Vec<Doc>,
    pub profiles: BTreeMap<Principal, String>,
    pub policies: PolicySet,
    pub manifest: Manifest,
    /// Lists and clock; class policies are bound by the pipeline.
    pub meta: MetadataView,
    /// Vocabulary ordered by decreasing frequency.
    pub vocabulary: Vec<String>,
}

pub fn worker_instance(user: &Principal) -> TaskId {
    TaskId::new(format!("worker.{user}"))
}

pub fn friends_list(user: &Principal) -> ListId {
    ListId::new(format!("{user}.friends"))
}

pub fn fof_list(user: &Principal) -> ListId {
    ListId::new(format!("{user}.fof"))
}

pub fn blacklist(region: &Region) -> ListId {
    ListId::new(format!("blacklist.{region}"))
}

pub fn profile_key(user: &Principal) -> String {
    format!("profile:{user}")
}

pub const ENGINE: &str = "engine";
pub const INDEXER: &str = "indexer";
pub const FRONTEND: &str = "frontend";

/// The symmetric friendship graph: a circulant graph over a shuffled user
/// order, so every user has exactly `f` friends.
fn friendships(n: usize, f: usize, rng: &mut ChaCha8Rng) -> Vec<BTreeSet<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut adj = vec![BTreeSet::new(); n];
    let mut connect = |a: usize, b: usize| {
        adj[order[a]].insert(order[b]);
        adj[order[b]].insert(order[a]);
    };
    for i in 0..n {
        for d in 1..=f / 2 {
            connect(i, (i + d) % n);
        }
        if f % 2 == 1 && i < n / 2 {
            connect(i, i + n / 2);
        }
    }
    adj
}

fn region_disjunction(entry: &str, regions: &[Region]) -> String {
    regions.iter().map(|r| format!("region({r}) & notin(blacklist.{r}, {entry})")).collect::<Vec<_>>().join(" | ")
}

fn policy_text(users: &[User], regions: &[Region]) -> String {
    let fd = "declassify :- propagate until fdonly => true;";
    let mut out = String::new();
    let mut p = |name: &str, read: &str, update: &str, declass: &str| {
        let _ = writeln!(out, "policy {name} {{ read :- {read}; update :- {update}; {declass} }}");
    };
    let plain = "declassify :- propagate;";
    p(ENGINE, "false", "false", fd);
    p("index", "false", &format!("key({INDEXER})"), fd);
    p("publiclog", "true", "true", plain);
    if !regions.is_empty() {
        p("public", &region_disjunction("public", regions), "false", fd);
    }
    for r in regions {
        p(&format!("censored.{r}"), &region_disjunction(&format!("censored.{r}"), regions), "false", fd);
    }
    for User { id: u, home } in users {
        p(&format!("worker.{u}"), &format!("key({u}) & region({home})"), "false", plain);
        p(&format!("profile.{u}"), &format!("key({u})"), &format!("key({u})"), plain);
        p(&format!("private.{u}"), &format!("key({u})"), &format!("key({u})"), fd);
        p(&format!("friends.{u}"), &format!("key({u}) | key(X) & in({u}.friends, X)"), &format!("key({u})"), fd);
        p(&format!("fof.{u}"), &format!("key({u}) | key(X) & in({u}.fof, X)"), &format!("key({u})"), fd);
    }
    out
}

fn build_manifest(users: &[User], regions: &[Region]) -> Result<Manifest, CorpusError> {
    let mut m = Manifest::default();
    let mut class = |id: String, members: String| -> Result<ClassId, CorpusError> {
        let spec = ClassSpec::new(&id, &members).map_err(|e| CorpusError::BadSpec(e.to_string()))?;
        let id = ClassId::new(id);
        m.classes.insert(id.clone(), spec);
        Ok(id)
    };
    let mut doc_classes = Vec::new();
    if !regions.is_empty() {
        doc_classes.push(class("public".into(), "docs/public/*".into())?);
    }
    for r in regions {
        doc_classes.push(class(format!("censored.{r}"), format!("docs/censored/{r}/*"))?);
    }
    let mut profiles = Vec::new();
    for User { id: u, .. } in users {
        for kind in ["private", "friends", "fof"] {
            doc_classes.push(class(format!("{kind}.{u}"), format!("docs/{kind}/{u}/*"))?);
        }
        profiles.push(class(format!("profile.{u}"), format!("kv/profile:{u}"))?);
    }
    let index = class("index".into(), "index/*".into())?;
    let publiclog = class("publiclog".into(), "log/public".into())?;

    let task = |user: &str, region: Option<&Region>, taint: &str| TaskSpec {
        user: Principal::from(user),
        region: region.cloned(),
        taint: vec![taint.to_owned()],
        active: true,
    };
    let (engine, indexer, frontend) = (TaskId::from(ENGINE), TaskId::from(INDEXER), TaskId::from(FRONTEND));
    m.tasks.insert(engine.clone(), task(ENGINE, None, ENGINE));
    m.tasks.insert(indexer.clone(), task(INDEXER, None, ENGINE));
    m.tasks.insert(frontend.clone(), task(FRONTEND, None, "publiclog"));
    for c in &doc_classes {
        m.reads.insert((engine.clone(), c.clone()));
        m.reads.insert((indexer.clone(), c.clone()));
    }
    m.reads.insert((engine, index.clone()));
    m.writes.insert((indexer, index));
    m.writes.insert((frontend, publiclog));
    for (User { id: u, home }, profile) in users.iter().zip(profiles) {
        let w = worker_instance(u);
        m.tasks.insert(w.clone(), task(u.as_str(), Some(home), &format!("worker.{u}")));
        for c in &doc_classes {
            m.reads.insert((w.clone(), c.clone()));
        }
        m.reads.insert((w, profile));
    }
    Ok(m)
}

fn doc_text(id: usize, words: &[&str]) -> String {
    let head = words.iter().take(6).copied().collect::<Vec<_>>().join(" ");
    let body = words.iter().skip(6).copied().collect::<Vec<_>>().join(" ");
    format!("d{id:05}: {head}\n{body}\n")
}

impl Corpus {
    pub fn generate(spec: &CorpusSpec) -> Result<Corpus, CorpusError> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let width = spec.users.max(1).to_string().len().max(3);
        let regions: Vec<Region> = (0..spec.regions).map(|i| Region::new(format!("r{i}"))).collect();
        let users: Vec<User> = (0..spec.users)
            .map(|i| User { id: Principal::new(format!("u{i:0width$}")), home: regions[i % regions.len()].clone() })
            .collect();

        let mut meta = MetadataView::new(spec.clock);
        let adj = friendships(spec.users, spec.friends(), &mut rng);
        for (i, u) in users.iter().enumerate() {
            let friends: BTreeSet<usize> = adj[i].clone();
            let mut fof = friends.clone();
            for &j in &friends {
                fof.extend(adj[j].iter().copied());
            }
            fof.remove(&i);
            let name = |s: &BTreeSet<usize>| s.iter().map(|&j| users[j].id.to_string()).collect::<Vec<_>>();
            meta.set_list(friends_list(&u.id), name(&friends));
            meta.set_list(fof_list(&u.id), name(&fof));
        }
        for r in &regions {
            meta.set_list(blacklist(r), [format!("censored.{r}")]);
        }

        let vocabulary: Vec<String> = (0..spec.vocabulary).map(|i| format!("w{i:03}")).collect();
        let [public, censored, private, friends, fof] = spec.counts();
        let mut kinds = Vec::with_capacity(spec.docs);
        let owner = |rng: &mut ChaCha8Rng| users[rng.random_range(0..users.len())].id.clone();
        for _ in 0..public - censored {
            kinds.push(DocKind::Public);
        }
        for _ in 0..censored {
            kinds.push(DocKind::Censored(regions[rng.random_range(0..regions.len())].clone()));
        }
        for _ in 0..private {
            kinds.push(DocKind::Private(owner(&mut rng)));
        }
        for _ in 0..friends {
            kinds.push(DocKind::Friends(owner(&mut rng)));
        }
        for _ in 0..fof {
            kinds.push(DocKind::Fof(owner(&mut rng)));
        }
        kinds.shuffle(&mut rng);

        let mut docs = Vec::with_capacity(spec.docs);
        if spec.docs > 0 {
            let zipf = Zipf::new(spec.vocabulary as f64, 1.0).map_err(|e| CorpusError::BadSpec(e.to_string()))?;
            for (i, kind) in kinds.into_iter().enumerate() {
                let words: Vec<&str> =
                    (0..spec.words_per_doc).map(|_| vocabulary[zipf.sample(&mut rng) as usize - 1].as_str()).collect();
                let id = ConduitId::new(format!("{}/d{i:05}", kind.path()));
                docs.push(Doc { id, text: doc_text(i, &words), kind });
            }
        }
        let profiles = users
            .iter()
            .map(|u| (u.id.clone(), format!("prefs {} lang=l{}\n", u.id, rng.random_range(0..8))))
            .collect();

        let policies = parse_policy_file(&policy_text(&users, &regions))?;
        let manifest = build_manifest(&users, &regions)?;
        Ok(Corpus { users, regions, docs, profiles, policies, manifest, meta, vocabulary })
    }

    pub fn user(&self, id: &str) -> Option<&User> {
        self.users.iter().find(|u| u.id.as_str() == id)
    }

    /// The `n` most frequent vocabulary words.
    pub fn frequent_words(&self, n: usize) -> &[String] {
        &self.vocabulary[..n.min(self.vocabulary.len())]
    }

    /// Writes the corpus as a directory tree.
    pub fn write_dir(&self, dir: &Path) -> Result<(), CorpusError> {
        let write = |rel: &str, text: &str| -> Result<(), CorpusError> {
            let path = dir.join(rel);
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent).map_err(io_err(parent))?;
            }
            fs::write(&path, text).map_err(io_err(&path))
        };
        write("policies.pol", &self.policies.serialize())?;
        write("manifest.txt", &self.manifest.to_string())?;
        write("metadata/clock", &format!("{}\n", self.meta.clock()))?;
        for (id, list) in self.meta.lists() {
            let body: String = list.entries.iter().map(|e| format!("{e}\n")).collect();
            write(&format!("metadata/lists/{id}"), &body)?;
        }
        write("vocabulary.txt", &self.vocabulary.join("\n"))?;
        for d in &self.docs {
            write(&format!("corpus/{}", d.id), &d.text)?;
        }
        for (u, text) in &self.profiles {
            write(&format!("corpus/kv/{}", profile_key(u)), text)?;
        }
        Ok(())
    }

    /// Reads a directory written by [`Corpus::write_dir`].
    pub fn load_dir(dir: &Path) -> Result<Corpus, CorpusError> {
        let read = |rel: &str| -> Result<String, CorpusError> {
            let path = dir.join(rel);
            fs::read_to_string(&path).map_err(io_err(&path))
        };
        let policies = parse_policy_file(&read("policies.pol")?)?;
        let manifest = Manifest::parse(&read("manifest.txt")?)?;
        let clock_path = dir.join("metadata/clock");
        let clock = read("metadata/clock")?
            .trim()
            .parse::<i64>()
            .map_err(|e| CorpusError::Format { path: clock_path, msg: e.to_string() })?;
        let meta = load_metadata(&dir.join("metadata"), clock)?;
        let vocabulary = read("vocabulary.txt").map(|v| v.lines().map(str::to_owned).collect()).unwrap_or_default();

        let mut users = Vec::new();
        for spec in manifest.tasks.values() {
            if let Some(home) = &spec.region {
                if spec.taint.first().is_some_and(|t| t.starts_with("worker.")) {
                    users.push(User { id: spec.user.clone(), home: home.clone() });
                }
            }
        }
        let mut regions: Vec<Region> =
            meta.lists().filter_map(|(id, _)| id.as_str().strip_prefix("blacklist.").map(Region::from)).collect();
        regions.sort();

        let mut docs = Vec::new();
        let mut files = Vec::new();
        collect_files(&dir.join("corpus/docs"), &mut files)?;
        files.sort_by(|a, b| a.file_name().cmp(&b.file_name()).then_with(|| a.cmp(b)));
        for path in files {
            let rel = path.strip_prefix(dir.join("corpus")).expect("walked under corpus/");
            let id = rel.to_string_lossy().replace('\\', "/");
            let kind = DocKind::of_conduit(&id)
                .ok_or_else(|| CorpusError::Format { path: path.clone(), msg: "not a document path".into() })?;
            let text = fs::read_to_string(&path).map_err(io_err(&path))?;
            docs.push(Doc { id: ConduitId::new(id), kind, text });
        }
        let mut profiles = BTreeMap::new();
        for u in &users {
            let path = dir.join("corpus/kv").join(profile_key(&u.id));
            if let Ok(text) = fs::read_to_string(&path) {
                profiles.insert(u.id.clone(), text);
            }
        }
        Ok(Corpus { users, regions, docs, profiles, policies, manifest, meta, vocabulary })
    }
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<(), CorpusError> {
    if !dir.exists() {
        return Ok(());
    }
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        if path.is_dir() {
            collect_files(&path, out)?;
        } else {
            out.push(path);
        }
    }
    Ok(())
}

/// Reads `lists/<id>` files (one entry per line) under `dir`.
pub fn load_metadata(dir: &Path, clock: i64) -> Result<MetadataView, CorpusError> {
    let mut meta = MetadataView::new(clock);
    let lists = dir.join("lists");
    if lists.exists() {
        for entry in fs::read_dir(&lists).map_err(io_err(&lists))? {
            let path = entry.map_err(io_err(&lists))?.path();
            let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_owned();
            let text = fs::read_to_string(&path).map_err(io_err(&path))?;
            meta.set_list(ListId::new(name), text.lines().filter(|l| !l.is_empty()).map(str::to_owned));
        }
    }
    Ok(meta)
}
