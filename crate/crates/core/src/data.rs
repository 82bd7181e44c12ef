//! Dataset files and the synthetic block-preference generator.
//!
//! Text format: one user per line, whitespace-separated integer ids, the
//! first token being the user and the rest its items.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use log::warn;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::eval::GroundTruth;
use crate::graph::InteractionGraph;

pub const TRAIN_FILE: &str = "train.txt";
pub const TEST_FILE: &str = "test.txt";
pub const META_FILE: &str = "dataset.meta";

/// Train graph, test ground truth and where they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    pub name: String,
    pub train: InteractionGraph,
    pub truth: GroundTruth,
    pub provenance: String,
    /// Test pairs dropped because they were also training pairs.
    pub dropped_test_pairs: usize,
}

impl DatasetBundle {
    pub fn num_users(&self) -> usize {
        self.train.num_users()
    }

    pub fn num_items(&self) -> usize {
        self.train.num_items()
    }

    fn assemble(
        name: String,
        provenance: String,
        train_pairs: &[(usize, usize)],
        test_pairs: &[(usize, usize)],
        num_users: usize,
        num_items: usize,
    ) -> Result<Self> {
        let train = InteractionGraph::new(train_pairs, num_users, num_items)?;
        let (truth, dropped) = GroundTruth::from_graph(&train, test_pairs);
        if dropped > 0 {
            warn!("{name}: dropped {dropped} test pairs that also appear in training");
        }
        Ok(Self {
            name,
            train,
            truth,
            provenance,
            dropped_test_pairs: dropped,
        })
    }
}

struct ParsedFile {
    pairs: Vec<(usize, usize)>,
    max_user: usize,
    max_item: Option<usize>,
}

fn parse_interactions(path: &Path) -> Result<ParsedFile> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut pairs = Vec::new();
    let mut max_user = None;
    let mut max_item = None;
    for (lineno, line) in text.lines().enumerate() {
        let mut tokens = line.split_whitespace();
        let Some(first) = tokens.next() else { continue };
        let parse = |tok: &str| {
            tok.parse::<usize>().map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                line: lineno + 1,
                message: format!("expected a nonnegative integer id, found {tok:?}"),
            })
        };
        let user = parse(first)?;
        max_user = max_user.max(Some(user));
        let before = pairs.len();
        for tok in tokens {
            let item = parse(tok)?;
            max_item = max_item.max(Some(item));
            pairs.push((user, item));
        }
        if pairs.len() == before {
            warn!("{}:{}: user {user} has no items", path.display(), lineno + 1);
        }
    }
    let Some(max_user) = max_user else {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            message: "file contains no users".into(),
        });
    };
    Ok(ParsedFile {
        pairs,
        max_user,
        max_item,
    })
}

/// Optional universe sizes for datasets whose largest id underestimates them.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SizeOverride {
    pub num_users: Option<usize>,
    pub num_items: Option<usize>,
}

/// Parses a train/test file pair. `n` and `m` are one past the largest ids seen
/// in either file unless overridden with something larger.
pub fn parse_dataset(train_path: &Path, test_path: &Path, sizes: SizeOverride) -> Result<DatasetBundle> {
    let train = parse_interactions(train_path)?;
    let test = parse_interactions(test_path)?;
    let inferred_users = train.max_user.max(test.max_user) + 1;
    let inferred_items = train.max_item.max(test.max_item).map_or(0, |i| i + 1);
    let pick = |inferred: usize, forced: Option<usize>, name: &'static str| match forced {
        Some(f) if f < inferred => Err(Error::InvalidParameter {
            name,
            reason: format!("override {f} is smaller than the {inferred} ids present in the data"),
        }),
        Some(f) => Ok(f),
        None => Ok(inferred),
    };
    let n = pick(inferred_users, sizes.num_users, "num_users")?;
    let m = pick(inferred_items, sizes.num_items, "num_items")?;
    let name = train_path
        .parent()
        .and_then(|p| p.file_name())
        .map_or_else(|| "dataset".to_string(), |s| s.to_string_lossy().into_owned());
    DatasetBundle::assemble(
        name,
        format!("files: {} {}", train_path.display(), test_path.display()),
        &train.pairs,
        &test.pairs,
        n,
        m,
    )
}

/// Loads `train.txt` / `test.txt` from `dir`, honoring `dataset.meta` sizes when present.
pub fn load_dataset_dir(dir: &Path) -> Result<DatasetBundle> {
    let mut sizes = SizeOverride::default();
    let meta_path = dir.join(META_FILE);
    let mut name = None;
    if meta_path.exists() {
        let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        for (key, value) in crate::config::parse_kv(&text, &meta_path)? {
            match key.as_str() {
                "num_users" => sizes.num_users = Some(parse_meta(&meta_path, &key, &value)?),
                "num_items" => sizes.num_items = Some(parse_meta(&meta_path, &key, &value)?),
                "name" => name = Some(value),
                _ => {}
            }
        }
    }
    let mut bundle = parse_dataset(&dir.join(TRAIN_FILE), &dir.join(TEST_FILE), sizes)?;
    if let Some(name) = name {
        bundle.name = name;
    }
    Ok(bundle)
}

fn parse_meta(path: &Path, key: &str, value: &str) -> Result<usize> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{}: {key} = {value:?} is not a count", path.display())))
}

fn write_user_lines(path: &Path, num_users: usize, items_of: impl Fn(usize) -> Vec<usize>) -> Result<()> {
    let mut out = String::new();
    for u in 0..num_users {
        out.push_str(&u.to_string());
        for i in items_of(u) {
            out.push(' ');
            out.push_str(&i.to_string());
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Writes `train.txt`, `test.txt` and `dataset.meta` into `dir`.
pub fn write_dataset(bundle: &DatasetBundle, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let n = bundle.num_users();
    let train_path = dir.join(TRAIN_FILE);
    let test_path = dir.join(TEST_FILE);
    let meta_path = dir.join(META_FILE);
    write_user_lines(&train_path, n, |u| bundle.train.user_items(u).collect())?;
    write_user_lines(&test_path, n, |u| bundle.truth.test_items(u).to_vec())?;
    let meta = format!(
        "name = {}\nnum_users = {}\nnum_items = {}\nprovenance = {}\n",
        bundle.name,
        n,
        bundle.num_items(),
        bundle.provenance
    );
    fs::write(&meta_path, meta).map_err(|e| Error::io(&meta_path, e))?;
    Ok(vec![train_path, test_path, meta_path])
}

/// Parameters of the synthetic block-preference generator.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SyntheticSpec {
    pub num_users: usize,
    pub num_items: usize,
    pub interactions: usize,
    pub num_blocks: usize,
    /// Probability that an interaction falls outside the user's block.
    pub noise_frac: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_users: 500,
            num_items: 800,
            interactions: 20_000,
            num_blocks: 5,
            noise_frac: 0.1,
            seed: 2022,
        }
    }
}

impl SyntheticSpec {
    /// Small preset used by the learning-sanity checks.
    pub fn tiny() -> Self {
        Self {
            num_users: 100,
            num_items: 400,
            interactions: 2_000,
            num_blocks: 8,
            noise_frac: 0.1,
            seed: 7,
        }
    }

    /// Block of a user or item among `count` nodes.
    pub fn block_of(&self, index: usize, count: usize) -> usize {
        index * self.num_blocks / count
    }

    fn block_range(&self, block: usize, count: usize) -> std::ops::Range<usize> {
        // smallest index whose block is `block`
        let start = (block * count).div_ceil(self.num_blocks);
        let end = ((block + 1) * count).div_ceil(self.num_blocks);
        start..end
    }
}

/// Generates a block-preference dataset with a per-user 80/20 train/test split.
///
/// Users and items are split into contiguous blocks. Each interaction is drawn
/// uniformly from the user's own item block with probability `1 − noise_frac`
/// and otherwise uniformly from the items outside it.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<DatasetBundle> {
    let &SyntheticSpec {
        num_users: n,
        num_items: m,
        interactions,
        num_blocks,
        noise_frac,
        seed,
    } = spec;
    let infeasible = |reason: String| {
        Err(Error::InvalidParameter {
            name: "synthetic",
            reason,
        })
    };
    if n == 0 || m == 0 || interactions == 0 {
        return infeasible("users, items and interactions must be positive".into());
    }
    if num_blocks == 0 || num_blocks > n.min(m) {
        return infeasible(format!("{num_blocks} blocks cannot partition {n} users and {m} items"));
    }
    if !(0.0..=1.0).contains(&noise_frac) {
        return infeasible(format!("noise_frac {noise_frac} outside [0, 1]"));
    }
    if num_blocks == 1 && noise_frac > 0.0 {
        return infeasible("noise needs at least two blocks".into());
    }
    let per_user_max = interactions.div_ceil(n);
    let smallest_block = (0..num_blocks).map(|b| spec.block_range(b, m).len()).min().unwrap_or(0);
    let smallest_outside = m - (0..num_blocks).map(|b| spec.block_range(b, m).len()).max().unwrap_or(0);
    if per_user_max > smallest_block || (noise_frac > 0.0 && per_user_max > smallest_outside) {
        return infeasible(format!(
            "{per_user_max} interactions per user do not fit in item blocks of size {smallest_block}"
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train_pairs = Vec::with_capacity(interactions);
    let mut test_pairs = Vec::with_capacity(interactions / 4);
    for u in 0..n {
        let quota = interactions / n + usize::from(u < interactions % n);
        let own = spec.block_range(spec.block_of(u, n), m);
        let mut chosen = HashSet::with_capacity(quota);
        let mut items = Vec::with_capacity(quota);
        let mut own_left = own.len();
        let mut other_left = m - own.len();
        while items.len() < quota {
            let in_block = rng.random::<f64>() >= noise_frac;
            // resample inside the chosen category so duplicates do not bias the mix
            if (in_block && own_left == 0) || (!in_block && other_left == 0) {
                continue;
            }
            let item = loop {
                let candidate = if in_block {
                    rng.random_range(own.clone())
                } else {
                    let k = rng.random_range(0..m - own.len());
                    if k < own.start {
                        k
                    } else {
                        k + own.len()
                    }
                };
                if chosen.insert(candidate) {
                    break candidate;
                }
            };
            if in_block {
                own_left -= 1;
            } else {
                other_left -= 1;
            }
            items.push(item);
        }
        items.shuffle(&mut rng);
        let test_count = items.len() / 5;
        let (test, train) = items.split_at(test_count);
        train_pairs.extend(train.iter().map(|&i| (u, i)));
        test_pairs.extend(test.iter().map(|&i| (u, i)));
    }
    DatasetBundle::assemble(
        format!("synthetic-{n}x{m}"),
        format!(
            "synthetic users={n} items={m} interactions={interactions} blocks={num_blocks} noise_frac={noise_frac} seed={seed}"
        ),
        &train_pairs,
        &test_pairs,
        n,
        m,
    )
}
