//! Snapshot dataset construction and on-disk layout.
//!
//! Layout of a dataset directory:
//!
//! ```text
//! entities.txt relations.txt        one name per line, in id order
//! stats.json                        per-snapshot cumulative counts
//! snapshot_<i>/{train,valid,test}.txt   head<TAB>relation<TAB>tail
//! ```

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::{GrowingKg, Snapshot, SnapshotStats, Triple, Vocabulary};

pub const SPLIT_NAMES: [&str; 3] = ["train", "valid", "test"];
pub const STATS_FILE: &str = "stats.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub num_snapshots: usize,
    pub initial_fraction: f64,
    pub increment_fraction: f64,
    /// train : valid : test
    pub split_ratio: [u32; 3],
    pub seed: u64,
    /// Upper bound on reshuffles spent looking for a connected first snapshot.
    pub max_reshuffles: usize,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            num_snapshots: 5,
            initial_fraction: 0.6,
            increment_fraction: 0.1,
            split_ratio: [3, 1, 1],
            seed: 0,
            max_reshuffles: 16,
        }
    }
}

impl DatasetSpec {
    /// Settings with the increment chosen so fractions sum to one.
    pub fn with_initial(num_snapshots: usize, initial_fraction: f64, seed: u64) -> Self {
        let increment_fraction = if num_snapshots > 1 {
            (1.0 - initial_fraction) / (num_snapshots - 1) as f64
        } else {
            0.0
        };
        Self {
            num_snapshots,
            initial_fraction,
            increment_fraction,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_snapshots == 0 {
            return Err(Error::InvalidConfig("at least one snapshot is required".into()));
        }
        let total =
            self.initial_fraction + (self.num_snapshots - 1) as f64 * self.increment_fraction;
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::FractionMismatch(total));
        }
        if self.split_ratio.contains(&0) {
            return Err(Error::InvalidConfig(format!(
                "split ratio components must be positive: {:?}",
                self.split_ratio
            )));
        }
        Ok(())
    }
}

/// Number of triples per snapshot: rounded fractions, remainder to the last.
pub fn snapshot_sizes(total: usize, spec: &DatasetSpec) -> Vec<usize> {
    let mut sizes = Vec::with_capacity(spec.num_snapshots);
    let mut assigned = 0usize;
    for i in 0..spec.num_snapshots {
        let size = if i + 1 == spec.num_snapshots {
            total.saturating_sub(assigned)
        } else {
            let fraction = if i == 0 {
                spec.initial_fraction
            } else {
                spec.increment_fraction
            };
            ((fraction * total as f64).round() as usize).min(total - assigned)
        };
        assigned += size;
        sizes.push(size);
    }
    sizes
}

/// Largest-remainder apportionment of `m` items by `ratio`; every part is
/// within one of its exact share.
pub fn split_sizes(m: usize, ratio: [u32; 3]) -> [usize; 3] {
    let denom: u64 = ratio.iter().map(|&p| u64::from(p)).sum();
    let mut sizes = [0usize; 3];
    let mut rems = [(0u64, 0usize); 3];
    for (k, &p) in ratio.iter().enumerate() {
        let num = m as u64 * u64::from(p);
        sizes[k] = (num / denom) as usize;
        rems[k] = (num % denom, k);
    }
    let mut left = m - sizes.iter().sum::<usize>();
    // Larger remainder first; earlier part wins ties.
    rems.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(_, k) in &rems {
        if left == 0 {
            break;
        }
        sizes[k] += 1;
        left -= 1;
    }
    sizes
}

/// Triples of one generated snapshot, still labelled with input ids.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SplitSnapshot {
    pub train: Vec<Triple>,
    pub valid: Vec<Triple>,
    pub test: Vec<Triple>,
}

impl SplitSnapshot {
    pub fn len(&self) -> usize {
        self.train.len() + self.valid.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn triples(&self) -> impl Iterator<Item = &Triple> {
        self.train.iter().chain(&self.valid).chain(&self.test)
    }
}

#[derive(Debug, Clone)]
pub struct GrowingDataset {
    pub snapshots: Vec<SplitSnapshot>,
    /// Weakly connected components among the first snapshot's triples.
    pub initial_components: usize,
    pub warnings: Vec<String>,
}

fn components(triples: &[Triple]) -> usize {
    let mut ids: Vec<usize> = triples.iter().flat_map(|t| [t.head, t.tail]).collect();
    ids.sort_unstable();
    ids.dedup();
    let pos = |x: usize| ids.binary_search(&x).expect("id collected above");
    let mut parent: Vec<usize> = (0..ids.len()).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    let mut count = ids.len();
    for t in triples {
        let (a, b) = (find(&mut parent, pos(t.head)), find(&mut parent, pos(t.tail)));
        if a != b {
            parent[a] = b;
            count -= 1;
        }
    }
    count
}

/// Splits `triples` into a growing sequence of snapshots.
///
/// Snapshot assignment is a seeded uniform shuffle; up to `max_reshuffles`
/// shuffles are tried and the one whose first snapshot has the fewest
/// connected components is kept. Each snapshot is then split by
/// `split_ratio`, swapping triples so that every entity and relation has at
/// least one training triple in its own or an earlier snapshot.
pub fn build_growing_dataset(triples: &[Triple], spec: &DatasetSpec) -> Result<GrowingDataset> {
    spec.validate()?;
    let mut seen = HashSet::with_capacity(triples.len());
    let mut pool: Vec<Triple> = triples.iter().copied().filter(|t| seen.insert(*t)).collect();
    if pool.is_empty() {
        return Err(Error::TooFewTriples("input has no triples".into()));
    }
    let sizes = snapshot_sizes(pool.len(), spec);
    for (i, &size) in sizes.iter().enumerate() {
        let parts = split_sizes(size, spec.split_ratio);
        if let Some(k) = parts.iter().position(|&p| p == 0) {
            return Err(Error::TooFewTriples(format!(
                "snapshot {i} has {size} triples; its {} split would be empty",
                SPLIT_NAMES[k]
            )));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut warnings = Vec::new();
    let mut best: Option<(usize, Vec<Triple>)> = None;
    for _ in 0..spec.max_reshuffles.max(1) {
        pool.shuffle(&mut rng);
        let c = components(&pool[..sizes[0]]);
        if best.as_ref().is_none_or(|(b, _)| c < *b) {
            best = Some((c, pool.clone()));
        }
        if c == 1 {
            break;
        }
    }
    let (initial_components, pool) = best.expect("at least one shuffle");
    if initial_components > 1 {
        warnings.push(format!(
            "first snapshot has {initial_components} connected components after {} reshuffles",
            spec.max_reshuffles.max(1)
        ));
    }

    let mut snapshots = Vec::with_capacity(sizes.len());
    let mut supported_e = HashSet::new();
    let mut supported_r = HashSet::new();
    let mut start = 0;
    for (i, &size) in sizes.iter().enumerate() {
        let mut chunk = pool[start..start + size].to_vec();
        start += size;
        chunk.shuffle(&mut rng);
        let [n_train, n_valid, _] = split_sizes(size, spec.split_ratio);
        let test = chunk.split_off(n_train + n_valid);
        let valid = chunk.split_off(n_train);
        let mut snap = SplitSnapshot {
            train: chunk,
            valid,
            test,
        };
        ensure_train_support(&mut snap, &supported_e, &supported_r, i, &mut warnings);
        for t in &snap.train {
            supported_e.insert(t.head);
            supported_e.insert(t.tail);
            supported_r.insert(t.relation);
        }
        snapshots.push(snap);
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok(GrowingDataset {
        snapshots,
        initial_components,
        warnings,
    })
}

pub(crate) fn ensure_train_support(
    snap: &mut SplitSnapshot,
    earlier_e: &HashSet<usize>,
    earlier_r: &HashSet<usize>,
    index: usize,
    warnings: &mut Vec<String>,
) {
    use std::collections::HashMap;
    let mut ent: HashMap<usize, usize> = HashMap::new();
    let mut rel: HashMap<usize, usize> = HashMap::new();
    let support = |ent: &HashMap<usize, usize>, e: usize| {
        ent.get(&e).copied().unwrap_or(0) + usize::from(earlier_e.contains(&e))
    };
    let rsupport = |rel: &HashMap<usize, usize>, r: usize| {
        rel.get(&r).copied().unwrap_or(0) + usize::from(earlier_r.contains(&r))
    };
    let add = |ent: &mut HashMap<usize, usize>, rel: &mut HashMap<usize, usize>, t: &Triple, d: isize| {
        let bump = |m: &mut HashMap<usize, usize>, k: usize| {
            let v = m.entry(k).or_insert(0);
            *v = (*v as isize + d) as usize;
        };
        bump(ent, t.head);
        if t.tail != t.head {
            bump(ent, t.tail);
        }
        bump(rel, t.relation);
    };
    for t in &snap.train {
        add(&mut ent, &mut rel, t, 1);
    }

    for part in 0..2 {
        let mut k = 0;
        loop {
            let held = if part == 0 { &snap.valid } else { &snap.test };
            if k >= held.len() {
                break;
            }
            let t = held[k];
            let orphan = support(&ent, t.head) == 0
                || support(&ent, t.tail) == 0
                || rsupport(&rel, t.relation) == 0;
            if !orphan {
                k += 1;
                continue;
            }
            // A donor keeps every one of its ids supported after leaving train.
            let donor = snap.train.iter().rposition(|c| {
                support(&ent, c.head) >= 2
                    && support(&ent, c.tail) >= 2
                    && rsupport(&rel, c.relation) >= 2
            });
            let held = if part == 0 { &mut snap.valid } else { &mut snap.test };
            match donor {
                Some(j) => {
                    let out = snap.train[j];
                    add(&mut ent, &mut rel, &out, -1);
                    snap.train[j] = t;
                    add(&mut ent, &mut rel, &t, 1);
                    held[k] = out;
                    k += 1;
                }
                None => {
                    held.remove(k);
                    snap.train.push(t);
                    add(&mut ent, &mut rel, &t, 1);
                    warnings.push(format!(
                        "snapshot {index}: moved a {} triple to train without a swap",
                        SPLIT_NAMES[part + 1]
                    ));
                }
            }
        }
    }
}

impl GrowingDataset {
    /// Relabels ids densely in first-appearance order (snapshot by snapshot,
    /// train then valid then test) and attaches names.
    pub fn into_kg(self, entity_names: &Vocabulary, relation_names: &Vocabulary) -> Result<GrowingKg> {
        let mut entities = Vocabulary::new();
        let mut relations = Vocabulary::new();
        let name = |v: &Vocabulary, id: usize| v.name(id).map_or_else(|| id.to_string(), str::to_owned);
        let mut out = Vec::with_capacity(self.snapshots.len());
        for (i, snap) in self.snapshots.into_iter().enumerate() {
            let mut relabel = |ts: Vec<Triple>| -> Vec<Triple> {
                ts.into_iter()
                    .map(|t| {
                        let h = entities.intern(&name(entity_names, t.head));
                        let r = relations.intern(&name(relation_names, t.relation));
                        let tl = entities.intern(&name(entity_names, t.tail));
                        Triple::new(h, r, tl)
                    })
                    .collect()
            };
            let train = relabel(snap.train);
            let valid = relabel(snap.valid);
            let test = relabel(snap.test);
            out.push(Snapshot::new(
                i,
                train,
                valid,
                test,
                entities.len(),
                relations.len(),
            )?);
        }
        GrowingKg::new(out, entities, relations)
    }
}

/// Reads `head<TAB>relation<TAB>tail` lines, interning names in order of
/// appearance.
pub fn read_triples_file(path: &Path) -> Result<(Vec<Triple>, Vocabulary, Vocabulary)> {
    let mut entities = Vocabulary::new();
    let mut relations = Vocabulary::new();
    let triples = parse_triples(path, &mut entities, &mut relations)?;
    Ok((triples, entities, relations))
}

fn parse_triples(
    path: &Path,
    entities: &mut Vocabulary,
    relations: &mut Vocabulary,
) -> Result<Vec<Triple>> {
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut triples = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 || fields.iter().any(|f| f.is_empty()) {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: n + 1,
                message: format!("expected 3 tab-separated fields, found {}", fields.len()),
            });
        }
        let h = entities.intern(fields[0]);
        let r = relations.intern(fields[1]);
        let t = entities.intern(fields[2]);
        triples.push(Triple::new(h, r, t));
    }
    Ok(triples)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatsManifest {
    pub snapshots: Vec<SnapshotStats>,
}

pub fn snapshot_dir(root: &Path, i: usize) -> PathBuf {
    root.join(format!("snapshot_{i}"))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Writes the dataset layout plus `stats.json`. Output is a pure function of
/// the KG, so identical inputs give byte-identical files.
pub fn write_dataset(kg: &GrowingKg, root: &Path) -> Result<()> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let label = |v: &Vocabulary, id: usize| v.name(id).map_or_else(|| id.to_string(), str::to_owned);
    let last = kg.snapshots().last();
    let n_e = last.map_or(0, |s| s.entity_count);
    let n_r = last.map_or(0, |s| s.relation_count);
    let listing = |v: &Vocabulary, n: usize| {
        (0..n).fold(String::new(), |mut s, id| {
            s.push_str(&label(v, id));
            s.push('\n');
            s
        })
    };
    write_file(&root.join("entities.txt"), &listing(&kg.entities, n_e))?;
    write_file(&root.join("relations.txt"), &listing(&kg.relations, n_r))?;
    for s in kg.snapshots() {
        let dir = snapshot_dir(root, s.index);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for (name, split) in SPLIT_NAMES.iter().zip([&s.train, &s.valid, &s.test]) {
            let mut text = String::new();
            for t in split {
                let _ = writeln!(
                    text,
                    "{}\t{}\t{}",
                    label(&kg.entities, t.head),
                    label(&kg.relations, t.relation),
                    label(&kg.entities, t.tail)
                );
            }
            write_file(&dir.join(format!("{name}.txt")), &text)?;
        }
    }
    let manifest = StatsManifest {
        snapshots: kg.stats(),
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    write_file(&root.join(STATS_FILE), &(json + "\n"))
}

fn read_listing(path: &Path) -> Result<Option<HashSet<String>>> {
    if !path.is_file() {
        return Ok(None);
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(Some(
        text.lines()
            .map(|l| l.trim_end_matches('\r'))
            .filter(|l| !l.is_empty())
            .map(str::to_owned)
            .collect(),
    ))
}

/// Loads a dataset directory. Ids are assigned in first-appearance order;
/// `entities.txt` / `relations.txt`, when present, must list every name
/// used, and `stats.json`, when present, must match the loaded counts.
pub fn load_snapshots(root: &Path) -> Result<GrowingKg> {
    let mut entities = Vocabulary::new();
    let mut relations = Vocabulary::new();
    let mut snapshots = Vec::new();
    let mut i = 0;
    while snapshot_dir(root, i).is_dir() {
        let dir = snapshot_dir(root, i);
        let mut splits = Vec::with_capacity(3);
        for name in SPLIT_NAMES {
            splits.push(parse_triples(
                &dir.join(format!("{name}.txt")),
                &mut entities,
                &mut relations,
            )?);
        }
        let test = splits.pop().unwrap_or_default();
        let valid = splits.pop().unwrap_or_default();
        let train = splits.pop().unwrap_or_default();
        snapshots.push(Snapshot::new(
            i,
            train,
            valid,
            test,
            entities.len(),
            relations.len(),
        )?);
        i += 1;
    }
    if snapshots.is_empty() {
        return Err(Error::MissingFile(snapshot_dir(root, 0)));
    }
    for (file, vocab, kind) in [
        ("entities.txt", &entities, "entity"),
        ("relations.txt", &relations, "relation"),
    ] {
        if let Some(listed) = read_listing(&root.join(file))? {
            if let Some(missing) = vocab.names().iter().find(|n| !listed.contains(*n)) {
                return Err(Error::Vocabulary(format!(
                    "{kind} {missing:?} is used by a snapshot but not listed in {file}"
                )));
            }
        }
    }
    let kg = GrowingKg::new(snapshots, entities, relations)?;
    let stats_path = root.join(STATS_FILE);
    if stats_path.is_file() {
        let text = fs::read_to_string(&stats_path).map_err(|e| Error::io(&stats_path, e))?;
        let manifest: StatsManifest = serde_json::from_str(&text)?;
        validate_stats(&kg, &manifest)?;
    }
    Ok(kg)
}

pub fn validate_stats(kg: &GrowingKg, manifest: &StatsManifest) -> Result<()> {
    let actual = kg.stats();
    if actual.len() != manifest.snapshots.len() {
        return Err(Error::StatsMismatch(format!(
            "{} snapshots on disk, {} in manifest",
            actual.len(),
            manifest.snapshots.len()
        )));
    }
    for (a, m) in actual.iter().zip(&manifest.snapshots) {
        if a != m {
            return Err(Error::StatsMismatch(format!(
                "snapshot {}: loaded {a:?}, manifest {m:?}",
                a.index
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_sizes_for_100() {
        assert_eq!(
            snapshot_sizes(100, &DatasetSpec::default()),
            vec![60, 10, 10, 10, 10]
        );
    }

    #[test]
    fn freebase_scale_sizes() {
        // 186,070 + 3 × 31,012 + 31,010 triples.
        let total = 186_070 + 3 * 31_012 + 31_010;
        assert_eq!(
            snapshot_sizes(total, &DatasetSpec::default()),
            vec![186_070, 31_012, 31_012, 31_012, 31_010]
        );
    }

    #[test]
    fn three_one_one_split() {
        assert_eq!(split_sizes(60, [3, 1, 1]), [36, 12, 12]);
        // shares 2.4, 0.8, 0.8
        assert_eq!(split_sizes(4, [3, 1, 1]), [2, 1, 1]);
        for m in 0..200 {
            let s = split_sizes(m, [3, 1, 1]);
            assert_eq!(s.iter().sum::<usize>(), m);
            for (k, p) in [3.0, 1.0, 1.0].iter().enumerate() {
                assert!((s[k] as f64 - m as f64 * p / 5.0).abs() < 1.0);
            }
        }
    }

    #[test]
    fn fraction_mismatch() {
        let spec = DatasetSpec {
            increment_fraction: 0.2,
            ..DatasetSpec::default()
        };
        assert!(matches!(spec.validate(), Err(Error::FractionMismatch(_))));
        let spec = DatasetSpec {
            split_ratio: [3, 0, 1],
            ..DatasetSpec::default()
        };
        assert!(matches!(spec.validate(), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn too_few_triples() {
        let triples: Vec<Triple> = (0..12).map(|k| Triple::new(k, 0, k + 1)).collect();
        let err = build_growing_dataset(&triples, &DatasetSpec::default()).unwrap_err();
        assert!(matches!(err, Error::TooFewTriples(_)));
        assert!(matches!(
            build_growing_dataset(&[], &DatasetSpec::default()),
            Err(Error::TooFewTriples(_))
        ));
    }

    #[test]
    fn components_counts() {
        let ts = [Triple::new(0, 0, 1), Triple::new(2, 0, 3), Triple::new(1, 0, 4)];
        assert_eq!(components(&ts), 2);
    }
}
