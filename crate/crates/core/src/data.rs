//! Synthetic paired image/text data with planted class structure.
//!
//! Each class owns a set of patch locations and a unit direction in patch
//! space; an image is Gaussian noise plus `motif_strength` times that
//! direction at the class's locations. Each caption is the class's token
//! block plus filler tokens, shuffled. Several pairs per class make
//! same-label non-matching pairs common within a batch.
//!
//! Token ids `0..TEMPLATE_VOCAB` are reserved for prompt templates, then come
//! the class blocks, then fillers.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Number of token ids reserved for prompt templates.
pub const TEMPLATE_VOCAB: usize = 8;

/// Keywords used to keep histopathology captions.
pub const DEFAULT_KEYWORDS: [&str; 6] = ["h&e", "hematoxylin", "eosin", "histopathology", "biopsy", "microscopic"];

const DATASET_MAGIC: &str = "# acelora-dataset v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub pairs_per_class: usize,
    pub side: usize,
    pub patch_dim: usize,
    pub motif_strength: f64,
    pub motif_patches_per_class: usize,
    pub noise_std: f64,
    pub vocab_size: usize,
    pub tokens_per_class: usize,
    pub text_len: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_classes: 4,
            pairs_per_class: 64,
            side: 4,
            patch_dim: 8,
            motif_strength: 5.0,
            motif_patches_per_class: 6,
            noise_std: 1.0,
            vocab_size: 64,
            tokens_per_class: 3,
            text_len: 8,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.num_classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.num_classes));
        }
        if self.pairs_per_class < 2 {
            return bad(format!("need at least 2 pairs per class, got {}", self.pairs_per_class));
        }
        if self.side == 0 || self.patch_dim == 0 {
            return bad("grid side and patch_dim must be positive".into());
        }
        if self.motif_patches_per_class > self.side * self.side {
            return bad(format!(
                "{} motif patches do not fit a {}x{} grid",
                self.motif_patches_per_class, self.side, self.side
            ));
        }
        if self.tokens_per_class > self.text_len {
            return bad(format!(
                "tokens_per_class {} exceeds text_len {}",
                self.tokens_per_class, self.text_len
            ));
        }
        if self.tokens_per_class == 0 {
            return bad("tokens_per_class must be positive".into());
        }
        let fillers_needed = self.text_len > self.tokens_per_class;
        if self.filler_start() + usize::from(fillers_needed) > self.vocab_size {
            return bad(format!(
                "vocab_size {} too small for {} classes of {} tokens",
                self.vocab_size, self.num_classes, self.tokens_per_class
            ));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite() && self.motif_strength.is_finite()) {
            return bad("noise_std must be finite and non-negative".into());
        }
        Ok(())
    }

    /// Token ids of class `c`.
    pub fn class_tokens(&self, c: usize) -> Vec<usize> {
        let start = TEMPLATE_VOCAB + c * self.tokens_per_class;
        (start..start + self.tokens_per_class).collect()
    }

    pub fn filler_start(&self) -> usize {
        TEMPLATE_VOCAB + self.num_classes * self.tokens_per_class
    }

    pub fn num_patches(&self) -> usize {
        self.side * self.side
    }

    /// First 8 bytes of the SHA-256 of the canonical JSON, as hex.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("serializable");
        hex8(&Sha256::digest(json.as_bytes()))
    }
}

pub(crate) fn hex8(digest: &[u8]) -> String {
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairedSample {
    /// `side × side × patch_dim`
    pub image: Tensor,
    pub tokens: Vec<usize>,
    pub label: usize,
}

/// Per-class planted structure.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassMotif {
    /// Row-major patch indices, sorted.
    pub locations: Vec<usize>,
    /// Unit vector in patch space.
    pub direction: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: SynthConfig,
    pub samples: Vec<PairedSample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.config.num_classes];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    /// The planted motifs for this dataset's config.
    pub fn motifs(&self) -> Vec<ClassMotif> {
        motifs(&self.config)
    }
}

/// Deterministic per-class motifs, drawn from stream 0 of the seed.
pub fn motifs(cfg: &SynthConfig) -> Vec<ClassMotif> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let all: Vec<usize> = (0..cfg.num_patches()).collect();
    (0..cfg.num_classes)
        .map(|_| {
            let mut locations: Vec<usize> = all
                .choose_multiple(&mut rng, cfg.motif_patches_per_class)
                .copied()
                .collect();
            locations.sort_unstable();
            let mut direction: Vec<f64> = (0..cfg.patch_dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = direction.iter().map(|x| x * x).sum::<f64>().sqrt();
            direction.iter_mut().for_each(|x| *x /= norm);
            ClassMotif { locations, direction }
        })
        .collect()
}

/// Generates `num_classes · pairs_per_class` samples with labels cycling
/// through the classes. Sample `i` draws from its own stream `i + 1`.
pub fn generate(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let motifs = motifs(cfg);
    let noise = Normal::new(0.0, cfg.noise_std).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let filler_range = cfg.filler_start()..cfg.vocab_size;
    let total = cfg.num_classes * cfg.pairs_per_class;
    let samples = (0..total)
        .map(|i| {
            let label = i % cfg.num_classes;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(i as u64 + 1);
            let motif = &motifs[label];
            let mut data: Vec<f64> = (0..cfg.num_patches() * cfg.patch_dim).map(|_| noise.sample(&mut rng)).collect();
            for &loc in &motif.locations {
                let patch = &mut data[loc * cfg.patch_dim..(loc + 1) * cfg.patch_dim];
                for (x, d) in patch.iter_mut().zip(&motif.direction) {
                    *x += cfg.motif_strength * d;
                }
            }
            let mut tokens = cfg.class_tokens(label);
            while tokens.len() < cfg.text_len {
                tokens.push(rng.random_range(filler_range.clone()));
            }
            tokens.shuffle(&mut rng);
            let image = Tensor::new(vec![cfg.side, cfg.side, cfg.patch_dim], data).expect("grid shape");
            PairedSample { image, tokens, label }
        })
        .collect();
    Ok(Dataset {
        config: cfg.clone(),
        samples,
    })
}

// ---------------------------------------------------------------------------
// Split

/// Stratified split into train/val/test.
///
/// Split sizes are the largest-remainder rounding of the global fractions.
/// Per class, each split receives the floor or ceiling of its share, chosen
/// by a small max-flow so the global sizes are met exactly. Within a class
/// the assignment order is a seeded shuffle; each output keeps dataset order.
pub fn split(dataset: &Dataset, fractions: (f64, f64, f64), seed: u64) -> Result<(Dataset, Dataset, Dataset)> {
    let p = [fractions.0, fractions.1, fractions.2];
    if p.iter().any(|&f| !(0.0..=1.0).contains(&f)) || (p.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidConfig(format!("split fractions {p:?} must be in [0,1] and sum to 1")));
    }
    let active = p.iter().filter(|&&f| f > 0.0).count();
    let classes = dataset.config.num_classes;
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, s) in dataset.samples.iter().enumerate() {
        members[s.label].push(i);
    }
    for (c, m) in members.iter().enumerate() {
        if !m.is_empty() && m.len() < active {
            return Err(Error::InvalidConfig(format!(
                "class {c} has {} samples, fewer than the {active} non-empty splits",
                m.len()
            )));
        }
    }
    let sizes: Vec<usize> = members.iter().map(Vec::len).collect();
    let counts = stratified_counts(&sizes, p)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignment = vec![0usize; dataset.len()];
    for (c, m) in members.iter_mut().enumerate() {
        m.shuffle(&mut rng);
        let mut it = m.iter();
        for (s, &n) in counts[c].iter().enumerate() {
            for &idx in it.by_ref().take(n) {
                assignment[idx] = s;
            }
        }
    }
    let pick = |s: usize| Dataset {
        config: dataset.config.clone(),
        samples: dataset
            .samples
            .iter()
            .zip(&assignment)
            .filter(|(_, &a)| a == s)
            .map(|(x, _)| x.clone())
            .collect(),
    };
    Ok((pick(0), pick(1), pick(2)))
}

/// Largest-remainder integer sizes for `total · p`.
fn apportion(total: usize, p: [f64; 3]) -> [usize; 3] {
    let exact: Vec<f64> = p.iter().map(|f| f * total as f64).collect();
    let mut out = [0usize; 3];
    for s in 0..3 {
        out[s] = exact[s].floor() as usize;
    }
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let (fa, fb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        fb.partial_cmp(&fa).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    let mut left = total - out.iter().sum::<usize>();
    for s in order {
        if left == 0 {
            break;
        }
        if p[s] > 0.0 {
            out[s] += 1;
            left -= 1;
        }
    }
    out
}

/// Per-class per-split counts: each entry is the floor or ceiling of
/// `n_c · p_s`, rows sum to `n_c`, columns sum to a rounding of `N · p_s`.
fn stratified_counts(sizes: &[usize], p: [f64; 3]) -> Result<Vec<[usize; 3]>> {
    let total: usize = sizes.iter().sum();
    let preferred = apportion(total, p);
    let mut candidates = vec![preferred];
    for mask in 0u8..8 {
        let cand: [usize; 3] = std::array::from_fn(|s| {
            let x = p[s] * total as f64;
            if mask >> s & 1 == 1 { x.ceil() as usize } else { x.floor() as usize }
        });
        if cand.iter().sum::<usize>() == total && cand != preferred {
            candidates.push(cand);
        }
    }
    for targets in candidates {
        if let Some(counts) = round_with_targets(sizes, p, targets) {
            return Ok(counts);
        }
    }
    Err(Error::InvalidConfig(format!("no stratified rounding exists for class sizes {sizes:?}")))
}

fn round_with_targets(sizes: &[usize], p: [f64; 3], targets: [usize; 3]) -> Option<Vec<[usize; 3]>> {
    let classes = sizes.len();
    let mut counts: Vec<[usize; 3]> = sizes
        .iter()
        .map(|&n| std::array::from_fn(|s| (p[s] * n as f64).floor() as usize))
        .collect();
    // Node layout: source, classes, splits, sink.
    let (src, sink) = (0, classes + 4);
    let nodes = classes + 5;
    let mut cap = vec![vec![0i64; nodes]; nodes];
    for (c, &n) in sizes.iter().enumerate() {
        let assigned: usize = counts[c].iter().sum();
        cap[src][1 + c] = (n - assigned) as i64;
        for s in 0..3 {
            let x = p[s] * n as f64;
            if x.ceil() as usize > counts[c][s] {
                cap[1 + c][1 + classes + s] = 1;
            }
        }
    }
    for s in 0..3 {
        let assigned: usize = counts.iter().map(|r| r[s]).sum();
        if assigned > targets[s] {
            return None;
        }
        cap[1 + classes + s][sink] = (targets[s] - assigned) as i64;
    }
    let need: i64 = cap[src].iter().sum();
    let flow = max_flow(&mut cap, src, sink);
    if flow != need || (0..3).any(|s| cap[1 + classes + s][sink] != 0) {
        return None;
    }
    for (c, row) in counts.iter_mut().enumerate() {
        for (s, x) in row.iter_mut().enumerate() {
            // Residual reverse capacity records the flow on the edge.
            *x += cap[1 + classes + s][1 + c] as usize;
        }
    }
    Some(counts)
}

/// Ford–Fulkerson with DFS on a residual capacity matrix (modified in place).
fn max_flow(cap: &mut [Vec<i64>], src: usize, sink: usize) -> i64 {
    fn dfs(cap: &mut [Vec<i64>], u: usize, sink: usize, seen: &mut [bool]) -> bool {
        if u == sink {
            return true;
        }
        seen[u] = true;
        for v in 0..cap.len() {
            if !seen[v] && cap[u][v] > 0 && dfs(cap, v, sink, seen) {
                cap[u][v] -= 1;
                cap[v][u] += 1;
                return true;
            }
        }
        false
    }
    let mut flow = 0;
    loop {
        let mut seen = vec![false; cap.len()];
        if !dfs(cap, src, sink, &mut seen) {
            return flow;
        }
        flow += 1;
    }
}

// ---------------------------------------------------------------------------
// Caption filter

/// Keeps records whose caption contains at least one keyword
/// (case-insensitive substring), in input order.
pub fn filter_captions<T: Clone>(records: &[(String, T)], keywords: &[&str]) -> Vec<(String, T)> {
    let keys: Vec<String> = keywords.iter().map(|k| k.to_lowercase()).collect();
    records
        .iter()
        .filter(|(caption, _)| {
            let lower = caption.to_lowercase();
            keys.iter().any(|k| lower.contains(k.as_str()))
        })
        .cloned()
        .collect()
}

// ---------------------------------------------------------------------------
// File format

/// Writes the dataset as text: a header line with the config hash and
/// dimensions, a config line, then one `label<TAB>values<TAB>ids` record per
/// sample. Values use the shortest round-trip decimal form.
pub fn write_dataset(path: &Path, dataset: &Dataset) -> Result<()> {
    let io = |e| Error::io(path, e);
    let file = fs::File::create(path).map_err(io)?;
    let mut w = BufWriter::new(file);
    write_dataset_to(&mut w, dataset).map_err(io)?;
    w.flush().map_err(io)
}

pub fn write_dataset_to(w: &mut impl Write, dataset: &Dataset) -> std::io::Result<()> {
    let cfg = &dataset.config;
    writeln!(
        w,
        "{DATASET_MAGIC} hash={} side={} patch_dim={} records={}",
        cfg.hash(),
        cfg.side,
        cfg.patch_dim,
        dataset.len()
    )?;
    writeln!(w, "# config {}", serde_json::to_string(cfg).expect("serializable"))?;
    for s in &dataset.samples {
        let values: Vec<String> = s.image.data().iter().map(|v| format!("{v:?}")).collect();
        let ids: Vec<String> = s.tokens.iter().map(usize::to_string).collect();
        writeln!(w, "{}\t{}\t{}", s.label, values.join(" "), ids.join(" "))?;
    }
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines().enumerate();
    let mut next = |what: &str| -> Result<(usize, String)> {
        match lines.next() {
            Some((i, Ok(l))) => Ok((i + 1, l)),
            Some((_, Err(e))) => Err(Error::io(path, e)),
            None => Err(Error::DatasetFormat {
                line: 0,
                reason: format!("missing {what}"),
            }),
        }
    };
    let (_, header) = next("header")?;
    let fmt = |line: usize, reason: String| Error::DatasetFormat { line, reason };
    if !header.starts_with(DATASET_MAGIC) {
        return Err(fmt(1, "not an acelora dataset".into()));
    }
    let field = |key: &str| -> Result<String> {
        header
            .split_whitespace()
            .find_map(|t| t.strip_prefix(&format!("{key}=")).map(str::to_string))
            .ok_or_else(|| fmt(1, format!("header lacks `{key}`")))
    };
    let (_, cfg_line) = next("config line")?;
    let json = cfg_line
        .strip_prefix("# config ")
        .ok_or_else(|| fmt(2, "expected `# config` line".into()))?;
    let config: SynthConfig = serde_json::from_str(json).map_err(|e| fmt(2, e.to_string()))?;
    if field("hash")? != config.hash() {
        return Err(fmt(1, "config hash does not match config line".into()));
    }
    let records: usize = field("records")?.parse().map_err(|_| fmt(1, "bad record count".into()))?;
    let per_image = config.num_patches() * config.patch_dim;
    let mut samples = Vec::with_capacity(records);
    for _ in 0..records {
        let (n, line) = next("record")?;
        let mut parts = line.split('\t');
        let (Some(label), Some(values), Some(ids), None) = (parts.next(), parts.next(), parts.next(), parts.next()) else {
            return Err(fmt(n, "expected three tab-separated fields".into()));
        };
        let label: usize = label.parse().map_err(|_| fmt(n, format!("bad label `{label}`")))?;
        if label >= config.num_classes {
            return Err(fmt(n, format!("label {label} out of range")));
        }
        let data: Vec<f64> = values
            .split(' ')
            .map(|v| v.parse::<f64>().map_err(|_| fmt(n, format!("bad value `{v}`"))))
            .collect::<Result<_>>()?;
        if data.len() != per_image {
            return Err(fmt(n, format!("expected {per_image} values, found {}", data.len())));
        }
        let tokens: Vec<usize> = ids
            .split(' ')
            .filter(|t| !t.is_empty())
            .map(|t| t.parse::<usize>().map_err(|_| fmt(n, format!("bad token `{t}`"))))
            .collect::<Result<_>>()?;
        if let Some(&bad) = tokens.iter().find(|&&t| t >= config.vocab_size) {
            return Err(fmt(n, format!("token {bad} outside vocabulary")));
        }
        let image = Tensor::new(vec![config.side, config.side, config.patch_dim], data)?;
        samples.push(PairedSample { image, tokens, label });
    }
    if let Ok((n, extra)) = next("end") {
        if !extra.trim().is_empty() {
            return Err(fmt(n, "trailing data after the declared records".into()));
        }
    }
    Ok(Dataset { config, samples })
}

/// Distinct motif location sets across classes, used by sanity checks.
pub fn motif_location_sets(cfg: &SynthConfig) -> BTreeSet<Vec<usize>> {
    motifs(cfg).into_iter().map(|m| m.locations).collect()
}
