//! Parallel, resumable generation of parameter-pair datasets.
//!
//! Layout of a dataset directory:
//!
//! ```text
//! config.json            resolved generation config
//! index.json             shard list, record counts, config digest
//! pairs-00000.ktpr ...   pair shards, seeds ascending, `shard_size` seeds each
//! hosts-00000.ktpr ...   Step-1 host checkpoints for the same seeds
//! tmp/                   per-seed records awaiting finalization
//! ```

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::format::{
    decode_host, decode_pair, encode_host, encode_pair, host_record_len, pair_record_len,
    read_container, write_container, Header, HostCheckpoint, ParamPair, HEADER_LEN, HOST_TAG,
};
use crate::error::{ensure, KtError, Result};
use crate::host::train::{train_full, train_target_frozen, HostTrainConfig};
use crate::host::{DigitData, HostModel, HostSpec, TargetVariant};

/// Half-open seed interval, written `start..end`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct SeedRange {
    pub start: u64,
    pub end: u64,
}

impl SeedRange {
    pub fn new(start: u64, end: u64) -> Result<Self> {
        ensure!(start < end, KtError::Config(format!("empty seed range {start}..{end}")));
        Ok(Self { start, end })
    }

    pub fn len(&self) -> usize {
        (self.end - self.start) as usize
    }

    pub fn is_empty(&self) -> bool {
        self.start >= self.end
    }

    pub fn iter(&self) -> std::ops::Range<u64> {
        self.start..self.end
    }
}

impl fmt::Display for SeedRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}..{}", self.start, self.end)
    }
}

impl FromStr for SeedRange {
    type Err = KtError;

    fn from_str(s: &str) -> Result<Self> {
        let (a, b) = s
            .split_once("..")
            .ok_or_else(|| KtError::Config(format!("seed range `{s}` is not of the form a..b")))?;
        let parse = |x: &str| {
            x.trim()
                .parse::<u64>()
                .map_err(|e| KtError::Config(format!("seed range `{s}`: {e}")))
        };
        Self::new(parse(a)?, parse(b)?)
    }
}

impl TryFrom<String> for SeedRange {
    type Error = KtError;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<SeedRange> for String {
    fn from(r: SeedRange) -> String {
        r.to_string()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub seeds: SeedRange,
    pub channels: usize,
    pub variant: TargetVariant,
    /// Full-host training.
    pub step1: HostTrainConfig,
    /// Target-block training inside the frozen host.
    pub step2: HostTrainConfig,
    pub shard_size: usize,
    /// Worker threads; never affects output bytes.
    pub jobs: usize,
    pub output: PathBuf,
}

impl Default for GenConfig {
    fn default() -> Self {
        let step1 = HostTrainConfig::default();
        Self {
            seeds: SeedRange { start: 0, end: 64 },
            channels: 6,
            variant: TargetVariant::SmallConv,
            step2: HostTrainConfig { epochs: 2, ..step1.clone() },
            step1,
            shard_size: 256,
            jobs: 1,
            output: PathBuf::from("runs/pairs"),
        }
    }
}

impl GenConfig {
    pub fn validate(&self, train_len: usize) -> Result<()> {
        HostSpec::new(self.channels, self.variant)
            .map_err(|e| KtError::Config(e.to_string()))?;
        ensure!(
            self.variant != TargetVariant::LargeConv,
            KtError::Config("variant must be a compressed block".into())
        );
        ensure!(self.jobs >= 1, KtError::Config("jobs must be >= 1".into()));
        ensure!(self.shard_size >= 1, KtError::Config("shard_size must be >= 1".into()));
        ensure!(!self.seeds.is_empty(), KtError::Config("seed range is empty".into()));
        self.step1.validate(train_len)?;
        self.step2.validate(train_len)
    }

    /// SHA-256 of the canonical JSON of every byte-affecting field (not `jobs`, not `output`).
    pub fn digest(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        let obj = v.as_object_mut().expect("object");
        obj.remove("jobs");
        obj.remove("output");
        hex::encode(Sha256::digest(serde_json::to_vec(&v).expect("json")))
    }

    pub fn spec(&self) -> HostSpec {
        HostSpec {
            channels: self.channels,
            variant: TargetVariant::LargeConv,
        }
    }

    fn shards(&self) -> Vec<SeedRange> {
        let mut out = Vec::new();
        let mut s = self.seeds.start;
        while s < self.seeds.end {
            let e = (s + self.shard_size as u64).min(self.seeds.end);
            out.push(SeedRange { start: s, end: e });
            s = e;
        }
        out
    }
}

/// Offset applied to a seed whose training diverged.
pub const RETRY_OFFSET: u64 = 1 << 32;
const MAX_ATTEMPTS: u64 = 4;

/// Runs `f` on `seed`, then on `seed + 2³²`, ... while it reports a numerical failure.
pub fn with_retries<T>(seed: u64, mut f: impl FnMut(u64) -> Result<T>) -> Result<T> {
    let mut last = None;
    for attempt in 0..MAX_ATTEMPTS {
        let eff = seed.wrapping_add(attempt * RETRY_OFFSET);
        match f(eff) {
            Ok(v) => return Ok(v),
            Err(KtError::NonFinite(msg)) => {
                warn!("seed {seed}: training diverged ({msg}); regenerating at seed {}", eff.wrapping_add(RETRY_OFFSET));
                last = Some(msg);
            }
            Err(e) => return Err(e),
        }
    }
    Err(KtError::NonFinite(format!(
        "seed {seed} diverged on {MAX_ATTEMPTS} attempts: {}",
        last.unwrap_or_default()
    )))
}

/// Steps 1 and 2 for one seed. The record carries the requested seed even after a retry.
pub fn generate_pair(seed: u64, cfg: &GenConfig, data: &DigitData) -> Result<(ParamPair, HostCheckpoint)> {
    with_retries(seed, |eff| {
        let mut host: HostModel = HostModel::build(cfg.spec(), eff)?;
        let host_acc = train_full(&mut host, &data.train, &data.test, &cfg.step1, eff)?;
        let large = host.extract_large_block()?;
        let (target, distilled_acc, _) =
            train_target_frozen(&host, cfg.variant, &data.train, &data.test, &cfg.step2, eff)?;
        let pair = ParamPair {
            seed,
            large,
            target,
            host_acc,
            distilled_acc,
        };
        let ck = HostCheckpoint {
            seed,
            host_acc,
            distilled_acc,
            host,
        };
        Ok((pair, ck))
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardEntry {
    pub file: String,
    pub hosts_file: String,
    pub first_seed: u64,
    pub count: u64,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetIndex {
    pub version: u32,
    pub channels: usize,
    pub variant: TargetVariant,
    pub count: u64,
    pub seeds: SeedRange,
    pub config_digest: String,
    pub shards: Vec<ShardEntry>,
}

impl DatasetIndex {
    /// Digest over the shard digests: identifies the dataset's content.
    pub fn content_digest(&self) -> String {
        let mut h = Sha256::new();
        for s in &self.shards {
            h.update(s.sha256.as_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// Knobs that change how a run proceeds but never what it produces.
#[derive(Clone, Debug, Default)]
pub struct GenOptions {
    /// Stop after producing this many new records (simulated interruption).
    pub stop_after: Option<usize>,
}

fn shard_names(i: usize) -> (String, String) {
    (format!("pairs-{i:05}.ktpr"), format!("hosts-{i:05}.ktpr"))
}

fn tmp_path(dir: &Path, seed: u64) -> PathBuf {
    dir.join("tmp").join(format!("seed-{seed:020}.rec"))
}

/// Whether a finalized container exists with the expected length; a bad header is an error.
fn finalized(path: &Path, tag: u8, c: usize, count: usize, record_len: usize) -> Result<bool> {
    let bytes = match std::fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(false),
        Err(e) => return Err(KtError::io(path, e)),
    };
    if bytes.len() < HEADER_LEN {
        return Ok(false);
    }
    let h = Header::decode(&bytes, path)?;
    ensure!(
        h.tag == tag && h.channels as usize == c,
        KtError::Corrupt {
            path: path.to_path_buf(),
            reason: format!("header C={} tag={} where C={c} tag={tag} expected", h.channels, h.tag),
        }
    );
    Ok(h.count as usize == count && bytes.len() == HEADER_LEN + count * record_len)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            KtError::Missing(path.to_path_buf())
        } else {
            KtError::io(path, e)
        }
    })?;
    serde_json::from_str(&text).map_err(|e| KtError::Corrupt {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(v)?;
    std::fs::write(path, text + "\n").map_err(|e| KtError::io(path, e))
}

/// Builds (or completes) the dataset at `cfg.output`. Rerunning over a finished dataset is a no-op.
pub fn generate_dataset(cfg: &GenConfig, data: &DigitData, opts: &GenOptions) -> Result<PairDataset> {
    cfg.validate(data.train.len())?;
    let dir = &cfg.output;
    let c = cfg.channels;
    let digest = cfg.digest();
    let index_path = dir.join("index.json");
    if index_path.exists() {
        let idx: DatasetIndex = read_json(&index_path)?;
        ensure!(
            idx.config_digest == digest,
            KtError::Config(format!(
                "{} holds a dataset from a different generation config",
                dir.display()
            ))
        );
    }
    std::fs::create_dir_all(dir.join("tmp")).map_err(|e| KtError::io(dir, e))?;
    write_json(&dir.join("config.json"), cfg)?;

    let pair_len = pair_record_len(c, cfg.variant);
    let host_len = host_record_len(c);
    let tag = cfg.variant.pair_tag().expect("compressed variant");
    let shards = cfg.shards();
    let mut todo = Vec::new();
    let mut open_shards = Vec::new();
    for (i, r) in shards.iter().enumerate() {
        let (pf, hf) = shard_names(i);
        let done = finalized(&dir.join(&pf), tag, c, r.len(), pair_len)?
            && finalized(&dir.join(&hf), HOST_TAG, c, r.len(), host_len)?;
        if done {
            continue;
        }
        open_shards.push(i);
        for seed in r.iter() {
            let tp = tmp_path(dir, seed);
            let ok = std::fs::metadata(&tp).is_ok_and(|m| m.len() as usize == pair_len + host_len);
            if !ok {
                todo.push(seed);
            }
        }
    }

    if !todo.is_empty() {
        info!("generating {} pairs with {} worker(s)", todo.len(), cfg.jobs);
        let produced = AtomicUsize::new(0);
        let limit = opts.stop_after.unwrap_or(usize::MAX);
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.jobs)
            .build()
            .map_err(|e| KtError::Config(format!("thread pool: {e}")))?;
        pool.install(|| {
            todo.par_iter().try_for_each(|&seed| -> Result<()> {
                if produced.load(Ordering::SeqCst) >= limit {
                    return Ok(());
                }
                let (pair, ck) = generate_pair(seed, cfg, data)?;
                let mut bytes = encode_pair(&pair);
                bytes.extend(encode_host(&ck));
                let tp = tmp_path(dir, seed);
                let part = tp.with_extension("part");
                std::fs::write(&part, &bytes).map_err(|e| KtError::io(&part, e))?;
                std::fs::rename(&part, &tp).map_err(|e| KtError::io(&tp, e))?;
                produced.fetch_add(1, Ordering::SeqCst);
                Ok(())
            })
        })?;
        let n = produced.load(Ordering::SeqCst);
        if n < todo.len() {
            return Err(KtError::Interrupted(n));
        }
    }

    for &i in &open_shards {
        let r = shards[i];
        let (pf, hf) = shard_names(i);
        let mut pairs = Vec::with_capacity(r.len());
        let mut hosts = Vec::with_capacity(r.len());
        for seed in r.iter() {
            let tp = tmp_path(dir, seed);
            let bytes = std::fs::read(&tp).map_err(|e| KtError::io(&tp, e))?;
            ensure!(
                bytes.len() == pair_len + host_len,
                KtError::Corrupt { path: tp, reason: "wrong record length".into() }
            );
            pairs.push(bytes[..pair_len].to_vec());
            hosts.push(bytes[pair_len..].to_vec());
        }
        let count = r.len() as u64;
        write_container(&dir.join(&pf), Header { channels: c as u32, tag, count }, pairs.iter().map(Vec::as_slice))?;
        write_container(
            &dir.join(&hf),
            Header { channels: c as u32, tag: HOST_TAG, count },
            hosts.iter().map(Vec::as_slice),
        )?;
        for seed in r.iter() {
            let _ = std::fs::remove_file(tmp_path(dir, seed));
        }
    }
    let _ = std::fs::remove_dir(dir.join("tmp"));

    let mut entries = Vec::new();
    for (i, r) in shards.iter().enumerate() {
        let (pf, hf) = shard_names(i);
        let p = dir.join(&pf);
        let bytes = std::fs::read(&p).map_err(|e| KtError::io(&p, e))?;
        entries.push(ShardEntry {
            file: pf,
            hosts_file: hf,
            first_seed: r.start,
            count: r.len() as u64,
            sha256: hex::encode(Sha256::digest(&bytes)),
        });
    }
    let index = DatasetIndex {
        version: 1,
        channels: c,
        variant: cfg.variant,
        count: cfg.seeds.len() as u64,
        seeds: cfg.seeds,
        config_digest: digest,
        shards: entries,
    };
    write_json(&index_path, &index)?;
    PairDataset::open(dir)
}

/// A finalized dataset with its pair records loaded.
#[derive(Clone, Debug)]
pub struct PairDataset {
    pub dir: PathBuf,
    pub index: DatasetIndex,
    pub pairs: Vec<ParamPair>,
}

impl PairDataset {
    pub fn open(dir: &Path) -> Result<Self> {
        let index: DatasetIndex = read_json(&dir.join("index.json"))?;
        let c = index.channels;
        let len = pair_record_len(c, index.variant);
        let tag = index.variant.pair_tag().ok_or_else(|| KtError::Corrupt {
            path: dir.join("index.json"),
            reason: "index names a non-target variant".into(),
        })?;
        let mut pairs = Vec::with_capacity(index.count as usize);
        for s in &index.shards {
            let recs = read_container(&dir.join(&s.file), tag, c, len)?;
            ensure!(
                recs.len() as u64 == s.count,
                KtError::Corrupt {
                    path: dir.join(&s.file),
                    reason: format!("{} records, index says {}", recs.len(), s.count),
                }
            );
            for r in recs {
                pairs.push(decode_pair(&r, c, index.variant)?);
            }
        }
        ensure!(
            pairs.len() as u64 == index.count,
            KtError::Corrupt {
                path: dir.join("index.json"),
                reason: format!("shards hold {} records, header count {}", pairs.len(), index.count),
            }
        );
        Ok(Self {
            dir: dir.to_path_buf(),
            index,
            pairs,
        })
    }

    pub fn channels(&self) -> usize {
        self.index.channels
    }

    pub fn variant(&self) -> TargetVariant {
        self.index.variant
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Host checkpoints for the given seeds (ascending seed order of the request is kept).
    pub fn load_hosts(&self, seeds: &[u64]) -> Result<Vec<HostCheckpoint>> {
        let c = self.channels();
        let len = host_record_len(c);
        let mut out = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let s = self
                .index
                .shards
                .iter()
                .find(|s| seed >= s.first_seed && seed < s.first_seed + s.count)
                .ok_or_else(|| KtError::Invalid(format!("seed {seed} not in dataset")))?;
            let path = self.dir.join(&s.hosts_file);
            let i = (seed - s.first_seed) as usize;
            let bytes = std::fs::read(&path).map_err(|e| KtError::io(&path, e))?;
            Header::decode(&bytes, &path)?;
            let at = HEADER_LEN + i * len;
            ensure!(
                bytes.len() >= at + len,
                KtError::Corrupt { path: path.clone(), reason: "truncated host shard".into() }
            );
            let ck = decode_host(&bytes[at..at + len], c)?;
            ensure!(
                ck.seed == seed,
                KtError::Corrupt { path, reason: format!("record {i} holds seed {}", ck.seed) }
            );
            out.push(ck);
        }
        Ok(out)
    }
}

/// An evaluation host: its stored pair plus the full Step-1 checkpoint.
#[derive(Clone, Debug)]
pub struct EvalHost {
    pub pair: ParamPair,
    pub checkpoint: HostCheckpoint,
}

/// Holds out the `n_eval` largest seeds as evaluation hosts; the rest form the training view.
pub fn split_train_eval(ds: &PairDataset, n_eval: usize) -> Result<(Vec<ParamPair>, Vec<EvalHost>)> {
    ensure!(
        n_eval < ds.len(),
        KtError::Config(format!("n_eval {n_eval} must be below the record count {}", ds.len()))
    );
    let cut = ds.len() - n_eval;
    let train = ds.pairs[..cut].to_vec();
    let eval_pairs = &ds.pairs[cut..];
    let seeds: Vec<u64> = eval_pairs.iter().map(|p| p.seed).collect();
    let hosts = ds.load_hosts(&seeds)?;
    let eval = eval_pairs
        .iter()
        .cloned()
        .zip(hosts)
        .map(|(pair, checkpoint)| EvalHost { pair, checkpoint })
        .collect();
    Ok((train, eval))
}
