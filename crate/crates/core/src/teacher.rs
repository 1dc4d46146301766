//! Teacher artifacts: per-sample ranked lists and grounding distances plus
//! the teacher's item embeddings, with file I/O and a synthetic teacher.
//!
//! On disk an artifact is a directory holding `manifest.json`,
//! `rankings.jsonl` (`{"sample": n, "items": [...]}` per line),
//! `confidences.tsv` (`sample<TAB>distance`) and `embeddings.txt` (tensor
//! text format). Synthetic teachers may also keep `grounding.txt`, the
//! generated description embeddings z_g, for debugging.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use distillrec_autodiff::{read_tensors, write_tensors, Tensor};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::SequenceSample;
use crate::error::{CoreError, Result};
use crate::seed;

pub const DEFAULT_LIST_LEN: usize = 20;

/// Squared Euclidean distance.
pub fn grounding_distance(z_g: &[f64], z_i: &[f64]) -> Result<f64> {
    if z_g.len() != z_i.len() {
        return Err(CoreError::invalid(format!(
            "grounding distance between dims {} and {}",
            z_g.len(),
            z_i.len()
        )));
    }
    Ok(z_g.iter().zip(z_i).map(|(a, b)| (a - b) * (a - b)).sum())
}

/// The `k` catalog items nearest to `z_g`, ties by ascending id.
pub fn rank_by_grounding(z_g: &[f64], embeddings: &Tensor, k: usize) -> Result<Vec<usize>> {
    let n = embeddings.rows();
    if k > n {
        return Err(CoreError::invalid(format!("k = {k} exceeds catalog size {n}")));
    }
    let mut scored = Vec::with_capacity(n);
    for i in 0..n {
        scored.push((grounding_distance(z_g, embeddings.row(i))?, i));
    }
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if k < n && k > 0 {
        scored.select_nth_unstable_by(k - 1, cmp);
    }
    scored.truncate(k);
    scored.sort_by(cmp);
    Ok(scored.into_iter().map(|(_, i)| i).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TeacherEntry {
    /// Best first; rank r is position r - 1.
    pub ranking: Vec<usize>,
    /// Grounding distance between the generated description and the target.
    pub distance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    /// `real` or `synthetic`.
    pub generator: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_g: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corruption: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TeacherArtifact {
    pub entries: BTreeMap<usize, TeacherEntry>,
    pub embeddings: Tensor,
    pub provenance: Provenance,
    /// Debug only: the z_g behind each entry.
    pub grounding: Option<BTreeMap<usize, Vec<f64>>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Manifest {
    rankings: String,
    confidences: String,
    embeddings: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    grounding: Option<String>,
    catalog_size: usize,
    embedding_dim: usize,
    /// Consumers standardize embedding columns before projection.
    standardize: bool,
    provenance: Provenance,
}

#[derive(Serialize, Deserialize)]
struct RankingLine {
    sample: usize,
    items: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TeacherQuality {
    /// Standard deviation of the description noise around the grounded item.
    pub sigma_g: f64,
    /// Probability that a sample is grounded on a random wrong item.
    pub corruption: f64,
    pub list_len: usize,
    /// Keep z_g in the artifact.
    pub keep_grounding: bool,
}

impl Default for TeacherQuality {
    fn default() -> Self {
        Self {
            sigma_g: 0.1,
            corruption: 0.0,
            list_len: DEFAULT_LIST_LEN,
            keep_grounding: false,
        }
    }
}

/// Simulates a generative teacher: for each sample, z_g = z_j + σ_g·ε where
/// j is the target, or with probability ρ a uniformly drawn wrong item. The
/// ranking is the `list_len` nearest items to z_g and the confidence is
/// d(z_g, z_target). Each sample has its own derived seed.
pub fn synthesize_teacher(
    embeddings: &Tensor,
    samples: &[SequenceSample],
    quality: &TeacherQuality,
    seed: u64,
) -> Result<TeacherArtifact> {
    let n = embeddings.rows();
    if !(quality.sigma_g >= 0.0 && quality.sigma_g.is_finite()) {
        return Err(CoreError::Config(format!("sigma_g = {}", quality.sigma_g)));
    }
    if !(0.0..=1.0).contains(&quality.corruption) {
        return Err(CoreError::Config(format!("corruption = {}", quality.corruption)));
    }
    if quality.list_len == 0 || quality.list_len > n {
        return Err(CoreError::Config(format!(
            "list length {} for a catalog of {n}",
            quality.list_len
        )));
    }
    if quality.corruption > 0.0 && n < 2 {
        return Err(CoreError::Config("corruption needs at least 2 items".into()));
    }
    let built: Vec<(usize, TeacherEntry, Vec<f64>)> = samples
        .par_iter()
        .map(|s| {
            if s.target >= n {
                return Err(CoreError::invalid(format!(
                    "sample {} targets item {} outside the catalog",
                    s.index, s.target
                )));
            }
            let mut rng = seed::rng(seed, &[seed::TEACHER, s.index as u64]);
            let corrupt = rng.random::<f64>() < quality.corruption;
            let anchor = if corrupt {
                let j = rng.random_range(0..n - 1);
                if j >= s.target {
                    j + 1
                } else {
                    j
                }
            } else {
                s.target
            };
            let z_g: Vec<f64> = embeddings
                .row(anchor)
                .iter()
                .map(|v| v + quality.sigma_g * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let entry = TeacherEntry {
                ranking: rank_by_grounding(&z_g, embeddings, quality.list_len)?,
                distance: grounding_distance(&z_g, embeddings.row(s.target))?,
            };
            Ok((s.index, entry, z_g))
        })
        .collect::<Result<_>>()?;
    let mut entries = BTreeMap::new();
    let mut grounding = BTreeMap::new();
    for (i, e, z) in built {
        entries.insert(i, e);
        if quality.keep_grounding {
            grounding.insert(i, z);
        }
    }
    Ok(TeacherArtifact {
        entries,
        embeddings: embeddings.clone(),
        provenance: Provenance {
            generator: "synthetic".into(),
            seed: Some(seed),
            sigma_g: Some(quality.sigma_g),
            corruption: Some(quality.corruption),
        },
        grounding: quality.keep_grounding.then_some(grounding),
    })
}

impl TeacherArtifact {
    pub fn catalog_size(&self) -> usize {
        self.embeddings.rows()
    }

    pub fn entry(&self, sample: usize) -> Result<&TeacherEntry> {
        self.entries
            .get(&sample)
            .ok_or_else(|| CoreError::Teacher(format!("no entry for sample {sample}")))
    }

    /// Checks list validity and that every sample in `samples` is covered.
    pub fn validate(&self, item_count: usize, samples: &[SequenceSample]) -> Result<()> {
        if self.catalog_size() != item_count {
            return Err(CoreError::Teacher(format!(
                "embeddings have {} rows, catalog has {item_count} items",
                self.catalog_size()
            )));
        }
        for (s, e) in &self.entries {
            check_ranking(&e.ranking, item_count).map_err(|m| CoreError::Teacher(format!("sample {s}: {m}")))?;
            if !(e.distance >= 0.0 && e.distance.is_finite()) {
                return Err(CoreError::Teacher(format!("sample {s}: distance {}", e.distance)));
            }
        }
        for s in samples {
            self.entry(s.index)?;
        }
        Ok(())
    }

    /// Writes the artifact into `dir` and returns the manifest path.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let manifest = Manifest {
            rankings: "rankings.jsonl".into(),
            confidences: "confidences.tsv".into(),
            embeddings: "embeddings.txt".into(),
            grounding: self.grounding.as_ref().map(|_| "grounding.txt".into()),
            catalog_size: self.catalog_size(),
            embedding_dim: self.embeddings.cols(),
            standardize: true,
            provenance: self.provenance.clone(),
        };
        let mut out = BufWriter::new(File::create(dir.join(&manifest.rankings))?);
        for (&sample, e) in &self.entries {
            let line = RankingLine {
                sample,
                items: e.ranking.clone(),
            };
            serde_json::to_writer(&mut out, &line)?;
            writeln!(out)?;
        }
        out.flush()?;
        let mut out = BufWriter::new(File::create(dir.join(&manifest.confidences))?);
        for (&sample, e) in &self.entries {
            writeln!(out, "{sample}\t{}", e.distance)?;
        }
        out.flush()?;
        let mut out = BufWriter::new(File::create(dir.join(&manifest.embeddings))?);
        write_tensors(&mut out, [("teacher.z", &self.embeddings)])?;
        out.flush()?;
        if let (Some(g), Some(name)) = (&self.grounding, &manifest.grounding) {
            let mut out = BufWriter::new(File::create(dir.join(name))?);
            for (sample, z) in g {
                write!(out, "{sample}")?;
                for v in z {
                    write!(out, " {v}")?;
                }
                writeln!(out)?;
            }
            out.flush()?;
        }
        let path = dir.join("manifest.json");
        std::fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")?;
        Ok(path)
    }

    /// Loads from a manifest path or the directory containing `manifest.json`.
    pub fn load(path: &Path) -> Result<Self> {
        let manifest_path = if path.is_dir() {
            path.join("manifest.json")
        } else {
            path.to_path_buf()
        };
        let dir = manifest_path.parent().unwrap_or(Path::new("."));
        let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(&manifest_path)?)?;

        let emb_path = dir.join(&manifest.embeddings);
        let mut tensors = read_tensors(BufReader::new(File::open(&emb_path)?), 1)?;
        if tensors.len() != 1 {
            return Err(CoreError::Teacher(format!(
                "{}: expected one tensor, found {}",
                emb_path.display(),
                tensors.len()
            )));
        }
        let embeddings = tensors.pop().expect("one tensor").1;
        if embeddings.rank() != 2
            || embeddings.rows() != manifest.catalog_size
            || embeddings.cols() != manifest.embedding_dim
        {
            return Err(CoreError::Teacher(format!(
                "{}: shape {:?}, manifest says {} × {}",
                emb_path.display(),
                embeddings.shape(),
                manifest.catalog_size,
                manifest.embedding_dim
            )));
        }

        let rank_path = dir.join(&manifest.rankings);
        let mut rankings = BTreeMap::new();
        for (no, line) in BufReader::new(File::open(&rank_path)?).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let err = |detail: String| CoreError::Parse {
                source_name: rank_path.display().to_string(),
                line: no + 1,
                detail,
            };
            let parsed: RankingLine = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
            check_ranking(&parsed.items, manifest.catalog_size).map_err(err)?;
            if rankings.insert(parsed.sample, parsed.items).is_some() {
                return Err(err(format!("sample {} listed twice", parsed.sample)));
            }
        }

        let conf_path = dir.join(&manifest.confidences);
        let mut distances = BTreeMap::new();
        for (no, line) in BufReader::new(File::open(&conf_path)?).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let err = |detail: String| CoreError::Parse {
                source_name: conf_path.display().to_string(),
                line: no + 1,
                detail,
            };
            let (s, d) = line
                .split_once('\t')
                .ok_or_else(|| err("expected `sample<TAB>distance`".into()))?;
            let s: usize = s.trim().parse().map_err(|_| err(format!("bad sample `{s}`")))?;
            let d: f64 = d.trim().parse().map_err(|_| err(format!("bad distance `{d}`")))?;
            if !(d >= 0.0 && d.is_finite()) {
                return Err(err(format!("distance {d} must be finite and ≥ 0")));
            }
            if distances.insert(s, d).is_some() {
                return Err(err(format!("sample {s} listed twice")));
            }
        }
        if rankings.len() != distances.len() || rankings.keys().ne(distances.keys()) {
            return Err(CoreError::Teacher(format!(
                "{} ranked samples but {} confidences, or the sample sets differ",
                rankings.len(),
                distances.len()
            )));
        }
        let entries = rankings
            .into_iter()
            .map(|(s, ranking)| {
                let distance = distances[&s];
                (s, TeacherEntry { ranking, distance })
            })
            .collect();

        let grounding = match &manifest.grounding {
            None => None,
            Some(name) => {
                let mut g = BTreeMap::new();
                for (no, line) in BufReader::new(File::open(dir.join(name))?).lines().enumerate() {
                    let line = line?;
                    let mut f = line.split_whitespace();
                    let bad = || CoreError::Parse {
                        source_name: name.clone(),
                        line: no + 1,
                        detail: "malformed grounding row".into(),
                    };
                    let s: usize = f.next().and_then(|t| t.parse().ok()).ok_or_else(bad)?;
                    let z = f.map(|t| t.parse::<f64>().map_err(|_| bad())).collect::<Result<Vec<_>>>()?;
                    g.insert(s, z);
                }
                Some(g)
            }
        };
        Ok(Self {
            entries,
            embeddings,
            provenance: manifest.provenance,
            grounding,
        })
    }
}

fn check_ranking(items: &[usize], catalog: usize) -> std::result::Result<(), String> {
    let mut seen = HashSet::with_capacity(items.len());
    for &i in items {
        if i >= catalog {
            return Err(format!("item {i} outside catalog of {catalog}"));
        }
        if !seen.insert(i) {
            return Err(format!("item {i} repeated in ranking"));
        }
    }
    Ok(())
}
