//! Impression data model, JSONL/CSV persistence and synthetic generators.
//!
//! An impression is one ranked slate of candidate ads. Each ad carries its
//! ground-truth queue position `v` (higher is better), the eCPM assigned by
//! the downstream ranking stage and, once a model has scored the slate, the
//! model score. User and ad features are not modelled: every metric in this
//! crate is a function of `(v, ecpm, score)` alone.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, StandardNormal, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::metrics::{self, MetricConfig};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdRecord {
    pub v: i64,
    pub ecpm: f64,
    pub score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Impression {
    pub id: String,
    pub ads: Vec<AdRecord>,
}

impl Impression {
    /// Checks the per-impression invariants: non-empty slate, distinct
    /// ground-truth positions, finite non-negative eCPM, finite scores.
    pub fn validate(&self) -> Result<()> {
        let invalid = |reason: String| Error::InvalidImpression {
            id: self.id.clone(),
            reason,
        };
        if self.ads.is_empty() {
            return Err(invalid("impression has no ads".into()));
        }
        let mut seen = HashSet::with_capacity(self.ads.len());
        for (j, ad) in self.ads.iter().enumerate() {
            if !ad.ecpm.is_finite() || ad.ecpm < 0.0 {
                return Err(invalid(format!("ad {j} has invalid ecpm {}", ad.ecpm)));
            }
            if let Some(s) = ad.score {
                if !s.is_finite() {
                    return Err(invalid(format!("ad {j} has non-finite score")));
                }
            }
            if !seen.insert(ad.v) {
                return Err(invalid(format!("duplicate ground-truth value v={}", ad.v)));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.ads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ads.is_empty()
    }

    pub fn scores(&self) -> Option<Vec<f64>> {
        self.ads.iter().map(|a| a.score).collect()
    }

    pub fn values(&self) -> Vec<f64> {
        self.ads.iter().map(|a| a.v as f64).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub impressions: Vec<Impression>,
    pub metadata: BTreeMap<String, String>,
}

impl Dataset {
    pub fn new(impressions: Vec<Impression>) -> Self {
        Self {
            impressions,
            metadata: BTreeMap::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.impressions.is_empty() {
            return Err(Error::EmptyDataset);
        }
        self.impressions.iter().try_for_each(Impression::validate)
    }

    pub fn len(&self) -> usize {
        self.impressions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.impressions.is_empty()
    }
}

/// Metadata is kept next to the JSONL file so the impression file stays one
/// impression per line.
pub fn metadata_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".meta.json");
    PathBuf::from(name)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut impressions = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let imp: Impression = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: idx + 1,
            message: e.to_string(),
        })?;
        imp.validate()?;
        impressions.push(imp);
    }
    if impressions.is_empty() {
        return Err(Error::EmptyDataset);
    }

    let meta_path = metadata_path(path);
    let metadata = if meta_path.exists() {
        let text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            line: 1,
            message: format!("{}: {e}", meta_path.display()),
        })?
    } else {
        BTreeMap::new()
    };
    Ok(Dataset {
        impressions,
        metadata,
    })
}

/// Serializes the impressions as JSONL into any writer.
pub fn write_jsonl<W: Write>(ds: &Dataset, mut out: W) -> std::io::Result<()> {
    for imp in &ds.impressions {
        serde_json::to_writer(&mut out, imp)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

pub fn save_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_jsonl(ds, BufWriter::new(file)).map_err(|e| Error::io(path, e))?;

    let meta_path = metadata_path(path);
    if !ds.metadata.is_empty() {
        let text = serde_json::to_string_pretty(&ds.metadata)
            .map_err(|e| Error::Numeric(e.to_string()))?;
        std::fs::write(&meta_path, text).map_err(|e| Error::io(&meta_path, e))?;
    } else if meta_path.exists() {
        std::fs::remove_file(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    }
    Ok(())
}

/// One point of a quality-versus-compute curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingObservation {
    pub flops: f64,
    pub r_over_rstar: f64,
    pub label: String,
}

impl ScalingObservation {
    pub fn validate(&self) -> Result<()> {
        if !(self.flops.is_finite() && self.flops > 0.0) {
            return Err(Error::InvalidInput(format!(
                "observation {:?}: flops must be positive, got {}",
                self.label, self.flops
            )));
        }
        if !(0.0..=1.0).contains(&self.r_over_rstar) {
            return Err(Error::InvalidInput(format!(
                "observation {:?}: r_over_rstar must lie in [0, 1], got {}",
                self.label, self.r_over_rstar
            )));
        }
        Ok(())
    }
}

pub fn write_observations_csv<W: Write>(obs: &[ScalingObservation], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for o in obs {
        w.serialize(o).map_err(|e| Error::Numeric(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::Numeric(e.to_string()))
}

pub fn read_observations_csv(path: impl AsRef<Path>) -> Result<Vec<ScalingObservation>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::Reader::from_reader(file);
    let mut out = Vec::new();
    for (idx, rec) in rdr.deserialize::<ScalingObservation>().enumerate() {
        let o = rec.map_err(|e| Error::Parse {
            // header is line 1
            line: idx + 2,
            message: e.to_string(),
        })?;
        o.validate()?;
        out.push(o);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EcpmDistribution {
    Lognormal { mu: f64, sigma: f64 },
    Uniform { lo: f64, hi: f64 },
    Constant { value: f64 },
}

impl EcpmDistribution {
    fn validate(&self) -> Result<()> {
        let ok = match *self {
            Self::Lognormal { mu, sigma } => mu.is_finite() && sigma.is_finite() && sigma >= 0.0,
            Self::Uniform { lo, hi } => lo.is_finite() && hi.is_finite() && 0.0 <= lo && lo < hi,
            Self::Constant { value } => value.is_finite() && value >= 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid ecpm distribution {self:?}")))
        }
    }

    fn sample(&self, rng: &mut impl Rng) -> f64 {
        match *self {
            Self::Lognormal { mu, sigma } => LogNormal::new(mu, sigma)
                .expect("validated lognormal")
                .sample(rng),
            Self::Uniform { lo, hi } => {
                Uniform::new(lo, hi).expect("validated uniform").sample(rng)
            }
            Self::Constant { value } => value,
        }
    }
}

/// Score noise of the synthetic scorer.
///
/// `Capacity` models a bigger model as a less noisy ranker:
/// `sigma(flops) = s0 * flops^(-gamma)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseRule {
    Fixed { sigma: f64 },
    Capacity { s0: f64, gamma: f64 },
}

impl NoiseRule {
    fn validate(&self) -> Result<()> {
        let ok = match *self {
            Self::Fixed { sigma } => sigma.is_finite() && sigma >= 0.0,
            Self::Capacity { s0, gamma } => {
                s0.is_finite() && s0 >= 0.0 && gamma.is_finite() && gamma > 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid noise rule {self:?}")))
        }
    }

    pub fn sigma(&self, flops: Option<f64>) -> Result<f64> {
        match (*self, flops) {
            (Self::Fixed { sigma }, _) => Ok(sigma),
            (Self::Capacity { s0, gamma }, Some(f)) if f.is_finite() && f > 0.0 => {
                Ok(s0 * f.powf(-gamma))
            }
            (Self::Capacity { .. }, Some(f)) => Err(Error::InvalidInput(format!(
                "flops must be positive, got {f}"
            ))),
            (Self::Capacity { .. }, None) => Err(Error::Config(
                "capacity-derived noise needs a flops value".into(),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_impressions: usize,
    pub ads_per_impression: usize,
    pub ecpm: EcpmDistribution,
    pub noise: NoiseRule,
    pub seed: u64,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_impressions == 0 || self.ads_per_impression == 0 {
            return Err(Error::Config(
                "n_impressions and ads_per_impression must be positive".into(),
            ));
        }
        self.ecpm.validate()?;
        self.noise.validate()
    }
}

/// Generates a dataset with the fixed noise level of `cfg`.
///
/// Fails for a capacity-derived rule, which needs a compute budget; use
/// [`generate_impressions_at`] for that.
pub fn generate_impressions(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let sigma = cfg.noise.sigma(None)?;
    Ok(generate_with_sigma(cfg, sigma, None))
}

/// Generates a dataset whose scorer noise follows `cfg.noise` at `flops`.
pub fn generate_impressions_at(cfg: &SynthConfig, flops: f64) -> Result<Dataset> {
    cfg.validate()?;
    let sigma = cfg.noise.sigma(Some(flops))?;
    Ok(generate_with_sigma(cfg, sigma, Some(flops)))
}

fn generate_with_sigma(cfg: &SynthConfig, sigma: f64, flops: Option<f64>) -> Dataset {
    let impressions = (0..cfg.n_impressions)
        .into_par_iter()
        .map(|i| generate_one(cfg, sigma, i))
        .collect();
    let mut metadata = BTreeMap::new();
    metadata.insert("source".to_string(), "synthetic".to_string());
    metadata.insert("seed".to_string(), cfg.seed.to_string());
    metadata.insert("score_noise_sigma".to_string(), sigma.to_string());
    if let Some(f) = flops {
        metadata.insert("flops".to_string(), f.to_string());
    }
    Dataset {
        impressions,
        metadata,
    }
}

// Each impression draws from its own ChaCha stream, so the output does not
// depend on how the work is split across threads. The draw order (shuffle,
// eCPM, noise) is fixed so that datasets generated at different noise levels
// share the same underlying random numbers.
fn generate_one(cfg: &SynthConfig, sigma: f64, index: usize) -> Impression {
    let n = cfg.ads_per_impression;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);

    let mut vs: Vec<i64> = (1..=n as i64).collect();
    vs.shuffle(&mut rng);

    // eCPM follows queue position: the ad with the highest v receives the
    // largest draw.
    let mut ecpms: Vec<f64> = (0..n).map(|_| cfg.ecpm.sample(&mut rng)).collect();
    ecpms.sort_by(|a, b| b.total_cmp(a));

    let noise: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();

    let ads = vs
        .iter()
        .zip(&noise)
        .map(|(&v, &z)| {
            let latent = v as f64 / n as f64;
            AdRecord {
                v,
                ecpm: ecpms[n - v as usize],
                score: Some(latent + sigma * z),
            }
        })
        .collect();
    Impression {
        id: format!("imp-{index}"),
        ads,
    }
}

/// Synthetic stand-in for training a family of models: for every compute
/// budget, score a fresh slate set with the capacity-derived noise and
/// measure its R/R*.
pub fn generate_observations(
    cfg: &SynthConfig,
    flops_list: &[f64],
    metric_cfg: &MetricConfig,
) -> Result<Vec<ScalingObservation>> {
    if flops_list.is_empty() {
        return Err(Error::InvalidInput("flops list is empty".into()));
    }
    if let Some(f) = flops_list.iter().find(|f| !(f.is_finite() && **f > 0.0)) {
        return Err(Error::InvalidInput(format!(
            "flops values must be positive, got {f}"
        )));
    }
    flops_list
        .iter()
        .map(|&flops| {
            let ds = generate_impressions_at(cfg, flops)?;
            let summary = metrics::r_over_rstar(&ds, metric_cfg)?;
            Ok(ScalingObservation {
                flops,
                r_over_rstar: summary.mean,
                label: format!("flops={flops}"),
            })
        })
        .collect()
}
