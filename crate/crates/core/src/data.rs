//! Synthetic multi-site age-regression data with a site-dependent shortcut.
//!
//! Every sample draws a latent `z ~ N(0, I)`. Its age is an affine image of
//! `w·tanh(Vz)` plus label noise, kept inside the cohort's age range by
//! rejection. Observed features are
//!
//! * signal dims: `a_s ⊙ z + b_s + noise`
//! * nuisance dims: `b_s + γ_s·ỹ·u_s + noise`, where `ỹ` is the standardised age
//!
//! Training sites leak age into the nuisance dims (`γ_s > 0`); out-of-distribution
//! sites do not (`γ_s = 0`). A regressor that leans on the leak does well on
//! training sites and pays for it on unseen ones. The large per-site nuisance
//! offsets make sites easy to identify, which is what gives a site
//! discriminator something to push against.

use std::collections::BTreeSet;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub n_train_sites: usize,
    pub n_ood_sites: usize,
    pub train_samples: usize,
    pub ood_samples: usize,
    pub d_signal: usize,
    pub d_nuis: usize,
    pub sites_per_client: usize,
    /// Share of training samples held by the client that owns the largest site.
    pub dominant_client_fraction: f64,
    /// Relative jitter on the sizes of the non-dominant sites.
    pub site_size_jitter: f64,
    pub signal_noise: f64,
    pub gain_log_sd: f64,
    pub signal_bias_scale: f64,
    pub nuisance_bias_scale: f64,
    pub nuisance_noise: f64,
    /// Leak strength `γ` on training sites.
    pub leak: f64,
    pub leak_jitter: f64,
    pub leak_direction_jitter: f64,
    pub age_center: f64,
    pub age_spread: f64,
    pub label_noise_years: f64,
    pub train_age_range: (f64, f64),
    pub ood_age_range: (f64, f64),
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            n_train_sites: 15,
            n_ood_sites: 19,
            train_samples: 1587,
            ood_samples: 594,
            d_signal: 8,
            d_nuis: 8,
            sites_per_client: 3,
            dominant_client_fraction: 0.6,
            site_size_jitter: 0.1,
            signal_noise: 0.5,
            gain_log_sd: 0.1,
            signal_bias_scale: 0.1,
            nuisance_bias_scale: 1.5,
            nuisance_noise: 0.1,
            leak: 1.0,
            leak_jitter: 0.2,
            leak_direction_jitter: 0.2,
            age_center: 22.0,
            age_spread: 24.0,
            label_noise_years: 1.5,
            train_age_range: (6.0, 64.0),
            ood_age_range: (6.0, 79.0),
        }
    }
}

impl GenConfig {
    pub fn input_dim(&self) -> usize {
        self.d_signal + self.d_nuis
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_signal == 0 || self.d_nuis == 0 {
            return Err(Error::config("d_signal and d_nuis must be >= 1"));
        }
        if self.n_train_sites == 0 || self.n_ood_sites == 0 {
            return Err(Error::config("site counts must be >= 1"));
        }
        if self.sites_per_client == 0 || !self.n_train_sites.is_multiple_of(self.sites_per_client) {
            return Err(Error::config(format!(
                "{} training sites cannot be split into groups of {}",
                self.n_train_sites, self.sites_per_client
            )));
        }
        if !(self.dominant_client_fraction > 0.0 && self.dominant_client_fraction < 1.0) {
            return Err(Error::config("dominant_client_fraction must be in (0,1)"));
        }
        if self.train_samples < self.n_train_sites || self.ood_samples < self.n_ood_sites {
            return Err(Error::config("every site needs at least one sample"));
        }
        let (lo, hi) = self.train_age_range;
        let (olo, ohi) = self.ood_age_range;
        if !(lo < hi && olo < ohi) {
            return Err(Error::config("age ranges must be non-empty"));
        }
        let nonneg = [
            self.signal_noise,
            self.gain_log_sd,
            self.signal_bias_scale,
            self.nuisance_bias_scale,
            self.nuisance_noise,
            self.leak,
            self.leak_jitter,
            self.leak_direction_jitter,
            self.label_noise_years,
            self.site_size_jitter,
        ];
        if nonneg.iter().any(|v| !(*v >= 0.0)) || self.site_size_jitter >= 1.0 {
            return Err(Error::config("noise, scale and jitter parameters must be >= 0"));
        }
        Ok(())
    }
}

/// Per-site acquisition parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteSpec {
    pub site_id: usize,
    pub signal_bias: Vec<f64>,
    pub nuisance_bias: Vec<f64>,
    pub gain: Vec<f64>,
    pub leak: f64,
    pub leak_direction: Vec<f64>,
    pub sample_count: usize,
}

/// All samples of one site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteShard {
    pub site_id: usize,
    pub features: Tensor,
    pub ages: Vec<f64>,
}

impl SiteShard {
    pub fn len(&self) -> usize {
        self.ages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ages.is_empty()
    }
}

/// Feature rows with age targets and, for training data, site labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub features: Tensor,
    pub y_true: Vec<f64>,
    pub d_true: Option<Vec<usize>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.y_true.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y_true.is_empty()
    }

    pub fn select(&self, idx: &[usize]) -> Result<Batch> {
        Ok(Batch {
            features: self.features.select_rows(idx)?,
            y_true: idx.iter().map(|&i| self.y_true[i]).collect(),
            d_true: self.d_true.as_ref().map(|d| idx.iter().map(|&i| d[i]).collect()),
        })
    }

    pub fn targets(&self) -> Result<Tensor> {
        Tensor::matrix(self.len(), 1, self.y_true.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<SiteShard>,
    pub ood: Vec<SiteShard>,
    /// Generator parameters per site; empty for loaded data.
    #[serde(default)]
    pub site_specs: Vec<SiteSpec>,
}

impl DatasetSplit {
    pub fn validate(&self) -> Result<()> {
        if self.train.is_empty() || self.ood.is_empty() {
            return Err(Error::data("both the training and OOD splits need at least one site"));
        }
        let width = self.train[0].features.dims2()?.1;
        let mut seen = BTreeSet::new();
        for shard in self.train.iter().chain(&self.ood) {
            if shard.is_empty() {
                return Err(Error::data(format!("site {} has no samples", shard.site_id)));
            }
            let (rows, cols) = shard.features.dims2()?;
            if rows != shard.ages.len() || cols != width {
                return Err(Error::data(format!(
                    "site {} has inconsistent feature shape {rows}x{cols}",
                    shard.site_id
                )));
            }
            if !seen.insert(shard.site_id) {
                return Err(Error::data(format!("site id {} appears more than once across splits", shard.site_id)));
            }
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.train.first().and_then(|s| s.features.dims2().ok()).map(|(_, c)| c).unwrap_or(0)
    }

    pub fn n_train_sites(&self) -> usize {
        self.train.len()
    }

    pub fn train_site_ids(&self) -> Vec<usize> {
        self.train.iter().map(|s| s.site_id).collect()
    }

    pub fn train_samples(&self) -> usize {
        self.train.iter().map(SiteShard::len).sum()
    }

    /// Label of a training site for the discriminator: its position in
    /// `train`.
    pub fn site_label(&self, site_id: usize) -> Option<usize> {
        self.train.iter().position(|s| s.site_id == site_id)
    }

    /// Concatenates the training shards of `site_ids`, in ascending site-id
    /// order, with discriminator labels attached.
    pub fn train_batch(&self, site_ids: &[usize]) -> Result<Batch> {
        let mut ids = site_ids.to_vec();
        ids.sort_unstable();
        let mut rows = Vec::new();
        let mut ages = Vec::new();
        let mut labels = Vec::new();
        let width = self.input_dim();
        for id in ids {
            let label = self.site_label(id).ok_or_else(|| Error::data(format!("site {id} is not a training site")))?;
            let shard = &self.train[label];
            rows.extend_from_slice(shard.features.data());
            ages.extend_from_slice(&shard.ages);
            labels.extend(std::iter::repeat_n(label, shard.len()));
        }
        if ages.is_empty() {
            return Err(Error::data("no training samples selected"));
        }
        Ok(Batch { features: Tensor::matrix(ages.len(), width, rows)?, y_true: ages, d_true: Some(labels) })
    }

    pub fn pooled_train(&self) -> Result<Batch> {
        self.train_batch(&self.train_site_ids())
    }

    pub fn ood_batch(&self) -> Result<Batch> {
        let width = self.input_dim();
        let mut rows = Vec::new();
        let mut ages = Vec::new();
        for shard in &self.ood {
            rows.extend_from_slice(shard.features.data());
            ages.extend_from_slice(&shard.ages);
        }
        Ok(Batch { features: Tensor::matrix(ages.len(), width, rows)?, y_true: ages, d_true: None })
    }
}

/// Sizes the training sites so that the largest one, together with
/// `sites_per_client − 1` ordinary sites, holds `dominant_client_fraction`
/// of the samples.
fn train_site_sizes(cfg: &GenConfig, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = cfg.n_train_sites;
    if n == 1 {
        return vec![cfg.train_samples];
    }
    let total = cfg.train_samples as f64;
    let others = n - 1;
    let base = if n > cfg.sites_per_client {
        (1.0 - cfg.dominant_client_fraction) * total / (n - cfg.sites_per_client) as f64
    } else {
        total / n as f64
    };
    let mut sizes: Vec<usize> = (0..others)
        .map(|_| {
            let j = rng.random_range(-1.0..=1.0) * cfg.site_size_jitter;
            ((base * (1.0 + j)).round() as usize).max(1)
        })
        .collect();
    let used: usize = sizes.iter().sum();
    let dominant = cfg.train_samples.saturating_sub(used).max(1);
    let slot = rng.random_range(0..n);
    sizes.insert(slot, dominant);
    sizes
}

fn ood_site_sizes(cfg: &GenConfig) -> Vec<usize> {
    let n = cfg.n_ood_sites;
    (0..n).map(|i| cfg.ood_samples / n + usize::from(i < cfg.ood_samples % n)).collect()
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return v;
    }
    v.into_iter().map(|x| x / norm).collect()
}

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize, sd: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let v: f64 = StandardNormal.sample(rng);
            sd * v
        })
        .collect()
}

/// The age function shared by every site.
struct AgeModel {
    mixing: Vec<f64>,
    weights: Vec<f64>,
    d: usize,
}

impl AgeModel {
    fn new(rng: &mut ChaCha8Rng, d: usize) -> Self {
        let scale = 1.0 / (d as f64).sqrt();
        let mixing = gaussian_vec(rng, d * d, scale * 1.5);
        let mut weights = gaussian_vec(rng, d, 1.0);
        let l1: f64 = weights.iter().map(|w| w.abs()).sum();
        weights.iter_mut().for_each(|w| *w /= l1);
        Self { mixing, weights, d }
    }

    /// `w·tanh(Vz)`, in `[-1, 1]`.
    fn score(&self, z: &[f64]) -> f64 {
        (0..self.d)
            .map(|i| {
                let row = &self.mixing[i * self.d..(i + 1) * self.d];
                let pre: f64 = row.iter().zip(z).map(|(a, b)| a * b).sum();
                self.weights[i] * pre.tanh()
            })
            .sum()
    }
}

/// Generates a deterministic split for `(cfg, seed)`.
pub fn generate(cfg: &GenConfig, seed: u64) -> Result<DatasetSplit> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let age_model = AgeModel::new(&mut rng, cfg.d_signal);
    let shared_direction = unit(gaussian_vec(&mut rng, cfg.d_nuis, 1.0));
    let label_noise = Normal::new(0.0, cfg.label_noise_years.max(0.0)).map_err(|e| Error::config(e.to_string()))?;
    // standardisation of the leak input; score is roughly N(0, ~0.3²) so this
    // only needs to be a fixed convention, not an estimate
    let age_mean = cfg.age_center;
    let age_sd = cfg.age_spread * 0.25;

    let train_sizes = train_site_sizes(cfg, &mut rng);
    let ood_sizes = ood_site_sizes(cfg);

    let mut site_specs = Vec::new();
    let mut train = Vec::new();
    let mut ood = Vec::new();
    let layout = train_sizes.iter().map(|&n| (n, true)).chain(ood_sizes.iter().map(|&n| (n, false)));
    for (site_id, (count, is_train)) in layout.enumerate() {
        let signal_bias = gaussian_vec(&mut rng, cfg.d_signal, cfg.signal_bias_scale);
        let nuisance_bias = gaussian_vec(&mut rng, cfg.d_nuis, cfg.nuisance_bias_scale);
        let gain: Vec<f64> = gaussian_vec(&mut rng, cfg.d_signal, cfg.gain_log_sd).into_iter().map(f64::exp).collect();
        let jitter = gaussian_vec(&mut rng, cfg.d_nuis, cfg.leak_direction_jitter);
        let leak_direction = unit(shared_direction.iter().zip(&jitter).map(|(u, j)| u + j).collect());
        let leak =
            if is_train { (cfg.leak * (1.0 + cfg.leak_jitter * rng.random_range(-1.0..=1.0))).max(0.0) } else { 0.0 };
        let spec = SiteSpec { site_id, signal_bias, nuisance_bias, gain, leak, leak_direction, sample_count: count };
        let (lo, hi) = if is_train { cfg.train_age_range } else { cfg.ood_age_range };

        let width = cfg.input_dim();
        let mut rows = Vec::with_capacity(count * width);
        let mut ages = Vec::with_capacity(count);
        while ages.len() < count {
            let z = gaussian_vec(&mut rng, cfg.d_signal, 1.0);
            let age = cfg.age_center + cfg.age_spread * age_model.score(&z) + label_noise.sample(&mut rng);
            if !(lo..=hi).contains(&age) {
                continue;
            }
            let standardised = (age - age_mean) / age_sd;
            for k in 0..cfg.d_signal {
                let noise: f64 = StandardNormal.sample(&mut rng);
                rows.push(spec.gain[k] * z[k] + spec.signal_bias[k] + cfg.signal_noise * noise);
            }
            for k in 0..cfg.d_nuis {
                let noise: f64 = StandardNormal.sample(&mut rng);
                rows.push(
                    spec.nuisance_bias[k]
                        + spec.leak * standardised * spec.leak_direction[k]
                        + cfg.nuisance_noise * noise,
                );
            }
            ages.push(age);
        }
        let shard = SiteShard { site_id, features: Tensor::matrix(count, width, rows)?, ages };
        if is_train {
            train.push(shard);
        } else {
            ood.push(shard);
        }
        site_specs.push(spec);
    }
    let split = DatasetSplit { train, ood, site_specs };
    split.validate()?;
    Ok(split)
}

/// Mean absolute error in years.
pub fn mae(y_pred: &[f64], y_true: &[f64]) -> Result<f64> {
    if y_pred.len() != y_true.len() {
        return Err(Error::dim(format!("{} predictions for {} targets", y_pred.len(), y_true.len())));
    }
    if y_pred.is_empty() {
        return Err(Error::usage("mae of an empty set"));
    }
    Ok(y_pred.iter().zip(y_true).map(|(p, t)| (p - t).abs()).sum::<f64>() / y_pred.len() as f64)
}

/// Pearson correlation of two equal-length series; zero when either is
/// constant.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len()) as f64;
    if n < 2.0 {
        return 0.0;
    }
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        0.0
    } else {
        sab / (saa * sbb).sqrt()
    }
}

/// Within-site correlation between age and the nuisance features projected on
/// the site's leak direction.
pub fn shortcut_correlation(shard: &SiteShard, spec: &SiteSpec, d_signal: usize) -> Result<f64> {
    let (rows, cols) = shard.features.dims2()?;
    let proj: Vec<f64> = (0..rows)
        .map(|i| {
            let row = &shard.features.data()[i * cols..(i + 1) * cols];
            row[d_signal..].iter().zip(&spec.leak_direction).map(|(x, u)| x * u).sum()
        })
        .collect();
    Ok(pearson(&proj, &shard.ages))
}

const SPLIT_TRAIN: &str = "train";
const SPLIT_OOD: &str = "ood";

/// Writes `id,site,split,y,f1..fd`. Floats use the shortest representation
/// that parses back to the same bits.
pub fn write_csv(split: &DatasetSplit, path: &Path) -> Result<()> {
    let d = split.input_dim();
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["id".to_string(), "site".into(), "split".into(), "y".into()];
    header.extend((1..=d).map(|i| format!("f{i}")));
    w.write_record(&header)?;
    let mut id = 0usize;
    for (tag, shards) in [(SPLIT_TRAIN, &split.train), (SPLIT_OOD, &split.ood)] {
        for shard in shards {
            for (i, age) in shard.ages.iter().enumerate() {
                let mut rec = vec![id.to_string(), shard.site_id.to_string(), tag.to_string(), age.to_string()];
                rec.extend(shard.features.row(i)?.iter().map(|v| v.to_string()));
                w.write_record(&rec)?;
                id += 1;
            }
        }
    }
    w.flush()?;
    Ok(())
}

struct CsvRow {
    site: usize,
    is_ood: Option<bool>,
    age: f64,
    features: Vec<f64>,
}

fn read_rows(path: &Path) -> Result<Vec<CsvRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h.trim() == name);
    let site_col = col("site").ok_or_else(|| Error::data(format!("{}: missing column 'site'", path.display())))?;
    let y_col = col("y").ok_or_else(|| Error::data(format!("{}: missing column 'y'", path.display())))?;
    col("id").ok_or_else(|| Error::data(format!("{}: missing column 'id'", path.display())))?;
    let split_col = col("split");
    let mut feature_cols = Vec::new();
    for k in 1.. {
        match col(&format!("f{k}")) {
            Some(c) => feature_cols.push(c),
            None => break,
        }
    }
    if feature_cols.is_empty() {
        return Err(Error::data(format!("{}: missing feature column 'f1'", path.display())));
    }

    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        let cell = |c: usize| rec.get(c).unwrap_or("").trim();
        let num = |c: usize| -> Result<f64> {
            let v = cell(c);
            v.parse::<f64>().ok().filter(|x| x.is_finite()).ok_or_else(|| {
                Error::data(format!("{} row {line}: column '{}' is not numeric: '{v}'", path.display(), &headers[c]))
            })
        };
        let site = cell(site_col).parse::<usize>().map_err(|_| {
            Error::data(format!(
                "{} row {line}: site '{}' is not a non-negative integer",
                path.display(),
                cell(site_col)
            ))
        })?;
        let is_ood = match split_col.map(cell) {
            None => None,
            Some(SPLIT_TRAIN) => Some(false),
            Some(SPLIT_OOD) => Some(true),
            Some(other) => {
                return Err(Error::data(format!(
                    "{} row {line}: split must be 'train' or 'ood', got '{other}'",
                    path.display()
                )))
            }
        };
        let age = num(y_col)?;
        let features = feature_cols.iter().map(|&c| num(c)).collect::<Result<Vec<_>>>()?;
        rows.push(CsvRow { site, is_ood, age, features });
    }
    Ok(rows)
}

fn shards_from(rows: &[&CsvRow]) -> Result<Vec<SiteShard>> {
    let sites: BTreeSet<usize> = rows.iter().map(|r| r.site).collect();
    let width = rows.first().map(|r| r.features.len()).unwrap_or(0);
    let mut out = Vec::new();
    for site in sites {
        let mine: Vec<&&CsvRow> = rows.iter().filter(|r| r.site == site).collect();
        let mut data = Vec::with_capacity(mine.len() * width);
        for r in &mine {
            data.extend_from_slice(&r.features);
        }
        out.push(SiteShard {
            site_id: site,
            features: Tensor::matrix(mine.len(), width, data)?,
            ages: mine.iter().map(|r| r.age).collect(),
        });
    }
    Ok(out)
}

/// Loads a single CSV whose `split` column marks rows as `train` or `ood`.
pub fn load_csv(path: &Path) -> Result<DatasetSplit> {
    let rows = read_rows(path)?;
    let mut train = Vec::new();
    let mut ood = Vec::new();
    for r in &rows {
        match r.is_ood {
            Some(true) => ood.push(r),
            Some(false) => train.push(r),
            None => {
                return Err(Error::data(format!(
                    "{}: missing column 'split'; pass a separate OOD file instead",
                    path.display()
                )))
            }
        }
    }
    assemble(&train, &ood)
}

/// Loads training and OOD rows from two files; any `split` column is ignored.
pub fn load_csv_pair(train_path: &Path, ood_path: &Path) -> Result<DatasetSplit> {
    let train_rows = read_rows(train_path)?;
    let ood_rows = read_rows(ood_path)?;
    let train: Vec<&CsvRow> = train_rows.iter().collect();
    let ood: Vec<&CsvRow> = ood_rows.iter().collect();
    assemble(&train, &ood)
}

fn assemble(train: &[&CsvRow], ood: &[&CsvRow]) -> Result<DatasetSplit> {
    if train.is_empty() {
        return Err(Error::data("training split is empty"));
    }
    if ood.is_empty() {
        return Err(Error::data("OOD split is empty"));
    }
    let width = train[0].features.len();
    if let Some(r) = train.iter().chain(ood).find(|r| r.features.len() != width) {
        return Err(Error::data(format!("site {} row has {} features, expected {width}", r.site, r.features.len())));
    }
    let train_sites: BTreeSet<usize> = train.iter().map(|r| r.site).collect();
    if let Some(r) = ood.iter().find(|r| train_sites.contains(&r.site)) {
        return Err(Error::data(format!("site {} appears in both the training and OOD splits", r.site)));
    }
    let split = DatasetSplit { train: shards_from(train)?, ood: shards_from(ood)?, site_specs: Vec::new() };
    split.validate()?;
    Ok(split)
}
