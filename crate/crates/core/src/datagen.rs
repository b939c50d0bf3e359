//! Synthetic world with planted user preferences, interaction sampling and
//! the line-delimited dataset format.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::config::DataConfig;
use crate::error::{ConnaError, Result};
use crate::types::{BundleCreative, CandidateContext, ObjectType};

pub const FORMAT_VERSION: u32 = 1;

/// Latent factors of every object; affinities are scaled dot products.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticWorld {
    pub config: DataConfig,
    users: Vec<Vec<f64>>,
    items: Vec<Vec<f64>>,
    slogans: Vec<Vec<f64>>,
    templates: Vec<Vec<f64>>,
}

/// One logged exposure: the context, the clicked creative and up to three
/// shown-but-not-clicked creatives.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionRecord {
    pub timestamp: u64,
    pub context: CandidateContext,
    pub positive: BundleCreative,
    pub negatives: Vec<BundleCreative>,
}

/// Records split by timestamp.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Dataset {
    pub train: Vec<InteractionRecord>,
    pub dev: Vec<InteractionRecord>,
    pub test: Vec<InteractionRecord>,
}

impl Dataset {
    pub const SPLITS: [&'static str; 3] = ["train", "dev", "test"];

    pub fn split(&self, name: &str) -> Option<&[InteractionRecord]> {
        match name {
            "train" => Some(&self.train),
            "dev" => Some(&self.dev),
            "test" => Some(&self.test),
            _ => None,
        }
    }

    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| ConnaError::io(dir, e))?;
        for name in Self::SPLITS {
            write_dataset(
                self.split(name).unwrap_or_default(),
                &dir.join(format!("{name}.jsonl")),
            )?;
        }
        Ok(())
    }

    pub fn read_dir(dir: &Path) -> Result<Self> {
        let read = |name: &str| read_dataset(&dir.join(format!("{name}.jsonl")));
        Ok(Self {
            train: read("train")?,
            dev: read("dev")?,
            test: read("test")?,
        })
    }
}

fn gaussian_rows(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..dim).map(|_| rng.sample(StandardNormal)).collect())
        .collect()
}

/// Draws the latent factors of every user and object.
pub fn generate_world(config: &DataConfig) -> Result<SyntheticWorld> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let k = config.latent_dim;
    Ok(SyntheticWorld {
        users: gaussian_rows(&mut rng, config.n_users, k),
        items: gaussian_rows(&mut rng, config.n_items, k),
        slogans: gaussian_rows(&mut rng, config.n_slogans, k),
        templates: gaussian_rows(&mut rng, config.n_templates, k),
        config: config.clone(),
    })
}

/// Samples `n` distinct entries of `pool`, each draw proportional to
/// `exp(score / temperature)` among those left. Temperature 0 takes the
/// highest scores, lowest index first on ties.
fn sample_distinct(
    rng: &mut ChaCha8Rng,
    pool: &[usize],
    score: impl Fn(usize) -> f64,
    temperature: f64,
    n: usize,
) -> Vec<usize> {
    let mut left: Vec<usize> = pool.to_vec();
    let mut out = Vec::with_capacity(n);
    while out.len() < n && !left.is_empty() {
        let pick = if temperature == 0.0 {
            let mut best = 0;
            for (i, &o) in left.iter().enumerate() {
                if score(o) > score(left[best]) {
                    best = i;
                }
            }
            best
        } else {
            let logits: Vec<f64> = left.iter().map(|&o| score(o) / temperature).collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            WeightedIndex::new(&weights)
                .expect("positive weights")
                .sample(rng)
        };
        out.push(left.remove(pick));
    }
    out
}

impl SyntheticWorld {
    fn vectors(&self, t: ObjectType) -> &[Vec<f64>] {
        match t {
            ObjectType::User => &self.users,
            ObjectType::Item => &self.items,
            ObjectType::Slogan => &self.slogans,
            ObjectType::Template => &self.templates,
        }
    }

    /// `scale · ⟨user, object⟩ / √latent_dim`.
    pub fn affinity(&self, user: usize, t: ObjectType, id: usize) -> f64 {
        let u = &self.users[user];
        let o = &self.vectors(t)[id];
        let dot: f64 = u.iter().zip(o).map(|(a, b)| a * b).sum();
        self.config.affinity_scale * dot / (self.config.latent_dim as f64).sqrt()
    }

    /// Object ids of type `t` sorted by decreasing affinity for `user`.
    pub fn ranked(&self, user: usize, t: ObjectType) -> Vec<usize> {
        let mut ids: Vec<usize> = (0..self.vectors(t).len()).collect();
        let aff: Vec<f64> = ids.iter().map(|&i| self.affinity(user, t, i)).collect();
        ids.sort_by(|&a, &b| aff[b].total_cmp(&aff[a]).then(a.cmp(&b)));
        ids
    }

    /// A fresh context for `user`: their top items plus random filler as
    /// history, and the full slogan and template sets in shuffled order.
    pub fn context(&self, user: usize, rng: &mut ChaCha8Rng) -> CandidateContext {
        let c = &self.config;
        let ranked = self.ranked(user, ObjectType::Item);
        let keep = c.history_len - c.history_noise;
        let mut history: Vec<usize> = ranked[..keep].to_vec();
        let mut rest: Vec<usize> = ranked[keep..].to_vec();
        rest.shuffle(rng);
        history.extend_from_slice(&rest[..c.history_noise]);
        history.shuffle(rng);
        let mut candidate_slogans: Vec<usize> = (0..c.n_slogans).collect();
        candidate_slogans.shuffle(rng);
        let mut candidate_templates: Vec<usize> = (0..c.n_templates).collect();
        candidate_templates.shuffle(rng);
        CandidateContext {
            user,
            history,
            candidate_slogans,
            candidate_templates,
        }
    }

    /// The clicked creative for a context.
    pub fn positive(&self, ctx: &CandidateContext, rng: &mut ChaCha8Rng) -> BundleCreative {
        let c = &self.config;
        let u = ctx.user;
        let tau = c.temperature;
        let mut items = sample_distinct(
            rng,
            &ctx.history,
            |i| self.affinity(u, ObjectType::Item, i),
            tau,
            c.items_per_creative,
        );
        if c.outside_history_prob > 0.0 && rng.gen_bool(c.outside_history_prob) {
            let outside: Vec<usize> = (0..c.n_items)
                .filter(|i| !ctx.history.contains(i))
                .collect();
            let pick = sample_distinct(
                rng,
                &outside,
                |i| self.affinity(u, ObjectType::Item, i),
                tau,
                1,
            );
            if let (Some(last), Some(&o)) = (items.last_mut(), pick.first()) {
                *last = o;
            }
        }
        let mut slogans = sample_distinct(
            rng,
            &ctx.candidate_slogans,
            |s| self.affinity(u, ObjectType::Slogan, s),
            tau,
            c.slogans_per_creative,
        );
        let template = sample_distinct(
            rng,
            &ctx.candidate_templates,
            |t| self.affinity(u, ObjectType::Template, t),
            tau,
            1,
        )[0];
        // within-type order carries no information
        items.shuffle(rng);
        slogans.shuffle(rng);
        BundleCreative {
            items,
            slogans,
            template,
        }
    }

    /// A shown-but-unclicked variant of `positive`: one slot swapped for a
    /// lower-affinity object of the same type, favouring near misses.
    fn negative(
        &self,
        ctx: &CandidateContext,
        positive: &BundleCreative,
        rng: &mut ChaCha8Rng,
    ) -> BundleCreative {
        let c = &self.config;
        let slot = rng.gen_range(0..c.shape().slots());
        let (t, current, pool): (ObjectType, &[usize], Vec<usize>) = if slot < c.items_per_creative
        {
            (ObjectType::Item, &positive.items, (0..c.n_items).collect())
        } else if slot < c.items_per_creative + c.slogans_per_creative {
            (
                ObjectType::Slogan,
                &positive.slogans,
                ctx.candidate_slogans.clone(),
            )
        } else {
            (
                ObjectType::Template,
                std::slice::from_ref(&positive.template),
                ctx.candidate_templates.clone(),
            )
        };
        let replaced = match t {
            ObjectType::Item => positive.items[slot],
            ObjectType::Slogan => positive.slogans[slot - c.items_per_creative],
            _ => positive.template,
        };
        let aff = |o: usize| self.affinity(ctx.user, t, o);
        let unused: Vec<usize> = pool.into_iter().filter(|o| !current.contains(o)).collect();
        let lower: Vec<usize> = unused
            .iter()
            .copied()
            .filter(|&o| aff(o) < aff(replaced))
            .collect();
        let choices = if lower.is_empty() { unused } else { lower };
        let sub = sample_distinct(rng, &choices, aff, c.negative_temperature, 1)[0];

        let mut neg = positive.clone();
        match t {
            ObjectType::Item => neg.items[slot] = sub,
            ObjectType::Slogan => neg.slogans[slot - c.items_per_creative] = sub,
            _ => neg.template = sub,
        }
        neg
    }

    fn record(&self, timestamp: u64, rng: &mut ChaCha8Rng) -> InteractionRecord {
        let user = rng.gen_range(0..self.config.n_users);
        let context = self.context(user, rng);
        let positive = self.positive(&context, rng);
        let n_neg = if self.config.max_negatives == 0 {
            0
        } else {
            rng.gen_range(1..=self.config.max_negatives)
        };
        let negatives = (0..n_neg)
            .map(|_| self.negative(&context, &positive, rng))
            .collect();
        InteractionRecord {
            timestamp,
            context,
            positive,
            negatives,
        }
    }
}

/// `n_records` interactions with increasing timestamps, split in timestamp
/// order by `split`.
pub fn sample_interactions(
    world: &SyntheticWorld,
    n_records: usize,
    split: [f64; 3],
) -> Result<Dataset> {
    let total: f64 = split.iter().sum();
    if split.iter().any(|r| *r < 0.0) || (total - 1.0).abs() > 1e-9 {
        return Err(ConnaError::config(
            "data.split",
            "ratios must be non-negative and sum to 1",
        ));
    }
    // separate stream from the latent factors
    let mut rng = ChaCha8Rng::seed_from_u64(world.config.seed ^ 0x005e_ed0f_1a7e);
    let mut records: Vec<InteractionRecord> = (0..n_records as u64)
        .map(|ts| world.record(ts, &mut rng))
        .collect();
    let n = n_records as f64;
    let n_train = (split[0] * n).round() as usize;
    let n_dev = (((split[0] + split[1]) * n).round() as usize)
        .max(n_train)
        .min(n_records)
        - n_train;
    let test = records.split_off(n_train + n_dev);
    let dev = records.split_off(n_train);
    Ok(Dataset {
        train: records,
        dev,
        test,
    })
}

/// World plus records for a data config.
pub fn generate_dataset(config: &DataConfig) -> Result<(SyntheticWorld, Dataset)> {
    let world = generate_world(config)?;
    let data = sample_interactions(&world, config.n_records, config.split)?;
    Ok((world, data))
}

#[derive(Serialize)]
struct LineOut<'a> {
    format_version: u32,
    #[serde(flatten)]
    record: &'a InteractionRecord,
}

#[derive(Deserialize)]
struct LineIn {
    format_version: u32,
    #[serde(flatten)]
    record: InteractionRecord,
}

/// One JSON object per line.
pub fn write_dataset(records: &[InteractionRecord], path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| ConnaError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for record in records {
        let line = serde_json::to_string(&LineOut {
            format_version: FORMAT_VERSION,
            record,
        })
        .map_err(|e| ConnaError::Data(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| ConnaError::io(path, e))?;
    }
    w.flush().map_err(|e| ConnaError::io(path, e))
}

pub fn read_dataset(path: &Path) -> Result<Vec<InteractionRecord>> {
    let file = fs::File::open(path).map_err(|e| ConnaError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| ConnaError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| ConnaError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let parsed: LineIn = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        if parsed.format_version != FORMAT_VERSION {
            return Err(parse_err(format!(
                "unsupported format_version {}",
                parsed.format_version
            )));
        }
        out.push(parsed.record);
    }
    Ok(out)
}
