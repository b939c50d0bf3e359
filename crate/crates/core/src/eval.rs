//! Quality metrics, evaluation over a split and the decode-latency
//! benchmark.

use std::collections::HashSet;
use std::fmt;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::DecoderMode;
use crate::datagen::InteractionRecord;
use crate::decoder::{decode_ar_baseline, decode_nar};
use crate::encoder;
use crate::error::{ConnaError, Result};
use crate::model::Model;
use crate::numeric::Tape;
use crate::types::{BundleCreative, CandidateContext, CreativeShape, Vocab};

fn overlap(gold: &[usize], gen: &[usize]) -> usize {
    let gold: HashSet<_> = gold.iter().collect();
    gen.iter()
        .collect::<HashSet<_>>()
        .intersection(&gold)
        .count()
}

/// Type-weighted set overlap between a gold and a generated creative.
/// Duplicates in `gen` count once.
pub fn hit_ratio(gold: &BundleCreative, gen: &BundleCreative, shape: CreativeShape) -> Result<f64> {
    for c in [gold, gen] {
        if c.items.len() != shape.items || c.slogans.len() != shape.slogans {
            return Err(ConnaError::Shape(format!(
                "creative has {} items and {} slogans, expected {} and {}",
                c.items.len(),
                c.slogans.len(),
                shape.items,
                shape.slogans
            )));
        }
    }
    let b = shape.slots() as f64;
    // the type weights I/B and S/B cancel the per-type denominators
    let hits = overlap(&gold.items, &gen.items)
        + overlap(&gold.slogans, &gen.slogans)
        + usize::from(gold.template == gen.template);
    Ok(hits as f64 / b)
}

/// Fraction of ordered pairs of generated items that differ; 1 when fewer
/// than two items.
pub fn diversity(items: &[usize]) -> f64 {
    let n = items.len();
    if n < 2 {
        return 1.0;
    }
    let mut unequal = 0usize;
    for (j, a) in items.iter().enumerate() {
        for (k, b) in items.iter().enumerate() {
            if j != k && a != b {
                unequal += 1;
            }
        }
    }
    unequal as f64 / (n * (n - 1)) as f64
}

/// Expected HitRatio of a generator drawing every slot uniformly and
/// independently from its type's vocabulary.
pub fn chance_hit_ratio(vocab: &Vocab, shape: CreativeShape) -> f64 {
    // each gold object is hit by at least one of n independent draws
    let hits = |n: usize, v: usize| n as f64 * (1.0 - (1.0 - 1.0 / v as f64).powi(n as i32));
    let b = shape.slots() as f64;
    (hits(shape.items, vocab.items)
        + hits(shape.slogans, vocab.slogans)
        + 1.0 / vocab.templates as f64)
        / b
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordMetrics {
    pub timestamp: u64,
    pub user: usize,
    pub hit_ratio: f64,
    pub diversity: f64,
    pub generated: BundleCreative,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub records: usize,
    pub hit_ratio: f64,
    pub diversity: f64,
    pub per_record: Vec<RecordMetrics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency: Option<BenchReport>,
}

/// Argmax generation over every record, averaged.
pub fn evaluate(model: &Model, records: &[InteractionRecord]) -> Result<EvalReport> {
    if records.is_empty() {
        return Err(ConnaError::config("eval", "test split is empty"));
    }
    let shape = model.dims.shape;
    let per_record = records
        .iter()
        .map(|r| {
            let gen = model.generate(&r.context)?.creative;
            Ok(RecordMetrics {
                timestamp: r.timestamp,
                user: r.context.user,
                hit_ratio: hit_ratio(&r.positive, &gen, shape)?,
                diversity: diversity(&gen.items),
                generated: gen,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let n = per_record.len() as f64;
    Ok(EvalReport {
        records: per_record.len(),
        hit_ratio: per_record.iter().map(|m| m.hit_ratio).sum::<f64>() / n,
        diversity: per_record.iter().map(|m| m.diversity).sum::<f64>() / n,
        per_record,
        latency: None,
    })
}

/// Mean HitRatio only, for model selection.
pub fn mean_hit_ratio(model: &Model, records: &[InteractionRecord]) -> Result<f64> {
    evaluate(model, records).map(|r| r.hit_ratio)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub median_ms: f64,
    pub p95_ms: f64,
    /// Decoder forward passes per creative.
    pub passes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub nar: LatencyStats,
    pub ar: LatencyStats,
    /// AR median over NAR median.
    pub speedup: f64,
    pub runs: usize,
    pub include_encoder: bool,
}

impl fmt::Display for BenchReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<8} {:>10} {:>10} {:>7} {:>8}",
            "model", "median_ms", "p95_ms", "passes", "speedup"
        )?;
        writeln!(
            f,
            "{:<8} {:>10.3} {:>10.3} {:>7} {:>7.2}x",
            "nar", self.nar.median_ms, self.nar.p95_ms, self.nar.passes, self.speedup
        )?;
        write!(
            f,
            "{:<8} {:>10.3} {:>10.3} {:>7} {:>7.2}x",
            "ar", self.ar.median_ms, self.ar.p95_ms, self.ar.passes, 1.0
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BenchOptions {
    pub warmup: usize,
    pub runs: usize,
    /// Time the shared encoder too.
    pub include_encoder: bool,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            warmup: 5,
            runs: 30,
            include_encoder: false,
        }
    }
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

/// Wall-clock time of one single-creative decode, in milliseconds, and the
/// decoder passes it took.
fn time_decode(
    model: &Model,
    ctx: &CandidateContext,
    include_encoder: bool,
) -> Result<(f64, usize)> {
    let mut tape = Tape::new(&model.params);
    let mut start = Instant::now();
    let enc = encoder::encode(&mut tape, model, ctx)?;
    if !include_encoder {
        start = Instant::now();
    }
    match model.config.decoder {
        DecoderMode::Nar => {
            let lp = decode_nar(&mut tape, model, &enc)?;
            let gen = crate::decoder::generate(&crate::decoder::PositionDistributions::from_tape(
                &tape, &lp,
            ));
            std::hint::black_box(gen);
        }
        DecoderMode::ArBaseline => {
            let out = decode_ar_baseline(&mut tape, model, &enc, model.config.ar_ordering)?;
            std::hint::black_box(out);
        }
    }
    Ok((start.elapsed().as_secs_f64() * 1e3, tape.decoder_passes()))
}

fn measure(
    model: &Model,
    contexts: &[CandidateContext],
    opts: BenchOptions,
) -> Result<LatencyStats> {
    let mut times = Vec::with_capacity(opts.runs);
    let mut passes = 0;
    for i in 0..opts.warmup + opts.runs {
        let (ms, p) = time_decode(model, &contexts[i % contexts.len()], opts.include_encoder)?;
        passes = p;
        if i >= opts.warmup {
            times.push(ms);
        }
    }
    times.sort_by(f64::total_cmp);
    Ok(LatencyStats {
        median_ms: percentile(&times, 0.5),
        p95_ms: percentile(&times, 0.95),
        passes,
    })
}

/// Single-creative decode latency of a non-autoregressive model against an
/// autoregressive baseline. Runs alternate between the two models so drift
/// affects both alike.
pub fn bench_decode(
    nar: &Model,
    ar: &Model,
    contexts: &[CandidateContext],
    opts: BenchOptions,
) -> Result<BenchReport> {
    if nar.config.decoder != DecoderMode::Nar || ar.config.decoder != DecoderMode::ArBaseline {
        return Err(ConnaError::config(
            "model.decoder",
            "bench needs one nar and one ar-baseline model",
        ));
    }
    if contexts.is_empty() {
        return Err(ConnaError::config("bench", "no contexts to decode"));
    }
    if opts.runs < 30 {
        return Err(ConnaError::config(
            "bench.runs",
            "at least 30 measured runs are required",
        ));
    }
    for i in 0..opts.warmup {
        time_decode(nar, &contexts[i % contexts.len()], opts.include_encoder)?;
        time_decode(ar, &contexts[i % contexts.len()], opts.include_encoder)?;
    }
    let mut nar_t = Vec::with_capacity(opts.runs);
    let mut ar_t = Vec::with_capacity(opts.runs);
    let (mut nar_p, mut ar_p) = (0, 0);
    for i in 0..opts.runs {
        let ctx = &contexts[i % contexts.len()];
        let (t, p) = time_decode(nar, ctx, opts.include_encoder)?;
        nar_t.push(t);
        nar_p = p;
        let (t, p) = time_decode(ar, ctx, opts.include_encoder)?;
        ar_t.push(t);
        ar_p = p;
    }
    let stats = |mut v: Vec<f64>, passes| {
        v.sort_by(f64::total_cmp);
        LatencyStats {
            median_ms: percentile(&v, 0.5),
            p95_ms: percentile(&v, 0.95),
            passes,
        }
    };
    let nar = stats(nar_t, nar_p);
    let ar = stats(ar_t, ar_p);
    Ok(BenchReport {
        speedup: ar.median_ms / nar.median_ms,
        nar,
        ar,
        runs: opts.runs,
        include_encoder: opts.include_encoder,
    })
}

/// Latency of one model alone.
pub fn bench_single(
    model: &Model,
    contexts: &[CandidateContext],
    opts: BenchOptions,
) -> Result<LatencyStats> {
    if contexts.is_empty() {
        return Err(ConnaError::config("bench", "no contexts to decode"));
    }
    measure(model, contexts, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const SHAPE: CreativeShape = CreativeShape {
        items: 3,
        slogans: 2,
    };

    fn c(items: &[usize], slogans: &[usize], template: usize) -> BundleCreative {
        BundleCreative {
            items: items.to_vec(),
            slogans: slogans.to_vec(),
            template,
        }
    }

    #[test]
    fn hit_ratio_examples() {
        let gold = c(&[1, 2, 3], &[4, 5], 6);
        assert_eq!(
            hit_ratio(&gold, &c(&[3, 1, 2], &[5, 4], 6), SHAPE).unwrap(),
            1.0
        );
        assert_eq!(
            hit_ratio(&gold, &c(&[7, 8, 9], &[0, 1], 0), SHAPE).unwrap(),
            0.0
        );
        let hr = hit_ratio(&gold, &c(&[1, 2, 9], &[4, 0], 6), SHAPE).unwrap();
        let expect = (3.0 / 6.0) * (2.0 / 3.0) + (2.0 / 6.0) * (1.0 / 2.0) + 1.0 / 6.0;
        assert!((hr - expect).abs() < 1e-12);
        assert!((hr - 2.0 / 3.0).abs() < 1e-12);
        // duplicates count once
        let dup = hit_ratio(&gold, &c(&[1, 1, 1], &[4, 4], 0), SHAPE).unwrap();
        assert!((dup - 2.0 / 6.0).abs() < 1e-12);
        assert!(matches!(
            hit_ratio(&gold, &c(&[1], &[4, 5], 6), SHAPE),
            Err(ConnaError::Shape(_))
        ));
    }

    #[test]
    fn diversity_examples() {
        assert_eq!(diversity(&[1, 2, 3]), 1.0);
        assert_eq!(diversity(&[4, 4, 4]), 0.0);
        assert!((diversity(&[0, 0, 1]) - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(diversity(&[5]), 1.0);
    }

    #[test]
    fn chance_level_matches_enumeration() {
        // tiny vocabularies: enumerate every generated creative
        let vocab = Vocab {
            users: 1,
            items: 4,
            slogans: 3,
            templates: 2,
        };
        let shape = CreativeShape {
            items: 2,
            slogans: 1,
        };
        let gold = c(&[0, 1], &[2], 1);
        let mut total = 0.0;
        let mut count = 0.0;
        for a in 0..4 {
            for b in 0..4 {
                for s in 0..3 {
                    for t in 0..2 {
                        total += hit_ratio(&gold, &c(&[a, b], &[s], t), shape).unwrap();
                        count += 1.0;
                    }
                }
            }
        }
        assert!((chance_hit_ratio(&vocab, shape) - total / count).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn hit_ratio_bounds_and_symmetry(
            gi in prop::collection::vec(0usize..6, 3),
            gs in prop::collection::vec(0usize..4, 2),
            gt in 0usize..3,
            ei in prop::collection::vec(0usize..6, 3),
            es in prop::collection::vec(0usize..4, 2),
            et in 0usize..3,
            rot in 0usize..3,
        ) {
            let gold = c(&gi, &gs, gt);
            let gen = c(&ei, &es, et);
            let hr = hit_ratio(&gold, &gen, SHAPE).unwrap();
            prop_assert!((0.0..=1.0).contains(&hr));
            let mut g2 = gen.clone();
            g2.items.rotate_left(rot);
            g2.slogans.reverse();
            prop_assert_eq!(hit_ratio(&gold, &g2, SHAPE).unwrap(), hr);
            let mut gold2 = gold.clone();
            gold2.items.rotate_right(rot);
            prop_assert_eq!(hit_ratio(&gold2, &gen, SHAPE).unwrap(), hr);
            let d = diversity(&ei);
            prop_assert!((0.0..=1.0).contains(&d));
            let mut sorted = ei.clone();
            sorted.sort();
            prop_assert_eq!(diversity(&sorted), d);
        }
    }
}
