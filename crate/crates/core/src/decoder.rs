//! Decoders.
//!
//! The non-autoregressive decoder feeds `B = I + S + 1` trigger embeddings
//! (type embedding plus a type-specific positional embedding) through
//! Pre-LN blocks with unmasked self-attention and cross-attention to the
//! encoder, producing every slot's distribution in a single pass.
//!
//! The autoregressive baseline shares the block structure but runs one
//! causal pass per generated object, feeding back each greedy choice and
//! scoring only the scheduled type's vocabulary at every step.

use crate::config::DecoderMode;
use crate::encoder::{self, EncoderOutput};
use crate::error::{ConnaError, Result};
use crate::model::{self, content_table, KeyValues, Model, TYPE_TABLE};
use crate::numeric::{AttnMask, Tape, Tensor, Var};
use crate::types::{BundleCreative, CandidateContext, CreativeShape, ObjectType, TypeOrdering};

/// Slot layout: items first, then slogans, then the template.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TriggerLayout {
    pub items: usize,
    pub slogans: usize,
}

impl TriggerLayout {
    pub fn new(shape: CreativeShape) -> Self {
        Self {
            items: shape.items,
            slogans: shape.slogans,
        }
    }

    /// `B`.
    pub fn len(&self) -> usize {
        self.items + self.slogans + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn slot_type(&self, j: usize) -> ObjectType {
        if j < self.items {
            ObjectType::Item
        } else if j < self.items + self.slogans {
            ObjectType::Slogan
        } else {
            ObjectType::Template
        }
    }

    pub fn slot_rank(&self, j: usize) -> usize {
        match self.slot_type(j) {
            ObjectType::Item => j,
            ObjectType::Slogan => j - self.items,
            _ => 0,
        }
    }
}

/// Trigger matrix (`B × d`): row `j` is `e^(type j) + P^(type j)[rank j]`.
pub fn build_triggers(
    layout: TriggerLayout,
    type_emb: &Tensor,
    pos_item: &Tensor,
    pos_slogan: &Tensor,
    pos_template: &Tensor,
) -> Result<Tensor> {
    let d = type_emb.cols();
    if type_emb.rows() != 4 {
        return Err(ConnaError::Shape(format!(
            "type embedding has {} rows, expected 4",
            type_emb.rows()
        )));
    }
    let checks = [
        (pos_item, layout.items, "item"),
        (pos_slogan, layout.slogans, "slogan"),
        (pos_template, 1, "template"),
    ];
    for (p, n, name) in checks {
        if n > 0 && (p.rows() != n || p.cols() != d) {
            return Err(ConnaError::Shape(format!(
                "{name} positional embedding is {}×{}, expected {n}×{d}",
                p.rows(),
                p.cols()
            )));
        }
    }
    let mut data = Vec::with_capacity(layout.len() * d);
    for j in 0..layout.len() {
        let t = layout.slot_type(j);
        let pos = match t {
            ObjectType::Item => pos_item,
            ObjectType::Slogan => pos_slogan,
            _ => pos_template,
        };
        let e = type_emb.row(t.index());
        let p = pos.row(layout.slot_rank(j));
        data.extend(e.iter().zip(p).map(|(a, b)| a + b));
    }
    Tensor::new(vec![layout.len(), d], data)
}

fn pos_table(t: ObjectType) -> &'static str {
    match t {
        ObjectType::Item => "dec.pos.item",
        ObjectType::Slogan => "dec.pos.slogan",
        _ => "dec.pos.template",
    }
}

/// Trigger embeddings on the tape.
pub fn triggers(tape: &mut Tape<'_>, layout: TriggerLayout) -> Var {
    let types: Vec<usize> = (0..layout.len())
        .map(|j| layout.slot_type(j).index())
        .collect();
    let type_table = tape.param_named(TYPE_TABLE);
    let e = tape.gather(type_table, &types);
    let mut parts = Vec::with_capacity(3);
    for (t, n) in [
        (ObjectType::Item, layout.items),
        (ObjectType::Slogan, layout.slogans),
        (ObjectType::Template, 1),
    ] {
        if n > 0 {
            let table = tape.param_named(pos_table(t));
            parts.push(tape.rows(table, 0, n));
        }
    }
    let p = tape.concat_rows(&parts);
    tape.add(e, p)
}

/// Per-slot log-probabilities on the tape, grouped by type.
#[derive(Clone, Copy, Debug)]
pub struct SlotLogProbs {
    /// `I × |O_i|`
    pub items: Var,
    /// `S × |O_s|`, absent when `S = 0`
    pub slogans: Option<Var>,
    /// `1 × |O_t|`
    pub template: Var,
}

/// Per-slot probability vectors over each slot's type vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct PositionDistributions {
    pub items: Vec<Vec<f64>>,
    pub slogans: Vec<Vec<f64>>,
    pub template: Vec<f64>,
}

impl PositionDistributions {
    pub fn from_tape(tape: &Tape<'_>, lp: &SlotLogProbs) -> Self {
        let rows = |v: Var| -> Vec<Vec<f64>> {
            let (r, _) = tape.shape(v);
            (0..r)
                .map(|i| tape.row(v, i).iter().map(|x| x.exp()).collect())
                .collect()
        };
        Self {
            items: rows(lp.items),
            slogans: lp.slogans.map(rows).unwrap_or_default(),
            template: rows(lp.template).remove(0),
        }
    }

    /// Every vector must be non-negative and sum to 1 within `tol`.
    pub fn validate(&self, tol: f64) -> Result<()> {
        let all = self
            .items
            .iter()
            .chain(&self.slogans)
            .chain(std::iter::once(&self.template));
        for v in all {
            let s: f64 = v.iter().sum();
            if v.is_empty() || v.iter().any(|p| !(*p >= 0.0)) || (s - 1.0).abs() > tol {
                return Err(ConnaError::NumericDomain(format!(
                    "not a probability vector (sum {s})"
                )));
            }
        }
        Ok(())
    }

    /// Places the distributions on a tape as log-probabilities.
    pub fn to_tape(&self, tape: &mut Tape<'_>) -> SlotLogProbs {
        let mut leaf = |rows: &[Vec<f64>]| {
            let c = rows[0].len();
            let data = rows.iter().flat_map(|r| r.iter().map(|p| p.ln())).collect();
            tape.input(rows.len(), c, data)
        };
        let items = leaf(&self.items);
        let slogans = (!self.slogans.is_empty()).then(|| leaf(&self.slogans));
        let template = leaf(std::slice::from_ref(&self.template));
        SlotLogProbs {
            items,
            slogans,
            template,
        }
    }
}

/// Cross-attention keys/values of the normalized encoder output, one pair
/// per decoder layer.
pub struct Memory {
    kv: Vec<KeyValues>,
    mask: AttnMask,
}

pub fn memory(tape: &mut Tape<'_>, model: &Model, enc: &EncoderOutput) -> Memory {
    let mem = model::layer_norm(tape, "dec.mem_ln", enc.hidden);
    let kv = (0..model.config.layers)
        .map(|l| model::project_kv(tape, &format!("dec.{l}.cross"), mem))
        .collect();
    Memory {
        kv,
        mask: enc.mask(),
    }
}

/// One full decoder pass over `x` (`n × d`); returns the output-normalized
/// hidden states.
fn decoder_pass(tape: &mut Tape<'_>, model: &Model, mut x: Var, mem: &Memory, causal: bool) -> Var {
    tape.note_decoder_pass();
    let heads = model.config.heads;
    let self_mask = if causal {
        AttnMask::causal()
    } else {
        AttnMask::none()
    };
    for l in 0..model.config.layers {
        let pre = format!("dec.{l}");
        let n = model::layer_norm(tape, &format!("{pre}.ln1"), x);
        let a = model::self_attention(tape, &format!("{pre}.self"), n, heads, &self_mask);
        x = tape.add(x, a);
        let n = model::layer_norm(tape, &format!("{pre}.ln2"), x);
        let c = model::attend(
            tape,
            &format!("{pre}.cross"),
            n,
            mem.kv[l],
            heads,
            &mem.mask,
        );
        x = tape.add(x, c);
        let n = model::layer_norm(tape, &format!("{pre}.ln3"), x);
        let f = model::feed_forward(tape, &format!("{pre}.ffn"), n);
        x = tape.add(x, f);
    }
    model::layer_norm(tape, "dec.out_ln", x)
}

/// Projects hidden rows onto one type's vocabulary and normalizes.
fn project(tape: &mut Tape<'_>, model: &Model, h: Var, t: ObjectType) -> Var {
    let logits = if model.config.tie_output {
        let table = tape.param_named(content_table(t));
        let n = model.dims.vocab.size(t);
        let w = tape.rows(table, 0, n);
        tape.matmul(h, w, true)
    } else {
        let w = tape.param_named(&format!("dec.out.{}.w", t.name()));
        tape.matmul(h, w, false)
    };
    let b = tape.param_named(&format!("dec.out.{}.b", t.name()));
    let logits = tape.add_row(logits, b);
    tape.log_softmax_rows(logits)
}

fn require_mode(model: &Model, mode: DecoderMode) -> Result<()> {
    if model.config.decoder == mode {
        Ok(())
    } else {
        Err(ConnaError::config(
            "model.decoder",
            format!("operation needs a {mode:?} model"),
        ))
    }
}

/// Single parallel pass producing all slot distributions.
pub fn decode_nar(tape: &mut Tape<'_>, model: &Model, enc: &EncoderOutput) -> Result<SlotLogProbs> {
    require_mode(model, DecoderMode::Nar)?;
    let layout = TriggerLayout::new(model.dims.shape);
    let mem = memory(tape, model, enc);
    let x = triggers(tape, layout);
    let h = decoder_pass(tape, model, x, &mem, false);
    let items = tape.rows(h, 0, layout.items);
    let items = project(tape, model, items, ObjectType::Item);
    let slogans = (layout.slogans > 0).then(|| {
        let s = tape.rows(h, layout.items, layout.slogans);
        project(tape, model, s, ObjectType::Slogan)
    });
    let t = tape.rows(h, layout.len() - 1, 1);
    let template = project(tape, model, t, ObjectType::Template);
    Ok(SlotLogProbs {
        items,
        slogans,
        template,
    })
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Per-slot argmax, lowest index on ties. Repeats across slots are kept.
pub fn generate(dists: &PositionDistributions) -> BundleCreative {
    BundleCreative {
        items: dists.items.iter().map(|d| argmax(d)).collect(),
        slogans: dists.slogans.iter().map(|d| argmax(d)).collect(),
        template: argmax(&dists.template),
    }
}

fn ar_token(tape: &mut Tape<'_>, t: ObjectType, id: usize) -> Var {
    let table = tape.param_named(content_table(t));
    let c = tape.gather(table, &[id]);
    let types = tape.param_named(TYPE_TABLE);
    let e = tape.gather(types, &[t.index()]);
    tape.add(c, e)
}

fn ar_inputs(tape: &mut Tape<'_>, tokens: &[Var]) -> Var {
    let x = tape.concat_rows(tokens);
    let pos = tape.param_named("dec.pos.seq");
    let p = tape.rows(pos, 0, tokens.len());
    tape.add(x, p)
}

/// Greedy autoregressive decoding: `B` causal passes, each over the whole
/// prefix. Returns the creative and the number of decoder passes.
pub fn decode_ar_baseline(
    tape: &mut Tape<'_>,
    model: &Model,
    enc: &EncoderOutput,
    ordering: TypeOrdering,
) -> Result<(BundleCreative, usize)> {
    require_mode(model, DecoderMode::ArBaseline)?;
    let shape = model.dims.shape;
    let schedule = ordering.schedule(shape);
    let passes_before = tape.decoder_passes();
    let mem = memory(tape, model, enc);
    let bos = tape.param_named("dec.bos");
    let mut tokens = vec![bos];
    let mut out = BundleCreative {
        items: vec![0; shape.items],
        slogans: vec![0; shape.slogans],
        template: 0,
    };
    for (step, &(t, rank)) in schedule.iter().enumerate() {
        let x = ar_inputs(tape, &tokens);
        let h = decoder_pass(tape, model, x, &mem, true);
        let last = tape.rows(h, step, 1);
        let lp = project(tape, model, last, t);
        let id = argmax(tape.value(lp));
        match t {
            ObjectType::Item => out.items[rank] = id,
            ObjectType::Slogan => out.slogans[rank] = id,
            _ => out.template = id,
        }
        if step + 1 < schedule.len() {
            tokens.push(ar_token(tape, t, id));
        }
    }
    Ok((out, tape.decoder_passes() - passes_before))
}

/// Teacher-forced pass of the autoregressive baseline over `target`.
///
/// Rows of the returned log-probabilities follow the target's own
/// within-type order, so the sequence cross-entropy is the independent XEnt
/// against `target`.
pub fn ar_teacher_forced(
    tape: &mut Tape<'_>,
    model: &Model,
    enc: &EncoderOutput,
    target: &BundleCreative,
    ordering: TypeOrdering,
) -> Result<SlotLogProbs> {
    require_mode(model, DecoderMode::ArBaseline)?;
    target.validate(model.dims.shape, &model.dims.vocab)?;
    let schedule = ordering.schedule(model.dims.shape);
    let mem = memory(tape, model, enc);
    let mut tokens = vec![tape.param_named("dec.bos")];
    for &(t, rank) in &schedule[..schedule.len() - 1] {
        tokens.push(ar_token(tape, t, target.ids(t)[rank]));
    }
    let x = ar_inputs(tape, &tokens);
    let h = decoder_pass(tape, model, x, &mem, true);

    let mut by_type = |t: ObjectType| -> Option<Var> {
        let start = schedule.iter().position(|&(s, _)| s == t)?;
        let n = schedule.iter().filter(|&&(s, _)| s == t).count();
        let rows = tape.rows(h, start, n);
        Some(project(tape, model, rows, t))
    };
    Ok(SlotLogProbs {
        items: by_type(ObjectType::Item).expect("at least one item"),
        slogans: by_type(ObjectType::Slogan),
        template: by_type(ObjectType::Template).expect("one template"),
    })
}

/// Result of generating one creative.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Generated {
    pub creative: BundleCreative,
    pub decoder_passes: usize,
}

impl Model {
    /// Slot distributions of the non-autoregressive decoder.
    pub fn distributions(&self, ctx: &CandidateContext) -> Result<PositionDistributions> {
        let mut tape = Tape::new(&self.params);
        let enc = encoder::encode(&mut tape, self, ctx)?;
        let lp = decode_nar(&mut tape, self, &enc)?;
        Ok(PositionDistributions::from_tape(&tape, &lp))
    }

    /// Argmax generation with whichever decoder the model was built with.
    pub fn generate(&self, ctx: &CandidateContext) -> Result<Generated> {
        let mut tape = Tape::new(&self.params);
        let enc = encoder::encode(&mut tape, self, ctx)?;
        match self.config.decoder {
            DecoderMode::Nar => {
                let lp = decode_nar(&mut tape, self, &enc)?;
                let creative = BundleCreative {
                    items: (0..self.dims.shape.items)
                        .map(|r| argmax(tape.row(lp.items, r)))
                        .collect(),
                    slogans: lp
                        .slogans
                        .map(|s| {
                            (0..self.dims.shape.slogans)
                                .map(|r| argmax(tape.row(s, r)))
                                .collect()
                        })
                        .unwrap_or_default(),
                    template: argmax(tape.value(lp.template)),
                };
                Ok(Generated {
                    creative,
                    decoder_passes: tape.decoder_passes(),
                })
            }
            DecoderMode::ArBaseline => {
                let (creative, passes) =
                    decode_ar_baseline(&mut tape, self, &enc, self.config.ar_ordering)?;
                Ok(Generated {
                    creative,
                    decoder_passes: passes,
                })
            }
        }
    }
}

/// Cross-attention probabilities of every decoder layer for one context
/// (`heads × B × M` per layer).
pub fn cross_attention_weights(model: &Model, ctx: &CandidateContext) -> Result<Vec<Vec<f64>>> {
    require_mode(model, DecoderMode::Nar)?;
    let mut tape = Tape::new(&model.params);
    let enc = encoder::encode(&mut tape, model, ctx)?;
    let start = tape.len();
    decode_nar(&mut tape, model, &enc)?;
    // attention nodes created after the encoder, every second one is cross
    let weights: Vec<Vec<f64>> = (start..tape.len())
        .filter_map(|i| {
            tape.attention_probs(crate::numeric::tape::var_at(i))
                .map(<[f64]>::to_vec)
        })
        .collect();
    Ok(weights.into_iter().skip(1).step_by(2).collect())
}
