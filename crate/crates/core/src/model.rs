//! Parameter layout and the Pre-LN transformer building blocks shared by
//! the encoder and both decoders.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{DecoderMode, ModelConfig};
use crate::error::{ConnaError, Result};
use crate::numeric::{AttnMask, ParamStore, Tape, Var};
use crate::types::{CreativeShape, ObjectType, Vocab};

pub(crate) const LN_EPS: f64 = 1e-5;

/// Problem dimensions a model is built for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub vocab: Vocab,
    pub shape: CreativeShape,
    /// `K`.
    pub history_len: usize,
}

/// Architecture plus learned parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub dims: ModelDims,
    pub params: ParamStore,
}

pub(crate) fn content_table(t: ObjectType) -> &'static str {
    match t {
        ObjectType::User => "emb.user",
        ObjectType::Item => "emb.item",
        ObjectType::Slogan => "emb.slogan",
        ObjectType::Template => "emb.template",
    }
}

pub(crate) const TYPE_TABLE: &str = "emb.type";

impl Model {
    /// Fresh model with every weight matrix and embedding drawn from
    /// `U[-1/√d, 1/√d]`, layer-norm gains at 1 and biases at 0.
    pub fn new(config: ModelConfig, dims: ModelDims, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let ffn = config.ffn_width();
        let bound = 1.0 / (d as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let v = dims.vocab;

        p.insert_uniform("emb.user", v.users, d, bound, &mut rng)?;
        // last row is the history pad object
        p.insert_uniform("emb.item", v.items + 1, d, bound, &mut rng)?;
        p.insert_uniform("emb.slogan", v.slogans, d, bound, &mut rng)?;
        p.insert_uniform("emb.template", v.templates, d, bound, &mut rng)?;
        p.insert_uniform(TYPE_TABLE, 4, d, bound, &mut rng)?;

        for l in 0..config.layers {
            let pre = format!("enc.{l}");
            register_ln(&mut p, &format!("{pre}.ln1"), d)?;
            register_attn(&mut p, &format!("{pre}.self"), d, bound, &mut rng)?;
            register_ln(&mut p, &format!("{pre}.ln2"), d)?;
            register_ffn(&mut p, &format!("{pre}.ffn"), d, ffn, bound, &mut rng)?;
        }

        register_ln(&mut p, "dec.mem_ln", d)?;
        let shape = dims.shape;
        match config.decoder {
            DecoderMode::Nar => {
                p.insert_uniform("dec.pos.item", shape.items, d, bound, &mut rng)?;
                p.insert_uniform("dec.pos.slogan", shape.slogans.max(1), d, bound, &mut rng)?;
                p.insert_uniform("dec.pos.template", 1, d, bound, &mut rng)?;
            }
            DecoderMode::ArBaseline => {
                p.insert_uniform("dec.bos", 1, d, bound, &mut rng)?;
                p.insert_uniform("dec.pos.seq", shape.slots(), d, bound, &mut rng)?;
            }
        }
        for l in 0..config.layers {
            let pre = format!("dec.{l}");
            register_ln(&mut p, &format!("{pre}.ln1"), d)?;
            register_attn(&mut p, &format!("{pre}.self"), d, bound, &mut rng)?;
            register_ln(&mut p, &format!("{pre}.ln2"), d)?;
            register_attn(&mut p, &format!("{pre}.cross"), d, bound, &mut rng)?;
            register_ln(&mut p, &format!("{pre}.ln3"), d)?;
            register_ffn(&mut p, &format!("{pre}.ffn"), d, ffn, bound, &mut rng)?;
        }
        register_ln(&mut p, "dec.out_ln", d)?;
        for t in [ObjectType::Item, ObjectType::Slogan, ObjectType::Template] {
            let n = v.size(t);
            if !config.tie_output {
                p.insert_uniform(format!("dec.out.{}.w", t.name()), d, n, bound, &mut rng)?;
            }
            p.insert_filled(format!("dec.out.{}.b", t.name()), 1, n, 0.0)?;
        }
        Ok(Self {
            config,
            dims,
            params: p,
        })
    }

    /// Wraps loaded parameters after checking they match the architecture.
    pub fn from_params(config: ModelConfig, dims: ModelDims, params: ParamStore) -> Result<Self> {
        let reference = Self::new(config.clone(), dims, 0)?;
        if reference.params.len() != params.len() {
            return Err(ConnaError::Checkpoint(format!(
                "expected {} parameters, found {}",
                reference.params.len(),
                params.len()
            )));
        }
        for (_, name, t) in reference.params.iter() {
            let got = params
                .by_name(name)
                .ok_or_else(|| ConnaError::Checkpoint(format!("missing parameter `{name}`")))?;
            if got.shape() != t.shape() {
                return Err(ConnaError::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    got.shape(),
                    t.shape()
                )));
            }
        }
        Ok(Self {
            config,
            dims,
            params,
        })
    }

    pub fn d_model(&self) -> usize {
        self.config.d_model
    }

    pub fn pad_item(&self) -> usize {
        self.dims.vocab.items
    }
}

fn register_ln(p: &mut ParamStore, name: &str, d: usize) -> Result<()> {
    p.insert_filled(format!("{name}.g"), 1, d, 1.0)?;
    p.insert_filled(format!("{name}.b"), 1, d, 0.0)?;
    Ok(())
}

fn register_attn(
    p: &mut ParamStore,
    name: &str,
    d: usize,
    bound: f64,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    for w in ["wq", "wk", "wv", "wo"] {
        p.insert_uniform(format!("{name}.{w}"), d, d, bound, rng)?;
    }
    p.insert_filled(format!("{name}.bo"), 1, d, 0.0)?;
    Ok(())
}

fn register_ffn(
    p: &mut ParamStore,
    name: &str,
    d: usize,
    h: usize,
    bound: f64,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    p.insert_uniform(format!("{name}.w1"), d, h, bound, rng)?;
    p.insert_filled(format!("{name}.b1"), 1, h, 0.0)?;
    p.insert_uniform(format!("{name}.w2"), h, d, bound, rng)?;
    p.insert_filled(format!("{name}.b2"), 1, d, 0.0)?;
    Ok(())
}

// ---- graph blocks ---------------------------------------------------------

pub(crate) fn layer_norm(tape: &mut Tape<'_>, name: &str, x: Var) -> Var {
    let g = tape.param_named(&format!("{name}.g"));
    let b = tape.param_named(&format!("{name}.b"));
    tape.layer_norm(x, g, b, LN_EPS)
}

/// Projected keys and values of an attention source.
#[derive(Clone, Copy, Debug)]
pub(crate) struct KeyValues {
    pub k: Var,
    pub v: Var,
}

pub(crate) fn project_kv(tape: &mut Tape<'_>, name: &str, source: Var) -> KeyValues {
    let wk = tape.param_named(&format!("{name}.wk"));
    let wv = tape.param_named(&format!("{name}.wv"));
    KeyValues {
        k: tape.matmul(source, wk, false),
        v: tape.matmul(source, wv, false),
    }
}

/// Multi-head attention of `queries` over precomputed `kv`, followed by the
/// output projection.
pub(crate) fn attend(
    tape: &mut Tape<'_>,
    name: &str,
    queries: Var,
    kv: KeyValues,
    heads: usize,
    mask: &AttnMask,
) -> Var {
    let wq = tape.param_named(&format!("{name}.wq"));
    let wo = tape.param_named(&format!("{name}.wo"));
    let bo = tape.param_named(&format!("{name}.bo"));
    let q = tape.matmul(queries, wq, false);
    let a = tape.attention(q, kv.k, kv.v, heads, mask);
    let o = tape.matmul(a, wo, false);
    tape.add_row(o, bo)
}

pub(crate) fn self_attention(
    tape: &mut Tape<'_>,
    name: &str,
    x: Var,
    heads: usize,
    mask: &AttnMask,
) -> Var {
    let kv = project_kv(tape, name, x);
    attend(tape, name, x, kv, heads, mask)
}

pub(crate) fn feed_forward(tape: &mut Tape<'_>, name: &str, x: Var) -> Var {
    let w1 = tape.param_named(&format!("{name}.w1"));
    let b1 = tape.param_named(&format!("{name}.b1"));
    let w2 = tape.param_named(&format!("{name}.w2"));
    let b2 = tape.param_named(&format!("{name}.b2"));
    let h = tape.matmul(x, w1, false);
    let h = tape.add_row(h, b1);
    let h = tape.gelu(h);
    let o = tape.matmul(h, w2, false);
    tape.add_row(o, b2)
}
