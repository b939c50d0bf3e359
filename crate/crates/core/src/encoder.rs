//! Type-aware encoder.
//!
//! The input is the unordered collection `(user; history; slogans;
//! templates)`. Each column is its content embedding plus the embedding of
//! its object type; there is no positional term, so the encoder is
//! equivariant to any reordering of same-type candidates.

use std::ops::Range;

use crate::error::Result;
use crate::model::{self, content_table, Model, TYPE_TABLE};
use crate::numeric::{AttnMask, Tape, Tensor, Var};
use crate::types::{CandidateContext, ObjectType};

/// Column ranges of each object type in the encoder sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segments {
    pub user: usize,
    pub history: Range<usize>,
    pub slogans: Range<usize>,
    pub templates: Range<usize>,
}

impl Segments {
    pub fn new(history_len: usize, slogans: usize, templates: usize) -> Self {
        let h = 1..1 + history_len;
        let s = h.end..h.end + slogans;
        let t = s.end..s.end + templates;
        Self {
            user: 0,
            history: h,
            slogans: s,
            templates: t,
        }
    }

    /// `M = 1 + K + |O_s| + |O_t|`.
    pub fn len(&self) -> usize {
        self.templates.end
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Encoder representations on a tape: one row per input object.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    pub hidden: Var,
    pub segments: Segments,
    /// `false` at padded history slots.
    pub key_valid: Vec<bool>,
}

impl EncoderOutput {
    pub fn mask(&self) -> AttnMask {
        if self.key_valid.iter().all(|&v| v) {
            AttnMask::none()
        } else {
            AttnMask::keys(self.key_valid.clone())
        }
    }
}

/// Content plus type embedding for every input object (`M × d`).
pub fn embed_input(
    tape: &mut Tape<'_>,
    model: &Model,
    ctx: &CandidateContext,
) -> Result<(Var, Segments, Vec<bool>)> {
    let k = model.dims.history_len;
    ctx.validate(&model.dims.vocab, k)?;
    let segments = Segments::new(
        k,
        ctx.candidate_slogans.len(),
        ctx.candidate_templates.len(),
    );

    let mut history = ctx.history.clone();
    let mut key_valid = vec![true; segments.len()];
    for slot in history.len()..k {
        history.push(model.pad_item());
        key_valid[segments.history.start + slot] = false;
    }

    let mut parts = Vec::with_capacity(4);
    let table = tape.param_named(content_table(ObjectType::User));
    parts.push(tape.gather(table, &[ctx.user]));
    if k > 0 {
        let table = tape.param_named(content_table(ObjectType::Item));
        parts.push(tape.gather(table, &history));
    }
    let table = tape.param_named(content_table(ObjectType::Slogan));
    parts.push(tape.gather(table, &ctx.candidate_slogans));
    let table = tape.param_named(content_table(ObjectType::Template));
    parts.push(tape.gather(table, &ctx.candidate_templates));
    let content = tape.concat_rows(&parts);

    let mut types = vec![ObjectType::User.index()];
    types.extend(std::iter::repeat_n(ObjectType::Item.index(), k));
    types.extend(std::iter::repeat_n(ObjectType::Slogan.index(), segments.slogans.len()));
    types.extend(std::iter::repeat_n(ObjectType::Template.index(), segments.templates.len()));
    let type_table = tape.param_named(TYPE_TABLE);
    let type_emb = tape.gather(type_table, &types);

    Ok((tape.add(content, type_emb), segments, key_valid))
}

/// `L` Pre-LN self-attention blocks over the embedded input. The final
/// layer's output is returned without a closing normalization.
pub fn encode(tape: &mut Tape<'_>, model: &Model, ctx: &CandidateContext) -> Result<EncoderOutput> {
    let (mut x, segments, key_valid) = embed_input(tape, model, ctx)?;
    let mut out = EncoderOutput {
        hidden: x,
        segments,
        key_valid,
    };
    let mask = out.mask();
    let heads = model.config.heads;
    for l in 0..model.config.layers {
        let pre = format!("enc.{l}");
        let n = model::layer_norm(tape, &format!("{pre}.ln1"), x);
        let a = model::self_attention(tape, &format!("{pre}.self"), n, heads, &mask);
        x = tape.add(x, a);
        let n = model::layer_norm(tape, &format!("{pre}.ln2"), x);
        let f = model::feed_forward(tape, &format!("{pre}.ffn"), n);
        x = tape.add(x, f);
    }
    out.hidden = x;
    Ok(out)
}

/// Value-level encoding of one context (`M × d`).
pub fn encode_values(model: &Model, ctx: &CandidateContext) -> Result<Tensor> {
    let mut tape = Tape::new(&model.params);
    let out = encode(&mut tape, model, ctx)?;
    let (r, c) = tape.shape(out.hidden);
    Tensor::new(vec![r, c], tape.value(out.hidden).to_vec())
}

/// Value-level embedding layer output (`M × d`).
pub fn embed_values(model: &Model, ctx: &CandidateContext) -> Result<Tensor> {
    let mut tape = Tape::new(&model.params);
    let (x, _, _) = embed_input(&mut tape, model, ctx)?;
    let (r, c) = tape.shape(x);
    Tensor::new(vec![r, c], tape.value(x).to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::error::ConnaError;
    use crate::model::ModelDims;
    use crate::types::{CreativeShape, Vocab};

    fn dims() -> ModelDims {
        ModelDims {
            vocab: Vocab {
                users: 3,
                items: 12,
                slogans: 6,
                templates: 4,
            },
            shape: CreativeShape {
                items: 2,
                slogans: 2,
            },
            history_len: 5,
        }
    }

    fn ctx() -> CandidateContext {
        CandidateContext {
            user: 1,
            history: vec![3, 7, 7, 0, 11],
            candidate_slogans: vec![0, 1, 2, 3, 4, 5],
            candidate_templates: vec![3, 0, 2],
        }
    }

    fn model(layers: usize) -> Model {
        let cfg = ModelConfig {
            d_model: 8,
            heads: 2,
            layers,
            ..Default::default()
        };
        Model::new(cfg, dims(), 11).unwrap()
    }

    #[test]
    fn zero_content_leaves_type_embeddings() {
        let mut m = model(1);
        for t in ["emb.user", "emb.item", "emb.slogan", "emb.template"] {
            let id = m.params.expect_id(t);
            m.params
                .get_mut(id)
                .data_mut()
                .iter_mut()
                .for_each(|x| *x = 0.0);
        }
        let e = embed_values(&m, &ctx()).unwrap();
        let types = m.params.by_name(TYPE_TABLE).unwrap().clone();
        let seg = Segments::new(5, 6, 3);
        assert_eq!(e.row(0), types.row(0));
        for c in seg.history.clone() {
            assert_eq!(e.row(c), types.row(1));
        }
        assert_eq!(e.row(seg.slogans.start), types.row(2));
        assert_eq!(e.row(seg.templates.end - 1), types.row(3));
    }

    #[test]
    fn user_column_is_vector_sum() {
        let dims2 = ModelDims {
            vocab: Vocab {
                users: 1,
                ..dims().vocab
            },
            ..dims()
        };
        let cfg = ModelConfig {
            d_model: 2,
            heads: 1,
            layers: 0,
            ..Default::default()
        };
        let mut m = Model::new(cfg, dims2, 0).unwrap();
        let u = m.params.expect_id("emb.user");
        m.params.get_mut(u).data_mut().copy_from_slice(&[1.0, 0.0]);
        let t = m.params.expect_id(TYPE_TABLE);
        m.params.get_mut(t).data_mut()[..2].copy_from_slice(&[0.0, 1.0]);
        let c = CandidateContext { user: 0, ..ctx() };
        assert_eq!(embed_values(&m, &c).unwrap().row(0), &[1.0, 1.0]);
    }

    #[test]
    fn repeated_history_items_share_columns() {
        let e = embed_values(&model(2), &ctx()).unwrap();
        assert_eq!(e.row(2), e.row(3));
    }

    #[test]
    fn zero_layers_is_embedding() {
        let m = model(0);
        assert_eq!(
            encode_values(&m, &ctx()).unwrap(),
            embed_values(&m, &ctx()).unwrap()
        );
    }

    #[test]
    fn output_width_is_one_plus_k_plus_candidates() {
        let h = encode_values(&model(2), &ctx()).unwrap();
        assert_eq!(h.shape(), &[1 + 5 + 6 + 3, 8]);
        assert!(h.data().iter().all(|x| x.is_finite()));
    }

    #[test]
    fn deterministic() {
        let m = model(3);
        let a = encode_values(&m, &ctx()).unwrap();
        let b = encode_values(&m, &ctx()).unwrap();
        assert!(a
            .data()
            .iter()
            .zip(b.data())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn short_history_is_padded_and_masked() {
        let m = model(2);
        let short = CandidateContext {
            history: vec![3, 7],
            ..ctx()
        };
        let mut tape = Tape::new(&m.params);
        let out = encode(&mut tape, &m, &short).unwrap();
        assert_eq!(out.key_valid.iter().filter(|v| !**v).count(), 3);
        let first = tape.row(out.hidden, 0).to_vec();
        drop(tape);
        // padded slots carry no information into real columns
        let mut m2 = m.clone();
        let table = m2.params.expect_id("emb.item");
        let pad = m2.pad_item();
        m2.params.get_mut(table).data_mut()[pad * 8..]
            .iter_mut()
            .for_each(|x| *x += 3.0);
        let again = encode_values(&m2, &short).unwrap();
        assert_eq!(first.as_slice(), again.row(0));
    }

    #[test]
    fn out_of_range_ids_rejected() {
        let m = model(1);
        let bad = CandidateContext {
            history: vec![12],
            ..ctx()
        };
        assert!(matches!(
            encode_values(&m, &bad),
            Err(ConnaError::Vocabulary { kind: "item", .. })
        ));
        let bad = CandidateContext { user: 3, ..ctx() };
        assert!(matches!(
            encode_values(&m, &bad),
            Err(ConnaError::Vocabulary { kind: "user", .. })
        ));
    }

    #[test]
    fn slogan_permutation_permutes_outputs() {
        let m = model(3);
        let base = ctx();
        let perm = [4, 2, 5, 0, 3, 1];
        let permuted = CandidateContext {
            candidate_slogans: perm.iter().map(|&i| base.candidate_slogans[i]).collect(),
            ..base.clone()
        };
        let a = encode_values(&m, &base).unwrap();
        let b = encode_values(&m, &permuted).unwrap();
        let seg = Segments::new(5, 6, 3);
        for (new_pos, &old_pos) in perm.iter().enumerate() {
            let ra = a.row(seg.slogans.start + old_pos);
            let rb = b.row(seg.slogans.start + new_pos);
            ra.iter()
                .zip(rb)
                .for_each(|(x, y)| assert!((x - y).abs() < 1e-9));
        }
        for c in (0..seg.slogans.start).chain(seg.templates.clone()) {
            a.row(c)
                .iter()
                .zip(b.row(c))
                .for_each(|(x, y)| assert!((x - y).abs() < 1e-9));
        }
    }
}
