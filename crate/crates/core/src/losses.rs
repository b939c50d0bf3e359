//! Training objectives over per-slot log-probabilities.
//!
//! Tape-level functions build differentiable losses from a
//! [`SlotLogProbs`]; the `*_value` variants score plain
//! [`PositionDistributions`].

use serde::Serialize;

use crate::config::Objective;
use crate::decoder::{PositionDistributions, SlotLogProbs};
use crate::error::{ConnaError, Result};
use crate::matching::{brute_force_assignment, hungarian_min_assignment, CostMatrix};
use crate::numeric::{ParamStore, Tape, Var};
use crate::types::{BundleCreative, ObjectType};

/// Stand-in matching cost for a target with zero predicted probability.
const INFINITE_COST: f64 = 1e300;

/// Scalar loss terms of one record plus the matched permutations.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub l_item_set: f64,
    pub l_slogan_set: f64,
    pub l_template: f64,
    pub l_set_total: f64,
    pub l_contrastive: f64,
    pub l_total: f64,
    /// Weight actually applied to `l_contrastive` in `l_total`.
    pub lambda: f64,
    /// `item_perm[j]` is the target item index matched to item slot `j`.
    pub item_perm: Vec<usize>,
    pub slogan_perm: Vec<usize>,
}

/// Set loss of one creative on a tape.
#[derive(Clone, Debug)]
pub struct SetLoss {
    pub total: Var,
    pub items: f64,
    pub slogans: f64,
    pub template: f64,
    pub item_perm: Vec<usize>,
    pub slogan_perm: Vec<usize>,
}

fn check_ids(tape: &Tape<'_>, lp: Var, t: ObjectType, targets: &[usize]) -> Result<()> {
    let (rows, size) = tape.shape(lp);
    if rows != targets.len() {
        return Err(ConnaError::Shape(format!(
            "{} {} slots but {} targets",
            rows,
            t.name(),
            targets.len()
        )));
    }
    match targets.iter().find(|&&id| id >= size) {
        Some(&id) => Err(ConnaError::Vocabulary {
            kind: t.name(),
            id,
            size,
        }),
        None => Ok(()),
    }
}

/// `Σ_j −log p_j(targets[j])`, slots scored against targets in order.
fn ordered_xent(tape: &mut Tape<'_>, lp: Var, t: ObjectType, targets: &[usize]) -> Result<Var> {
    check_ids(tape, lp, t, targets)?;
    let picks = targets
        .iter()
        .enumerate()
        .map(|(j, &id)| (j, id, -1.0))
        .collect();
    Ok(tape.pick(lp, picks))
}

fn type_rows(lp: &SlotLogProbs, t: ObjectType) -> Option<Var> {
    match t {
        ObjectType::Item => Some(lp.items),
        ObjectType::Slogan => lp.slogans,
        ObjectType::Template => Some(lp.template),
        ObjectType::User => None,
    }
}

fn xent_of_type(
    tape: &mut Tape<'_>,
    lp: &SlotLogProbs,
    t: ObjectType,
    ids: &[usize],
) -> Result<Option<Var>> {
    match type_rows(lp, t) {
        Some(v) => ordered_xent(tape, v, t, ids).map(Some),
        None if ids.is_empty() => Ok(None),
        None => Err(ConnaError::Shape(format!(
            "no {} slots for {} targets",
            t.name(),
            ids.len()
        ))),
    }
}

fn sum_terms(tape: &mut Tape<'_>, terms: &[Var]) -> Var {
    match terms.split_first() {
        None => tape.constant(0.0),
        Some((&first, rest)) => rest.iter().fold(first, |acc, &t| tape.add(acc, t)),
    }
}

/// Independent cross-entropy: every slot against the target in its stored
/// order.
pub fn xent_independent(
    tape: &mut Tape<'_>,
    lp: &SlotLogProbs,
    target: &BundleCreative,
) -> Result<Var> {
    let mut terms = Vec::with_capacity(3);
    for t in [ObjectType::Item, ObjectType::Slogan, ObjectType::Template] {
        terms.extend(xent_of_type(tape, lp, t, &target.ids(t))?);
    }
    Ok(sum_terms(tape, &terms))
}

/// Matching cost matrix `C[j][k] = −log p_j(targets[k])`.
fn cost_matrix(tape: &Tape<'_>, lp: Var, targets: &[usize]) -> Result<CostMatrix> {
    let n = targets.len();
    let mut costs = Vec::with_capacity(n * n);
    for j in 0..n {
        let row = tape.row(lp, j);
        for &id in targets {
            let c = -row[id];
            if c.is_nan() {
                return Err(ConnaError::NumericDomain("NaN log-probability".into()));
            }
            costs.push(c.min(INFINITE_COST));
        }
    }
    CostMatrix::from_flat(n, costs)
}

fn check_distinct(t: ObjectType, targets: &[usize]) -> Result<()> {
    for (k, id) in targets.iter().enumerate() {
        if targets[..k].contains(id) {
            return Err(ConnaError::Data(format!(
                "target {} {id} appears more than once",
                t.name()
            )));
        }
    }
    Ok(())
}

/// Minimal-XEnt matching of one type's slots to its targets. The returned
/// loss is differentiable with the permutation held fixed.
pub fn set_loss_for_type(
    tape: &mut Tape<'_>,
    lp: Var,
    t: ObjectType,
    targets: &[usize],
) -> Result<(Var, Vec<usize>)> {
    check_ids(tape, lp, t, targets)?;
    check_distinct(t, targets)?;
    let assignment = hungarian_min_assignment(&cost_matrix(tape, lp, targets)?);
    let picks = assignment
        .perm
        .iter()
        .enumerate()
        .map(|(j, &k)| (j, targets[k], -1.0))
        .collect();
    Ok((tape.pick(lp, picks), assignment.perm))
}

/// Items and slogans matched as sets, template scored directly.
pub fn set_loss(
    tape: &mut Tape<'_>,
    lp: &SlotLogProbs,
    target: &BundleCreative,
) -> Result<SetLoss> {
    let (items, item_perm) = set_loss_for_type(tape, lp.items, ObjectType::Item, &target.items)?;
    let (slogans, slogan_perm) = match lp.slogans {
        Some(s) => {
            let (v, p) = set_loss_for_type(tape, s, ObjectType::Slogan, &target.slogans)?;
            (Some(v), p)
        }
        None => {
            xent_of_type(tape, lp, ObjectType::Slogan, &target.slogans)?;
            (None, Vec::new())
        }
    };
    let template = ordered_xent(tape, lp.template, ObjectType::Template, &[target.template])?;
    let mut terms = vec![items];
    terms.extend(slogans);
    terms.push(template);
    let total = sum_terms(tape, &terms);
    Ok(SetLoss {
        total,
        items: tape.scalar(items),
        slogans: slogans.map_or(0.0, |v| tape.scalar(v)),
        template: tape.scalar(template),
        item_perm,
        slogan_perm,
    })
}

/// `Σ_neg max(0, γ − (L_set(neg) − L_set(pos)))`, given the positive's set
/// loss already on the tape. Inactive hinges contribute nothing.
pub fn contrastive_loss(
    tape: &mut Tape<'_>,
    lp: &SlotLogProbs,
    positive_set: Var,
    negatives: &[BundleCreative],
    gamma: f64,
) -> Result<Var> {
    let mut active = Vec::new();
    for neg in negatives {
        let n = set_loss(tape, lp, neg)?.total;
        let gap = tape.sub(positive_set, n);
        let hinge = tape.add_const(gap, gamma);
        if tape.scalar(hinge) > 0.0 {
            active.push(hinge);
        }
    }
    Ok(sum_terms(tape, &active))
}

/// Full training objective of one record under `objective`; returns the
/// differentiable total and its breakdown.
pub fn total_loss(
    tape: &mut Tape<'_>,
    lp: &SlotLogProbs,
    positive: &BundleCreative,
    negatives: &[BundleCreative],
    objective: Objective,
    gamma: f64,
    lambda: f64,
) -> Result<(Var, LossBreakdown)> {
    if objective == Objective::IndependentXent {
        let mut parts = [0.0; 3];
        let mut terms = Vec::new();
        for (slot, t) in [ObjectType::Item, ObjectType::Slogan, ObjectType::Template]
            .into_iter()
            .enumerate()
        {
            if let Some(v) = xent_of_type(tape, lp, t, &positive.ids(t))? {
                parts[slot] = tape.scalar(v);
                terms.push(v);
            }
        }
        let total = sum_terms(tape, &terms);
        let l = tape.scalar(total);
        let breakdown = LossBreakdown {
            l_item_set: parts[0],
            l_slogan_set: parts[1],
            l_template: parts[2],
            l_set_total: l,
            l_contrastive: 0.0,
            l_total: l,
            lambda: 0.0,
            item_perm: (0..positive.items.len()).collect(),
            slogan_perm: (0..positive.slogans.len()).collect(),
        };
        return Ok((total, breakdown));
    }

    let set = set_loss(tape, lp, positive)?;
    let cl = contrastive_loss(tape, lp, set.total, negatives, gamma)?;
    let applied = if objective == Objective::SetOnly {
        0.0
    } else {
        lambda
    };
    let total = if applied == 0.0 {
        set.total
    } else {
        let weighted = tape.scale(cl, applied);
        tape.add(set.total, weighted)
    };
    let breakdown = LossBreakdown {
        l_item_set: set.items,
        l_slogan_set: set.slogans,
        l_template: set.template,
        l_set_total: tape.scalar(set.total),
        l_contrastive: tape.scalar(cl),
        l_total: tape.scalar(total),
        lambda: applied,
        item_perm: set.item_perm,
        slogan_perm: set.slogan_perm,
    };
    Ok((total, breakdown))
}

// ---- value-level scoring ---------------------------------------------------

fn with_dists<T>(
    dists: &PositionDistributions,
    f: impl FnOnce(&mut Tape<'_>, &SlotLogProbs) -> Result<T>,
) -> Result<T> {
    let empty = ParamStore::new();
    let mut tape = Tape::new(&empty);
    let lp = dists.to_tape(&mut tape);
    f(&mut tape, &lp)
}

pub fn xent_independent_value(
    dists: &PositionDistributions,
    target: &BundleCreative,
) -> Result<f64> {
    with_dists(dists, |tape, lp| {
        let v = xent_independent(tape, lp, target)?;
        Ok(tape.scalar(v))
    })
}

/// Set loss of `target`; the contrastive fields are left at zero.
pub fn set_loss_value(
    dists: &PositionDistributions,
    target: &BundleCreative,
) -> Result<LossBreakdown> {
    with_dists(dists, |tape, lp| {
        let s = set_loss(tape, lp, target)?;
        let total = tape.scalar(s.total);
        Ok(LossBreakdown {
            l_item_set: s.items,
            l_slogan_set: s.slogans,
            l_template: s.template,
            l_set_total: total,
            l_total: total,
            item_perm: s.item_perm,
            slogan_perm: s.slogan_perm,
            ..Default::default()
        })
    })
}

pub fn contrastive_loss_value(
    dists: &PositionDistributions,
    positive: &BundleCreative,
    negatives: &[BundleCreative],
    gamma: f64,
) -> Result<f64> {
    with_dists(dists, |tape, lp| {
        let pos = set_loss(tape, lp, positive)?.total;
        let v = contrastive_loss(tape, lp, pos, negatives, gamma)?;
        Ok(tape.scalar(v))
    })
}

pub fn total_loss_value(
    dists: &PositionDistributions,
    positive: &BundleCreative,
    negatives: &[BundleCreative],
    objective: Objective,
    gamma: f64,
    lambda: f64,
) -> Result<LossBreakdown> {
    with_dists(dists, |tape, lp| {
        total_loss(tape, lp, positive, negatives, objective, gamma, lambda).map(|(_, b)| b)
    })
}

/// Distance of the current point from the nearest place where the total
/// loss switches branch: a change of optimal matching or a hinge crossing
/// zero. Finite differences are unreliable when this is tiny.
pub fn switching_margin(
    dists: &PositionDistributions,
    positive: &BundleCreative,
    negatives: &[BundleCreative],
    gamma: f64,
) -> Result<f64> {
    with_dists(dists, |tape, lp| {
        let mut margin = f64::INFINITY;
        let creatives = std::iter::once(positive).chain(negatives);
        for c in creatives.clone() {
            for (v, ids) in [(Some(lp.items), &c.items), (lp.slogans, &c.slogans)] {
                let Some(v) = v else { continue };
                margin = margin.min(matching_gap(&cost_matrix(tape, v, ids)?)?);
            }
        }
        let pos = set_loss(tape, lp, positive)?.total;
        let pos = tape.scalar(pos);
        for neg in negatives {
            let n = set_loss(tape, lp, neg)?.total;
            margin = margin.min((gamma - (tape.scalar(n) - pos)).abs());
        }
        Ok(margin)
    })
}

/// Cost difference between the best and second-best permutation.
fn matching_gap(c: &CostMatrix) -> Result<f64> {
    if c.n() < 2 {
        return Ok(f64::INFINITY);
    }
    let best = brute_force_assignment(c)?;
    let mut second = f64::INFINITY;
    let mut perm: Vec<usize> = (0..c.n()).collect();
    permutations(&mut perm, 0, &mut |p| {
        if p != best.perm.as_slice() {
            second = second.min(c.cost_of(p));
        }
    });
    Ok(second - best.total_cost)
}

fn permutations(perm: &mut Vec<usize>, k: usize, visit: &mut impl FnMut(&[usize])) {
    if k == perm.len() {
        visit(perm);
        return;
    }
    for i in k..perm.len() {
        perm.swap(k, i);
        permutations(perm, k + 1, visit);
        perm.swap(k, i);
    }
}
