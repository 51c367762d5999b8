//! Training objectives over cosine distances in the shared space.
//!
//! The pairwise losses act elementwise on distance vectors so one session's
//! `L` positive/negative pairs are handled in a single graph. Distances come
//! from [`Tape::cosine_distance`] on unit vectors and lie in `[0, 2]`.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Scalar, Tape, Var};
use crate::encoders::Model;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LossKind {
    Triplet,
    Ncas,
    Contrastive,
    Bpr,
    Top1,
}

impl LossKind {
    pub fn label(self) -> &'static str {
        match self {
            LossKind::Triplet => "Triplet",
            LossKind::Ncas => "NCAS",
            LossKind::Contrastive => "Contrastive",
            LossKind::Bpr => "BPR",
            LossKind::Top1 => "TOP1",
        }
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "triplet" => Ok(LossKind::Triplet),
            "ncas" => Ok(LossKind::Ncas),
            "contrastive" => Ok(LossKind::Contrastive),
            "bpr" => Ok(LossKind::Bpr),
            "top1" => Ok(LossKind::Top1),
            other => Err(Error::InvalidArgument(format!("unknown loss `{other}`"))),
        }
    }
}

/// Argument order of the NCAS divergence.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum KldDirection {
    /// `KLD(p' ‖ p_model)`
    #[default]
    TargetModel,
    /// `KLD(p_model ‖ p')`; needs `ε > 0`.
    ModelTarget,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub kind: LossKind,
    pub margin: f64,
    pub use_margin: bool,
    pub use_swap: bool,
    pub position_weighting: bool,
    /// NCAS label smoothing `ε`.
    pub smoothing: f64,
    pub kld_direction: KldDirection,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            kind: LossKind::Triplet,
            margin: 0.3,
            use_margin: true,
            use_swap: false,
            position_weighting: true,
            smoothing: 0.3,
            kld_direction: KldDirection::TargetModel,
        }
    }
}

impl LossConfig {
    pub fn with_kind(kind: LossKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "margin must be ≥ 0, got {}",
                self.margin
            )));
        }
        if !(0.0..1.0).contains(&self.smoothing) {
            return Err(Error::InvalidArgument(format!(
                "smoothing must be in [0, 1), got {}",
                self.smoothing
            )));
        }
        if self.kind == LossKind::Ncas && self.kld_direction == KldDirection::ModelTarget && self.smoothing == 0.0 {
            return Err(Error::InvalidArgument(
                "KLD(p_model ‖ p') is infinite without smoothing".into(),
            ));
        }
        Ok(())
    }

    /// Margin actually added inside the triplet hinge.
    pub fn effective_margin(&self) -> f64 {
        if self.use_margin {
            self.margin
        } else {
            0.0
        }
    }
}

/// `−ln σ(d_kn − d_kp)`, elementwise.
pub fn bpr_loss<F: Scalar>(tape: &mut Tape<'_, F>, d_kp: Var, d_kn: Var) -> Result<Var> {
    let diff = tape.sub(d_kn, d_kp)?;
    let ls = tape.log_sigmoid(diff)?;
    tape.neg(ls)
}

/// `σ(d_kp − d_kn) + σ((1 − d_kn)²)`, elementwise.
pub fn top1_loss<F: Scalar>(tape: &mut Tape<'_, F>, d_kp: Var, d_kn: Var) -> Result<Var> {
    let diff = tape.sub(d_kp, d_kn)?;
    let rank = tape.sigmoid(diff)?;
    let sim = tape.affine(d_kn, -F::one(), F::one())?;
    let sq = tape.square(sim)?;
    let reg = tape.sigmoid(sq)?;
    tape.add(rank, reg)
}

/// Contrastive term on precomputed distances: `d` when `same_class`, else
/// `max(0, d − m)`.
pub fn contrastive_from_distance<F: Scalar>(
    tape: &mut Tape<'_, F>,
    d: Var,
    same_class: bool,
    margin: f64,
) -> Result<Var> {
    if same_class {
        return Ok(d);
    }
    let shifted = tape.affine(d, F::one(), F::lit(-margin))?;
    tape.relu(shifted)
}

/// Contrastive loss between row-aligned unit vectors `x_i`, `x_j`.
pub fn contrastive_loss<F: Scalar>(
    tape: &mut Tape<'_, F>,
    x_i: Var,
    x_j: Var,
    same_class: bool,
    margin: f64,
) -> Result<Var> {
    let d = tape.cosine_distance(x_i, x_j)?;
    contrastive_from_distance(tape, d, same_class, margin)
}

/// `max(0, d_kp − d' + m)` with `d' = min(d_kn, d_pn)` under swap.
/// `d_pn` may be `None` when swap is off.
pub fn triplet_loss<F: Scalar>(
    tape: &mut Tape<'_, F>,
    d_kp: Var,
    d_kn: Var,
    d_pn: Option<Var>,
    cfg: &LossConfig,
) -> Result<Var> {
    let d_neg = if cfg.use_swap {
        let d_pn = d_pn.ok_or_else(|| Error::InvalidArgument("swap needs d_pn".into()))?;
        tape.minimum(d_kn, d_pn)?
    } else {
        d_kn
    };
    let gap = tape.sub(d_kp, d_neg)?;
    let shifted = tape.affine(gap, F::one(), F::lit(cfg.effective_margin()))?;
    tape.relu(shifted)
}

/// `w_j = √(1/(1+j))` for `j = 0..n`, or all ones when disabled.
pub fn position_weights<F: Scalar>(n: usize, enabled: bool) -> Vec<F> {
    (0..n)
        .map(|j| {
            if enabled {
                F::lit((1.0 / (1.0 + j as f64)).sqrt())
            } else {
                F::one()
            }
        })
        .collect()
}

/// NCAS on a candidate set: model distribution `softmax(−d)` over the rows of
/// `candidates`, target uniform over the positives smoothed to
/// `(1−ε)p + ε/|Z|`, returning the divergence selected by `direction`.
pub fn ncas_loss<F: Scalar>(
    tape: &mut Tape<'_, F>,
    session: Var,
    candidates: Var,
    items: &[usize],
    positive: &[bool],
    smoothing: f64,
    direction: KldDirection,
) -> Result<Var> {
    let z = items.len();
    if z == 0 || positive.len() != z {
        return Err(Error::InvalidArgument(format!(
            "{} candidates with {} positive flags",
            z,
            positive.len()
        )));
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    if n_pos == 0 {
        return Err(Error::InvalidArgument("candidate set without positives".into()));
    }
    let mut seen = HashMap::with_capacity(z);
    for &i in items {
        if seen.insert(i, ()).is_some() {
            return Err(Error::InvalidArgument(format!("item {i} repeated in candidate set")));
        }
    }
    let target: Vec<f64> = positive
        .iter()
        .map(|&p| {
            let base = if p { 1.0 / n_pos as f64 } else { 0.0 };
            (1.0 - smoothing) * base + smoothing / z as f64
        })
        .collect();

    let d = {
        let rows = tape.gather(session, &vec![0; z])?;
        tape.cosine_distance(rows, candidates)?
    };
    let neg_d = tape.neg(d)?;
    let log_p = tape.log_softmax(neg_d)?;
    match direction {
        KldDirection::TargetModel => {
            // Σ p' ln p' − Σ p' ln p_model
            let entropy: f64 = target.iter().filter(|&&t| t > 0.0).map(|&t| t * t.ln()).sum();
            let w: Vec<F> = target.iter().map(|&t| F::lit(-t)).collect();
            let cross = tape.mul_const(log_p, &w)?;
            let cross = tape.sum(cross)?;
            tape.affine(cross, F::one(), F::lit(entropy))
        }
        KldDirection::ModelTarget => {
            if smoothing <= 0.0 {
                return Err(Error::InvalidArgument(
                    "KLD(p_model ‖ p') is infinite without smoothing".into(),
                ));
            }
            let p = tape.exp(log_p)?;
            let ln_t = tape.constant(vec![z], target.iter().map(|t| F::lit(t.ln())).collect())?;
            let ratio = tape.sub(log_p, ln_t)?;
            let terms = tape.mul(p, ratio)?;
            tape.sum(terms)
        }
    }
}

/// Loss of one training example from already-encoded vectors.
///
/// `session` is `φ(s_k)` as `[d]`, `positives`/`negatives` are `[L×d]` rows
/// aligned with `pos_items`/`neg_items`.
pub fn example_objective<F: Scalar>(
    tape: &mut Tape<'_, F>,
    session: Var,
    positives: Var,
    negatives: Var,
    pos_items: &[usize],
    neg_items: &[usize],
    cfg: &LossConfig,
) -> Result<Var> {
    let l = pos_items.len();
    if l == 0 || l != neg_items.len() {
        return Err(Error::InvalidArgument(format!(
            "{} positives vs {} negatives",
            l,
            neg_items.len()
        )));
    }
    if cfg.kind == LossKind::Ncas {
        return ncas_from_pairs(tape, session, positives, negatives, pos_items, neg_items, cfg);
    }
    let s = tape.gather(session, &vec![0; l])?;
    let d_kp = tape.cosine_distance(s, positives)?;
    let d_kn = tape.cosine_distance(s, negatives)?;
    let per_pair = match cfg.kind {
        LossKind::Triplet => {
            let d_pn = if cfg.use_swap {
                Some(tape.cosine_distance(positives, negatives)?)
            } else {
                None
            };
            triplet_loss(tape, d_kp, d_kn, d_pn, cfg)?
        }
        LossKind::Bpr => bpr_loss(tape, d_kp, d_kn)?,
        LossKind::Top1 => top1_loss(tape, d_kp, d_kn)?,
        LossKind::Contrastive => {
            let pos = contrastive_from_distance(tape, d_kp, true, cfg.margin)?;
            let neg = contrastive_from_distance(tape, d_kn, false, cfg.margin)?;
            tape.add(pos, neg)?
        }
        LossKind::Ncas => unreachable!(),
    };
    let w = position_weights::<F>(l, cfg.position_weighting);
    let weighted = tape.mul_const(per_pair, &w)?;
    tape.sum(weighted)
}

fn ncas_from_pairs<F: Scalar>(
    tape: &mut Tape<'_, F>,
    session: Var,
    positives: Var,
    negatives: Var,
    pos_items: &[usize],
    neg_items: &[usize],
    cfg: &LossConfig,
) -> Result<Var> {
    let l = pos_items.len();
    let d = tape.shape(positives).last().copied().unwrap_or(0);
    let both = tape.concat(&[positives, negatives])?;
    let both = tape.reshape(both, vec![2 * l, d])?;
    // first occurrence wins; an item that is both positive and negative
    // counts as positive
    let mut rows = Vec::new();
    let mut items = Vec::new();
    let mut flags = Vec::new();
    let mut slot: HashMap<usize, usize> = HashMap::new();
    for (r, (&item, is_pos)) in pos_items
        .iter()
        .map(|i| (i, true))
        .chain(neg_items.iter().map(|i| (i, false)))
        .enumerate()
    {
        if slot.contains_key(&item) {
            continue;
        }
        slot.insert(item, items.len());
        rows.push(r);
        items.push(item);
        flags.push(is_pos);
    }
    let candidates = tape.gather(both, &rows)?;
    ncas_loss(
        tape,
        session,
        candidates,
        &items,
        &flags,
        cfg.smoothing,
        cfg.kld_direction,
    )
}

/// Encodes one example through `model` and returns its loss.
pub fn session_objective<F: Scalar>(
    tape: &mut Tape<'_, F>,
    model: &Model<F>,
    prefix: &[usize],
    positives: &[usize],
    negatives: &[usize],
    cfg: &LossConfig,
) -> Result<Var> {
    let s = model.encode_session(tape, prefix)?;
    let p = model.encode_items(tape, positives)?;
    let n = model.encode_items(tape, negatives)?;
    example_objective(tape, s, p, n, positives, negatives, cfg)
}

/// Mean of per-example losses.
pub fn batch_mean<F: Scalar>(tape: &mut Tape<'_, F>, losses: &[Var]) -> Result<Var> {
    if losses.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let all = tape.concat(losses)?;
    tape.mean(all)
}
