//! Free products of lattice and finite factors: factor specifications,
//! syllable normal forms, and brute-force convolution oracles used to
//! validate the analytic pipeline at small step counts.

use std::collections::HashMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GroupError {
    #[error("unknown factor id {0}")]
    UnknownFactorId(usize),
    #[error("element budget exceeded: support reached {support} (cap {cap}) at step {step}")]
    BudgetExceeded { support: usize, cap: usize, step: usize },
    #[error("no radius estimate available for the tail bound")]
    RadiusUnknown,
    #[error("invalid specification: {0}")]
    InvalidSpec(String),
}

/// An element of a single factor group.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum FactorElem {
    Lattice(Vec<i64>),
    Finite(usize),
}

/// The structure of one free-product factor.
#[derive(Debug, Clone)]
pub enum FactorKind {
    /// Free abelian factor Z^d.
    Lattice { rank: usize },
    /// Finite factor given by an explicit multiplication table,
    /// identity at index 0; `table[a][b]` = a*b.
    Finite { table: Vec<Vec<usize>> },
}

/// One factor of the free product together with its symmetric step measure.
#[derive(Debug, Clone)]
pub struct FactorSpec {
    pub id: usize,
    pub kind: FactorKind,
    /// Finitely supported step measure, weights > 0 summing to 1.
    /// May include the factor identity (treated as extra laziness).
    pub step: Vec<(FactorElem, f64)>,
}

/// Column-style Hermite reduction: returns the index of the sublattice of
/// Z^d generated by `vectors` (i.e. |det| of a basis), or None when the
/// vectors do not span a full-rank sublattice.
pub fn lattice_index(vectors: &[Vec<i64>], d: usize) -> Option<u64> {
    if d == 0 {
        return Some(1);
    }
    let mut rows: Vec<Vec<i64>> = vectors.iter().filter(|v| v.iter().any(|&c| c != 0)).cloned().collect();
    let mut det: i128 = 1;
    for col in 0..d {
        // Find a pivot row with nonzero entry in `col`, reduce others by gcd steps.
        loop {
            let mut pivot: Option<usize> = None;
            for (i, row) in rows.iter().enumerate() {
                if row[col] != 0 && (pivot.is_none() || row[col].abs() < rows[pivot.unwrap()][col].abs()) {
                    pivot = Some(i);
                }
            }
            let p = pivot?;
            let pv = rows[p][col];
            let mut all_reduced = true;
            for i in 0..rows.len() {
                if i == p || rows[i][col] == 0 {
                    continue;
                }
                let q = rows[i][col] / pv;
                for c in 0..d {
                    let sub = (q as i128) * (rows[p][c] as i128);
                    rows[i][c] = (rows[i][c] as i128 - sub) as i64;
                }
                if rows[i][col] != 0 {
                    all_reduced = false;
                }
            }
            if all_reduced {
                det = det.checked_mul(pv.abs() as i128)?;
                rows.swap_remove(p);
                for row in rows.iter_mut() {
                    debug_assert_eq!(row[col], 0);
                    let _ = row;
                }
                break;
            }
        }
        rows.retain(|r| r.iter().any(|&c| c != 0));
    }
    Some(det as u64)
}

impl FactorSpec {
    pub fn identity(&self) -> FactorElem {
        match &self.kind {
            FactorKind::Lattice { rank } => FactorElem::Lattice(vec![0; *rank]),
            FactorKind::Finite { .. } => FactorElem::Finite(0),
        }
    }

    pub fn is_identity(&self, x: &FactorElem) -> bool {
        match x {
            FactorElem::Lattice(v) => v.iter().all(|&c| c == 0),
            FactorElem::Finite(i) => *i == 0,
        }
    }

    pub fn mul(&self, a: &FactorElem, b: &FactorElem) -> FactorElem {
        match (&self.kind, a, b) {
            (FactorKind::Lattice { .. }, FactorElem::Lattice(x), FactorElem::Lattice(y)) => {
                FactorElem::Lattice(x.iter().zip(y).map(|(u, v)| u + v).collect())
            }
            (FactorKind::Finite { table }, FactorElem::Finite(i), FactorElem::Finite(j)) => {
                FactorElem::Finite(table[*i][*j])
            }
            _ => panic!("element kind does not match factor kind"),
        }
    }

    pub fn inv(&self, a: &FactorElem) -> FactorElem {
        match (&self.kind, a) {
            (FactorKind::Lattice { .. }, FactorElem::Lattice(x)) => {
                FactorElem::Lattice(x.iter().map(|c| -c).collect())
            }
            (FactorKind::Finite { table }, FactorElem::Finite(i)) => {
                let m = table.len();
                for j in 0..m {
                    if table[*i][j] == 0 {
                        return FactorElem::Finite(j);
                    }
                }
                panic!("no inverse in multiplication table");
            }
            _ => panic!("element kind does not match factor kind"),
        }
    }

    pub fn order(&self) -> Option<usize> {
        match &self.kind {
            FactorKind::Lattice { .. } => None,
            FactorKind::Finite { table } => Some(table.len()),
        }
    }

    /// Mass the step measure puts on the factor identity.
    pub fn identity_mass(&self) -> f64 {
        self.step
            .iter()
            .filter(|(x, _)| self.is_identity(x))
            .map(|(_, w)| w)
            .sum()
    }

    pub fn validate(&self) -> Result<(), GroupError> {
        let total: f64 = self.step.iter().map(|(_, w)| w).sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(GroupError::InvalidSpec(format!(
                "factor {} step weights sum to {total}, expected 1",
                self.id
            )));
        }
        for (x, w) in &self.step {
            if !(*w > 0.0) {
                return Err(GroupError::InvalidSpec(format!("factor {}: nonpositive weight", self.id)));
            }
            let xi = self.inv(x);
            let wi: f64 = self
                .step
                .iter()
                .filter(|(y, _)| *y == xi)
                .map(|(_, v)| v)
                .sum();
            if (w - wi).abs() > 1e-12 {
                return Err(GroupError::InvalidSpec(format!(
                    "factor {}: step measure not symmetric at {:?}",
                    self.id, x
                )));
            }
        }
        match &self.kind {
            FactorKind::Lattice { rank } => {
                let support: Vec<Vec<i64>> = self
                    .step
                    .iter()
                    .filter_map(|(x, _)| match x {
                        FactorElem::Lattice(v) if v.iter().any(|&c| c != 0) => Some(v.clone()),
                        _ => None,
                    })
                    .collect();
                if support.is_empty() {
                    return Err(GroupError::InvalidSpec(format!(
                        "factor {}: lattice step has no nontrivial support",
                        self.id
                    )));
                }
                for v in &support {
                    if v.len() != *rank {
                        return Err(GroupError::InvalidSpec(format!(
                            "factor {}: step coordinate tuple has wrong rank",
                            self.id
                        )));
                    }
                }
                match lattice_index(&support, *rank) {
                    Some(1) => {}
                    _ => {
                        return Err(GroupError::InvalidSpec(format!(
                            "factor {}: step support does not generate Z^{rank}",
                            self.id
                        )))
                    }
                }
            }
            FactorKind::Finite { table } => {
                let m = table.len();
                if m == 0 || table.iter().any(|row| row.len() != m || row.iter().any(|&e| e >= m)) {
                    return Err(GroupError::InvalidSpec(format!(
                        "factor {}: malformed multiplication table",
                        self.id
                    )));
                }
                for i in 0..m {
                    if table[0][i] != i || table[i][0] != i {
                        return Err(GroupError::InvalidSpec(format!(
                            "factor {}: index 0 is not an identity",
                            self.id
                        )));
                    }
                    // Inverse must exist (panics otherwise); exercise it.
                    let _ = self.inv(&FactorElem::Finite(i));
                }
                // Semigroup generation: closure of the nontrivial support
                // must reach every element.
                let mut reach = vec![false; m];
                reach[0] = true;
                let gens: Vec<usize> = self
                    .step
                    .iter()
                    .filter_map(|(x, _)| match x {
                        FactorElem::Finite(i) if *i != 0 => Some(*i),
                        _ => None,
                    })
                    .collect();
                let mut frontier = vec![0usize];
                while let Some(a) = frontier.pop() {
                    for &g in &gens {
                        let b = table[a][g];
                        if !reach[b] {
                            reach[b] = true;
                            frontier.push(b);
                        }
                    }
                }
                if reach.iter().any(|&r| !r) {
                    return Err(GroupError::InvalidSpec(format!(
                        "factor {}: step support does not generate the finite factor",
                        self.id
                    )));
                }
            }
        }
        Ok(())
    }

    /// Rank for classification purposes: d for Z^d, 0 for finite factors.
    pub fn rank(&self) -> usize {
        match &self.kind {
            FactorKind::Lattice { rank } => *rank,
            FactorKind::Finite { .. } => 0,
        }
    }
}

/// A symmetric finitely supported random walk on a free product.
#[derive(Debug, Clone)]
pub struct WalkSpec {
    pub factors: Vec<FactorSpec>,
    /// Mixing weights over factors, positive, summing to 1.
    pub weights: Vec<f64>,
    /// Mass placed directly on the identity of the free product.
    pub laziness: f64,
}

impl WalkSpec {
    pub fn validate(&self) -> Result<(), GroupError> {
        if self.factors.len() < 2 {
            return Err(GroupError::InvalidSpec("need at least two factors".into()));
        }
        if self.factors.len() == 2
            && self.factors.iter().all(|f| f.order() == Some(2))
        {
            return Err(GroupError::InvalidSpec(
                "the free product of two order-2 factors is elementary".into(),
            ));
        }
        if self.weights.len() != self.factors.len() {
            return Err(GroupError::InvalidSpec("weights/factors length mismatch".into()));
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 || self.weights.iter().any(|&a| !(a > 0.0)) {
            return Err(GroupError::InvalidSpec("weights must be positive and sum to 1".into()));
        }
        if !(0.0..1.0).contains(&self.laziness) {
            return Err(GroupError::InvalidSpec("laziness must lie in [0,1)".into()));
        }
        for (i, f) in self.factors.iter().enumerate() {
            if f.id != i {
                return Err(GroupError::InvalidSpec("factor ids must be 0..P-1 in order".into()));
            }
            f.validate()?;
        }
        Ok(())
    }

    /// Total mass the induced free-product measure puts on the identity:
    /// laziness plus the identity mass of each factor measure.
    pub fn identity_mass(&self) -> f64 {
        self.laziness
            + (1.0 - self.laziness)
                * self
                    .factors
                    .iter()
                    .zip(&self.weights)
                    .map(|(f, a)| a * f.identity_mass())
                    .sum::<f64>()
    }

    /// Effective weight of nontrivial steps into factor p.
    pub fn nontrivial_weight(&self, p: usize) -> f64 {
        (1.0 - self.laziness) * self.weights[p] * (1.0 - self.factors[p].identity_mass())
    }

    /// Nontrivial part of factor p's step measure, renormalized to mass 1.
    pub fn normalized_factor_step(&self, p: usize) -> Vec<(FactorElem, f64)> {
        let f = &self.factors[p];
        let nt_mass = 1.0 - f.identity_mass();
        f.step
            .iter()
            .filter(|(x, _)| !f.is_identity(x))
            .map(|(x, w)| (x.clone(), w / nt_mass))
            .collect()
    }

    /// The induced step measure on the free product as (factorId, element)
    /// pairs for nontrivial steps, plus the identity mass separately.
    pub fn ambient_steps(&self) -> (f64, Vec<(usize, FactorElem, f64)>) {
        let mut steps = Vec::new();
        for (p, f) in self.factors.iter().enumerate() {
            for (x, w) in &f.step {
                if !f.is_identity(x) {
                    steps.push((p, x.clone(), (1.0 - self.laziness) * self.weights[p] * w));
                }
            }
        }
        (self.identity_mass(), steps)
    }
}

/// Syllable normal form: alternating (factor, nontrivial element) pairs.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct Word {
    pub syllables: Vec<(usize, FactorElem)>,
}

impl Word {
    pub fn empty() -> Self {
        Word::default()
    }

    pub fn is_empty(&self) -> bool {
        self.syllables.is_empty()
    }
}

/// Reduces a raw syllable sequence to normal form: merges adjacent
/// same-factor syllables, drops identities, iterates to a fixed point.
pub fn normalize_word(
    walk: &WalkSpec,
    raw: &[(usize, FactorElem)],
) -> Result<Word, GroupError> {
    let mut stack: Vec<(usize, FactorElem)> = Vec::with_capacity(raw.len());
    for (p, x) in raw {
        let f = walk.factors.get(*p).ok_or(GroupError::UnknownFactorId(*p))?;
        if f.is_identity(x) {
            continue;
        }
        let mut cur = x.clone();
        let mut fid = *p;
        loop {
            match stack.last() {
                Some((q, y)) if *q == fid => {
                    let merged = walk.factors[fid].mul(y, &cur);
                    stack.pop();
                    if walk.factors[fid].is_identity(&merged) {
                        // Cascading reduction: the syllable vanished, expose
                        // the previous one for further merging.
                        match stack.pop() {
                            Some((q2, y2)) => {
                                fid = q2;
                                cur = y2;
                                // Re-run the merge loop against the new top.
                                continue;
                            }
                            None => break,
                        }
                    } else {
                        cur = merged;
                        stack.push((fid, cur.clone()));
                        break;
                    }
                }
                _ => {
                    stack.push((fid, cur.clone()));
                    break;
                }
            }
        }
    }
    Ok(Word { syllables: stack })
}

/// Appends one step (p, x) to a normal-form word, renormalizing locally.
pub fn append_step(walk: &WalkSpec, w: &Word, p: usize, x: &FactorElem) -> Word {
    let f = &walk.factors[p];
    if f.is_identity(x) {
        return w.clone();
    }
    let mut syl = w.syllables.clone();
    match syl.last() {
        Some((q, y)) if *q == p => {
            let merged = f.mul(y, x);
            syl.pop();
            if !f.is_identity(&merged) {
                syl.push((p, merged));
            }
        }
        _ => syl.push((p, x.clone())),
    }
    Word { syllables: syl }
}

/// Word interner: normal forms get dense integer handles for fast
/// convolution over HashMaps keyed by u32.
#[derive(Default)]
pub struct Interner {
    map: HashMap<Word, u32>,
    words: Vec<Word>,
}

impl Interner {
    pub fn new() -> Self {
        let mut s = Interner::default();
        s.intern(&Word::empty());
        s
    }

    pub fn intern(&mut self, w: &Word) -> u32 {
        if let Some(&h) = self.map.get(w) {
            return h;
        }
        let h = self.words.len() as u32;
        self.map.insert(w.clone(), h);
        self.words.push(w.clone());
        h
    }

    pub fn word(&self, h: u32) -> &Word {
        &self.words[h as usize]
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

pub const DEFAULT_ELEMENT_BUDGET: usize = 5_000_000;

/// n-fold convolution oracle: exact return probabilities p^(n)(e,e) for
/// n = 0..N by repeated sparse convolution over interned normal forms.
pub fn brute_force_return_sequence(
    walk: &WalkSpec,
    n_max: usize,
) -> Result<Vec<f64>, GroupError> {
    brute_force_return_sequence_capped(walk, n_max, DEFAULT_ELEMENT_BUDGET)
}

pub fn brute_force_return_sequence_capped(
    walk: &WalkSpec,
    n_max: usize,
    cap: usize,
) -> Result<Vec<f64>, GroupError> {
    // Meet in the middle: build n-step distributions only to depth
    // ceil(n_max/2) and fold pairs of layers through word inversion,
    // p^(m+k)(e,e) = sum_x mu^m(x) mu^k(x^{-1}). This halves the ball depth
    // the interner has to hold.
    let (id_mass, steps) = walk.ambient_steps();
    let mut interner = Interner::new();
    let mut dist: HashMap<u32, f64> = HashMap::new();
    dist.insert(0, 1.0);
    let mut out = vec![0.0; n_max + 1];
    out[0] = 1.0;
    let half = n_max.div_ceil(2);
    // Folds dist layers m and k (k = m or m+1) into p^(m+k).
    let fold = |interner: &mut Interner, a: &HashMap<u32, f64>, b: &HashMap<u32, f64>| -> f64 {
        let mut acc = 0.0;
        for (&h, &mass) in a {
            let inv = word_inverse(walk, interner.word(h));
            let ih = interner.intern(&inv);
            if let Some(&mb) = b.get(&ih) {
                acc += mass * mb;
            }
        }
        acc
    };
    let mut prev;
    for n in 1..=half {
        let mut next: HashMap<u32, f64> = HashMap::with_capacity(dist.len() * 2);
        for (&h, &mass) in &dist {
            let w = interner.word(h).clone();
            if id_mass > 0.0 {
                *next.entry(h).or_insert(0.0) += mass * id_mass;
            }
            for (p, x, wt) in &steps {
                let nw = append_step(walk, &w, *p, x);
                let nh = interner.intern(&nw);
                *next.entry(nh).or_insert(0.0) += mass * wt;
            }
            if interner.len() > cap {
                return Err(GroupError::BudgetExceeded {
                    support: interner.len(),
                    cap,
                    step: n,
                });
            }
        }
        let total: f64 = next.values().sum();
        debug_assert!((total - 1.0).abs() < 1e-12, "mass leak at step {n}: {total}");
        prev = std::mem::replace(&mut dist, next);
        if n <= n_max {
            out[n] = dist.get(&0).copied().unwrap_or(0.0);
        }
        if 2 * n - 1 > half && 2 * n - 1 <= n_max {
            out[2 * n - 1] = fold(&mut interner, &prev, &dist);
        }
        if 2 * n > half && 2 * n <= n_max {
            out[2 * n] = fold(&mut interner, &dist, &dist);
        }
    }
    Ok(out)
}

/// Inverse of a word in syllable normal form: reversed syllables with each
/// letter inverted in its factor.
pub fn word_inverse(walk: &WalkSpec, w: &Word) -> Word {
    Word {
        syllables: w
            .syllables
            .iter()
            .rev()
            .map(|(p, x)| (*p, walk.factors[*p].inv(x)))
            .collect(),
    }
}

/// Result of the brute-force first-return computation: r-weighted kernel
/// restricted to the factor subgroup, plus a geometric tail bound.
#[derive(Debug, Clone)]
pub struct FirstReturnBrute {
    /// Kernel values: factor element of H_p -> sum over n <= L of
    /// r^n * (weight of length-n paths e -> h whose interior avoids H_p).
    pub kernel: HashMap<FactorElem, f64>,
    pub tail_bound: f64,
}

/// r-weighted first-return kernel to the subgroup of factor `p`, truncated
/// at path length `max_len`, by outside-restricted convolution.
///
/// `radius_hint` feeds the geometric tail bound; without one the call fails
/// with RadiusUnknown (except at r = 0 where the kernel is exactly zero).
pub fn brute_force_first_return(
    walk: &WalkSpec,
    p: usize,
    r: f64,
    max_len: usize,
    radius_hint: Option<f64>,
    cap: usize,
) -> Result<FirstReturnBrute, GroupError> {
    if p >= walk.factors.len() {
        return Err(GroupError::UnknownFactorId(p));
    }
    if r == 0.0 {
        return Ok(FirstReturnBrute { kernel: HashMap::new(), tail_bound: 0.0 });
    }
    let radius = radius_hint.ok_or(GroupError::RadiusUnknown)?;
    let (id_mass, steps) = walk.ambient_steps();
    let mut interner = Interner::new();
    // Membership in H_p: the word is empty or a single syllable of factor p.
    let in_subgroup = |w: &Word| w.syllables.len() <= 1 && w.syllables.first().map(|(q, _)| *q == p).unwrap_or(true);
    let factor_elem = |w: &Word| -> FactorElem {
        match w.syllables.first() {
            Some((_, x)) => x.clone(),
            None => walk.factors[p].identity(),
        }
    };
    // outside[h] carries probability mass * r^n for paths currently outside H_p
    // ... except at n = 0 where the walk sits at e (in H_p) before moving.
    let mut kernel: HashMap<FactorElem, f64> = HashMap::new();
    let mut outside: HashMap<u32, f64> = HashMap::new();
    let mut start: HashMap<u32, f64> = HashMap::new();
    start.insert(0, 1.0);
    let mut shell_return = 0.0;
    for n in 1..=max_len {
        let src = if n == 1 { &start } else { &outside };
        let mut next_outside: HashMap<u32, f64> = HashMap::new();
        shell_return = 0.0;
        for (&h, &mass) in src {
            let w = interner.word(h).clone();
            let mut push = |nw: Word, wt: f64| {
                let weighted = mass * wt * r;
                if in_subgroup(&nw) {
                    shell_return += weighted;
                    *kernel.entry(factor_elem(&nw)).or_insert(0.0) += weighted;
                } else {
                    let nh = interner.intern(&nw);
                    *next_outside.entry(nh).or_insert(0.0) += weighted;
                }
            };
            if id_mass > 0.0 {
                push(w.clone(), id_mass);
            }
            for (q, x, wt) in &steps {
                push(append_step(walk, &w, *q, x), *wt);
            }
            if interner.len() > cap {
                return Err(GroupError::BudgetExceeded { support: interner.len(), cap, step: n });
            }
        }
        outside = next_outside;
    }
    // Tail: return mass per extra step decays at least like r/radius once the
    // shells stabilize; bound the remainder by a geometric series seeded by
    // max(outstanding outside mass returning immediately, last return shell).
    let rho = (r / radius).min(0.999_999);
    let outside_mass: f64 = outside.values().sum();
    let seed = (outside_mass * r).max(shell_return * rho);
    let tail_bound = seed / (1.0 - rho);
    Ok(FirstReturnBrute { kernel, tail_bound })
}

/// Off-diagonal Green value G(e, x | r) truncated at n_max steps, by
/// meet-in-the-middle convolution, plus a geometric tail bound.
pub fn brute_force_green_offdiag(
    walk: &WalkSpec,
    target: &Word,
    r: f64,
    n_max: usize,
    radius_hint: f64,
    cap: usize,
) -> Result<(f64, f64), GroupError> {
    let (id_mass, steps) = walk.ambient_steps();
    let mut interner = Interner::new();
    let mut dist: HashMap<u32, f64> = HashMap::new();
    dist.insert(0, 1.0);
    let th = interner.intern(target);
    let mut green = if target.is_empty() { 1.0 } else { 0.0 };
    let mut rn = 1.0;
    let mut last_hit = 0.0;
    let mut prev_hit = 0.0;
    for n in 1..=n_max {
        rn *= r;
        let mut next: HashMap<u32, f64> = HashMap::with_capacity(dist.len() * 2);
        for (&h, &mass) in &dist {
            let w = interner.word(h).clone();
            if id_mass > 0.0 {
                *next.entry(h).or_insert(0.0) += mass * id_mass;
            }
            for (p, x, wt) in &steps {
                let nw = append_step(walk, &w, *p, x);
                let nh = interner.intern(&nw);
                *next.entry(nh).or_insert(0.0) += mass * wt;
            }
            // Enforce the budget mid-step: one more ball layer can be
            // orders of magnitude larger than the previous one.
            if interner.len() > cap {
                return Err(GroupError::BudgetExceeded { support: interner.len(), cap, step: n });
            }
        }
        dist = next;
        let hit = dist.get(&th).copied().unwrap_or(0.0);
        green += hit * rn;
        prev_hit = last_hit;
        last_hit = hit * rn;
    }
    let rho = (r / radius_hint).min(0.999_999);
    // Periodic walks hit the target only on one parity, so the final layer can
    // be exactly zero; seed the geometric bound from the last two layers and
    // pad for the pre-asymptotic growth of the normalized step weights.
    let lead = last_hit.max(prev_hit * rho).max(rn * 1e-12);
    let tail = 2.0 * lead * rho / (1.0 - rho);
    Ok((green, tail))
}

/// Ready-made walk specifications used across tests and examples.
pub mod testkit {
    use super::*;

    /// Z with the simple ±1 step measure.
    pub fn z_srw_factor(id: usize) -> FactorSpec {
        FactorSpec {
            id,
            kind: FactorKind::Lattice { rank: 1 },
            step: vec![
                (FactorElem::Lattice(vec![1]), 0.5),
                (FactorElem::Lattice(vec![-1]), 0.5),
            ],
        }
    }

    /// Z * Z with SRW factors and equal mixing weights: the free group F_2
    /// with the standard 4-generator SRW.
    pub fn f2_srw() -> WalkSpec {
        WalkSpec {
            factors: vec![z_srw_factor(0), z_srw_factor(1)],
            weights: vec![0.5, 0.5],
            laziness: 0.0,
        }
    }

    /// Cyclic group of order m as a multiplication table.
    pub fn cyclic_factor(id: usize, m: usize, weights: Vec<(usize, f64)>) -> FactorSpec {
        let table: Vec<Vec<usize>> = (0..m).map(|i| (0..m).map(|j| (i + j) % m).collect()).collect();
        FactorSpec {
            id,
            kind: FactorKind::Finite { table },
            step: weights.into_iter().map(|(i, w)| (FactorElem::Finite(i), w)).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::testkit::*;
    use super::*;

    fn lat(v: &[i64]) -> FactorElem {
        FactorElem::Lattice(v.to_vec())
    }

    #[test]
    fn normalize_cancellation() {
        let w = f2_srw();
        let out = normalize_word(&w, &[(1, lat(&[1])), (1, lat(&[-1]))]).unwrap();
        assert!(out.is_empty());
    }

    #[test]
    fn normalize_merge() {
        let w = f2_srw();
        let out = normalize_word(&w, &[(0, lat(&[1])), (1, lat(&[1])), (1, lat(&[1]))]).unwrap();
        assert_eq!(out.syllables, vec![(0, lat(&[1])), (1, lat(&[2]))]);
    }

    #[test]
    fn normalize_cascading() {
        let w = f2_srw();
        let out =
            normalize_word(&w, &[(0, lat(&[1])), (1, lat(&[1])), (1, lat(&[-1])), (0, lat(&[1]))])
                .unwrap();
        assert_eq!(out.syllables, vec![(0, lat(&[2]))]);
    }

    #[test]
    fn normalize_idempotent_and_nonincreasing() {
        let w = f2_srw();
        let raws = vec![
            vec![(0, lat(&[1])), (1, lat(&[2])), (0, lat(&[-1])), (0, lat(&[1]))],
            vec![(0, lat(&[3])), (0, lat(&[-3])), (1, lat(&[1]))],
        ];
        for raw in raws {
            let once = normalize_word(&w, &raw).unwrap();
            let twice = normalize_word(&w, &once.syllables).unwrap();
            assert_eq!(once, twice);
            assert!(once.syllables.len() <= raw.len());
        }
    }

    #[test]
    fn normalize_unknown_factor() {
        let w = f2_srw();
        assert!(matches!(
            normalize_word(&w, &[(7, lat(&[1]))]),
            Err(GroupError::UnknownFactorId(7))
        ));
    }

    #[test]
    fn f2_return_sequence_first_values() {
        let w = f2_srw();
        let p = brute_force_return_sequence(&w, 6).unwrap();
        assert_eq!(p[0], 1.0);
        assert_eq!(p[1], 0.0);
        assert!((p[2] - 0.25).abs() < 1e-15);
        assert!((p[4] - 7.0 / 64.0).abs() < 1e-15);
    }

    #[test]
    fn lazy_walk_one_step_return() {
        let mut w = f2_srw();
        w.laziness = 0.17;
        let p = brute_force_return_sequence(&w, 2).unwrap();
        assert!((p[1] - 0.17).abs() < 1e-15);
    }

    #[test]
    fn odd_returns_vanish_without_laziness() {
        let w = f2_srw();
        let p = brute_force_return_sequence(&w, 9).unwrap();
        for n in (1..=9).step_by(2) {
            assert_eq!(p[n], 0.0, "n={n}");
        }
    }

    #[test]
    fn symmetry_of_distribution() {
        // p^(n)(e, x) = p^(n)(e, x^{-1}) for the symmetric F_2 walk, n = 3.
        let w = f2_srw();
        let (id_mass, steps) = w.ambient_steps();
        let mut dist: HashMap<Word, f64> = HashMap::new();
        dist.insert(Word::empty(), 1.0);
        for _ in 0..3 {
            let mut next: HashMap<Word, f64> = HashMap::new();
            for (word, mass) in &dist {
                if id_mass > 0.0 {
                    *next.entry(word.clone()).or_insert(0.0) += mass * id_mass;
                }
                for (p, x, wt) in &steps {
                    *next.entry(append_step(&w, word, *p, x)).or_insert(0.0) += mass * wt;
                }
            }
            dist = next;
        }
        for (word, mass) in &dist {
            let inv_syl: Vec<(usize, FactorElem)> = word
                .syllables
                .iter()
                .rev()
                .map(|(p, x)| (*p, w.factors[*p].inv(x)))
                .collect();
            let inv = Word { syllables: inv_syl };
            let m2 = dist.get(&inv).copied().unwrap_or(0.0);
            assert!((mass - m2).abs() < 1e-14);
        }
    }

    #[test]
    fn first_return_zero_r() {
        let w = f2_srw();
        let fr = brute_force_first_return(&w, 0, 0.0, 10, None, 1_000_000).unwrap();
        assert!(fr.kernel.is_empty());
        assert_eq!(fr.tail_bound, 0.0);
    }

    #[test]
    fn first_return_requires_radius() {
        let w = f2_srw();
        assert!(matches!(
            brute_force_first_return(&w, 0, 0.5, 10, None, 1_000_000),
            Err(GroupError::RadiusUnknown)
        ));
    }

    #[test]
    fn first_return_one_step_part() {
        let w = f2_srw();
        let r = 0.8;
        let fr = brute_force_first_return(&w, 0, r, 12, Some(2.0 / 3f64.sqrt()), 2_000_000).unwrap();
        // One-step in-factor paths contribute exactly r * alpha * 1/2 at +-1;
        // longer excursions into the other factor cannot land at +-1... they can
        // only land where they left, i.e. at the departure point, which for a
        // first step into factor 1 is the identity. So the +-1 weights are exact
        // up to excursions that end with an in-factor step -- impossible, since
        // excursion paths stay outside H until the final step re-enters at the
        // anchor. Hence exact equality up to rounding.
        let w1 = fr.kernel.get(&lat(&[1])).copied().unwrap_or(0.0);
        assert!((w1 - r * 0.5 * 0.5).abs() < 1e-15, "w1={w1}");
        let wm1 = fr.kernel.get(&lat(&[-1])).copied().unwrap_or(0.0);
        assert!((wm1 - r * 0.5 * 0.5).abs() < 1e-15);
    }

    #[test]
    fn cyclic_factor_validates() {
        let f = cyclic_factor(0, 3, vec![(1, 0.5), (2, 0.5)]);
        f.validate().unwrap();
        let bad = cyclic_factor(0, 4, vec![(2, 1.0)]);
        assert!(bad.validate().is_err()); // {0,2} is a proper subgroup of Z/4
    }

    #[test]
    fn two_order_two_factors_rejected() {
        let f1 = cyclic_factor(0, 2, vec![(1, 1.0)]);
        let f2 = cyclic_factor(1, 2, vec![(1, 1.0)]);
        let w = WalkSpec { factors: vec![f1, f2], weights: vec![0.5, 0.5], laziness: 0.0 };
        assert!(w.validate().is_err());
    }

    #[test]
    fn lattice_index_values() {
        assert_eq!(lattice_index(&[vec![1]], 1), Some(1));
        assert_eq!(lattice_index(&[vec![2]], 1), Some(2));
        assert_eq!(lattice_index(&[vec![2], vec![3]], 1), Some(1));
        assert_eq!(lattice_index(&[vec![1, 0], vec![0, 1]], 2), Some(1));
        assert_eq!(lattice_index(&[vec![1, 1], vec![1, -1]], 2), Some(2));
        assert_eq!(lattice_index(&[vec![1, 0]], 2), None);
    }

    #[test]
    fn budget_exceeded_reports_cap() {
        let w = f2_srw();
        match brute_force_return_sequence_capped(&w, 12, 50) {
            Err(GroupError::BudgetExceeded { cap: 50, .. }) => {}
            other => panic!("expected BudgetExceeded, got {other:?}"),
        }
    }
}
