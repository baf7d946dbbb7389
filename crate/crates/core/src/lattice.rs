//! Exact inference on linear-chain potential lattices.
//!
//! A lattice holds unary scores `unary[i][y]` for each (0-based) position
//! and a transition matrix `transition[y][y']`. A tagging `y_1..y_n` scores
//! `sum_i unary[i][y_i] + sum_i transition[y_i][y_{i+1}]`. Sentences are
//! implicitly bracketed by `O` tags: the first tag must be reachable from
//! `O` and the last must be able to precede `O`, as encoded in the
//! [`TransitionMask`]. Tag index 0 is always `O`.
//!
//! All arithmetic is in log space. Impossible entries hold [`LOG_ZERO`], a
//! finite sentinel, rather than `-inf`.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use thiserror::Error;

use crate::corpus::{ObservedTags, Role, Tag, TagSet};

/// Log-space zero. Any value at or below `LOG_ZERO / 2` is treated as an
/// impossible score.
pub const LOG_ZERO: f64 = -1.0e30;

#[inline]
pub fn is_log_zero(x: f64) -> bool {
    x <= LOG_ZERO * 0.5
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LatticeError {
    #[error("lattice has no positions")]
    Empty,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite potential at {0}")]
    NonFinite(String),
    #[error("no tag sequence satisfies the transition mask")]
    NoValidPath,
    #[error("observation at position {position} leaves no valid tag sequence")]
    Unsatisfiable { position: usize },
    #[error("observation at position {position} is outside 1..={len}")]
    ObservationOutOfRange { position: usize, len: usize },
    #[error("observed tag index {index} is outside a tag set of size {size}")]
    TagOutOfRange { index: usize, size: usize },
}

/// Which transitions, starts and ends a tagging may use.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransitionMask {
    size: usize,
    allowed: Vec<bool>,
    start: Vec<bool>,
    end: Vec<bool>,
    predecessors: Vec<Vec<usize>>,
    successors: Vec<Vec<usize>>,
}

impl TransitionMask {
    fn from_parts(size: usize, allowed: Vec<bool>, start: Vec<bool>, end: Vec<bool>) -> TransitionMask {
        let predecessors = (0..size)
            .map(|to| (0..size).filter(|&from| allowed[from * size + to]).collect())
            .collect();
        let successors = (0..size)
            .map(|from| (0..size).filter(|&to| allowed[from * size + to]).collect())
            .collect();
        TransitionMask {
            size,
            allowed,
            start,
            end,
            predecessors,
            successors,
        }
    }

    /// BILUO grammar: after `O`, `L-c` or `U-c` any of `O`, `B-c'`, `U-c'`
    /// may follow; after `B-c` or `I-c` only `I-c` or `L-c`.
    pub fn biluo(tagset: &TagSet) -> TransitionMask {
        let size = tagset.len();
        let mut allowed = vec![false; size * size];
        for from in tagset.tags() {
            for to in tagset.tags() {
                allowed[from.index() * size + to.index()] = biluo_allows(from, to);
            }
        }
        let start = tagset.tags().map(|t| biluo_allows(Tag::O, t)).collect();
        let end = tagset.tags().map(|t| biluo_allows(t, Tag::O)).collect();
        TransitionMask::from_parts(size, allowed, start, end)
    }

    /// Every transition, start and end allowed.
    pub fn unrestricted(size: usize) -> TransitionMask {
        TransitionMask::from_parts(size, vec![true; size * size], vec![true; size], vec![true; size])
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn allowed(&self, from: usize, to: usize) -> bool {
        self.allowed[from * self.size + to]
    }

    pub fn start_allowed(&self, tag: usize) -> bool {
        self.start[tag]
    }

    pub fn end_allowed(&self, tag: usize) -> bool {
        self.end[tag]
    }

    pub fn predecessors(&self, tag: usize) -> &[usize] {
        &self.predecessors[tag]
    }

    pub fn successors(&self, tag: usize) -> &[usize] {
        &self.successors[tag]
    }

    pub fn is_valid(&self, tags: &[usize]) -> bool {
        match (tags.first(), tags.last()) {
            (Some(&first), Some(&last)) => {
                tags.iter().all(|&t| t < self.size)
                    && self.start[first]
                    && self.end[last]
                    && tags.windows(2).all(|w| self.allowed(w[0], w[1]))
            }
            _ => false,
        }
    }
}

fn biluo_allows(from: Tag, to: Tag) -> bool {
    match from.role() {
        Role::O | Role::L | Role::U => matches!(to.role(), Role::O | Role::B | Role::U),
        Role::B | Role::I => matches!(to.role(), Role::I | Role::L) && to.class() == from.class(),
    }
}

/// Unary and transition scores of one sentence under a mask.
#[derive(Debug, Clone, PartialEq)]
pub struct PotentialLattice {
    unary: Array2<f64>,
    transition: Array2<f64>,
    mask: TransitionMask,
}

/// Gradients of a scalar lattice output with respect to every potential.
#[derive(Debug, Clone, PartialEq)]
pub struct LatticeGradients {
    pub d_unary: Array2<f64>,
    pub d_transition: Array2<f64>,
}

impl LatticeGradients {
    pub fn zeros(len: usize, tags: usize) -> LatticeGradients {
        LatticeGradients {
            d_unary: Array2::zeros((len, tags)),
            d_transition: Array2::zeros((tags, tags)),
        }
    }

    pub fn scaled_add(&mut self, scale: f64, other: &LatticeGradients) {
        self.d_unary.scaled_add(scale, &other.d_unary);
        self.d_transition.scaled_add(scale, &other.d_transition);
    }

    pub fn scale(&mut self, factor: f64) {
        self.d_unary *= factor;
        self.d_transition *= factor;
    }
}

/// The scalar lattice quantities that [`PotentialLattice::backward_adjoints`]
/// differentiates.
#[derive(Debug, Clone, Copy)]
pub enum LatticeOutput<'a> {
    LogPartition,
    ConstrainedLogPartition(&'a ObservedTags),
    ExpectedEntityCount,
}

fn sanitize(x: f64) -> f64 {
    if x < LOG_ZERO {
        LOG_ZERO
    } else {
        x
    }
}

impl PotentialLattice {
    /// Builds a lattice, replacing masked transitions and any `-inf` or
    /// smaller-than-sentinel score with [`LOG_ZERO`].
    pub fn new(unary: Array2<f64>, transition: Array2<f64>, mask: TransitionMask) -> Result<PotentialLattice, LatticeError> {
        let (n, k) = unary.dim();
        if n == 0 {
            return Err(LatticeError::Empty);
        }
        if k != mask.size() || transition.dim() != (k, k) {
            return Err(LatticeError::Shape(format!(
                "unary {:?}, transition {:?}, mask {}",
                unary.dim(),
                transition.dim(),
                mask.size()
            )));
        }
        if let Some(((i, y), _)) = unary.indexed_iter().find(|(_, v)| v.is_nan() || **v == f64::INFINITY) {
            return Err(LatticeError::NonFinite(format!("unary[{i}][{y}]")));
        }
        if let Some(((a, b), _)) = transition.indexed_iter().find(|(_, v)| v.is_nan() || **v == f64::INFINITY) {
            return Err(LatticeError::NonFinite(format!("transition[{a}][{b}]")));
        }
        let unary = unary.mapv(sanitize);
        let mut transition = transition.mapv(sanitize);
        for ((from, to), value) in transition.indexed_iter_mut() {
            if !mask.allowed(from, to) {
                *value = LOG_ZERO;
            }
        }
        Ok(PotentialLattice { unary, transition, mask })
    }

    pub fn len(&self) -> usize {
        self.unary.nrows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn num_tags(&self) -> usize {
        self.unary.ncols()
    }

    pub fn unary(&self) -> ArrayView2<'_, f64> {
        self.unary.view()
    }

    pub fn transition(&self) -> ArrayView2<'_, f64> {
        self.transition.view()
    }

    pub fn mask(&self) -> &TransitionMask {
        &self.mask
    }

    /// Score of a tag sequence (0-based tag indices), or `None` when the
    /// sequence is not mask-valid.
    pub fn path_score(&self, tags: &[usize]) -> Option<f64> {
        if tags.len() != self.len() || !self.mask.is_valid(tags) {
            return None;
        }
        let mut score = 0.0;
        for (i, &y) in tags.iter().enumerate() {
            score += self.unary[[i, y]];
            if i + 1 < tags.len() {
                score += self.transition[[y, tags[i + 1]]];
            }
        }
        Some(score)
    }

    /// The lattice restricted to taggings that agree with `observed`:
    /// at each observed position every other tag's unary score is set to
    /// [`LOG_ZERO`].
    pub fn constrained(&self, observed: &ObservedTags) -> Result<PotentialLattice, LatticeError> {
        let mut restricted = self.clone();
        let k = self.num_tags();
        for (position, tag) in observed.iter() {
            if position == 0 || position > self.len() {
                return Err(LatticeError::ObservationOutOfRange {
                    position,
                    len: self.len(),
                });
            }
            if tag.index() >= k {
                return Err(LatticeError::TagOutOfRange {
                    index: tag.index(),
                    size: k,
                });
            }
            let mut row = restricted.unary.row_mut(position - 1);
            for (y, value) in row.iter_mut().enumerate() {
                if y != tag.index() {
                    *value = LOG_ZERO;
                }
            }
        }
        Ok(restricted)
    }

    /// Runs forward and backward recursions.
    pub fn inference(&self) -> Result<Inference<'_>, LatticeError> {
        let (n, k) = self.unary.dim();
        let mask = &self.mask;
        let u = &self.unary;
        let t = &self.transition;
        let mut scratch = Vec::with_capacity(k);

        let mut alpha = Array2::from_elem((n, k), LOG_ZERO);
        for y in 0..k {
            if mask.start_allowed(y) {
                alpha[[0, y]] = sanitize(u[[0, y]]);
            }
        }
        for i in 1..n {
            for y in 0..k {
                scratch.clear();
                scratch.extend(mask.predecessors(y).iter().map(|&p| alpha[[i - 1, p]] + t[[p, y]]));
                alpha[[i, y]] = sanitize(u[[i, y]] + log_sum_exp(&scratch));
            }
        }
        scratch.clear();
        scratch.extend((0..k).filter(|&y| mask.end_allowed(y)).map(|y| alpha[[n - 1, y]]));
        let log_z = log_sum_exp(&scratch);
        if is_log_zero(log_z) {
            return Err(LatticeError::NoValidPath);
        }

        let mut beta = Array2::from_elem((n, k), LOG_ZERO);
        for y in 0..k {
            if mask.end_allowed(y) {
                beta[[n - 1, y]] = 0.0;
            }
        }
        for i in (0..n - 1).rev() {
            for y in 0..k {
                scratch.clear();
                scratch.extend(
                    mask.successors(y)
                        .iter()
                        .map(|&s| t[[y, s]] + u[[i + 1, s]] + beta[[i + 1, s]]),
                );
                beta[[i, y]] = sanitize(log_sum_exp(&scratch));
            }
        }
        Ok(Inference {
            lattice: self,
            alpha,
            beta,
            log_z,
        })
    }

    pub fn log_partition(&self) -> Result<f64, LatticeError> {
        Ok(self.inference()?.log_z)
    }

    pub fn tag_marginals(&self) -> Result<Array2<f64>, LatticeError> {
        Ok(self.inference()?.marginals())
    }

    /// Log of the total score mass of taggings satisfying `observed`.
    pub fn constrained_log_partition(&self, observed: &ObservedTags) -> Result<f64, LatticeError> {
        let restricted = self.constrained(observed)?;
        restricted
            .inference()
            .map(|inf| inf.log_z)
            .map_err(|_| LatticeError::Unsatisfiable {
                position: restricted.first_dead_position(observed),
            })
    }

    /// Expected number of non-`O` tags, `sum_i (1 - p(y_i = O))`.
    pub fn expected_entity_count(&self) -> Result<f64, LatticeError> {
        Ok(self.inference()?.expected_entity_count())
    }

    /// Highest-scoring valid tagging after subtracting `o_bias` from every
    /// `O` unary score.
    ///
    /// Ties are broken towards the lowest tag index, first for the final tag
    /// and then for each back-pointer. Among equally scored taggings this
    /// selects the one that is smallest when compared from the last position
    /// backwards. The returned score is under the biased potentials.
    pub fn viterbi(&self, o_bias: f64) -> Result<(Vec<Tag>, f64), LatticeError> {
        let (n, k) = self.unary.dim();
        let mask = &self.mask;
        let t = &self.transition;
        let biased = |i: usize, y: usize| {
            let v = self.unary[[i, y]];
            if y == 0 {
                sanitize(v - o_bias)
            } else {
                v
            }
        };
        let mut delta = Array2::from_elem((n, k), LOG_ZERO);
        let mut back = Array2::<usize>::zeros((n, k));
        for y in 0..k {
            if mask.start_allowed(y) {
                delta[[0, y]] = biased(0, y);
            }
        }
        for i in 1..n {
            for y in 0..k {
                let mut best = f64::NEG_INFINITY;
                let mut arg = 0;
                for &p in mask.predecessors(y) {
                    let candidate = delta[[i - 1, p]] + t[[p, y]];
                    if candidate > best {
                        best = candidate;
                        arg = p;
                    }
                }
                if best > f64::NEG_INFINITY {
                    delta[[i, y]] = sanitize(best + biased(i, y));
                    back[[i, y]] = arg;
                }
            }
        }
        let mut best = f64::NEG_INFINITY;
        let mut last = 0;
        for y in (0..k).filter(|&y| mask.end_allowed(y)) {
            if delta[[n - 1, y]] > best {
                best = delta[[n - 1, y]];
                last = y;
            }
        }
        if is_log_zero(best) {
            return Err(LatticeError::NoValidPath);
        }
        let mut path = vec![0; n];
        path[n - 1] = last;
        for i in (1..n).rev() {
            path[i - 1] = back[[i, path[i]]];
        }
        Ok((path.into_iter().map(Tag::from_index).collect(), best))
    }

    /// Exact gradient of `output` scaled by `upstream`.
    pub fn backward_adjoints(&self, output: LatticeOutput<'_>, upstream: f64) -> Result<LatticeGradients, LatticeError> {
        let mut grads = match output {
            LatticeOutput::LogPartition => self.inference()?.log_partition_gradients(),
            LatticeOutput::ConstrainedLogPartition(observed) => {
                let restricted = self.constrained(observed)?;
                let inference = restricted.inference().map_err(|_| LatticeError::Unsatisfiable {
                    position: restricted.first_dead_position(observed),
                })?;
                inference.log_partition_gradients()
            }
            LatticeOutput::ExpectedEntityCount => self.inference()?.entity_count_gradients(),
        };
        grads.scale(upstream);
        Ok(grads)
    }

    /// First 1-based position at which no prefix survives, for reporting
    /// unsatisfiable observations.
    fn first_dead_position(&self, observed: &ObservedTags) -> usize {
        let (n, k) = self.unary.dim();
        let mut alive: Vec<bool> = (0..k)
            .map(|y| self.mask.start_allowed(y) && !is_log_zero(self.unary[[0, y]]))
            .collect();
        if !alive.iter().any(|&a| a) {
            return 1;
        }
        for i in 1..n {
            let next: Vec<bool> = (0..k)
                .map(|y| {
                    !is_log_zero(self.unary[[i, y]]) && self.mask.predecessors(y).iter().any(|&p| alive[p])
                })
                .collect();
            if !next.iter().any(|&a| a) {
                return i + 1;
            }
            alive = next;
        }
        observed.max_position().unwrap_or(n)
    }
}

/// Forward and backward tables of a lattice.
#[derive(Debug, Clone)]
pub struct Inference<'a> {
    lattice: &'a PotentialLattice,
    alpha: Array2<f64>,
    beta: Array2<f64>,
    log_z: f64,
}

impl Inference<'_> {
    pub fn log_partition(&self) -> f64 {
        self.log_z
    }

    pub fn alpha(&self) -> ArrayView2<'_, f64> {
        self.alpha.view()
    }

    pub fn beta(&self) -> ArrayView2<'_, f64> {
        self.beta.view()
    }

    /// `p(y_i = y | x)` for every position and tag.
    pub fn marginals(&self) -> Array2<f64> {
        let (n, k) = self.alpha.dim();
        Array2::from_shape_fn((n, k), |(i, y)| self.marginal(i, y))
    }

    fn marginal(&self, i: usize, y: usize) -> f64 {
        let a = self.alpha[[i, y]];
        let b = self.beta[[i, y]];
        if is_log_zero(a) || is_log_zero(b) {
            0.0
        } else {
            (a + b - self.log_z).exp()
        }
    }

    /// `p(y_i = from, y_{i+1} = to | x)` for `i` 0-based, `i + 1 < n`.
    pub fn pairwise_marginal(&self, i: usize, from: usize, to: usize) -> f64 {
        let lattice = self.lattice;
        if !lattice.mask.allowed(from, to) {
            return 0.0;
        }
        let a = self.alpha[[i, from]];
        let b = self.beta[[i + 1, to]];
        let u = lattice.unary[[i + 1, to]];
        if is_log_zero(a) || is_log_zero(b) || is_log_zero(u) {
            return 0.0;
        }
        (a + lattice.transition[[from, to]] + u + b - self.log_z).exp()
    }

    /// Pairwise marginals summed over positions.
    pub fn pairwise_sums(&self) -> Array2<f64> {
        let (n, k) = self.alpha.dim();
        let mut sums = Array2::zeros((k, k));
        for i in 0..n.saturating_sub(1) {
            for from in 0..k {
                for &to in self.lattice.mask.successors(from) {
                    sums[[from, to]] += self.pairwise_marginal(i, from, to);
                }
            }
        }
        sums
    }

    pub fn expected_entity_count(&self) -> f64 {
        let (n, k) = self.alpha.dim();
        let mut total = 0.0;
        for i in 0..n {
            for y in 1..k {
                total += self.marginal(i, y);
            }
        }
        total
    }

    /// Gradient of `log Z`: tag marginals and summed pairwise marginals.
    pub fn log_partition_gradients(&self) -> LatticeGradients {
        LatticeGradients {
            d_unary: self.marginals(),
            d_transition: self.pairwise_sums(),
        }
    }

    /// Gradient of the expected entity count.
    ///
    /// With `f` the number of non-`O` tags in a tagging, the derivative with
    /// respect to a potential is `Cov(f, indicator of that potential)`. The
    /// conditional expectations of `f` given `y_i = y` are accumulated by a
    /// forward pass (`prefix`, counting positions `0..=i`) and a backward pass
    /// (`suffix`, counting positions `i+1..n`), each weighted by the
    /// normalized incoming or outgoing edge probabilities.
    pub fn entity_count_gradients(&self) -> LatticeGradients {
        let lattice = self.lattice;
        let (n, k) = self.alpha.dim();
        let u = &lattice.unary;
        let t = &lattice.transition;
        let mask = &lattice.mask;
        let entity = |y: usize| if y == 0 { 0.0 } else { 1.0 };

        let mut prefix = Array2::<f64>::zeros((n, k));
        for y in 0..k {
            if !is_log_zero(self.alpha[[0, y]]) {
                prefix[[0, y]] = entity(y);
            }
        }
        for i in 1..n {
            for y in 0..k {
                let a = self.alpha[[i, y]];
                if is_log_zero(a) {
                    continue;
                }
                let mut acc = 0.0;
                for &p in mask.predecessors(y) {
                    let prev = self.alpha[[i - 1, p]];
                    if is_log_zero(prev) {
                        continue;
                    }
                    let w = (prev + t[[p, y]] + u[[i, y]] - a).exp();
                    acc += w * prefix[[i - 1, p]];
                }
                prefix[[i, y]] = entity(y) + acc;
            }
        }

        let mut suffix = Array2::<f64>::zeros((n, k));
        for i in (0..n - 1).rev() {
            for y in 0..k {
                let b = self.beta[[i, y]];
                if is_log_zero(b) {
                    continue;
                }
                let mut acc = 0.0;
                for &s in mask.successors(y) {
                    let next = self.beta[[i + 1, s]];
                    if is_log_zero(next) || is_log_zero(u[[i + 1, s]]) {
                        continue;
                    }
                    let v = (t[[y, s]] + u[[i + 1, s]] + next - b).exp();
                    acc += v * (entity(s) + suffix[[i + 1, s]]);
                }
                suffix[[i, y]] = acc;
            }
        }

        let expected = self.expected_entity_count();
        let mut d_unary = Array2::zeros((n, k));
        for i in 0..n {
            for y in 0..k {
                let p = self.marginal(i, y);
                if p > 0.0 {
                    d_unary[[i, y]] = p * (prefix[[i, y]] + suffix[[i, y]] - expected);
                }
            }
        }
        let mut d_transition = Array2::zeros((k, k));
        for i in 0..n.saturating_sub(1) {
            for from in 0..k {
                for &to in mask.successors(from) {
                    let p = self.pairwise_marginal(i, from, to);
                    if p > 0.0 {
                        let conditional = prefix[[i, from]] + entity(to) + suffix[[i + 1, to]];
                        d_transition[[from, to]] += p * (conditional - expected);
                    }
                }
            }
        }
        LatticeGradients { d_unary, d_transition }
    }
}

/// `log(sum(exp(values)))`, or [`LOG_ZERO`] for an empty or all-zero input.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY || is_log_zero(max) {
        return LOG_ZERO;
    }
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Row sums of a marginal table; handy for sanity checks.
pub fn row_sums(table: &Array2<f64>) -> Array1<f64> {
    table.sum_axis(Axis(1))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform(n: usize, k: usize) -> PotentialLattice {
        PotentialLattice::new(Array2::zeros((n, k)), Array2::zeros((k, k)), TransitionMask::unrestricted(k)).unwrap()
    }

    fn two_class_mask() -> TransitionMask {
        TransitionMask::biluo(&TagSet::new(&["A", "B"]).unwrap())
    }

    #[test]
    fn biluo_mask_structure() {
        let ts = TagSet::new(&["PER", "ORG"]).unwrap();
        let mask = TransitionMask::biluo(&ts);
        let t = |name: &str| ts.parse(name).unwrap().index();
        assert!(mask.allowed(t("O"), t("B-ORG")));
        assert!(mask.allowed(t("U-PER"), t("U-ORG")));
        assert!(mask.allowed(t("B-PER"), t("L-PER")));
        assert!(!mask.allowed(t("B-PER"), t("L-ORG")));
        assert!(!mask.allowed(t("B-PER"), t("O")));
        assert!(!mask.allowed(t("O"), t("I-PER")));
        assert!(mask.start_allowed(t("B-ORG")) && !mask.start_allowed(t("L-ORG")));
        assert!(mask.end_allowed(t("L-ORG")) && !mask.end_allowed(t("I-ORG")));
    }

    #[test]
    fn uniform_log_partition() {
        let lz = uniform(3, 5).log_partition().unwrap();
        assert!((lz - 3.0 * 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn single_position_is_logsumexp_of_boundary_tags() {
        let mask = two_class_mask();
        let unary = Array2::from_shape_fn((1, 9), |(_, y)| 0.3 * y as f64 - 1.0);
        let lattice = PotentialLattice::new(unary.clone(), Array2::zeros((9, 9)), mask.clone()).unwrap();
        let allowed: Vec<f64> = (0..9)
            .filter(|&y| mask.start_allowed(y) && mask.end_allowed(y))
            .map(|y| unary[[0, y]])
            .collect();
        let expected = allowed.iter().map(|v| v.exp()).sum::<f64>().ln();
        assert!((lattice.log_partition().unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn uniform_marginals_and_expected_count() {
        let lattice = uniform(4, 5);
        let m = lattice.tag_marginals().unwrap();
        for v in m.iter() {
            assert!((v - 0.2).abs() < 1e-12);
        }
        assert!((lattice.expected_entity_count().unwrap() - 3.2).abs() < 1e-12);
    }

    #[test]
    fn indicator_row() {
        let mut unary = Array2::zeros((3, 5));
        for y in 0..5 {
            if y != 2 {
                unary[[1, y]] = f64::NEG_INFINITY;
            }
        }
        let lattice = PotentialLattice::new(unary, Array2::zeros((5, 5)), TransitionMask::unrestricted(5)).unwrap();
        let m = lattice.tag_marginals().unwrap();
        for y in 0..5 {
            assert_eq!(m[[1, y]], if y == 2 { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn forcing_all_o_gives_zero_entities() {
        let mut unary = Array2::from_elem((4, 9), LOG_ZERO);
        unary.column_mut(0).fill(0.5);
        let lattice = PotentialLattice::new(unary, Array2::zeros((9, 9)), two_class_mask()).unwrap();
        assert_eq!(lattice.expected_entity_count().unwrap(), 0.0);
        let (path, _) = lattice.viterbi(0.0).unwrap();
        assert!(path.iter().all(|t| t.is_outside()));
    }

    #[test]
    fn no_valid_path_is_an_error() {
        let mut unary = Array2::from_elem((1, 9), LOG_ZERO);
        unary[[0, 1]] = 0.0; // B-A cannot end a sentence
        let lattice = PotentialLattice::new(unary, Array2::zeros((9, 9)), two_class_mask()).unwrap();
        assert_eq!(lattice.log_partition(), Err(LatticeError::NoValidPath));
        assert_eq!(lattice.viterbi(0.0), Err(LatticeError::NoValidPath));
    }

    #[test]
    fn constrained_edge_cases() {
        let unary = Array2::from_shape_fn((3, 9), |(i, y)| ((i * 7 + y * 3) % 5) as f64 * 0.4 - 0.7);
        let trans = Array2::from_shape_fn((9, 9), |(a, b)| ((a + 2 * b) % 4) as f64 * 0.25);
        let lattice = PotentialLattice::new(unary, trans, two_class_mask()).unwrap();
        let empty = ObservedTags::new();
        assert_eq!(lattice.constrained_log_partition(&empty).unwrap(), lattice.log_partition().unwrap());

        let full = [Tag::from_index(1), Tag::from_index(3), Tag::O];
        let observed = ObservedTags::from_full(&full);
        let score = lattice.path_score(&[1, 3, 0]).unwrap();
        assert!((lattice.constrained_log_partition(&observed).unwrap() - score).abs() < 1e-12);

        let mut bad = ObservedTags::new();
        bad.insert(1, Tag::from_index(1)).unwrap();
        bad.insert(2, Tag::from_index(4)).unwrap(); // B-A then U-A
        assert_eq!(
            lattice.constrained_log_partition(&bad),
            Err(LatticeError::Unsatisfiable { position: 2 })
        );
        let mut far = ObservedTags::new();
        far.insert(4, Tag::O).unwrap();
        assert!(matches!(
            lattice.constrained_log_partition(&far),
            Err(LatticeError::ObservationOutOfRange { .. })
        ));
    }

    #[test]
    fn peaked_viterbi_recovers_sequence() {
        let target = [0usize, 1, 2, 3, 8];
        let mut unary = Array2::from_elem((5, 9), -5.0);
        for (i, &y) in target.iter().enumerate() {
            unary[[i, y]] = 5.0;
        }
        let lattice = PotentialLattice::new(unary, Array2::zeros((9, 9)), two_class_mask()).unwrap();
        let (path, score) = lattice.viterbi(0.0).unwrap();
        assert_eq!(path.iter().map(|t| t.index()).collect::<Vec<_>>(), target);
        assert!((score - 25.0).abs() < 1e-12);
    }

    #[test]
    fn log_partition_gradient_is_marginals() {
        let unary = Array2::from_shape_fn((4, 9), |(i, y)| ((i * 5 + y) % 7) as f64 * 0.3);
        let trans = Array2::from_shape_fn((9, 9), |(a, b)| ((a * 3 + b) % 5) as f64 * 0.2 - 0.4);
        let lattice = PotentialLattice::new(unary, trans, two_class_mask()).unwrap();
        let grads = lattice.backward_adjoints(LatticeOutput::LogPartition, 1.0).unwrap();
        assert_eq!(grads.d_unary, lattice.tag_marginals().unwrap());
        let mask = lattice.mask();
        for ((a, b), g) in grads.d_transition.indexed_iter() {
            if !mask.allowed(a, b) {
                assert_eq!(*g, 0.0);
            }
        }
        let e = lattice.backward_adjoints(LatticeOutput::ExpectedEntityCount, 2.0).unwrap();
        for ((a, b), g) in e.d_transition.indexed_iter() {
            if !mask.allowed(a, b) {
                assert_eq!(*g, 0.0);
            }
        }
    }

    #[test]
    fn log_sum_exp_is_stable() {
        assert!((log_sum_exp(&[1234.0, 1232.0]) - 1234.126928011042972496444).abs() < 1e-9);
        assert_eq!(log_sum_exp(&[]), LOG_ZERO);
        assert_eq!(log_sum_exp(&[LOG_ZERO, LOG_ZERO]), LOG_ZERO);
    }
}
