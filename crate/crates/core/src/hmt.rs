//! Wavelet quadtree index algebra and the hidden Markov tree prior.
//!
//! Coefficients of a `rows x cols` two-level-or-deeper Haar decomposition are
//! laid out in the usual Mallat arrangement (coarsest approximation block in
//! the top-left corner) and linearized columnwise. Internally node indices
//! are 0-based; [`upsilon`] and [`upsilon_inv`] expose the 1-based convention
//! used when talking about grid positions.
//!
//! The node sets are
//!
//! * `A`      - approximation coefficients, the top-left `rows/2^L x cols/2^L` block;
//! * `T_root` - the top-left `rows/2^(L-1) x cols/2^(L-1)` block minus `A`;
//! * `T`      - every coefficient not in `A`;
//! * `T_leaf` - every coefficient outside the top-left `rows/2 x cols/2` block.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::error::{MpemError, Result};
use crate::rng::rng_from_seed;

/// 1-based columnwise linearization `(i1, i2) -> (i2 - 1) * rows + i1`.
pub fn upsilon(i1: usize, i2: usize, rows: usize) -> Result<usize> {
    if i1 == 0 || i1 > rows || i2 == 0 {
        return Err(MpemError::Range(format!(
            "grid position ({i1}, {i2}) outside a grid with {rows} rows"
        )));
    }
    Ok((i2 - 1) * rows + i1)
}

/// Inverse of [`upsilon`].
pub fn upsilon_inv(i: usize, rows: usize) -> Result<(usize, usize)> {
    if i == 0 || rows == 0 {
        return Err(MpemError::Range(format!(
            "node index {i} invalid for a grid with {rows} rows"
        )));
    }
    let k = i - 1;
    Ok((k % rows + 1, k / rows + 1))
}

const IN_A: u8 = 1;
const IS_ROOT: u8 = 2;
const IS_LEAF: u8 = 4;

/// Quadtree structure over a `rows x cols` coefficient grid.
#[derive(Debug, Clone)]
pub struct TreeStructure {
    rows: usize,
    cols: usize,
    levels: usize,
    flags: Vec<u8>,
    parent: Vec<Option<usize>>,
    children: Vec<[usize; 4]>,
    depth: Vec<usize>,
    set_a: Vec<usize>,
    set_root: Vec<usize>,
    set_t: Vec<usize>,
    set_leaf: Vec<usize>,
    /// Breadth-first node order of each tree, one entry per root.
    trees: Vec<Vec<usize>>,
}

impl TreeStructure {
    pub fn new(rows: usize, cols: usize, levels: usize) -> Result<Self> {
        if levels < 1 {
            return Err(MpemError::InvalidLevels(levels));
        }
        let block = 1usize
            .checked_shl(levels as u32)
            .filter(|b| *b > 0 && levels < usize::BITS as usize)
            .ok_or_else(|| MpemError::Dimension(format!("{levels} levels is too deep")))?;
        if rows == 0 || cols == 0 || !rows.is_multiple_of(block) || !cols.is_multiple_of(block) {
            return Err(MpemError::Dimension(format!(
                "{rows}x{cols} grid is not divisible by 2^{levels} = {block}"
            )));
        }

        let p = rows * cols;
        let (ar, ac) = (rows >> levels, cols >> levels);
        let (rr, rc) = (rows >> (levels - 1), cols >> (levels - 1));
        let (hr, hc) = (rows / 2, cols / 2);
        let idx = |r: usize, c: usize| c * rows + r;

        let mut flags = vec![0u8; p];
        let mut parent = vec![None; p];
        let mut children = vec![[usize::MAX; 4]; p];
        let mut depth = vec![0usize; p];
        let (mut set_a, mut set_root, mut set_t, mut set_leaf) =
            (Vec::new(), Vec::new(), Vec::new(), Vec::new());

        for c in 0..cols {
            for r in 0..rows {
                let i = idx(r, c);
                if r < ar && c < ac {
                    flags[i] |= IN_A;
                    set_a.push(i);
                    continue;
                }
                set_t.push(i);
                if r < rr && c < rc {
                    flags[i] |= IS_ROOT;
                    set_root.push(i);
                } else {
                    parent[i] = Some(idx(r / 2, c / 2));
                }
                if r >= hr || c >= hc {
                    flags[i] |= IS_LEAF;
                    set_leaf.push(i);
                } else {
                    children[i] = [
                        idx(2 * r, 2 * c),
                        idx(2 * r, 2 * c + 1),
                        idx(2 * r + 1, 2 * c),
                        idx(2 * r + 1, 2 * c + 1),
                    ];
                }
            }
        }

        let mut trees = Vec::with_capacity(set_root.len());
        for &root in &set_root {
            let mut order = vec![root];
            let mut head = 0;
            while head < order.len() {
                let i = order[head];
                head += 1;
                if flags[i] & IS_LEAF == 0 {
                    for k in children[i] {
                        depth[k] = depth[i] + 1;
                        order.push(k);
                    }
                }
            }
            trees.push(order);
        }

        Ok(Self {
            rows,
            cols,
            levels,
            flags,
            parent,
            children,
            depth,
            set_a,
            set_root,
            set_t,
            set_leaf,
            trees,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    /// Number of coefficients `p = rows * cols`.
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// 0-based columnwise index of 0-based grid position `(row, col)`.
    pub fn index(&self, row: usize, col: usize) -> usize {
        col * self.rows + row
    }

    pub fn in_a(&self, i: usize) -> bool {
        self.flags[i] & IN_A != 0
    }

    pub fn is_root(&self, i: usize) -> bool {
        self.flags[i] & IS_ROOT != 0
    }

    pub fn is_leaf(&self, i: usize) -> bool {
        self.flags[i] & IS_LEAF != 0
    }

    /// Parent inside `T`; `None` for roots and approximation nodes.
    pub fn parent(&self, i: usize) -> Option<usize> {
        self.parent[i]
    }

    /// The four children of an interior tree node, empty otherwise.
    pub fn children(&self, i: usize) -> &[usize] {
        if self.flags[i] & (IN_A | IS_LEAF) != 0 {
            &[]
        } else {
            &self.children[i]
        }
    }

    /// Distance from the root of the node's tree (roots are at depth 0).
    pub fn depth(&self, i: usize) -> usize {
        self.depth[i]
    }

    pub fn set_a(&self) -> &[usize] {
        &self.set_a
    }

    pub fn set_root(&self) -> &[usize] {
        &self.set_root
    }

    pub fn set_t(&self) -> &[usize] {
        &self.set_t
    }

    pub fn set_leaf(&self) -> &[usize] {
        &self.set_leaf
    }

    /// Breadth-first order of every tree; parents precede children.
    pub fn trees(&self) -> &[Vec<usize>] {
        &self.trees
    }
}

/// Tuning constants of the signal and state prior.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HmtParams {
    pub gamma2: f64,
    pub eps2: f64,
    pub p_root: f64,
    pub p_high: f64,
    pub p_low: f64,
}

impl HmtParams {
    /// Validated constructor. `gamma2 == eps2` is admitted so that the
    /// symmetric corner cases remain expressible.
    pub fn new(gamma2: f64, eps2: f64, p_root: f64, p_high: f64, p_low: f64) -> Result<Self> {
        let params = Self {
            gamma2,
            eps2,
            p_root,
            p_high,
            p_low,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps2 > 0.0 && self.eps2.is_finite()) {
            return Err(MpemError::InvalidParameter(format!(
                "eps2 must be positive, got {}",
                self.eps2
            )));
        }
        if !(self.gamma2 >= self.eps2 && self.gamma2.is_finite()) {
            return Err(MpemError::InvalidParameter(format!(
                "gamma2 ({}) must be at least eps2 ({})",
                self.gamma2, self.eps2
            )));
        }
        for (name, v) in [
            ("p_root", self.p_root),
            ("p_high", self.p_high),
            ("p_low", self.p_low),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return Err(MpemError::InvalidParameter(format!(
                    "{name} must lie in (0, 1), got {v}"
                )));
            }
        }
        Ok(())
    }

    /// Prior variance of a coefficient relative to the noise variance.
    pub fn relative_variance(&self, high: bool) -> f64 {
        if high {
            self.gamma2
        } else {
            self.eps2
        }
    }
}

impl Default for HmtParams {
    /// Reconstruction defaults: `gamma2 = 1000, eps2 = 0.1,
    /// p_root = p_high = 0.2, p_low = 1e-5`.
    fn default() -> Self {
        Self {
            gamma2: 1000.0,
            eps2: 0.1,
            p_root: 0.2,
            p_high: 0.2,
            p_low: 1e-5,
        }
    }
}

/// Binary states and coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct StateEstimate {
    pub q: Vec<bool>,
    pub s: Vec<f64>,
}

impl StateEstimate {
    /// All-low states on `T`, high on `A`, zero coefficients.
    pub fn zeros(tree: &TreeStructure) -> Self {
        let p = tree.len();
        let q = (0..p).map(|i| tree.in_a(i)).collect();
        Self {
            q,
            s: vec![0.0; p],
        }
    }

    pub fn len(&self) -> usize {
        self.s.len()
    }

    pub fn is_empty(&self) -> bool {
        self.s.is_empty()
    }

    pub fn high_count(&self) -> usize {
        self.q.iter().filter(|&&b| b).count()
    }
}

/// Marginal probability `P_l` of a high state at every tree depth `0..levels`.
pub fn level_high_probabilities(params: &HmtParams, levels: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(levels);
    let mut pl = params.p_root;
    for _ in 0..levels {
        out.push(pl);
        pl = pl * params.p_high + (1.0 - pl) * params.p_low;
    }
    out
}

/// Expected fraction of high states, `E[sum q_i] / p`, including `A`.
pub fn expected_high_fraction(params: &HmtParams, levels: usize) -> Result<f64> {
    if levels < 1 {
        return Err(MpemError::InvalidLevels(levels));
    }
    let weighted: f64 = level_high_probabilities(params, levels)
        .iter()
        .enumerate()
        .map(|(l, pl)| 4f64.powi(l as i32) * pl)
        .sum();
    Ok((1.0 + 3.0 * weighted) / 4f64.powi(levels as i32))
}

/// Log prior of a state vector with the additive constant fixed at zero.
///
/// Returns `-inf` when a state in `A` is low.
pub fn log_prior_q(q: &[bool], tree: &TreeStructure, params: &HmtParams) -> f64 {
    debug_assert_eq!(q.len(), tree.len());
    if tree.set_a().iter().any(|&i| !q[i]) {
        return f64::NEG_INFINITY;
    }
    let ln = |high: bool, p: f64| if high { p.ln() } else { (1.0 - p).ln() };
    let mut total = 0.0;
    for &i in tree.set_t() {
        total += match tree.parent(i) {
            None => ln(q[i], params.p_root),
            Some(par) if q[par] => ln(q[i], params.p_high),
            Some(_) => ln(q[i], params.p_low),
        };
    }
    total
}

/// Draw `(q, s)` from the prior: states top-down along each tree, then
/// `s_i ~ N(0, sigma2 * gamma2)` for high and `N(0, sigma2 * eps2)` for low states.
pub fn sample_prior(
    tree: &TreeStructure,
    params: &HmtParams,
    sigma2: f64,
    seed: u64,
) -> Result<StateEstimate> {
    if !(sigma2 > 0.0 && sigma2.is_finite()) {
        return Err(MpemError::InvalidParameter(format!(
            "sigma2 must be positive, got {sigma2}"
        )));
    }
    let mut rng = rng_from_seed(seed);
    let p = tree.len();
    let mut q = vec![false; p];
    for &i in tree.set_a() {
        q[i] = true;
    }
    for order in tree.trees() {
        for &i in order {
            let prob = match tree.parent(i) {
                None => params.p_root,
                Some(par) if q[par] => params.p_high,
                Some(_) => params.p_low,
            };
            q[i] = rng.random::<f64>() < prob;
        }
    }
    let std_high = (sigma2 * params.gamma2).sqrt();
    let std_low = (sigma2 * params.eps2).sqrt();
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let s = q
        .iter()
        .map(|&high| unit.sample(&mut rng) * if high { std_high } else { std_low })
        .collect();
    Ok(StateEstimate { q, s })
}
