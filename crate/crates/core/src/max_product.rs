//! Exact M step: maximize `ln p(theta | sigma2, z)` over states and
//! coefficients with max-product message passing on each wavelet tree.
//!
//! Coefficients decouple given the states, so every node contributes the
//! potential `phi(z_i)` obtained by maximizing out `s_i`. Messages, potentials
//! and beliefs are kept as natural-log pairs `[ln m(0), ln m(1)]`, normalized
//! so that `m(0) + m(1) = 1`.

use crate::error::{MpemError, Result};
use crate::hmt::{log_prior_q, HmtParams, StateEstimate, TreeStructure};

/// Conditional maximizers `(s(0), s(1)) = (eps2 z / (1 + eps2), gamma2 z / (1 + gamma2))`.
pub fn shat_pair(z: f64, params: &HmtParams) -> (f64, f64) {
    (
        params.eps2 * z / (1.0 + params.eps2),
        params.gamma2 * z / (1.0 + params.gamma2),
    )
}

/// `[ln phi_0(z), ln phi_1(z)]` with
/// `phi_q(z) = exp(-z^2 / (2 sigma2 (1 + v_q))) / sqrt(v_q)`.
pub fn log_phi(z: f64, sigma2: f64, params: &HmtParams) -> [f64; 2] {
    let zz = z * z / (2.0 * sigma2);
    [
        -zz / (1.0 + params.eps2) - 0.5 * params.eps2.ln(),
        -zz / (1.0 + params.gamma2) - 0.5 * params.gamma2.ln(),
    ]
}

fn normalize(m: [f64; 2]) -> [f64; 2] {
    // Shift first so one entry is exactly zero; adding the log-sum back onto
    // a large maximum would round it away.
    let hi = m[0].max(m[1]);
    let (a, b) = (m[0] - hi, m[1] - hi);
    let lse = a.min(b).exp().ln_1p();
    [a - lse, b - lse]
}

fn add(a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    [a[0] + b[0], a[1] + b[1]]
}

/// Per-node log messages. Entries that are undefined for a node (upward
/// messages of roots, downward messages of roots, anything on `A`) hold NaN.
#[derive(Debug, Clone)]
pub struct NodeMessages {
    pub up_log: Vec<[f64; 2]>,
    pub down_log: Vec<[f64; 2]>,
    pub belief_log: Vec<[f64; 2]>,
}

impl NodeMessages {
    fn empty(p: usize) -> Self {
        Self {
            up_log: vec![[f64::NAN; 2]; p],
            down_log: vec![[f64::NAN; 2]; p],
            belief_log: vec![[f64::NAN; 2]; p],
        }
    }
}

/// Arguments of the M step.
#[derive(Debug, Clone, Copy)]
pub struct MstepInput<'a> {
    pub z: &'a [f64],
    pub sigma2: f64,
    pub tree: &'a TreeStructure,
    pub params: &'a HmtParams,
}

impl<'a> MstepInput<'a> {
    pub fn new(
        z: &'a [f64],
        sigma2: f64,
        tree: &'a TreeStructure,
        params: &'a HmtParams,
    ) -> Result<Self> {
        if z.len() != tree.len() {
            return Err(MpemError::Dimension(format!(
                "z has length {} but the tree has {} nodes",
                z.len(),
                tree.len()
            )));
        }
        if !(sigma2 > 0.0 && sigma2.is_finite()) {
            return Err(MpemError::InvalidParameter(format!(
                "sigma2 must be positive, got {sigma2}"
            )));
        }
        Ok(Self {
            z,
            sigma2,
            tree,
            params,
        })
    }

    fn phis(&self) -> Vec<[f64; 2]> {
        let (le, lg) = (0.5 * self.params.eps2.ln(), 0.5 * self.params.gamma2.ln());
        let (ce, cg) = (
            1.0 / (2.0 * self.sigma2 * (1.0 + self.params.eps2)),
            1.0 / (2.0 * self.sigma2 * (1.0 + self.params.gamma2)),
        );
        self.z
            .iter()
            .map(|z| [-z * z * ce - le, -z * z * cg - lg])
            .collect()
    }
}

fn root_prior(params: &HmtParams) -> [f64; 2] {
    [(1.0 - params.p_root).ln(), params.p_root.ln()]
}

/// `ln eta^u_i`: sum of the children's upward messages, zero at leaves.
fn eta_up(tree: &TreeStructure, msgs: &NodeMessages, i: usize) -> [f64; 2] {
    tree.children(i)
        .iter()
        .fold([0.0, 0.0], |acc, &k| add(acc, msgs.up_log[k]))
}

/// Leaves to roots: `mu^u_i(q_parent) = max_{q_i} P(q_i | q_parent) phi_i(q_i) eta^u_i(q_i)`.
pub fn upward_pass(input: &MstepInput) -> NodeMessages {
    let tree = input.tree;
    let p = input.params;
    let (l0, l1) = ((1.0 - p.p_low).ln(), p.p_low.ln());
    let (h0, h1) = ((1.0 - p.p_high).ln(), p.p_high.ln());
    let phi = input.phis();
    let mut msgs = NodeMessages::empty(tree.len());
    for order in tree.trees() {
        for &i in order.iter().rev() {
            if tree.is_root(i) {
                continue;
            }
            let a = add(phi[i], eta_up(tree, &msgs, i));
            // Ties inside the max keep the q_i = 0 branch.
            let m0 = if l0 + a[0] >= l1 + a[1] { l0 + a[0] } else { l1 + a[1] };
            let m1 = if h0 + a[0] >= h1 + a[1] { h0 + a[0] } else { h1 + a[1] };
            msgs.up_log[i] = normalize([m0, m1]);
        }
    }
    msgs
}

/// Roots to leaves: `mu^d_i(q_i) = max_{q_parent} P(q_i | q_parent) phi_parent
/// prod_{siblings} mu^u eta^d_parent`, with `eta^d` the root prior below a
/// root and the parent's own downward message elsewhere.
pub fn downward_pass(input: &MstepInput, up: NodeMessages) -> NodeMessages {
    let tree = input.tree;
    let p = input.params;
    let (l0, l1) = ((1.0 - p.p_low).ln(), p.p_low.ln());
    let (h0, h1) = ((1.0 - p.p_high).ln(), p.p_high.ln());
    let prior = root_prior(p);
    let phi = input.phis();
    let mut msgs = up;
    for order in tree.trees() {
        for &i in order {
            let Some(par) = tree.parent(i) else {
                continue;
            };
            let eta_d = if tree.is_root(par) {
                prior
            } else {
                let d = msgs.down_log[par];
                assert!(!d[0].is_nan(), "parent message computed after child");
                d
            };
            let mut b = add(phi[par], eta_d);
            for &k in tree.children(par) {
                if k != i {
                    b = add(b, msgs.up_log[k]);
                }
            }
            let d0 = if l0 + b[0] >= h0 + b[1] { l0 + b[0] } else { h0 + b[1] };
            let d1 = if l1 + b[0] >= h1 + b[1] { l1 + b[0] } else { h1 + b[1] };
            msgs.down_log[i] = normalize([d0, d1]);
        }
    }
    msgs
}

/// Fills `belief_log` and decodes `q_i = 1` iff `beta_i(1) >= beta_i(0)`.
///
/// The result has full length; entries on `A` are left at `q = 1, s = 0`
/// and are set by [`mstep`].
pub fn maximize_beliefs(input: &MstepInput, msgs: &mut NodeMessages) -> StateEstimate {
    let tree = input.tree;
    let prior = root_prior(input.params);
    let phi = input.phis();
    let mut est = StateEstimate::zeros(tree);
    for &i in tree.set_t() {
        let incoming = if tree.is_root(i) { prior } else { msgs.down_log[i] };
        let beta = normalize(add(add(phi[i], incoming), eta_up(tree, msgs, i)));
        msgs.belief_log[i] = beta;
        let high = beta[1] >= beta[0];
        let (s0, s1) = shat_pair(input.z[i], input.params);
        est.q[i] = high;
        est.s[i] = if high { s1 } else { s0 };
    }
    est
}

/// Complete M step; returns the maximizer together with all messages.
pub fn mstep_with_messages(input: &MstepInput) -> (StateEstimate, NodeMessages) {
    let up = upward_pass(input);
    let mut msgs = downward_pass(input, up);
    let mut est = maximize_beliefs(input, &mut msgs);
    for &i in input.tree.set_a() {
        est.q[i] = true;
        est.s[i] = shat_pair(input.z[i], input.params).1;
    }
    (est, msgs)
}

/// `argmax_theta ln p(theta | sigma2, z)`.
pub fn mstep(input: &MstepInput) -> StateEstimate {
    mstep_with_messages(input).0
}

/// `ln p(theta | sigma2, z)` up to a theta-independent constant:
/// `-(||z - s||^2 + s' D(q)^{-1} s) / (2 sigma2) + 0.5 ln(eps2/gamma2) sum q + ln p(q)`.
pub fn mstep_objective(
    theta: &StateEstimate,
    z: &[f64],
    sigma2: f64,
    tree: &TreeStructure,
    params: &HmtParams,
) -> f64 {
    let mut quad = 0.0;
    let mut n_high = 0usize;
    for ((&q, &s), &zi) in theta.q.iter().zip(&theta.s).zip(z) {
        let v = params.relative_variance(q);
        quad += (zi - s) * (zi - s) + s * s / v;
        n_high += q as usize;
    }
    -0.5 * quad / sigma2
        + 0.5 * (params.eps2 / params.gamma2).ln() * n_high as f64
        + log_prior_q(&theta.q, tree, params)
}
