//! Exact computations on tiny binary instances.
//!
//! The key quantity is `I(X_u(k); Y)`, the information the whole anonymized
//! matrix `Y` carries about one true sample, obtained by summing over every
//! observation matrix and every permutation of the users (uniform prior).
//! Samples are i.i.d. over time, so the per-time tables below are all that
//! is needed.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mechanisms::{decorrelation_bound, PairChannel};

/// Largest admissible `2^(n m) * n!`.
pub const ENUMERATION_BUDGET: u128 = 10_000_000;

const PROB_TOL: f64 = 1e-12;

/// A tiny two-state instance. Outcome index `x` encodes `X_u = (x >> u) & 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TinyInstance {
    pub n: usize,
    pub m: usize,
    /// Single-time joint law of `(X_0, .., X_{n-1})`.
    pub joint: Vec<f64>,
    /// Per-time obfuscation channel `channel[x][z] = P(Z = z | X = x)`;
    /// `None` means no obfuscation.
    #[serde(default)]
    pub channel: Option<Vec<Vec<f64>>>,
}

impl TinyInstance {
    pub fn from_joint(n: usize, m: usize, joint: Vec<f64>) -> Result<Self> {
        if n == 0 || m == 0 {
            return Err(Error::Config("tiny instance needs n >= 1 and m >= 1".into()));
        }
        if n > 16 {
            return Err(Error::Config(format!("n = {n} is far beyond exact enumeration")));
        }
        if joint.len() != 1 << n {
            return Err(Error::Config(format!("joint over {n} users must have {} entries", 1 << n)));
        }
        check_distribution(&joint, "joint")?;
        Ok(TinyInstance { n, m, joint, channel: None })
    }

    /// Mutually independent users.
    pub fn independent(marginals: &[f64], m: usize) -> Result<Self> {
        let n = marginals.len();
        if marginals.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Domain(format!("marginals {marginals:?} outside [0,1]")));
        }
        let joint = (0..1usize << n)
            .map(|x| (0..n).map(|u| if (x >> u) & 1 == 1 { marginals[u] } else { 1.0 - marginals[u] }).product())
            .collect();
        Self::from_joint(n, m, joint)
    }

    /// Two users with pair joint `[p00, p01, p10, p11]` over `(X_0, X_1)`.
    pub fn pair(joint: [f64; 4], m: usize) -> Result<Self> {
        Self::from_joint(2, m, vec![joint[0], joint[2], joint[1], joint[3]])
    }

    /// Independent flips with fixed per-user probabilities `R_u`.
    pub fn with_fixed_noise(mut self, noise: &[f64]) -> Result<Self> {
        if noise.len() != self.n || noise.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(Error::Domain("fixed noise must give one probability in [0,1] per user".into()));
        }
        let size = 1usize << self.n;
        let channel = (0..size)
            .map(|x| {
                (0..size)
                    .map(|z| {
                        (0..self.n).map(|u| if ((x ^ z) >> u) & 1 == 1 { noise[u] } else { 1.0 - noise[u] }).product()
                    })
                    .collect()
            })
            .collect();
        self.channel = Some(channel);
        Ok(self)
    }

    pub fn with_channel(mut self, channel: Vec<Vec<f64>>) -> Result<Self> {
        let size = 1usize << self.n;
        if channel.len() != size || channel.iter().any(|row| row.len() != size) {
            return Err(Error::Config(format!("channel must be {size}x{size}")));
        }
        for row in &channel {
            check_distribution(row, "channel row")?;
        }
        self.channel = Some(channel);
        Ok(self)
    }

    pub fn enumeration_size(&self) -> u128 {
        let perms: u128 = (1..=self.n as u128).product();
        let bits = (self.n * self.m) as u32;
        if bits >= 100 {
            return u128::MAX;
        }
        (1u128 << bits).saturating_mul(perms)
    }

    /// `P(Z(t) = z)` and `P(Z(t) = z, X_u(t) = a)`.
    fn tables(&self, u: usize) -> (Vec<f64>, [Vec<f64>; 2]) {
        let size = 1usize << self.n;
        let mut qz = vec![0.0; size];
        let mut qzx = [vec![0.0; size], vec![0.0; size]];
        for x in 0..size {
            let px = self.joint[x];
            let a = (x >> u) & 1;
            for z in 0..size {
                let pzx = match &self.channel {
                    Some(ch) => ch[x][z],
                    None => f64::from(u8::from(x == z)),
                };
                qz[z] += px * pzx;
                qzx[a][z] += px * pzx;
            }
        }
        (qz, qzx)
    }
}

fn check_distribution(p: &[f64], what: &str) -> Result<()> {
    if p.iter().any(|&v| !(-PROB_TOL..=1.0 + PROB_TOL).contains(&v)) {
        return Err(Error::Domain(format!("{what} has entries outside [0,1]")));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Domain(format!("{what} sums to {sum}")));
    }
    Ok(())
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    fn rec(prefix: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if prefix.len() == used.len() {
            out.push(prefix.clone());
            return;
        }
        for i in 0..used.len() {
            if !used[i] {
                used[i] = true;
                prefix.push(i);
                rec(prefix, used, out);
                prefix.pop();
                used[i] = false;
            }
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::new(), &mut vec![false; n], &mut out);
    out
}

fn plogp_ratio(joint: f64, a: f64, b: f64) -> f64 {
    if joint <= 0.0 {
        0.0
    } else {
        joint * (joint / (a * b)).log2()
    }
}

/// Exact `I(X_u(k); Y)` in bits, with `Y` the anonymized (and, if the
/// instance has a channel, obfuscated) matrix.
pub fn exact_mi_anonymized(inst: &TinyInstance, u: usize, k: usize) -> Result<f64> {
    if u >= inst.n || k >= inst.m {
        return Err(Error::Config(format!("target (u = {u}, k = {k}) outside {}x{} instance", inst.m, inst.n)));
    }
    let size = inst.enumeration_size();
    if size > ENUMERATION_BUDGET {
        return Err(Error::BudgetExceeded { size, budget: ENUMERATION_BUDGET });
    }
    let (n, m) = (inst.n, inst.m);
    let (qz, qzx) = inst.tables(u);
    let perms = permutations(n);
    let weight = 1.0 / perms.len() as f64;
    let words = 1usize << n;
    // For each permutation, the Z word seen behind a Y word: Z_v = Y_{pi(v)}.
    let unshuffle: Vec<Vec<usize>> =
        perms.iter().map(|pi| (0..words).map(|y| (0..n).map(|v| ((y >> pi[v]) & 1) << v).sum()).collect()).collect();
    let pa = [qzx[0].iter().sum::<f64>(), qzx[1].iter().sum::<f64>()];

    let mut mi = 0.0;
    let mut y = vec![0usize; m];
    loop {
        let mut pya = [0.0f64; 2];
        for map in &unshuffle {
            let rest: f64 = (0..m).filter(|&t| t != k).map(|t| qz[map[y[t]]]).product();
            let zk = map[y[k]];
            pya[0] += weight * rest * qzx[0][zk];
            pya[1] += weight * rest * qzx[1][zk];
        }
        let py = pya[0] + pya[1];
        mi += plogp_ratio(pya[0], py, pa[0]) + plogp_ratio(pya[1], py, pa[1]);

        // Odometer over the m words of y.
        let mut t = 0;
        while t < m {
            y[t] += 1;
            if y[t] < words {
                break;
            }
            y[t] = 0;
            t += 1;
        }
        if t == m {
            break;
        }
    }
    Ok(mi.max(0.0))
}

fn check_pair_joint(joint: &[f64; 4]) -> Result<()> {
    check_distribution(joint, "pair joint")
}

/// Mutual information in bits of a pair joint `[p00, p01, p10, p11]`.
pub fn exact_pair_mi(joint: &[f64; 4]) -> Result<f64> {
    check_pair_joint(joint)?;
    let row = [joint[0] + joint[1], joint[2] + joint[3]];
    let col = [joint[0] + joint[2], joint[1] + joint[3]];
    let mut mi = 0.0;
    for a in 0..2 {
        for b in 0..2 {
            mi += plogp_ratio(joint[2 * a + b], row[a], col[b]);
        }
    }
    Ok(mi.max(0.0))
}

/// Per-time channel matrix of a pair channel on the two-user instance,
/// where the channel's lower user id occupies bit 0.
pub fn pair_channel_matrix(channel: &PairChannel) -> Vec<Vec<f64>> {
    let driver_bit = usize::from(channel.driver > channel.driven);
    let driven_bit = 1 - driver_bit;
    let mut out = vec![vec![0.0; 4]; 4];
    for (x, row) in out.iter_mut().enumerate() {
        let d = (x >> driver_bit) & 1;
        let v = (x >> driven_bit) & 1;
        let rule = channel.rules[d];
        let flip = if v as u8 == rule.from { rule.prob } else { 0.0 };
        row[x] += 1.0 - flip;
        row[x ^ (1 << driven_bit)] += flip;
    }
    out
}

/// Exact audit of a pair channel against its input joint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelReport {
    pub output_joint: [f64; 4],
    pub covariance: f64,
    /// `P(X = 1)` of the lower and higher user after the channel.
    pub marginals: [f64; 2],
    pub flip_rates: [f64; 2],
    pub bound: f64,
    pub failures: Vec<String>,
}

impl ChannelReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Enumerates the four input outcomes through the channel and checks that
/// the output covariance vanishes and the flip rates respect the bound.
pub fn verify_pair_channel(joint: &[f64; 4], channel: &PairChannel) -> Result<ChannelReport> {
    check_pair_joint(joint)?;
    let driver_slot = usize::from(channel.driver > channel.driven);
    let mut output = [0.0; 4];
    let mut flip_rates = [0.0; 2];
    for a in 0..2usize {
        for b in 0..2usize {
            let mass = joint[2 * a + b];
            let (d, v) = if driver_slot == 0 { (a, b) } else { (b, a) };
            let rule = channel.rules[d];
            let flip = if v as u8 == rule.from { rule.prob } else { 0.0 };
            flip_rates[1 - driver_slot] += mass * flip;
            let stay = 2 * a + b;
            let moved = if driver_slot == 0 { 2 * a + (1 - b) } else { 2 * (1 - a) + b };
            output[stay] += mass * (1.0 - flip);
            output[moved] += mass * flip;
        }
    }
    let p_i = joint[2] + joint[3];
    let p_j = joint[1] + joint[3];
    let marginals = [output[2] + output[3], output[1] + output[3]];
    let covariance = output[3] - marginals[0] * marginals[1];
    let bound = decorrelation_bound(p_i, p_j, joint[3]);

    let mut failures = Vec::new();
    if covariance.abs() >= 1e-12 {
        failures.push(format!("output covariance {covariance:e} is not zero"));
    }
    if flip_rates[1 - driver_slot] > bound + 1e-12 {
        failures.push(format!("driven flip rate {} exceeds bound {bound}", flip_rates[1 - driver_slot]));
    }
    if flip_rates[driver_slot] != 0.0 {
        failures.push(format!("driver flip rate {} is not zero", flip_rates[driver_slot]));
    }
    if (channel.flip_rate_driven - flip_rates[1 - driver_slot]).abs() > 1e-12 {
        failures.push(format!(
            "declared driven flip rate {} disagrees with enumeration {}",
            channel.flip_rate_driven,
            flip_rates[1 - driver_slot]
        ));
    }
    Ok(ChannelReport { output_joint: output, covariance, marginals, flip_rates, bound, failures })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mechanisms::build_pair_channel;

    #[test]
    fn lone_fair_user_reveals_one_bit() {
        let inst = TinyInstance::independent(&[0.5], 1).unwrap();
        assert!((exact_mi_anonymized(&inst, 0, 0).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn two_independent_fair_users_reveal_half_a_bit() {
        let inst = TinyInstance::independent(&[0.5, 0.5], 1).unwrap();
        assert!((exact_mi_anonymized(&inst, 0, 0).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn identical_fair_users_reveal_one_bit() {
        let inst = TinyInstance::pair([0.5, 0.0, 0.0, 0.5], 1).unwrap();
        assert!((exact_mi_anonymized(&inst, 0, 0).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn full_noise_on_a_lone_fair_user_hides_nothing_and_half_noise_hides_all() {
        let inst = TinyInstance::independent(&[0.5], 2).unwrap();
        let flipped = inst.clone().with_fixed_noise(&[1.0]).unwrap();
        assert!((exact_mi_anonymized(&flipped, 0, 1).unwrap() - 1.0).abs() < 1e-12);
        let erased = inst.with_fixed_noise(&[0.5]).unwrap();
        assert!(exact_mi_anonymized(&erased, 0, 0).unwrap().abs() < 1e-12);
    }

    #[test]
    fn relabeling_identical_users_does_not_change_mi() {
        let inst = TinyInstance::independent(&[0.3, 0.3, 0.8], 2).unwrap();
        let swapped = TinyInstance::independent(&[0.8, 0.3, 0.3], 2).unwrap();
        let a = exact_mi_anonymized(&inst, 0, 1).unwrap();
        let b = exact_mi_anonymized(&inst, 1, 1).unwrap();
        let c = exact_mi_anonymized(&swapped, 2, 1).unwrap();
        assert!((a - b).abs() < 1e-12 && (a - c).abs() < 1e-12);
    }

    #[test]
    fn budget_is_enforced() {
        let inst = TinyInstance::independent(&[0.5; 8], 3).unwrap();
        assert!(matches!(exact_mi_anonymized(&inst, 0, 0), Err(Error::BudgetExceeded { .. })));
    }

    #[test]
    fn pair_mi_values() {
        assert!(exact_pair_mi(&[0.06, 0.14, 0.24, 0.56]).unwrap().abs() < 1e-12);
        assert!((exact_pair_mi(&[0.5, 0.0, 0.0, 0.5]).unwrap() - 1.0).abs() < 1e-12);
        // Direct formula on (0.3, 0.2, 0.2, 0.3) with uniform marginals.
        let expected = 2.0 * 0.3 * (0.3f64 / 0.25).log2() + 2.0 * 0.2 * (0.2f64 / 0.25).log2();
        assert!((exact_pair_mi(&[0.3, 0.2, 0.2, 0.3]).unwrap() - expected).abs() < 1e-15);
        assert!(exact_pair_mi(&[0.5, 0.5, 0.5, 0.0]).is_err());
    }

    #[test]
    fn verified_worked_channels() {
        let identity = build_pair_channel(0, 1, 0.4, 0.5, 0.2).unwrap();
        let rep = verify_pair_channel(&[0.3, 0.3, 0.2, 0.2], &identity).unwrap();
        assert!(rep.passed(), "{:?}", rep.failures);
        assert_eq!(rep.flip_rates, [0.0, 0.0]);

        let fair = build_pair_channel(0, 1, 0.5, 0.5, 0.3).unwrap();
        let rep = verify_pair_channel(&[0.3, 0.2, 0.2, 0.3], &fair).unwrap();
        assert!(rep.passed(), "{:?}", rep.failures);
        assert!((rep.flip_rates[1] - 0.1).abs() < 1e-15);
        assert!(rep.covariance.abs() < 1e-12);

        // p_i = 0.8, p_j = 0.5, p11 = 0.45.
        let skew = build_pair_channel(0, 1, 0.8, 0.5, 0.45).unwrap();
        let rep = verify_pair_channel(&[0.15, 0.05, 0.35, 0.45], &skew).unwrap();
        assert!(rep.passed(), "{:?}", rep.failures);
        assert!((rep.flip_rates[1] - 0.0625).abs() < 1e-15);
    }

    #[test]
    fn channel_matrix_agrees_with_joint_push_forward() {
        let joint = [0.15, 0.05, 0.35, 0.45];
        for (p_i, p_j, p11) in [(0.8, 0.5, 0.45), (0.5, 0.8, 0.45)] {
            let joint = if p_i > p_j { joint } else { [joint[0], joint[2], joint[1], joint[3]] };
            let ch = build_pair_channel(0, 1, p_i, p_j, p11).unwrap();
            let mat = pair_channel_matrix(&ch);
            let inst = TinyInstance::pair(joint, 1).unwrap();
            let mut out = [0.0; 4];
            for x in 0..4 {
                for z in 0..4 {
                    out[z] += inst.joint[x] * mat[x][z];
                }
            }
            let expected = ch.apply_to_joint(&joint);
            let as_tiny = [expected[0], expected[2], expected[1], expected[3]];
            for z in 0..4 {
                assert!((out[z] - as_tiny[z]).abs() < 1e-15);
            }
        }
    }
}
