//! The random gate: a per-channel availability switch. Open channels feed the
//! generator; closed channels are blanked at the input and become the targets
//! scored at the output through the inverted gate.

use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::autograd::Tensor;
use crate::dataset::{MultiChannelImage, Plane};
use crate::error::{Error, Result};

/// `true` = channel available (open), `false` = missing (closed).
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct GateVector {
    bits: Vec<bool>,
}

impl GateVector {
    pub fn new(bits: Vec<bool>) -> Self {
        GateVector { bits }
    }

    pub fn all_open(n: usize) -> Self {
        GateVector { bits: vec![true; n] }
    }

    /// Gate with exactly the listed channels closed.
    pub fn with_missing(n: usize, missing: &[usize]) -> Result<Self> {
        let mut bits = vec![true; n];
        for &m in missing {
            *bits
                .get_mut(m)
                .ok_or_else(|| Error::Gate(format!("channel {m} out of range for {n}")))? = false;
        }
        Ok(GateVector { bits })
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn is_open(&self, channel: usize) -> bool {
        self.bits[channel]
    }

    pub fn open_count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn closed_count(&self) -> usize {
        self.bits.len() - self.open_count()
    }

    pub fn closed_channels(&self) -> Vec<usize> {
        (0..self.bits.len()).filter(|&i| !self.bits[i]).collect()
    }

    /// Training/evaluation gates need at least one open and one closed channel.
    pub fn validate(&self, n: usize) -> Result<()> {
        if self.bits.len() != n {
            return Err(Error::Gate(format!(
                "gate of length {} for {n} channels",
                self.bits.len()
            )));
        }
        if self.open_count() == 0 {
            return Err(Error::Gate("every channel is closed".into()));
        }
        if self.closed_count() == 0 {
            return Err(Error::Gate("no channel is missing; nothing to synthesize".into()));
        }
        Ok(())
    }

    /// Per-channel multipliers: 1.0 where open.
    pub fn as_mask(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }
}

impl fmt::Display for GateVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for &b in &self.bits {
            f.write_str(if b { "1" } else { "0" })?;
        }
        Ok(())
    }
}

impl FromStr for GateVector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bits = s
            .chars()
            .map(|c| match c {
                '1' => Ok(true),
                '0' => Ok(false),
                other => Err(Error::Gate(format!("unexpected character {other:?} in {s:?}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        if bits.is_empty() {
            return Err(Error::Gate("empty gate string".into()));
        }
        Ok(GateVector { bits })
    }
}

impl Serialize for GateVector {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for GateVector {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

pub fn invert(gate: &GateVector) -> GateVector {
    GateVector {
        bits: gate.bits.iter().map(|b| !b).collect(),
    }
}

/// How training draws gates.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GatePolicy {
    /// Close `k ~ U{1..max_closed}` channels chosen uniformly: the N-to-N model.
    Random { max_closed: usize },
    /// Always close `target`; additionally close `k ~ U{0..max_extra_closed}` of
    /// the others. `max_extra_closed = 0` is the dedicated (N-1)-to-1 setting.
    Target {
        target: usize,
        max_extra_closed: usize,
    },
}

impl GatePolicy {
    pub fn validate(&self, n: usize) -> Result<()> {
        match *self {
            GatePolicy::Random { max_closed } => {
                if max_closed < 1 || max_closed + 1 > n {
                    return Err(Error::Gate(format!(
                        "max_closed {max_closed} outside [1, {}]",
                        n.saturating_sub(1)
                    )));
                }
            }
            GatePolicy::Target {
                target,
                max_extra_closed,
            } => {
                if target >= n {
                    return Err(Error::Gate(format!("target {target} out of range for {n}")));
                }
                if max_extra_closed + 2 > n {
                    return Err(Error::Gate(format!(
                        "max_extra_closed {max_extra_closed} leaves no open channel for {n}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Draw one gate. The closed-channel count is uniform over its allowed range and
/// the closed set is a uniform subset of that size.
pub fn sample_gate<R: Rng + ?Sized>(n: usize, policy: &GatePolicy, rng: &mut R) -> Result<GateVector> {
    policy.validate(n)?;
    let mut bits = vec![true; n];
    match *policy {
        GatePolicy::Random { max_closed } => {
            let k = rng.random_range(1..=max_closed);
            for i in index::sample(rng, n, k) {
                bits[i] = false;
            }
        }
        GatePolicy::Target {
            target,
            max_extra_closed,
        } => {
            bits[target] = false;
            let others: Vec<usize> = (0..n).filter(|&i| i != target).collect();
            let k = rng.random_range(0..=max_extra_closed);
            for i in index::sample(rng, others.len(), k) {
                bits[others[i]] = false;
            }
        }
    }
    Ok(GateVector { bits })
}

fn gate_planes(stack: &MultiChannelImage, keep: &GateVector) -> Result<MultiChannelImage> {
    if keep.len() != stack.n_channels() {
        return Err(Error::Gate(format!(
            "gate of length {} for a {}-channel stack",
            keep.len(),
            stack.n_channels()
        )));
    }
    let (h, w) = stack.dims();
    let planes = stack
        .planes()
        .iter()
        .zip(keep.bits())
        .map(|(p, &k)| if k { p.clone() } else { Plane::zeros(h, w) })
        .collect();
    MultiChannelImage::new(stack.registry().clone(), planes, stack.is_normalized())
}

/// `X = δ(M)`: open channels unchanged, closed channels replaced by zeros.
pub fn apply_input_gate(stack: &MultiChannelImage, gate: &GateVector) -> Result<MultiChannelImage> {
    gate_planes(stack, gate)
}

/// `Y = δ̄(M)`: keep channels where the inverse gate is set, zero the rest.
pub fn apply_output_gate(
    stack: &MultiChannelImage,
    inverse_gate: &GateVector,
) -> Result<MultiChannelImage> {
    gate_planes(stack, inverse_gate)
}

/// Batched `[B, N, H, W]` mask in `(item, channel)` order, one gate per item.
pub fn batch_mask(gates: &[GateVector], n: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(gates.len() * n);
    for g in gates {
        if g.len() != n {
            return Err(Error::Gate(format!("gate of length {} for {n} channels", g.len())));
        }
        out.extend(g.as_mask());
    }
    Ok(out)
}

/// Apply per-item gates to a batched tensor outside any graph.
pub fn gate_tensor(t: &Tensor, gates: &[GateVector]) -> Result<Tensor> {
    let [b, c, _, _] = t.shape();
    if gates.len() != b {
        return Err(Error::Gate(format!("{} gates for a batch of {b}", gates.len())));
    }
    let mask = batch_mask(gates, c)?;
    let mut out = t.clone();
    for i in 0..b {
        for ch in 0..c {
            let m = mask[i * c + ch];
            out.plane_mut(i, ch).iter_mut().for_each(|v| *v *= m);
        }
    }
    Ok(out)
}

/// Number of missing-channel scenarios: every subset except none and all.
pub fn enumerate_missing_scenarios(n: usize) -> Result<u64> {
    if !(2..=63).contains(&n) {
        return Err(Error::invalid(format!("scenario count needs 2 <= N <= 63, got {n}")));
    }
    Ok((1u64 << n) - 2)
}

/// Every scenario gate, ordered by the bitmask of missing channels
/// (bit `i` set = channel `i` missing).
pub fn missing_scenarios(n: usize) -> Result<impl Iterator<Item = GateVector>> {
    let count = enumerate_missing_scenarios(n)?;
    Ok((1..=count).map(move |missing| GateVector {
        bits: (0..n).map(|i| missing & (1 << i) == 0).collect(),
    }))
}

/// Gates with exactly `m` missing channels, in lexicographic order of the missing set.
pub fn scenarios_with_missing(n: usize, m: usize) -> Vec<GateVector> {
    fn rec(start: usize, n: usize, left: usize, cur: &mut Vec<usize>, out: &mut Vec<GateVector>) {
        if left == 0 {
            out.push(GateVector::with_missing(n, cur).expect("indices in range"));
            return;
        }
        for i in start..=n - left {
            cur.push(i);
            rec(i + 1, n, left - 1, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    if m <= n {
        rec(0, n, m, &mut Vec::new(), &mut out);
    }
    out
}

/// `C(n, k)` without overflow for the small sizes used here.
pub fn binomial(n: usize, k: usize) -> u64 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    (0..k).fold(1u64, |acc, i| acc * (n - i) as u64 / (i + 1) as u64)
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;
    use std::sync::Arc;

    use super::*;
    use crate::dataset::MarkerRegistry;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn g(s: &str) -> GateVector {
        s.parse().unwrap()
    }

    fn stack(values: &[f64], h: usize, w: usize) -> MultiChannelImage {
        let reg = Arc::new(MarkerRegistry::numbered(values.len()));
        let planes = values.iter().map(|&v| Plane::filled(h, w, v)).collect();
        MultiChannelImage::new(reg, planes, true).unwrap()
    }

    #[test]
    fn invert_examples() {
        assert_eq!(invert(&g("1110")), g("0001"));
        assert_eq!(invert(&g("1010")), g("0101"));
        let mut count = 0;
        for gate in missing_scenarios(4).unwrap() {
            assert_eq!(invert(&invert(&gate)), gate);
            count += 1;
        }
        assert_eq!(count, 14);
    }

    #[test]
    fn bitstring_round_trip() {
        let gate = g("11011011101");
        assert_eq!(gate.to_string(), "11011011101");
        assert_eq!(serde_json::to_string(&gate).unwrap(), "\"11011011101\"");
        assert!("10x".parse::<GateVector>().is_err());
        assert!("".parse::<GateVector>().is_err());
    }

    #[test]
    fn sample_gate_ranges() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            let gate = sample_gate(4, &GatePolicy::Random { max_closed: 1 }, &mut rng).unwrap();
            assert_eq!(gate.closed_count(), 1);
            let gate = sample_gate(11, &GatePolicy::Random { max_closed: 10 }, &mut rng).unwrap();
            assert!((1..=10).contains(&gate.closed_count()));
            assert!(gate.open_count() >= 1);
        }
        assert!(sample_gate(4, &GatePolicy::Random { max_closed: 4 }, &mut rng).is_err());
        assert!(sample_gate(4, &GatePolicy::Random { max_closed: 0 }, &mut rng).is_err());
    }

    #[test]
    fn target_policy_always_closes_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let fixed = GatePolicy::Target {
            target: 2,
            max_extra_closed: 0,
        };
        for _ in 0..20 {
            assert_eq!(sample_gate(4, &fixed, &mut rng).unwrap(), g("1101"));
        }
        let rg = GatePolicy::Target {
            target: 0,
            max_extra_closed: 2,
        };
        for _ in 0..200 {
            let gate = sample_gate(4, &rg, &mut rng).unwrap();
            assert!(!gate.is_open(0));
            assert!(gate.open_count() >= 1);
        }
    }

    #[test]
    fn closed_frequency_matches_enumeration() {
        // Oracle: P(channel closed) = sum_k P(k) * P(channel in k-subset)
        // computed by enumerating every k-subset of 5 channels.
        let (n, kmax, draws) = (5usize, 4usize, 100_000usize);
        let mut p_closed = vec![0.0; n];
        for k in 1..=kmax {
            let subsets = scenarios_with_missing(n, k);
            for s in &subsets {
                for ch in s.closed_channels() {
                    p_closed[ch] += (1.0 / kmax as f64) / subsets.len() as f64;
                }
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut counts = vec![0usize; n];
        let policy = GatePolicy::Random { max_closed: kmax };
        for _ in 0..draws {
            for ch in sample_gate(n, &policy, &mut rng).unwrap().closed_channels() {
                counts[ch] += 1;
            }
        }
        for ch in 0..n {
            let p = p_closed[ch];
            let mean = draws as f64 * p;
            let sd = (draws as f64 * p * (1.0 - p)).sqrt();
            assert!(
                (counts[ch] as f64 - mean).abs() <= 3.0 * sd,
                "channel {ch}: {} vs {mean} ± {sd}",
                counts[ch]
            );
        }
        assert!((p_closed[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn input_gate_examples() {
        let s = stack(&[0.5, 0.5], 3, 3);
        assert_eq!(apply_input_gate(&s, &g("11")).unwrap(), s);
        let out = apply_input_gate(&s, &g("10")).unwrap();
        assert!(out.plane(0).data().iter().all(|&v| v == 0.5));
        assert!(out.plane(1).data().iter().all(|&v| v == 0.0));
        assert!(apply_input_gate(&s, &g("101")).is_err());
    }

    #[test]
    fn random_stack_input_gate_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let reg = Arc::new(MarkerRegistry::numbered(3));
        let planes: Vec<Plane> = (0..3)
            .map(|_| Plane::new(5, 4, (0..20).map(|_| rng.random::<f64>()).collect()).unwrap())
            .collect();
        let s = MultiChannelImage::new(reg, planes, true).unwrap();
        let out = apply_input_gate(&s, &g("010")).unwrap();
        for ch in 0..3 {
            for i in 0..20 {
                let expected = if ch == 1 { s.plane(ch).data()[i] } else { 0.0 };
                assert_eq!(out.plane(ch).data()[i].to_bits(), expected.to_bits());
            }
        }
    }

    #[test]
    fn output_gate_partitions_channels() {
        let s = stack(&[0.1, 0.2, 0.3, 0.4], 2, 2);
        assert_eq!(apply_output_gate(&s, &g("1111")).unwrap(), s);
        for gate in missing_scenarios(4).unwrap() {
            let a = apply_input_gate(&s, &gate).unwrap();
            let b = apply_output_gate(&s, &invert(&gate)).unwrap();
            for ch in 0..4 {
                let sum: Vec<f64> = a
                    .plane(ch)
                    .data()
                    .iter()
                    .zip(b.plane(ch).data())
                    .map(|(x, y)| x + y)
                    .collect();
                assert_eq!(sum, s.plane(ch).data());
                let a_live = a.plane(ch).data().iter().any(|&v| v != 0.0);
                let b_live = b.plane(ch).data().iter().any(|&v| v != 0.0);
                assert!(a_live ^ b_live);
            }
        }
    }

    #[test]
    fn scenario_counts() {
        assert_eq!(enumerate_missing_scenarios(11).unwrap(), 2046);
        assert_eq!(enumerate_missing_scenarios(2).unwrap(), 2);
        let four: HashSet<GateVector> = missing_scenarios(4).unwrap().collect();
        assert_eq!(four.len(), 14);
        assert!(enumerate_missing_scenarios(1).is_err());
        assert_eq!(scenarios_with_missing(4, 2).len(), 6);
        assert_eq!(binomial(11, 5), 462);
    }
}
