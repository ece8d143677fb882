//! Adversarial hierarchical alignment: a gradient reversal gate, the shared
//! `(M+1)`-way least-squares discriminator on G1 features, and one focal-loss
//! source/target discriminator per source branch on G2 features.

use rand_chacha::ChaCha8Rng;

use crate::autograd::{focal_term, Tape, Var};
use crate::error::{DmsnError, Result};
use crate::params::{add_conv, add_linear, Binding, ParamSet};
use crate::tensor::Tensor;

/// Clamp applied to discriminator outputs before any logarithm.
pub const FOCAL_EPS: f64 = 1e-6;
const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GrlGate {
    pub scale: f64,
}

impl GrlGate {
    pub fn new(scale: f64) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(DmsnError::Config(format!("GRL scale must be positive, got {scale}")));
        }
        Ok(GrlGate { scale })
    }

    pub fn apply(&self, tape: &mut Tape, x: Var) -> Var {
        tape.grl(x, self.scale)
    }
}

impl Default for GrlGate {
    fn default() -> Self {
        GrlGate { scale: 1.0 }
    }
}

/// Two 1x1 convolutions to `M + 1` channels with independent sigmoids.
#[derive(Debug, Clone, PartialEq)]
pub struct LowLevelDiscriminator {
    pub params: ParamSet,
    pub num_sources: usize,
}

impl LowLevelDiscriminator {
    pub fn new(rng: &mut ChaCha8Rng, in_channels: usize, hidden: usize, num_sources: usize) -> Self {
        let mut params = ParamSet::new();
        add_conv(&mut params, rng, "conv1", in_channels, hidden, 1, 2f64.sqrt());
        add_conv(&mut params, rng, "conv2", hidden, num_sources + 1, 1, 1.0);
        LowLevelDiscriminator { params, num_sources }
    }

    /// Per-location domain probabilities `[M+1, H, W]`.
    pub fn forward(tape: &mut Tape, p: Binding, f1: Var) -> Var {
        let w = p.bind(tape, "conv1/w");
        let b = p.bind(tape, "conv1/b");
        let h = tape.conv2d(f1, w, b, 1, 0);
        let h = tape.leaky_relu(h, LEAKY_SLOPE);
        let w = p.bind(tape, "conv2/w");
        let b = p.bind(tape, "conv2/b");
        let z = tape.conv2d(h, w, b, 1, 0);
        tape.sigmoid(z)
    }
}

/// Global average pool, two fully connected layers, sigmoid. Output is the
/// probability that the features came from the source domain.
#[derive(Debug, Clone, PartialEq)]
pub struct HighLevelDiscriminator {
    pub params: ParamSet,
}

impl HighLevelDiscriminator {
    pub fn new(rng: &mut ChaCha8Rng, in_channels: usize, hidden: usize) -> Self {
        let mut params = ParamSet::new();
        add_linear(&mut params, rng, "fc1", in_channels, hidden, 2f64.sqrt());
        add_linear(&mut params, rng, "fc2", hidden, 1, 1.0);
        HighLevelDiscriminator { params }
    }

    /// Scalar probability, shape `[1, 1]`.
    pub fn forward(tape: &mut Tape, p: Binding, f2: Var) -> Var {
        let z = Self::forward_logit(tape, p, f2);
        tape.sigmoid(z)
    }

    /// Pre-sigmoid output of [`HighLevelDiscriminator::forward`].
    pub fn forward_logit(tape: &mut Tape, p: Binding, f2: Var) -> Var {
        let g = tape.global_avg_pool(f2);
        let w = p.bind(tape, "fc1/w");
        let b = p.bind(tape, "fc1/b");
        let h = tape.linear(g, w, b);
        let h = tape.relu(h);
        let w = p.bind(tape, "fc2/w");
        let b = p.bind(tape, "fc2/b");
        tape.linear(h, w, b)
    }
}

fn check_open_unit(values: &[f64]) -> Result<()> {
    match values.iter().find(|v| !(**v > 0.0 && **v < 1.0) && !(**v == 0.0 || **v == 1.0)) {
        Some(v) => Err(DmsnError::Precondition(format!(
            "discriminator output {v} outside [0, 1]; squash before the loss"
        ))),
        None => Ok(()),
    }
}

fn map_dims(map: &Tensor) -> Result<(usize, usize)> {
    match map.shape() {
        [k, h, w] if *k >= 2 && h * w > 0 => Ok((*k, h * w)),
        s => Err(DmsnError::Shape(format!("expected a [M+1, H, W] map, got {s:?}"))),
    }
}

/// Least-squares targets and weights for a map from source `i` (1-based):
/// every channel is pushed toward the one-hot indicator of `i`.
pub fn source_targets(channels: usize, hw: usize, i: usize) -> (Vec<f64>, Vec<f64>) {
    let mut t = vec![0.0; channels * hw];
    t[(i - 1) * hw..i * hw].iter_mut().for_each(|v| *v = 1.0);
    (t, vec![1.0 / hw as f64; channels * hw])
}

/// Targets and weights for a target-domain map: only channel `M + 1`
/// enters, toward 1.
pub fn target_targets(channels: usize, hw: usize) -> (Vec<f64>, Vec<f64>) {
    let mut t = vec![0.0; channels * hw];
    let mut w = vec![0.0; channels * hw];
    let off = (channels - 1) * hw;
    t[off..].iter_mut().for_each(|v| *v = 1.0);
    w[off..].iter_mut().for_each(|v| *v = 1.0 / hw as f64);
    (t, w)
}

fn weighted_sq(values: &[f64], t: &[f64], w: &[f64]) -> f64 {
    values.iter().zip(t).zip(w).map(|((v, t), w)| w * (v - t) * (v - t)).sum()
}

/// Mean over locations of `(1 − D^i)² + Σ_{k≠i} (D^k)²`, `i` in `1..=M`.
pub fn low_level_source_loss(map: &Tensor, i: usize) -> Result<f64> {
    let (k, hw) = map_dims(map)?;
    if i == 0 || i >= k {
        return Err(DmsnError::Precondition(format!("source index {i} outside 1..={}", k - 1)));
    }
    check_open_unit(map.data())?;
    let (t, w) = source_targets(k, hw, i);
    Ok(weighted_sq(map.data(), &t, &w))
}

/// Mean over locations of `(1 − D^{M+1})²`.
pub fn low_level_target_loss(map: &Tensor) -> Result<f64> {
    let (k, hw) = map_dims(map)?;
    check_open_unit(map.data())?;
    let (t, w) = target_targets(k, hw);
    Ok(weighted_sq(map.data(), &t, &w))
}

pub fn low_level_total_loss(components: &[f64]) -> f64 {
    components.iter().sum()
}

/// Focal objective of the high-level discriminator; each side is averaged
/// over its batch and an empty side contributes nothing.
pub fn high_level_domain_loss(d_source: &[f64], d_target: &[f64], gamma: f64) -> Result<f64> {
    if !(gamma >= 0.0) {
        return Err(DmsnError::Precondition(format!("gamma must be non-negative, got {gamma}")));
    }
    check_open_unit(d_source)?;
    check_open_unit(d_target)?;
    let side = |ds: &[f64], src: bool| {
        if ds.is_empty() {
            0.0
        } else {
            ds.iter()
                .map(|d| focal_term(d.clamp(FOCAL_EPS, 1.0 - FOCAL_EPS), src, gamma))
                .sum::<f64>()
                / ds.len() as f64
        }
    };
    Ok(side(d_source, true) + side(d_target, false))
}

/// Tape form of [`low_level_source_loss`].
pub fn low_level_source_term(tape: &mut Tape, probs: Var, i: usize) -> Var {
    let s = tape.value(probs).shape().to_vec();
    let (t, w) = source_targets(s[0], s[1] * s[2], i);
    tape.weighted_sq(probs, t, w)
}

/// Tape form of [`low_level_target_loss`].
pub fn low_level_target_term(tape: &mut Tape, probs: Var) -> Var {
    let s = tape.value(probs).shape().to_vec();
    let (t, w) = target_targets(s[0], s[1] * s[2]);
    tape.weighted_sq(probs, t, w)
}

/// Tape form of one side of [`high_level_domain_loss`] for a single
/// discriminator logit, scaled by `weight` (1 / batch size). Unlike the
/// value form it needs no clamp.
pub fn high_level_term(tape: &mut Tape, logit: Var, source: bool, gamma: f64, weight: f64) -> Var {
    tape.focal_logits(logit, vec![source], vec![weight], gamma)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_distr::{Distribution, Normal};

    fn map(k: usize, h: usize, w: usize, v: Vec<f64>) -> Tensor {
        Tensor::from_vec(&[k, h, w], v).unwrap()
    }

    #[test]
    fn grl_is_identity_forward_and_scaled_negation_backward() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x0: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let xt = Tensor::from_vec(&[3, 2, 2], x0.clone()).unwrap();
        for scale in [1.0, 0.5] {
            let gate = GrlGate::new(scale).unwrap();
            let mut tape = Tape::new();
            let x = tape.param("x", &xt);
            let y = gate.apply(&mut tape, x);
            assert_eq!(tape.value(y), &xt);
            // downstream loss Σ y² has gradient 2y
            let l = tape.weighted_sq(y, vec![0.0; 12], vec![1.0; 12]);
            let g = tape.backward(l);
            for (gv, xv) in g.param("x").unwrap().data().iter().zip(&x0) {
                assert!((gv + scale * 2.0 * xv).abs() < 1e-12);
            }
        }
        assert!(GrlGate::new(0.0).is_err());
    }

    #[test]
    fn least_squares_hand_cases() {
        let perfect = map(3, 1, 1, vec![1.0, 0.0, 0.0]);
        assert_eq!(low_level_source_loss(&perfect, 1).unwrap(), 0.0);
        let half = map(3, 1, 1, vec![0.5; 3]);
        assert!((low_level_source_loss(&half, 1).unwrap() - 0.75).abs() < 1e-12);
        assert!((low_level_target_loss(&half).unwrap() - 0.25).abs() < 1e-12);
        let ones = map(3, 1, 1, vec![0.2, 0.7, 1.0]);
        assert_eq!(low_level_target_loss(&ones).unwrap(), 0.0);
        let mut v = vec![0.3; 8];
        v.extend([1.0, 1.0, 0.0, 0.0]);
        assert!((low_level_target_loss(&map(3, 2, 2, v)).unwrap() - 0.5).abs() < 1e-12);
        assert!((low_level_total_loss(&[0.1, 0.2, 0.3]) - 0.6).abs() < 1e-12);
        assert_eq!(low_level_total_loss(&[0.0, 0.0]), 0.0);
    }

    #[test]
    fn least_squares_preconditions() {
        let m = map(3, 1, 1, vec![0.5; 3]);
        assert!(matches!(low_level_source_loss(&m, 0), Err(DmsnError::Precondition(_))));
        assert!(matches!(low_level_source_loss(&m, 3), Err(DmsnError::Precondition(_))));
        let raw = map(3, 1, 1, vec![1.5, -0.2, 0.1]);
        assert!(matches!(low_level_source_loss(&raw, 1), Err(DmsnError::Precondition(_))));
        assert!(matches!(low_level_target_loss(&raw), Err(DmsnError::Precondition(_))));
    }

    #[test]
    fn source_loss_ignores_spatial_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v: Vec<f64> = (0..3 * 6).map(|_| rng.gen_range(0.01..0.99)).collect();
        let a = map(3, 2, 3, v.clone());
        let perm = [4, 0, 5, 2, 1, 3];
        let mut pv = vec![0.0; v.len()];
        for c in 0..3 {
            for (dst, &src) in perm.iter().enumerate() {
                pv[c * 6 + dst] = v[c * 6 + src];
            }
        }
        let b = map(3, 2, 3, pv);
        for i in 1..=2 {
            let (x, y) = (low_level_source_loss(&a, i).unwrap(), low_level_source_loss(&b, i).unwrap());
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn total_matches_recomputation_from_raw_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = 3;
        let maps: Vec<Tensor> = (0..=m)
            .map(|_| map(m + 1, 3, 2, (0..(m + 1) * 6).map(|_| rng.gen_range(0.01..0.99)).collect()))
            .collect();
        let mut parts: Vec<f64> = (1..=m).map(|i| low_level_source_loss(&maps[i - 1], i).unwrap()).collect();
        parts.push(low_level_target_loss(&maps[m]).unwrap());
        let total = low_level_total_loss(&parts);
        // direct double loop
        let mut want = 0.0;
        for (d, mp) in maps.iter().enumerate() {
            let v = mp.data();
            for loc in 0..6 {
                if d < m {
                    for k in 0..=m {
                        let t = if k == d { 1.0 } else { 0.0 };
                        want += (v[k * 6 + loc] - t).powi(2) / 6.0;
                    }
                } else {
                    want += (1.0 - v[m * 6 + loc]).powi(2) / 6.0;
                }
            }
        }
        assert!((total - want).abs() < 1e-12);
        // tape forms agree with the value forms
        let mut tape = Tape::new();
        let mut terms = Vec::new();
        for (d, mp) in maps.iter().enumerate() {
            let v = tape.constant(mp.clone());
            terms.push((if d < m { low_level_source_term(&mut tape, v, d + 1) } else { low_level_target_term(&mut tape, v) }, 1.0));
        }
        let s = tape.weighted_sum(&terms);
        assert!((tape.value(s).item() - want).abs() < 1e-12);
    }

    #[test]
    fn focal_hand_values() {
        let l0 = high_level_domain_loss(&[0.9], &[], 0.0).unwrap();
        assert!((l0 - 0.105_360_5).abs() < 1e-6);
        let l5 = high_level_domain_loss(&[0.9], &[], 5.0).unwrap();
        assert!((l5 - 1.053_605e-6).abs() < 1e-11);
        assert!(high_level_domain_loss(&[1.0], &[0.0], 2.0).unwrap().is_finite());
        assert!(high_level_domain_loss(&[0.5], &[], -1.0).is_err());
        assert!(high_level_domain_loss(&[1.2], &[], 1.0).is_err());
    }

    #[test]
    fn focal_with_zero_gamma_is_cross_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let s: Vec<f64> = (0..rng.gen_range(1..6)).map(|_| rng.gen_range(0.01..0.99)).collect();
            let t: Vec<f64> = (0..rng.gen_range(1..6)).map(|_| rng.gen_range(0.01..0.99)).collect();
            let bce = |p: f64, y: f64| -(y * p.ln() + (1.0 - y) * (1.0 - p).ln());
            let want = s.iter().map(|&p| bce(p, 1.0)).sum::<f64>() / s.len() as f64
                + t.iter().map(|&p| bce(p, 0.0)).sum::<f64>() / t.len() as f64;
            let got = high_level_domain_loss(&s, &t, 0.0).unwrap();
            assert!(((got - want) / want).abs() < 1e-6);
        }
    }

    #[test]
    fn focal_is_monotone_in_gamma() {
        for d in 1..=9 {
            let d = d as f64 / 10.0;
            let vals: Vec<f64> = [0.0, 1.0, 2.0, 5.0]
                .iter()
                .map(|&g| high_level_domain_loss(&[d], &[], g).unwrap())
                .collect();
            assert!(vals.windows(2).all(|w| w[1] <= w[0]));
            let vals: Vec<f64> = [0.0, 1.0, 2.0, 5.0]
                .iter()
                .map(|&g| high_level_domain_loss(&[], &[d], g).unwrap())
                .collect();
            assert!(vals.windows(2).all(|w| w[1] <= w[0]));
        }
    }

    #[test]
    fn tape_focal_matches_value_form() {
        let mut tape = Tape::new();
        let logit = |p: f64| (p / (1.0 - p)).ln();
        let s = tape.constant(Tensor::from_vec(&[1, 1], vec![logit(0.7)]).unwrap());
        let t = tape.constant(Tensor::from_vec(&[1, 1], vec![logit(0.4)]).unwrap());
        let a = high_level_term(&mut tape, s, true, 5.0, 1.0);
        let b = high_level_term(&mut tape, t, false, 5.0, 1.0);
        let sum = tape.add(a, b);
        let want = high_level_domain_loss(&[0.7], &[0.4], 5.0).unwrap();
        assert!((tape.value(sum).item() - want).abs() < 1e-12);
    }

    #[test]
    fn saturated_wrong_logit_keeps_gradient() {
        let mut set = ParamSet::new();
        set.insert("z", Tensor::from_vec(&[1, 1], vec![-40.0]).unwrap());
        let mut tape = Tape::new();
        let z = Binding::trainable(&set, "").bind(&mut tape, "z");
        let l = high_level_term(&mut tape, z, true, 5.0, 1.0);
        assert!((tape.value(l).item() - 40.0).abs() < 1e-9);
        let g = tape.backward(l).into_param_grads()["z"].item();
        assert!((g + 1.0).abs() < 1e-9, "{g}");
    }

    /// Frozen features for `m + 1` domains that differ in their mean vector.
    fn separable_features(rng: &mut ChaCha8Rng, m: usize, c: usize) -> Vec<Tensor> {
        let noise = Normal::new(0.0, 0.3).unwrap();
        (0..=m)
            .map(|d| {
                let centre: Vec<f64> = (0..c).map(|k| if k % (m + 1) == d { 1.5 } else { 0.0 }).collect();
                let mut v = vec![0.0; c * 16];
                for k in 0..c {
                    for loc in 0..16 {
                        v[k * 16 + loc] = centre[k] + noise.sample(rng);
                    }
                }
                Tensor::from_vec(&[c, 4, 4], v).unwrap()
            })
            .collect()
    }

    fn discriminator_loss(tape: &mut Tape, p: &ParamSet, feats: &[Tensor]) -> (Var, Vec<Var>) {
        let m = feats.len() - 1;
        let mut terms = Vec::new();
        let mut probs = Vec::new();
        for (d, f) in feats.iter().enumerate() {
            let x = tape.constant(f.clone());
            let pr = LowLevelDiscriminator::forward(tape, Binding::trainable(p, "d/"), x);
            probs.push(pr);
            let t = if d < m {
                low_level_source_term(tape, pr, d + 1)
            } else {
                low_level_target_term(tape, pr)
            };
            terms.push((t, 1.0));
        }
        (tape.weighted_sum(&terms), probs)
    }

    #[test]
    fn discriminator_learns_domain_indicator() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (m, c) = (2, 6);
        let mut disc = LowLevelDiscriminator::new(&mut rng, c, 16, m);
        let lr = 0.5;
        for _ in 0..500 {
            let feats = separable_features(&mut rng, m, c);
            let mut tape = Tape::new();
            let (loss, _) = discriminator_loss(&mut tape, &disc.params, &feats);
            let grads = tape.backward(loss).into_param_grads();
            for (k, g) in grads {
                let p = disc.params.get_mut(k.strip_prefix("d/").unwrap()).unwrap();
                for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
                    *pv -= lr * gv;
                }
            }
        }
        let feats = separable_features(&mut rng, m, c);
        let mut tape = Tape::new();
        let (_, probs) = discriminator_loss(&mut tape, &disc.params, &feats);
        let mut correct = 0;
        for (d, pr) in probs.iter().enumerate() {
            let v = tape.value(*pr).data();
            for loc in 0..16 {
                let arg = (0..=m).max_by(|&a, &b| v[a * 16 + loc].total_cmp(&v[b * 16 + loc])).unwrap();
                correct += usize::from(arg == d);
            }
        }
        let acc = correct as f64 / (16.0 * (m + 1) as f64);
        assert!(acc > 0.95, "accuracy {acc}");
    }

    #[test]
    fn reversal_gives_extractor_the_opposite_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let m = 2;
        let disc = LowLevelDiscriminator::new(&mut rng, 4, 8, m);
        let mut ext = ParamSet::new();
        add_conv(&mut ext, &mut rng, "g", 3, 4, 1, 1.0);
        let inputs: Vec<Tensor> = (0..=m)
            .map(|_| Tensor::from_vec(&[3, 3, 3], (0..27).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap())
            .collect();
        let build = |tape: &mut Tape, ext: &ParamSet, disc: &ParamSet, reverse: bool| {
            let mut terms = Vec::new();
            for (d, x) in inputs.iter().enumerate() {
                let x = tape.constant(x.clone());
                let b = Binding::trainable(ext, "g1/");
                let (w, bias) = (b.bind(tape, "g/w"), b.bind(tape, "g/b"));
                let mut f = tape.conv2d(x, w, bias, 1, 0);
                if reverse {
                    f = GrlGate::default().apply(tape, f);
                }
                let pr = LowLevelDiscriminator::forward(tape, Binding::trainable(disc, "d_low/"), f);
                let t = if d < m {
                    low_level_source_term(tape, pr, d + 1)
                } else {
                    low_level_target_term(tape, pr)
                };
                terms.push((t, 1.0));
            }
            tape.weighted_sum(&terms)
        };
        let mut t1 = Tape::new();
        let l1 = build(&mut t1, &ext, &disc.params, true);
        let g1 = t1.backward(l1).into_param_grads();
        let mut t2 = Tape::new();
        let l2 = build(&mut t2, &ext, &disc.params, false);
        let g2 = t2.backward(l2).into_param_grads();
        for (k, a) in &g1 {
            let b = &g2[k];
            for (x, y) in a.data().iter().zip(b.data()) {
                if k.starts_with("g1/") {
                    assert!((x + y).abs() < 1e-12);
                } else {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
        // one shared step: the discriminator descends, the extractor ascends
        let step = 1e-3;
        let apply = |set: &ParamSet, prefix: &str| {
            let mut s = set.clone();
            for (k, t) in s.iter_mut() {
                let g = &g1[&format!("{prefix}{k}")];
                for (v, gv) in t.data_mut().iter_mut().zip(g.data()) {
                    *v -= step * gv;
                }
            }
            s
        };
        let base = t1.value(l1).item();
        let mut t = Tape::new();
        let l = build(&mut t, &ext, &apply(&disc.params, "d_low/"), true);
        assert!(t.value(l).item() < base);
        let mut t = Tape::new();
        let l = build(&mut t, &apply(&ext, "g1/"), &disc.params, true);
        assert!(t.value(l).item() > base);
    }

    #[test]
    fn high_level_discriminator_output_is_a_probability() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let d = HighLevelDiscriminator::new(&mut rng, 5, 7);
        let mut tape = Tape::new();
        let f = tape.constant(Tensor::from_vec(&[5, 2, 2], (0..20).map(|_| rng.gen_range(0.0..2.0)).collect()).unwrap());
        let p = HighLevelDiscriminator::forward(&mut tape, Binding::frozen(&d.params), f);
        let v = tape.value(p).item();
        assert!(v > 0.0 && v < 1.0);
    }
}
