//! Concept-to-token index maps, EMA smoothing over concepts, the
//! straight-through estimator and the scatter back to token positions.

use alloc::boxed::Box;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::numerics::{CustomOp, Scalar, Tape, Tensor, Var};

/// `phi[m]`: token row of boundary `m`. `psi[n]`: concept covering token `n`,
/// i.e. the last boundary at or before `n`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IndexMaps {
    phi: Vec<usize>,
    psi: Vec<usize>,
}

impl IndexMaps {
    /// `psi = cumsum(b) - 1`. `b[0]` must be set.
    pub fn build(b: &[bool]) -> Result<Self> {
        if b.first() != Some(&true) {
            return Err(invalid("index_maps", "first position must be a boundary"));
        }
        let phi: Vec<usize> = b.iter().enumerate().filter(|(_, &x)| x).map(|(i, _)| i).collect();
        let mut psi = Vec::with_capacity(b.len());
        let mut count = 0usize;
        for &x in b {
            count += usize::from(x);
            psi.push(count - 1);
        }
        Ok(Self { phi, psi })
    }

    pub fn phi(&self) -> &[usize] {
        &self.phi
    }

    pub fn psi(&self) -> &[usize] {
        &self.psi
    }

    pub fn n(&self) -> usize {
        self.psi.len()
    }

    pub fn m(&self) -> usize {
        self.phi.len()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmaMode {
    /// `e_m = p_m c_m + (1 - p_m) e_{m-1}`, `e_1 = c_1`.
    #[default]
    Recursive,
    /// `e_m = p_m c_m + (1 - p_m) c_{m-1}`, `c_0 = c_1`.
    OneStep,
}

fn check_ema<S: Scalar>(c: &Tensor<S>, p: &[S]) -> Result<()> {
    if c.rank() != 2 || c.shape()[0] != p.len() {
        return Err(Error::ShapeMismatch { op: "ema", lhs: c.shape().to_vec(), rhs: vec![p.len()] });
    }
    if p.is_empty() {
        return Err(invalid("ema", "no concepts"));
    }
    Ok(())
}

/// Reference loop for both EMA modes.
pub fn ema_sequential<S: Scalar>(c: &Tensor<S>, p: &[S], mode: EmaMode) -> Result<Tensor<S>> {
    check_ema(c, p)?;
    let d = c.last_dim();
    let mut e = c.clone();
    let out = e.data_mut();
    for m in 1..p.len() {
        let (pm, q) = (p[m], S::one() - p[m]);
        for j in 0..d {
            let prev = match mode {
                EmaMode::Recursive => out[(m - 1) * d + j],
                EmaMode::OneStep => c.data()[(m - 1) * d + j],
            };
            out[m * d + j] = pm * c.data()[m * d + j] + q * prev;
        }
    }
    Ok(e)
}

/// Recursive EMA as a work-efficient (up-sweep / down-sweep) scan over the
/// affine maps `e -> a_m e + b_m`.
pub fn ema_parallel<S: Scalar>(c: &Tensor<S>, p: &[S]) -> Result<Tensor<S>> {
    check_ema(c, p)?;
    let (m, d) = (p.len(), c.last_dim());
    let size = m.next_power_of_two();
    // Element i holds the map (a, b); identity is (1, 0).
    let mut a = vec![S::one(); size];
    let mut b = vec![S::zero(); size * d];
    for i in 0..m {
        a[i] = if i == 0 { S::zero() } else { S::one() - p[i] };
        let w = if i == 0 { S::one() } else { p[i] };
        for j in 0..d {
            b[i * d + j] = w * c.data()[i * d + j];
        }
    }
    // Composing earlier (a1, b1) with later (a2, b2) gives (a2 a1, a2 b1 + b2).
    let mut step = 1;
    while step < size {
        for hi in (2 * step - 1..size).step_by(2 * step) {
            let lo = hi - step;
            let a2 = a[hi];
            for j in 0..d {
                b[hi * d + j] = a2 * b[lo * d + j] + b[hi * d + j];
            }
            a[hi] = a2 * a[lo];
        }
        step *= 2;
    }
    a[size - 1] = S::one();
    b[(size - 1) * d..].iter_mut().for_each(|x| *x = S::zero());
    while step > 1 {
        step /= 2;
        for hi in (2 * step - 1..size).step_by(2 * step) {
            let lo = hi - step;
            let (al, ah) = (a[lo], a[hi]);
            for j in 0..d {
                let bl = b[lo * d + j];
                let bh = b[hi * d + j];
                b[lo * d + j] = bh;
                b[hi * d + j] = al * bh + bl;
            }
            a[lo] = ah;
            a[hi] = al * ah;
        }
    }
    // b now holds the exclusive prefix applied to e_0 = 0; finish each element.
    let mut out = vec![S::zero(); m * d];
    for i in 0..m {
        let ai = if i == 0 { S::zero() } else { S::one() - p[i] };
        let w = if i == 0 { S::one() } else { p[i] };
        for j in 0..d {
            out[i * d + j] = ai * b[i * d + j] + w * c.data()[i * d + j];
        }
    }
    Tensor::new(c.shape().to_vec(), out)
}

/// Differentiable EMA over concepts `c: [M, d]` with boundary
/// probabilities `p: [M]`.
pub fn ema<S: Scalar>(tape: &mut Tape<S>, c: Var, p: Var, mode: EmaMode) -> Result<Var> {
    let out = ema_sequential(tape.value(c), tape.value(p).data(), mode)?;
    Ok(tape.custom(&[c, p], out, Box::new(Ema { mode })))
}

struct Ema {
    mode: EmaMode,
}

impl<S: Scalar> CustomOp<S> for Ema {
    fn name(&self) -> &'static str {
        "ema"
    }

    fn backward(&self, inputs: &[&Tensor<S>], out: &Tensor<S>, g: &Tensor<S>) -> Vec<Option<Tensor<S>>> {
        let (c, p) = (inputs[0], inputs[1].data());
        let (m, d) = (p.len(), c.last_dim());
        let mut dc = vec![S::zero(); m * d];
        let mut dp = vec![S::zero(); m];
        match self.mode {
            EmaMode::Recursive => {
                // acc = total gradient reaching e_m through later terms.
                let mut acc = vec![S::zero(); d];
                for i in (0..m).rev() {
                    for j in 0..d {
                        acc[j] += g.data()[i * d + j];
                    }
                    if i == 0 {
                        dc[..d].copy_from_slice(&acc);
                        break;
                    }
                    let mut s = S::zero();
                    for j in 0..d {
                        dc[i * d + j] = p[i] * acc[j];
                        s += acc[j] * (c.data()[i * d + j] - out.data()[(i - 1) * d + j]);
                    }
                    dp[i] = s;
                    let q = S::one() - p[i];
                    acc.iter_mut().for_each(|x| *x *= q);
                }
            }
            EmaMode::OneStep => {
                for j in 0..d {
                    dc[j] += g.data()[j];
                }
                for i in 1..m {
                    let q = S::one() - p[i];
                    let mut s = S::zero();
                    for j in 0..d {
                        let gi = g.data()[i * d + j];
                        dc[i * d + j] += p[i] * gi;
                        dc[(i - 1) * d + j] += q * gi;
                        s += gi * (c.data()[i * d + j] - c.data()[(i - 1) * d + j]);
                    }
                    dp[i] = s;
                }
            }
        }
        vec![Some(Tensor::new(c.shape().to_vec(), dc).unwrap()), Some(Tensor::vector(dp))]
    }
}

/// Forward: ones shaped like `x`. Backward: the incoming gradient, unchanged.
pub fn ste<S: Scalar>(tape: &mut Tape<S>, x: Var) -> Var {
    let out = Tensor::ones(tape.shape(x).to_vec());
    tape.custom(&[x], out, Box::new(Ste))
}

struct Ste;

impl<S: Scalar> CustomOp<S> for Ste {
    fn name(&self) -> &'static str {
        "ste"
    }

    fn backward(&self, _: &[&Tensor<S>], _: &Tensor<S>, g: &Tensor<S>) -> Vec<Option<Tensor<S>>> {
        vec![Some(g.clone())]
    }
}

pub struct Dechunked {
    /// `z_n = h_n + aligned_n * ste(selected_prob_n)`.
    pub z: Var,
    /// `aligned_n = e_{psi(n)}`.
    pub aligned: Var,
}

pub fn dechunk<S: Scalar>(
    tape: &mut Tape<S>,
    e: Var,
    maps: &IndexMaps,
    h: Var,
    selected_prob: Var,
) -> Result<Dechunked> {
    let (es, hs) = (tape.shape(e).to_vec(), tape.shape(h).to_vec());
    if es.len() != 2 || es[0] != maps.m() || hs.len() != 2 || hs[0] != maps.n() || es[1] != hs[1] {
        return Err(Error::ShapeMismatch { op: "dechunk", lhs: es, rhs: hs });
    }
    if tape.shape(selected_prob) != [maps.n()] {
        return Err(Error::ShapeMismatch {
            op: "dechunk",
            lhs: vec![maps.n()],
            rhs: tape.shape(selected_prob).to_vec(),
        });
    }
    let aligned = tape.gather(e, maps.psi())?;
    let s = ste(tape, selected_prob);
    let scaled = tape.mul_rows(aligned, s)?;
    let z = tape.add(h, scaled)?;
    Ok(Dechunked { z, aligned })
}

/// `p` at each boundary row.
pub fn boundary_probs<S: Scalar>(tape: &mut Tape<S>, p: Var, maps: &IndexMaps) -> Result<Var> {
    if tape.shape(p) != [maps.n()] {
        return Err(invalid("boundary_probs", format!("p shape {:?} for {} tokens", tape.shape(p), maps.n())));
    }
    tape.gather(p, maps.phi())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Definition-level construction: phi by scanning, psi by searching phi.
    fn naive_maps(b: &[bool]) -> (Vec<usize>, Vec<usize>) {
        let mut phi = Vec::new();
        for (i, &x) in b.iter().enumerate() {
            if x {
                phi.push(i);
            }
        }
        let mut psi = Vec::new();
        for n in 0..b.len() {
            let mut found = 0;
            for m in 0..phi.len() {
                let next = phi.get(m + 1).copied().unwrap_or(b.len());
                if phi[m] <= n && n < next {
                    found = m;
                }
            }
            psi.push(found);
        }
        (phi, psi)
    }

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn maps_examples() {
        let m = IndexMaps::build(&[true, false, false, true, false]).unwrap();
        assert_eq!(m.phi(), &[0, 3]);
        assert_eq!(m.psi(), &[0, 0, 0, 1, 1]);
        let all = IndexMaps::build(&[true; 4]).unwrap();
        assert_eq!(all.phi(), &[0, 1, 2, 3]);
        assert_eq!(all.psi(), &[0, 1, 2, 3]);
        assert!(IndexMaps::build(&[false, true]).is_err());
        assert!(IndexMaps::build(&[]).is_err());
    }

    #[test]
    fn ema_examples() {
        let c = Tensor::matrix(&[&[1.0f64, 2.0], &[3.0, 6.0]]);
        for mode in [EmaMode::Recursive, EmaMode::OneStep] {
            assert_eq!(ema_sequential(&c, &[1.0, 1.0], mode).unwrap(), c);
        }
        let e = ema_sequential(&c, &[1.0, 0.5], EmaMode::Recursive).unwrap();
        assert_eq!(e.row(1), &[2.0, 4.0]);
        assert!(ema_sequential(&Tensor::<f64>::zeros([0, 2]), &[], EmaMode::Recursive).is_err());
    }

    #[test]
    fn one_step_hand_values() {
        let c = Tensor::matrix(&[&[1.0f64], &[2.0], &[4.0]]);
        let e = ema_sequential(&c, &[1.0, 0.25, 0.5], EmaMode::OneStep).unwrap();
        assert_eq!(e.data(), &[1.0, 0.25 * 2.0 + 0.75 * 1.0, 0.5 * 4.0 + 0.5 * 2.0]);
        let r = ema_sequential(&c, &[1.0, 0.25, 0.5], EmaMode::Recursive).unwrap();
        assert_eq!(r.data(), &[1.0, 1.25, 0.5 * 4.0 + 0.5 * 1.25]);
    }

    #[test]
    fn ste_contract() {
        let mut t = Tape::new();
        let x = t.param(Tensor::vector(vec![0.3f64, 0.9]));
        let y = t.leaf(Tensor::vector(vec![2.0, -5.0]));
        let s = ste(&mut t, x);
        assert_eq!(t.value(s).data(), &[1.0, 1.0]);
        let sy = t.mul(s, y).unwrap();
        let l = t.sum_all(sy);
        t.backward(l).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[2.0, -5.0]);

        let mut t = Tape::new();
        let x = t.param(Tensor::vector(vec![0.3f64, 0.9]));
        let _ = ste(&mut t, x);
        let l = t.sum_all(x);
        let l = t.scale(l, 0.0);
        t.backward(l).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn dechunk_examples() {
        let mut t = Tape::new();
        let h = t.leaf(Tensor::from_fn([5, 2], |i| i as f64));
        let e = t.leaf(Tensor::matrix(&[&[10.0f64, 20.0], &[30.0, 40.0]]));
        let sp = t.leaf(Tensor::vector(vec![1.0, 0.4, 0.7, 0.9, 0.2]));
        let maps = IndexMaps::build(&[true, false, false, true, false]).unwrap();
        let out = dechunk(&mut t, e, &maps, h, sp).unwrap();
        let al = t.value(out.aligned);
        assert_eq!(al.data(), &[10.0, 20.0, 10.0, 20.0, 10.0, 20.0, 30.0, 40.0, 30.0, 40.0]);
        let z = t.value(out.z);
        assert_eq!(z.row(1), &[12.0, 23.0]);
        assert_eq!(z.row(4), &[38.0, 49.0]);
        let bad = t.leaf(Tensor::<f64>::zeros([4, 2]));
        assert!(dechunk(&mut t, e, &maps, bad, sp).is_err());
    }

    #[test]
    fn identity_chunking_adds_concepts() {
        let mut t = Tape::new();
        let h = t.leaf(Tensor::from_fn([3, 2], |i| i as f64));
        let c = t.leaf(Tensor::from_fn([3, 2], |i| 10.0 * i as f64));
        let p = t.leaf(Tensor::ones([3]));
        let maps = IndexMaps::build(&[true; 3]).unwrap();
        let e = ema(&mut t, c, p, EmaMode::Recursive).unwrap();
        let out = dechunk(&mut t, e, &maps, h, p).unwrap();
        assert_eq!(t.value(out.z).data(), &[0.0, 11.0, 22.0, 33.0, 44.0, 55.0]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn maps_match_naive(seed in any::<u64>(), n in 1usize..40) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let b: Vec<bool> = (0..n).map(|i| i == 0 || rng.random_bool(0.4)).collect();
            let maps = IndexMaps::build(&b).unwrap();
            let (phi, psi) = naive_maps(&b);
            prop_assert_eq!(maps.phi(), phi.as_slice());
            prop_assert_eq!(maps.psi(), psi.as_slice());
            prop_assert!(maps.psi().windows(2).all(|w| w[0] <= w[1]));
        }

        #[test]
        fn parallel_scan_matches_loop(seed in any::<u64>(), m in 1usize..=64, d in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = rand_tensor(&mut rng, &[m, d]);
            let mut p: Vec<f64> = (0..m).map(|_| rng.random_range(0.0..1.0)).collect();
            p[0] = 1.0;
            let a = ema_sequential(&c, &p, EmaMode::Recursive).unwrap();
            let b = ema_parallel(&c, &p).unwrap();
            prop_assert!(a.max_abs_diff(&b) <= 1e-12);
        }

        #[test]
        fn ema_grads(seed in any::<u64>(), m in 1usize..8, d in 1usize..4, one_step in any::<bool>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = rand_tensor(&mut rng, &[m, d]);
            let p = Tensor::from_fn([m], |_| rng.random_range(0.05..0.95));
            let probe = rand_tensor(&mut rng, &[m, d]);
            let mode = if one_step { EmaMode::OneStep } else { EmaMode::Recursive };
            let err = grad_check(&[c, p], 1e-5, |t, v| {
                let e = ema(t, v[0], v[1], mode)?;
                let pr = t.leaf(probe.clone());
                let ep = t.mul(e, pr)?;
                Ok(t.sum_all(ep))
            }).unwrap();
            prop_assert!(err < 1e-3, "rel err {err}");
        }

        #[test]
        fn dechunk_grads(seed in any::<u64>(), n in 1usize..8, d in 1usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let b: Vec<bool> = (0..n).map(|i| i == 0 || rng.random_bool(0.5)).collect();
            let maps = IndexMaps::build(&b).unwrap();
            let e = rand_tensor(&mut rng, &[maps.m(), d]);
            let h = rand_tensor(&mut rng, &[n, d]);
            let probe = rand_tensor(&mut rng, &[n, d]);
            let probe2 = rand_tensor(&mut rng, &[n, d]);
            // The STE forward is constant, so finite differences see no
            // dependence on the selected probabilities; they are checked
            // against the hand-derived rule below instead.
            let sp = Tensor::from_fn([n], |_| rng.random_range(0.0..1.0));
            let err = grad_check(&[e, h], 1e-5, |t, v| {
                let s = t.leaf(sp.clone());
                let out = dechunk(t, v[0], &maps, v[1], s)?;
                let (p1, p2) = (t.leaf(probe.clone()), t.leaf(probe2.clone()));
                let a = t.mul(out.z, p1)?;
                let b = t.mul(out.aligned, p2)?;
                let (a, b) = (t.sum_all(a), t.sum_all(b));
                t.add(a, b)
            }).unwrap();
            prop_assert!(err < 1e-3, "rel err {err}");
        }

        #[test]
        fn ste_path_gradient_is_aligned_dot_grad_z(seed in any::<u64>(), n in 1usize..10, d in 1usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let b: Vec<bool> = (0..n).map(|i| i == 0 || rng.random_bool(0.5)).collect();
            let maps = IndexMaps::build(&b).unwrap();
            let mut t = Tape::new();
            let e = t.leaf(rand_tensor(&mut rng, &[maps.m(), d]));
            let h = t.leaf(rand_tensor(&mut rng, &[n, d]));
            let sp = t.param(Tensor::from_fn([n], |_| rng.random_range(0.0..1.0)));
            let probe = rand_tensor(&mut rng, &[n, d]);
            let out = dechunk(&mut t, e, &maps, h, sp).unwrap();
            let pr = t.leaf(probe.clone());
            let zp = t.mul(out.z, pr).unwrap();
            let l = t.sum_all(zp);
            t.backward(l).unwrap();
            let aligned = t.value(out.aligned).clone();
            let g = t.grad(sp).unwrap();
            for i in 0..n {
                let want: f64 = probe.row(i).iter().zip(aligned.row(i)).map(|(a, b)| a * b).sum();
                prop_assert!((g.data()[i] - want).abs() <= 1e-9);
            }
        }
    }
}
