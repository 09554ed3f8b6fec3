//! Loop oracle for (relative) scaled dot-product attention.

use posbench::attention::{relative_attention, scaled_dot_attention, AttentionMask};
use posbench::encodings::relative_index;
use posbench::numeric::{Graph, Rng, Tensor};

use super::{max_abs_diff, random_tensor};

/// Direct evaluation for one `(batch, head)` slice:
/// `α_ij ∝ exp(Q_i·(K_j + aK_ij)/sqrt(d_h))`, `out_i = Σ_j α_ij (V_j + aV_ij)`.
pub fn oracle(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    a_key: Option<&[f64]>,
    a_value: Option<&[f64]>,
    clip: usize,
    len: usize,
    dh: usize,
    masked: impl Fn(usize, usize) -> bool,
) -> Vec<f64> {
    let mut out = vec![0.0; len * dh];
    for i in 0..len {
        let qi = &q[i * dh..(i + 1) * dh];
        let mut logits = vec![f64::NEG_INFINITY; len];
        for j in 0..len {
            if masked(i, j) {
                continue;
            }
            let mut s = 0.0;
            for t in 0..dh {
                let bias = a_key.map_or(0.0, |a| a[relative_index(i, j, clip) * dh + t]);
                s += qi[t] * (k[j * dh + t] + bias);
            }
            logits[j] = s / (dh as f64).sqrt();
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            continue;
        }
        let weights: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = weights.iter().sum();
        for j in 0..len {
            let a = weights[j] / total;
            for t in 0..dh {
                let bias = a_value.map_or(0.0, |tab| tab[relative_index(i, j, clip) * dh + t]);
                out[i * dh + t] += a * (v[j * dh + t] + bias);
            }
        }
    }
    out
}

pub struct Instance {
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
    pub mask: AttentionMask,
}

pub fn instance(batch: usize, heads: usize, len: usize, dh: usize, seed: u64) -> Instance {
    let mut rng = Rng::new(seed, 0);
    let shape = [batch, heads, len, dh];
    let q = random_tensor(&shape, &mut rng, 1.5);
    let k = random_tensor(&shape, &mut rng, 1.5);
    let v = random_tensor(&shape, &mut rng, 1.0);
    // left padding of varying length, plus the causal constraint
    let padding: Vec<bool> = (0..batch * len).map(|x| (x % len) < (x / len) % 3).collect();
    let mask = AttentionMask::new(&padding, batch, len, true);
    Instance { q, k, v, mask }
}

pub fn compare_with_oracle(inst: &Instance, a_key: Option<&Tensor>, a_value: Option<&Tensor>, clip: usize) -> f64 {
    let s = inst.q.shape().to_vec();
    let (batch, heads, len, dh) = (s[0], s[1], s[2], s[3]);
    let mut g = Graph::new();
    let q = g.constant(inst.q.clone());
    let k = g.constant(inst.k.clone());
    let v = g.constant(inst.v.clone());
    let mask = inst.mask.expand(heads);
    let out = match a_key {
        Some(ak) => {
            let ak = g.constant(ak.clone());
            let av = a_value.map(|t| g.constant(t.clone()));
            relative_attention(&mut g, q, k, v, ak, av, clip, &mask).unwrap()
        }
        None => scaled_dot_attention(&mut g, q, k, v, &mask).unwrap(),
    };
    let got = g.value(out);
    let slice = len * dh;
    let mut worst: f64 = 0.0;
    for b in 0..batch {
        for h in 0..heads {
            let o = (b * heads + h) * slice;
            let r = o..o + slice;
            let expect = oracle(
                &inst.q.data()[r.clone()],
                &inst.k.data()[r.clone()],
                &inst.v.data()[r.clone()],
                a_key.map(|t| t.data()),
                a_value.map(|t| t.data()),
                clip,
                len,
                dh,
                |i, j| inst.mask.is_masked(b, i, j),
            );
            worst = worst.max(max_abs_diff(&got[r], &expect));
        }
    }
    worst
}
