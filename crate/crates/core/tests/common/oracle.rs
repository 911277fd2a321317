#![allow(dead_code)]

use tangled::model::{StreamLayer, StreamStates};
use tangled::numerics::{ParamId, ParamStore, Tensor};
use tangled::sequence::{InputSequence, Stream};

pub type Mat = Vec<Vec<f64>>;

/// Plain nested-vector transformer used as an independent reference.
pub mod nested {
    use super::Mat;

    pub fn from(t: &tangled::numerics::Tensor) -> Mat {
        (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
    }

    pub fn linear(x: &Mat, w: &Mat, b: &[f64]) -> Mat {
        x.iter()
            .map(|row| {
                (0..b.len())
                    .map(|j| b[j] + row.iter().zip(w).map(|(xi, wr)| xi * wr[j]).sum::<f64>())
                    .collect()
            })
            .collect()
    }

    pub fn attention(q: &Mat, k: &Mat, v: &Mat, heads: usize) -> Mat {
        let d = q[0].len();
        let dh = d / heads;
        let mut out = vec![vec![0.0; d]; q.len()];
        for h in 0..heads {
            let c = h * dh..(h + 1) * dh;
            for (qi, qr) in q.iter().enumerate() {
                let logits: Vec<f64> = k
                    .iter()
                    .map(|kr| c.clone().map(|j| qr[j] * kr[j]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for (ki, vr) in v.iter().enumerate() {
                    for j in c.clone() {
                        out[qi][j] += e[ki] / z * vr[j];
                    }
                }
            }
        }
        out
    }

    pub fn layer_norm(x: &Mat, g: &[f64], b: &[f64]) -> Mat {
        x.iter()
            .map(|r| {
                let n = r.len() as f64;
                let mu = r.iter().sum::<f64>() / n;
                let var = r.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
                r.iter().enumerate().map(|(j, v)| (v - mu) / (var + 1e-5).sqrt() * g[j] + b[j]).collect()
            })
            .collect()
    }

    pub fn gelu(x: f64) -> f64 {
        0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
    }

    pub fn add(a: &Mat, b: &Mat) -> Mat {
        a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
    }
}

pub fn m(store: &ParamStore, id: ParamId) -> Mat {
    nested::from(&store.get(id).value)
}

pub fn vecp(store: &ParamStore, id: ParamId) -> Vec<f64> {
    store.get(id).value.data().to_vec()
}

pub fn oracle_layer(store: &ParamStore, l: &StreamLayer, heads: usize, h: &Mat) -> Mat {
    let a = &l.attention;
    let q = nested::linear(h, &m(store, a.q_weight), &vecp(store, a.q_bias));
    let k = nested::linear(h, &m(store, a.k_weight), &vecp(store, a.k_bias));
    let v = nested::linear(h, &m(store, a.v_weight), &vecp(store, a.v_bias));
    let att = nested::linear(&nested::attention(&q, &k, &v, heads), &m(store, a.out_weight), &vecp(store, a.out_bias));
    let x = nested::layer_norm(&nested::add(h, &att), &vecp(store, l.norm1_gain), &vecp(store, l.norm1_bias));
    let mut f = nested::linear(&x, &m(store, l.ff1_weight), &vecp(store, l.ff1_bias));
    f.iter_mut().flatten().for_each(|v| *v = nested::gelu(*v));
    let f = nested::linear(&f, &m(store, l.ff2_weight), &vecp(store, l.ff2_bias));
    nested::layer_norm(&nested::add(&x, &f), &vecp(store, l.norm2_gain), &vecp(store, l.norm2_bias))
}

pub fn max_diff(a: &Tensor, b: &Mat) -> f64 {
    assert_eq!(a.rows(), b.len());
    (0..a.rows())
        .flat_map(|r| a.row(r).iter().zip(&b[r]).map(|(x, y)| (x - y).abs()).collect::<Vec<_>>())
        .fold(0.0, f64::max)
}

pub fn partition(seq: &InputSequence, embedded: &Tensor) -> StreamStates {
    let pick = |s| embedded.gather_rows(&seq.stream_positions(s));
    StreamStates { text: pick(Stream::Text), action: pick(Stream::Action), region: pick(Stream::Region) }
}

