//! Test-side oracles, written independently of the library code they check.
#![allow(dead_code)]

use std::sync::Arc;
use std::time::Duration;

use isacl::gate::{self, Gate};
use isacl::judge::GatedMlp;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tokio::net::TcpListener;
use tokio::sync::oneshot;

/// Longest common subsequence by enumerating every subsequence of `a`.
pub fn lcs_brute_force(a: &[u8], b: &[u8]) -> usize {
    assert!(a.len() <= 20, "enumeration is exponential");
    let mut best = 0;
    for mask in 0u32..(1 << a.len()) {
        let len = mask.count_ones() as usize;
        if len <= best {
            continue;
        }
        let sub: Vec<u8> = (0..a.len()).filter(|i| mask & (1 << i) != 0).map(|i| a[i]).collect();
        let mut it = b.iter();
        if sub.iter().all(|x| it.any(|y| y == x)) {
            best = len;
        }
    }
    best
}

/// Metric values recomputed from scratch: (accuracy, precision, recall, f1).
pub fn metrics_by_hand(decisions: &[u8], labels: &[u8]) -> (f64, f64, f64, f64) {
    let (mut tp, mut fp, mut fn_, mut tn) = (0u64, 0u64, 0u64, 0u64);
    for (&d, &l) in decisions.iter().zip(labels) {
        match (d, l) {
            (1, 1) => tp += 1,
            (1, 0) => fp += 1,
            (0, 1) => fn_ += 1,
            _ => tn += 1,
        }
    }
    let ratio = |n: u64, d: u64| if d == 0 { 0.0 } else { n as f64 / d as f64 };
    let acc = ratio(tp + tn, tp + fp + fn_ + tn);
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = ratio(2 * tp, 2 * tp + fp + fn_);
    (acc, precision, recall, f1)
}

/// Mean binary cross-entropy recomputed with plain loops.
pub fn bce_by_hand(net: &GatedMlp<f64>, xs: &[Vec<f64>], ys: &[u8]) -> f64 {
    let mut total = 0.0;
    for (x, &y) in xs.iter().zip(ys) {
        let mut z = net.b_down;
        for j in 0..net.hidden {
            let row = j * net.d_in..(j + 1) * net.d_in;
            let up: f64 = net.w_up[row.clone()].iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + net.b_up[j];
            let g: f64 = net.w_gate[row].iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + net.b_gate[j];
            z += net.w_down[j] * up * (g / (1.0 + (-g).exp()));
        }
        let p = 1.0 / (1.0 + (-z).exp());
        total -= if y == 1 { p.ln() } else { (1.0 - p).ln() };
    }
    total / xs.len() as f64
}

pub struct GradCheck {
    pub entries: usize,
    pub worst_relative: f64,
}

/// Compares analytic gradients with central differences (step 1e-4) for one
/// random model and batch. Relative error uses max(|analytic|, |numeric|).
pub fn gradient_check(d_in: usize, hidden: usize, batch: usize, seed: u64) -> GradCheck {
    const STEP: f64 = 1e-4;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = GatedMlp::<f64>::init(d_in, hidden, &mut rng);
    // push biases away from zero so every path is exercised
    for t in [&mut net.b_up, &mut net.b_gate] {
        t.iter_mut().for_each(|b| *b = rng.random_range(-0.5..0.5));
    }
    net.b_down = rng.random_range(-0.5..0.5);
    let xs: Vec<Vec<f64>> = (0..batch).map(|_| (0..d_in).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
    let mut ys: Vec<u8> = (0..batch).map(|_| rng.random_range(0..2)).collect();
    ys[0] = 0;
    if batch > 1 {
        ys[1] = 1;
    }
    let refs: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
    let (loss, grad) = net.loss_and_grad(&refs, &ys).unwrap();
    assert!((loss - bce_by_hand(&net, &xs, &ys)).abs() < 1e-10);

    let analytic: Vec<f64> = grad.tensors().iter().flat_map(|t| t.iter().copied()).collect();
    let mut worst: f64 = 0.0;
    let mut flat = 0;
    for t in 0..6 {
        for i in 0..net.tensors()[t].len() {
            let orig = net.tensors()[t][i];
            net.tensors_mut()[t][i] = orig + STEP;
            let plus = bce_by_hand(&net, &xs, &ys);
            net.tensors_mut()[t][i] = orig - STEP;
            let minus = bce_by_hand(&net, &xs, &ys);
            net.tensors_mut()[t][i] = orig;
            let numeric = (plus - minus) / (2.0 * STEP);
            let a = analytic[flat];
            let scale = a.abs().max(numeric.abs());
            let rel = if scale == 0.0 { 0.0 } else { (a - numeric).abs() / scale };
            worst = worst.max(rel);
            flat += 1;
        }
    }
    GradCheck {
        entries: flat,
        worst_relative: worst,
    }
}

/// A gate listening on an ephemeral port. Dropping `stop` shuts it down.
pub struct RunningGate {
    pub addr: std::net::SocketAddr,
    pub stop: oneshot::Sender<()>,
    pub task: tokio::task::JoinHandle<()>,
}

pub async fn start_gate(gate: Gate) -> RunningGate {
    let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let (stop, rx) = oneshot::channel::<()>();
    let task = tokio::spawn(gate::serve(
        listener,
        Arc::new(gate),
        async {
            let _ = rx.await;
        },
        Duration::from_secs(5),
    ));
    RunningGate { addr, stop, task }
}
