use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::forward::{self, TrainPass};
use crate::autodiff::Var;
use super::*;
use crate::graph::{generate_ba2motif, split, Dataset, Split};
use crate::kernel::{Bandwidth, EntropyConfig};

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random(rows: usize, cols: usize, scale: f64, r: &mut impl Rng) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| scale * r.sample::<f64, _>(StandardNormal))
}

fn arch(d: usize, k: usize, l: usize) -> Architecture {
    Architecture {
        feature_dim: d,
        n_classes: 2,
        k,
        l,
        classifier: ClassifierKind::Gin,
        readout: Readout::Sum,
        dropout: 0.0,
        explainer: true,
    }
}

fn graph(n: usize, edges: &[(usize, usize)], features: Tensor, label: usize) -> Graph {
    let mut a = Tensor::zeros(n, n);
    for &(i, j) in edges {
        a.set(i, j, 1.0);
        a.set(j, i, 1.0);
    }
    Graph {
        adjacency: a,
        features,
        label,
        mask: None,
    }
}

fn ring(n: usize, d: usize, label: usize, r: &mut impl Rng) -> Graph {
    let mut edges: Vec<(usize, usize)> = (0..n - 1).map(|i| (i, i + 1)).collect();
    edges.push((0, n - 1));
    if label == 1 {
        edges.push((0, n / 2));
    }
    graph(n, &edges, random(n, d, 1.0, r), label)
}

fn set_all(store: &mut ParamStore, prefix: &str, f: impl Fn(f64) -> f64) {
    let names: Vec<String> = store.names().filter(|n| n.starts_with(prefix)).cloned().collect();
    for n in names {
        for x in store.get_mut(&n).unwrap().data_mut() {
            *x = f(*x);
        }
    }
}

fn dense(x: &[f64], w: &Tensor, b: Option<&Tensor>) -> Vec<f64> {
    (0..w.cols())
        .map(|j| (0..w.rows()).map(|i| x[i] * w.get(i, j)).sum::<f64>() + b.map_or(0.0, |b| b.get(0, j)))
        .collect()
}

#[test]
fn encode_with_zero_weights_returns_the_noise() {
    let mut p = ModelParams::init(arch(10, 56, 8), &mut rng(0));
    set_all(&mut p.store, "enc.", |_| 0.0);
    let g = ring(7, 10, 0, &mut rng(1));
    let f = p.encode(&g, &mut rng(5)).unwrap();
    assert_eq!(f.alpha.shape(), [7, 56]);
    assert_eq!(f.beta.shape(), [7, 8]);
    assert!(f.mean.data().iter().chain(f.logvar.data()).all(|&x| x == 0.0));
    let mut r = rng(5);
    let eps = Tensor::from_fn(7, 64, |_, _| r.sample::<f64, _>(StandardNormal));
    assert_eq!(f.alpha, eps.slice_cols(0, 56));
    assert_eq!(f.beta, eps.slice_cols(56, 64));
}

#[test]
fn encode_is_deterministic_per_seed() {
    let p = ModelParams::init(arch(4, 3, 2), &mut rng(0));
    let g = ring(6, 4, 1, &mut rng(1));
    let a = p.encode(&g, &mut rng(9)).unwrap();
    assert_eq!(a, p.encode(&g, &mut rng(9)).unwrap());
    let b = p.encode(&g, &mut rng(10)).unwrap();
    assert_eq!(a.mean, b.mean);
    assert_ne!(a.alpha, b.alpha);
}

#[test]
fn encode_single_node_matches_scalar_oracle() {
    let mut p = ModelParams::init(arch(3, 2, 1), &mut rng(2));
    set_all(&mut p.store, "enc.", |x| x + 0.1);
    let x = [0.5, -1.0, 2.0];
    let g = graph(1, &[], Tensor::from_rows(&[x.to_vec()]), 0);
    let f = p.encode(&g, &mut rng(3)).unwrap();

    let s = &p.store;
    let w = |n: &str| s.get(n).unwrap();
    // A single node's normalized adjacency is [1].
    let h0: Vec<f64> = dense(&x, w("enc.gcn0.w"), None).into_iter().map(sig).collect();
    let h1: Vec<f64> = dense(&h0, w("enc.gcn1.w"), None).into_iter().map(sig).collect();
    let mu = dense(&h1, w("enc.mu.w"), Some(w("enc.mu.b")));
    let lv = dense(&h1, w("enc.logvar.w"), Some(w("enc.logvar.b")));
    let mut r = rng(3);
    let z: Vec<f64> = (0..3)
        .map(|j| mu[j] + (lv[j] / 2.0).exp() * r.sample::<f64, _>(StandardNormal))
        .collect();
    for j in 0..3 {
        assert!((f.mean.get(0, j) - mu[j]).abs() < 1e-12);
        assert!((f.logvar.get(0, j) - lv[j]).abs() < 1e-12);
    }
    assert!((f.alpha.get(0, 0) - z[0]).abs() < 1e-12);
    assert!((f.alpha.get(0, 1) - z[1]).abs() < 1e-12);
    assert!((f.beta.get(0, 0) - z[2]).abs() < 1e-12);
}

#[test]
fn decode_zero_latent_gives_half_and_bias_features() {
    let mut p = ModelParams::init(arch(3, 2, 2), &mut rng(0));
    set_all(&mut p.store, "dec.", |x| x - 0.3);
    let (a, x) = p.decode(&Tensor::zeros(5, 4)).unwrap();
    assert!(a.data().iter().all(|&v| v == 0.5));
    let s = &p.store;
    let h: Vec<f64> = s.get("dec.x0.b").unwrap().data().iter().map(|&v| v.max(0.0)).collect();
    let want = dense(&h, s.get("dec.x1.w").unwrap(), Some(s.get("dec.x1.b").unwrap()));
    for i in 0..5 {
        for j in 0..3 {
            assert!((x.get(i, j) - want[j]).abs() < 1e-12);
        }
    }
}

#[test]
fn decode_separates_orthogonal_and_opposed_rows() {
    let p = ModelParams::init(arch(3, 3, 1), &mut rng(0));
    let z = Tensor::from_fn(4, 4, |i, j| if i == j { 20.0 } else { 0.0 });
    let (a, _) = p.decode(&z).unwrap();
    for i in 0..4 {
        for j in 0..4 {
            if i == j {
                assert!(a.get(i, j) > 1.0 - 1e-12);
            } else {
                assert_eq!(a.get(i, j), 0.5);
            }
        }
    }
    let z = Tensor::from_rows(&[vec![20.0, 0.0, 0.0, 0.0], vec![-20.0, 0.0, 0.0, 0.0]]);
    let (a, _) = p.decode(&z).unwrap();
    assert!(a.get(0, 1) < 1e-12 && a.get(1, 0) < 1e-12);
}

#[test]
fn decode_matches_hand_gram() {
    let p = ModelParams::init(arch(2, 2, 1), &mut rng(0));
    let z = random(4, 3, 0.7, &mut rng(4));
    let (a, _) = p.decode(&z).unwrap();
    let e = subgraph(&z).unwrap().weights;
    for i in 0..4 {
        for j in 0..4 {
            let dot: f64 = (0..3).map(|c| z.get(i, c) * z.get(j, c)).sum();
            assert!((a.get(i, j) - sig(dot)).abs() < 1e-12);
            assert_eq!(a.get(i, j), e.get(i, j));
        }
    }
}

#[test]
fn subgraph_examples() {
    let w = subgraph(&Tensor::zeros(4, 3)).unwrap().weights;
    assert!(w.data().iter().all(|&v| v == 0.5));
    let w = subgraph(&Tensor::eye(3)).unwrap().weights;
    for i in 0..3 {
        for j in 0..3 {
            let want = if i == j { sig(1.0) } else { 0.5 };
            assert!((w.get(i, j) - want).abs() < 1e-15);
        }
    }
}

proptest! {
    #[test]
    fn subgraph_is_exactly_symmetric(seed in 0u64..1000, n in 1usize..9, k in 1usize..6) {
        let a = random(n, k, 2.0, &mut rng(seed));
        let w = subgraph(&a).unwrap().weights;
        prop_assert!(w.is_symmetric(0.0));
        prop_assert!(w.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}

#[test]
fn explanation_is_symmetric_and_needs_an_explainer() {
    let p = ModelParams::init(arch(4, 5, 2), &mut rng(0));
    let g = ring(9, 4, 1, &mut rng(1));
    let e = p.explain(&g, 3).unwrap();
    assert_eq!(e.graph_id, 3);
    assert!(e.weights.is_symmetric(0.0));
    let mut plain = p.clone();
    plain.arch.explainer = false;
    assert!(matches!(plain.explain(&g, 0), Err(Error::Config(_))));
}

/// Two graphs of different size, weights inside `[0, 1]`.
fn uneven_batch(r: &mut impl Rng) -> (Vec<Graph>, Batch) {
    let mut gs = vec![ring(5, 3, 0, r), ring(7, 3, 1, r)];
    gs[1].adjacency.set(2, 3, 0.25);
    gs[1].adjacency.set(3, 2, 0.25);
    let prepared: Vec<Prepared> = gs.iter().map(|g| Prepared::new(g).unwrap()).collect();
    let batch = Batch::new(&prepared.iter().collect::<Vec<_>>()).unwrap();
    (gs, batch)
}

#[test]
fn graphvae_loss_vanishes_at_perfect_reconstruction() {
    let (_, batch) = uneven_batch(&mut rng(0));
    let mut tape = Tape::new();
    let a = tape.constant(batch.recon_target.clone()).unwrap();
    let x = tape.constant(batch.features.clone()).unwrap();
    let zero = tape.constant(Tensor::zeros(12, 4)).unwrap();
    let l = forward::graphvae_loss(&mut tape, &batch, a, x, zero, zero).unwrap();
    assert!(tape.value(l).item().abs() < 1e-12);

    let mu = random(12, 4, 1.0, &mut rng(1));
    let want = mu.data().iter().map(|m| m * m / 2.0).sum::<f64>() / 2.0;
    let m = tape.constant(mu).unwrap();
    let l = forward::graphvae_loss(&mut tape, &batch, a, x, m, zero).unwrap();
    assert!((tape.value(l).item() - want).abs() < 1e-12);
}

#[test]
fn graphvae_loss_matches_scalar_oracle() {
    let mut r = rng(7);
    let (gs, batch) = uneven_batch(&mut r);
    let seg = batch.segments.clone();
    let z = random(12, 4, 0.8, &mut r);
    let xc = random(12, 3, 1.0, &mut r);
    let mu = random(12, 4, 0.5, &mut r);
    let lv = random(12, 4, 0.3, &mut r);

    let mut tape = Tape::new();
    let zv = tape.constant(z).unwrap();
    let gram = tape.block_gram(zv, &seg).unwrap();
    let ac = tape.sigmoid(gram).unwrap();
    let (xv, mv, lvv) = (
        tape.constant(xc.clone()).unwrap(),
        tape.constant(mu.clone()).unwrap(),
        tape.constant(lv.clone()).unwrap(),
    );
    let l = forward::graphvae_loss(&mut tape, &batch, ac, xv, mv, lvv).unwrap();
    let got = tape.value(l).item();

    let acv = tape.value(ac);
    let mut total = 0.0;
    for (g, gr) in gs.iter().enumerate() {
        let rows = seg.range(g);
        let n = gr.num_nodes();
        let (mut fx, mut fa, mut kl) = (0.0, 0.0, 0.0);
        for (i, row) in rows.clone().enumerate() {
            for c in 0..3 {
                fx += (gr.features.get(i, c) - xc.get(row, c)).powi(2);
            }
            for j in 0..n {
                let target = if i == j { 1.0 } else { gr.adjacency.get(i, j) };
                fa += (target - acv.get(row, j)).powi(2);
            }
            for c in 0..4 {
                let (m, v) = (mu.get(row, c), lv.get(row, c));
                kl += (m * m + v.exp() - v - 1.0) / 2.0;
            }
        }
        total += fx.sqrt() + fa.sqrt() + kl;
    }
    assert!((got - total / 2.0).abs() < 1e-10, "{got} vs {}", total / 2.0);
}

fn causal(alpha: &Tensor, beta: &Tensor, labels: &[usize], with_mi: bool) -> Result<(f64, f64, Option<f64>)> {
    let mut tape = Tape::new();
    let a = tape.constant(alpha.clone())?;
    let b = tape.constant(beta.clone())?;
    let t = forward::causal_loss(&mut tape, a, b, labels, 2, &EntropyConfig::default(), with_mi)?;
    Ok((
        tape.value(t.loss).item(),
        tape.value(t.cmi).item(),
        t.mi.map(|m| tape.value(m).item()),
    ))
}

fn labels(b: usize) -> Vec<usize> {
    (0..b).map(|i| i % 2).collect()
}

#[test]
fn causal_loss_of_constant_alpha_is_zero() {
    let beta = random(16, 3, 1.0, &mut rng(0));
    let alpha = Tensor::filled(16, 6, 0.7);
    for with_mi in [true, false] {
        let (loss, _, _) = causal(&alpha, &beta, &labels(16), with_mi).unwrap();
        assert!(loss.abs() < 1e-9, "{loss}");
    }
}

#[test]
fn causal_loss_rewards_label_aligned_alpha() {
    let mut r = rng(1);
    let y = labels(16);
    let alpha = Tensor::from_fn(16, 4, |i, j| if j == y[i] { 3.0 } else { 0.0 } + 0.1 * r.sample::<f64, _>(StandardNormal));
    let beta = random(16, 3, 1.0, &mut r);
    let shuffled: Vec<usize> = (0..16).map(|i| (i / 8) % 2).collect();
    let (aligned, _, _) = causal(&alpha, &beta, &y, true).unwrap();
    let (other, _, _) = causal(&alpha, &beta, &shuffled, true).unwrap();
    assert!(aligned < other, "{aligned} vs {other}");
}

#[test]
fn causal_loss_terms_compose() {
    let mut r = rng(2);
    let (alpha, beta) = (random(8, 4, 1.0, &mut r), random(8, 2, 1.0, &mut r));
    let (loss, cmi, mi) = causal(&alpha, &beta, &labels(8), true).unwrap();
    assert!((loss - (mi.unwrap() - cmi)).abs() < 1e-15);
    let (loss, cmi, mi) = causal(&alpha, &beta, &labels(8), false).unwrap();
    assert_eq!((loss, mi), (-cmi, None));
}

#[test]
fn causal_loss_rejects_small_or_mismatched_batches() {
    let one = Tensor::ones(1, 3);
    assert!(matches!(causal(&one, &one, &[0], true), Err(Error::Contract(_))));
    let (a, b) = (Tensor::ones(4, 3), Tensor::ones(3, 3));
    assert!(matches!(causal(&a, &b, &labels(4), true), Err(Error::Contract(_))));
    assert!(matches!(causal(&a, &a, &labels(3), true), Err(Error::Contract(_))));
}

/// Independent forward pass of the classifier in inference mode.
fn classify_oracle(p: &ModelParams, g: &Graph) -> Vec<f64> {
    let s = &p.store;
    let n = g.num_nodes();
    let adj = |i: usize, j: usize| if g.adjacency.get(i, j) != 0.0 { 1.0 } else { 0.0 };
    let deg: Vec<f64> = (0..n).map(|i| 1.0 + (0..n).map(|j| adj(i, j)).sum::<f64>()).collect();
    let mut h: Vec<Vec<f64>> = (0..n).map(|i| g.features.row(i).to_vec()).collect();
    for layer in 0..GNN_HIDDEN.len() {
        let w = s.get(&format!("cls.gnn{layer}.w")).unwrap();
        let u: Vec<Vec<f64>> = h.iter().map(|row| dense(row, w, None)).collect();
        let t = |k: &str| s.get(&format!("{k}")).unwrap().data().to_vec();
        let (mean, var) = (t(&format!("norm.gnn{layer}.mean")), t(&format!("norm.gnn{layer}.var")));
        let (gamma, shift) = (t(&format!("cls.gnn{layer}.gamma")), t(&format!("cls.gnn{layer}.b")));
        h = (0..n)
            .map(|i| {
                (0..w.cols())
                    .map(|c| {
                        let agg: f64 = (0..n)
                            .map(|j| {
                                let m = if i == j { 1.0 } else { adj(i, j) };
                                match p.arch.classifier {
                                    ClassifierKind::Gin => m * u[j][c],
                                    ClassifierKind::Gcn => m * u[j][c] / (deg[i] * deg[j]).sqrt(),
                                }
                            })
                            .sum();
                        let v = (agg - mean[c]) / (var[c] + 1e-5).sqrt() * gamma[c] + shift[c];
                        v.max(0.0)
                    })
                    .collect()
            })
            .collect();
    }
    let mut r: Vec<f64> = (0..h[0].len()).map(|c| h.iter().map(|row| row[c]).sum()).collect();
    for i in 0..HEAD_HIDDEN.len() {
        let l = format!("cls.head{i}");
        r = dense(&r, s.get(&format!("{l}.w")).unwrap(), Some(s.get(&format!("{l}.b")).unwrap()))
            .into_iter()
            .map(|v| v.max(0.0))
            .collect();
    }
    dense(&r, s.get("cls.out.w").unwrap(), Some(s.get("cls.out.b").unwrap()))
}

fn perturbed_classifier(kind: ClassifierKind) -> ModelParams {
    let mut a = arch(2, 3, 1);
    a.classifier = kind;
    a.explainer = false;
    let mut p = ModelParams::init(a, &mut rng(0));
    let mut r = rng(1);
    let names: Vec<String> = p.store.names().filter(|n| n.starts_with("cls.") || n.starts_with("norm.")).cloned().collect();
    for n in names {
        let var = n.ends_with(".var");
        for x in p.store.get_mut(&n).unwrap().data_mut() {
            let e: f64 = r.sample(StandardNormal);
            *x = if var { 0.5 + e.abs() } else { *x + 0.1 * e };
        }
    }
    p
}

#[test]
fn classifier_matches_hand_unrolled_path() {
    let g = graph(3, &[(0, 1), (1, 2)], Tensor::from_rows(&[vec![1.0, 0.0], vec![0.5, -1.0], vec![0.0, 2.0]]), 0);
    for kind in [ClassifierKind::Gin, ClassifierKind::Gcn] {
        let p = perturbed_classifier(kind);
        let got = p.logits(&g).unwrap();
        let want = classify_oracle(&p, &g);
        assert_eq!(got.shape(), [1, 2]);
        for c in 0..2 {
            assert!((got.get(0, c) - want[c]).abs() < 1e-10, "{kind}: {} vs {}", got.get(0, c), want[c]);
        }
    }
}

#[test]
fn classifier_is_pure() {
    let p = perturbed_classifier(ClassifierKind::Gin);
    let g = ring(6, 2, 1, &mut rng(3));
    assert_eq!(p.logits(&g).unwrap(), p.logits(&g).unwrap());
}

#[test]
fn zero_features_ignore_message_passing_weights() {
    let mut p = ModelParams::init(arch(2, 3, 1), &mut rng(0));
    set_all(&mut p.store, "cls.head", |x| x + 0.2);
    set_all(&mut p.store, "cls.out", |x| x - 0.1);
    let g = graph(4, &[(0, 1), (1, 2), (2, 3)], Tensor::zeros(4, 2), 0);
    let base = p.logits(&g).unwrap();
    let want = {
        let s = &p.store;
        let mut r = vec![0.0; GNN_HIDDEN[GNN_HIDDEN.len() - 1]];
        for i in 0..HEAD_HIDDEN.len() {
            let l = format!("cls.head{i}");
            r = dense(&r, s.get(&format!("{l}.w")).unwrap(), Some(s.get(&format!("{l}.b")).unwrap()))
                .into_iter()
                .map(|v| v.max(0.0))
                .collect();
        }
        dense(&r, s.get("cls.out.w").unwrap(), Some(s.get("cls.out.b").unwrap()))
    };
    for c in 0..2 {
        assert!((base.get(0, c) - want[c]).abs() < 1e-12);
    }
    let mut q = p.clone();
    let mut r = rng(9);
    for i in 0..GNN_HIDDEN.len() {
        for x in q.store.get_mut(&format!("cls.gnn{i}.w")).unwrap().data_mut() {
            *x = r.sample(StandardNormal);
        }
    }
    let other = graph(4, &[(0, 3)], Tensor::zeros(4, 2), 1);
    assert_eq!(q.logits(&other).unwrap(), base);
}

/// Stage losses built directly from the forward pieces, with a fixed
/// bandwidth so that finite differences see a smooth function.
fn stage_losses(p: &ModelParams, batch: &Batch, eps: Option<&Tensor>, grad_of: &str) -> (f64, f64, Tensor, Tensor) {
    let entropy = EntropyConfig {
        bandwidth: Bandwidth::Fixed(2.0),
        ..EntropyConfig::default()
    };
    let a = &p.arch;
    let seg = &batch.segments;
    let causal_of = |tape: &mut Tape, alpha: Var, beta: Var| {
        let va = forward::vectorize(tape, alpha, seg).unwrap();
        let vb = forward::vectorize(tape, beta, seg).unwrap();
        forward::causal_loss(tape, va, vb, &batch.labels, 2, &entropy, true).unwrap().loss
    };

    let mut tape = Tape::new();
    let b = Bound::bind(&mut tape, &p.store, |n| n == grad_of).unwrap();
    let enc = forward::encode(&mut tape, &b, a, batch, eps.cloned()).unwrap();
    let (ac, xc) = forward::decode(&mut tape, &b, enc.z, seg).unwrap();
    let vae = forward::graphvae_loss(&mut tape, batch, ac, xc, enc.mu, enc.logvar).unwrap();
    let alpha = tape.slice_cols(enc.z, 0, a.k).unwrap();
    let beta = tape.slice_cols(enc.z, a.k, a.latent()).unwrap();
    let c = causal_of(&mut tape, alpha, beta);
    let l1 = tape.add(vae, c).unwrap();
    let g1 = b.collect(&tape, &tape.backward(l1).unwrap()).remove(grad_of).unwrap();
    let v1 = tape.value(l1).item();

    let mut tape = Tape::new();
    let b = Bound::bind(&mut tape, &p.store, |n| n == grad_of).unwrap();
    let enc = forward::encode(&mut tape, &b, a, batch, None).unwrap();
    let beta = tape.slice_cols(enc.mu, a.k, a.latent()).unwrap();
    let (adj, proj) = forward::classifier_adjacency(&mut tape, &b, a, batch, None).unwrap();
    let mut dr = rng(0);
    let mut pass = TrainPass::new(&mut dr);
    let logits = forward::classify(&mut tape, &b, &p.store, a, batch, adj, Some(&mut pass)).unwrap();
    let ce = tape.cross_entropy(logits, &batch.labels).unwrap();
    let c = causal_of(&mut tape, proj.unwrap(), beta);
    let l2 = tape.add(ce, c).unwrap();
    let g2 = b.collect(&tape, &tape.backward(l2).unwrap()).remove(grad_of).unwrap();
    (v1, tape.value(l2).item(), g1, g2)
}

#[test]
fn end_to_end_gradients_match_finite_differences() {
    let mut r = rng(11);
    let gs = [ring(6, 3, 0, &mut r), ring(6, 3, 1, &mut r)];
    let prepared: Vec<Prepared> = gs.iter().map(|g| Prepared::new(g).unwrap()).collect();
    let batch = Batch::new(&prepared.iter().collect::<Vec<_>>()).unwrap();
    let p = ModelParams::init(arch(3, 4, 2), &mut rng(12));
    let eps = random(12, 6, 1.0, &mut r);

    // Small enough not to straddle ReLU kinks in the classifier.
    let h = 1e-5;
    for name in ["enc.gcn0.w", "enc.mu.w", "sub.w", "cls.gnn0.w"] {
        let (_, _, g1, g2) = stage_losses(&p, &batch, Some(&eps), name);
        let len = p.store.get(name).unwrap().len();
        for idx in [0, len / 2, len - 1] {
            let at = |d: f64| {
                let mut q = p.clone();
                q.store.get_mut(name).unwrap().data_mut()[idx] += d;
                let (l1, l2, _, _) = stage_losses(&q, &batch, Some(&eps), name);
                [l1, l2]
            };
            let (m2, m1, p1, p2) = (at(-2.0 * h), at(-h), at(h), at(2.0 * h));
            for (s, g) in [g1.data()[idx], g2.data()[idx]].into_iter().enumerate() {
                let numeric = (m2[s] - 8.0 * m1[s] + 8.0 * p1[s] - p2[s]) / (12.0 * h);
                let err = (g - numeric).abs() / g.abs().max(numeric.abs()).max(1e-6);
                assert!(err < 1e-3, "L{} wrt {name}[{idx}]: {g} vs {numeric}", s + 1);
            }
        }
    }
}

#[test]
fn batch_losses_ignore_graph_order() {
    let mut r = rng(21);
    let gs: Vec<Graph> = (0..4).map(|i| ring(6, 3, i % 2, &mut r)).collect();
    let prepared: Vec<Prepared> = gs.iter().map(|g| Prepared::new(g).unwrap()).collect();
    let p = ModelParams::init(arch(3, 4, 2), &mut rng(22));
    let losses = |order: &[usize]| {
        let batch = Batch::new(&order.iter().map(|&i| &prepared[i]).collect::<Vec<_>>()).unwrap();
        let (l1, l2, _, _) = stage_losses(&p, &batch, None, "sub.w");
        (l1, l2)
    };
    let (a1, a2) = losses(&[0, 1, 2, 3]);
    let (b1, b2) = losses(&[2, 0, 3, 1]);
    assert!((a1 - b1).abs() <= 1e-9 * a1.abs(), "{a1} vs {b1}");
    assert!((a2 - b2).abs() <= 1e-9 * a2.abs(), "{a2} vs {b2}");
}

fn small_run(epochs: usize, gc_epochs: usize) -> (Dataset, TrainConfig) {
    let ds = generate_ba2motif(40, 0).unwrap();
    let cfg = TrainConfig {
        epochs,
        gc_epochs,
        lambda: 0.1,
        batch_size: 8,
        ..TrainConfig::default()
    };
    (ds, cfg)
}

fn autoencoder_part(p: &ModelParams) -> Vec<(String, Tensor)> {
    p.store
        .iter()
        .filter(|(n, _)| is_autoencoder_param(n))
        .map(|(n, t)| (n.clone(), t.clone()))
        .collect()
}

#[test]
fn classifier_stage_leaves_autoencoder_untouched() {
    let (ds, cfg) = small_run(4, 2);
    let full = train(&ds, &cfg).unwrap();
    let (_, cfg1) = small_run(2, 2);
    let first = train(&ds, &cfg1).unwrap();
    assert_eq!(autoencoder_part(&full.final_params), autoencoder_part(&first.final_params));
    assert_eq!(autoencoder_part(&full.params), autoencoder_part(&first.final_params));
    let stages: Vec<u8> = full.history.iter().map(|r| r.stage).collect();
    assert_eq!(stages, [1, 1, 2, 2]);
    assert!(full.history.iter().all(|r| r.loss_causal.is_some()));
    assert!((3..=4).contains(&full.best_epoch));
}

#[test]
fn zero_lambda_single_stage_has_no_causal_or_classifier_terms() {
    let (ds, mut cfg) = small_run(3, 3);
    cfg.lambda = 0.0;
    let out = train(&ds, &cfg).unwrap();
    for r in &out.history {
        assert_eq!((r.stage, r.loss_causal, r.loss_ce), (1, None, None));
        assert!(r.loss_vae.unwrap().is_finite());
    }
}

#[test]
fn variants_switch_terms() {
    let (ds, mut cfg) = small_run(3, 1);
    cfg.variant = Variant::NoCausal;
    let out = train(&ds, &cfg).unwrap();
    assert!(out.history.iter().all(|r| r.loss_causal.is_none()));

    cfg.variant = Variant::PlainClassifier;
    let out = train(&ds, &cfg).unwrap();
    assert!(out.history.iter().all(|r| r.stage == 2 && r.loss_vae.is_none() && r.hsic_alpha_beta.is_none()));
    assert!(!out.params.arch.explainer);
}

#[test]
fn training_is_deterministic() {
    let (ds, cfg) = small_run(3, 1);
    let a = train(&ds, &cfg).unwrap();
    let b = train(&ds, &cfg).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.final_params, b.final_params);
    let c = train(&ds, &TrainConfig { seed: 1, ..cfg }).unwrap();
    assert_ne!(a.final_params, c.final_params);
}

#[test]
fn training_rejects_empty_split_parts() {
    let (ds, cfg) = small_run(2, 1);
    let mut s: Split = split(ds.len(), 0).unwrap();
    s.validation.clear();
    assert!(matches!(train_on_split(&ds, &s, &cfg), Err(Error::Contract(_))));
}

#[test]
fn checkpoint_round_trips_bit_for_bit() {
    let (ds, cfg) = small_run(2, 1);
    let out = train(&ds, &cfg).unwrap();
    let ck = Checkpoint {
        config: cfg,
        params: out.params.clone(),
        best_epoch: out.best_epoch,
        history: out.history.clone(),
    };
    let back = Checkpoint::from_json(&ck.to_json().unwrap()).unwrap();
    assert_eq!(back, ck);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.json");
    save_checkpoint(&ck, &path).unwrap();
    assert_eq!(load_checkpoint(&path).unwrap(), ck);

    let bumped = ck.to_json().unwrap().replace("\"format_version\":1", "\"format_version\":99");
    assert!(matches!(Checkpoint::from_json(&bumped), Err(Error::Validation(_))));
    assert!(matches!(load_checkpoint(dir.path().join("missing.json")), Err(Error::Io { .. })));

    let mut csv = Vec::new();
    write_history_csv(&out.history, &mut csv).unwrap();
    let text = String::from_utf8(csv).unwrap();
    let first = text.lines().nth(1).unwrap();
    assert!(first.starts_with("1,1,") && first.contains(",,"), "{first}");
}
