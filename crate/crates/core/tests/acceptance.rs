//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.
//!
//! Criteria 7 and 8 train dozens of small networks and take several minutes
//! on one core; the rest finish in seconds.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::path::Path;
use std::time::Instant;

use cmnas::config::RunConfig;
use cmnas::data::{generate_dataset, sample_pk_batch, SynthConfig};
use cmnas::eval::compute_cmc_map;
use cmnas::losses::{cc_loss, cls_loss, cmmd_loss, total_loss, triplet_loss, FeatureBatch, LossConfig};
use cmnas::nn::{
    AdamConfig, BackboneConfig, Baseline, ModalityRouting, Network, NormRouting, ParamGroup, ParamId,
};
use cmnas::pipeline::{
    basic_loss, cmd_eval, cmd_retrain, cmd_search, evaluate_model, heldout_cmmd, search_phase, summary,
    train_phase, ArchSpec, Experiment, SavedRun, MODEL_CKPT, SEARCH_CKPT,
};
use cmnas::search::{arch_probs, arch_step, bilevel_step, ArchBitstring};
use cmnas::tensor::{finite_diff_check, relative_error, OpKind};
use cmnas::train::{weight_step, ClassIndex, TrainState};
use cmnas::{Graph, Modality, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

type Outcome = Result<String, String>;

const FD_STEP: f64 = 1e-5;
const FD_TOL: f64 = 1e-4;
const SEEDS: u64 = 5;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

/// Random labelled batch with `ids` identities and `k` samples per modality.
fn labelled(ids: usize, k: usize) -> (Vec<u32>, Vec<Modality>) {
    let mut id = Vec::new();
    let mut m = Vec::new();
    for i in 0..ids {
        for md in [Modality::Vis, Modality::Ir] {
            for _ in 0..k {
                id.push(i as u32);
                m.push(md);
            }
        }
    }
    (id, m)
}

fn tiny_backbone() -> BackboneConfig {
    BackboneConfig {
        resolution: 8,
        stem_width: 4,
        widths: vec![4, 8],
        blocks: vec![1, 1],
        embedding_dim: 8,
        num_classes: 4,
        ..BackboneConfig::default()
    }
}

fn gradients() -> Outcome {
    let mut worst = [0.0f64; 6];
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_ids = rng.gen_range(2..4);
        let k = rng.gen_range(1..3);
        let d = rng.gen_range(2..6);
        let (ids, mods) = labelled(n_ids, k);
        let n = ids.len();
        let feats = randn(&mut rng, &[n, d]);
        let logits = randn(&mut rng, &[n, n_ids + 1]);
        let labels: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let cfg = LossConfig::default();

        let checks: [(usize, Vec<Tensor>); 5] = [
            (0, vec![logits.clone()]),
            (1, vec![feats.clone()]),
            (2, vec![feats.clone()]),
            (3, vec![feats.clone()]),
            (4, vec![feats.clone(), logits.clone()]),
        ];
        for (term, params) in checks {
            let e = finite_diff_check(&params, FD_STEP, |g, v| match term {
                0 => cls_loss(g, v[0], &labels),
                1 => triplet_loss(g, v[0], &ids, cfg.margin),
                2 => cmmd_loss(g, &FeatureBatch::new(v[0], ids.clone(), mods.clone())),
                3 => {
                    let fb = FeatureBatch::new(v[0], ids.clone(), mods.clone());
                    let (vi, ii) = fb.aligned_pairs()?;
                    cc_loss(g, g.select_rows(v[0], &vi), g.select_rows(v[0], &ii))
                }
                _ => {
                    let fb = FeatureBatch::new(v[0], ids.clone(), mods.clone());
                    Ok(total_loss(g, &fb, v[1], &labels, &cfg)?.total)
                }
            })
            .map_err(err)?;
            worst[term] = worst[term].max(e);
        }
        worst[5] = worst[5].max(alpha_gradient_error(seed)?);
    }
    let names = ["cls", "triplet", "cmmd", "cc", "combined", "alpha"];
    let detail = names
        .iter()
        .zip(worst)
        .map(|(n, w)| format!("{n} {w:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    ensure!(worst.iter().all(|&w| w < FD_TOL), "max relative error over 100 seeds: {detail}");
    Ok(format!("100 seeds, max relative error {detail}"))
}

/// Gradient of the full objective with respect to every architecture
/// parameter of a small searchable network, against central differences
/// obtained by perturbing the stored alphas.
fn alpha_gradient_error(seed: u64) -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa1fa);
    let mut net = Network::build(&tiny_backbone().searchable(), seed).map_err(err)?;
    let alphas: Vec<(f64, f64)> = net
        .alphas()
        .iter()
        .map(|_| (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
        .collect();
    net.set_alphas(&alphas).map_err(err)?;
    let (ids, mods) = labelled(2, 2);
    let images = randn(&mut rng, &[ids.len(), 3, 8, 8]);
    let labels: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
    let cfg = LossConfig::default();

    let loss = |net: &Network, g: &Graph| -> cmnas::Result<cmnas::Var> {
        let out = net.forward(g, &images, &mods, true)?;
        let fb = FeatureBatch::new(out.embedding, ids.clone(), mods.clone());
        Ok(total_loss(g, &fb, out.logits, &labels, &cfg)?.total)
    };
    let g = Graph::new();
    let l = loss(&net, &g).map_err(err)?;
    let grads = g.backward(l).map_err(err)?;
    let keys: Vec<(ParamId, ParamId)> = net
        .searchable_layers()
        .iter()
        .map(|s| (s.alpha_separate, s.alpha_share))
        .collect();

    let eval = |a: &[(f64, f64)]| -> Result<f64, String> {
        let mut probe = net.clone();
        probe.set_alphas(a).map_err(err)?;
        let g = Graph::new();
        let l = loss(&probe, &g).map_err(err)?;
        Ok(g.scalar(l))
    };
    let mut worst = 0.0f64;
    for (i, &(ks, kh)) in keys.iter().enumerate() {
        for (which, key) in [(0, ks), (1, kh)] {
            let mut up = alphas.clone();
            let mut down = alphas.clone();
            if which == 0 {
                up[i].0 += FD_STEP;
                down[i].0 -= FD_STEP;
            } else {
                up[i].1 += FD_STEP;
                down[i].1 -= FD_STEP;
            }
            let numeric = (eval(&up)? - eval(&down)?) / (2.0 * FD_STEP);
            let analytic = grads.param(key.0).map(|t| t.item()).unwrap_or(0.0);
            worst = worst.max(relative_error(analytic, numeric));
        }
    }
    Ok(worst)
}

/// `|| mean psi(v) - mean psi(i) ||` with `psi(x) = vec(x x^T)`, averaged over
/// classes.
fn cmmd_explicit(x: &[Vec<f64>], ids: &[u32], mods: &[Modality]) -> f64 {
    let d = x[0].len();
    let mut classes: Vec<u32> = ids.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let psi_mean = |rows: &[usize]| {
        let mut m = vec![0.0; d * d];
        for &r in rows {
            for a in 0..d {
                for b in 0..d {
                    m[a * d + b] += x[r][a] * x[r][b];
                }
            }
        }
        m.iter_mut().for_each(|v| *v /= rows.len() as f64);
        m
    };
    let mut total = 0.0;
    for &c in &classes {
        let pick = |md: Modality| -> Vec<usize> { (0..x.len()).filter(|&i| ids[i] == c && mods[i] == md).collect() };
        let (mv, mi) = (psi_mean(&pick(Modality::Vis)), psi_mean(&pick(Modality::Ir)));
        total += mv.iter().zip(&mi).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    }
    total / classes.len() as f64
}

fn cmmd_oracle() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..500u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = rng.gen_range(1..=8);
        let classes = rng.gen_range(1..=4);
        let mut ids = Vec::new();
        let mut mods = Vec::new();
        for c in 0..classes {
            for md in [Modality::Vis, Modality::Ir] {
                for _ in 0..rng.gen_range(1..=6) {
                    ids.push(c as u32);
                    mods.push(md);
                }
            }
        }
        let rows: Vec<Vec<f64>> = (0..ids.len())
            .map(|_| (0..d).map(|_| rng.sample(StandardNormal)).collect())
            .collect();
        let g = Graph::new();
        let t = Tensor::new(vec![rows.len(), d], rows.concat()).unwrap();
        let f = g.constant(t);
        let v = g.scalar(cmmd_loss(&g, &FeatureBatch::new(f, ids.clone(), mods.clone())).map_err(err)?);
        let e = cmmd_explicit(&rows, &ids, &mods);
        worst = worst.max((v - e).abs());

        // same samples in both modalities
        let half: Vec<Vec<f64>> = rows[..rows.len().div_ceil(2)].to_vec();
        let both: Vec<Vec<f64>> = half.iter().chain(&half).cloned().collect();
        let n = half.len();
        let same_ids: Vec<u32> = (0..2 * n).map(|i| (i % n % 3) as u32).collect();
        let same_mods: Vec<Modality> = (0..2 * n).map(|i| if i < n { Modality::Vis } else { Modality::Ir }).collect();
        let f = g.constant(Tensor::new(vec![2 * n, d], both.concat()).unwrap());
        let z = g.scalar(cmmd_loss(&g, &FeatureBatch::new(f, same_ids, same_mods)).map_err(err)?);
        ensure!(z == 0.0, "identical modalities gave {z:e} (seed {seed})");
    }
    ensure!(worst < 1e-9, "kernel vs explicit max abs difference {worst:e}");
    Ok(format!("500 batches, max |kernel - explicit| {worst:.1e}, identical sets exactly 0"))
}

fn mat(g: &Graph, rows: usize, cols: usize, data: &[f64]) -> cmnas::Var {
    g.constant(Tensor::new(vec![rows, cols], data.to_vec()).unwrap())
}

fn cc_values() -> Outcome {
    let g = Graph::new();
    let fv = mat(&g, 2, 2, &[1.0, 0.0, 0.0, 1.0]);
    let fi = mat(&g, 2, 2, &[1.0, 0.0, 1.0, 0.0]);
    let worked = g.scalar(cc_loss(&g, fv, fi).map_err(err)?);
    ensure!((worked - 0.29289).abs() < 1e-5, "worked example gave {worked}");
    let same = g.scalar(cc_loss(&g, fv, fv).map_err(err)?);
    ensure!(same == 0.0, "identical features gave {same}");
    let single = g.scalar(cc_loss(&g, mat(&g, 1, 2, &[3.0, -1.0]), mat(&g, 1, 2, &[0.2, 5.0])).map_err(err)?);
    ensure!(single == 0.0, "single pair gave {single}");
    ensure!(cc_loss(&g, fv, mat(&g, 1, 2, &[1.0, 0.0])).is_err(), "row-count mismatch accepted");
    ensure!(
        cc_loss(&g, mat(&g, 2, 2, &[0.0, 0.0, 1.0, 0.0]), fi).is_err(),
        "zero feature row accepted"
    );

    let mut worst_any = 0.0f64;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(2..7);
        let d = rng.gen_range(2..6);
        let a = randn(&mut rng, &[n, d]);
        let b = randn(&mut rng, &[n, d]);
        let base = g.scalar(cc_loss(&g, g.constant(a.clone()), g.constant(b.clone())).map_err(err)?);
        // power-of-two factors scale exactly in binary floating point
        let (sa, sb) = (2f64.powi(rng.gen_range(-12..12)), 2f64.powi(rng.gen_range(-12..12)));
        let exact = g.scalar(
            cc_loss(&g, g.constant(a.map(|v| v * sa)), g.constant(b.map(|v| v * sb))).map_err(err)?,
        );
        ensure!(exact.to_bits() == base.to_bits(), "scaling by ({sa}, {sb}) changed {base} to {exact}");
        let (ra, rb) = (rng.gen_range(1e-3..1e3), rng.gen_range(1e-3..1e3));
        let any = g.scalar(
            cc_loss(&g, g.constant(a.map(|v| v * ra)), g.constant(b.map(|v| v * rb))).map_err(err)?,
        );
        worst_any = worst_any.max((any - base).abs());
    }
    ensure!(worst_any < 1e-12, "arbitrary positive scaling moved the loss by {worst_any:e}");
    Ok(format!(
        "worked example {worked:.5}, trivial cases 0, power-of-two scalings bit-exact, arbitrary scalings within {worst_any:.1e}"
    ))
}

fn relaxation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst_sum = 0.0f64;
    for _ in 0..10_000 {
        let (a, b): (f64, f64) = (rng.gen_range(-50.0..50.0), rng.gen_range(-50.0..50.0));
        let (p1, p2) = arch_probs(a, b);
        worst_sum = worst_sum.max((p1 + p2 - 1.0).abs());
        let m = a.max(b);
        ensure!(arch_probs(a - m, b - m) == (p1, p2), "max-shifted logits changed the probabilities");
        // dyadic grid: every shift below is exact, so the result must be too
        let (ga, gb) = ((a * 1024.0).round() / 1024.0, (b * 1024.0).round() / 1024.0);
        let c = rng.gen_range(-1000i32..1000) as f64;
        ensure!(arch_probs(ga + c, gb + c) == arch_probs(ga, gb), "translation by {c} changed the probabilities");
    }
    ensure!(worst_sum < 1e-12, "probabilities sum off by {worst_sum:e}");

    // pure branches through a searchable layer
    let net = Network::build(&tiny_backbone().searchable(), 1).map_err(err)?;
    let mods = vec![Modality::Vis, Modality::Ir, Modality::Vis, Modality::Ir];
    let routing = ModalityRouting::new(&mods);
    let layer = &net.norm_layers()[0];
    let NormRouting::Searchable(s) = &layer.routing else {
        return Err("first layer of a searchable network is not searchable".into());
    };
    let x = randn(&mut rng, &[4, s.shared.channels, 4, 4]);
    let pure = |routing_kind: NormRouting| -> Result<Tensor, String> {
        let g = Graph::new();
        let mut l = layer.clone();
        l.routing = routing_kind;
        let y = l
            .forward(&g, &net.store, g.constant(x.clone()), &routing, None, true, &mut Vec::new())
            .map_err(err)?;
        Ok(g.value(y))
    };
    let mixed = |p: [f64; 2]| -> Result<Tensor, String> {
        let g = Graph::new();
        let probs = g.constant(Tensor::from_vec(p.to_vec()));
        let y = layer
            .forward(&g, &net.store, g.constant(x.clone()), &routing, Some(probs), true, &mut Vec::new())
            .map_err(err)?;
        Ok(g.value(y))
    };
    let sep = pure(NormRouting::Separate {
        vis: s.vis.clone(),
        ir: s.ir.clone(),
    })?;
    let shared = pure(NormRouting::Shared(s.shared.clone()))?;
    ensure!(mixed([1.0, 0.0])?.bit_eq(&sep), "probs (1, 0) differ from the separate branch");
    ensure!(mixed([0.0, 1.0])?.bit_eq(&shared), "probs (0, 1) differ from the shared branch");

    // op-count audit of discretized networks
    let shape = BackboneConfig::default();
    let layers = shape.norm_layer_count();
    let mut audited = 0;
    for trial in 0..20 {
        let bits = if trial == 0 {
            ArchBitstring::shared(layers)
        } else {
            ArchBitstring::from_mask(&(0..layers).map(|_| rng.gen_bool(0.5)).collect::<Vec<_>>())
        };
        let net = Network::build(&bits.backbone(&shape).map_err(err)?, 0).map_err(err)?;
        let stats = net.inference_stats().map_err(err)?;
        ensure!(
            stats.count(OpKind::Softmax) == 0 && net.searchable_layer_count() == 0,
            "bitstring {bits} still carries mixture arithmetic"
        );
        if trial == 0 {
            let one = Network::build(&shape.with_baseline(Baseline::OneStream), 0).map_err(err)?;
            let reference = one.inference_stats().map_err(err)?;
            ensure!(
                stats == reference,
                "all-shared bitstring: {} MACs vs one-stream {}",
                stats.macs,
                reference.macs
            );
        }
        audited += 1;
    }
    let searchable = Network::build(&shape.searchable(), 0).map_err(err)?.inference_stats().map_err(err)?;
    ensure!(searchable.count(OpKind::Softmax) == layers, "searchable network has no per-layer mixture");
    Ok(format!(
        "sum error {worst_sum:.1e}, shift-invariant, pure branches bit-identical, {audited} discretized networks free of mixing"
    ))
}

fn freeze() -> Outcome {
    let data = generate_dataset(&SynthConfig {
        identities: 8,
        images_per_modality: 3,
        resolution: 8,
        ..SynthConfig::default()
    })
    .map_err(err)?;
    let classes = ClassIndex::new(&data.identities());
    let mut bb = tiny_backbone().searchable();
    bb.num_classes = classes.len();
    let mut state = TrainState::new(
        Network::build(&bb, 0).map_err(err)?,
        AdamConfig::weights(),
        Some(AdamConfig::arch()),
        9,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let loss = LossConfig::default();
    for step in 0..50 {
        let tb = sample_pk_batch(&data, 2, 2, true, &mut rng).map_err(err)?;
        let vb = sample_pk_batch(&data, 2, 2, true, &mut rng).map_err(err)?;
        let mut composed = state.clone();

        let before = composed.net.store.clone();
        weight_step(&mut composed.net, &mut composed.weights, &tb, &classes, &loss, 0.01).map_err(err)?;
        ensure!(
            composed.net.store.group_bit_eq(&before, ParamGroup::Arch),
            "alpha moved during the weight sub-step (step {step})"
        );
        let mid = composed.net.store.clone();
        arch_step(&mut composed.net, composed.arch.as_mut().unwrap(), &vb, &classes, &loss).map_err(err)?;
        ensure!(
            composed.net.store.group_bit_eq(&mid, ParamGroup::Weight)
                && composed.net.store.group_bit_eq(&mid, ParamGroup::Buffer),
            "weights moved during the architecture sub-step (step {step})"
        );
        ensure!(
            !composed.net.store.group_bit_eq(&mid, ParamGroup::Arch),
            "architecture sub-step did not update alpha (step {step})"
        );

        bilevel_step(&mut state, &tb, &vb, &classes, &loss, 0.01).map_err(err)?;
        ensure!(state == composed, "bilevel step differs from its two sub-steps (step {step})");
    }
    Ok("50 steps, each sub-step leaves the other group bit-unchanged".into())
}

/// Sort gallery by distance (stable), then read off first-match rank and AP.
fn cmc_brute(dist: &[f64], q: &[u32], gal: &[u32], max_rank: usize) -> (Vec<f64>, f64) {
    let ng = gal.len();
    let mut hits_at = vec![0usize; max_rank];
    let mut ap_sum = 0.0;
    for (qi, &qid) in q.iter().enumerate() {
        let row = &dist[qi * ng..(qi + 1) * ng];
        let mut order: Vec<usize> = (0..ng).collect();
        // insertion sort keeps equal distances in gallery order
        for i in 1..ng {
            let mut j = i;
            while j > 0 && row[order[j - 1]] > row[order[j]] {
                order.swap(j - 1, j);
                j -= 1;
            }
        }
        let matches: Vec<usize> = (0..ng).filter(|&p| gal[order[p]] == qid).collect();
        for r in matches[0]..max_rank {
            hits_at[r] += 1;
        }
        let mut ap = 0.0;
        for (h, &p) in matches.iter().enumerate() {
            ap += (h + 1) as f64 / (p + 1) as f64;
        }
        ap_sum += ap / matches.len() as f64;
    }
    let nq = q.len() as f64;
    (hits_at.iter().map(|&h| h as f64 / nq).collect(), ap_sum / nq)
}

fn cmc_oracle() -> Outcome {
    for seed in 0..1000u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ng = rng.gen_range(1..=12);
        let nq = rng.gen_range(1..=12);
        let n_ids = rng.gen_range(1..=4u32);
        let gal: Vec<u32> = (0..ng).map(|_| rng.gen_range(0..n_ids)).collect();
        let q: Vec<u32> = (0..nq).map(|_| gal[rng.gen_range(0..ng)]).collect();
        // coarse values so ties are common
        let dist: Vec<f64> = (0..nq * ng).map(|_| rng.gen_range(0..6) as f64 * 0.25 - 1.0).collect();
        let max_rank = rng.gen_range(1..=ng);
        let got = compute_cmc_map(&dist, &q, &gal, max_rank).map_err(err)?;
        let want = cmc_brute(&dist, &q, &gal, max_rank);
        ensure!(got == want, "seed {seed}: library {got:?} vs reference {want:?}");
    }
    let (_, ap_half) = compute_cmc_map(&[0.1, 0.5], &[7], &[3, 7], 2).map_err(err)?;
    let (_, ap_56) = compute_cmc_map(&[0.1, 0.2, 0.3], &[7], &[7, 3, 7], 3).map_err(err)?;
    ensure!(ap_half == 0.5, "single match at rank 2 gave AP {ap_half}");
    ensure!((ap_56 - 5.0 / 6.0).abs() < 1e-15, "matches at ranks 1 and 3 gave AP {ap_56}");
    Ok("1000 random instances identical to the reference, AP 1/2 and 5/6 reproduced".into())
}

struct SeedResult {
    searched: f64,
    one_stream: f64,
    bn_only: f64,
    two_stream: f64,
    secs: f64,
}

fn replication() -> Outcome {
    let mut rows = Vec::new();
    let total = Instant::now();
    for seed in 0..SEEDS {
        let t = Instant::now();
        let mut cfg = RunConfig::default();
        cfg.seed = seed;
        let exp = Experiment::new(cfg.clone()).map_err(err)?;
        let (found, _) = search_phase(&exp, None, |_| Ok(())).map_err(err)?;
        let rank1 = |arch: ArchSpec| -> Result<f64, String> {
            let run = train_phase(&exp, &arch, cfg.retrain_epochs, None, |_| Ok(())).map_err(err)?;
            Ok(summary(&evaluate_model(&run.state.net, &exp.test, &cfg).map_err(err)?).0)
        };
        let searched = rank1(ArchSpec::Bits(found.bits.clone()))?;
        let secs = t.elapsed().as_secs_f64();
        rows.push(SeedResult {
            searched,
            one_stream: rank1(ArchSpec::Baseline(Baseline::OneStream))?,
            bn_only: rank1(ArchSpec::Baseline(Baseline::TwoStreamBn))?,
            two_stream: rank1(ArchSpec::Baseline(Baseline::TwoStream))?,
            secs,
        });
        let r = rows.last().unwrap();
        eprintln!(
            "  seed {seed}: arch {} searched {:.2} one-stream {:.2} bn-only {:.2} two-stream {:.2}",
            found.bits,
            100.0 * r.searched,
            100.0 * r.one_stream,
            100.0 * r.bn_only,
            100.0 * r.two_stream
        );
    }
    let n = rows.len() as f64;
    let mean_s = rows.iter().map(|r| r.searched).sum::<f64>() / n;
    let mean_o = rows.iter().map(|r| r.one_stream).sum::<f64>() / n;
    let bn_wins = rows.iter().filter(|r| r.bn_only >= r.two_stream).count();
    let slowest = rows.iter().map(|r| r.secs).fold(0.0, f64::max);
    let minutes = total.elapsed().as_secs_f64() / 60.0;
    let detail = format!(
        "mean rank-1 searched {:.2} vs one-stream {:.2}; bn-only >= two-stream in {bn_wins}/{SEEDS}; slowest search+retrain {slowest:.0}s; {minutes:.1} min",
        100.0 * mean_s,
        100.0 * mean_o
    );
    ensure!(mean_s >= mean_o, "{detail}");
    ensure!(bn_wins >= 4, "{detail}");
    ensure!(slowest < 120.0, "{detail}");
    ensure!(minutes < 30.0, "{detail}");
    Ok(detail)
}

fn alignment_effect() -> Outcome {
    let mut wins = 0;
    let mut cells = Vec::new();
    for seed in 0..SEEDS {
        let mut on = RunConfig::default();
        on.seed = seed;
        let mut off = on.clone();
        off.loss = basic_loss(&on.loss);
        let mut mmd = [0.0; 2];
        for (slot, cfg) in [&on, &off].into_iter().enumerate() {
            let exp = Experiment::new(cfg.clone()).map_err(err)?;
            let run = train_phase(&exp, &ArchSpec::Baseline(Baseline::OneStream), cfg.retrain_epochs, None, |_| Ok(()))
                .map_err(err)?;
            mmd[slot] = heldout_cmmd(&run.state.net, &exp.test).map_err(err)?;
        }
        if mmd[0] < mmd[1] {
            wins += 1;
        }
        cells.push(format!("{:.4}/{:.4}", mmd[0], mmd[1]));
    }
    let detail = format!(
        "held-out MMD with/without alignment {}; lower in {wins}/{SEEDS}",
        cells.join(" ")
    );
    ensure!(wins >= 4, "{detail}");
    Ok(detail)
}

fn small_config(dir: &Path) -> RunConfig {
    let text = format!(
        "dataset.identities = 20\ndataset.test_identities = 6\ndataset.images_per_modality = 4\n\
         dataset.resolution = 16\nbackbone.widths = 8,16\nbackbone.blocks = 1,1\nbackbone.embedding_dim = 16\n\
         schedule.search_epochs = 3\nschedule.retrain_epochs = 3\nschedule.p = 4\nschedule.k = 2\n\
         protocol.repeats = 3\noutput_dir = {}\n",
        dir.display()
    );
    RunConfig::parse(&text).unwrap()
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(err)?;
    let cfg = small_config(&tmp.path().join("a"));
    let a = cmd_search(&cfg, None).map_err(err)?;
    let first = std::fs::read(cfg.output_dir.join(SEARCH_CKPT)).map_err(err)?;
    let b = cmd_search(&cfg, None).map_err(err)?;
    ensure!(a.bits == b.bits, "repeated search gave {} then {}", a.bits, b.bits);
    ensure!(
        std::fs::read(cfg.output_dir.join(SEARCH_CKPT)).map_err(err)? == first,
        "repeated search checkpoints differ"
    );

    // interrupt after the first epoch, then resume from the saved checkpoint
    let exp = Experiment::new(cfg.clone()).map_err(err)?;
    let mut saved = None;
    let stopped = search_phase(&exp, None, |s| {
        saved = Some(s.to_checkpoint());
        Err(cmnas::Error::InvalidArgument("interrupted".into()))
    });
    ensure!(stopped.is_err(), "interrupt hook was ignored");
    let ckpt = tmp.path().join("interrupted.ckpt");
    saved.ok_or("no checkpoint before the interrupt")?.save(&ckpt).map_err(err)?;
    let resumed = cmd_search(&cfg, Some(&ckpt)).map_err(err)?;
    ensure!(resumed.bits == a.bits, "resumed search found {} instead of {}", resumed.bits, a.bits);
    ensure!(
        std::fs::read(cfg.output_dir.join(SEARCH_CKPT)).map_err(err)? == first,
        "resumed search state differs from the uninterrupted run"
    );

    let arch = ArchSpec::Bits(a.bits.clone());
    let full = cmd_retrain(&cfg, &arch, None).map_err(err)?;
    let mut saved = None;
    let _ = train_phase(&exp, &arch, cfg.retrain_epochs, None, |r| {
        if r.state.epoch == 2 {
            saved = Some(r.to_checkpoint());
            return Err(cmnas::Error::InvalidArgument("interrupted".into()));
        }
        Ok(())
    });
    saved.ok_or("no checkpoint before the interrupt")?.save(&ckpt).map_err(err)?;
    let resumed = cmd_retrain(&cfg, &arch, Some(&ckpt)).map_err(err)?;
    ensure!(resumed.state == full.state, "resumed training differs from the uninterrupted run");
    ensure!(resumed.log == full.log, "resumed training log differs");
    let reloaded = SavedRun::load(&cfg.output_dir.join(MODEL_CKPT)).map_err(err)?;
    ensure!(reloaded.state == full.state, "checkpoint does not reload bit-exactly");
    Ok(format!("search bits {} reproduced; search and retrain resume bit-exact", a.bits))
}

fn transfer() -> Outcome {
    let tmp = tempfile::tempdir().map_err(err)?;
    let a = small_config(&tmp.path().join("a"));
    let found = cmd_search(&a, None).map_err(err)?;
    let mut b = small_config(&tmp.path().join("b"));
    for (k, v) in [
        ("dataset.seed", "77"),
        ("dataset.namespace", "3"),
        ("dataset.identities", "24"),
        ("dataset.ir.offset", "0.45"),
        ("dataset.ir.noise", "0.12"),
    ] {
        b.set(k, v).map_err(err)?;
    }
    cmd_retrain(&b, &ArchSpec::Bits(found.bits.clone()), None).map_err(err)?;
    let reports = cmd_eval(&b, &b.output_dir.join(MODEL_CKPT)).map_err(err)?;
    for r in &reports {
        for v in [r.mean.rank1, r.mean.rank10, r.mean.rank20, r.mean.map] {
            ensure!((0.0..=1.0).contains(&v), "{} metric {v} outside [0, 1]", r.protocol);
        }
    }
    let (r1, map) = summary(&reports);
    Ok(format!("bits {} from A retrained on B: rank-1 {:.2}, mAP {:.2}", found.bits, 100.0 * r1, 100.0 * map))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("gradients match finite differences", gradients),
        ("kernel CMMD equals explicit feature map", cmmd_oracle),
        ("correlation consistency values", cc_values),
        ("relaxation and discretization", relaxation),
        ("bilevel freeze", freeze),
        ("CMC/mAP oracle", cmc_oracle),
        ("directional replication", replication),
        ("alignment lowers held-out MMD", alignment_effect),
        ("determinism and resume", determinism),
        ("transfer plumbing", transfer),
    ];
    // CMNAS_CRITERIA=1,4,9 runs a subset; unset runs everything
    let only: Option<Vec<usize>> = std::env::var("CMNAS_CRITERIA")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let mut failed = 0;
    let mut ran = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        if only.as_ref().is_some_and(|o| !o.contains(&(i + 1))) {
            continue;
        }
        ran += 1;
        let t = Instant::now();
        let outcome = std::panic::catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {:>2} {name}: {detail} [{secs:.1}s]", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {detail} [{secs:.1}s]", i + 1);
            }
        }
    }
    println!("{}/{ran} criteria passed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
