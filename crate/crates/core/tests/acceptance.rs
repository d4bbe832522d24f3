//! Acceptance criteria 1 to 10, one printed verdict line each.
//!
//! Every criterion runs even if an earlier one fails; the test fails at the
//! end if any criterion other than 9 failed. Criterion 9 only warns.

use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use mart_core::diffcore::{Graph, Tensor};
use mart_core::dsp::stft::{hann, naive_dft};
use mart_core::dsp::{augment, synth_corpus, AudioBuffer, AugmentationConfig, LogMelFrontEnd, Stft, SynthConfig, SynthCorpus};
use mart_core::eval::{
    calibrate_batchnorm, clique_labels, embed_tracks, linear_probe, pr_auc, retrieval_eval, roc_auc, tag_matrix,
    EmbeddingSet, ProbeConfig, ProbeSplit,
};
use mart_core::hac::{build_tree, ClipTree};
use mart_core::loss::{hierarchical_loss, Ablation, ContrastiveBatch};
use mart_core::model::{pwt_stack, ModelConfig, ParamStore, Unit};
use mart_core::train::{
    config_tree, decode_checkpoint, encode_checkpoint, full_model_gradcheck, load_checkpoint, pretrain_tracks,
    save_checkpoint, tree_spectrograms, GradcheckOptions, TrainConfig, CHECKPOINT_FILE, LOSS_LOG_FILE,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        passed,
        detail: detail.into(),
    }
}

fn rand_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<Vec<f64>> {
    (0..rows).map(|_| (0..cols).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
}

fn tensor(rows: &[Vec<f64>]) -> Tensor<f64> {
    let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
    Tensor::from_rows(&refs).unwrap()
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    d / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt())
}

// ---------------------------------------------------------------- 1

fn gradient_fidelity() -> Verdict {
    let t = Instant::now();
    let small = full_model_gradcheck(&GradcheckOptions::default()).unwrap();
    let desk = full_model_gradcheck(&GradcheckOptions::desk(4)).unwrap();
    let secs = t.elapsed().as_secs_f64();
    let worst = small.max_rel_error.max(desk.max_rel_error);
    verdict(
        small.passed && desk.passed && worst < 1e-4 && secs < 300.0,
        format!(
            "reduced widths {} coords ({} across a kink) max rel {:.2e}; desk widths {} sampled coords ({} across a kink) max rel {:.2e}; {secs:.0} s",
            small.checked, small.kinks, small.max_rel_error, desk.checked, desk.kinks, desk.max_rel_error
        ),
    )
}

// ---------------------------------------------------------------- 2

fn hac_partitions() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for case in 0..500 {
        let m = rng.random_range(2..=4usize);
        let n = rng.random_range(2..=4usize);
        let root_len = rng.random_range(m.pow(n as u32 - 1)..=20_000);
        let tree = build_tree(root_len, m, n).unwrap();
        let signal: Vec<u32> = (0..root_len as u32).map(|_| rng.random()).collect();
        for l in 0..n {
            let level = tree.level(l);
            if level.len() != m.pow(l as u32) {
                return verdict(false, format!("case {case}: level {l} has {} nodes", level.len()));
            }
            // Contiguous, ordered, non-empty, covering the root.
            let mut at = 0;
            for c in level {
                if c.start != at || c.end <= c.start {
                    return verdict(false, format!("case {case}: level {l} gap or empty at {:?}", c.span()));
                }
                at = c.end;
            }
            if at != root_len {
                return verdict(false, format!("case {case}: level {l} ends at {at} of {root_len}"));
            }
            if l > 0 {
                for c in level {
                    let p = &tree.level(l - 1)[c.index / m];
                    if c.start < p.start || c.end > p.end {
                        return verdict(false, format!("case {case}: {:?} escapes parent {:?}", c.span(), p.span()));
                    }
                }
            }
        }
        let rebuilt: Vec<u32> = tree.leaves().iter().flat_map(|c| signal[c.start..c.end].iter().copied()).collect();
        if rebuilt != signal {
            return verdict(false, format!("case {case}: leaves do not reassemble the root"));
        }
    }
    verdict(true, "500 random trees: level partitions, containment and leaf reassembly exact")
}

// ---------------------------------------------------------------- 3

fn residual_identity() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for (name, mut cfg) in [("desk", ModelConfig::desk()), ("reduced", ModelConfig::gradcheck())] {
        let store = ParamStore::init(&cfg, &mut rng).unwrap();
        cfg.set_lambdas(0.0);
        let g = Graph::<f32>::new();
        let bound = store.bind_frozen(&g);
        let state: Vec<_> = (0..cfg.n)
            .map(|l| {
                let rows = cfg.level_rows(l, 3);
                let data = (0..rows * cfg.d_e()).map(|_| rng.random_range(-2.0f32..2.0)).collect();
                g.constant(Tensor::new(vec![rows, cfg.d_e()], data).unwrap())
            })
            .collect();
        let blocks: Vec<Vec<Unit<'_, f32>>> = (0..cfg.blocks)
            .map(|b| (0..cfg.pairs()).map(|p| Unit::bind(&bound, b, p).unwrap()).collect())
            .collect();
        let out = pwt_stack(&state, &blocks, &cfg).unwrap();
        for (l, (a, b)) in out.iter().zip(&state).enumerate() {
            let same = a.value().data().iter().zip(b.value().data()).all(|(x, y)| x.to_bits() == y.to_bits());
            if !same {
                return verdict(false, format!("{name}: level {l} changed with zero scales"));
            }
        }
    }
    verdict(true, "zero scales leave every level bitwise unchanged (desk and reduced widths)")
}

// ---------------------------------------------------------------- 4

/// Standalone InfoNCE over the candidates every second-view root and
/// every other first-view root.
fn info_nce(roots: &[Vec<f64>], tilde: &[Vec<f64>], tau: f64) -> f64 {
    let b = roots.len();
    let mut total = 0.0;
    for i in 0..b {
        let pos = (cos(&roots[i], &tilde[i]) / tau).exp();
        let mut den = 0.0;
        for u in 0..b {
            den += (cos(&roots[i], &tilde[u]) / tau).exp();
            if u != i {
                den += (cos(&roots[i], &roots[u]) / tau).exp();
            }
        }
        total += -(pos / den).ln();
    }
    total / b as f64
}

fn batch_loss(levels: &[Vec<Vec<f64>>], tilde: &[Vec<f64>], tree: &ClipTree, tau: f64, ab: Ablation) -> f64 {
    let g = Graph::new();
    let lv = levels.iter().map(|l| g.constant(tensor(l))).collect();
    let batch = ContrastiveBatch::new(lv, g.constant(tensor(tilde)), tree).unwrap();
    hierarchical_loss(&batch, tau, ab).unwrap().0.value().item()
}

fn random_levels(rng: &mut ChaCha8Rng, tree: &ClipTree, b: usize, c: usize) -> Vec<Vec<Vec<f64>>> {
    (0..tree.depth()).map(|l| rand_matrix(rng, b * tree.level(l).len(), c)).collect()
}

fn loss_degeneracies() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst_b1: f64 = 0.0;
    let mut worst_nce: f64 = 0.0;
    for _ in 0..50 {
        let (m, n): (usize, usize) = (rng.random_range(2..=4), rng.random_range(1..=4));
        let tree = build_tree(m.pow(n as u32) * 3, m, n).unwrap();
        let c = rng.random_range(2..10);
        let tau = rng.random_range(0.1..1.0);
        let lv = random_levels(&mut rng, &tree, 1, c);
        let tl = rand_matrix(&mut rng, 1, c);
        for ab in Ablation::ALL {
            worst_b1 = worst_b1.max(batch_loss(&lv, &tl, &tree, tau, ab).abs());
        }
        let b = rng.random_range(2..7);
        let lv = random_levels(&mut rng, &tree, b, c);
        let tl = rand_matrix(&mut rng, b, c);
        let got = batch_loss(&lv, &tl, &tree, tau, Ablation::NoHcl);
        worst_nce = worst_nce.max((got - info_nce(&lv[0], &tl, tau)).abs());
    }
    let mut n1_exact = true;
    for _ in 0..50 {
        let tree = build_tree(64, rng.random_range(2..=4usize), 1).unwrap();
        let (b, c) = (rng.random_range(1..7), rng.random_range(2..10));
        let lv = random_levels(&mut rng, &tree, b, c);
        let tl = rand_matrix(&mut rng, b, c);
        let full = batch_loss(&lv, &tl, &tree, 0.5, Ablation::Full);
        let no = batch_loss(&lv, &tl, &tree, 0.5, Ablation::NoHcl);
        n1_exact &= full.to_bits() == no.to_bits();
    }
    verdict(
        worst_b1 <= 1e-7 && worst_nce <= 1e-6 && n1_exact,
        format!("max |B=1 loss| {worst_b1:.1e}; max InfoNCE gap {worst_nce:.1e}; single-level full == no_hcl bitwise: {n1_exact}"),
    )
}

// ---------------------------------------------------------------- 5

/// Loss from the per-instance definitions, one scalar at a time.
fn scalar_loss(levels: &[Vec<Vec<f64>>], tilde: &[Vec<f64>], tree: &ClipTree, tau: f64) -> f64 {
    let b = tilde.len();
    let m = tree.branching();
    let mut total = 0.0;
    for i in 0..b {
        let mut pw = 0.0;
        for l in 1..tree.depth() {
            let per = tree.level(l).len();
            for j in 0..per {
                let child = &tree.level(l)[j];
                let parent = &tree.level(l - 1)[j / m];
                let lam = child.len() as f64 / parent.len() as f64;
                let s = cos(&levels[l - 1][i * (per / m) + j / m], &levels[l][i * per + j]);
                pw += lam * (s / tau).exp();
            }
        }
        let root = &levels[0][i];
        let pos = (cos(root, &tilde[i]) / tau).exp();
        let mut neg = 0.0;
        for u in 0..b {
            neg += (cos(root, &tilde[u]) / tau).exp();
            if u != i {
                neg += (cos(root, &levels[0][u]) / tau).exp();
            }
        }
        total += (pw + neg).ln() - (pw + pos).ln();
    }
    total / b as f64
}

fn loss_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let (m, n) = (rng.random_range(2..=4usize), rng.random_range(2..=4usize));
        let root_len = rng.random_range(m.pow(n as u32 - 1)..500);
        let tree = build_tree(root_len, m, n).unwrap();
        let (b, c) = (rng.random_range(1..6), rng.random_range(2..9));
        let tau = rng.random_range(0.1..1.0);
        let lv = random_levels(&mut rng, &tree, b, c);
        let tl = rand_matrix(&mut rng, b, c);
        let got = batch_loss(&lv, &tl, &tree, tau, Ablation::Full);
        worst = worst.max((got - scalar_loss(&lv, &tl, &tree, tau)).abs());
    }
    verdict(worst <= 1e-6, format!("100 random batches, max |batched - scalar| {worst:.1e}"))
}

// ---------------------------------------------------------------- 6

fn dsp_oracles() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst: f64 = 0.0;
    for n in [64usize, 256, 400, 512] {
        let st = Stft::new(n);
        let w = hann(n);
        for _ in 0..10 {
            let x: Vec<f32> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let fast = st.magnitudes(&x, n, Some(1)).unwrap();
            let xw: Vec<f64> = x.iter().zip(&w).map(|(a, b)| f64::from(*a) * b).collect();
            let slow = naive_dft(&xw);
            for (k, v) in fast.frame(0).iter().enumerate() {
                worst = worst.max((v - slow[k].norm()).abs());
            }
        }
    }
    let cfg = TrainConfig::desk();
    let tree = config_tree(&cfg).unwrap();
    let front = LogMelFrontEnd::new(cfg.sample_rate, cfg.model.mel_bands, cfg.model.frames);
    let x: Vec<f32> = (0..cfg.root_len()).map(|_| rng.random_range(-0.5..0.5)).collect();
    let specs = tree_spectrograms(&front, &tree, &x).unwrap();
    let equal = specs.len() == tree.node_count()
        && specs.iter().all(|s| s.mel_bands == cfg.model.mel_bands && s.frames == cfg.model.frames && s.matrix.len() == s.mel_bands * s.frames);
    let mut identity = true;
    for _ in 0..20 {
        let len = rng.random_range(100..20_000);
        let buf = AudioBuffer::new((0..len).map(|_| rng.random_range(-1.0..1.0)).collect(), 16_000).unwrap();
        identity &= augment(&buf, &AugmentationConfig::disabled(), &mut rng).unwrap() == buf;
    }
    verdict(
        worst <= 1e-6 && equal && identity,
        format!(
            "FFT vs naive DFT max {worst:.1e}; {} tree clips all {}x{}: {equal}; p=0 augmentation identity: {identity}",
            specs.len(),
            cfg.model.mel_bands,
            cfg.model.frames
        ),
    )
}

// ---------------------------------------------------------------- 7

fn brute_roc(s: &[f64], l: &[bool]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..s.len() {
        for j in 0..s.len() {
            if l[i] && !l[j] {
                den += 1.0;
                num += if s[i] > s[j] {
                    1.0
                } else if s[i] == s[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    num / den
}

fn brute_pr(s: &[f64], l: &[bool]) -> f64 {
    let mut th = s.to_vec();
    th.sort_by(|a, b| b.total_cmp(a));
    th.dedup();
    let pos = l.iter().filter(|&&x| x).count() as f64;
    let (mut prev, mut ap) = (0.0, 0.0);
    for t in th {
        let sel: Vec<usize> = (0..s.len()).filter(|&i| s[i] >= t).collect();
        let tp = sel.iter().filter(|&&i| l[i]).count() as f64;
        if tp > prev {
            ap += (tp - prev) / pos * tp / sel.len() as f64;
        }
        prev = tp;
    }
    ap
}

/// MAP, P@10 and MR1 with an explicit selection sort over every query.
fn brute_retrieval(rows: &[Vec<f32>], ids: &[String], cl: &[String]) -> (f64, f64, f64) {
    let c = |a: &[f32], b: &[f32]| {
        let a: Vec<f64> = a.iter().map(|&v| f64::from(v)).collect();
        let b: Vec<f64> = b.iter().map(|&v| f64::from(v)).collect();
        let d: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        d / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt())
    };
    let (mut ap, mut p10, mut r1, mut n) = (0.0, 0.0, 0.0, 0.0);
    for q in 0..rows.len() {
        let mut rest: Vec<usize> = (0..rows.len()).filter(|&j| j != q).collect();
        let mut ranked = Vec::new();
        while !rest.is_empty() {
            let mut best = 0;
            for k in 1..rest.len() {
                let (sa, sb) = (c(&rows[q], &rows[rest[k]]), c(&rows[q], &rows[rest[best]]));
                if sa > sb || (sa == sb && ids[rest[k]] < ids[rest[best]]) {
                    best = k;
                }
            }
            ranked.push(rest.remove(best));
        }
        let rel: Vec<bool> = ranked.iter().map(|&j| cl[j] == cl[q]).collect();
        let total = rel.iter().filter(|&&r| r).count();
        if total == 0 {
            continue;
        }
        let (mut hits, mut sum) = (0, 0.0);
        for (k, &r) in rel.iter().enumerate() {
            if r {
                hits += 1;
                sum += hits as f64 / (k + 1) as f64;
            }
        }
        ap += sum / total as f64;
        let top = rel.len().min(10);
        p10 += rel[..top].iter().filter(|&&r| r).count() as f64 / top as f64;
        r1 += (rel.iter().position(|&r| r).unwrap() + 1) as f64;
        n += 1.0;
    }
    (ap / n, p10 / n, r1 / n)
}

fn metric_oracles() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut mismatches = 0;
    for _ in 0..200 {
        let n = rng.random_range(2..30);
        let s: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..6u8))).collect();
        let mut l: Vec<bool> = (0..n).map(|_| rng.random()).collect();
        l[0] = true;
        l[1] = false;
        l.shuffle(&mut rng);
        if roc_auc(&s, &l).unwrap() != brute_roc(&s, &l) || pr_auc(&s, &l).unwrap() != brute_pr(&s, &l) {
            mismatches += 1;
        }
        let k = rng.random_range(3..25);
        let rows: Vec<Vec<f32>> = (0..k).map(|_| (0..3).map(|_| f32::from(rng.random_range(1..4u8))).collect()).collect();
        let ids: Vec<String> = (0..k).map(|i| format!("t{:02}", (i * 7) % 29)).collect();
        let mut cl: Vec<String> = (0..k).map(|_| rng.random_range(0..4u8).to_string()).collect();
        cl[1] = cl[0].clone();
        let mut set = EmbeddingSet::new(3);
        for (id, r) in ids.iter().zip(&rows) {
            set.push(id.clone(), r.clone()).unwrap();
        }
        let r = retrieval_eval(&set, &cl).unwrap();
        if (r.map, r.p_at_10, r.mr1) != brute_retrieval(&rows, &ids, &cl) {
            mismatches += 1;
        }
    }
    let quartet = roc_auc(&[0.9, 0.8, 0.3, 0.2], &[true, false, true, false]).unwrap();
    let mut triple = EmbeddingSet::new(2);
    for (id, r) in [("q", [1.0, 0.0]), ("a", [0.9, 0.1]), ("b", [0.6, 0.4]), ("c", [0.1, 0.9])] {
        triple.push(id.into(), r.to_vec()).unwrap();
    }
    let cl: Vec<String> = ["x", "x", "y", "x"].iter().map(|s| s.to_string()).collect();
    let ap = mart_core::eval::rank_for(&triple, &cl, 0)
        .and_then(|l| mart_core::eval::average_precision(&l.relevant))
        .unwrap();
    verdict(
        mismatches == 0 && quartet == 0.75 && (ap - 0.8333).abs() < 5e-5,
        format!("200 random tied instances, {mismatches} mismatches; AUC quartet {quartet}; AP triple {ap:.4}"),
    )
}

// ---------------------------------------------------------------- 8 and 9

struct DeskRun {
    windows: Vec<f64>,
    probe_roc: f64,
    map: f64,
    elapsed: Duration,
}

fn evaluate(cfg: &TrainConfig, store: &ParamStore, corpus: &SynthCorpus) -> (f64, f64) {
    let audio: Vec<&AudioBuffer> = corpus.tracks.iter().map(|t| &t.audio).collect();
    let mut set = EmbeddingSet::new(cfg.model.d_e());
    for (t, r) in corpus.tracks.iter().zip(embed_tracks(cfg, store, &audio).unwrap()) {
        set.push(t.id.clone(), r).unwrap();
    }
    let entries = corpus.manifest();
    let tags = tag_matrix(&set, &entries).unwrap();
    let split = ProbeSplit::random(set.len(), cfg.seed).unwrap();
    let probe = linear_probe(&set.rows(), &tags, &split, &ProbeConfig { seed: cfg.seed, ..Default::default() }).unwrap();
    let map = retrieval_eval(&set, &clique_labels(&set, &entries).unwrap()).unwrap().map;
    (probe.roc_auc, map)
}

fn desk_config(seed: u64, ablation: Ablation) -> TrainConfig {
    let mut cfg = TrainConfig::desk();
    cfg.seed = seed;
    cfg.ablation = ablation;
    cfg
}

fn desk_run(corpus: &SynthCorpus, seed: u64, ablation: Ablation) -> DeskRun {
    let cfg = desk_config(seed, ablation);
    let audio: Vec<AudioBuffer> = corpus.tracks.iter().map(|t| t.audio.clone()).collect();
    let t = Instant::now();
    let out = pretrain_tracks(&cfg, &audio, None).unwrap();
    let w = out.reports.len() / 5;
    let windows = out.reports.chunks_exact(w).map(|c| c.iter().map(|r| r.mean).sum::<f64>() / w as f64).collect();
    let (probe_roc, map) = evaluate(&cfg, &out.checkpoint.store, corpus);
    DeskRun {
        windows,
        probe_roc,
        map,
        elapsed: t.elapsed(),
    }
}

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

fn corpus_for(seed: u64) -> SynthCorpus {
    synth_corpus(&SynthConfig { seed, ..Default::default() }).unwrap()
}

fn learning_signal(full: &[DeskRun]) -> Verdict {
    let mut lines = Vec::new();
    let (mut mono, mut probe, mut beats) = (true, true, true);
    let mut total = Duration::ZERO;
    for (&seed, run) in SEEDS.iter().zip(full) {
        let corpus = corpus_for(seed);
        let cfg = desk_config(seed, Ablation::Full);
        let init = ParamStore::init(&cfg.model, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let refs: Vec<&AudioBuffer> = corpus.tracks.iter().map(|t| &t.audio).collect();
        let t = Instant::now();
        let calibrated = calibrate_batchnorm(&cfg, &init, &refs).unwrap();
        let (_, base) = evaluate(&cfg, &calibrated, &corpus);
        let (_, raw) = evaluate(&cfg, &init, &corpus);
        total += run.elapsed + t.elapsed();
        let dec = run.windows.windows(2).all(|p| p[1] < p[0]);
        mono &= dec;
        probe &= run.probe_roc >= 0.95;
        beats &= run.map > base;
        lines.push(format!(
            "    seed {seed}: windows {:.4?} decreasing {dec}; probe ROC-AUC {:.4}; MAP {:.4} vs random {:.4} (uncalibrated batch norm {:.4}); {:.0} s",
            run.windows,
            run.probe_roc,
            run.map,
            base,
            raw,
            run.elapsed.as_secs_f64()
        ));
    }
    let fast = total < Duration::from_secs(30 * 60);
    verdict(
        mono && probe && beats && fast,
        format!(
            "(a) windowed decrease {mono}, (b) probe >= 0.95 {probe}, (c) MAP above random {beats}, total {:.0} s\n{}",
            total.as_secs_f64(),
            lines.join("\n")
        ),
    )
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn ablation_direction(full: &[DeskRun]) -> Verdict {
    let full_med = median(full.iter().map(|r| r.probe_roc).collect());
    let mut ok = true;
    let mut parts = vec![format!("full {full_med:.4}")];
    for ab in [Ablation::NoHcl, Ablation::NoPwt] {
        let rocs: Vec<f64> = SEEDS.iter().map(|&s| desk_run(&corpus_for(s), s, ab).probe_roc).collect();
        let med = median(rocs.clone());
        ok &= full_med >= med;
        parts.push(format!("{ab} {med:.4} {rocs:.4?}"));
    }
    verdict(ok, format!("median probe ROC-AUC over 5 seeds: {}", parts.join("; ")))
}

// ---------------------------------------------------------------- 10

fn determinism() -> Verdict {
    let corpus = synth_corpus(&SynthConfig {
        tracks: 16,
        cliques: 8,
        seconds: 3.2,
        seed: 10,
        ..Default::default()
    })
    .unwrap();
    let audio: Vec<AudioBuffer> = corpus.tracks.iter().map(|t| t.audio.clone()).collect();
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = TrainConfig::desk();
    cfg.root_seconds = 3.2;
    cfg.epochs = 2;
    cfg.seed = 10;
    let run = |name: &str, epochs: usize, resume: bool| {
        let mut c = cfg.clone();
        c.epochs = epochs;
        c.checkpoint_dir = Some(dir.path().join(name));
        let ck = resume.then(|| load_checkpoint(dir.path().join(name).join(CHECKPOINT_FILE)).unwrap());
        pretrain_tracks(&c, &audio, ck).unwrap()
    };
    let a = run("a", 2, false);
    let b = run("b", 2, false);
    let log = |name: &str| std::fs::read(dir.path().join(name).join(LOSS_LOG_FILE)).unwrap();
    let same_logs = log("a") == log("b") && a.log == b.log;
    run("c", 1, false);
    run("c", 2, true);
    let resumed = log("c") == log("a");
    // The stored configs differ only in their checkpoint directory.
    let state = |name: &str| {
        let mut ck = load_checkpoint(dir.path().join(name).join(CHECKPOINT_FILE)).unwrap();
        ck.config.checkpoint_dir = None;
        encode_checkpoint(&ck)
    };
    let same_end = state("a") == state("c");
    let bytes = encode_checkpoint(&a.checkpoint);
    let path = dir.path().join("copy.mart");
    save_checkpoint(&path, &decode_checkpoint(&bytes).unwrap()).unwrap();
    let ck_round = std::fs::read(&path).unwrap() == bytes;
    let refs: Vec<&AudioBuffer> = audio.iter().collect();
    let mut set = EmbeddingSet::new(cfg.model.d_e());
    for (t, r) in corpus.tracks.iter().zip(embed_tracks(&cfg, &a.checkpoint.store, &refs).unwrap()) {
        set.push(t.id.clone(), r).unwrap();
    }
    let emb = dir.path().join("e.emb");
    set.write(&emb).unwrap();
    let emb_round = EmbeddingSet::read(&emb).unwrap().encode() == set.encode();
    verdict(
        same_logs && resumed && same_end && ck_round && emb_round,
        format!(
            "seeded logs identical {same_logs}; resumed log identical {resumed}; resumed checkpoint identical {same_end}; checkpoint round trip {ck_round}; embeddings round trip {emb_round}"
        ),
    )
}

fn guarded(f: impl FnOnce() -> Verdict) -> Verdict {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        verdict(false, format!("panicked: {msg}"))
    })
}

#[test]
fn acceptance() {
    let mut failed = Vec::new();
    let mut report = |n: u32, name: &str, v: Verdict| {
        let tag = match (v.passed, n) {
            (true, _) => "PASS",
            (false, 9) => "WARN",
            (false, _) => "FAIL",
        };
        // Written to the raw handle so the verdicts show without --nocapture.
        let _ = writeln!(std::io::stderr().lock(), "criterion {n} {tag} {name}: {}", v.detail);
        if !v.passed && n != 9 {
            failed.push(n);
        }
    };
    report(1, "gradient fidelity", guarded(gradient_fidelity));
    report(2, "crop partitions", guarded(hac_partitions));
    report(3, "residual identity", guarded(residual_identity));
    report(4, "loss degeneracies", guarded(loss_degeneracies));
    report(5, "loss oracle equivalence", guarded(loss_oracle));
    report(6, "signal processing oracles", guarded(dsp_oracles));
    report(7, "metric oracles", guarded(metric_oracles));
    let full: Vec<DeskRun> = SEEDS.iter().map(|&s| desk_run(&corpus_for(s), s, Ablation::Full)).collect();
    report(8, "learning signal", guarded(|| learning_signal(&full)));
    report(9, "ablation direction", guarded(|| ablation_direction(&full)));
    report(10, "determinism and persistence", guarded(determinism));
    assert!(failed.is_empty(), "criteria failed: {failed:?}");
}
