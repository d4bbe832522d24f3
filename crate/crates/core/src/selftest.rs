//! Built-in worked examples, runnable from the command line.
//!
//! Each check recomputes a small known case with an independent oracle.
//! Long training runs are left to the test suite.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffcore::{adam_step, grad_check, AdamState, GradCheckConfig, Graph, Tensor, Var};
use crate::dsp::stft::naive_dft;
use crate::dsp::{
    adaptive_hop, augment, decode_wav, encode_wav, resample, synth_corpus, AudioBuffer, AugmentationConfig,
    LogMelFrontEnd, Magnitudes, MelFilterbank, SampleFormat, Stft, SynthConfig,
};
use crate::error::MartError;
use crate::eval::{
    average_precision, first_relevant_rank, linear_probe, pr_auc, retrieval_eval, roc_auc, EmbeddingSet,
    ProbeConfig, ProbeSplit, TagMatrix,
};
use crate::hac::{build_tree, clip_len_ratio, enumerate_pairs, ClipTree};
use crate::loss::{hierarchical_loss, negative_term, part_whole_term, Ablation, ContrastiveBatch};
use crate::model::{pwt_stack, project_head, Bound, Head, ModelConfig, ParamStore, Unit};
use crate::train::{
    decode_checkpoint, encode_checkpoint, full_model_gradcheck, pretrain_tracks, GradcheckOptions, TrainConfig,
};

#[derive(Clone, Debug)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

struct Fail(String);

impl From<MartError> for Fail {
    fn from(e: MartError) -> Self {
        Fail(e.to_string())
    }
}

type Outcome = std::result::Result<(), Fail>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Outcome {
    if cond {
        Ok(())
    } else {
        Err(Fail(msg()))
    }
}

fn close(a: f64, b: f64, tol: f64, what: &str) -> Outcome {
    ensure((a - b).abs() <= tol, || format!("{what}: got {a}, expected {b} ± {tol}"))
}

fn all_close(a: &[f64], b: &[f64], tol: f64, what: &str) -> Outcome {
    ensure(a.len() == b.len(), || format!("{what}: length {} vs {}", a.len(), b.len()))?;
    for (x, y) in a.iter().zip(b) {
        close(*x, *y, tol, what)?;
    }
    Ok(())
}

fn mat(rows: usize, cols: usize, data: &[f64]) -> Tensor<f64> {
    Tensor::matrix(rows, cols, data.to_vec()).expect("literal shape")
}

fn values(v: &Var<'_, f64>) -> Vec<f64> {
    v.value().data().to_vec()
}

fn rand_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
    mat(rows, cols, &(0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>())
}

fn matmul_cases() -> Outcome {
    let g = Graph::new();
    let i2 = g.constant(mat(2, 2, &[1.0, 0.0, 0.0, 1.0]));
    let a = g.constant(mat(2, 2, &[1.0, 2.0, 3.0, 4.0]));
    all_close(&values(&i2.matmul(&a)?), &[1.0, 2.0, 3.0, 4.0], 0.0, "identity product")?;
    let r = g.constant(mat(1, 2, &[1.0, 2.0])).matmul(&g.constant(mat(2, 1, &[3.0, 4.0])))?;
    close(r.value().item(), 11.0, 0.0, "dot product")?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let rep = grad_check(
        |_, v| Ok(v[0].matmul(&v[1])?.sum()),
        &[rand_matrix(&mut rng, 3, 4), rand_matrix(&mut rng, 4, 2)],
        GradCheckConfig::default(),
    )?;
    ensure(rep.passed, || format!("matmul gradient: {rep:?}"))
}

fn softmax_cases() -> Outcome {
    let g = Graph::new();
    let s = |x: [f64; 2]| -> Result<Vec<f64>, Fail> { Ok(values(&g.constant(mat(1, 2, &x)).softmax()?)) };
    all_close(&s([0.0, 0.0])?, &[0.5, 0.5], 1e-15, "softmax [0,0]")?;
    all_close(&s([1000.0, 1000.0])?, &[0.5, 0.5], 1e-15, "softmax [1000,1000]")?;
    all_close(&s([0.0, 3f64.ln()])?, &[0.25, 0.75], 1e-12, "softmax [0, ln 3]")
}

fn elementwise_cases() -> Outcome {
    let g = Graph::new();
    all_close(&values(&g.constant(Tensor::vector(vec![-1.0, 2.0])).relu()), &[0.0, 2.0], 0.0, "relu")?;
    let x = g.param(Tensor::vector(vec![1.0, 2.0]));
    let grads = g.backward(x.mul(&x)?.sum())?;
    all_close(grads.get_or_zeros(x).data(), &[2.0, 4.0], 1e-15, "d sum(x²)")?;
    let p = g.constant(Tensor::vector(vec![0.1, 1.0, 7.5, 1e3]));
    all_close(&values(&p.log()?.exp()), &[0.1, 1.0, 7.5, 1e3], 1e-12 * 1e3, "exp∘log")
}

fn cosine_cases() -> Outcome {
    let g = Graph::new();
    let sim = |a: [f64; 2], b: [f64; 2]| -> Result<f64, Fail> {
        Ok(values(&g.constant(mat(1, 2, &a)).cosine_sim(&g.constant(mat(1, 2, &b)))?)[0])
    };
    close(sim([0.3, -2.0], [0.3, -2.0])?, 1.0, 1e-12, "self-similarity")?;
    close(sim([1.0, 0.0], [0.0, 1.0])?, 0.0, 0.0, "orthogonal")?;
    close(sim([1.0, 1.0], [1.0, 0.0])?, std::f64::consts::FRAC_1_SQRT_2, 1e-6, "45 degrees")
}

fn conv_cases() -> Outcome {
    let g = Graph::new();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = rand_matrix(&mut rng, 4, 4).reshape(vec![1, 1, 4, 4])?;
    let zero = g.constant(Tensor::zeros(vec![1, 1, 4, 4]));
    let k = g.constant(rand_matrix(&mut rng, 1, 9).reshape(vec![1, 1, 3, 3])?);
    ensure(values(&zero.conv2d(&k)?).iter().all(|&v| v == 0.0), || "conv of zeros".into())?;
    let mut delta = vec![0.0; 9];
    delta[4] = 1.0;
    let d = g.constant(Tensor::new(vec![1, 1, 3, 3], delta)?);
    all_close(&values(&g.constant(x.clone()).conv2d(&d)?), x.data(), 0.0, "delta kernel")?;
    let y = values(&g.constant(x.clone()).conv2d(&k)?);
    let kd = k.value();
    for i in 0..4 {
        for j in 0..4 {
            let mut acc = 0.0;
            for di in 0..3 {
                for dj in 0..3 {
                    let (r, c) = (i as isize + di as isize - 1, j as isize + dj as isize - 1);
                    if (0..4).contains(&r) && (0..4).contains(&c) {
                        acc += kd.data()[di * 3 + dj] * x.data()[r as usize * 4 + c as usize];
                    }
                }
            }
            close(y[i * 4 + j], acc, 1e-6, "conv vs nested loops")?;
        }
    }
    Ok(())
}

fn pool_norm_cases() -> Outcome {
    let g = Graph::new();
    let x = g.param(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0])?);
    let p = x.maxpool2d((2, 2))?;
    close(p.value().item(), 4.0, 0.0, "maxpool")?;
    let grads = g.backward(p.sum())?;
    all_close(grads.get_or_zeros(x).data(), &[0.0, 0.0, 0.0, 1.0], 0.0, "maxpool routing")?;
    let c = g.constant(Tensor::filled(vec![2, 1, 2, 2], 3.0));
    let (y, _, _) = c.batchnorm_train(&g.constant(Tensor::vector(vec![1.0])), &g.constant(Tensor::vector(vec![0.0])), 1e-5)?;
    ensure(values(&y).iter().all(|&v| v == 0.0), || "batchnorm of a constant".into())
}

fn gradcheck_cases() -> Outcome {
    let x = Tensor::vector(vec![0.3, -1.2, 2.0]);
    for tol in [1e-8, 1e-4] {
        let cfg = GradCheckConfig {
            tolerance: tol,
            ..Default::default()
        };
        let rep = grad_check(|_, v| Ok(v[0].mul(&v[0])?.sum()), std::slice::from_ref(&x), cfg)?;
        ensure(rep.passed, || format!("sum(x²) at tolerance {tol}: {rep:?}"))?;
    }
    fn bad_exp<'g>(_: &'g Graph<f64>, v: &[Var<'g, f64>]) -> crate::Result<Var<'g, f64>> {
        let x = v[0];
        let val = x.value().map(f64::exp);
        Ok(x.graph().custom(&[x], val, Box::new(|ins, _, d| vec![ins[0].map(|_| d.data()[0])])).sum())
    }
    let rep = grad_check(bad_exp, &[Tensor::vector(vec![0.7])], GradCheckConfig::default())?;
    ensure(!rep.passed, || "corrupted reverse rule went unnoticed".into())
}

fn model_gradcheck_case() -> Outcome {
    let opts = GradcheckOptions {
        per_tensor: Some(2),
        ..GradcheckOptions::default()
    };
    let rep = full_model_gradcheck(&opts)?;
    ensure(rep.passed, || format!("sampled full-model check: {rep:?}"))
}

fn adam_cases() -> Outcome {
    let mut p = Tensor::vector(vec![0.5, -1.0]);
    let mut st = AdamState::<f64>::new(1e-3, 0.0);
    adam_step(&mut [&mut p], &[&Tensor::vector(vec![0.0, 0.0])], &mut st)?;
    all_close(p.data(), &[0.5, -1.0], 0.0, "zero gradient")?;
    ensure(st.step == 1, || format!("step counter {}", st.step))?;
    let mut q = Tensor::vector(vec![2.0]);
    let mut st = AdamState::<f64>::new(1e-3, 0.0);
    adam_step(&mut [&mut q], &[&Tensor::vector(vec![1.0])], &mut st)?;
    close(q.data()[0], 2.0 - 1e-3, 1e-9, "first Adam step")?;
    ensure(st.step == 1, || format!("step counter {}", st.step))
}

fn wav_cases() -> Outcome {
    let tone: Vec<f32> = (0..16_000).map(|i| (i as f32 * 0.01).sin() * 0.5).collect();
    let buf = decode_wav(&encode_wav(&tone, 1, 16_000, SampleFormat::Pcm16))?;
    ensure(buf.len() == 16_000, || format!("decoded {} samples", buf.len()))?;
    let err = buf.samples().iter().zip(&tone).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
    ensure(err <= 1.0 / 32768.0, || format!("16-bit round trip error {err}"))?;
    let stereo: Vec<f32> = tone[..1000].iter().flat_map(|&x| [x, -x]).collect();
    let mono = decode_wav(&encode_wav(&stereo, 2, 16_000, SampleFormat::Float32))?;
    ensure(mono.samples().iter().all(|&v| v == 0.0), || "x/−x downmix".into())
}

fn peak_bin(x: &[f32]) -> Result<usize, Fail> {
    let m = Stft::new(x.len()).magnitudes(x, x.len(), Some(1))?;
    Ok(m.frame(0)
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .unwrap_or(0))
}

fn resample_cases() -> Outcome {
    let sine = |sr: u32, f: f64, n: usize| -> Vec<f32> {
        (0..n)
            .map(|i| (2.0 * std::f64::consts::PI * f * i as f64 / sr as f64).sin() as f32)
            .collect()
    };
    let a = AudioBuffer::new(sine(16_000, 440.0, 16_000), 16_000)?;
    ensure(resample(&a, 16_000)? == a, || "identity rate".into())?;
    let c = resample(&AudioBuffer::new(vec![0.25; 4000], 16_000)?, 11_025)?;
    ensure(c.samples().iter().all(|&v| (v - 0.25).abs() < 1e-4), || "constant signal".into())?;
    let down = resample(&a, 8000)?;
    let bin = peak_bin(&down.samples()[..8000])?;
    ensure(bin == 440, || format!("440 Hz peak moved to {bin} Hz"))
}

fn augment_cases() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x: Vec<f32> = (0..16_000).map(|i| ((i as f32) * 0.05).sin() * 0.3).collect();
    let buf = AudioBuffer::new(x, 16_000)?;
    ensure(augment(&buf, &AugmentationConfig::disabled(), &mut rng)? == buf, || "p=0 not identity".into())?;
    let inv = augment(
        &buf,
        &AugmentationConfig {
            polarity_p: 1.0,
            ..AugmentationConfig::disabled()
        },
        &mut rng,
    )?;
    ensure(inv.samples().iter().zip(buf.samples()).all(|(a, b)| *a == -*b), || "polarity".into())?;
    let noisy = augment(
        &buf,
        &AugmentationConfig {
            noise_p: 1.0,
            noise_snr_db: (20.0, 20.0),
            ..AugmentationConfig::disabled()
        },
        &mut rng,
    )?;
    let noise: f64 = noisy.samples().iter().zip(buf.samples()).map(|(a, b)| f64::from(a - b).powi(2)).sum();
    let signal: f64 = buf.samples().iter().map(|&v| f64::from(v).powi(2)).sum();
    close(10.0 * (signal / noise).log10(), 20.0, 1.0, "noise SNR")
}

fn stft_cases() -> Outcome {
    let st = Stft::new(256);
    let z = st.magnitudes(&[0.0; 1024], 128, None)?;
    ensure(z.data.iter().all(|&v| v == 0.0), || "zeros in, zeros out".into())?;
    let k = 10;
    let x: Vec<f32> = (0..2048)
        .map(|i| (2.0 * std::f64::consts::PI * k as f64 * i as f64 / 256.0).sin() as f32)
        .collect();
    let m = st.magnitudes(&x, 128, None)?;
    for t in 0..m.frames {
        let peak = m.frame(t).iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).map(|(i, _)| i);
        ensure(peak == Some(k), || format!("frame {t} peaks at {peak:?}"))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..5 {
        let frame: Vec<f32> = (0..256).map(|_| rng.random_range(-1.0..1.0)).collect();
        let fast = st.magnitudes(&frame, 256, Some(1))?;
        let win = crate::dsp::stft::hann(256);
        let xw: Vec<f64> = frame.iter().zip(&win).map(|(a, w)| f64::from(*a) * w).collect();
        let slow: Vec<f64> = naive_dft(&xw)[..129].iter().map(|c| c.norm()).collect();
        all_close(fast.frame(0), &slow, 1e-6, "FFT vs naive DFT")?;
    }
    Ok(())
}

fn mel_cases() -> Outcome {
    let fb = MelFilterbank::new(128, 129, 16_000, 0.0, 8000.0);
    let zero = Magnitudes { frames: 1, bins: 129, data: vec![0.0; 129] };
    ensure(fb.project(&zero)?.iter().all(|&v| v == 0.0), || "zero spectrum".into())?;
    let flat = Magnitudes { frames: 1, bins: 129, data: vec![1.0; 129] };
    let out = fb.project(&flat)?;
    for m in 0..128 {
        let area: f64 = fb.row(m).iter().sum();
        ensure(area > 0.0, || format!("filter {m} is empty"))?;
        close(out[m], area, 1e-12, "flat spectrum")?;
    }
    Ok(())
}

fn logmel_cases() -> Outcome {
    ensure(adaptive_hop(16_384, 256, 128)? == 126, || "hop arithmetic".into())?;
    let fe = LogMelFrontEnd::new(16_000, 128, 128);
    let x: Vec<f32> = (0..16_384).map(|i| (i as f32 * 0.03).sin()).collect();
    let a = fe.clip(&x, (0, 16_384))?;
    let b = fe.clip(&x, (0, 8192))?;
    ensure((a.mel_bands, a.frames, b.mel_bands, b.frames) == (128, 128, 128, 128), || "equal size".into())?;
    let s = fe.clip(&[0.0; 4096], (0, 4096))?;
    let floor = (1e-6f64).ln() as f32;
    ensure(s.matrix.iter().all(|&v| v == floor), || "silence floor".into())
}

fn synth_cases() -> Outcome {
    let cfg = SynthConfig {
        tracks: 24,
        classes: 2,
        cliques: 8,
        seconds: 3.2,
        second_tag_p: 0.0,
        seed: 5,
        ..Default::default()
    };
    let c = synth_corpus(&cfg)?;
    ensure(c.tracks.len() == 24 && c.manifest().len() == 24, || "track count".into())?;
    let fe = LogMelFrontEnd::new(16_000, 128, 32);
    let feats: Vec<Vec<f64>> = c
        .tracks
        .iter()
        .map(|t| Ok(fe.clip(t.audio.samples(), (0, t.audio.len()))?.matrix.iter().map(|&v| f64::from(v)).collect()))
        .collect::<Result<_, Fail>>()?;
    // Class centroids of band means from even tracks, scored on odd tracks.
    let band_means = |f: &[f64]| -> Vec<f64> { f.chunks(32).map(|r| r.iter().sum::<f64>() / 32.0).collect() };
    let mut cent = vec![vec![0.0; 128]; 2];
    for (i, t) in c.tracks.iter().enumerate().filter(|(i, _)| i % 2 == 0) {
        for (a, b) in cent[t.tags[0]].iter_mut().zip(band_means(&feats[i])) {
            *a += b;
        }
    }
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
    let odd: Vec<usize> = (1..24).step_by(2).collect();
    let correct = odd
        .iter()
        .filter(|&&i| {
            let f = band_means(&feats[i]);
            let pred = usize::from(dist(&f, &cent[0]) > dist(&f, &cent[1]));
            pred == c.tracks[i].tags[0]
        })
        .count();
    ensure(correct * 100 >= odd.len() * 95, || format!("centroid accuracy {correct}/{}", odd.len()))?;
    let corr = |a: &[f64], b: &[f64]| {
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    };
    for (i, t) in c.tracks.iter().enumerate().filter(|(_, t)| t.version > 0) {
        let own = corr(&feats[i], &feats[t.clique]);
        for b in (0..24).filter(|&b| c.tracks[b].version == 0 && c.tracks[b].clique != t.clique) {
            ensure(own > corr(&feats[i], &feats[b]), || format!("cover {i} closer to base {b}"))?;
        }
    }
    Ok(())
}

fn spans(nodes: &[crate::hac::ClipNode]) -> Vec<(usize, usize)> {
    nodes.iter().map(|n| n.span()).collect()
}

fn hac_cases() -> Outcome {
    let t = build_tree(8, 2, 3)?;
    ensure(spans(t.leaves()) == [(0, 2), (2, 4), (4, 6), (6, 8)], || "leaves of 8".into())?;
    let t7 = build_tree(7, 2, 2)?;
    ensure(spans(t7.level(1)) == [(0, 4), (4, 7)], || "remainder rule".into())?;
    ensure(t.dump().lines().count() == 7, || "crop dump line count".into())?;
    let big = build_tree(64, 2, 4)?;
    let pairs = enumerate_pairs(&big);
    ensure(pairs.len() == 7, || format!("{} pairs for N=4", pairs.len()))?;
    ensure(enumerate_pairs(&build_tree(8, 2, 2)?).len() == 1, || "pairs for N=2".into())?;
    let mut parts: Vec<(usize, usize)> = pairs.iter().flat_map(|p| p.parts.iter().map(|c| (c.level, c.index))).collect();
    parts.sort();
    let expect: Vec<(usize, usize)> = big.nodes().skip(1).map(|c| (c.level, c.index)).collect();
    ensure(parts == expect, || "every non-root node is a part once".into())?;
    close(clip_len_ratio(&build_tree(8, 2, 2)?.level(1)[0], build_tree(8, 2, 2)?.root(), 2)?, 0.5, 0.0, "M=2 ratio")?;
    let t4 = build_tree(16, 4, 2)?;
    close(clip_len_ratio(&t4.level(1)[0], t4.root(), 4)?, 0.25, 0.0, "M=4 ratio")?;
    close(clip_len_ratio(&t7.level(1)[0], t7.root(), 2)?, 4.0 / 7.0, 1e-15, "remainder ratio")
}

fn small_store(cfg: &ModelConfig) -> Result<ParamStore, Fail> {
    Ok(ParamStore::init(cfg, &mut ChaCha8Rng::seed_from_u64(6))?)
}

fn attention_cases() -> Outcome {
    let g = Graph::new();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let q = g.constant(rand_matrix(&mut rng, 3, 4));
    let k1 = g.constant(rand_matrix(&mut rng, 1, 4));
    let v1 = g.constant(rand_matrix(&mut rng, 1, 4));
    let out = values(&q.attention(&k1, &v1, 1, 2)?);
    for r in 0..3 {
        all_close(&out[r * 4..r * 4 + 4], v1.value().data(), 1e-12, "single key")?;
    }
    let same = g.constant(mat(3, 4, &[0.2, -0.1, 0.4, 0.3].repeat(3)));
    let vals = rand_matrix(&mut rng, 3, 4);
    let mean: Vec<f64> = (0..4).map(|c| (0..3).map(|r| vals.data()[r * 4 + c]).sum::<f64>() / 3.0).collect();
    let out = values(&q.attention(&same, &g.constant(vals), 1, 2)?);
    all_close(&out[..4], &mean, 1e-12, "identical keys")?;
    // Two queries over three keys, one head, against the definition.
    let (qm, km, vm) = (rand_matrix(&mut rng, 2, 4), rand_matrix(&mut rng, 3, 4), rand_matrix(&mut rng, 3, 4));
    let out = values(&g.constant(qm.clone()).attention(&g.constant(km.clone()), &g.constant(vm.clone()), 1, 1)?);
    for i in 0..2 {
        let logits: Vec<f64> = (0..3)
            .map(|j| (0..4).map(|d| qm.data()[i * 4 + d] * km.data()[j * 4 + d]).sum::<f64>() / 2.0)
            .collect();
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        for d in 0..4 {
            let want: f64 = (0..3).map(|j| logits[j].exp() / z * vm.data()[j * 4 + d]).sum();
            close(out[i * 4 + d], want, 1e-6, "attention oracle")?;
        }
    }
    Ok(())
}

fn pwt_cases() -> Outcome {
    let mut cfg = ModelConfig::gradcheck();
    let store = small_store(&cfg)?;
    let g = Graph::<f64>::new();
    let bound: Bound<'_, f64> = store.bind_frozen(&g);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let d = cfg.d_e();
    let state: Vec<Var<'_, f64>> = (0..cfg.n).map(|l| g.constant(rand_matrix(&mut rng, cfg.level_rows(l, 2), d))).collect();
    let blocks = (0..cfg.blocks)
        .map(|b| (0..cfg.pairs()).map(|p| Unit::bind(&bound, b, p)).collect())
        .collect::<crate::Result<Vec<Vec<_>>>>()?;
    cfg.set_lambdas(0.0);
    let before = g.attention_calls();
    let out = pwt_stack(&state, &blocks, &cfg)?;
    for (a, b) in out.iter().zip(&state) {
        ensure(a.value().data() == b.value().data(), || "zero scales changed the state".into())?;
    }
    ensure(g.attention_calls() == before, || "zero scales still attended".into())?;
    // M identical parts: the whole attends uniformly, as if to one part.
    let unit = &blocks[0][0];
    let whole = g.constant(rand_matrix(&mut rng, 1, d));
    let part = rand_matrix(&mut rng, 1, d);
    let parts = g.constant(mat(2, d, &part.data().repeat(2)));
    let (w2, _) = crate::model::interact(&whole, &parts, unit, 1.0, 0.0, cfg.heads)?;
    let (w1, _) = crate::model::interact(&whole, &g.constant(part), unit, 1.0, 0.0, cfg.heads)?;
    all_close(&values(&w2), &values(&w1), 1e-12, "identical parts")
}

fn head_cases() -> Outcome {
    let cfg = ModelConfig::desk();
    let mut store = small_store(&cfg)?;
    let g = Graph::<f32>::new();
    let y = project_head(&g.constant(Tensor::zeros(vec![2, cfg.d_e()])), &Head::bind(&store.bind_frozen(&g))?)?;
    ensure(y.shape() == [2, cfg.contrastive_dim], || format!("head output {:?}", y.shape()))?;
    for (k, v) in store.params.iter_mut() {
        if k.starts_with("head") {
            v.data_mut().fill(0.0);
        }
    }
    let g = Graph::<f32>::new();
    let y = project_head(&g.constant(Tensor::filled(vec![2, cfg.d_e()], 1.5)), &Head::bind(&store.bind_frozen(&g))?)?;
    ensure(y.value().data().iter().all(|&v| v == 0.0), || "zero head weights".into())
}

fn batch<'g>(g: &'g Graph<f64>, levels: &[Tensor<f64>], tilde: Tensor<f64>, tree: &ClipTree) -> Result<ContrastiveBatch<'g, f64>, Fail> {
    Ok(ContrastiveBatch::new(levels.iter().map(|l| g.constant(l.clone())).collect(), g.constant(tilde), tree)?)
}

fn loss_cases() -> Outcome {
    let g = Graph::new();
    let tree = build_tree(8, 2, 2)?;
    let v = [0.3, -0.2, 0.9];
    let b = batch(&g, &[mat(1, 3, &v), mat(2, 3, &v.repeat(2))], mat(1, 3, &v), &tree)?;
    close(part_whole_term(&b, 1.0)?.value().item(), 2.7183, 1e-4, "identical children")?;
    let e = |i: usize| -> Vec<f64> { (0..6).map(|j| f64::from(u8::from(i == j))).collect() };
    let b = batch(&g, &[mat(1, 6, &e(0)), mat(2, 6, &[e(1), e(2)].concat())], mat(1, 6, &e(3)), &tree)?;
    close(part_whole_term(&b, 1.0)?.value().item(), 1.0, 1e-12, "orthogonal children")?;
    let (loss, _) = hierarchical_loss(&b, 0.5, Ablation::Full)?;
    close(loss.value().item(), 0.0, 1e-7, "B=1 loss")?;
    close(hierarchical_loss(&b, 0.5, Ablation::NoHcl)?.0.value().item(), 0.0, 1e-7, "B=1 no_hcl loss")?;
    let b1 = negative_term(&b, 1.0)?;
    close(b1.value().item(), 1.0, 1e-12, "B=1 negatives")?;
    let b3 = batch(
        &g,
        &[mat(3, 6, &[e(0), e(1), e(2)].concat()), mat(6, 6, &[0.1; 36])],
        mat(3, 6, &[e(3), e(4), e(5)].concat()),
        &tree,
    )?;
    all_close(&values(&negative_term(&b3, 1.0)?), &[5.0; 3], 1e-12, "orthogonal negatives")?;
    // Standalone InfoNCE over the same candidates for no_hcl.
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (r0, r1, tl) = (rand_matrix(&mut rng, 3, 5), rand_matrix(&mut rng, 6, 5), rand_matrix(&mut rng, 3, 5));
    let bb = batch(&g, &[r0.clone(), r1], tl.clone(), &tree)?;
    let got = hierarchical_loss(&bb, 0.5, Ablation::NoHcl)?.0.value().item();
    let cos = |a: &[f64], b: &[f64]| {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        dot / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt())
    };
    let mut want = 0.0;
    for i in 0..3 {
        let pos = (cos(r0.row(i), tl.row(i)) / 0.5).exp();
        let mut den = 0.0;
        for u in 0..3 {
            den += (cos(r0.row(i), tl.row(u)) / 0.5).exp();
            if u != i {
                den += (cos(r0.row(i), r0.row(u)) / 0.5).exp();
            }
        }
        want += -(pos / den).ln() / 3.0;
    }
    close(got, want, 1e-6, "no_hcl vs InfoNCE")?;
    let flat = build_tree(8, 2, 1)?;
    let bf = batch(&g, &[r0], tl, &flat)?;
    let (full, no) = (
        hierarchical_loss(&bf, 0.5, Ablation::Full)?.0.value().item(),
        hierarchical_loss(&bf, 0.5, Ablation::NoHcl)?.0.value().item(),
    );
    ensure(full == no, || format!("N=1: full {full} vs no_hcl {no}"))
}

fn tiny_train_config() -> TrainConfig {
    let mut c = TrainConfig::desk();
    c.model = ModelConfig {
        mel_bands: 32,
        frames: 16,
        channels: vec![4, 8, 8, 16],
        d_t: 6,
        head_hidden: 16,
        contrastive_dim: 8,
        n: 3,
        blocks: 2,
        lambda_down: vec![1.0; 2],
        lambda_up: vec![1.0; 2],
        ..ModelConfig::desk()
    };
    c.root_seconds = 0.2;
    c.batch = 4;
    c.epochs = 2;
    c.lr = 1e-3;
    c
}

fn tiny_tracks() -> Result<Vec<AudioBuffer>, Fail> {
    let c = synth_corpus(&SynthConfig {
        tracks: 8,
        cliques: 4,
        classes: 2,
        seconds: 0.25,
        seed: 3,
        ..Default::default()
    })?;
    Ok(c.tracks.into_iter().map(|t| t.audio).collect())
}

fn train_cases() -> Outcome {
    let cfg = tiny_train_config();
    let tracks = tiny_tracks()?;
    let a = pretrain_tracks(&cfg, &tracks, None)?;
    let b = pretrain_tracks(&cfg, &tracks, None)?;
    ensure(a.reports == b.reports && a.log == b.log, || "seeded runs differ".into())?;
    let epochs = a.log.iter().filter(|l| l.contains(" done ")).count();
    ensure(epochs == cfg.epochs, || format!("{epochs} epochs logged"))?;
    let mut short = cfg.clone();
    short.epochs = 1;
    let first = pretrain_tracks(&short, &tracks, None)?;
    let rest = pretrain_tracks(&cfg, &tracks, Some(first.checkpoint))?;
    let joined: Vec<&String> = first.log.iter().chain(&rest.log).collect();
    ensure(joined == a.log.iter().collect::<Vec<_>>(), || "resume diverged".into())?;
    let bytes = encode_checkpoint(&a.checkpoint);
    let back = decode_checkpoint(&bytes)?;
    ensure(encode_checkpoint(&back) == bytes && back == a.checkpoint, || "checkpoint round trip".into())?;
    ensure(decode_checkpoint(&bytes[..bytes.len() / 2]).is_err(), || "truncated checkpoint accepted".into())?;
    let mut foreign = bytes;
    foreign[..4].copy_from_slice(b"RIFF");
    ensure(decode_checkpoint(&foreign).is_err(), || "foreign magic accepted".into())
}

fn metric_cases() -> Outcome {
    close(roc_auc(&[0.9, 0.8, 0.3, 0.2], &[true, false, true, false])?, 0.75, 0.0, "AUC quartet")?;
    close(roc_auc(&[0.5, 0.5], &[true, false])?, 0.5, 0.0, "tied AUC")?;
    close(roc_auc(&[2.0, 1.0, 0.0], &[true, true, false])?, 1.0, 0.0, "perfect AUC")?;
    close(pr_auc(&[2.0, 1.0, 0.0], &[true, true, false])?, 1.0, 0.0, "perfect PR-AUC")?;
    close(average_precision(&[true, false, true])?, 0.8333, 1e-4, "AP triple")?;
    ensure(first_relevant_rank(&[false, false, true])? == 3, || "MR1 at rank 3".into())?;
    let mut s = EmbeddingSet::new(2);
    for (i, r) in [[1.0, 0.0], [0.9, 0.1], [0.0, 1.0], [0.1, 0.9]].iter().enumerate() {
        s.push(format!("t{i}"), r.to_vec())?;
    }
    let cl: Vec<String> = ["a", "a", "b", "b"].map(String::from).to_vec();
    let r = retrieval_eval(&s, &cl)?;
    ensure(r.map == 1.0 && r.mr1 == 1.0, || format!("perfect retrieval {r:?}"))
}

fn probe_cases() -> Outcome {
    let run = |x: &[Vec<f32>], labels: &[usize], seed: u64| -> Result<f64, Fail> {
        let refs: Vec<&[f32]> = x.iter().map(Vec::as_slice).collect();
        let tags = TagMatrix {
            names: vec!["a".into(), "b".into()],
            rows: labels.iter().map(|&c| vec![c == 0, c == 1]).collect(),
        };
        let split = ProbeSplit::random(x.len(), seed)?;
        Ok(linear_probe(&refs, &tags, &split, &ProbeConfig { seed, ..Default::default() })?.roc_auc)
    };
    let labels: Vec<usize> = (0..30).map(|i| i % 2).collect();
    close(run(&vec![vec![0.25; 4]; 30], &labels, 0)?, 0.5, 0.0, "constant embeddings")?;
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let labels: Vec<usize> = (0..80).map(|i| i % 2).collect();
    let sep: Vec<Vec<f32>> = labels
        .iter()
        .map(|&c| (0..4).map(|k| if k == c { 3.0 } else { 0.0 } + rng.random_range(-0.5..0.5)).collect())
        .collect();
    let auc = run(&sep, &labels, 0)?;
    ensure(auc >= 0.99, || format!("separable classes AUC {auc}"))?;
    let mut total = 0.0;
    for seed in 0..20 {
        let mut labels: Vec<usize> = (0..200).map(|i| i % 2).collect();
        rand::seq::SliceRandom::shuffle(labels.as_mut_slice(), &mut rng);
        let x: Vec<Vec<f32>> = (0..200).map(|_| (0..8).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        total += run(&x, &labels, seed)?;
    }
    close(total / 20.0, 0.5, 0.05, "chance-level AUC")
}

fn embed_cases() -> Outcome {
    let cfg = tiny_train_config();
    let tracks = tiny_tracks()?;
    let store = ParamStore::init(&cfg.model, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
    let refs = [&tracks[0], &tracks[1], &tracks[0]];
    let rows = crate::eval::embed_tracks(&cfg, &store, &refs)?;
    ensure(rows.len() == 3, || "row count".into())?;
    ensure(rows[0] == rows[2], || "identical tracks embed differently".into())?;
    ensure(rows[0].len() == cfg.model.d_e(), || "embedding width".into())
}

const CHECKS: &[(&str, fn() -> Outcome)] = &[
    ("matrix product", matmul_cases),
    ("softmax", softmax_cases),
    ("elementwise ops", elementwise_cases),
    ("cosine similarity", cosine_cases),
    ("convolution", conv_cases),
    ("pooling and batch norm", pool_norm_cases),
    ("gradient checker", gradcheck_cases),
    ("full model gradient (sampled)", model_gradcheck_case),
    ("adam", adam_cases),
    ("wav codec", wav_cases),
    ("resampling", resample_cases),
    ("augmentation", augment_cases),
    ("stft", stft_cases),
    ("mel filterbank", mel_cases),
    ("log-mel front end", logmel_cases),
    ("synthetic corpus", synth_cases),
    ("hierarchical cropping", hac_cases),
    ("attention", attention_cases),
    ("part-whole transformer", pwt_cases),
    ("projection head", head_cases),
    ("hierarchical loss", loss_cases),
    ("training and checkpoints", train_cases),
    ("metrics", metric_cases),
    ("linear probe", probe_cases),
    ("embedding", embed_cases),
];

/// Runs every check, in a fixed order.
pub fn run_selftest() -> Vec<Check> {
    CHECKS
        .iter()
        .map(|&(name, f)| {
            let r = std::panic::catch_unwind(f).unwrap_or_else(|_| Err(Fail("panicked".into())));
            match r {
                Ok(()) => Check {
                    name,
                    passed: true,
                    detail: String::new(),
                },
                Err(Fail(detail)) => Check {
                    name,
                    passed: false,
                    detail,
                },
            }
        })
        .collect()
}
