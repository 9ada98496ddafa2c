//! Acceptance report: one PASS/FAIL line per criterion. Exits non-zero if
//! any criterion fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use common::*;
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sepconv::data::{
    apply_augment, build_dataset_default, center_crop, draw_augment, DatasetConfig,
    JumpCutDetector, Triplet,
};
use sepconv::eval::{evaluate, psnr, LinearBaseline, Protocol};
use sepconv::kernelconv::{
    centered_delta, local_sepconv_backward, local_sepconv_forward, naive_forward_oracle,
    KernelField,
};
use sepconv::losses::{ssim, LossConfig};
use sepconv::network::{build_network, NetworkConfig};
use sepconv::synthetic::{translating_sequence, Texture};
use sepconv::train::{AdaMaxConfig, Trainer};
use sepconv::Image;
use statrs::distribution::{ChiSquared, ContinuousCDF};

type Outcome = Result<String, String>;

fn random_image<T: sepconv::Scalar>(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Image<T> {
    Image::from_fn(h, w, |_, _, _| T::from(rng.random::<f64>()).unwrap())
}

fn random_kernels(rng: &mut ChaCha8Rng, k: usize, h: usize, w: usize) -> KernelField<f64> {
    let mut t = || Array3::from_shape_fn((k, h, w), |_| rng.random_range(-1.0..1.0));
    KernelField::new(t(), t(), t(), t()).unwrap()
}

fn gradient_correctness() -> Outcome {
    let eps = 1e-6;
    let (mut worst, mut checked) = (0.0f64, 0usize);
    for seed in 0..100u64 {
        for &n in &[4usize, 8] {
            for &k in &[3usize, 5] {
                let mut rng = ChaCha8Rng::seed_from_u64(seed * 16 + n as u64 + k as u64);
                let f1 = random_image::<f64>(&mut rng, n, n);
                let f2 = random_image::<f64>(&mut rng, n, n);
                let kernels = random_kernels(&mut rng, k, n, n);
                let g = Array3::from_shape_fn((3, n, n), |_| rng.random_range(-1.0..1.0));
                let analytic =
                    local_sepconv_backward(&g, &f1, &f2, &kernels).map_err(|e| e.to_string())?;
                let loss = |kf: &KernelField<f64>| {
                    (local_sepconv_forward(&f1, &f2, kf).unwrap().data() * &g).sum()
                };
                for t in 0..4 {
                    for idx in ndarray::indices((k, n, n)) {
                        let mut plus = kernels.clone();
                        plus.tensors_mut()[t][idx] += eps;
                        let mut minus = kernels.clone();
                        minus.tensors_mut()[t][idx] -= eps;
                        let fd = (loss(&plus) - loss(&minus)) / (2.0 * eps);
                        let a = analytic.tensors()[t][idx];
                        let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
                        worst = worst.max(rel);
                        checked += 1;
                    }
                }
            }
        }
    }
    let detail = format!("{checked} components over 100 seeds x H=W in {{4,8}} x K in {{3,5}}, max relative error {worst:.2e}");
    if worst <= 1e-4 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn oracle_equivalence() -> Outcome {
    let mut worst = (0.0f64, 0.0f64);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for &h in &[1usize, 2, 5, 8] {
        for &w in &[1usize, 2, 5, 8] {
            for &k in &[1usize, 3, 5] {
                for _ in 0..5 {
                    let f1 = random_image::<f64>(&mut rng, h, w);
                    let f2 = random_image::<f64>(&mut rng, h, w);
                    let kf = random_kernels(&mut rng, k, h, w);
                    let a = local_sepconv_forward(&f1, &f2, &kf).unwrap();
                    let b = naive_forward_oracle(&f1, &f2, &kf).unwrap();
                    let d = (a.data() - b.data())
                        .mapv(f64::abs)
                        .fold(0.0f64, |m, &v| m.max(v));
                    worst.0 = worst.0.max(d);

                    // f32 with kernels scaled like a trained model's, so the
                    // output stays in image range
                    let (f1, f2) = (f1.cast::<f32>(), f2.cast::<f32>());
                    let mut t = || {
                        Array3::from_shape_fn((k, h, w), |_| {
                            rng.random_range(0.0..1.0f32) / k as f32
                        })
                    };
                    let kf = KernelField::new(t(), t(), t(), t()).unwrap();
                    let a = local_sepconv_forward(&f1, &f2, &kf).unwrap();
                    let b = naive_forward_oracle(&f1, &f2, &kf).unwrap();
                    let d = (a.data() - b.data())
                        .mapv(f32::abs)
                        .fold(0.0f32, |m, &v| m.max(v));
                    worst.1 = worst.1.max(d as f64);
                }
            }
        }
    }
    let detail = format!("48 shapes x 5 draws; max abs diff f64 (kernels in [-1,1]) {:.1e}, f32 (image-range output) {:.1e}", worst.0, worst.1);
    if worst.0 <= 1e-6 && worst.1 <= 1e-6 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn identity_and_average() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut id_err, mut avg_err) = (0.0f32, 0.0f32);
    for &(h, w, k) in &[(1, 1, 1), (5, 7, 3), (16, 9, 5), (32, 32, 15)] {
        let f1 = random_image::<f32>(&mut rng, h, w);
        let f2 = random_image::<f32>(&mut rng, h, w);
        let delta = centered_delta::<f32>(k, 1.0);
        let zero = vec![0.0f32; k];
        let kf = KernelField::uniform(h, w, &delta, &delta, &zero, &zero).unwrap();
        let out = local_sepconv_forward(&f1, &f2, &kf).unwrap();
        id_err = id_err.max(
            (out.data() - f1.data())
                .mapv(f32::abs)
                .fold(0.0, |m: f32, &v| m.max(v)),
        );

        let s = centered_delta::<f32>(k, 0.5f32.sqrt());
        let kf = KernelField::uniform(h, w, &s, &s, &s, &s).unwrap();
        let out = local_sepconv_forward(&f1, &f2, &kf).unwrap();
        let avg = (f1.data() + f2.data()) * 0.5;
        avg_err = avg_err.max(
            (out.data() - &avg)
                .mapv(f32::abs)
                .fold(0.0, |m: f32, &v| m.max(v)),
        );
    }
    let detail = format!(
        "delta max err {id_err:e}, scaled-delta average max err {avg_err:e} (f32 eps {:e})",
        f32::EPSILON
    );
    if id_err == 0.0 && avg_err <= 2.0 * f32::EPSILON {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// SSIM straight from its definition: explicit 2D Gaussian weights per window.
fn ssim_literal(x: &Image<f64>, y: &Image<f64>) -> f64 {
    let (h, w) = x.size();
    let mut g = [[0.0f64; 11]; 11];
    let mut total = 0.0;
    for (i, row) in g.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(di * di + dj * dj) / (2.0 * 1.5 * 1.5)).exp();
            total += *v;
        }
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut sum = 0.0;
    let mut count = 0;
    for c in 0..3 {
        for oy in 0..=h - 11 {
            for ox in 0..=w - 11 {
                let (mut mx, mut my) = (0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let wt = g[i][j] / total;
                        mx += wt * x.get(c, oy + i, ox + j);
                        my += wt * y.get(c, oy + i, ox + j);
                    }
                }
                let (mut vx, mut vy, mut cov) = (0.0, 0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let wt = g[i][j] / total;
                        let (a, b) = (x.get(c, oy + i, ox + j) - mx, y.get(c, oy + i, ox + j) - my);
                        vx += wt * a * a;
                        vy += wt * b * b;
                        cov += wt * a * b;
                    }
                }
                sum += ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                    / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
    }
    sum / count as f64
}

fn psnr_loop(a: &Image, b: &Image) -> f64 {
    let (h, w) = a.size();
    let mut sse = 0.0f64;
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let d = 255.0 * (a.get(c, y, x) as f64 - b.get(c, y, x) as f64);
                sse += d * d;
            }
        }
    }
    10.0 * (255.0f64.powi(2) / (sse / (3 * h * w) as f64)).log10()
}

fn ssim_psnr_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut ssim_err = 0.0f64;
    for _ in 0..5 {
        let x = random_image::<f64>(&mut rng, 32, 32);
        let noise = random_image::<f64>(&mut rng, 32, 32);
        let y = Image::new(x.data() * 0.7 + noise.data() * 0.3).unwrap();
        ssim_err = ssim_err.max((ssim(&x, &y, 11).unwrap() - ssim_literal(&x, &y)).abs());
    }
    let x = random_image::<f64>(&mut rng, 32, 32);
    let ident = ssim(&x, &x, 11).unwrap();
    let xf = random_image::<f32>(&mut rng, 20, 30);
    let inf = psnr(&xf, &xf).unwrap();
    let gray = Image::<f32>::from_fn(9, 9, |_, y, x| ((y * 9 + x) as f32 + 10.0) / 255.0);
    let off = Image::new(gray.data().mapv(|v| v + 1.0 / 255.0)).unwrap();
    let one = psnr(&gray, &off).unwrap();
    let mut psnr_err = 0.0f64;
    for _ in 0..5 {
        let a = random_image::<f32>(&mut rng, 17, 23);
        let b = random_image::<f32>(&mut rng, 17, 23);
        psnr_err = psnr_err.max((psnr(&a, &b).unwrap() - psnr_loop(&a, &b)).abs());
    }
    let detail = format!(
        "ssim vs literal max diff {ssim_err:.1e}; ssim(x,x) = {ident}; psnr(x,x) = {inf}; 1-level error = {one:.4} dB; psnr vs loop max diff {psnr_err:.1e} dB"
    );
    if ssim_err <= 1e-6
        && ident == 1.0
        && inf == f64::INFINITY
        && (one - 48.13).abs() <= 0.01
        && psnr_err <= 1e-6
    {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn overfit() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let src = tmp.path().join("src");
    let velocities = [
        (1.5, -2.0),
        (0.0, 3.0),
        (-2.5, 1.0),
        (2.0, 2.0),
        (-1.0, -3.0),
        (3.0, 0.5),
        (0.5, -0.5),
        (-3.0, -1.5),
    ];
    for (i, v) in velocities.iter().enumerate() {
        write_sequence(
            &src.join(format!("s{i}")),
            100 + i as u64,
            (180, 180),
            3,
            *v,
        );
    }
    let config = DatasetConfig {
        validation_fraction: 0.0,
        ..Default::default()
    };
    let index = build_dataset_default(&src, &tmp.path().join("cache"), &config)
        .map_err(|e| e.to_string())?;
    let mut samples = Vec::new();
    for i in 0..velocities.len() {
        let r = index
            .records
            .iter()
            .find(|r| r.source == format!("s{i}"))
            .ok_or(format!("no patch cached for sequence s{i}"))?;
        samples.push(center_crop(&index.load_patch(r).map_err(|e| e.to_string())?, 128).unwrap());
    }

    let net = NetworkConfig {
        encoder_channels: vec![8, 16, 32, 64, 128],
        kernel_size: 15,
        input_channels: 6,
    };
    let params = build_network(&net, 0).unwrap();
    let mut trainer = Trainer::new(
        params,
        LossConfig::default(),
        1e-3,
        AdaMaxConfig::default(),
        None,
    )
    .unwrap();
    let start = Instant::now();
    let initial = trainer.mean_loss(&samples).unwrap();
    let (batch, steps) = (4, 500);
    for s in 0..steps {
        let b: Vec<Triplet> = (0..batch)
            .map(|j| samples[(s * batch + j) % samples.len()].clone())
            .collect();
        trainer.step(&b).map_err(|e| e.to_string())?;
    }
    let fin = trainer.mean_loss(&samples).unwrap();
    let took = start.elapsed();
    let detail = format!(
        "8 cached triplets, reduced config, batch {batch}, lr 1e-3: L1 {initial:.4} -> {fin:.4} after {steps} steps in {:.0} s",
        took.as_secs_f64()
    );
    if fin < 0.02 && took < Duration::from_secs(600) {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn chi_square_p(counts: &[u64], probs: &[f64]) -> f64 {
    let n: u64 = counts.iter().sum();
    let stat: f64 = counts
        .iter()
        .zip(probs)
        .map(|(&c, &p)| {
            let e = n as f64 * p;
            (c as f64 - e).powi(2) / e
        })
        .sum();
    1.0 - ChiSquared::new((counts.len() - 1) as f64)
        .unwrap()
        .cdf(stat)
}

fn augmentation_distribution() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (mut families, mut swaps) = ([0u64; 4], [0u64; 2]);
    let t = {
        let seq = translating_sequence(&Texture::random(5), 150, 150, 3, (1.0, 2.0));
        Triplet::new(seq[0].clone(), seq[1].clone(), seq[2].clone()).unwrap()
    };
    let mut shared = true;
    for i in 0..10_000 {
        let p = draw_augment(&mut rng, 150, 128).unwrap();
        families[p.transform.family()] += 1;
        swaps[p.swap as usize] += 1;
        if i % 500 == 0 {
            let out = apply_augment(&t, &p).unwrap();
            let expect = |img: &Image| {
                p.transform
                    .apply(img)
                    .crop(p.crop_origin.0, p.crop_origin.1, 128, 128)
                    .unwrap()
            };
            let (first, last) = if p.swap {
                (&t.last, &t.first)
            } else {
                (&t.first, &t.last)
            };
            shared &= out.first == expect(first)
                && out.middle == expect(&t.middle)
                && out.last == expect(last);
        }
    }
    let p_t = chi_square_p(&families, &[0.25; 4]);
    let p_s = chi_square_p(&swaps, &[0.5; 2]);

    // pooled over 100 independent streams as a check that does not hinge on one seed
    let (mut pooled_f, mut pooled_s) = ([0u64; 4], [0u64; 2]);
    for seed in 1..=100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..10_000 {
            let p = draw_augment(&mut rng, 150, 128).unwrap();
            pooled_f[p.transform.family()] += 1;
            pooled_s[p.swap as usize] += 1;
        }
    }
    let pp_t = chi_square_p(&pooled_f, &[0.25; 4]);
    let pp_s = chi_square_p(&pooled_s, &[0.5; 2]);
    let detail = format!(
        "10k draws: transform counts {families:?} (p = {p_t:.3}), swap counts {swaps:?} (p = {p_s:.3}); \
         pooled 1M draws: p = {pp_t:.3} / {pp_s:.3}; shared transform {shared}"
    );
    if p_t > 0.01 && p_s > 0.01 && pp_t > 0.01 && pp_s > 0.01 && shared {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn jump_cuts() -> Outcome {
    let d = JumpCutDetector::default();
    let (mut detected, mut cuts) = (0, 0);
    let (mut false_pos, mut pans) = (0, 0);
    for &(h, w) in &[(32usize, 32usize), (64, 48), (150, 150), (120, 200)] {
        let black = Image::constant(h, w, 0.0);
        let white = Image::constant(h, w, 1.0);
        for (a, b) in [(&black, &white), (&white, &black)] {
            cuts += 1;
            detected += d.is_cut(a, b) as usize;
        }
        for s in 0..50u64 {
            for v in [(0.0, 1.0), (1.0, 0.0), (0.0, -1.0), (-1.0, 0.0), (1.0, 1.0)] {
                let f = translating_sequence(&Texture::random(s), h, w, 2, v);
                pans += 1;
                false_pos += d.is_cut(&f[0], &f[1]) as usize;
            }
        }
    }
    let detail = format!("detected {detected}/{cuts} black/white cuts, {false_pos} false positives on {pans} 1-pixel pans");
    if detected == cuts && false_pos == 0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn end_to_end() -> Outcome {
    let start = Instant::now();
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = tmp.path();
    let src = toy_corpus(&root.join("corpus"), 4, 5, 176);
    let cfg = root.join("toy.cfg");
    std::fs::write(
        &cfg,
        format!(
            "version = 1\nencoder_channels = 8,16,32,64,128\nkernel_size = 15\nbatch_size = 4\nlearning_rate = 0.001\n\
             max_patches = 3\nvalidation_fraction = 0.25\npreview_count = 2\ndataset = {}\ncheckpoint_dir = {}\n",
            root.join("cache").display(),
            root.join("ckpt").display()
        ),
    )
    .unwrap();
    let cfg_s = cfg.to_str().unwrap();
    let step = |name: &str, args: &[&str]| -> Result<(), String> {
        let o = run(args);
        if code(&o) != 0 {
            return Err(format!("{name} exited {}: {}", code(&o), stderr(&o)));
        }
        Ok(())
    };
    step(
        "preprocess",
        &[
            "preprocess",
            "--src",
            src.to_str().unwrap(),
            "--out",
            root.join("cache").to_str().unwrap(),
            "--config",
            cfg_s,
        ],
    )?;
    step("train", &["train", "--config", cfg_s, "--epochs", "1"])?;
    let ck = root.join("ckpt").join("epoch-0001.ckpt");
    let report = root.join("report.jsonl");
    step(
        "evaluate",
        &[
            "evaluate",
            "--model",
            ck.to_str().unwrap(),
            "--data",
            root.join("cache").to_str().unwrap(),
            "--protocol",
            "dataset",
            "--out",
            report.to_str().unwrap(),
        ],
    )?;
    let video = root.join("video");
    write_sequence(&video, 77, (128, 128), 10, (0.5, 1.0));
    let out = root.join("doubled");
    step(
        "interpolate",
        &[
            "interpolate",
            "--in",
            video.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--model",
            ck.to_str().unwrap(),
        ],
    )?;
    let frames = std::fs::read_dir(&out).map_err(|e| e.to_string())?.count();
    let took = start.elapsed();
    let records = sepconv::eval::EvalReport::read(&report)
        .map_err(|e| e.to_string())?
        .records
        .len();
    let detail = format!(
        "preprocess, train 1 epoch, evaluate ({records} triplets), interpolate 10 -> {frames} frames; all exit 0 in {:.0} s",
        took.as_secs_f64()
    );
    if frames == 19 && records > 0 && took < Duration::from_secs(300) {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn benchmark_reproduction() -> Outcome {
    // The published numbers need large video corpora and many GPU hours; what
    // can be checked locally is that the baseline row is produced by the
    // same evaluation path as a model and agrees with a direct computation.
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let data = tmp.path().join("triplets");
    let mut direct = Vec::new();
    for k in 0..4u64 {
        let f = write_sequence(
            &data.join(format!("t{k}")),
            200 + k,
            (48, 64),
            3,
            (1.0, -1.0),
        );
        let pred = sepconv::eval::linear_baseline(&f[0], &f[2])
            .unwrap()
            .quantized();
        direct.push((
            psnr(&pred, &f[1]).unwrap(),
            ssim(&pred, &f[1], 11).unwrap() as f64,
        ));
    }
    let report = evaluate(&LinearBaseline, &data, Protocol::Dataset).map_err(|e| e.to_string())?;
    let ok = report.records.len() == 4
        && report.is_consistent()
        && report
            .records
            .iter()
            .zip(&direct)
            .all(|(r, d)| (r.psnr - d.0).abs() < 1e-9 && (r.ssim - d.1).abs() < 1e-9);
    let detail = format!(
        "NOT DESK-REPRODUCIBLE: published benchmark numbers not checked (needs a large training corpus and GPU training); baseline machinery on 4 local triplets: mean PSNR {:.2} dB, mean SSIM {:.3}, matches direct computation: {ok}",
        report.summary.mean_psnr.unwrap_or(f64::NAN),
        report.summary.mean_ssim.unwrap_or(f64::NAN)
    );
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("gradient correctness", gradient_correctness),
        ("operator oracle equivalence", oracle_equivalence),
        ("identity/average kernel cases", identity_and_average),
        ("SSIM and PSNR oracles", ssim_psnr_oracles),
        ("overfit sanity", overfit),
        ("augmentation distribution", augmentation_distribution),
        ("jump-cut detector", jump_cuts),
        ("end-to-end CLI smoke", end_to_end),
        (
            "benchmark reproduction (baseline machinery)",
            benchmark_reproduction,
        ),
    ];
    // optional substring filters: `cargo test --test acceptance -- jump`
    let filters: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let mut failed = 0;
    for (name, f) in criteria {
        if !filters.is_empty() && !filters.iter().any(|p| name.contains(p.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default())
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(d) => println!("PASS  {name}: {d} [{secs:.1} s]"),
            Err(d) => {
                failed += 1;
                println!("FAIL  {name}: {d} [{secs:.1} s]");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
