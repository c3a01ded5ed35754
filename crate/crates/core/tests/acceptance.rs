//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any
//! failure.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rspace::augmentation::{
    control_grid_sample, dense_displacement, elastic_deform, translate_patch, DeformConfig, TranslateConfig,
};
use rspace::autoencoders::{
    kl_divergence, loss_grad_check, sliced_wasserstein_sq, AeModel, ArchConfig, Variant, VariantParams,
};
use rspace::experiment::{run_all, ExperimentConfig, ExperimentReport, EXPERIMENTS};
use rspace::nn::{LayerSpec, Sequential, Tensor};
use rspace::rspace_eval::{calinski_harabasz, evaluate_rspace, max_weight_assignment, precision, PointSet};
use rspace::seed;
use rspace::volume_data::{generate_phantom, sample_reference_patches, Patch, PhantomConfig};

type Verdict = (bool, String);

fn shipped_config() -> ExperimentConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.toml");
    ExperimentConfig::load(path).expect("shipped config loads")
}

fn signed_input(shape: &[usize], s: u64) -> Tensor<f64> {
    let mut rng = seed::rng(s);
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.gen_range(0.1..1.0);
            if rng.gen() {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn gradients() -> Verdict {
    let start = Instant::now();
    let conv = LayerSpec::Conv3d {
        in_channels: 2,
        out_channels: 3,
        kernel: 3,
        stride: 2,
        padding: 1,
    };
    let convt = LayerSpec::Conv3dTransposed {
        in_channels: 2,
        out_channels: 3,
        kernel: 3,
        stride: 2,
        padding: 1,
        output_padding: 1,
    };
    let layers: Vec<(&str, Vec<usize>, Vec<LayerSpec>)> = vec![
        ("conv3d", vec![2, 5, 6, 7], vec![conv]),
        ("conv3d_transposed", vec![2, 3, 4, 3], vec![convt]),
        (
            "dense",
            vec![12],
            vec![LayerSpec::Dense {
                in_features: 12,
                out_features: 5,
            }],
        ),
        ("relu", vec![40], vec![LayerSpec::Relu]),
        ("flatten", vec![2, 3, 2, 2], vec![LayerSpec::Flatten]),
        ("reshape", vec![24], vec![LayerSpec::Reshape { shape: vec![4, 3, 2] }]),
        ("pad3d", vec![2, 3, 4, 3], vec![LayerSpec::Pad3d { low: 1, high: 2 }]),
        ("crop3d", vec![2, 5, 6, 5], vec![LayerSpec::Crop3d { low: 1, high: 2 }]),
    ];
    let mut worst_layer = 0.0f64;
    for (i, (name, shape, specs)) in layers.into_iter().enumerate() {
        let net = Sequential::<f64>::new(&shape, specs, i as u64).unwrap();
        let x = signed_input(&shape, 100 + i as u64);
        let mut checks = vec![net.input_grad_check(&x, 1e-4, i as u64).unwrap()];
        if net.n_params() > 0 {
            checks.push(net.grad_check(&x, 1e-4, i as u64).unwrap());
        }
        for g in checks {
            if g.checked == 0 {
                return (false, format!("{name}: no coordinate compared"));
            }
            worst_layer = worst_layer.max(g.max_rel_error);
        }
    }
    let arch = ArchConfig {
        patch_side: 6,
        padded_side: 8,
        channels: vec![2, 3],
        latent_dim: 4,
    };
    let mut rng = seed::rng(7);
    let patches: Vec<Patch> = (0..4)
        .map(|_| Patch::new(6, (0..216).map(|_| rng.gen::<f32>()).collect()).unwrap())
        .collect();
    let batch: Vec<&Patch> = patches.iter().collect();
    let weights = VariantParams {
        beta: 0.5,
        lambda: 2.0,
        n_projections: 7,
        prior_radius: 1.0,
    };
    let mut worst_loss = 0.0f64;
    for v in Variant::ALL {
        let model = AeModel::<f64>::new(v, arch.clone(), weights, 13).unwrap();
        let g = loss_grad_check(&model, &batch, 1e-4, 3).unwrap();
        if g.checked < 100 {
            return (false, format!("{v}: only {} coordinates compared", g.checked));
        }
        worst_loss = worst_loss.max(g.max_rel_error);
    }
    let secs = start.elapsed().as_secs_f64();
    (
        worst_layer < 1e-5 && worst_loss < 1e-4 && secs < 60.0,
        format!(
            "layers max rel err {worst_layer:.2e} (< 1e-5), losses {worst_loss:.2e} (< 1e-4), {secs:.1} s (< 60 s)"
        ),
    )
}

fn sliced_wasserstein_oracle() -> Verdict {
    let mut rng = seed::rng(21);
    let mut worst = 0.0f64;
    for i in 0..100u64 {
        let a: Vec<f64> = (0..16).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let b: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..5.0)).collect();
        let l = rng.gen_range(1..=20);
        let got = sliced_wasserstein_sq(
            &a.iter().map(|&v| vec![v]).collect::<Vec<_>>(),
            &b.iter().map(|&v| vec![v]).collect::<Vec<_>>(),
            l,
            i,
        )
        .unwrap();
        let (mut sa, mut sb) = (a.clone(), b.clone());
        sa.sort_by(f64::total_cmp);
        sb.sort_by(f64::total_cmp);
        let exact = sa.iter().zip(&sb).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / 16.0;
        worst = worst.max((got - exact).abs());
    }
    (
        worst <= 1e-9,
        format!("100 pairs, max |SW2 - exact W2^2| = {worst:.2e} (<= 1e-9)"),
    )
}

/// CH through pairwise distances: W_j = sum_{i,i' in j} |x_i - x_i'|^2 / (2 n_j)
/// and B = T - W with T the same sum over all points.
fn ch_pairwise(points: &[Vec<f64>], labels: &[usize], k: usize) -> f64 {
    let n = points.len();
    let d2 = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    let mut total = 0.0;
    let mut within = vec![0.0; k];
    let mut counts = vec![0usize; k];
    for i in 0..n {
        counts[labels[i]] += 1;
        for j in 0..n {
            let d = d2(&points[i], &points[j]);
            total += d;
            if labels[i] == labels[j] {
                within[labels[i]] += d;
            }
        }
    }
    let w: f64 = (0..k).map(|j| within[j] / (2.0 * counts[j] as f64)).sum();
    let t = total / (2.0 * n as f64);
    ((t - w) / (k - 1) as f64) / (w / (n - k) as f64)
}

fn ch_oracle() -> Verdict {
    let mut rng = seed::rng(33);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let k = rng.gen_range(2..=8);
        let n = rng.gen_range(k + 1..=150);
        let d = rng.gen_range(1..=10);
        let points: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..d).map(|_| rng.gen_range(-5.0..5.0)).collect())
            .collect();
        let mut labels: Vec<usize> = (0..n).map(|i| if i < k { i } else { rng.gen_range(0..k) }).collect();
        labels.shuffle(&mut rng);
        let set = PointSet::new(d, points.iter().flatten().copied().collect(), labels.clone()).unwrap();
        let got = calinski_harabasz(&set, &labels).unwrap();
        let want = ch_pairwise(&points, &labels, k);
        worst = worst.max((got - want).abs() / want.abs());
    }
    let fixture = PointSet::new(1, vec![0.0, 1.0, 10.0, 11.0], vec![0, 0, 1, 1]).unwrap();
    let ch200 = calinski_harabasz(&fixture, &fixture.labels).unwrap();
    (
        worst <= 1e-9 && ch200 == 200.0,
        format!("100 clouds, max rel diff {worst:.2e} (<= 1e-9); fixture CH = {ch200}"),
    )
}

fn best_by_permutation(table: &[Vec<usize>]) -> usize {
    fn go(table: &[Vec<usize>], row: usize, used: &mut Vec<bool>) -> usize {
        if row == table.len() {
            return 0;
        }
        let mut best = 0;
        for c in 0..table.len() {
            if !used[c] {
                used[c] = true;
                best = best.max(table[row][c] + go(table, row + 1, used));
                used[c] = false;
            }
        }
        best
    }
    go(table, 0, &mut vec![false; table.len()])
}

fn precision_oracle() -> Verdict {
    let mut rng = seed::rng(44);
    let mut mismatches = 0;
    for _ in 0..100 {
        let k = rng.gen_range(2..=8);
        let table: Vec<Vec<usize>> = (0..k).map(|_| (0..k).map(|_| rng.gen_range(0..20)).collect()).collect();
        let assignment = max_weight_assignment(&table);
        let mut cols = assignment.clone();
        cols.sort_unstable();
        let hungarian: usize = assignment.iter().enumerate().map(|(r, &c)| table[r][c]).sum();
        let exhaustive = best_by_permutation(&table);
        // expand the table into label vectors and go through `precision`
        let (mut pred, mut truth) = (Vec::new(), Vec::new());
        for (r, row) in table.iter().enumerate() {
            for (c, &m) in row.iter().enumerate() {
                pred.extend(std::iter::repeat_n(r, m));
                truth.extend(std::iter::repeat_n(c, m));
            }
        }
        let p = precision(&pred, &truth, k).unwrap();
        let expected = exhaustive as f64 / truth.len() as f64;
        if cols != (0..k).collect::<Vec<_>>() || hungarian != exhaustive || (p - expected).abs() > 1e-12 {
            mismatches += 1;
        }
    }
    (
        mismatches == 0,
        format!("100 tables with k <= 8, {mismatches} disagreements with exhaustive search"),
    )
}

fn augmentation_identities() -> Verdict {
    let seq = generate_phantom(
        &PhantomConfig {
            n_frames: 3,
            ..Default::default()
        },
        5,
    )
    .unwrap();
    let refs = sample_reference_patches(&seq, 4, 30, 10, 6).unwrap();
    let mut deform_ok = true;
    let mut translate_ok = true;
    for (i, r) in refs.iter().enumerate() {
        for order in [1, 3] {
            let cfg = DeformConfig {
                sigma: 0.0,
                spline_order: order,
                ..Default::default()
            };
            deform_ok &= elastic_deform(r, &cfg, i as u64).unwrap() == *r;
        }
        let (t, _) = translate_patch(&seq, r, &TranslateConfig { max_shift: 0 }, i as u64).unwrap();
        translate_ok &= t == *r;
    }
    let mut worst = 0.0f64;
    for s in 0..5u64 {
        let g = control_grid_sample(5, 1.0, s).unwrap();
        for order in [1, 3] {
            // side 29 puts the control points on voxels 0, 7, .., 28
            let f = dense_displacement(&g, 29, order).unwrap();
            for iz in 0..5 {
                for iy in 0..5 {
                    for ix in 0..5 {
                        let v = f.at(7 * iz, 7 * iy, 7 * ix);
                        for c in 0..3 {
                            worst = worst.max((v[c] - g.component(c)[(iz * 5 + iy) * 5 + ix]).abs());
                        }
                    }
                }
            }
        }
    }
    (
        deform_ok && translate_ok && worst <= 1e-5,
        format!(
            "sigma=0 identity {deform_ok}, max_shift=0 identity {translate_ok}, control-value error {worst:.2e} (<= 1e-5)"
        ),
    )
}

fn clustering_sanity() -> Verdict {
    let (d, k, per, std) = (128, 10, 50, 1.0);
    let mut lines = Vec::new();
    let mut ok = true;
    for s in 0..5u64 {
        let mut rng = seed::rng(700 + s);
        // centers on distinct axes, pairwise 100 std apart
        let offset = 100.0 * std / 2f64.sqrt();
        let centers: Vec<Vec<f64>> = (0..k)
            .map(|j| (0..d).map(|c| if c == j { offset } else { 0.0 }).collect())
            .collect();
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for (j, c) in centers.iter().enumerate() {
            for _ in 0..per {
                data.extend(c.iter().map(|&x| {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    x + std * e
                }));
                labels.push(j);
            }
        }
        let min_sep = (0..k)
            .flat_map(|a| (a + 1..k).map(move |b| (a, b)))
            .map(|(a, b)| {
                centers[a]
                    .iter()
                    .zip(&centers[b])
                    .map(|(x, y)| (x - y).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .fold(f64::INFINITY, f64::min);
        let points = PointSet::new(d, data, labels).unwrap();
        let m = evaluate_rspace(&points, k, s).unwrap();
        ok &= min_sep >= 20.0 * std && m.precision == 1.0 && m.ch_ground_truth > 1e3;
        lines.push(format!(
            "seed {s}: separation {:.1} std, precision {} CH {:.0}",
            min_sep / std,
            m.precision,
            m.ch_ground_truth
        ));
    }
    (ok, lines.join("; "))
}

fn kl_monte_carlo() -> Verdict {
    let d = 128;
    let n = 100_000;
    let mut rng = seed::rng(55);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let mu: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let logvar: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let sd: Vec<f64> = logvar.iter().map(|lv| (0.5 * lv).exp()).collect();
        // E_q[log q(z) - log p(z)] with z = mu + sd * eps
        let mut acc = 0.0;
        for _ in 0..n {
            let mut log_ratio = 0.0;
            for k in 0..d {
                let e: f64 = StandardNormal.sample(&mut rng);
                let z = mu[k] + sd[k] * e;
                log_ratio += -0.5 * e * e - 0.5 * logvar[k] + 0.5 * z * z;
            }
            acc += log_ratio;
        }
        let mc = acc / n as f64;
        let closed = kl_divergence(&mu, &logvar);
        worst = worst.max((closed - mc).abs() / mc.abs());
    }
    (
        worst < 0.01,
        format!(
            "20 pairs (d = 128, 1e5 samples), max rel diff {:.3}% (< 1%)",
            100.0 * worst
        ),
    )
}

struct Claims {
    order: bool,
    strong: bool,
    vae_min: bool,
}

fn claims(r: &ExperimentReport) -> Claims {
    let cell = |v, k| r.cell(v, k).expect("cell present");
    let [def, trans] = EXPERIMENTS;
    let order = Variant::ALL.iter().all(|&v| {
        cell(v, def).precision >= cell(v, trans).precision
            && cell(v, def).ch_ground_truth > cell(v, trans).ch_ground_truth
    });
    let strong = cell(Variant::Cae, def).precision >= 0.9 && cell(Variant::Swae, def).precision >= 0.9;
    let vae = cell(Variant::Vae, def).precision;
    let vae_min = vae <= cell(Variant::Cae, def).precision && vae <= cell(Variant::Swae, def).precision;
    Claims { order, strong, vae_min }
}

fn run_dir(root: &Path, name: &str) -> PathBuf {
    root.join(name)
}

fn table1_replication(root: &Path) -> Vec<(String, Verdict)> {
    let base = shipped_config();
    let mut order = 0;
    let mut strong = 0;
    let mut vae_min = 0;
    let mut max_wall = 0.0f64;
    let mut failures = Vec::new();
    for s in 1..=5u64 {
        let cfg = ExperimentConfig {
            master_seed: s,
            ..base.clone()
        };
        match run_all(&cfg, &run_dir(root, &format!("seed{s}"))) {
            Ok(r) => {
                let c = claims(&r);
                order += c.order as usize;
                strong += c.strong as usize;
                vae_min += c.vae_min as usize;
                max_wall = max_wall.max(r.wall_time_s);
                let cells: Vec<String> = Variant::ALL
                    .iter()
                    .map(|&v| {
                        let [d, t] = EXPERIMENTS.map(|k| r.cell(v, k).unwrap());
                        format!(
                            "{v} {:.3}/{:.3} ch {:.0}/{:.0}",
                            d.precision, t.precision, d.ch_ground_truth, t.ch_ground_truth
                        )
                    })
                    .collect();
                println!("        master seed {s}: {} ({:.0} s)", cells.join(", "), r.wall_time_s);
            }
            Err(e) => failures.push(format!("seed {s}: {e}")),
        }
    }
    let within_budget = failures.is_empty() && max_wall <= 45.0 * 60.0;
    vec![
        (
            "table1: deformation >= translation (precision) and > (CH) for every variant".into(),
            (
                order >= 4 && failures.is_empty(),
                format!("{order}/5 seeds {}", failures.join("; ")),
            ),
        ),
        (
            "table1: cae and swae deformation precision >= 0.9".into(),
            (strong >= 4 && failures.is_empty(), format!("{strong}/5 seeds")),
        ),
        (
            "table1: vae deformation precision is the minimum".into(),
            (
                vae_min >= 4 && failures.is_empty(),
                format!("{vae_min}/5 seeds (ties count as minimum)"),
            ),
        ),
        (
            "table1: desk-scale budget".into(),
            (
                within_budget && base.pool.n == 2000 && Variant::ALL.iter().all(|&v| base.train.get(v).epochs <= 50),
                format!("pool {}, max {:.0} s per run (<= 2700 s)", base.pool.n, max_wall),
            ),
        ),
    ]
}

fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(dir).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn determinism(root: &Path) -> Verdict {
    let cfg = ExperimentConfig {
        master_seed: 1,
        ..shipped_config()
    };
    let first = run_dir(root, "seed1");
    let again = run_dir(root, "seed1-again");
    let (a, b) = match (ExperimentReport::read(first.join("report.json")), run_all(&cfg, &again)) {
        (Ok(a), Ok(b)) => (a, b),
        (Err(e), _) | (_, Err(e)) => return (false, e.to_string()),
    };
    let files = files_under(&first);
    let mut differing = Vec::new();
    for f in &files {
        if f.as_os_str() == "report.json" {
            continue;
        }
        if std::fs::read(first.join(f)).ok() != std::fs::read(again.join(f)).ok() {
            differing.push(f.display().to_string());
        }
    }
    let same_report = a.timeless_json() == b.timeless_json();
    (
        same_report && differing.is_empty() && files == files_under(&again),
        format!(
            "report identical without wall time: {same_report}; {} other artifacts, differing: {:?}",
            files.len() - 1,
            differing
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
        (false, format!("panicked: {msg}"))
    })
}

fn main() {
    let tmp = tempfile::tempdir().expect("temporary directory");
    let mut results: Vec<(String, Verdict)> = Vec::new();
    let mut report = |name: &str, v: Verdict, secs: f64| {
        println!("{} {name}: {} [{secs:.1} s]", if v.0 { "PASS" } else { "FAIL" }, v.1);
        results.push((name.to_string(), v));
    };
    let simple: [(&str, fn() -> Verdict); 7] = [
        ("gradient correctness", gradients),
        ("sliced-Wasserstein oracle", sliced_wasserstein_oracle),
        ("Calinski-Harabasz oracle", ch_oracle),
        ("precision oracle", precision_oracle),
        ("augmentation identities", augmentation_identities),
        ("clustering sanity", clustering_sanity),
        ("vae KL vs Monte Carlo", kl_monte_carlo),
    ];
    for (name, f) in simple {
        let t = Instant::now();
        let v = guarded(f);
        report(name, v, t.elapsed().as_secs_f64());
    }
    let t = Instant::now();
    let table = catch_unwind(AssertUnwindSafe(|| table1_replication(tmp.path())))
        .unwrap_or_else(|_| vec![("table1 replication".into(), (false, "panicked".into()))]);
    let secs = t.elapsed().as_secs_f64();
    for (name, v) in table {
        report(&name, v, secs);
    }
    let t = Instant::now();
    let v = guarded(|| determinism(tmp.path()));
    report("run-all determinism", v, t.elapsed().as_secs_f64());

    let passed = results.iter().filter(|r| r.1 .0).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
