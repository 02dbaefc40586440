//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! `ACCEPTANCE_ONLY=1,5,9` restricts the run to the listed criteria.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_pcg::Pcg64;
use shapeseg::losses::{
    bce_loss, dice_loss, l1_loss, laplacian_filter, laplacian_loss, total_loss, LossConfig, LossWeights,
};
use shapeseg::mesh::{marching_cubes, mask_surface, mesh_topology_report};
use shapeseg::metrics::evaluate_pair;
use shapeseg::model::{batch_loss, init_params, predict_slices, train, NetConfig, TrainConfig, TrainSample};
use shapeseg::phantom::{analytic_sphere_sdf, gen_case, PhantomSpec};
use shapeseg::sdf::{edt_squared, normalized_sdf, SdfOptions};
use shapeseg::volgrid::extract_slice;
use shapeseg::{SliceField, VolumeGrid};

const C1_MASKS: u64 = 100;
const C1_SIDE: usize = 64;
const C1_MAX_SECS: f64 = 10.0;

const C2_CASES: usize = 50;

const C3_HAND_TOL: f64 = 1e-9;
const C3_LOSS_FD_TOL: f64 = 1e-4;
const C3_NET_FD_TOL: f64 = 1e-3;
const C3_FD_STEP: f64 = 1e-6;
const C3_MAX_SECS: f64 = 60.0;

const C4_FIELDS: usize = 20;
const C4_TOL: f64 = 1e-12;

const C5_RADIUS: f64 = 20.0;
const C5_GRID: usize = 64;
const C5_RADIAL_TOL: f64 = 0.5;
const C5_MAX_SECS: f64 = 10.0;

const C6_PAIRS: u64 = 500;
const C6_SIDE: usize = 16;
const C6_TOL: f64 = 1e-9;
const C6_MAX_SECS: f64 = 120.0;

const C7_SLICES: usize = 20;
const C7_MAX_EPOCHS: usize = 200;
const C7_DICE: f64 = 0.95;
const C7_MAX_SECS: f64 = 600.0;

const C8_SEEDS: [u64; 3] = [0, 1, 2];
const C8_EPOCHS: &str = "15";
const C8_DICE_SLACK: f64 = 0.02;
const C8_MAX_SECS: f64 = 45.0 * 60.0;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn secs(t: Instant) -> f64 {
    t.elapsed().as_secs_f64()
}

fn real(w: usize, h: usize, v: Vec<f64>) -> SliceField {
    SliceField::real(w, h, v).unwrap()
}

// 1. distance transform

fn brute_edt(mask: &SliceField, label: f64) -> Vec<f64> {
    let (w, h) = (mask.width() as i64, mask.height() as i64);
    let sites: Vec<(i64, i64)> = (0..h)
        .flat_map(|y| (0..w).map(move |x| (x, y)))
        .filter(|&(x, y)| mask.get(x as usize, y as usize) == label)
        .collect();
    (0..h)
        .flat_map(|y| (0..w).map(move |x| (x, y)))
        .map(|(x, y)| {
            sites
                .iter()
                .map(|&(sx, sy)| ((x - sx).pow(2) + (y - sy).pow(2)) as f64)
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

fn criterion_1() -> Outcome {
    let t = Instant::now();
    let mut mismatched = 0;
    for seed in 0..C1_MASKS {
        let mut rng = Pcg64::seed_from_u64(seed);
        let density = rng.random_range(0.02..0.98);
        let mask = SliceField::binary_from_fn(C1_SIDE, C1_SIDE, |_, _| rng.random::<f64>() < density).unwrap();
        let ok = match edt_squared(&mask, 1) {
            Ok(d) => d.values() == brute_edt(&mask, 1.0).as_slice(),
            Err(_) => mask.values().iter().all(|&v| v == 0.0),
        };
        mismatched += usize::from(!ok);
    }
    let s = secs(t);
    outcome(
        mismatched == 0 && s < C1_MAX_SECS,
        format!("{C1_MASKS} masks, {mismatched} mismatched, {s:.2} s (limit {C1_MAX_SECS} s)"),
    )
}

// 2. signed distance contract

fn criterion_2() -> Outcome {
    let spec = PhantomSpec {
        count: C2_CASES,
        ..PhantomSpec::default()
    };
    let (mut regular, mut degenerate, mut bad) = (0, 0, 0);
    for i in 0..C2_CASES {
        let (_, mask) = gen_case(&spec, i).unwrap();
        for z in 0..spec.slices {
            let m = extract_slice(&mask, z).unwrap();
            let s = normalized_sdf(&m, SdfOptions::default()).unwrap();
            let fg = m.values().iter().filter(|&&v| v == 1.0).count();
            let ok = if fg == 0 || fg == m.values().len() {
                degenerate += 1;
                let want = if fg == 0 { 1.0 } else { -1.0 };
                s.values().iter().all(|&v| v == want)
            } else {
                regular += 1;
                let signs = m.values().iter().zip(s.values()).all(|(&mv, &sv)| (mv == 1.0) == (sv < 0.0));
                let max = s.values().iter().fold(0.0f64, |a, v| a.max(v.abs()));
                signs && max == 1.0
            };
            bad += usize::from(!ok);
        }
    }
    outcome(
        bad == 0 && regular > 0 && degenerate > 0,
        format!("{C2_CASES} cases: {regular} regular and {degenerate} degenerate slices, {bad} violations"),
    )
}

// 3. losses and gradients

fn central_difference(pred: &SliceField, f: impl Fn(&SliceField) -> f64) -> Vec<f64> {
    (0..pred.values().len())
        .map(|i| {
            let mut up = pred.values().to_vec();
            let mut dn = pred.values().to_vec();
            up[i] += C3_FD_STEP;
            dn[i] -= C3_FD_STEP;
            (f(&real(pred.width(), pred.height(), up)) - f(&real(pred.width(), pred.height(), dn))) / (2.0 * C3_FD_STEP)
        })
        .collect()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

fn hand_examples() -> Vec<(&'static str, f64, f64)> {
    let cfg = LossConfig::default();
    let eps = cfg.epsilon;
    let ones = SliceField::binary(2, 2, vec![1.0; 4]).unwrap();
    let bce = bce_loss(&real(2, 2, vec![0.5; 4]), &ones, &cfg).unwrap().0;

    let truth = SliceField::binary(4, 1, vec![1.0, 1.0, 0.0, 0.0]).unwrap();
    let dice = dice_loss(&real(4, 1, vec![1.0, 0.0, 0.0, 0.0]), &truth, &cfg).unwrap().0;

    let t = real(3, 2, vec![0.1, -0.4, 0.9, 0.0, 0.3, -1.0]);
    let l1 = l1_loss(&real(3, 2, t.values().iter().map(|v| v + 0.25).collect()), &t, &cfg).unwrap().0;

    let mut delta = vec![0.0; 16];
    delta[5] = 1.0;
    let delta = real(4, 4, delta);
    let filt = laplacian_filter(&delta).unwrap();
    let filt_err = filt.values().iter().zip([-4.0, 1.0, 1.0, 0.0]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let lap = laplacian_loss(&delta, &real(4, 4, vec![0.0; 16])).unwrap().0;

    vec![
        ("bce", bce, std::f64::consts::LN_2),
        ("dice", dice, 1.0 - (2.0 + eps) / (3.0 + eps)),
        ("l1", l1, 0.25),
        ("laplacian filter", filt_err, 0.0),
        ("laplacian", lap, 1.5),
    ]
}

fn loss_fd_error() -> f64 {
    let mut rng = Pcg64::seed_from_u64(31);
    let mut worst = 0.0f64;
    let field = |rng: &mut Pcg64, lo: f64, hi: f64| real(8, 8, (0..64).map(|_| rng.random_range(lo..hi)).collect());
    for _ in 0..5 {
        let cfg = LossConfig {
            weights: LossWeights::new(0.7, 1.3, 0.5, 2.0),
            ..LossConfig::default()
        };
        let p = field(&mut rng, 0.05, 0.95);
        let y = SliceField::binary_from_fn(8, 8, |_, _| rng.random::<bool>()).unwrap();
        let a = field(&mut rng, -1.0, 1.0);
        let b = field(&mut rng, -1.0, 1.0);
        let checks = [
            rel_err(bce_loss(&p, &y, &cfg).unwrap().1.values(), &central_difference(&p, |q| bce_loss(q, &y, &cfg).unwrap().0)),
            rel_err(dice_loss(&p, &y, &cfg).unwrap().1.values(), &central_difference(&p, |q| dice_loss(q, &y, &cfg).unwrap().0)),
            rel_err(l1_loss(&a, &b, &cfg).unwrap().1.values(), &central_difference(&a, |q| l1_loss(q, &b, &cfg).unwrap().0)),
            rel_err(laplacian_loss(&a, &b).unwrap().1.values(), &central_difference(&a, |q| laplacian_loss(q, &b).unwrap().0)),
        ];
        let tot = total_loss(&p, &y, &a, &b, &cfg).unwrap();
        let seg = central_difference(&p, |q| total_loss(q, &y, &a, &b, &cfg).unwrap().breakdown.total);
        let sdf = central_difference(&a, |q| total_loss(&p, &y, q, &b, &cfg).unwrap().breakdown.total);
        for e in checks.into_iter().chain([rel_err(&tot.seg_grad, &seg), rel_err(&tot.sdf_grad, &sdf)]) {
            worst = worst.max(e);
        }
    }
    worst
}

fn blob_sample(rng: &mut Pcg64, w: usize, h: usize) -> TrainSample {
    let (cx, cy) = (rng.random_range(0.3..0.7) * w as f64, rng.random_range(0.3..0.7) * h as f64);
    let r = rng.random_range(0.15..0.3) * w.min(h) as f64;
    let mask = SliceField::binary_from_fn(w, h, |x, y| (x as f64 - cx).hypot(y as f64 - cy) <= r).unwrap();
    let sdf = normalized_sdf(&mask, SdfOptions::default()).unwrap();
    let image: Vec<f64> = mask.values().iter().map(|v| 0.2 + 0.6 * v + rng.random_range(-0.05..0.05)).collect();
    TrainSample::new(&real(w, h, image), &mask, &sdf).unwrap()
}

fn network_fd_error() -> f64 {
    let net = NetConfig {
        depth: 1,
        base_channels: 2,
        input_width: 16,
        input_height: 16,
        seed: 4,
    };
    let mut rng = Pcg64::seed_from_u64(8);
    let samples: Vec<TrainSample> = (0..2).map(|_| blob_sample(&mut rng, 16, 16)).collect();
    let batch: Vec<&TrainSample> = samples.iter().collect();
    let cfg = LossConfig::default();
    let mut params = init_params(&net).unwrap();
    for i in 0..params.param_count() {
        params.set_flat(i, params.get_flat(i) + 0.01);
    }
    let (_, grads) = batch_loss(&params, &batch, &cfg).unwrap();
    let mut fd = Vec::new();
    let mut an = Vec::new();
    for i in 0..params.param_count() {
        let v = params.get_flat(i);
        let mut p = params.clone();
        p.set_flat(i, v + C3_FD_STEP);
        let up = batch_loss(&p, &batch, &cfg).unwrap().0.total;
        p.set_flat(i, v - C3_FD_STEP);
        let dn = batch_loss(&p, &batch, &cfg).unwrap().0.total;
        fd.push((up - dn) / (2.0 * C3_FD_STEP));
        an.push(grads.get_flat(i));
    }
    rel_err(&an, &fd)
}

fn criterion_3() -> Outcome {
    let t = Instant::now();
    let hand = hand_examples();
    let hand_ok = hand.iter().all(|(_, got, want)| (got - want).abs() <= C3_HAND_TOL);
    let bad: Vec<&str> = hand.iter().filter(|(_, g, w)| (g - w).abs() > C3_HAND_TOL).map(|h| h.0).collect();
    let loss_err = loss_fd_error();
    let net_err = network_fd_error();
    let s = secs(t);
    outcome(
        hand_ok && loss_err < C3_LOSS_FD_TOL && net_err < C3_NET_FD_TOL && s < C3_MAX_SECS,
        format!(
            "hand examples {} (off: {bad:?}), loss fd rel err {loss_err:.2e} (< {C3_LOSS_FD_TOL:e}), \
             network fd rel err {net_err:.2e} (< {C3_NET_FD_TOL:e}), {s:.1} s",
            hand.len()
        ),
    )
}

// 4. Laplacian nullspace

fn criterion_4() -> Outcome {
    let mut rng = Pcg64::seed_from_u64(404);
    let mut worst = 0.0f64;
    for _ in 0..C4_FIELDS {
        let (w, h) = (rng.random_range(3..20), rng.random_range(3..20));
        let t: Vec<f64> = (0..w * h).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (a, b, c) = (rng.random_range(-2.0..2.0), rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1));
        let p: Vec<f64> = (0..w * h).map(|i| t[i] + a + b * (i % w) as f64 + c * (i / w) as f64).collect();
        worst = worst.max(laplacian_loss(&real(w, h, p), &real(w, h, t)).unwrap().0);
    }
    outcome(worst <= C4_TOL, format!("{C4_FIELDS} affine offsets, max loss {worst:.2e} (<= {C4_TOL:e})"))
}

// 5. marching cubes

fn criterion_5() -> Outcome {
    let t = Instant::now();
    let voxel = VolumeGrid::mask_from_fn([3, 3, 3], [1.0; 3], [0.0; 3], |x, y, z| (x, y, z) == (1, 1, 1)).unwrap();
    let m = mask_surface(&voxel, 0.5).unwrap();
    let r = mesh_topology_report(&m);
    let voxel_ok = (r.vertices, r.triangles, r.euler_characteristic) == (6, 8, 2);

    let c = [31.5, 32.25, 31.75];
    let field = analytic_sphere_sdf([C5_GRID; 3], [1.0; 3], c, C5_RADIUS).unwrap();
    let sphere = marching_cubes(&field, 0.0).unwrap();
    let topo = mesh_topology_report(&sphere);
    let err = sphere
        .vertices
        .iter()
        .map(|v| (((v[0] - c[0]).powi(2) + (v[1] - c[1]).powi(2) + (v[2] - c[2]).powi(2)).sqrt() - C5_RADIUS).abs())
        .fold(0.0, f64::max);
    let closed = topo.boundary_edges == 0 && topo.non_manifold_edges == 0 && !sphere.is_empty();
    let s = secs(t);
    outcome(
        voxel_ok && closed && err <= C5_RADIAL_TOL && s < C5_MAX_SECS,
        format!(
            "voxel V={} F={} chi={}; sphere {} triangles, {} boundary / {} non-manifold edges, \
             max radial error {err:.4} (<= {C5_RADIAL_TOL}), {s:.2} s",
            r.vertices, r.triangles, r.euler_characteristic, topo.triangles, topo.boundary_edges, topo.non_manifold_edges
        ),
    )
}

// 6. metrics against brute force

struct Brute {
    vol_dice: f64,
    hd: f64,
    hd95: f64,
    assd: f64,
    surf_dice: f64,
}

fn brute_surface(m: &[u8], n: usize, spacing: [f64; 3]) -> Vec<[f64; 3]> {
    let at = |x: i64, y: i64, z: i64| {
        let inside = (0..n as i64).contains(&x) && (0..n as i64).contains(&y) && (0..n as i64).contains(&z);
        inside && m[x as usize + n * (y as usize + n * z as usize)] == 1
    };
    let mut out = Vec::new();
    for z in 0..n as i64 {
        for y in 0..n as i64 {
            for x in 0..n as i64 {
                let open = [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)]
                    .iter()
                    .any(|&(dx, dy, dz)| !at(x + dx, y + dy, z + dz));
                if at(x, y, z) && open {
                    out.push([x as f64 * spacing[0], y as f64 * spacing[1], z as f64 * spacing[2]]);
                }
            }
        }
    }
    out
}

fn brute_metrics(a: &[u8], b: &[u8], n: usize, spacing: [f64; 3], tol: f64) -> Brute {
    let inter = a.iter().zip(b).filter(|(x, y)| **x == 1 && **y == 1).count();
    let total = a.iter().chain(b).filter(|v| **v == 1).count();
    let (sa, sb) = (brute_surface(a, n, spacing), brute_surface(b, n, spacing));
    let near = |p: &[f64; 3], set: &[[f64; 3]]| {
        set.iter()
            .map(|q| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt())
            .fold(f64::INFINITY, f64::min)
    };
    let mut d: Vec<f64> = sa.iter().map(|p| near(p, &sb)).chain(sb.iter().map(|p| near(p, &sa))).collect();
    d.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let k = d.len() - 1;
    let pos = 0.95 * k as f64;
    let (lo, frac) = (pos.floor() as usize, pos - pos.floor());
    let hd95 = if lo == k { d[k] } else { d[lo] + frac * (d[lo + 1] - d[lo]) };
    Brute {
        vol_dice: 2.0 * inter as f64 / total as f64,
        hd: d[k],
        hd95,
        assd: d.iter().sum::<f64>() / d.len() as f64,
        surf_dice: d.iter().filter(|&&v| v <= tol).count() as f64 / d.len() as f64,
    }
}

fn shifted_cubes() -> (bool, String) {
    let cube = |shift: usize| {
        VolumeGrid::mask_from_fn([16; 3], [1.0; 3], [0.0; 3], |x, y, z| {
            (3 + shift..11 + shift).contains(&x) && (3..11).contains(&y) && (3..11).contains(&z)
        })
        .unwrap()
    };
    let mut ok = true;
    let mut notes = Vec::new();
    for shift in 1..=4 {
        let r = evaluate_pair(&cube(shift), &cube(0), 1.0, "").unwrap();
        ok &= r.hd == Some(shift as f64);
        if shift == 1 {
            ok &= r.surf_dice == Some(1.0);
        }
        notes.push(format!("shift {shift}: hd {:?}", r.hd.unwrap()));
    }
    (ok, notes.join(", "))
}

fn criterion_6() -> Outcome {
    let t = Instant::now();
    let n = C6_SIDE;
    let mut worst = 0.0f64;
    let mut undefined = 0;
    for seed in 0..C6_PAIRS {
        let mut rng = Pcg64::seed_from_u64(6000 + seed);
        let spacing = if seed % 2 == 0 {
            [1.0; 3]
        } else {
            [rng.random_range(0.5..2.0), rng.random_range(0.5..2.0), rng.random_range(0.5..2.0)]
        };
        let (da, db) = (rng.random_range(0.05..0.95), rng.random_range(0.05..0.95));
        let a: Vec<u8> = (0..n * n * n).map(|_| u8::from(rng.random::<f64>() < da)).collect();
        let b: Vec<u8> = (0..n * n * n).map(|_| u8::from(rng.random::<f64>() < db)).collect();
        if !a.contains(&1) || !b.contains(&1) {
            undefined += 1;
            continue;
        }
        let ga = VolumeGrid::new_mask([n; 3], spacing, [0.0; 3], a.clone()).unwrap();
        let gb = VolumeGrid::new_mask([n; 3], spacing, [0.0; 3], b.clone()).unwrap();
        let r = evaluate_pair(&ga, &gb, 1.0, "").unwrap();
        let o = brute_metrics(&a, &b, n, spacing, 1.0);
        for (got, want) in [
            (r.vol_dice, o.vol_dice),
            (r.hd.unwrap(), o.hd),
            (r.hd95.unwrap(), o.hd95),
            (r.assd.unwrap(), o.assd),
            (r.surf_dice.unwrap(), o.surf_dice),
        ] {
            worst = worst.max((got - want).abs());
        }
    }
    let (cubes_ok, cube_notes) = shifted_cubes();
    let s = secs(t);
    outcome(
        worst <= C6_TOL && cubes_ok && undefined == 0 && s < C6_MAX_SECS,
        format!("{C6_PAIRS} pairs, max abs deviation {worst:.2e} (<= {C6_TOL:e}); {cube_notes}; {s:.1} s"),
    )
}

// 7. overfit

fn criterion_7() -> Outcome {
    let spec = PhantomSpec {
        count: 4,
        seed: 7,
        ..PhantomSpec::default()
    };
    let mut samples = Vec::new();
    'cases: for i in 0..spec.count {
        let (img, mask) = gen_case(&spec, i).unwrap();
        for z in (12..52).step_by(8) {
            let m = extract_slice(&mask, z).unwrap();
            let im = real(spec.size, spec.size, extract_slice(&img, z).unwrap().into_values());
            let s = normalized_sdf(&m, SdfOptions::default()).unwrap();
            samples.push(TrainSample::new(&im, &m, &s).unwrap());
            if samples.len() == C7_SLICES {
                break 'cases;
            }
        }
    }
    let net = NetConfig::default();
    let cfg = TrainConfig {
        learning_rate: 1e-3,
        epochs: C7_MAX_EPOCHS,
        batch_size: 8,
        stop_at_val_dice: Some(C7_DICE),
        ..TrainConfig::default()
    };
    let t = Instant::now();
    let (params, report) = train(&samples, &samples, &net, &cfg).unwrap();
    let s = secs(t);

    // recount dice of the returned model from scratch
    let images: Vec<SliceField> = samples.iter().map(|s| real(s.width, s.height, s.image.clone())).collect();
    let preds = predict_slices(&params, &images).unwrap();
    let (mut inter, mut total) = (0usize, 0usize);
    for (p, s) in preds.iter().zip(&samples) {
        for (&q, &y) in p.seg_probs.values().iter().zip(&s.mask) {
            let fg = q > 0.5;
            inter += usize::from(fg && y == 1.0);
            total += usize::from(fg) + usize::from(y == 1.0);
        }
    }
    let dice = 2.0 * inter as f64 / total as f64;
    outcome(
        dice >= C7_DICE && report.epochs.len() <= C7_MAX_EPOCHS && s < C7_MAX_SECS,
        format!(
            "depth {} base {} on {} slices: train dice {dice:.4} (>= {C7_DICE}) after {} epochs, {s:.1} s",
            net.depth,
            net.base_channels,
            samples.len(),
            report.epochs.len()
        ),
    )
}

// 8. trend across ablations, through the command line

fn cli(dir: &Path, args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_shapeseg"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn shapeseg");
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn mean_of(v: &serde_json::Value, metric: &str) -> f64 {
    v["aggregate"][metric]["mean"].as_f64().expect("defined mean")
}

fn criterion_8() -> Outcome {
    let t = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    cli(
        d,
        &[
            "phantom", "--out", "data", "--count", "40", "--size", "32", "--slices", "32", "--seed", "100", "--noise",
            "0.35", "--split", "0.2,0.05,0.75",
        ],
    );
    let mut means: BTreeMap<&str, [f64; 3]> = BTreeMap::new();
    let mut metric_files = Vec::new();
    let mut labels = Vec::new();
    let mut excluded = 0;
    for variant in ["a", "c", "d"] {
        let mut acc = [0.0; 3];
        for seed in C8_SEEDS {
            let tag = format!("{variant}_{seed}");
            let seed = seed.to_string();
            let model = format!("models/{tag}.cfx");
            let pred = format!("pred/{tag}");
            let json = format!("metrics/{tag}.json");
            cli(
                d,
                &[
                    "train", "--data", "data", "--out", &model, "--ablation", variant, "--epochs", C8_EPOCHS, "--lr",
                    "1e-3", "--batch-size", "8", "--seed", &seed,
                ],
            );
            cli(d, &["predict", "--model", &model, "--data", "data", "--split", "test", "--out", &pred]);
            cli(d, &["evaluate", "--pred-dir", &pred, "--data", "data", "--split", "test", "--json", &json]);
            let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join(&json)).unwrap()).unwrap();
            assert_eq!(v["aggregate"]["cases"].as_u64(), Some(30));
            excluded += v["aggregate"]["hd"]["excluded"].as_u64().unwrap();
            acc[0] += mean_of(&v, "vol_dice");
            acc[1] += mean_of(&v, "hd");
            acc[2] += mean_of(&v, "assd");
            metric_files.push(json);
            labels.push(variant.to_string());
        }
        means.insert(variant, acc.map(|x| x / C8_SEEDS.len() as f64));
    }
    let mut args = vec!["report".to_string()];
    for (f, l) in metric_files.iter().zip(&labels) {
        args.extend(["--metrics".into(), f.clone(), "--label".into(), l.clone()]);
    }
    let table = cli(d, &args.iter().map(String::as_str).collect::<Vec<_>>());
    let s = secs(t);
    println!("{table}");
    let (a, dd) = (means["a"], means["d"]);
    let pass = dd[1] <= a[1] && dd[2] <= a[2] && dd[0] >= a[0] - C8_DICE_SLACK && excluded == 0 && s < C8_MAX_SECS;
    let row = |k: &str| format!("{k}: dice {:.4} hd {:.4} assd {:.4}", means[k][0], means[k][1], means[k][2]);
    outcome(
        pass,
        format!(
            "mean over seeds {C8_SEEDS:?} on 30 test cases; {}; {}; {}; {:.1} min (limit {})",
            row("a"),
            row("c"),
            row("d"),
            s / 60.0,
            C8_MAX_SECS / 60.0
        ),
    )
}

// 9. determinism of the whole pipeline

fn pipeline(dir: &Path, jobs: &str) {
    cli(
        dir,
        &["phantom", "--out", "data", "--count", "6", "--size", "24", "--slices", "12", "--seed", "9", "--jobs", jobs],
    );
    cli(dir, &["sdf", "--mask", "data/train/case_000_mask.svol.json", "--out", "sdf/case_000_sdf.svol.json"]);
    cli(
        dir,
        &["train", "--data", "data", "--out", "model/m.cfx", "--epochs", "3", "--seed", "5", "--base-channels", "4"],
    );
    cli(dir, &["predict", "--model", "model/m.cfx", "--data", "data", "--split", "test", "--out", "pred"]);
    cli(dir, &["reconstruct", "--input", "data/test/case_005_mask.svol.json", "--out", "mesh/truth.obj"]);
    cli(dir, &["reconstruct", "--input", "pred/case_005_sdf.svol.json", "--from", "sdf", "--out", "mesh/pred.stl"]);
    cli(
        dir,
        &[
            "evaluate", "--pred-dir", "pred", "--data", "data", "--split", "test", "--json", "eval/m.json", "--csv",
            "eval/m.csv", "--ply-dir", "eval/ply", "--jobs", jobs,
        ],
    );
    cli(
        dir,
        &[
            "evaluate", "--pred", "data/train/case_000_mask.svol.json", "--truth",
            "data/train/case_001_mask.svol.json", "--json", "eval/pair.json", "--ply-dir", "eval/ply",
        ],
    );
    cli(dir, &["report", "--metrics", "eval/m.json", "--label", "d", "--out", "eval/table.md"]);
}

fn tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn criterion_9() -> Outcome {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    pipeline(a.path(), "1");
    pipeline(b.path(), "3");
    let (ta, tb) = (tree(a.path()), tree(b.path()));
    let differing: Vec<String> = ta
        .keys()
        .chain(tb.keys())
        .filter(|k| ta.get(*k) != tb.get(*k))
        .map(|k| k.display().to_string())
        .collect();
    let kinds = ["svol.json", "raw", "cfx", "obj", "stl", "ply", "json", "csv", "md"];
    let covered = kinds.iter().all(|k| ta.keys().any(|p| p.to_string_lossy().ends_with(k)));
    outcome(
        differing.is_empty() && covered,
        format!("{} files compared, {} differ {:?}", ta.len(), differing.len(), differing),
    )
}

fn main() -> ExitCode {
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let criteria: [(usize, &str, fn() -> Outcome); 9] = [
        (1, "EDT exactness", criterion_1),
        (2, "SDF contract", criterion_2),
        (3, "loss correctness", criterion_3),
        (4, "Laplacian nullspace", criterion_4),
        (5, "marching cubes", criterion_5),
        (6, "metrics oracle equivalence", criterion_6),
        (7, "overfit", criterion_7),
        (8, "ablation trend", criterion_8),
        (9, "end-to-end determinism", criterion_9),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    let mut ran = 0;
    for (n, name, f) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        ran += 1;
        let t = Instant::now();
        let o = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        failed += usize::from(!o.pass);
        println!(
            "criterion {n} {} {name}: {} [{:.1?}]",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            Duration::from_secs_f64(secs(t))
        );
    }
    println!("acceptance: {}/{ran} passed", ran - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
