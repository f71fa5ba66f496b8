//! End-to-end acceptance checks. Each test prints one PASS/FAIL line.

use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use oavnn::autodiff::{grad_check, Tape, Tensor, Var};
use oavnn::geometry::{apply_transform, dot, norm, random_o3, random_o3_with, scale, sub};
use oavnn::layers::{
    complex_linear, complex_linear_basis, cross_attention, orient_basis, vn_invariant, vn_linear,
    vn_relu, ComplexWeights,
};
use oavnn::model::{
    build_model, equivariance_probe, forward_segmentation, symmetry_ambiguity_demo, train,
    train_until, ModelConfig, Stage, Variant,
};
use oavnn::shapes::{gen_dataset, gen_shape, ShapeKind, ShapeSpec};
use oavnn::symmetry::{planar_symmetry_direction, segment_by_plane, DEFAULT_SHELLS};

/// Writes to the raw stderr handle, which the test harness does not capture,
/// so passing criteria are listed too.
fn report(id: u32, name: &str, pass: bool, start: Instant, detail: String) {
    let _ = writeln!(
        std::io::stderr().lock(),
        "criterion {id} [{}] {name}: {detail} ({:.1}s)",
        if pass { "PASS" } else { "FAIL" },
        start.elapsed().as_secs_f64()
    );
    assert!(pass, "criterion {id} failed: {detail}");
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn rel(a: &Tensor, b: &Tensor) -> f64 {
    a.max_abs_diff(b) / b.data().iter().fold(1e-300f64, |m, v| m.max(v.abs()))
}

#[test]
fn c1_equivariance_suite() {
    let start = Instant::now();
    let stages = [Stage::VnLinear, Stage::VnRelu, Stage::VnMeanPool, Stage::VnInvariant];
    let mut worst = 0.0f64;
    let mut parts = Vec::new();
    for stage in stages {
        let r = equivariance_probe(stage, 100, true, 1).unwrap();
        worst = worst.max(r.max_error);
        parts.push(format!("{} {} {:.1e}", r.stage, r.expected, r.max_error));
    }
    report(1, "VN stages under O(3)", worst < 1e-8, start, parts.join(", "));
}

#[test]
fn c2_symmetry_direction_is_the_plane_normal() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let kinds = [ShapeKind::Airplane, ShapeKind::Chair, ShapeKind::Cap];
    let mut worst = 0.0f64;
    for i in 0..50u64 {
        let cloud = gen_shape(&ShapeSpec::new(kinds[i as usize % 3], 256, 100 + i, 0.0)).unwrap();
        let r = random_o3_with(&mut rng, i % 2 == 1);
        let moved = apply_transform(&cloud, &r);
        let normal = r.apply([1.0, 0.0, 0.0]);
        let e = planar_symmetry_direction(&moved.points, DEFAULT_SHELLS).unwrap();
        let in_plane = norm(sub(e.direction, scale(normal, dot(e.direction, normal))));
        worst = worst.max(in_plane / e.magnitude);
    }
    let mut table_max = 0.0f64;
    for seed in 0..10 {
        let t = gen_shape(&ShapeSpec::new(ShapeKind::Table, 256, seed, 0.0)).unwrap();
        let t = apply_transform(&t, &random_o3_with(&mut rng, false));
        table_max = table_max.max(planar_symmetry_direction(&t.points, DEFAULT_SHELLS).unwrap().magnitude);
    }
    report(
        2,
        "planar symmetry direction",
        worst < 1e-9 && table_max < 1e-9,
        start,
        format!("max in-plane/|c| {worst:.1e} over 50 clouds, max table |c| {table_max:.1e}"),
    );
}

#[test]
fn c3_ambiguity_demonstration() {
    let start = Instant::now();
    let vnn = build_model(&ModelConfig {
        seed: 3,
        ..ModelConfig::with_variant(Variant::Vnn)
    })
    .unwrap();
    let oavnn = build_model(&ModelConfig {
        seed: 3,
        ..ModelConfig::with_variant(Variant::Oavnn)
    })
    .unwrap();
    let (mut vnn_max, mut oavnn_min) = (0.0f64, f64::INFINITY);
    for kind in [ShapeKind::Airplane, ShapeKind::Chair, ShapeKind::Cap] {
        for seed in 0..3 {
            let cloud = gen_shape(&ShapeSpec::new(kind, 256, seed, 0.0)).unwrap();
            let n = [1.0, 0.0, 0.0];
            vnn_max = vnn_max.max(symmetry_ambiguity_demo(&vnn, &cloud, n).unwrap().relative());
            oavnn_min = oavnn_min.min(symmetry_ambiguity_demo(&oavnn, &cloud, n).unwrap().relative());
        }
    }
    report(
        3,
        "equivariant features vanish along the mirror normal",
        vnn_max < 1e-8 && oavnn_min > 1e-3,
        start,
        format!("VNN max {vnn_max:.1e}, OAVNN min {oavnn_min:.1e}"),
    );
}

#[test]
fn c4_vnn_stays_at_chance() {
    let start = Instant::now();
    let train_set = gen_dataset(ShapeKind::Airplane, 200, 256, 0.0, 4000).unwrap();
    let test_set = gen_dataset(ShapeKind::Airplane, 50, 256, 0.0, 4500).unwrap();
    let cfg = ModelConfig {
        seed: 4,
        ..ModelConfig::with_variant(Variant::Vnn)
    };
    let (params, metrics) = train(&cfg, &train_set, &test_set).unwrap();
    let acc = metrics.final_test_accuracy().unwrap();
    let mut pair_gap = 0.0f64;
    for cloud in &test_set[..10] {
        let cloud = apply_transform(cloud, &random_o3(7, false));
        let logits = forward_segmentation(&params, &cloud).unwrap();
        let h = cloud.len() / 2;
        for i in 0..h {
            for c in 0..2 {
                pair_gap = pair_gap.max((logits.get(&[i, c]) - logits.get(&[i + h, c])).abs());
            }
        }
    }
    report(
        4,
        "VNN chance level",
        (0.45..=0.55).contains(&acc) && pair_gap < 1e-6,
        start,
        format!("{} epochs, final test accuracy {acc:.4}, max mirrored-pair logit gap {pair_gap:.1e}", metrics.records.len()),
    );
}

#[test]
fn c5_ablation_ordering() {
    let start = Instant::now();
    let threshold = 0.9;
    let epochs = ModelConfig::default().epochs;
    let mut sums = [0.0f64; 3];
    let mut finals = Vec::new();
    let mut lines = Vec::new();
    for seed in 0..3u64 {
        let train_set = gen_dataset(ShapeKind::Airplane, 200, 256, 0.0, 5000 + 1000 * seed).unwrap();
        let test_set = gen_dataset(ShapeKind::Airplane, 50, 256, 0.0, 5500 + 1000 * seed).unwrap();
        for (slot, v) in [Variant::Oavnn, Variant::ShellOnly, Variant::ComplexOnly].into_iter().enumerate() {
            let cfg = ModelConfig {
                seed,
                ..ModelConfig::with_variant(v)
            };
            // Only OAVNN needs the full schedule; the ablations stop once they reach the threshold.
            let full = v == Variant::Oavnn;
            let (_, m) = train_until(&cfg, &train_set, &test_set, |r| full || r.test_accuracy < threshold).unwrap();
            // Never reaching the threshold counts as one epoch past the schedule.
            let e = m.epochs_to(threshold).unwrap_or(epochs + 1);
            sums[slot] += e as f64;
            let first = m.records[0].test_accuracy;
            lines.push(format!("seed {seed} {v}: epochs-to-90 {e}, epoch-1 test {first:.4}"));
            if full {
                finals.push(m.final_test_accuracy().unwrap());
            }
        }
    }
    for l in &lines {
        println!("  {l}");
    }
    let mean = sums.map(|s| s / 3.0);
    let final_acc = finals.iter().sum::<f64>() / finals.len() as f64;
    let pass = mean[0] < mean[1] && mean[0] < mean[2] && final_acc >= 0.95;
    report(
        5,
        "ablation ordering",
        pass,
        start,
        format!(
            "mean epochs-to-90 OAVNN {:.2}, ShellOnly {:.2}, ComplexOnly {:.2}; OAVNN final test accuracy {final_acc:.4} (min {:.4})",
            mean[0],
            mean[1],
            mean[2],
            finals.iter().copied().fold(f64::INFINITY, f64::min)
        ),
    );
}

#[test]
fn c6_plane_classifier() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst = 1.0f64;
    let mut count = 0;
    for kind in [ShapeKind::Airplane, ShapeKind::Cap, ShapeKind::Chair] {
        for seed in 0..5 {
            let cloud = gen_shape(&ShapeSpec::new(kind, 256, 600 + seed, 0.0)).unwrap();
            let cloud = apply_transform(&cloud, &random_o3_with(&mut rng, seed % 2 == 0));
            let seg = segment_by_plane(&cloud.points, cloud.labels.as_deref(), DEFAULT_SHELLS).unwrap();
            worst = worst.min(seg.accuracy.unwrap());
            count += 1;
        }
    }
    let mut tables_flagged = true;
    for seed in 0..5 {
        let t = gen_shape(&ShapeSpec::new(ShapeKind::Table, 256, seed, 0.0)).unwrap();
        let e = planar_symmetry_direction(&t.points, DEFAULT_SHELLS).unwrap();
        tables_flagged &= e.is_degenerate() && segment_by_plane(&t.points, None, DEFAULT_SHELLS).is_err();
    }
    report(
        6,
        "plane classifier",
        worst == 1.0 && tables_flagged,
        start,
        format!("min best-sign accuracy {worst} over {count} clouds, tables flagged degenerate: {tables_flagged}"),
    );
}

struct Cw {
    a: Tensor,
    b: Tensor,
    c: Tensor,
}

impl Cw {
    fn bind(&self, t: &mut Tape) -> ComplexWeights {
        ComplexWeights {
            a: t.constant(self.a.clone()),
            b: t.constant(self.b.clone()),
            c: t.constant(self.c.clone()),
        }
    }
}

fn closed(v: &Tensor, j: &Tensor, w: &Cw) -> Tensor {
    let mut t = Tape::new();
    let (vv, jv) = (t.constant(v.clone()), t.constant(j.clone()));
    let cw = w.bind(&mut t);
    let y = complex_linear(&mut t, vv, jv, &cw).unwrap();
    t.value(y).clone()
}

#[test]
fn c7_complex_layer_identities() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (n, c, cp) = (32, 6, 5);
    let (mut gauge, mut so3, mut refl_b, mut refl_0) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let mut flip_exact = true;
    for _ in 0..50 {
        let v = rand_tensor(&mut rng, &[n, c, 3]);
        let j = rand_tensor(&mut rng, &[n, c, 3]);
        let w = Cw {
            a: rand_tensor(&mut rng, &[cp, c]),
            b: rand_tensor(&mut rng, &[cp, c]),
            c: rand_tensor(&mut rng, &[cp, c]),
        };
        let base = closed(&v, &j, &w);

        // Basis form with U1, U2 spun about J by random angles.
        let mut bases = orient_basis(&j).unwrap().bases;
        for r in bases.data_mut().chunks_mut(9) {
            let (s, co) = rng.random_range(0.0..std::f64::consts::TAU).sin_cos();
            for d in 0..3 {
                let (u1, u2) = (r[d], r[3 + d]);
                r[d] = co * u1 + s * u2;
                r[3 + d] = -s * u1 + co * u2;
            }
        }
        let via_basis = {
            let mut t = Tape::new();
            let (vv, bv) = (t.constant(v.clone()), t.constant(bases));
            let cw = w.bind(&mut t);
            let y = complex_linear_basis(&mut t, vv, bv, &cw).unwrap();
            t.value(y).clone()
        };
        gauge = gauge.max(rel(&via_basis, &base));

        let r = random_o3_with(&mut rng, false);
        so3 = so3.max(rel(&closed(&r.apply_tensor(&v), &r.apply_tensor(&j), &w), &r.apply_tensor(&base)));

        let m = random_o3_with(&mut rng, true);
        refl_b = refl_b.max(rel(&closed(&m.apply_tensor(&v), &m.apply_tensor(&j), &w), &m.apply_tensor(&base)));
        let w0 = Cw {
            a: w.a.clone(),
            b: Tensor::zeros(&[cp, c]),
            c: w.c.clone(),
        };
        let base0 = closed(&v, &j, &w0);
        refl_0 = refl_0.max(rel(&closed(&m.apply_tensor(&v), &m.apply_tensor(&j), &w0), &m.apply_tensor(&base0)));

        let neg_b = Cw {
            a: w.a.clone(),
            b: w.b.map(|x| -x),
            c: w.c.clone(),
        };
        flip_exact &= closed(&v, &j.map(|x| -x), &w) == closed(&v, &j, &neg_b);
    }
    report(
        7,
        "complex linear identities",
        gauge < 1e-10 && so3 < 1e-10 && refl_b > 0.1 && refl_0 < 1e-10 && flip_exact,
        start,
        format!(
            "gauge {gauge:.1e}, SO(3) {so3:.1e}, reflection B!=0 {refl_b:.2}, B=0 {refl_0:.1e}, J-flip exact {flip_exact}"
        ),
    );
}

fn probe_loss(t: &mut Tape, y: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = t.constant(rand_tensor(&mut rng, t.shape(y)));
    let p = t.mul(y, r).unwrap();
    t.sum_all(p).unwrap()
}

/// Gradient check of `f(inputs)` with respect to each input in turn.
fn check_all(inputs: &[Tensor], f: impl Fn(&mut Tape, &[Var]) -> oavnn::Result<Var> + Copy) -> f64 {
    let mut worst = 0.0f64;
    for which in 0..inputs.len() {
        let err = grad_check(
            |t: &mut Tape, p: Var| {
                let vars: Vec<Var> = (0..inputs.len())
                    .map(|i| if i == which { p } else { t.constant(inputs[i].clone()) })
                    .collect();
                let y = f(t, &vars)?;
                Ok(probe_loss(t, y, 800 + which as u64))
            },
            &inputs[which],
            1e-5,
        )
        .unwrap();
        worst = worst.max(err);
    }
    worst
}

#[test]
fn c8_gradient_checks() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (n, c) = (6, 3);
    let mut results = Vec::new();

    let x = rand_tensor(&mut rng, &[n, c, 3]);
    let w = rand_tensor(&mut rng, &[4, c]);
    results.push(("vn_linear", check_all(&[x.clone(), w], |t, v| vn_linear(t, v[0], v[1]))));

    // VN-ReLU sampled away from <q, k> = 0.
    let relu_inputs = loop {
        let ins = [
            rand_tensor(&mut rng, &[n, c, 3]),
            rand_tensor(&mut rng, &[4, c]),
            rand_tensor(&mut rng, &[4, c]),
        ];
        let mut t = Tape::new();
        let v: Vec<Var> = ins.iter().map(|x| t.constant(x.clone())).collect();
        let q = vn_linear(&mut t, v[0], v[1]).unwrap();
        let k = vn_linear(&mut t, v[0], v[2]).unwrap();
        let d = t.dot(q, k).unwrap();
        if t.value(d).data().iter().all(|x| x.abs() > 1e-2) {
            break ins;
        }
    };
    results.push(("vn_relu", check_all(&relu_inputs, |t, v| vn_relu(t, v[0], v[1], v[2]))));

    let tw = rand_tensor(&mut rng, &[3, 2 * c]);
    results.push(("vn_invariant", check_all(&[x.clone(), tw], |t, v| vn_invariant(t, v[0], v[1]))));

    let cl = [
        x.clone(),
        rand_tensor(&mut rng, &[n, c, 3]),
        rand_tensor(&mut rng, &[2, c]),
        rand_tensor(&mut rng, &[2, c]),
        rand_tensor(&mut rng, &[2, c]),
    ];
    results.push((
        "complex_linear",
        check_all(&cl, |t, v| {
            let w = ComplexWeights {
                a: v[2],
                b: v[3],
                c: v[4],
            };
            complex_linear(t, v[0], v[1], &w)
        }),
    ));

    let att = [x.clone(), rand_tensor(&mut rng, &[n, c, 3]), rand_tensor(&mut rng, &[n, c, 3])];
    results.push(("cross_attention", check_all(&att, |t, v| Ok(cross_attention(t, v[0], v[1], v[2])?.0))));

    let feats = rand_tensor(&mut rng, &[n, 9, 1]);
    let hw = rand_tensor(&mut rng, &[2, 9]);
    let hb = rand_tensor(&mut rng, &[2]);
    results.push((
        "head",
        check_all(&[feats, hw, hb], |t, v| {
            let z = t.channel_contract(v[1], v[0])?;
            let z = t.reshape(z, &[6, 2])?;
            t.add(z, v[2])
        }),
    ));

    let worst = results.iter().map(|r| r.1).fold(0.0, f64::max);
    let detail = results
        .iter()
        .map(|(name, e)| format!("{name} {e:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    report(8, "finite-difference gradients", worst < 1e-4, start, detail);
}
