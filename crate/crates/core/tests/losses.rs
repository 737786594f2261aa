mod common;

use avatar_core::body::{Pose, PosedBody, Shape, SkeletonConfig};
use avatar_core::field::{FieldArch, FieldParams};
use avatar_core::losses::*;
use avatar_core::math::Vec3;
use avatar_core::render::{render_pixels, Camera, Histogram, RayRecord, RayUpstream, RenderMode, RenderSettings, Scene, ShLighting};
use avatar_core::body::Region;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

fn unit(rng: &mut ChaCha8Rng) -> Vec3<f64> {
    Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)).normalize()
}

#[test]
fn density_loss_examples() {
    let t = vec![0.5, 2.0, 7.0];
    assert_eq!(density_loss(&t, &t).unwrap(), 0.0);
    let up: Vec<f64> = t.iter().map(|v| v + 1.0).collect();
    assert!((density_loss(&up, &t).unwrap() - 1.0).abs() < 1e-15);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a: Vec<f64> = (0..100).map(|_| rng.gen_range(0.0..50.0)).collect();
    let b: Vec<f64> = (0..100).map(|_| rng.gen_range(0.0..50.0)).collect();
    let oracle = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / 100.0;
    assert_eq!(density_loss(&a, &b).unwrap(), oracle);
    assert!(matches!(density_loss::<f64>(&[], &[]), Err(LossError::EmptyBatch(_))));
    assert!(density_loss(&[1.0], &[1.0, 2.0]).is_err());
    let (dr, dp) = density_loss_grad(&[1.0, 2.0], &[1.0, 0.0]).unwrap();
    assert_eq!(dr, vec![0.0, 0.5]);
    assert_eq!(dp, vec![0.0, -0.5]);
}

#[test]
fn normal_loss_examples() {
    let n = vec![Vec3::new(0.0, 0.0, 1.0f64); 3];
    let some: Vec<_> = n.iter().map(|&v| Some(v)).collect();
    let w = vec![0.2, 0.3, 0.4];
    assert_eq!(normal_loss_ray(&w, &n, &some, false).unwrap().value, 0.0);
    let other = vec![Vec3::new(1.0, 0.0, 0.0); 3];
    let zero = vec![0.0; 3];
    assert_eq!(normal_loss(&[(&zero[..], &other[..], &some[..])], false).unwrap(), 0.0);
    let anti = normal_loss(&[(&[1.0][..], &[Vec3::new(0.0, 0.0, -1.0)][..], &[Some(Vec3::new(0.0, 0.0, 1.0))][..])], false).unwrap();
    assert!((anti - 2.0f64).abs() < 1e-15);
    let sq = normal_loss_ray(&[1.0], &[Vec3::new(0.0, 0.0, -1.0)], &[Some(Vec3::new(0.0, 0.0, 1.0))], true).unwrap();
    assert!((sq.value - 4.0f64).abs() < 1e-15);
    let skipped = normal_loss_ray(&[1.0], &[Vec3::new(0.0, 0.0, -1.0)], &[None], false).unwrap();
    assert_eq!(skipped.value, 0.0);
}

#[test]
fn mask_loss_examples() {
    let half = mask_loss(&[0.5f64; 16]).unwrap();
    assert!((half - 0.5f64.ln()).abs() < 1e-15);
    assert!((half + 0.6931).abs() < 1e-4);
    let one = mask_loss(&[1.0f64; 4]).unwrap();
    assert!((one - 1e-4f64.ln()).abs() < 1e-9);
    assert!((one + 9.21).abs() < 1e-2);
    assert!((mask_term_derivative(0.6f64) - 1.0 / (0.6 - 1.0)).abs() < 1e-12);
    assert!(mask_term_derivative(0.6f64) < 0.0);
    assert!((mask_term_derivative(0.4f64) - 1.0 / 0.4).abs() < 1e-12);
    assert!(mask_term_derivative(0.4f64) > 0.0);
    assert!(mask_loss::<f64>(&[]).is_err());
}

#[test]
fn mask_loss_pushes_toward_binary() {
    for i in 0..100 {
        let m = 0.0005 + 0.999 * (i as f64 + 0.5) / 100.0;
        let g = mask_term_derivative(m);
        if m > 0.5 {
            assert!(g < 0.0, "descent must raise M={m}");
        } else if m < 0.5 {
            assert!(g > 0.0, "descent must lower M={m}");
        }
        assert!(mask_term(m) <= mask_term(0.5));
    }
}

#[test]
fn orientation_loss_examples() {
    let v = Vec3::new(0.0, 0.0, -1.0f64);
    let facing = vec![Some(Vec3::new(0.0, 0.0, 1.0)), Some(Vec3::new(0.6, 0.0, 0.8))];
    assert_eq!(orientation_loss(&[(&[0.5, 0.5][..], &facing[..], v)]).unwrap(), 0.0);
    assert!((orientation_loss(&[(&[1.0][..], &[Some(v)][..], v)]).unwrap() - 1.0).abs() < 1e-15);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..50 {
        let w: Vec<f64> = (0..8).map(|_| rng.gen()).collect();
        let n: Vec<_> = (0..8).map(|_| Some(unit(&mut rng))).collect();
        let view = unit(&mut rng);
        let oracle: f64 = (0..8).map(|i| w[i] * n[i].unwrap().dot(view).max(0.0).powi(2)).sum();
        let v = orientation_loss_ray(&w, &n, view).unwrap().value;
        assert!((v - oracle).abs() < 1e-14);
        let zero = vec![0.0; 8];
        assert_eq!(orientation_loss_ray(&zero, &n, view).unwrap().value, 0.0);
    }
}

#[test]
fn proposal_loss_examples() {
    let h = Histogram { edges: vec![0.0, 1.0, 2.0, 3.0], weights: vec![0.2, 0.5, 0.1] };
    assert_eq!(proposal_loss_ray(&h, &h).unwrap().0, 0.0);
    let coarse = Histogram { edges: vec![0.0, 1.0, 2.0], weights: vec![0.9, 0.9] };
    let fine = Histogram { edges: vec![0.0, 0.5, 1.5, 2.0], weights: vec![0.3, 0.6, 0.1] };
    assert_eq!(proposal_loss_ray(&coarse, &fine).unwrap().0, 0.0);
    let coarse = Histogram { edges: vec![0.0f64, 1.0, 2.0], weights: vec![0.2, 0.0] };
    let fine = Histogram { edges: vec![0.2, 0.8], weights: vec![0.5] };
    let (v, g) = proposal_loss_ray(&coarse, &fine).unwrap();
    assert!((v - 0.09 / (0.5 + 1e-7)).abs() < 1e-12);
    assert!((v - 0.18).abs() < 1e-6);
    assert!(g[0] < 0.0 && g[1] == 0.0);
    let outside = Histogram { edges: vec![1.5, 2.5], weights: vec![0.5] };
    assert!(matches!(proposal_loss_ray(&coarse, &outside), Err(LossError::DomainMismatch(_))));
    assert!(proposal_loss::<f64>(&[]).is_err());
}

#[test]
fn total_loss_examples() {
    let terms = LossTerms { density: 0.3, normal: 0.2, mask: -0.69, orientation: 0.05, proposal: 0.01 };
    assert_eq!(total_loss(&terms, &LossWeights::zero(), GradNorms::default()).total, 0.0);
    let only_mask = LossWeights { mask: 2.5, ..LossWeights::zero() };
    assert!((total_loss(&terms, &only_mask, GradNorms::default()).total - 2.5 * -0.69).abs() < 1e-12);
    let all = total_loss(&terms, &LossWeights::default(), GradNorms::default());
    assert!((all.total - (0.3 + 0.2 - 0.69 + 0.05 + 0.01)).abs() < 1e-12);
}

fn random_hist(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Histogram<f64> {
    let mut cuts: Vec<f64> = (0..n - 1).map(|_| rng.gen_range(lo..hi)).collect();
    cuts.sort_by(f64::total_cmp);
    let mut edges = vec![lo];
    edges.extend(cuts);
    edges.push(hi);
    let weights = (0..n).map(|_| rng.gen_range(0.0..0.3)).collect();
    Histogram { edges, weights }
}

#[test]
fn term_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let h = 1e-6;
    let mut checked = 0;
    for _ in 0..40 {
        let n = 8;
        let w: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let pred: Vec<_> = (0..n).map(|_| unit(&mut rng)).collect();
        let dens: Vec<_> = (0..n).map(|_| if rng.gen_bool(0.1) { None } else { Some(unit(&mut rng)) }).collect();
        let view = unit(&mut rng);
        for squared in [false, true] {
            let base = normal_loss_ray(&w, &pred, &dens, squared).unwrap();
            for i in 0..n {
                let mut wp = w.clone();
                wp[i] += h;
                let mut wm = w.clone();
                wm[i] -= h;
                let fd = (normal_loss_ray(&wp, &pred, &dens, squared).unwrap().value
                    - normal_loss_ray(&wm, &pred, &dens, squared).unwrap().value)
                    / (2.0 * h);
                assert!(rel(fd, base.d_weights[i]) < 1e-4 || (fd - base.d_weights[i]).abs() < 1e-9);
                for k in 0..3 {
                    let mut pp = pred.clone();
                    pp[i][k] += h;
                    let mut pm = pred.clone();
                    pm[i][k] -= h;
                    let fd = (normal_loss_ray(&w, &pp, &dens, squared).unwrap().value
                        - normal_loss_ray(&w, &pm, &dens, squared).unwrap().value)
                        / (2.0 * h);
                    assert!(rel(fd, base.d_normals[i][k]) < 1e-4 || (fd - base.d_normals[i][k]).abs() < 1e-9);
                    checked += 1;
                }
            }
        }
        let base = orientation_loss_ray(&w, &dens, view).unwrap();
        for i in 0..n {
            let mut wp = w.clone();
            wp[i] += h;
            let mut wm = w.clone();
            wm[i] -= h;
            let fd = (orientation_loss_ray(&wp, &dens, view).unwrap().value
                - orientation_loss_ray(&wm, &dens, view).unwrap().value)
                / (2.0 * h);
            assert!(rel(fd, base.d_weights[i]) < 1e-4 || (fd - base.d_weights[i]).abs() < 1e-9);
            if let Some(nrm) = dens[i] {
                if nrm.dot(view).abs() > 1e-3 {
                    for k in 0..3 {
                        let mut dp = dens.clone();
                        dp[i] = Some(nrm + Vec3::unit(k) * h);
                        let mut dm = dens.clone();
                        dm[i] = Some(nrm - Vec3::unit(k) * h);
                        let fd = (orientation_loss_ray(&w, &dp, view).unwrap().value
                            - orientation_loss_ray(&w, &dm, view).unwrap().value)
                            / (2.0 * h);
                        assert!(rel(fd, base.d_normals[i][k]) < 1e-4 || (fd - base.d_normals[i][k]).abs() < 1e-9);
                    }
                }
            }
        }

        let coarse = random_hist(&mut rng, 12, 1.0, 3.0);
        let mut fine = random_hist(&mut rng, 16, 1.2, 2.8);
        for v in fine.weights.iter_mut() {
            *v *= 2.0;
        }
        let (_, g) = proposal_loss_ray(&coarse, &fine).unwrap();
        for j in 0..coarse.bins() {
            let mut cp = coarse.clone();
            cp.weights[j] += h;
            let mut cm = coarse.clone();
            cm.weights[j] -= h;
            let fd = (proposal_loss_ray(&cp, &fine).unwrap().0 - proposal_loss_ray(&cm, &fine).unwrap().0) / (2.0 * h);
            assert!(rel(fd, g[j]) < 1e-4 || (fd - g[j]).abs() < 1e-9, "coarse {j}: {fd} vs {}", g[j]);
            checked += 1;
        }

        let m: Vec<f64> = (0..16).map(|_| rng.gen_range(0.0..1.0)).collect();
        let gm = mask_loss_grad(&m);
        for i in 0..16 {
            if (m[i] - 0.5).abs() < 1e-4 {
                continue;
            }
            let mut mp = m.clone();
            mp[i] += h;
            let mut mm = m.clone();
            mm[i] -= h;
            let fd = (mask_loss(&mp).unwrap() - mask_loss(&mm).unwrap()) / (2.0 * h);
            assert!(rel(fd, gm[i]) < 1e-4, "mask {}: {fd} vs {}", m[i], gm[i]);
        }

        let a: Vec<f64> = (0..16).map(|_| rng.gen_range(0.0..5.0)).collect();
        let b: Vec<f64> = (0..16).map(|_| rng.gen_range(0.0..5.0)).collect();
        let (da, db) = density_loss_grad(&a, &b).unwrap();
        for i in 0..16 {
            let mut ap = a.clone();
            ap[i] += h;
            let mut am = a.clone();
            am[i] -= h;
            let fd = (density_loss(&ap, &b).unwrap() - density_loss(&am, &b).unwrap()) / (2.0 * h);
            assert!(rel(fd, da[i]) < 1e-4);
            let mut bp = b.clone();
            bp[i] += h;
            let mut bm = b.clone();
            bm[i] -= h;
            let fd = (density_loss(&a, &bp).unwrap() - density_loss(&a, &bm).unwrap()) / (2.0 * h);
            assert!(rel(fd, db[i]) < 1e-4);
        }
    }
    assert!(checked > 1000);
}

fn rendered_records() -> Vec<RayRecord<f64>> {
    let cfg = SkeletonConfig::default().with_sharpness(300.0).unwrap();
    let body = PosedBody::new(&cfg, &Pose::rest(16), &Shape::mean()).unwrap();
    let arch = FieldArch { width: 16, layers: 2, bands: 3, cond_dim: 6, proposal_width: 8, proposal_layers: 2, joints: 16 };
    let mut params = FieldParams::<f64>::init(4, &arch).unwrap();
    let layout = params.layout().clone();
    params.values[layout.density.bias()][0] = 4.0;
    let ev = params.evaluator(&Pose::rest(16), &Shape::mean()).unwrap();
    let settings = RenderSettings { n_coarse: 16, n_fine: 12, ..RenderSettings::default() };
    let lighting = ShLighting::uniform(1.0);
    let scene = Scene { body: &body, lighting: &lighting, settings: &settings, mode: RenderMode::Shaded, density_normals: true };
    let cam = Camera {
        azimuth: 0.4,
        elevation: 0.1,
        radius: 2.5,
        look_at: body.region_bounds(Region::FullBody).center(),
        focal: 20.0,
        width: 16,
        height: 16,
    };
    let pixels: Vec<usize> = (0..cam.pixel_count()).step_by(5).collect();
    render_pixels(&scene, &ev, &cam, &pixels, Some(1))
}

fn eval_terms(records: &[RayRecord<f64>], weights: &LossWeights, opts: &LossOptions) -> f64 {
    let mut up: Vec<_> = records
        .iter()
        .map(|_| RayUpstream::zeros(12, 16))
        .collect();
    let (terms, _) = accumulate_ray_losses(records, weights, opts, &mut up).unwrap();
    total_loss(&terms, weights, GradNorms::default()).total
}

#[test]
fn batch_assembly_matches_finite_differences() {
    let records = rendered_records();
    assert!(records.iter().filter(|r| r.samples.is_some()).count() > 10);
    let weights = LossWeights { sds: 0.0, orientation: 0.7, proposal: 1.3, mask: 0.9, normal: 1.1, density: 0.5 };
    let opts = LossOptions::default();
    let mut up: Vec<_> = records.iter().map(|_| RayUpstream::zeros(12, 16)).collect();
    let (terms, norms) = accumulate_ray_losses(&records, &weights, &opts, &mut up).unwrap();
    assert!(terms.normal > 0.0 && terms.density > 0.0);
    assert!(norms.mask > 0.0 && norms.density > 0.0);
    let h = 1e-6;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut probes = 0;
    let mut ok = 0;
    for _ in 0..300 {
        let r = rng.gen_range(0..records.len());
        let Some(s) = &records[r].samples else { continue };
        let kind = rng.gen_range(0..6);
        let k = rng.gen_range(0..12);
        let perturb = |delta: f64| {
            let mut recs = records.clone();
            let rec = &mut recs[r];
            let s = rec.samples.as_mut().unwrap();
            match kind {
                0 => rec.mask += delta,
                1 => s.tau_raw[k] += delta,
                2 => s.tau_proxy[k] += delta,
                3 => s.weights[k] += delta,
                4 => s.normal_pred[k].x += delta,
                _ => s.coarse.weights[k] += delta,
            }
            // fine weights are a stop-gradient input of the proposal term
            let w = if kind == 3 { LossWeights { proposal: 0.0, ..weights } } else { weights };
            eval_terms(&recs, &w, &opts)
        };
        let an = match kind {
            0 => up[r].mask,
            1 => up[r].tau_raw[k],
            2 => up[r].tau_proxy[k],
            3 => up[r].weights[k],
            4 => up[r].normal_pred[k].x,
            _ => up[r].coarse_weights[k],
        };
        if kind == 5 && s.coarse.weights[k] < 1e-5 {
            continue;
        }
        // skip probes next to the L1 kink
        if (kind == 1 || kind == 2) && (s.tau_raw[k] - s.tau_proxy[k]).abs() < 1e-4 {
            continue;
        }
        let fd = (perturb(h) - perturb(-h)) / (2.0 * h);
        probes += 1;
        if rel(fd, an) < 1e-4 || (fd - an).abs() < 1e-9 {
            ok += 1;
        } else {
            eprintln!("kind {kind} ray {r} k {k}: fd {fd} vs {an}");
        }
    }
    assert!(probes > 100);
    assert!(ok as f64 >= 0.95 * probes as f64, "{ok}/{probes}");
}

#[test]
fn metrics_writer_emits_one_line_per_step() {
    let mut w = MetricsWriter::new(Vec::new());
    for step in 0..3 {
        let b = total_loss(&LossTerms { mask: -0.5, ..LossTerms::default() }, &LossWeights::default(), GradNorms::default());
        w.write(&MetricsRecord::new(step, &b)).unwrap();
    }
    let text = String::from_utf8(w.into_inner()).unwrap();
    let lines: Vec<_> = text.lines().collect();
    assert_eq!(lines.len(), 3);
    for (i, l) in lines.iter().enumerate() {
        let v: serde_json::Value = serde_json::from_str(l).unwrap();
        assert_eq!(v["step"], i as u64);
        assert_eq!(v["mask"], -0.5);
        assert!(v["grad_norms"]["sds"].is_number());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn mask_loss_is_maximal_at_half(m in prop::collection::vec(0.0f64..=1.0, 1..64)) {
        prop_assert!(mask_loss(&m).unwrap() <= 0.5f64.ln() + 1e-15);
    }

    #[test]
    fn weighted_terms_vanish_without_weight(
        normals in prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0), 1..16),
    ) {
        let n: Vec<_> = normals.iter().map(|&(x, y, z)| Vec3::new(x, y, z + 2.0).normalize()).collect();
        let opt: Vec<_> = n.iter().map(|&v| Some(-v)).collect();
        let w = vec![0.0; n.len()];
        prop_assert_eq!(normal_loss_ray(&w, &n, &opt, false).unwrap().value, 0.0);
        prop_assert_eq!(orientation_loss_ray(&w, &opt, Vec3::new(0.0, 0.0, 1.0)).unwrap().value, 0.0);
    }

    #[test]
    fn proposal_loss_vanishes_for_identical_histograms(
        w in prop::collection::vec(0.0f64..1.0, 1..24),
    ) {
        let edges: Vec<f64> = (0..=w.len()).map(|i| i as f64 * 0.1).collect();
        let h = Histogram { edges, weights: w };
        prop_assert_eq!(proposal_loss_ray(&h, &h).unwrap().0, 0.0);
    }

    #[test]
    fn total_is_weighted_sum(
        t in prop::array::uniform5(-10.0f64..10.0),
        l in prop::array::uniform5(0.0f64..5.0),
    ) {
        let terms = LossTerms { density: t[0], normal: t[1], mask: t[2], orientation: t[3], proposal: t[4] };
        let w = LossWeights { sds: 1.0, density: l[0], normal: l[1], mask: l[2], orientation: l[3], proposal: l[4] };
        let b = total_loss(&terms, &w, GradNorms::default());
        let expected: f64 = t.iter().zip(&l).map(|(a, b)| a * b).sum();
        prop_assert!((b.total - expected).abs() < 1e-9);
    }
}
