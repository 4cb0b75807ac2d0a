//! Oracles shared by the gradient, rasterizer and acceptance targets.
#![allow(dead_code)]

use anr_core::losses::{
    adv_loss, adv_loss_grad, disc_loss, disc_loss_grad, feature_loss_from, feature_loss_grad, l1_loss_grad,
    mask_loss, mask_loss_grad, pixel_loss, pixel_loss_grad, total_variation, total_variation_grad, FeatureExtractor,
    FEATURE_WIDTHS,
};
use anr_core::nn::params::seeded_rng;
use anr_core::nn::Tape;
use anr_core::rasterizer::RasterOutput;
use anr_core::scene::CoarseMesh;
use anr_core::texture::{init_texture, sample_texture, sample_texture_adjoint};
use anr_core::Tensor;
use rand::Rng;

pub const EPS: f64 = 1e-6;
pub const TOL: f64 = 1e-4;

pub fn rand_tensor(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor {
    let mut rng = seeded_rng(seed, 7);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

pub fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// `‖a − n‖ / max(‖a‖, ‖n‖)` over the probed entries.
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

pub fn probe_indices(len: usize, max: usize, seed: u64) -> Vec<usize> {
    if len <= max {
        return (0..len).collect();
    }
    let mut rng = seeded_rng(seed, 9);
    (0..max).map(|_| rng.random_range(0..len)).collect()
}

/// Relative error of a claimed gradient of scalar `f` at `x`.
pub fn scalar_error(x: &Tensor, f: impl Fn(&Tensor) -> f64, grad: &Tensor) -> f64 {
    let idx = probe_indices(x.len(), 80, 3);
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for &i in &idx {
        let mut p = x.clone();
        p.data_mut()[i] += EPS;
        let mut m = x.clone();
        m.data_mut()[i] -= EPS;
        analytic.push(grad.data()[i]);
        numeric.push((f(&p) - f(&m)) / (2.0 * EPS));
    }
    rel_err(&analytic, &numeric)
}

pub fn random_raster(w: usize, h: usize, seed: u64) -> RasterOutput {
    let mut rng = seeded_rng(seed, 11);
    let mut r = RasterOutput::empty(w, h);
    for p in 0..w * h {
        if rng.random::<f64>() < 0.8 {
            r.face_id[p] = 0;
            r.uv[p] = [rng.random_range(0.0..=1.0), rng.random_range(0.0..=1.0)];
            let n = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), -1.0];
            let l = (n[0] * n[0] + n[1] * n[1] + 1.0f64).sqrt();
            r.normal[p] = n.map(|v| v / l);
            r.depth[p] = 1.0;
        }
    }
    r
}

/// Texture gradient of `Σ w · tanh(sample(T))` on an 8×8×4 texture read by a
/// 16×16 raster, every texel probed.
pub fn texture_gradient_error(seed: u64) -> f64 {
    let tex = init_texture(8, 8, 4, seed, "a").unwrap();
    let raster = random_raster(16, 16, seed + 1);
    let weights = rand_tensor(&[4, 16, 16], seed + 2, -1.0, 1.0);
    let loss = |t: &Tensor| {
        let mut tt = tex.clone();
        tt.data = t.clone();
        let s = sample_texture(&tt, &raster).data;
        s.data().iter().zip(weights.data()).map(|(v, w)| w * v.tanh()).sum::<f64>()
    };
    let s = sample_texture(&tex, &raster).data;
    let upstream = Tensor::from_vec(
        weights.shape(),
        s.data().iter().zip(weights.data()).map(|(v, w)| w * (1.0 - v.tanh().powi(2))).collect(),
    )
    .unwrap();
    let grad = sample_texture_adjoint(&tex, &raster, &upstream).unwrap();
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for i in 0..tex.data.len() {
        let mut p = tex.data.clone();
        p.data_mut()[i] += EPS;
        let mut m = tex.data.clone();
        m.data_mut()[i] -= EPS;
        analytic.push(grad.data()[i]);
        numeric.push((loss(&p) - loss(&m)) / (2.0 * EPS));
    }
    rel_err(&analytic, &numeric)
}

/// Finite-difference error of every loss gradient, by name.
pub fn loss_gradient_errors() -> Vec<(String, f64)> {
    let mut out: Vec<(String, f64)> = Vec::new();
    let mut push = |name: &str, e: f64| out.push((name.to_string(), e));

    let j = rand_tensor(&[1, 3, 6, 6], 50, -1.0, 1.0);
    let i = rand_tensor(&[1, 3, 6, 6], 51, -1.0, 1.0);
    let m = rand_tensor(&[1, 1, 6, 6], 52, 0.05, 0.95);
    let target = rand_tensor(&[1, 3, 6, 6], 53, -1.0, 1.0);
    let g = pixel_loss_grad(Some(&j), &i, &m, &target).unwrap();
    assert!((g.value - pixel_loss(Some(&j), &i, &m, &target).unwrap()).abs() < 1e-12);
    push("pixel d_j", scalar_error(&j, |x| pixel_loss(Some(x), &i, &m, &target).unwrap(), g.d_j.as_ref().unwrap()));
    push("pixel d_i", scalar_error(&i, |x| pixel_loss(Some(&j), x, &m, &target).unwrap(), &g.d_i));
    push("pixel d_m", scalar_error(&m, |x| pixel_loss(Some(&j), &i, x, &target).unwrap(), &g.d_m));
    let g1 = pixel_loss_grad(None, &i, &m, &target).unwrap();
    push("pixel one-stage d_i", scalar_error(&i, |x| pixel_loss(None, x, &m, &target).unwrap(), &g1.d_i));
    let (_, dl1) = l1_loss_grad(&i, &target).unwrap();
    push("l1", scalar_error(&i, |x| l1_loss_grad(x, &target).unwrap().0, &dl1));

    let mt = rand_tensor(&[1, 1, 6, 6], 54, 0.0, 1.0).map(|v| if v > 0.5 { 1.0 } else { 0.0 });
    let (_, dm) = mask_loss_grad(&m, &mt).unwrap();
    push("mask bce", scalar_error(&m, |x| mask_loss(x, &mt).unwrap(), &dm));

    let x = rand_tensor(&[1, 3, 7, 5], 60, -1.0, 1.0);
    let (_, gtv) = total_variation_grad(&x);
    push("tv", scalar_error(&x, total_variation, &gtv));

    let s0 = rand_tensor(&[1, 1, 4, 4], 61, -1.0, 1.5);
    let s1 = rand_tensor(&[1, 1, 2, 2], 62, -1.0, 1.5);
    let (_, ga) = adv_loss_grad(&[s0.clone(), s1.clone()]);
    push("adv scale 0", scalar_error(&s0, |x| adv_loss(&[x.clone(), s1.clone()]), &ga[0]));
    push("adv scale 1", scalar_error(&s1, |x| adv_loss(&[s0.clone(), x.clone()]), &ga[1]));
    let f0 = rand_tensor(&[1, 1, 4, 4], 63, -1.0, 1.5);
    let (_, gr, gf) = disc_loss_grad(std::slice::from_ref(&s0), std::slice::from_ref(&f0));
    push("disc real", scalar_error(&s0, |x| disc_loss(std::slice::from_ref(x), std::slice::from_ref(&f0)), &gr[0]));
    push("disc fake", scalar_error(&f0, |x| disc_loss(std::slice::from_ref(&s0), std::slice::from_ref(x)), &gf[0]));

    let fx = FeatureExtractor::new(1);
    let a = rand_tensor(&[1, 3, 16, 16], 70, -1.0, 1.0);
    let b = rand_tensor(&[1, 3, 16, 16], 71, -1.0, 1.0);
    let w = [1.0, 0.5, 2.0, 1.0];
    let fb = fx.features(&b);
    let fa = fx.features(&a);
    let (_, grads) = feature_loss_grad(&fa, &fb, &w).unwrap();
    for l in 0..FEATURE_WIDTHS.len() {
        let e = scalar_error(
            &fa[l],
            |x| {
                let mut f = fa.clone();
                f[l] = x.clone();
                feature_loss_from(&f, &fb, &w).unwrap()
            },
            &grads[l],
        );
        push(&format!("feature layer {l}"), e);
    }
    // Through the extractor, with respect to the image.
    let mut tape = Tape::new();
    let xa = tape.leaf(a.clone(), true);
    let vars = fx.forward(&mut tape, xa);
    tape.backward(vars.into_iter().zip(grads).collect());
    let g = tape.grad(xa).unwrap().clone();
    push(
        "feature wrt image",
        scalar_error(&a, |x| feature_loss_from(&fx.features(x), &fb, &w).unwrap(), &g),
    );
    out
}

pub const RASTER_SIZE: usize = 64;

pub fn random_mesh(seed: u64) -> CoarseMesh {
    let mut rng = seeded_rng(seed, 0);
    let nv = rng.random_range(6..=40);
    let nf = rng.random_range(1..=50usize).min(nv * (nv - 1) * (nv - 2) / 6);
    let vertices: Vec<[f64; 3]> = (0..nv)
        .map(|_| {
            [
                rng.random_range(-8.0..72.0),
                rng.random_range(-8.0..72.0),
                rng.random_range(0.0..10.0),
            ]
        })
        .collect();
    // Distinct vertex triples only: a repeated triangle is a coincident
    // surface whose depth order is decided by rounding, not geometry.
    let mut faces: Vec<[u32; 3]> = Vec::new();
    while faces.len() < nf {
        let a = rng.random_range(0..nv as u32);
        let b = rng.random_range(0..nv as u32);
        let c = rng.random_range(0..nv as u32);
        let mut key = [a, b, c];
        key.sort_unstable();
        let dup = faces.iter().any(|f| {
            let mut k = *f;
            k.sort_unstable();
            k == key
        });
        if a != b && b != c && a != c && !dup {
            faces.push([a, b, c]);
        }
    }
    CoarseMesh {
        uvs: vertices
            .iter()
            .map(|v| [((v[0] + 8.0) / 80.0).clamp(0.0, 1.0), ((v[1] + 8.0) / 80.0).clamp(0.0, 1.0)])
            .collect(),
        vertex_normals: vec![[0.0, 0.0, -1.0]; nv],
        skin_weights: vec![vec![1.0]; nv],
        vertices,
        faces,
    }
}

/// Independent oracle: signed edge functions normalized by the doubled
/// area, inside when all three are non-negative, nearest depth wins with
/// ties to the lower face index.
pub fn brute_force(mesh: &CoarseMesh) -> (Vec<i32>, Vec<[f64; 3]>) {
    let n = RASTER_SIZE;
    let mut ids = vec![-1; n * n];
    let mut bary = vec![[0.0; 3]; n * n];
    for y in 0..n {
        for x in 0..n {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut best = f64::INFINITY;
            for (fi, f) in mesh.faces.iter().enumerate() {
                let v = f.map(|i| mesh.vertices[i as usize]);
                let edge = |a: [f64; 3], b: [f64; 3]| (b[0] - a[0]) * (py - a[1]) - (b[1] - a[1]) * (px - a[0]);
                let area2 = (v[1][0] - v[0][0]) * (v[2][1] - v[0][1]) - (v[1][1] - v[0][1]) * (v[2][0] - v[0][0]);
                if area2 == 0.0 {
                    continue;
                }
                let w = [edge(v[1], v[2]) / area2, edge(v[2], v[0]) / area2, edge(v[0], v[1]) / area2];
                if w.iter().any(|&c| c < 0.0) {
                    continue;
                }
                let z = w[0] * v[0][2] + w[1] * v[1][2] + w[2] * v[2][2];
                if z < best {
                    best = z;
                    ids[y * n + x] = fi as i32;
                    bary[y * n + x] = w;
                }
            }
        }
    }
    (ids, bary)
}

pub struct OracleSummary {
    pub meshes: usize,
    pub id_mismatches: usize,
    pub max_bary_err: f64,
    pub covered: usize,
}

pub fn raster_oracle_suite(meshes: u64) -> OracleSummary {
    use anr_core::rasterizer::{rasterize, RasterConfig};
    use anr_core::scene::WeakPerspectiveCamera;
    let n = RASTER_SIZE;
    let cam = WeakPerspectiveCamera::new(1.0, nalgebra::Matrix3::identity(), [0.0, 0.0], (n, n)).unwrap();
    let mut s = OracleSummary {
        meshes: meshes as usize,
        id_mismatches: 0,
        max_bary_err: 0.0,
        covered: 0,
    };
    for seed in 0..meshes {
        let mesh = random_mesh(seed);
        let out = rasterize(&mesh.vertices, &mesh.vertex_normals, &mesh, &cam, &RasterConfig::new(n, n)).unwrap();
        let (ids, bary) = brute_force(&mesh);
        for p in 0..n * n {
            if out.face_id[p] != ids[p] {
                s.id_mismatches += 1;
            } else if ids[p] >= 0 {
                s.covered += 1;
                for k in 0..3 {
                    s.max_bary_err = s.max_bary_err.max((out.barycentric[p][k] - bary[p][k]).abs());
                }
            }
        }
    }
    s
}
