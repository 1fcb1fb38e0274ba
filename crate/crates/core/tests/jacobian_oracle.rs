use dotrecon::forward::{default_wavenumber, ForwardModel, SourceBank};
use dotrecon::jacobian::fd_jacobian;
use dotrecon::mesh::{generate_disk_mesh, Mesh};
use dotrecon::phantom::{FreeIndex, OpticalValues, ParameterField};
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_problem() -> (Mesh, ForwardModel, FreeIndex) {
    let mesh = generate_disk_mesh(10.0, 54, 4).unwrap();
    assert!(mesh.triangle_count() <= 60);
    let bank = SourceBank::trigonometric(&mesh, 4, 1.0, [0.0, 0.0]);
    let model = ForwardModel::new(mesh.clone(), default_wavenumber(), bank).unwrap();
    let free = FreeIndex::new(&mesh);
    assert!(!free.is_empty());
    (mesh, model, free)
}

fn random_field(mesh: &Mesh, rng: &mut ChaCha8Rng) -> ParameterField {
    let bg = OpticalValues::default();
    let mut q = ParameterField::constant(mesh.triangle_count(), bg);
    for t in 0..mesh.triangle_count() {
        q.d[t] = bg.d * rng.random_range(0.6..1.6);
        q.mu[t] = bg.mu * rng.random_range(0.5..2.5);
    }
    q
}

#[test]
fn adjoint_matches_central_differences() {
    let (mesh, model, free) = small_problem();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..3 {
        let q = random_field(&mesh, &mut rng);
        let (_, adj) = model.measure_with_jacobian(&q, &free).unwrap();
        let fd = fd_jacobian(&model, &q, &free, 1e-6).unwrap();
        let err = adj.max_relative_column_error(&fd);
        assert!(err <= 1e-4, "max relative column error {err:e}");
    }
}

#[test]
fn fd_step_halving_is_stable() {
    let (mesh, model, free) = small_problem();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let q = random_field(&mesh, &mut rng);
    let a = fd_jacobian(&model, &q, &free, 1e-4).unwrap();
    let b = fd_jacobian(&model, &q, &free, 5e-5).unwrap();
    // O(h²) truncation at relative h = 1e-4
    assert!(b.max_relative_column_error(&a) < 1e-6);
}

#[test]
fn linearization_remainder_is_quadratic() {
    let (mesh, model, free) = small_problem();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let q = random_field(&mesh, &mut rng);
    let x = free.gather(&q);
    let (g0, jac) = model.measure_with_jacobian(&q, &free).unwrap();
    let g0 = g0.flatten();
    // direction with |η_i| ≤ x_i so that q + tη stays admissible for t ≤ 0.1
    let dir: Vec<f64> = x.iter().map(|&v| v * rng.random_range(-1.0..1.0)).collect();
    let mut pts = Vec::new();
    for t in [1e-1, 1e-2, 1e-3, 1e-4] {
        let eta: Vec<f64> = dir.iter().map(|d| t * d).collect();
        let xp: Vec<f64> = x.iter().zip(&eta).map(|(a, b)| a + b).collect();
        let gp = model.forward_map(&free.scatter(&xp, &q).unwrap()).unwrap().flatten();
        let lin = &jac.matrix * DVector::from_vec(eta.clone());
        let rem: f64 = (0..gp.len()).map(|i| (gp[i] - g0[i] - lin[i]).powi(2)).sum::<f64>().sqrt();
        let eta_inf = eta.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        pts.push((eta_inf.ln(), rem.ln()));
    }
    let n = pts.len() as f64;
    let (sx, sy) = pts.iter().fold((0.0, 0.0), |a, p| (a.0 + p.0, a.1 + p.1));
    let (mx, my) = (sx / n, sy / n);
    let slope = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>()
        / pts.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>();
    assert!((1.8..=2.2).contains(&slope), "slope {slope}");
}
