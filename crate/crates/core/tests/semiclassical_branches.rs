use qclimit::classical::{propagate_ensemble, sample_ensemble, MomentumSampling};
use qclimit::correspondence::compare;
use qclimit::hilbert::{Direction, HalfInt, Spin, SpinState};
use qclimit::quantum::{density, GridSpec, SpinorWaveFunction};
use qclimit::sterngerlach::{branch_wave, build_sg_potential, run_apparatus_exact, run_apparatus_semiclassical, Apparatus, Beam, Traversal};

fn beam() -> Beam {
    Beam { grid: GridSpec::new(-12.0, 12.0, 2048).unwrap(), hbar: 0.02, mass: 1.0, center: -4.0, momentum: 1.0, width: 0.25 }
}

fn apparatus(axis: Direction) -> Apparatus {
    Apparatus::new(axis, (-2.5, 2.5), 2.0, 4.0).unwrap()
}

#[test]
fn branch_centroids_follow_the_ensemble_inside_the_field() {
    let b = beam();
    let packet = b.packet().unwrap();
    let app = apparatus(Direction::z());
    let (dt, t) = (0.002, 2.6);
    let ensemble = sample_ensemble(&packet, 100_000, 5, MomentumSampling::GaussianWigner).unwrap().latest_only();
    for sigma in [HalfInt::HALF, HalfInt::MINUS_HALF] {
        let wave = branch_wave(&packet, &app, Spin::HALF, sigma, &Traversal { dt, duration: t, check_every: 10 }).unwrap();
        let v = build_sg_potential(&app, Spin::HALF, sigma).unwrap();
        let ens = propagate_ensemble(ensemble.clone(), &v, dt, t, 1300).unwrap();
        let last = ens.times().len() - 1;
        let w = ens.weights();
        // weighted mean and its standard error (equal weights)
        let stats = |xs: &[f64]| {
            let m = xs.iter().zip(w).map(|(x, w)| x * w).sum::<f64>();
            let var = xs.iter().zip(w).map(|(x, w)| w * (x - m).powi(2)).sum::<f64>();
            (m, (var / xs.len() as f64).sqrt())
        };
        let ((q, se_q), (p, se_p)) = (stats(ens.positions(last)), stats(ens.momenta(last)));
        assert!((wave.mean_momentum() - p).abs() < 4.0 * se_p, "σ = {sigma}: ⟨p⟩ {} vs {p} ± {se_p}", wave.mean_momentum());
        assert!((wave.mean_position() - q).abs() < 4.0 * se_q, "σ = {sigma}: ⟨q⟩ {} vs {q} ± {se_q}", wave.mean_position());
    }
}

#[test]
fn binned_branches_match_the_exact_branches() {
    let b = beam();
    let packet = b.packet().unwrap();
    let chi = SpinState::basis(Spin::HALF, Direction::z(), HalfInt::HALF).unwrap();
    let app = apparatus(Direction::new(1.0, 0.4).unwrap());
    let traversal = Traversal { dt: 0.002, duration: 8.0, check_every: 50 };
    let exact = run_apparatus_exact(&SpinorWaveFunction::product(&packet, &chi), &app, None, &traversal).unwrap();
    let ensemble = sample_ensemble(&packet, 50_000, 6, MomentumSampling::GaussianWigner).unwrap();
    let axes = [b.grid.coarsened(16).unwrap()];
    let semi = run_apparatus_semiclassical(&ensemble, &chi, &app, None, &traversal, &axes).unwrap();
    for (s, e) in semi.branches().iter().zip(exact.branches.branches()) {
        assert!((s.fraction() - e.fraction()).abs() < 1e-10);
        let rho = density(e.wave().unwrap()).coarsen(16).unwrap();
        let w = qclimit::classical::DensityField::new(rho.axes().to_vec(), s.density().unwrap().values().to_vec(), rho.time()).unwrap();
        let l1 = compare(&w, &rho).unwrap();
        assert!(l1 < 0.02, "σ = {}: L1 = {l1}", s.sigma());
    }
}
