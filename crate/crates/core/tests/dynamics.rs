use formctl::dynamics::{AgentState, DynamicsError, LeaderProfile, SystemRealization};
use nalgebra::{DVector, SymmetricEigen};
use proptest::prelude::*;

#[test]
fn golden_realization() {
    // Recorded once from seed 42; guards against silent changes to sampling.
    let sys = SystemRealization::sample(42, 3, 5, 1.0).unwrap();
    let x = AgentState { x1: vec![1.0, 0.0, 0.0], x2: vec![0.0; 3] };
    let (f, g) = sys.eval(1, &x, 0.0).unwrap();
    let f_ref = [-1.4061004425940743e-1, -3.6608317820147007e-1, -1.3675862315529771e-1];
    let g_ref = [
        1.843935463258668e0,
        2.8785224848628255e-1,
        -1.2612725526939278e-1,
        2.8785224848628255e-1,
        2.0431798652062447e0,
        -6.210945309085953e-1,
        -1.2612725526939278e-1,
        -6.210945309085953e-1,
        1.6608559343061045e0,
    ];
    for (a, b) in f.iter().zip(f_ref) {
        assert!((a - b).abs() <= 1e-14, "{a} vs {b}");
    }
    for (a, b) in g.as_slice().iter().zip(g_ref) {
        assert!((a - b).abs() <= 1e-14, "{a} vs {b}");
    }
}

#[test]
fn nominal_agents_without_variation() {
    let sys = SystemRealization::sample(9, 3, 2, 0.0).unwrap();
    let x = AgentState { x1: vec![0.3, -2.0, 1.0], x2: vec![1.0, 0.0, 0.5] };
    let (f, g) = sys.eval(2, &x, 4.0).unwrap();
    assert!(f.iter().all(|&v| v == 0.0));
    assert_eq!(g, nalgebra::DMatrix::identity(3, 3));
}

#[test]
fn bad_queries() {
    let sys = SystemRealization::sample(1, 2, 3, 1.0).unwrap();
    let x = AgentState::zeros(2);
    assert!(matches!(sys.eval(0, &x, 0.0), Err(DynamicsError::IndexOutOfRange { .. })));
    assert!(matches!(sys.eval(4, &x, 0.0), Err(DynamicsError::IndexOutOfRange { .. })));
    assert!(matches!(
        sys.eval(1, &AgentState::zeros(3), 0.0),
        Err(DynamicsError::DimensionMismatch { .. })
    ));
    let nan = AgentState { x1: vec![f64::NAN, 0.0], x2: vec![0.0; 2] };
    assert!(sys.eval(1, &nan, 0.0).is_err());
    assert!(sys.acceleration(1, &x, 0.0, &[1.0]).is_err());
    assert!(SystemRealization::sample(1, 0, 3, 1.0).is_err());
}

#[test]
fn sampling_is_seeded() {
    let a = SystemRealization::sample(5, 3, 4, 1.0).unwrap();
    assert_eq!(a, SystemRealization::sample(5, 3, 4, 1.0).unwrap());
    assert_ne!(a, SystemRealization::sample(6, 3, 4, 1.0).unwrap());
}

#[test]
fn helix_derivatives_are_consistent() {
    let leader = LeaderProfile::default();
    let h = 1e-5;
    for k in 0..20 {
        let t = 0.37 * k as f64;
        let s = leader.at(t, 3);
        let (p, m) = (leader.at(t + h, 3), leader.at(t - h, 3));
        for c in 0..3 {
            assert!(((p.x1[c] - m.x1[c]) / (2.0 * h) - s.x2[c]).abs() < 1e-8);
            assert!(((p.x2[c] - m.x2[c]) / (2.0 * h) - s.u[c]).abs() < 1e-8);
        }
    }
}

proptest! {
    #[test]
    fn input_gain_is_positive_definite(
        seed in any::<u64>(),
        i in 1usize..=5,
        x1 in proptest::collection::vec(-50.0f64..50.0, 3),
        t in 0.0f64..100.0,
    ) {
        let sys = SystemRealization::sample(seed, 3, 5, 1.0).unwrap();
        let x = AgentState { x1, x2: vec![0.0; 3] };
        let (_, g) = sys.eval(i, &x, t).unwrap();
        prop_assert!((&g - g.transpose()).amax() < 1e-14);
        let floor = sys.gain_floor(i).unwrap();
        prop_assert!(floor >= 0.1);
        let eig = SymmetricEigen::new(g);
        prop_assert!(eig.eigenvalues.min() >= floor * (1.0 - 1e-12));
    }

    #[test]
    fn acceleration_is_f_plus_g_u(
        seed in any::<u64>(),
        x1 in proptest::collection::vec(-5.0f64..5.0, 3),
        x2 in proptest::collection::vec(-5.0f64..5.0, 3),
        u in proptest::collection::vec(-5.0f64..5.0, 3),
        t in 0.0f64..60.0,
    ) {
        let sys = SystemRealization::sample(seed, 3, 2, 1.0).unwrap();
        let x = AgentState { x1, x2 };
        let (f, g) = sys.eval(2, &x, t).unwrap();
        let want = DVector::from_vec(f) + g * DVector::from_vec(u.clone());
        let got = sys.acceleration(2, &x, t, &u).unwrap();
        for (a, b) in got.iter().zip(want.iter()) {
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn drift_is_bounded(seed in any::<u64>(), x1 in proptest::collection::vec(-1e3f64..1e3, 3), t in 0.0f64..1e3) {
        // |A tanh(Bx)| + |c| does not grow with the state.
        let sys = SystemRealization::sample(seed, 3, 1, 1.0).unwrap();
        let (f, _) = sys.eval(1, &AgentState { x1, x2: vec![0.0; 3] }, t).unwrap();
        let (f0, _) = sys.eval(1, &AgentState::zeros(3), t).unwrap();
        let bound: f64 = f0.iter().map(|v| v.abs()).sum::<f64>() + 100.0;
        prop_assert!(f.iter().all(|v| v.abs() < bound));
    }
}
