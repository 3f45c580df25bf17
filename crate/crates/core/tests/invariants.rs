use std::f64::consts::PI;

use hbunfold::beamforming::{
    initial_precoders, quantize_phases, sca_digital, sca_hybrid, sca_step, AnalogPhases, ScaConfig,
    ScaState,
};
use hbunfold::channel::{equivalent_channel, random_pilots, sample_channel, ChannelParams, SystemDims};
use hbunfold::cli::figure::mean_std;
use hbunfold::estimation::{ls_estimate, rls_estimate};
use hbunfold::metrics::{nmse, pilot_overhead, sum_rate, OverheadInputs, OverheadScheme};
use hbunfold::numerics::{c64, CMatrix, Rng};
use proptest::prelude::*;

fn equivalent(seed: u64, snr: f64) -> (SystemDims, Vec<CMatrix>, Vec<CMatrix>) {
    let dims = SystemDims::desk(snr);
    let mut rng = Rng::new(seed);
    let h = sample_channel(&dims, &ChannelParams::default(), &mut rng);
    let (f_rf, w_rf) = AnalogPhases::random(&dims, false, &mut rng).analog(dims.users);
    let h_eq = equivalent_channel(&h, &f_rf, &w_rf).unwrap().h_eq;
    (dims, f_rf, h_eq)
}

fn config() -> ProptestConfig {
    ProptestConfig::with_cases(32)
}

proptest! {
    #![proptest_config(config())]

    #[test]
    fn sca_output_meets_the_constraints(seed in any::<u64>(), snr in -10.0f64..30.0) {
        let dims = SystemDims::desk(snr);
        let mut rng = Rng::new(seed);
        let h = sample_channel(&dims, &ChannelParams::default(), &mut rng);
        let phases = AnalogPhases::random(&dims, seed % 2 == 0, &mut rng);
        let bf = sca_hybrid(&h, &phases, &dims, &ScaConfig::default()).unwrap();
        prop_assert!(bf.modulus_error() <= 1e-12);
        prop_assert!(bf.power_error(dims.streams) <= 1e-9);
        let h_eq = equivalent_channel(&h, &bf.f_rf, &bf.w_rf).unwrap().h_eq;
        prop_assert!(sum_rate(&bf, &h_eq, &dims).total >= 0.0);
    }

    #[test]
    fn sca_objective_never_increases_at_desk_snr(seed in any::<u64>()) {
        let (dims, f_rf, h_eq) = equivalent(seed, 10.0);
        let cfg = ScaConfig { max_iter: 20, tol: 0.0, ..ScaConfig::default() };
        let out = sca_digital(&h_eq, &dims, &f_rf, &cfg, initial_precoders(&dims, &f_rf).unwrap()).unwrap();
        for w in out.trace.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-8, "{} -> {}", w[0], w[1]);
        }
    }

    // At any SNR the iteration descends the penalized surrogate
    // Σ (ε α^t / ln α − t) + Σ τ ‖F‖², of which Σ log ε is the limit at low noise.
    #[test]
    fn sca_penalized_surrogate_never_increases(seed in any::<u64>(), snr in -10.0f64..30.0) {
        let (dims, f_rf, h_eq) = equivalent(seed, snr);
        let cfg = ScaConfig::default();
        let ln = cfg.alpha.ln();
        let mut state = ScaState::new(&dims, initial_precoders(&dims, &f_rf).unwrap());
        let mut prev = f64::INFINITY;
        for _ in 0..20 {
            sca_step(&mut state, &h_eq, &dims, &f_rf, &cfg).unwrap();
            let mut j = 0.0;
            for k in 0..dims.users {
                j += cfg.tau(&dims, k) * state.f_bb[k].frob_norm_sqr();
                for l in 0..dims.streams {
                    let t = state.t[k][l];
                    j += state.eps[k][l] * cfg.alpha.powf(t) / ln - t;
                }
            }
            prop_assert!(j <= prev + 1e-9 * prev.abs().max(1.0), "{prev} -> {j}");
            prev = j;
        }
    }

    #[test]
    fn rls_matches_ls_on_noiseless_pilots(seed in any::<u64>(), beta in 0.9f64..1.0) {
        let mut rng = Rng::new(seed);
        let h = rng.complex_normal_matrix(2, 4, 1.0);
        let x = random_pilots(4, 12, 1.0, &mut rng);
        let y = h.matmul(&x);
        let rls = rls_estimate(&x, &y, beta, 1e-8).unwrap();
        let ls = ls_estimate(&y, &x).unwrap();
        prop_assert!((&rls - &ls).frob_norm() / ls.frob_norm() < 1e-4);
    }

    #[test]
    fn quantized_phases_sit_on_the_grid(angles in prop::collection::vec(-10.0f64..10.0, 1..16), bits in 1u32..9) {
        let phi = CMatrix::from_fn(1, angles.len(), |_, j| c64(angles[j], 0.0));
        let q = quantize_phases(&phi, bits);
        let step = 2.0 * PI / (1u64 << bits) as f64;
        for (a, b) in phi.data().iter().zip(q.data()) {
            let level = (b.re + PI) / step;
            prop_assert!((level - level.round()).abs() < 1e-9);
            prop_assert!((-PI..PI).contains(&b.re));
            let d = (a.re - b.re).rem_euclid(2.0 * PI);
            prop_assert!(d.min(2.0 * PI - d) <= step / 2.0 + 1e-12);
        }
    }

    #[test]
    fn nmse_is_scale_free(seed in any::<u64>(), scale in 0.1f64..10.0) {
        let mut rng = Rng::new(seed);
        let h = rng.complex_normal_matrix(3, 2, 1.0);
        let e = rng.complex_normal_matrix(3, 2, 0.1);
        let a = nmse(&(&h + &e), &h).unwrap();
        let b = nmse(&(&h + &e).scale_real(scale), &h.scale_real(scale)).unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * a.max(1.0));
        prop_assert_eq!(nmse(&h, &h).unwrap(), 0.0);
    }

    #[test]
    fn std_is_shift_invariant(values in prop::collection::vec(-1e3f64..1e3, 1..20), shift in -1e3f64..1e3) {
        let (m, s) = mean_std(&values);
        let shifted: Vec<f64> = values.iter().map(|v| v + shift).collect();
        let (m2, s2) = mean_std(&shifted);
        prop_assert!((m2 - m - shift).abs() <= 1e-9);
        prop_assert!((s2 - s).abs() <= 1e-9);
        let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(m >= lo - 1e-9 && m <= hi + 1e-9);
    }

    #[test]
    fn derived_streams_are_reproducible(seed in any::<u64>(), id in any::<u64>()) {
        let mut a = Rng::new(seed).derive(id);
        let mut b = Rng::new(seed).derive(id);
        let mut c = Rng::new(seed).derive(id.wrapping_add(1));
        let (x, y, z) = (a.next_u64(), b.next_u64(), c.next_u64());
        prop_assert_eq!(x, y);
        prop_assert_ne!(x, z);
    }

    // Online undercuts single-timescale once slots·(Q_f − Q_eq) ≥ Q_f, i.e. from 3 slots at desk scale.
    #[test]
    fn overhead_grows_with_frames(frames in 1u64..500, slots in 3u64..64, bits in 1u64..16) {
        let dims = SystemDims::desk(10.0);
        let at = |f| OverheadInputs::from_dims(&dims, bits, 16, f, slots, 100);
        for scheme in [OverheadScheme::Single, OverheadScheme::Offline, OverheadScheme::Online] {
            prop_assert!(pilot_overhead(scheme, &at(frames + 1)) > pilot_overhead(scheme, &at(frames)));
        }
        prop_assert!(pilot_overhead(OverheadScheme::Online, &at(frames)) <= pilot_overhead(OverheadScheme::Single, &at(frames)));
    }
}
