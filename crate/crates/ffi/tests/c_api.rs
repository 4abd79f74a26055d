use std::ffi::{CStr, CString};
use std::ptr;

use bayesrom_ffi::*;

const QUAD: BayesromStructure = BayesromStructure {
    linear: true,
    quadratic: true,
    constant: false,
};

/// Snapshots of `q' = -q` sampled exactly, so the derivatives are consistent.
fn decay_data(r: usize, k: usize) -> (Vec<f64>, Vec<f64>) {
    let mut q = Vec::with_capacity(r * k);
    for j in 0..k {
        let t = j as f64 * 0.05;
        for i in 0..r {
            q.push((1.0 + i as f64 + 0.3 * (7.0 * t + i as f64).sin()) * (-t).exp());
        }
    }
    let dq = q.iter().map(|v| -v).collect();
    (q, dq)
}

fn last_error() -> String {
    let p = bayesrom_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn fit(r: usize, k: usize) -> *mut BayesromPosterior {
    let (q, dq) = decay_data(r, k);
    let lam = vec![1e-8; r];
    let mut post = ptr::null_mut();
    let st = unsafe { bayesrom_posterior_fit(q.as_ptr(), dq.as_ptr(), r, k, QUAD, lam.as_ptr(), &mut post) };
    assert_eq!(st, BayesromStatus::Ok);
    assert!(bayesrom_last_error().is_null());
    post
}

#[test]
fn version_is_the_crate_version() {
    let v = unsafe { CStr::from_ptr(bayesrom_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn fit_recovers_linear_decay_and_reports_shapes() {
    let r = 3;
    let post = fit(r, 80);
    let d = unsafe { bayesrom_posterior_width(post) };
    assert_eq!(d, bayesrom_operator_width(r, QUAD));
    assert_eq!(d, r + r * (r + 1) / 2);
    assert_eq!(unsafe { bayesrom_posterior_rank(post) }, r);

    let mut mean = vec![0.0; r * d];
    assert_eq!(unsafe { bayesrom_posterior_mean(post, mean.as_mut_ptr(), mean.len()) }, BayesromStatus::Ok);
    for i in 0..r {
        for j in 0..d {
            let want = if j == i { -1.0 } else { 0.0 };
            assert!((mean[j * r + i] - want).abs() < 1e-5, "O[{i},{j}] = {}", mean[j * r + i]);
        }
    }

    let mut s2 = vec![0.0; r];
    assert_eq!(unsafe { bayesrom_posterior_noise_variances(post, s2.as_mut_ptr(), r) }, BayesromStatus::Ok);
    assert!(s2.iter().all(|v| v.is_finite() && *v >= 0.0));

    let mut cov = vec![0.0; d * d];
    assert_eq!(
        unsafe { bayesrom_posterior_row_covariance(post, 1, cov.as_mut_ptr(), cov.len()) },
        BayesromStatus::Ok
    );
    for a in 0..d {
        assert!(cov[a * d + a] >= 0.0);
        for b in 0..d {
            assert!((cov[a * d + b] - cov[b * d + a]).abs() <= 1e-12 * cov[a * d + a].abs().max(1e-300));
        }
    }
    unsafe { bayesrom_posterior_free(post) };
}

#[test]
fn wrong_buffer_length_is_a_dimension_mismatch() {
    let post = fit(2, 40);
    let mut buf = vec![0.0; 3];
    let st = unsafe { bayesrom_posterior_mean(post, buf.as_mut_ptr(), buf.len()) };
    assert_eq!(st, BayesromStatus::DimensionMismatch);
    assert!(last_error().contains("need"));
    let st = unsafe { bayesrom_posterior_row_covariance(post, 5, buf.as_mut_ptr(), buf.len()) };
    assert_eq!(st, BayesromStatus::InvalidArgument);
    unsafe { bayesrom_posterior_free(post) };
}

#[test]
fn null_pointers_are_reported_not_dereferenced() {
    let mut post = ptr::null_mut();
    let lam = [1.0];
    let st = unsafe { bayesrom_posterior_fit(ptr::null(), ptr::null(), 1, 5, QUAD, lam.as_ptr(), &mut post) };
    assert_eq!(st, BayesromStatus::NullPointer);
    assert!(post.is_null());
    assert!(last_error().contains("states"));

    let mut rom = ptr::null_mut();
    assert_eq!(unsafe { bayesrom_rom_from_mean(ptr::null(), &mut rom) }, BayesromStatus::NullPointer);
    assert_eq!(unsafe { bayesrom_posterior_rank(ptr::null()) }, 0);
    assert_eq!(unsafe { bayesrom_rom_rank(ptr::null()) }, 0);
    unsafe {
        bayesrom_posterior_free(ptr::null_mut());
        bayesrom_rom_free(ptr::null_mut());
    }
}

#[test]
fn zero_dimensions_and_empty_structure_are_invalid() {
    let (q, dq) = decay_data(2, 10);
    let lam = [1.0, 1.0];
    let mut post = ptr::null_mut();
    let st = unsafe { bayesrom_posterior_fit(q.as_ptr(), dq.as_ptr(), 0, 10, QUAD, lam.as_ptr(), &mut post) };
    assert_eq!(st, BayesromStatus::InvalidArgument);
    let none = BayesromStructure {
        linear: false,
        quadratic: false,
        constant: false,
    };
    let st = unsafe { bayesrom_posterior_fit(q.as_ptr(), dq.as_ptr(), 2, 10, none, lam.as_ptr(), &mut post) };
    assert_eq!(st, BayesromStatus::InvalidArgument);
    assert!(post.is_null());
}

#[test]
fn unregularized_rank_deficient_fit_is_numerical() {
    // Fewer snapshots than operator entries with λ = 0.
    let (q, dq) = decay_data(3, 4);
    let lam = [0.0; 3];
    let mut post = ptr::null_mut();
    let st = unsafe { bayesrom_posterior_fit(q.as_ptr(), dq.as_ptr(), 3, 4, QUAD, lam.as_ptr(), &mut post) };
    assert_eq!(st, BayesromStatus::Numerical, "{}", last_error());
}

#[test]
fn evidence_fit_converges_and_reports_iterations() {
    let (mut q, dq) = decay_data(2, 60);
    for (j, v) in q.iter_mut().enumerate() {
        *v += 1e-3 * ((j * 37 % 11) as f64 - 5.0);
    }
    let mut post = ptr::null_mut();
    let mut converged = false;
    let mut iterations = usize::MAX;
    let st = unsafe {
        bayesrom_posterior_fit_evidence(
            q.as_ptr(),
            dq.as_ptr(),
            2,
            60,
            QUAD,
            1.0,
            1e-6,
            200,
            &mut post,
            &mut converged,
            &mut iterations,
        )
    };
    assert_eq!(st, BayesromStatus::Ok, "{}", last_error());
    assert!(converged);
    assert!(iterations > 0 && iterations <= 200);
    unsafe { bayesrom_posterior_free(post) };
}

#[test]
fn save_and_load_round_trip() {
    let post = fit(2, 30);
    let dir = tempfile::tempdir().unwrap();
    let file = CString::new(dir.path().join("post.json").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { bayesrom_posterior_save(post, file.as_ptr()) }, BayesromStatus::Ok);

    let mut loaded = ptr::null_mut();
    assert_eq!(unsafe { bayesrom_posterior_load(file.as_ptr(), &mut loaded) }, BayesromStatus::Ok);
    let d = unsafe { bayesrom_posterior_width(post) };
    let (mut a, mut b) = (vec![0.0; 2 * d], vec![0.0; 2 * d]);
    unsafe {
        bayesrom_posterior_mean(post, a.as_mut_ptr(), a.len());
        bayesrom_posterior_mean(loaded, b.as_mut_ptr(), b.len());
    }
    assert_eq!(a, b);

    let missing = CString::new(dir.path().join("nope.json").to_str().unwrap()).unwrap();
    let mut none = ptr::null_mut();
    assert_eq!(unsafe { bayesrom_posterior_load(missing.as_ptr(), &mut none) }, BayesromStatus::Io);

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{\"rows\": 3}").unwrap();
    let bad = CString::new(bad.to_str().unwrap()).unwrap();
    assert_eq!(unsafe { bayesrom_posterior_load(bad.as_ptr(), &mut none) }, BayesromStatus::Format);
    assert!(none.is_null());
    unsafe {
        bayesrom_posterior_free(post);
        bayesrom_posterior_free(loaded);
    }
}

#[test]
fn mean_rom_integrates_exponential_decay() {
    let r = 2;
    let post = fit(r, 80);
    let mut rom = ptr::null_mut();
    assert_eq!(unsafe { bayesrom_rom_from_mean(post, &mut rom) }, BayesromStatus::Ok);
    assert_eq!(unsafe { bayesrom_rom_rank(rom) }, r);

    let q0 = [1.0, -2.0];
    let times: Vec<f64> = (0..=10).map(|i| i as f64 * 0.1).collect();
    let mut out = vec![0.0; r * times.len()];
    let mut stable = false;
    let st = unsafe {
        bayesrom_rom_integrate(rom, q0.as_ptr(), times.as_ptr(), times.len(), f64::NAN, out.as_mut_ptr(), &mut stable)
    };
    assert_eq!(st, BayesromStatus::Ok);
    assert!(stable);
    for (j, t) in times.iter().enumerate() {
        for i in 0..r {
            assert!((out[j * r + i] - q0[i] * (-t).exp()).abs() < 1e-4);
        }
    }
    unsafe {
        bayesrom_rom_free(rom);
        bayesrom_posterior_free(post);
    }
}

#[test]
fn explicit_rom_blow_up_is_flagged_and_padded_with_nan() {
    // q' = q² blows up at t = 1 from q0 = 1.
    let s = BayesromStructure {
        linear: false,
        quadratic: true,
        constant: false,
    };
    assert_eq!(bayesrom_operator_width(1, s), 1);
    let op = [1.0];
    let mut rom = ptr::null_mut();
    assert_eq!(unsafe { bayesrom_rom_new(op.as_ptr(), 1, s, &mut rom) }, BayesromStatus::Ok);
    let times: Vec<f64> = (0..=20).map(|i| i as f64 * 0.1).collect();
    let mut out = vec![0.0; times.len()];
    let mut stable = true;
    let q0 = [1.0];
    let st = unsafe {
        bayesrom_rom_integrate(rom, q0.as_ptr(), times.as_ptr(), times.len(), 100.0, out.as_mut_ptr(), &mut stable)
    };
    assert_eq!(st, BayesromStatus::Ok);
    assert!(!stable);
    assert!((out[5] - 2.0).abs() < 1e-5);
    assert!(out.last().unwrap().is_nan());

    let bad_grid = [0.0, 0.0];
    let mut out2 = [0.0; 2];
    let st = unsafe { bayesrom_rom_integrate(rom, q0.as_ptr(), bad_grid.as_ptr(), 2, 0.0, out2.as_mut_ptr(), &mut stable) };
    assert_eq!(st, BayesromStatus::InvalidArgument);
    unsafe { bayesrom_rom_free(rom) };
}

#[test]
fn samples_are_reproducible_by_seed_and_index() {
    let r = 2;
    let post = fit(r, 40);
    let draw = |seed: u64, index: u64| {
        let mut rom = ptr::null_mut();
        assert_eq!(unsafe { bayesrom_rom_sample(post, seed, index, &mut rom) }, BayesromStatus::Ok);
        let q0 = [1.0, 1.0];
        let times = [0.0, 0.5];
        let mut out = vec![0.0; 2 * r];
        let mut stable = false;
        unsafe {
            bayesrom_rom_integrate(rom, q0.as_ptr(), times.as_ptr(), 2, 0.0, out.as_mut_ptr(), &mut stable);
            bayesrom_rom_free(rom);
        }
        out
    };
    assert_eq!(draw(3, 0), draw(3, 0));
    assert_ne!(draw(3, 0), draw(3, 1));
    assert_ne!(draw(3, 0), draw(4, 0));
    unsafe { bayesrom_posterior_free(post) };
}

#[test]
fn errors_are_thread_local() {
    let mut post = ptr::null_mut();
    let lam = [1.0];
    unsafe { bayesrom_posterior_fit(ptr::null(), ptr::null(), 1, 1, QUAD, lam.as_ptr(), &mut post) };
    assert!(!bayesrom_last_error().is_null());
    std::thread::spawn(|| assert!(bayesrom_last_error().is_null())).join().unwrap();
}
