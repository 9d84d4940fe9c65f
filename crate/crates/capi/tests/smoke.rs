//! Exercises the C ABI through the exported symbols, the way a foreign
//! binding would.

use std::ptr;

use fbsde_lab_capi::*;

#[test]
fn version_is_a_c_string() {
    let version = fbsde_version();
    assert!(!version.is_null());
    let text = unsafe { std::ffi::CStr::from_ptr(version) }.to_str().unwrap();
    assert!(!text.is_empty());
}

#[test]
fn null_out_pointers_are_rejected() {
    unsafe {
        assert_eq!(
            fbsde_grid_new(0.0, 1.0, 8, ptr::null_mut()),
            FbsdeStatus::NullPointer
        );
        let mut out = ptr::null_mut();
        assert_eq!(
            fbsde_brownian_new(ptr::null(), 4, 1, &mut out),
            FbsdeStatus::NullPointer
        );
    }
}

#[test]
fn invalid_grid_arguments_are_rejected() {
    let mut grid = ptr::null_mut();
    unsafe {
        assert_eq!(
            fbsde_grid_new(1.0, 1.0, 8, &mut grid),
            FbsdeStatus::InvalidArgument
        );
        assert_eq!(
            fbsde_grid_new(0.0, 1.0, 0, &mut grid),
            FbsdeStatus::InvalidArgument
        );
    }
}

#[test]
fn end_to_end_solve_through_the_abi() {
    unsafe {
        let mut grid = ptr::null_mut();
        assert_eq!(fbsde_grid_new(0.0, 1.0, 64, &mut grid), FbsdeStatus::Ok);
        let mut noise = ptr::null_mut();
        assert_eq!(
            fbsde_brownian_new(grid, 200, 42, &mut noise),
            FbsdeStatus::Ok
        );
        let mut problem = ptr::null_mut();
        assert_eq!(
            fbsde_problem_example1(1.0, 0.0, 1.0, 0.0, 1.0, 1.0, &mut problem),
            FbsdeStatus::Ok
        );
        let mut options = fbsde_solver_options_default();
        options.spatial_center = 1.0;
        options.spatial_nodes = 61;
        let mut field = ptr::null_mut();
        assert_eq!(
            fbsde_field_build(problem, &options, grid, &mut field),
            FbsdeStatus::Ok
        );

        // u(0.5, 2) = 0.5 * 2 for this instance.
        let x = [2.0f64];
        let mut u = [0.0f64];
        assert_eq!(
            fbsde_field_eval(field, 0.5, x.as_ptr(), 1, u.as_mut_ptr(), 1),
            FbsdeStatus::Ok
        );
        assert!((u[0] - 1.0).abs() < 1e-6, "u = {}", u[0]);

        let mut slope = 0.0f64;
        assert_eq!(
            fbsde_field_lipschitz_max(field, &mut slope),
            FbsdeStatus::Ok
        );
        assert!((slope - 1.0).abs() < 1e-6);

        let mut solution = ptr::null_mut();
        assert_eq!(
            fbsde_solve(problem, field, noise, &mut solution),
            FbsdeStatus::Ok
        );
        let mut n_paths = 0usize;
        assert_eq!(
            fbsde_solution_n_paths(solution, &mut n_paths),
            FbsdeStatus::Ok
        );
        assert_eq!(n_paths, 200);

        let mut x_path = vec![0.0f64; 65];
        let mut y_path = vec![0.0f64; 65];
        let mut written = 0usize;
        assert_eq!(
            fbsde_solution_path(solution, 0, 7, x_path.as_mut_ptr(), 65, &mut written),
            FbsdeStatus::Ok
        );
        assert_eq!(written, 65);
        assert_eq!(
            fbsde_solution_path(solution, 1, 7, y_path.as_mut_ptr(), 65, &mut written),
            FbsdeStatus::Ok
        );
        // Y_k = t_k X_k on this instance.
        for k in 0..=64 {
            let t = k as f64 / 64.0;
            assert!((y_path[k] - t * x_path[k]).abs() < 1e-8);
        }
        assert_eq!(
            fbsde_solution_path(solution, 0, 7, x_path.as_mut_ptr(), 10, &mut written),
            FbsdeStatus::BufferTooSmall
        );
        assert_eq!(
            fbsde_solution_path(solution, 9, 7, x_path.as_mut_ptr(), 65, &mut written),
            FbsdeStatus::InvalidArgument
        );

        let mut residual = f64::NAN;
        assert_eq!(
            fbsde_solution_terminal_residual_mean(solution, &mut residual),
            FbsdeStatus::Ok
        );
        assert!(residual < 1e-8);

        fbsde_solution_free(solution);
        fbsde_field_free(field);
        fbsde_problem_free(problem);
        fbsde_brownian_free(noise);
        fbsde_grid_free(grid);
    }
}

#[test]
fn affine_constructor_builds_the_martingale_problem() {
    unsafe {
        let coefficients = FbsdeAffineScalar {
            drift_x: 0.0,
            drift_y: 0.0,
            drift_z: 0.0,
            drift_0: 0.0,
            diffusion_x: 0.0,
            diffusion_y: 0.0,
            diffusion_z: 0.0,
            diffusion_0: 1.0,
            driver_x: 0.0,
            driver_y: 0.0,
            driver_z: 0.0,
            driver_0: 0.0,
            terminal_x: 1.0,
            terminal_0: 0.0,
        };
        let mut problem = ptr::null_mut();
        assert_eq!(
            fbsde_problem_affine(&coefficients, 0.0, 1.0, 0.0, &mut problem),
            FbsdeStatus::Ok
        );
        let mut grid = ptr::null_mut();
        assert_eq!(fbsde_grid_new(0.0, 1.0, 16, &mut grid), FbsdeStatus::Ok);
        let options = fbsde_solver_options_default();
        let mut field = ptr::null_mut();
        assert_eq!(
            fbsde_field_build(problem, &options, grid, &mut field),
            FbsdeStatus::Ok
        );
        let x = [0.75f64];
        let mut u = [0.0f64];
        assert_eq!(
            fbsde_field_eval(field, 0.25, x.as_ptr(), 1, u.as_mut_ptr(), 1),
            FbsdeStatus::Ok
        );
        assert!((u[0] - 0.75).abs() < 1e-8);
        fbsde_field_free(field);
        fbsde_grid_free(grid);
        fbsde_problem_free(problem);
    }
}

#[test]
fn scalar_helpers_match_the_library() {
    unsafe {
        let mut kp = 0.0f64;
        assert_eq!(fbsde_compute_kp(2.0, 1.0, 1.0, &mut kp), FbsdeStatus::Ok);
        assert_eq!(kp, 20.0 / 3.0);
        assert_eq!(
            fbsde_compute_kp(1.0, 1.0, 1.0, &mut kp),
            FbsdeStatus::InvalidArgument
        );

        let mut gate = false;
        assert_eq!(fbsde_gate_lipschitz(kp, 0.1, 1.0, &mut gate), FbsdeStatus::Ok);
        assert!(gate);
        assert_eq!(fbsde_gate_lipschitz(2.0, 0.5, 1.0, &mut gate), FbsdeStatus::Ok);
        assert!(!gate);

        let mut value = 0.0f64;
        let mut saturated = true;
        assert_eq!(
            fbsde_audit_constant_growth(1.0, 2.0, 2, &mut value, &mut saturated),
            FbsdeStatus::Ok
        );
        assert_eq!(value, 6.0);
        assert!(!saturated);

        let mut riccati = 0.0f64;
        assert_eq!(
            fbsde_riccati_value(0.0, 1.0, 1.0, 1.0, 0.0, 0.0, 1.0, 256, 1.0, &mut riccati),
            FbsdeStatus::Ok
        );
        assert!((riccati - 1.0f64.tanh()).abs() < 1e-6);
    }
}
