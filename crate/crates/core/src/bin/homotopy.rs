// Temporary probe: does the full-length step across the vortex onset have
// a solution, and can continuation in the quadratic-term strength reach it?
use nsbiot::mesh::merge_trace_partitions;
use nsbiot::scenarios::{filter_data, filter_meshes, filter_params, P_DATUM, P_OUT};
use nsbiot::system::{CoupledSystem, Field, NewtonConfig, NewtonSolver, SystemState};

fn main() {
    let params = filter_params();
    let (mesh_f, mesh_p) = filter_meshes().unwrap();
    let trace_f = mesh_f.extract_trace_mesh().unwrap();
    let trace_p = mesh_p.extract_trace_mesh().unwrap();
    let merged = merge_trace_partitions(&trace_f, &trace_p).unwrap();
    let mut sys = CoupledSystem::new(
        params, 1.0, &mesh_f, &mesh_p, &trace_f, &trace_p, &merged, filter_data(),
    )
    .unwrap();

    let mut x0 = vec![0.0; sys.map.total()];
    x0[sys.map.range(Field::PP)].fill(P_OUT - P_DATUM);
    x0[sys.map.range(Field::Lambda)].fill(P_OUT - P_DATUM);
    let v0 = vec![0.0; sys.map.len(Field::EtaP)];
    let mut state = SystemState::new(&sys.map, x0, &v0, 1.0);
    let mut solver = NewtonSolver::new(NewtonConfig::default());

    for step in 1..=18 {
        let rep = solver.step(&sys, &mut state).unwrap();
        let u = sys.map.slice(&state.x, Field::UF);
        let unorm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
        eprintln!("t = {step}: iters = {}, |u| = {unorm:.4e}", rep.iterations);
    }

    // theta continuation for the t = 19 step: each solve restarts from the
    // same t = 18 history, but warm-starts Newton from the previous theta's
    // solution by seeding state.x.
    let base = state.clone();
    let mut thetas = vec![0.0];
    let mut th = 0.1;
    while th < 0.999 {
        thetas.push(th);
        th += 0.1;
    }
    thetas.push(1.0);

    let mut warm = base.x.clone();
    let mut theta_done = -1.0;
    for &theta in &thetas {
        sys.conv_theta = theta;
        let mut trial = base.clone();
        trial.x = warm.clone();
        match solver.step(&sys, &mut trial) {
            Ok(rep) => {
                let u = sys.map.slice(&trial.x, Field::UF);
                let unorm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
                eprintln!(
                    "theta = {theta:.2}: converged, iters = {}, |u| = {unorm:.4e}",
                    rep.iterations
                );
                warm = trial.x.clone();
                theta_done = theta;
            }
            Err(e) => {
                eprintln!("theta = {theta:.2}: FAILED: {e:?}");
                break;
            }
        }
    }
    eprintln!("continuation reached theta = {theta_done}");
}
