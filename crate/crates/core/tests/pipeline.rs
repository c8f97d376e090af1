use arzdelay::grid::Grid;
use arzdelay::io::config::RunConfig;
use arzdelay::io::output::{norm_rows, read_norms, write_norms};
use arzdelay::linearize::TrafficField;
use arzdelay::model::equilibrium;
use arzdelay::simulator::{run_scenario, step_nonlinear};

#[test]
fn equilibrium_is_a_fixed_point_of_the_road() {
    let cfg = RunConfig::default();
    let eq = equilibrium(&cfg.params).unwrap();
    let grid = Grid::with_spacing(cfg.params.length, cfg.sim.dx).unwrap();
    let mut field = TrafficField::uniform(grid, eq.rho_bar, eq.v_bar);
    let h = vec![cfg.params.h_acc_bar; grid.nodes()];
    for n in 0..200 {
        field = step_nonlinear(&field, &h, &cfg.params, eq.tau_mix, cfg.sim.dt, n as f64 * cfg.sim.dt).unwrap();
    }
    let drift = field.rho.iter().map(|r| (r - eq.rho_bar).abs() / eq.rho_bar).fold(0.0, f64::max);
    let vdrift = field.v.iter().map(|v| (v - eq.v_bar).abs() / eq.v_bar).fold(0.0, f64::max);
    assert!(drift < 1e-12 && vdrift < 1e-12, "{drift:e} {vdrift:e}");
}

#[test]
fn configured_run_survives_a_trip_through_the_norms_file() {
    let cfg = RunConfig::from_toml("[simulation]\nt_final = \"20 s\"\n").unwrap();
    let result = run_scenario(&cfg.sim, &cfg.params).unwrap();
    let rows = norm_rows(&result);
    let mut buf = Vec::new();
    write_norms(&mut buf, &rows).unwrap();
    assert_eq!(read_norms(buf.as_slice()).unwrap(), rows);
    assert_eq!(rows.len(), 41);
    assert!(rows.windows(2).all(|w| w[1].t > w[0].t));
}
