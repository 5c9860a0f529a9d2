use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rlf_core::extension::{
    build_tube_function, mcshane_extend, pullback_values, tube_error_estimate, verify_directional_lipschitz,
    verify_mcshane, Certificate, TubeErrorEstimate, ROUNDOFF,
};
use rlf_core::flow::{
    build_flow_grid, default_thresholds, estimate_compressibility, lusin_budget_set, lusin_lipschitz_set, FlowGrid,
    Integrator, LusinSet,
};
use rlf_core::geometry::{dist, BoxRegion};
use rlf_core::metric::{
    build_graph, convergence_scan, d0_distance, equivalence_constants, MetricConfig, ScanTable, D0,
};
use rlf_core::transport::{
    check_lagrangian_property, density_ratio_field, eulerian_mass, lagrangian_mass, lagrangian_solution,
    pullback_along_flow, LagrangianView,
};
use rlf_core::vectorfield::{check_assumptions, AssumptionSampling, VectorField};
use rlf_core::weakform::{
    change_of_variables_check, eulerian_residual, fv_solve, l1_distance, l1_norm, lagrangian_residual, FvSolver,
    Quadrature,
};

use crate::output::{num, Chart, Output};
use crate::scenario::{Loaded, LusinMethod};
use crate::CliError;

pub struct Context<'a> {
    pub loaded: &'a Loaded,
    pub out: Output,
    pub seed: u64,
}

impl Context<'_> {
    fn field(&self) -> Result<VectorField, CliError> {
        Ok(self.loaded.field()?)
    }

    fn integrator(&self) -> Integrator {
        Integrator::new(self.loaded.scenario.grid.step)
    }

    fn grid(&self, field: &VectorField) -> Result<FlowGrid, CliError> {
        self.grid_at(field, self.loaded.scenario.grid.dy)
    }

    fn grid_at(&self, field: &VectorField, dy: f64) -> Result<FlowGrid, CliError> {
        let g = &self.loaded.scenario.grid;
        Ok(build_flow_grid(field, g.radius, dy, &self.loaded.times(), &self.integrator())?)
    }

    fn metric_config(&self) -> MetricConfig {
        let m = &self.loaded.scenario.metric;
        MetricConfig {
            lattice_dx: self.loaded.lattice_dx(),
            pair_budget: m.pair_budget,
            seed: self.seed,
        }
    }

    fn lusin_sets(&self, grid: &FlowGrid) -> Result<Vec<LusinSet>, CliError> {
        let spec = &self.loaded.scenario.lusin;
        let thresholds = spec.thresholds.clone().unwrap_or_else(default_thresholds);
        spec.epsilons
            .iter()
            .map(|frac| {
                let eps = frac * grid.ball_measure();
                Ok(match spec.method {
                    LusinMethod::Budget => lusin_budget_set(grid, eps, self.seed)?,
                    LusinMethod::Threshold => lusin_lipschitz_set(grid, eps, &thresholds)?,
                })
            })
            .collect()
    }

    fn write_lusin(&mut self, grid: &FlowGrid, sets: &[LusinSet]) -> Result<(), CliError> {
        let rows: Vec<Vec<String>> = sets
            .iter()
            .map(|k| {
                let (a, b, j) = k.witness.map_or((String::new(), String::new(), String::new()), |(a, b, j)| {
                    (a.to_string(), b.to_string(), j.to_string())
                });
                vec![
                    num(k.epsilon),
                    num(k.epsilon / grid.ball_measure()),
                    num(k.threshold),
                    k.members.len().to_string(),
                    num(k.complement_measure),
                    num(k.lip_constant),
                    a,
                    b,
                    j,
                ]
            })
            .collect();
        self.out.table(
            "lusin.csv",
            &[
                "epsilon",
                "fraction",
                "threshold",
                "members",
                "complement_measure",
                "lip_constant",
                "witness_a",
                "witness_b",
                "witness_slice",
            ],
            &rows,
        )?;
        for (k, set) in sets.iter().enumerate() {
            self.out.csv_with(&format!("lusin_members_{k}.csv"), |w| set.write_csv(w))?;
        }
        let chart = Chart::new("Lusin set Lipschitz constant", "epsilon / |B_R|", "Lip(X on K)").line(
            "lip_constant",
            sets.iter()
                .map(|k| (k.epsilon / grid.ball_measure(), k.lip_constant))
                .collect(),
        );
        self.out.svg("lusin.svg", &chart)
    }
}

pub fn flow(ctx: &mut Context) -> Result<(), CliError> {
    let field = ctx.field()?;
    let grid = ctx.grid(&field)?;
    ctx.out.csv_with("flow_grid.csv", |w| grid.write_csv(w))?;

    let a = &ctx.loaded.scenario.assumptions;
    let bounds = grid.tube_bounds();
    let reach = a.box_radius.unwrap_or_else(|| {
        bounds
            .lo
            .iter()
            .chain(&bounds.hi)
            .fold(grid.radius(), |m, v| m.max(v.abs()))
    });
    let report = check_assumptions(&field, &AssumptionSampling::new(reach, a.t_samples, a.x_samples))?;
    ctx.out.table(
        "assumptions.csv",
        &["quantity", "value"],
        &[
            vec!["box_radius".into(), num(reach)],
            vec!["div_sup".into(), num(report.div_sup)],
            vec!["growth_sup".into(), num(report.growth_sup)],
            vec!["sobolev_seminorm".into(), num(report.sobolev_seminorm)],
            vec!["sobolev_p".into(), num(report.sobolev_p)],
            vec!["resolution".into(), num(report.resolution)],
            vec!["divergence_unbounded".into(), report.divergence_unbounded.to_string()],
        ],
    )?;
    let modulus: Vec<Vec<String>> = report.modulus_rows().iter().map(|r| r.iter().map(|v| num(*v)).collect()).collect();
    ctx.out.table("modulus.csv", &["radius", "delta", "omega"], &modulus)?;

    let c = estimate_compressibility(&grid);
    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    for j in 0..grid.time_count() {
        for i in (0..grid.count()).filter(|i| grid.is_active(*i)) {
            let r = grid.density_ratio(j, i);
            lo = lo.min(r);
            hi = hi.max(r);
        }
    }
    let bound = report.div_sup.exp();
    ctx.out.table(
        "compressibility.csv",
        &["c_estimate", "c_bound", "r_min", "r_max", "within_bound", "active", "escaped"],
        &[vec![
            num(c),
            num(bound),
            num(lo),
            num(hi),
            (lo >= (1.0 - ROUNDOFF) / bound && hi <= bound * (1.0 + ROUNDOFF)).to_string(),
            grid.active_count().to_string(),
            (grid.count() - grid.active_count()).to_string(),
        ]],
    )?;

    let sets = ctx.lusin_sets(&grid)?;
    ctx.write_lusin(&grid, &sets)?;

    let integ = ctx.integrator();
    let horizon = field.horizon();
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed);
    let dim = field.dim();
    let mut rows = Vec::new();
    while rows.len() < 100 {
        let y: Vec<f64> = (0..dim).map(|_| rng.gen_range(-grid.radius()..grid.radius())).collect();
        if y.iter().map(|v| v * v).sum::<f64>() > grid.radius() * grid.radius() {
            continue;
        }
        let t = rng.gen_range(0.0..horizon);
        let s = t * rng.gen_range(0.0..1.0);
        let (x, back, composed) = match (|| -> rlf_core::Result<_> {
            let x = integ.flow(&field, 0.0, t, &y)?;
            let back = integ.flow(&field, t, 0.0, &x)?;
            let mid = integ.flow(&field, 0.0, s, &y)?;
            Ok((x.clone(), back, integ.flow(&field, s, t, &mid)?))
        })() {
            Ok(v) => v,
            Err(rlf_core::Error::Escape { .. }) => continue,
            Err(e) => return Err(e.into()),
        };
        let mut row = vec![num(t), num(s)];
        row.extend(y.iter().map(|v| num(*v)));
        row.push(num(dist(&back, &y)));
        row.push(num(dist(&composed, &x)));
        rows.push(row);
    }
    let mut header = vec!["t".to_string(), "s".to_string()];
    header.extend((0..dim).map(|d| format!("y{d}")));
    header.push("round_trip_error".into());
    header.push("semigroup_error".into());
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    ctx.out.table("round_trip.csv", &header, &rows)
}

pub fn lusin(ctx: &mut Context) -> Result<(), CliError> {
    let field = ctx.field()?;
    let grid = ctx.grid(&field)?;
    let sets = ctx.lusin_sets(&grid)?;
    ctx.write_lusin(&grid, &sets)
}

fn mass_region(ctx: &Context) -> BoxRegion {
    BoxRegion::centered(ctx.loaded.scenario.field.dim, ctx.loaded.scenario.fv.box_radius)
}

pub fn transport(ctx: &mut Context) -> Result<(), CliError> {
    let field = ctx.field()?;
    let grid = ctx.grid(&field)?;
    let u0 = ctx.loaded.datum("transport")?;
    let u = lagrangian_solution(&field, &grid, u0.clone())?;
    ctx.out.csv_with("solution.csv", |w| u.write_csv(w))?;
    let r = density_ratio_field(&grid)?;
    ctx.out.csv_with("density_ratio.csv", |w| r.write_csv(w))?;
    let defect = check_lagrangian_property(&pullback_along_flow(&u, &grid)?, &grid)?;

    let region = mass_region(ctx);
    let view = LagrangianView::new(field.clone(), u0.clone(), ctx.integrator());
    let tube_mass = lagrangian_mass(&grid, &u0);
    let h = ctx.loaded.scenario.grid.dy;
    let m0 = eulerian_mass(&view, 0.0, &region, h)?;
    let mut rows = Vec::new();
    let mut pts = Vec::new();
    for &t in grid.times() {
        let m = eulerian_mass(&view, t, &region, h)?;
        rows.push(vec![num(t), num(m), num((m - m0).abs() / m0.abs().max(f64::MIN_POSITIVE)), num(tube_mass)]);
        pts.push((t, m));
    }
    ctx.out.table("mass.csv", &["t", "eulerian_mass", "relative_change", "lagrangian_tube_mass"], &rows)?;
    ctx.out.table("lagrangian_property.csv", &["defect"], &[vec![num(defect)]])?;
    let chart = Chart::new("Mass of the Lagrangian solution", "t", "mass")
        .line("eulerian (box)", pts)
        .line("lagrangian (tube)", grid.times().iter().map(|t| (*t, tube_mass)).collect());
    ctx.out.svg("mass.svg", &chart)
}

pub fn residual(ctx: &mut Context) -> Result<(), CliError> {
    let field = ctx.field()?;
    let u0 = ctx.loaded.datum("residual")?;
    let phi = ctx.loaded.test_function("residual")?;
    let view = LagrangianView::new(field.clone(), u0.clone(), ctx.integrator());
    let mut eul = Vec::new();
    let mut cov = Vec::new();
    let mut pts = (Vec::new(), Vec::new());
    for &h in &ctx.loaded.scenario.residual.levels {
        let q = Quadrature::new(h, h)?;
        let r = eulerian_residual(&view, &field, &phi, q)?;
        eul.push(vec![num(h), num(r.value), num(r.interior), num(r.initial)]);
        let grid = ctx.grid_at(&field, h)?;
        let floor = 1.0 / estimate_compressibility(&grid);
        let c = change_of_variables_check(&view, &field, &grid, &phi, q, floor)?;
        cov.push(vec![num(h), num(c.lagrangian.value), num(c.eulerian.value), num(c.difference)]);
        pts.0.push((h, r.value.abs()));
        pts.1.push((h, c.difference));
    }
    ctx.out.table("eulerian_residual.csv", &["h", "value", "interior", "initial"], &eul)?;
    ctx.out.table("change_of_variables.csv", &["h", "lagrangian", "eulerian", "difference"], &cov)?;

    let grid = ctx.grid(&field)?;
    let big_u = lagrangian_solution(&field, &grid, u0)?;
    let big_r = density_ratio_field(&grid)?;
    let floor = 1.0 / estimate_compressibility(&grid);
    let l = lagrangian_residual(&big_u, &big_r, &phi, &grid, floor)?;
    ctx.out.table(
        "lagrangian_residual.csv",
        &["dy", "value", "interior", "initial"],
        &[vec![num(grid.spacing()), num(l.value), num(l.interior), num(l.initial)]],
    )?;
    let chart = Chart::new("Residual refinement", "h", "absolute value")
        .log_x()
        .line("|eulerian residual|", pts.0)
        .line("change of variables", pts.1);
    ctx.out.svg("residual.svg", &chart)
}

fn write_scan(ctx: &mut Context, name: &str, table: &ScanTable) -> Result<(), CliError> {
    ctx.out.csv_with(&format!("{name}.csv"), |w| table.write_csv(w))?;
    let chart = Chart::new("Convergence of L_lambda", "lambda", "Lipschitz constant")
        .log_x()
        .line("L_lambda", table.rows.iter().map(|r| (r.lambda, r.l_lambda)).collect())
        .line("L (d0)", table.rows.iter().map(|r| (r.lambda, table.directional)).collect());
    ctx.out.svg(&format!("{name}.svg"), &chart)
}

pub fn metric_scan(ctx: &mut Context) -> Result<(), CliError> {
    let field = ctx.field()?;
    let grid = ctx.grid(&field)?;
    let psi = ctx.loaded.test_function("metric-scan")?;
    let sets = ctx.lusin_sets(&grid)?;
    let k = sets
        .first()
        .ok_or_else(|| CliError::Config("`metric-scan` needs at least one Lusin epsilon".into()))?;
    let cfg = ctx.metric_config();
    let tube = build_tube_function(&psi, &grid, k, cfg.pair_budget, ctx.seed)?;
    let lambdas = ctx.loaded.scenario.metric.lambdas.clone();
    let table = convergence_scan(&tube.samples, &grid, &cfg, &lambdas)?;
    write_scan(ctx, "scan", &table)?;

    let tol = ctx.loaded.scenario.metric.tube_tol.unwrap_or(0.5 * grid.spacing());
    let mut stats = Vec::new();
    let mut queries = Vec::new();
    for &lambda in &lambdas {
        let g = build_graph(&grid, cfg.lattice_dx, lambda)?;
        let (c1, c2) = equivalence_constants(&g, cfg.pair_budget, ctx.seed)?;
        stats.push(vec![
            num(lambda),
            num(g.lattice_dx()),
            g.node_count().to_string(),
            g.edge_count().to_string(),
            g.trajectory_node_count().to_string(),
            g.lattice().len().to_string(),
            num(g.max_snap()),
            num(c1),
            num(c2),
        ]);
        for (n, q) in ctx.loaded.scenario.metric.queries.iter().enumerate() {
            let m = g.distance((q.p[0], &q.p[1..]), (q.q[0], &q.q[1..]))?;
            let d0 = match d0_distance(&grid, (q.p[0], &q.p[1..]), (q.q[0], &q.q[1..]), tol) {
                D0::Finite(v) => num(v),
                D0::Infinite => "inf".into(),
            };
            queries.push(vec![
                n.to_string(),
                num(lambda),
                num(m.distance),
                num(m.source_snap),
                num(m.target_snap),
                d0,
            ]);
        }
    }
    ctx.out.table(
        "graph_stats.csv",
        &["lambda", "lattice_dx", "nodes", "edges", "trajectory_nodes", "lattice_nodes_per_slice", "max_snap", "c1", "c2"],
        &stats,
    )?;
    if !queries.is_empty() {
        ctx.out.table(
            "distances.csv",
            &["query", "lambda", "d_lambda", "source_snap", "target_snap", "d0"],
            &queries,
        )?;
    }
    Ok(())
}

pub fn extend(ctx: &mut Context) -> Result<(), CliError> {
    let field = ctx.field()?;
    let grid = ctx.grid(&field)?;
    let psi = ctx.loaded.test_function("extend")?;
    let u0 = ctx.loaded.datum("extend")?;
    let big_u = lagrangian_solution(&field, &grid, u0.clone())?;
    let big_r = density_ratio_field(&grid)?;
    let c = estimate_compressibility(&grid);
    let cfg = ctx.metric_config();
    let spec = ctx.loaded.scenario.metric.clone();
    let sets = ctx.lusin_sets(&grid)?;

    let mut certs = Vec::new();
    let mut estimates: Vec<TubeErrorEstimate> = Vec::new();
    let mut selection = Vec::new();
    for (k, set) in sets.iter().enumerate() {
        let tube = build_tube_function(&psi, &grid, set, cfg.pair_budget, ctx.seed)?;
        let table = convergence_scan(&tube.samples, &grid, &cfg, &spec.lambdas)?;
        write_scan(ctx, &format!("scan_{k}"), &table)?;
        let (lambda, within) = match table.select_lambda(spec.select_factor) {
            Some(l) => (l, true),
            None => (*spec.lambdas.last().unwrap(), false),
        };
        selection.push(vec![num(set.epsilon), num(lambda), within.to_string(), table.nonincreasing.to_string()]);
        let g = build_graph(&grid, cfg.lattice_dx, lambda)?;
        let ext = mcshane_extend(&tube, &g, spec.clamp, cfg.pair_budget, ctx.seed)?;
        ctx.out.csv_with(&format!("extension_{k}.csv"), |w| ext.write_csv(&g, w))?;
        let scan = verify_mcshane(&ext, &g, cfg.pair_budget, ctx.seed)?;
        if scan.lip_lambda > ext.l_lambda * (1.0 + ROUNDOFF) {
            return Err(CliError::Core(rlf_core::Error::Internal(format!(
                "extension Lipschitz constant {} exceeds L_lambda {}",
                scan.lip_lambda, ext.l_lambda
            ))));
        }
        let l_prime = verify_directional_lipschitz(&ext, &g);
        certs.push(Certificate {
            epsilon: set.epsilon,
            lambda,
            l: psi.lip(),
            l_lambda: ext.l_lambda,
            mcshane_lip: scan.lip_lambda,
            l_prime,
            euclid_lip: scan.lip_euclid,
            c2: scan.c2,
        });
        let psi_eps = pullback_values(&ext, &g, &grid);
        estimates.push(tube_error_estimate(
            &grid, &big_u, &big_r, &psi, &psi_eps, set, l_prime, c, 1.0 / c,
        )?);
    }
    ctx.out.csv_with("certificates.csv", |w| Certificate::write_csv(&certs, w))?;
    ctx.out.csv_with("tube_error.csv", |w| TubeErrorEstimate::write_csv(&estimates, w))?;
    ctx.out.table("lambda_selection.csv", &["epsilon", "lambda", "within_factor", "nonincreasing"], &selection)?;

    if psi.support().is_some() {
        let view = LagrangianView::new(field.clone(), u0, ctx.integrator());
        let mut cov = Vec::new();
        for &h in &ctx.loaded.scenario.residual.levels {
            let gh = ctx.grid_at(&field, h)?;
            let floor = 1.0 / estimate_compressibility(&gh);
            let r = change_of_variables_check(&view, &field, &gh, &psi, Quadrature::new(h, h)?, floor)?;
            cov.push(vec![num(h), num(r.lagrangian.value), num(r.eulerian.value), num(r.difference)]);
        }
        ctx.out.table("change_of_variables.csv", &["h", "lagrangian", "eulerian", "difference"], &cov)?;
    } else {
        eprintln!("rlf-lab: skipping change_of_variables.csv: the test function has no compact support");
    }

    let chart = Chart::new("Tube error estimate", "epsilon", "value")
        .line("|error term|", estimates.iter().map(|e| (e.epsilon, e.error_term)).collect())
        .line("|lhs|", estimates.iter().map(|e| (e.epsilon, e.lhs)).collect())
        .line("bound", estimates.iter().map(|e| (e.epsilon, e.bound)).collect());
    ctx.out.svg("tube_error.svg", &chart)
}

pub fn uniqueness(ctx: &mut Context) -> Result<(), CliError> {
    let field = ctx.field()?;
    let u0 = ctx.loaded.datum("uniqueness")?;
    let phi = ctx.loaded.test_function("uniqueness")?;
    let fv = ctx.loaded.scenario.fv.clone();
    let t_final = fv.t_final.unwrap_or(field.horizon());
    let region = mass_region(ctx);
    let reference = LagrangianView::new(field.clone(), u0.clone(), Integrator::new(fv.reference_step));
    let grid = ctx.grid(&field)?;
    let big_r = density_ratio_field(&grid)?;
    let floor = 1.0 / estimate_compressibility(&grid);
    let mut snapshots: Vec<f64> = grid.times().iter().copied().filter(|t| *t < t_final).collect();
    snapshots.push(t_final);
    let snapshots: Vec<f64> = if grid.times().contains(&t_final) {
        grid.times().to_vec()
    } else {
        snapshots
    };

    let ref_mass = l1_norm(&reference, t_final, &region, *fv.dx.last().unwrap())?;
    let mut rows = Vec::new();
    let mut res = Vec::new();
    let mut pts = Vec::new();
    for &dx in &fv.dx {
        let probe = FvSolver::new(field.clone(), &u0, region.clone(), dx, f64::MIN_POSITIVE)?;
        let speed = probe.cfl_number(1.0);
        let dt = if speed > 0.0 { fv.cfl / speed } else { dx };
        let u = fv_solve(&field, &u0, &region, dx, dt, &snapshots)?;
        let d = l1_distance(&u, &reference, t_final, &region, dx)?;
        rows.push(vec![num(dx), num(dt), num(dt * speed), num(d), num(ref_mass), num(d / ref_mass.max(f64::MIN_POSITIVE))]);
        pts.push((dx, d));
        let e = eulerian_residual(&u, &field, &phi, Quadrature::new(dx, dx)?)?;
        let big_u = pullback_along_flow(&u, &grid)?;
        let l = lagrangian_residual(&big_u, &big_r, &phi, &grid, floor)?;
        res.push(vec![num(dx), num(e.value), num(l.value)]);
    }
    ctx.out.table(
        "uniqueness.csv",
        &["dx", "dt", "cfl", "l1_distance", "reference_l1_norm", "relative"],
        &rows,
    )?;
    ctx.out.table("fv_residuals.csv", &["dx", "eulerian", "lagrangian"], &res)?;
    let lag = lagrangian_solution(&field, &grid, u0)?;
    let l = lagrangian_residual(&lag, &big_r, &phi, &grid, floor)?;
    ctx.out.table(
        "lagrangian_residual.csv",
        &["dy", "value", "interior", "initial"],
        &[vec![num(grid.spacing()), num(l.value), num(l.interior), num(l.initial)]],
    )?;
    let chart = Chart::new("Finite volumes against the Lagrangian solution", "dx", "L1 distance")
        .log_x()
        .line("||fv - lagrangian||", pts);
    ctx.out.svg("uniqueness.svg", &chart)
}
