//! Quick built-in checks of the numerical core: gradients, extraction
//! geometry, oracle spot values and the 3GPP baseline.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{grad_check, GradCheckOptions, Graph, Result as AdResult, Tensor, Var};
use crate::baselines::{gpp_umi_pathloss, GppConfig};
use crate::extract::align_and_extract;
use crate::model::{ModelConfig, ModelError, ModelInput, SurrogateModel};
use crate::oracle::{foliage_loss_db, fspl_db, path_loss, LinkOutcome, OracleConfig};
use crate::scene::{distance_3d, Point3, Scene};

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Suite {
    pub name: &'static str,
    pub checks: Vec<Check>,
}

impl Suite {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

fn check(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Check {
    Check {
        name: name.into(),
        passed,
        detail: detail.into(),
    }
}

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let d: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::from_f64(shape, &d).expect("shape")
}

type OpFn = fn(&mut Graph<f64>, &[Var]) -> AdResult<Var>;

pub fn gradient_suite() -> Suite {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let ops: Vec<(&str, Vec<Vec<usize>>, OpFn)> = vec![
        ("matmul", vec![vec![3, 4], vec![4, 2]], |g, v| {
            g.matmul(v[0], v[1])
        }),
        ("add", vec![vec![2, 3, 4], vec![4]], |g, v| {
            g.add(v[0], v[1])
        }),
        ("softmax", vec![vec![3, 5]], |g, v| g.softmax(v[0])),
        ("layer_norm", vec![vec![3, 6], vec![6], vec![6]], |g, v| {
            g.layer_norm(v[0], v[1], v[2], 1e-5)
        }),
        ("gelu", vec![vec![4, 4]], |g, v| g.gelu(v[0])),
        (
            "linear",
            vec![vec![2, 3, 4], vec![4, 5], vec![5]],
            |g, v| g.linear(v[0], v[1], v[2]),
        ),
        ("concat+slice", vec![vec![2, 3], vec![2, 2]], |g, v| {
            let c = g.concat(&[v[0], v[1]], 1)?;
            g.slice(c, 1, 1, 4)
        }),
        ("transpose+mean", vec![vec![2, 3, 4]], |g, v| {
            let t = g.transpose(v[0])?;
            let s = g.scale(t, 1.5)?;
            g.mean(s)
        }),
    ];
    let mut checks = Vec::new();
    for (name, shapes, op) in ops {
        let inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| rand_t(&mut rng, s)).collect();
        let mut probe = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| probe.constant(t.clone())).collect();
        let out = op(&mut probe, &vars).expect("op runs");
        let target = rand_t(&mut rng, probe.shape(out));
        let opts = GradCheckOptions {
            tol: 1e-6,
            floor: 1e-4,
            h: 1e-3,
            ridders: true,
            ..GradCheckOptions::default()
        };
        let r = grad_check(
            |g, v| {
                let y = op(g, v)?;
                g.mse_loss(y, &target)
            },
            &inputs,
            opts,
        );
        checks.push(match r {
            Ok(r) => check(
                name,
                r.passed(),
                format!("max rel err {:.2e}", r.max_rel_err),
            ),
            Err(e) => check(name, false, e.to_string()),
        });
    }
    let cfg = ModelConfig {
        patch_size: 3,
        dim: 8,
        layers: 2,
        heads: 2,
        mlp_dim: 8,
        ..ModelConfig::default()
    };
    let model = SurrogateModel::<f64>::new(cfg, 2).expect("valid config");
    let x = ModelInput {
        patches: (0..3 * 3 * cfg.patch_features())
            .map(|_| rng.gen_range(0.0..1.0))
            .collect(),
        patch_rows: 3,
        distance_m: 120.0,
    };
    let target = Tensor::from_f64(&[1], &[0.5]).expect("shape");
    let r = grad_check(
        |g, vars| {
            let nodes = model.record(g, vars, &[&x]).map_err(|e| match e {
                ModelError::Autodiff(e) => e,
                other => panic!("{other}"),
            })?;
            g.mse_loss(nodes.output, &target)
        },
        model.params(),
        GradCheckOptions {
            tol: 1e-3,
            ..GradCheckOptions::default()
        },
    );
    checks.push(match r {
        Ok(r) => check(
            "transformer loss",
            r.passed(),
            format!("max rel err {:.2e}", r.max_rel_err),
        ),
        Err(e) => check("transformer loss", false, e.to_string()),
    });
    Suite {
        name: "gradients",
        checks,
    }
}

pub fn geometry_suite() -> Suite {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let scene = Scene::empty("g", 300, 300);
    let (mut shape_ok, mut align_ok, mut zero_ok) = (true, true, true);
    let mut detail = String::new();
    for _ in 0..200 {
        let tx = Point3::new(rng.gen_range(50.0..250.0), rng.gen_range(50.0..250.0), 9.0);
        let rx = Point3::new(rng.gen_range(0.0..300.0), rng.gen_range(0.0..300.0), 1.5);
        let p = [3usize, 5, 9, 33][rng.gen_range(0..4)];
        let Ok(e) = align_and_extract(&scene, &tx, &rx, p, 1) else {
            continue;
        };
        let gap = tx.distance_2d(&rx).round() as usize;
        // Count patch rows by walking pixel rows upward from the tx pixel.
        let half = (p - 1) / 2;
        let mut above = 0;
        while (above + 1) * p <= gap + half {
            above += 1;
        }
        if e.patch_rows != 3 + above || e.rows_px() % p != 0 || e.cols_px() != 3 * p {
            shape_ok = false;
            detail = format!("P={p} gap={gap}: R={}", e.patch_rows);
        }
        let (rx_row, rx_col) = e.rx_position();
        let (tx_row, tx_col) = e.tx_pixel();
        if (rx_col - tx_col as f64).abs() > 0.5 || rx_row >= tx_row as f64 {
            align_ok = false;
        }
        if e.pixels.iter().any(|&v| v != 0.0) {
            zero_ok = false;
        }
    }
    Suite {
        name: "geometry",
        checks: vec![
            check("shape law", shape_ok, detail),
            check("rx alignment", align_ok, ""),
            check("empty scene extracts are zero", zero_ok, ""),
        ],
    }
}

pub fn oracle_suite() -> Suite {
    let cfg = OracleConfig::default();
    let f = cfg.carrier_hz;
    let fs1 = fspl_db(1.0, f).unwrap_or(f64::NAN);
    let fs100 = fspl_db(100.0, f).unwrap_or(f64::NAN);
    let mut checks = vec![
        check(
            "fspl 1 m",
            (fs1 - 61.39).abs() <= 0.01,
            format!("{fs1:.4} dB"),
        ),
        check(
            "fspl 100 m",
            (fs100 - 101.39).abs() <= 0.01,
            format!("{fs100:.4} dB"),
        ),
    ];

    // Ten pixels of 20 m trees crossed at 15 m: fully inside the canopy band.
    let mut canopy = Scene::empty("c", 40, 10);
    for col in 10..20 {
        let i = canopy.index(col, 5);
        canopy.foliage_height_m[i] = 20.0;
    }
    let fl = foliage_loss_db(
        &canopy,
        &Point3::new(5.0, 5.5, 15.0),
        &Point3::new(30.0, 5.5, 15.0),
        &cfg,
    );
    checks.push(check(
        "10 m canopy crossing",
        (fl - 25.0).abs() < 1e-9,
        format!("{fl} dB"),
    ));

    // Direct path blocked by a central block; one wall along y = 5 reflects.
    let mut s = Scene::empty("r", 100, 60);
    for row in 0..60 {
        for col in 0..100 {
            let wall = row < 5;
            let block = (45..55).contains(&col) && (20..40).contains(&row);
            if wall || block {
                let i = s.index(col, row);
                s.building_mask[i] = 1;
                s.building_height_m[i] = 30.0;
            }
        }
    }
    let tx = Point3::new(10.0, 30.5, 9.0);
    let rx = Point3::new(90.0, 30.5, 1.5);
    let unfolded = distance_3d(&Point3::new(10.0, -20.5, 9.0), &rx);
    let expected = fspl_db(unfolded, f).unwrap_or(f64::NAN) + 6.4;
    let (ok, d) = match path_loss(&s, &tx, &rx, &cfg) {
        Ok(LinkOutcome::Connected {
            pathloss_db, los, ..
        }) => (
            !los && (pathloss_db - expected).abs() < 1e-9,
            format!("{pathloss_db:.6} dB"),
        ),
        other => (false, format!("{other:?}")),
    };
    checks.push(check("single reflection", ok, d));

    let open = Scene::empty("o", 200, 200);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let tx = Point3::new(rng.gen_range(1.0..199.0), rng.gen_range(1.0..199.0), 9.0);
        let rx = Point3::new(rng.gen_range(1.0..199.0), rng.gen_range(1.0..199.0), 1.5);
        if let Ok(LinkOutcome::Connected { pathloss_db, .. }) = path_loss(&open, &tx, &rx, &cfg) {
            let fs = fspl_db(distance_3d(&tx, &rx), f).unwrap_or(f64::NAN);
            worst = worst.max((pathloss_db - fs).abs());
        } else {
            worst = f64::INFINITY;
        }
    }
    checks.push(check(
        "open LOS equals fspl",
        worst < 1e-9,
        format!("max diff {worst:.1e} dB"),
    ));
    Suite {
        name: "oracle",
        checks,
    }
}

pub fn baseline_suite() -> Suite {
    let c = GppConfig::default();
    let los = gpp_umi_pathloss(99.0, 100.0, &c, true).unwrap_or(f64::NAN);
    let nlos = gpp_umi_pathloss(99.0, 100.0, &c, false).unwrap_or(f64::NAN);
    Suite {
        name: "3gpp",
        checks: vec![
            check(
                "LOS 100 m",
                (los - 103.34).abs() <= 0.01,
                format!("{los:.4} dB"),
            ),
            check(
                "NLOS 100 m",
                (nlos - 123.82).abs() <= 0.01,
                format!("{nlos:.4} dB"),
            ),
        ],
    }
}

pub fn run_all() -> Vec<Suite> {
    vec![
        gradient_suite(),
        geometry_suite(),
        oracle_suite(),
        baseline_suite(),
    ]
}

#[cfg(test)]
mod tests {
    #[test]
    fn all_suites_pass() {
        for s in super::run_all() {
            for c in &s.checks {
                assert!(c.passed, "{}: {} ({})", s.name, c.name, c.detail);
            }
        }
    }
}
