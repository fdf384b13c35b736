//! Temporary diagnostic: singular-value decay of the EQ constraint systems
//! and the tail energy of b in the left singular basis. The tail at k is a
//! lower bound on the residual of ANY k-column approximation of b, so it
//! certifies whether a Q-sparse rule at a given tolerance can exist.

use dtm::bundle::LiftingKind;
use dtm::config::RunConfig;
use dtm::offline::{eq_linear_system, eq_nonlinear_system, project_coeffs, run_offline};
use nalgebra::{DMatrix, DVector};

fn tails(label: &str, g: &DMatrix<f64>, b: &DVector<f64>, marks: &[usize]) {
    let b_norm = b.norm();
    let svd = g.clone().svd(true, false);
    let u = svd.u.as_ref().expect("u");
    let s = &svd.singular_values;
    let beta = u.transpose() * b; // coefficients of b in left singular basis
    let total2: f64 = beta.iter().map(|x| x * x).sum();
    let outside2 = (b_norm * b_norm - total2).max(0.0); // component outside range(G)
    println!(
        "{label}: m={} n={} ||b||={b_norm:.4e} outside-range={:.3e}",
        g.nrows(),
        g.ncols(),
        outside2.sqrt()
    );
    let r = s.len();
    for i in [0, 9, 19, 37, 49, 93, 114, 161, 199, 249, 299, 399, 499] {
        if i < r {
            println!("  sigma[{:>3}]/sigma[0] = {:.3e}", i + 1, s[i] / s[0]);
        }
    }
    for &k in marks {
        if k <= r {
            let tail2: f64 = (k..r).map(|i| beta[i] * beta[i]).sum::<f64>() + outside2;
            println!(
                "  best-possible residual with ANY {k:>3}-dim subspace: {:.3e} (rel {:.3e})",
                tail2.sqrt(),
                tail2.sqrt() / b_norm
            );
        }
    }
}

fn main() {
    let which = std::env::args().nth(1).unwrap_or_else(|| "both".into());

    if which == "airfoil" || which == "both" {
        let mut c = RunConfig::for_problem("laplace-airfoil");
        c.refinement = Some(12);
        c.n_train_r = 4; // skip estimator cost, irrelevant here
        let out = run_offline(&c).expect("airfoil offline");
        let z = &out.bundle.z;
        let z6 = z.columns(0, 6.min(z.ncols())).into_owned();
        let lifting = match &out.bundle.lifting {
            LiftingKind::Eim(l) => l,
            _ => unreachable!(),
        };
        let params = dtm::offline::sample_params(
            &out.disc.problem.param_box(),
            c.n_train,
            c.seed,
        );
        let (g, b) = eq_linear_system(&out.disc, &params, &z6, lifting).expect("eq system");
        tails("airfoil N=6", &g, &b, &[20, 50, 94, 115, 140, 162, 200, 250]);
    }

    if which == "burgers" || which == "both" {
        let mut c = RunConfig::for_problem("burgers-bump");
        c.refinement = Some(3);
        c.n_train = 40;
        c.n_train_eq = 10;
        c.n_modes = Some(10);
        c.n_train_r = 4;
        let out = run_offline(&c).expect("burgers offline");
        let z = &out.bundle.z;
        let y = out.bundle.y.as_ref().expect("test space");
        let e = match &out.bundle.lifting {
            LiftingKind::Reference { e, .. } => e.clone(),
            _ => unreachable!(),
        };
        // Training states only (the 10 extras add rows of the same character).
        let states: Vec<(Vec<f64>, DVector<f64>)> = out
            .snapshots
            .iter()
            .map(|(mu, u)| {
                (mu.clone(), project_coeffs(&out.disc.ip, z, u, &e))
            })
            .collect();
        let (g, b) = eq_nonlinear_system(&out.disc, &states, z, y, &e).expect("eq system");
        tails("burgers N=10 J=20", &g, &b, &[21, 38, 60, 100, 150, 250, 350, 450]);
    }
}
