//! Runs the default desk experiment for one seed and prints a summary.
//!
//! cargo run --release --example desk_run -- [seed] [epochs] [gamma]

use std::time::Instant;

use distilab::autodiff::softmax_temp;
use distilab::data::{make_mixture, make_ood, MixtureConfig};
use distilab::distill::{be_student_spec, distill_be, distill_latentbe, DistillConfig};
use distilab::metrics::{entropy_histogram, evaluate, DEFAULT_ENTROPY_BINS};
use distilab::nets::{BeMlp, Classifier, ModelSpec, RankOneInit};
use distilab::optim::{train_teachers, OptimConfig};
use distilab::perturb::PerturbationKind;
use distilab::subspace::{default_grid, endpoint_point, line_scan};
use distilab::{rng, Result};

fn main() -> Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let seed: u64 = args.get(1).map_or(0, |s| s.parse().expect("seed"));
    let epochs: usize = args.get(2).map_or(200, |s| s.parse().expect("epochs"));
    let gamma: Option<f64> = args.get(3).map(|s| s.parse().expect("gamma"));

    let splits = make_mixture(&MixtureConfig::default(), seed)?;
    let spec = ModelSpec::plain(2, 3, vec![64, 64]);
    let ocfg = OptimConfig {
        epochs,
        seed,
        ..OptimConfig::default()
    };
    let t0 = Instant::now();
    let teachers = train_teachers(&spec, &splits.train, 2, &ocfg)?;
    println!("teachers trained in {:.1?}", t0.elapsed());
    for (i, t) in teachers.iter().enumerate() {
        let r = evaluate(t, &splits.val, &splits.test)?;
        let train = evaluate(t, &splits.val, &splits.train)?;
        println!("teacher {i}: train acc {:.4} test acc {:.4} nll {:.4}", train.acc, r.acc, r.nll_mean);
    }

    let base = DistillConfig {
        gamma,
        ..DistillConfig::default()
    };
    let t0 = Instant::now();
    let be0 = BeMlp::init(&be_student_spec(&spec, 2), RankOneInit::RandomSign, &mut rng::stream(seed, rng::INIT))?;
    let be = distill_be(&teachers, be0, &splits.train, &base, &ocfg, None)?;
    println!("be trained in {:.1?}", t0.elapsed());
    let grid = default_grid();
    let scan = line_scan(&be, &splits.train, &splits.test, &grid)?;
    println!("be barrier {:.4}", scan.barrier);

    for kind in [PerturbationKind::None, PerturbationKind::TdivSdiv] {
        let cfg = DistillConfig {
            perturbation: kind,
            ..base.clone()
        };
        let t0 = Instant::now();
        let (avg, lbe) = distill_latentbe(&teachers, &spec, &splits.train, &cfg, &ocfg, None)?;
        let elapsed = t0.elapsed();
        let scan = line_scan(&lbe, &splits.train, &splits.test, &grid)?;
        let at = |t: f64| scan.points.iter().find(|p| p.t == t).unwrap().test_nll;
        let r = evaluate(&avg, &splits.val, &splits.test)?;
        let tp = endpoint_point(0, &lbe, &splits.train, &splits.test)?;
        let ood = make_ood(&splits.test, 5.0, seed)?;
        let h_in = entropy_histogram(&softmax_temp(&avg.predictive_logits(&splits.test.x)?, 1.0)?, DEFAULT_ENTROPY_BINS, splits.test.split)?;
        let h_ood = entropy_histogram(&softmax_temp(&avg.predictive_logits(&ood.x)?, 1.0)?, DEFAULT_ENTROPY_BINS, ood.split)?;
        println!(
            "latentbe {kind}: {elapsed:.1?} barrier {:.4} nll avg {:.4} ends ({:.4}, {:.4}) div_train {:.5} acc {:.4} H in {:.3} ood {:.3}",
            scan.barrier,
            r.nll_mean,
            at(0.0),
            at(1.0),
            tp.div_train,
            r.acc,
            h_in.mean,
            h_ood.mean
        );
    }
    Ok(())
}
