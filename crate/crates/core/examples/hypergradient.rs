//! Finder meta-gradient on one training iteration: finite differences around
//! theta against differentiating through the unrolled inner step.

use std::time::Instant;

use mgr::augment::TransformBatch;
use mgr::bench::{make_benchmark, BenchmarkSpec};
use mgr::diffcore::{RngStream, Tensor};
use mgr::metalearn::{
    cosine, meta_gradient_exact, meta_gradient_fd, InnerStep, IterationProblem, MetaConfig, PseudoDraw,
};
use mgr::models::{sample_prior, Architecture, Finder, FinderVariant, MainModel};
use mgr::Result;

fn main() -> Result<()> {
    let bench = make_benchmark(&BenchmarkSpec::default(), 0)?;
    let mut rng = RngStream::new(0, "hypergradient-example");
    let (batch, pseudo_batch) = (64, 64);

    for width in [16, 64, 128] {
        let cfg = MetaConfig {
            hidden: vec![width, width],
            ..MetaConfig::default()
        };
        let arch = Architecture {
            input_dim: 2,
            hidden: cfg.hidden.clone(),
            feature_dim: cfg.feature_dim,
            classes: 8,
            aux_head: false,
        };
        let theta = MainModel::new(&arch, &mut rng)?.params();
        // a finder away from its identity initialization
        let phi: Vec<Tensor> = Finder::new(FinderVariant::ResidualMlp, 3, &mut rng)?
            .params()
            .iter()
            .map(|p| rng.normal_tensor(p.shape()).scaled(0.3))
            .collect();
        let pseudo = PseudoDraw {
            z: sample_prior(pseudo_batch, 3, &mut rng),
            y: (0..pseudo_batch).map(|_| rng.below(8)).collect(),
            transform: TransformBatch::sample(&cfg.transform, pseudo_batch, 2, &mut rng)?,
            latent_noise: Tensor::zeros(&[pseudo_batch, 3]),
        };
        let idx: Vec<usize> = (0..batch).collect();
        let x = bench.train.x.select_rows(&idx);
        let y: Vec<usize> = idx.iter().map(|&i| bench.train.y[i]).collect();
        let problem = IterationProblem::new(&cfg, &arch, &bench.generator, (&x, &y), &pseudo)
            .with_val(&bench.val.x, &bench.val.y);

        let step = |eps_const| InnerStep {
            eta: 0.05,
            lambda: 1.0,
            eps_const,
        };
        let t0 = Instant::now();
        let exact = meta_gradient_exact(&problem, &theta, &phi, step(0.01))?;
        let t_exact = t0.elapsed();
        print!("width {width:>3}: exact {:>6.2} ms", t_exact.as_secs_f64() * 1e3);
        for c in [0.01, 1e-3] {
            let t0 = Instant::now();
            let fd = meta_gradient_fd(&problem, &theta, &phi, step(c))?;
            print!(
                " | fd c={c:<5} {:>6.2} ms, cosine {:.5}",
                t0.elapsed().as_secs_f64() * 1e3,
                cosine(&fd.grad, &exact.grad)
            );
        }
        println!();
    }
    Ok(())
}
