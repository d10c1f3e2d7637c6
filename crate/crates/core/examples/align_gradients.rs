//! Finite-difference checks of the alignment losses and of a loss composed
//! with the resampler, differentiated with respect to every parameter.

use pbskit::align::{
    grad_check, loss_global, loss_itc, loss_local, resample_traced, AttentionWeights, ResamplerParams, TokenMatrix,
};
use pbskit::seed;

fn params_from(xs: &[TokenMatrix]) -> ResamplerParams {
    let layer = AttentionWeights {
        wq: xs[1].clone(),
        wk: xs[2].clone(),
        wv: xs[3].clone(),
        wo: xs[4].clone(),
    };
    ResamplerParams::new(xs[0].clone(), vec![layer]).expect("square weights")
}

pub fn run_example() -> anyhow::Result<f64> {
    let mut rng = seed::scoped_rng(3, "grad-demo");
    let (n, m, d) = (2, 3, 4);
    let vp = TokenMatrix::random_normal(n, d, 1.0, &mut rng);
    let vc = TokenMatrix::random_normal(n, d, 1.0, &mut rng);
    let mut worst = 0.0f64;

    let pair = |f: fn(&TokenMatrix, &TokenMatrix) -> Result<pbskit::align::LossValue, pbskit::align::AlignError>| {
        move |xs: &[TokenMatrix]| {
            let l = f(&xs[0], &xs[1]).expect("shapes match");
            (l.value, vec![l.grad_a, l.grad_b])
        }
    };
    for (name, rep) in [
        ("L_global", grad_check(pair(loss_global), &[vp.clone(), vc.clone()], 1e-5, 1e-4)),
        ("L_local", grad_check(pair(loss_local), &[vp.clone(), vc.clone()], 1e-5, 1e-4)),
        (
            "ITC",
            grad_check(
                |xs: &[TokenMatrix]| {
                    let l = loss_itc(&xs[0], &xs[1], 0.5).expect("non-zero rows");
                    (l.value, vec![l.grad_a, l.grad_b])
                },
                &[vp.clone(), vc.clone()],
                1e-5,
                1e-4,
            ),
        ),
    ] {
        println!("{name:<9} max rel err {:.2e} over {} coords", rep.max_rel_error, rep.coordinates);
        worst = worst.max(rep.max_rel_error);
    }

    // resample then L_local, gradients for latents, projections, and inputs
    let params = ResamplerParams::random(n, d, 1, &mut rng);
    let inputs = TokenMatrix::random_normal(m, d, 1.0, &mut rng);
    let mut xs: Vec<TokenMatrix> = params.tensors().into_iter().cloned().collect();
    xs.push(inputs);
    let target = vc.clone();
    let rep = grad_check(
        |xs: &[TokenMatrix]| {
            let p = params_from(xs);
            let trace = resample_traced(&p, &xs[5]).expect("dims match");
            let l = loss_local(&trace.output, &target).expect("shapes match");
            let (g, gi) = trace.backward(&p, &l.grad_a);
            let mut grads: Vec<TokenMatrix> = g.tensors().into_iter().cloned().collect();
            grads.push(gi);
            (l.value, grads)
        },
        &xs,
        1e-5,
        1e-4,
    );
    println!("resample∘L_local max rel err {:.2e} over {} coords", rep.max_rel_error, rep.coordinates);
    Ok(worst.max(rep.max_rel_error))
}

#[allow(dead_code)]
fn main() -> anyhow::Result<()> {
    run_example().map(|_| ())
}
