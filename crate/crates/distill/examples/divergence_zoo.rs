//! Tour of the divergence measures: values on hand-picked distributions,
//! the bounded symmetric behavior of JSD, the infinite-support edge of
//! forward KL, and analytic gradients checked against finite differences.

use distill::divergence::{
    divergence, divergence_grad, hidden_divergence, Categorical, DivergenceKind, HiddenLossKind,
};

fn main() -> anyhow::Result<()> {
    let p = Categorical::new(vec![0.5, 0.5])?;
    let q = Categorical::new(vec![0.25, 0.75])?;

    println!("p = {:?}", p.probs());
    println!("q = {:?}\n", q.probs());
    for kind in [
        DivergenceKind::ForwardKl,
        DivergenceKind::ReverseKl,
        DivergenceKind::Jsd,
        DivergenceKind::SkewKl(0.1),
    ] {
        println!("{:>8}(p || q) = {:.6} nats", kind.name(), divergence(kind, &p, &q)?);
    }

    println!("\nJSD is symmetric and bounded by ln 2 = {:.6}:", std::f64::consts::LN_2);
    let disjoint_a = Categorical::new(vec![1.0, 0.0])?;
    let disjoint_b = Categorical::new(vec![0.0, 1.0])?;
    println!(
        "  JSD((1,0), (0,1)) = {:.6} (the maximum)",
        divergence(DivergenceKind::Jsd, &disjoint_a, &disjoint_b)?
    );
    println!(
        "  JSD(p, p)         = {:.6} (the minimum)",
        divergence(DivergenceKind::Jsd, &p, &p)?
    );

    println!("\nForward KL explodes when q lacks support where p has mass:");
    println!(
        "  KL((0.5,0.5) || (1,0)) = {}",
        divergence(DivergenceKind::ForwardKl, &p, &disjoint_a)?
    );

    println!("\nHidden-state losses compare vectors instead of distributions:");
    let u = [0.2, -1.0, 0.5];
    let v = [0.1, -0.8, 0.9];
    println!(
        "  softmax_jsd(u, v) = {:.6}",
        hidden_divergence(HiddenLossKind::SoftmaxJsd, &u, &v)?
    );
    println!(
        "  mse(u, v)         = {:.6}",
        hidden_divergence(HiddenLossKind::Mse, &u, &v)?
    );

    // Gradient sanity: central finite differences on the q side of JSD.
    let a = [0.3, -0.2, 0.9];
    let b = [0.0, 0.4, -0.5];
    let (_, db) = divergence_grad(DivergenceKind::Jsd, &a, &b)?;
    let h = 1e-5;
    println!("\nJSD gradient w.r.t. q-logits vs central differences:");
    for i in 0..b.len() {
        let mut bp = b;
        let mut bm = b;
        bp[i] += h;
        bm[i] -= h;
        let eval = |b: &[f64]| {
            divergence(
                DivergenceKind::Jsd,
                &Categorical::from_logits(&a),
                &Categorical::from_logits(b),
            )
            .unwrap()
        };
        let fd = (eval(&bp) - eval(&bm)) / (2.0 * h);
        println!("  d/db[{i}]: analytic {:+.8}  finite-diff {:+.8}", db[i], fd);
    }
    Ok(())
}
