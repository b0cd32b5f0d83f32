//! Reverse-mode gradients of a small network loss, checked against finite
//! differences.

use cu_lab::rng::Rng;
use cu_lab::tensor::{gradcheck, Graph, Tensor, Var};

fn main() -> cu_lab::Result<()> {
    let mut rng = Rng::new(3);
    let mut random = |r, c| Tensor::matrix(r, c, (0..r * c).map(|_| rng.standard_normal()).collect());
    let (x, w, b) = (random(5, 3)?, random(3, 4)?, random(1, 4)?);

    let loss = |g: &mut Graph, v: &[Var]| {
        let h = g.matmul(v[0], v[1])?;
        let b = g.repeat_rows(v[2], 5)?;
        let h = g.add(h, b)?;
        let h = g.tanh(h)?;
        let s = g.softmax_rows(h)?;
        let l = g.log(s)?;
        let l = g.sum(l, None)?;
        g.neg(l)
    };

    let mut g = Graph::new();
    let vars = [g.leaf(x.clone()), g.leaf(w.clone()), g.leaf(b.clone())];
    let out = loss(&mut g, &vars)?;
    g.backward(out)?;
    println!("loss = {:.6}", g.value(out).item());
    println!("dL/db = {:?}", g.grad(vars[2]).unwrap());

    let check = gradcheck(loss, &[x, w, b], 1e-6, 1e-8)?;
    println!("{} partials, max relative error {:.2e}", check.checked, check.max_rel_error);
    Ok(())
}
