//! Finite-difference check of every differentiable operator, plus a
//! deliberately broken backward rule that the check must flag.
//!
//! cargo run --release --example gradient_check

use cadcrafter::autodiff::{negative_control, operator_checks};

fn main() {
    for (name, r) in operator_checks() {
        println!("{name:<20} max rel err {:.2e} over {} entries", r.max_rel_err, r.checked);
    }
    let neg = negative_control();
    println!("corrupted matmul     max rel err {:.2e} (analytic {:.4}, numeric {:.4})", neg.max_rel_err, neg.analytic, neg.numeric);
}
