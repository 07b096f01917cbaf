//! Finite-difference checks of every differentiable op and the shrunk model,
//! with 32-bit storage against 64-bit central differences.
//!
//! cargo run --release --example gradient_check

use returnformer::gradcheck::{model_gradient_error, op_suite, shrunk_config};
use returnformer::model::count_params;

fn main() {
    println!("{:<18} {:>12}", "op", "max rel err");
    for (name, err) in op_suite(1e-3) {
        println!("{name:<18} {err:>12.2e}");
    }
    let c = shrunk_config();
    println!(
        "{:<18} {:>12.2e}   ({} parameters)",
        "shrunk model",
        model_gradient_error(),
        count_params(&c)
    );
}
