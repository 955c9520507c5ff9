//! Runs the finite-difference gradient checker over every layer family and
//! the two composed training graphs, printing the max relative error per
//! family.

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let seed = 42;
    let report = vseg::models::grad_check_report(seed)?;
    let mut worst: f64 = 0.0;
    for (family, err) in &report {
        println!("{family:<24} max relative error {err:.3e}");
        worst = worst.max(*err);
    }
    println!(
        "\nworst {:.3e} -> {}",
        worst,
        if worst < 1e-4 { "OK" } else { "FAILED" }
    );
    Ok(())
}
