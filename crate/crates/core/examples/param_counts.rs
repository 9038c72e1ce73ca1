//! Prints parameter counts for every backbone variant at default width.
use erfseg::model::{Network, NetworkSpec, Variant};

fn main() -> erfseg::Result<()> {
    for v in Variant::ALL {
        let net = Network::build(&NetworkSpec::new(v))?;
        let n: usize = net.param_defs().iter().map(|d| d.shape.iter().product::<usize>()).sum();
        println!("{:<8} {:>10} ({:.2}M)", v.name(), n, n as f64 / 1e6);
    }
    Ok(())
}
