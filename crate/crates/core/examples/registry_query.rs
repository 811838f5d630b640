//! Query a registry with the filter language and print matching rows.
//!
//! ```text
//! cargo run --release --example registry_query -- <registry> [table] [filter]
//! cargo run --release --example registry_query -- sho-grid/registry probes "probe-R2>0.9 & model-layer in {2,4}"
//! ```

use oscilloprobe::registry::Registry;

fn main() -> oscilloprobe::Result<()> {
    let mut args = std::env::args().skip(1);
    let root = args.next().unwrap_or_else(|| "registry".into());
    let table = args.next().unwrap_or_else(|| "models".into());
    let filter = args.next().unwrap_or_default();

    let reg = Registry::open(std::path::Path::new(&root))?;
    let t = reg.table(&table)?;
    let rows = t.query(&filter)?;
    println!("{}", t.columns().join(","));
    for r in &rows {
        println!("{}", r.join(","));
    }
    eprintln!("{} of {} rows match", rows.len(), t.len());
    Ok(())
}
