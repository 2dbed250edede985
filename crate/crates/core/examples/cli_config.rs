//! Drives the batch runner from code: the same entry point the binary
//! uses, with a key=value file and flag overrides.
//!
//!     cargo run --release --example cli_config

fn main() -> std::io::Result<()> {
    let dir = std::env::temp_dir().join("recollide-example");
    std::fs::create_dir_all(&dir)?;
    let cfg = dir.join("tails.cfg");
    std::fs::write(&cfg, "regime = trap-n3\ns = 20,40,80,160\nbudget = 1e6\n")?;
    let out = dir.join("tails.json");
    let code = recollide::cli::main_with_args([
        "recollide",
        "tails",
        "--config",
        cfg.to_str().expect("utf-8 path"),
        "--seed",
        "3",
        "--out",
        out.to_str().expect("utf-8 path"),
    ]);
    println!("exit code {code}");
    print!("{}", std::fs::read_to_string(&out)?);
    Ok(())
}
