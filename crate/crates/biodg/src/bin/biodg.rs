fn main() {
    if let Err(e) = biodg::cli::main() {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
