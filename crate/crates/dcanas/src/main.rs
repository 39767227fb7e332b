fn main() {
    std::process::exit(dcanas::cli::run_from_env());
}
