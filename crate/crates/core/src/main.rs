fn main() {
    std::process::exit(phasefield_xpinn::cli::run_command(std::env::args_os()));
}
