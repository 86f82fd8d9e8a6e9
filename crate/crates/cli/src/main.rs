fn main() {
    std::process::exit(starfm_cli::run::main_with_args(std::env::args_os()));
}
