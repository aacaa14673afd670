fn main() {
    std::process::exit(manifold_conformal::cli::main_with_args(std::env::args_os()));
}
