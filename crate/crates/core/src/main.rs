fn main() {
    std::process::exit(spatial_fclust::cli::main_with_args(std::env::args_os()));
}
