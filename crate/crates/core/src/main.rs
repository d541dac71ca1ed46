fn main() {
    std::process::exit(sparse_memory_lab::experiments::cli::cli_main(std::env::args_os()));
}
