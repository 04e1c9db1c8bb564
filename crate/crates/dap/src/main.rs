fn main() {
    std::process::exit(dap::cli::run(std::env::args_os()));
}
