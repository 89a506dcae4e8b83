fn main() {
    bbtrain_cli::init_logging();
    std::process::exit(bbtrain_cli::main_with_args(std::env::args_os()));
}
