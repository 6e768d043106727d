fn main() {
    std::process::exit(grmoe_cli::run(std::env::args_os()));
}
