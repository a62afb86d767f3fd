fn main() {
    std::process::exit(mdm_cli::run(std::env::args_os()));
}
