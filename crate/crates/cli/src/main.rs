fn main() {
    std::process::exit(weightscope_cli::run(std::env::args_os()));
}
