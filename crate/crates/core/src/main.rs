fn main() {
    std::process::exit(sqlrank::cli::run(std::env::args_os()));
}
