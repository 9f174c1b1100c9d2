fn main() {
    std::process::exit(coiltsc::cli::run(std::env::args_os()));
}
