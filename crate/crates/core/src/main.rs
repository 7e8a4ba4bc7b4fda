fn main() {
    std::process::exit(zo_meshopt::cli::run(std::env::args_os()));
}
