fn main() {
    std::process::exit(tabprobe::cli::run(std::env::args_os()));
}
