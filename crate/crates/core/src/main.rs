fn main() {
    std::process::exit(clmarl::cli::run(std::env::args_os()));
}
