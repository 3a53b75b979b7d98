fn main() {
    std::process::exit(depth_transfer::cli::run(std::env::args_os()));
}
