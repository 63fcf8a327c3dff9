fn main() {
    std::process::exit(bricks::cli::main(std::env::args_os()));
}
