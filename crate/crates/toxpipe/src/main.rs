fn main() {
    let code = toxpipe::cli::run(std::env::args());
    std::process::exit(code);
}
