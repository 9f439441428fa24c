fn main() {
    let args: Vec<String> = std::env::args().collect();
    std::process::exit(das_cli::run(&args));
}
