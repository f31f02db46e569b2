fn main() {
    let argv: Vec<String> = std::env::args().collect();
    std::process::exit(spongebench::cli::cli_main(&argv));
}
