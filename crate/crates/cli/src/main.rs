fn main() {
    let argv: Vec<String> = std::env::args().collect();
    std::process::exit(physio_fusion_cli::run(&argv));
}
