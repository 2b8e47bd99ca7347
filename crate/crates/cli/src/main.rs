fn main() {
    std::process::exit(facediff_cli::dispatch(std::env::args().skip(1).collect()));
}
