fn main() {
    std::process::exit(token_agg::cli::dispatch(std::env::args()));
}
