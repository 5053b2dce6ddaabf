fn main() {
    std::process::exit(centermask::pipeline::cli(std::env::args()));
}
