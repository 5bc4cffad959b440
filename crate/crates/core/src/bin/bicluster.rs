fn main() {
    std::process::exit(bicluster::cli::run());
}
