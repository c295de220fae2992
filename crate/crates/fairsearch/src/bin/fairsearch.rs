fn main() {
    std::process::exit(fairsearch::cli::run());
}
