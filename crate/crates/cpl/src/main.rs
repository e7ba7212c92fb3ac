fn main() {
    std::process::exit(cpl::run());
}
