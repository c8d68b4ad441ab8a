fn main() {
    std::process::exit(chitrarth::cli::run());
}
