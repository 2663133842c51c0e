fn main() {
    std::process::exit(gazefusion_cli::run());
}
