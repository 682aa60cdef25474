fn main() {
    std::process::exit(osa_detect::cli::main());
}
