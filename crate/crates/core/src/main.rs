fn main() {
    std::process::exit(tfbs_moe::cli::main());
}
