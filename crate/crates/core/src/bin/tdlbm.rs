fn main() {
    std::process::exit(tdlbm::cli::main_from_env());
}
