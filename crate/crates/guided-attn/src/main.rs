fn main() {
    std::process::exit(guided_attn::cli::run());
}
