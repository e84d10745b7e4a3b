fn main() {
    std::process::exit(attn_bilstm::cli::main());
}
