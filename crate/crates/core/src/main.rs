fn main() {
    std::process::exit(itemclip::cli::main());
}
