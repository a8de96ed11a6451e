fn main() {
    std::process::exit(sidsearch::cli::main());
}
