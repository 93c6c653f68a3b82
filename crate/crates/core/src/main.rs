fn main() { whitebed::cli::main(); }
