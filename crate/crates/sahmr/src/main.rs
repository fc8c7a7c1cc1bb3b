fn main() {
    std::process::exit(sahmr::cli::main_with(std::env::args_os()));
}
