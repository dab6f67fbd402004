fn main() {
    std::process::exit(equipose::cli::main_with_args(std::env::args_os()));
}
