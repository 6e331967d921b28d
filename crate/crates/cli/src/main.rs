fn main() {
    std::process::exit(convsynth_cli::main_with(std::env::args_os()));
}
