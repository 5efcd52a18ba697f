fn main() {
    std::process::exit(tsb_pipeline::main_with(std::env::args_os()));
}
