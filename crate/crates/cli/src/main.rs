fn main() {
    std::process::exit(sci_unfold_cli::run_command(std::env::args_os().skip(1)));
}
