fn main() {
    std::process::exit(snaplab_cli::dispatch(std::env::args_os()));
}
