fn main() {
    std::process::exit(planexec::cli::dispatch(std::env::args_os()));
}
