use injected_core::cli;

fn main() {
    std::process::exit(cli::run());
}
