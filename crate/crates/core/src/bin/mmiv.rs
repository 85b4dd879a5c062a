//! The `mmiv` binary: see `mmiv --help`.

fn main() {
    std::process::exit(mmiv::cli::run());
}
