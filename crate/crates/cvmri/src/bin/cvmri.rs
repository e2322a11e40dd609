fn main() {
    std::process::exit(cvmri::cli::main());
}
