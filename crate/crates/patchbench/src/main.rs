fn main() {
    std::process::exit(patchbench::run_cli());
}
