fn main() {
    std::process::exit(zhop::cli::run_cli());
}
