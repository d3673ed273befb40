fn main() -> std::process::ExitCode {
    hydra_api::cli::main()
}
