fn main() -> std::process::ExitCode {
    glosslm::cli::main()
}
