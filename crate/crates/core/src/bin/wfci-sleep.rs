fn main() -> std::process::ExitCode {
    wfci_sleep::cli::main()
}
