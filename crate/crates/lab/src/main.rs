fn main() -> std::process::ExitCode {
    addlab::cli::main()
}
