fn main() -> std::process::ExitCode {
    xprompt::cli::main()
}
