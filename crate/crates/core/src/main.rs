fn main() -> std::process::ExitCode {
    partreg::cli::main()
}
