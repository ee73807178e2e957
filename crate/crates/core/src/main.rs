fn main() -> std::process::ExitCode {
    sunrise_core::cli::main()
}
